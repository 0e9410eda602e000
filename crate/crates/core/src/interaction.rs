//! Click simulation: next click from the largest error region, initial
//! clicks for training, the decaying continuation schedule and synthetic
//! initial masks for correction mode.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::click::{Click, ClickSet, Polarity};
use crate::error::{Error, Result};
use crate::evaluation::InteractiveSegmenter;
use crate::mask::Mask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Squared distance reported for pixels with no target anywhere.
pub const FAR: i64 = 1 << 40;

/// Exact squared Euclidean distance from every pixel to the nearest pixel
/// where `targets` is set (row-major `h×w`). Separable lower-envelope
/// transform; pixels in `targets` get 0.
pub fn squared_distance(targets: &[bool], h: usize, w: usize) -> Vec<i64> {
    assert_eq!(targets.len(), h * w, "target grid size");
    let mut grid: Vec<i64> = targets.iter().map(|&t| if t { 0 } else { FAR }).collect();
    let mut f = Vec::new();
    let mut d = Vec::new();
    for c in 0..w {
        f.clear();
        f.extend((0..h).map(|r| grid[r * w + c]));
        lower_envelope(&f, &mut d);
        for r in 0..h {
            grid[r * w + c] = d[r];
        }
    }
    for r in 0..h {
        f.clear();
        f.extend_from_slice(&grid[r * w..(r + 1) * w]);
        lower_envelope(&f, &mut d);
        grid[r * w..(r + 1) * w].copy_from_slice(&d);
    }
    grid.iter_mut().for_each(|v| *v = (*v).min(FAR));
    grid
}

fn lower_envelope(f: &[i64], d: &mut Vec<i64>) {
    let n = f.len();
    d.clear();
    d.resize(n, FAR);
    if n == 0 {
        return;
    }
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let key = |q: usize| (f[q] + (q * q) as i64) as f64;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = (key(q) - key(p)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as i64 - p as i64;
        *out = dq * dq + f[p];
    }
}

/// Squared distance from each pixel of `region` to the nearest pixel
/// outside it, with everything beyond the frame counting as outside.
/// Pixels not in `region` get 0.
pub fn inner_distance(region: &[bool], h: usize, w: usize) -> Vec<i64> {
    let (ph, pw) = (h + 2, w + 2);
    let outside: Vec<bool> = (0..ph * pw)
        .map(|i| {
            let (r, c) = (i / pw, i % pw);
            r == 0 || c == 0 || r == ph - 1 || c == pw - 1 || !region[(r - 1) * w + c - 1]
        })
        .collect();
    let padded = squared_distance(&outside, ph, pw);
    (0..h * w).map(|i| padded[(i / w + 1) * pw + i % w + 1]).collect()
}

/// 4-connected components of set pixels, each listed in raster order;
/// components are ordered by their first pixel.
pub fn components(bits: &[bool], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut label = vec![usize::MAX; h * w];
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !bits[start] || label[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut members = Vec::new();
        label[start] = id;
        stack.push(start);
        while let Some(i) = stack.pop() {
            members.push(i);
            let (r, c) = (i / w, i % w);
            let mut visit = |j: usize| {
                if bits[j] && label[j] == usize::MAX {
                    label[j] = id;
                    stack.push(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
        members.sort_unstable();
        out.push(members);
    }
    out
}

/// Pixel of `region` farthest from its outside, ties to the smallest row
/// then column. `None` for an empty region.
pub fn deepest_pixel(region: &[bool], h: usize, w: usize) -> Option<(usize, usize)> {
    let dist = inner_distance(region, h, w);
    let mut best: Option<(usize, i64)> = None;
    for (i, &on) in region.iter().enumerate() {
        if on && best.is_none_or(|(_, d)| dist[i] > d) {
            best = Some((i, dist[i]));
        }
    }
    best.map(|(i, _)| (i / w, i % w))
}

/// Next corrective click: the deepest pixel of the largest 4-connected
/// component of `pred XOR gt`. Equal-size components resolve to the one
/// whose first raster pixel comes first. `ordinal` is left at 0.
pub fn next_click(pred: &Mask, gt: &Mask) -> Result<Option<Click>> {
    let err = pred.xor(gt)?;
    let (h, w) = (gt.height(), gt.width());
    let comps = components(err.bits(), h, w);
    let Some(largest) = comps.iter().reduce(|a, b| if b.len() > a.len() { b } else { a }) else {
        return Ok(None);
    };
    let mut region = vec![false; h * w];
    for &i in largest {
        region[i] = true;
    }
    let (row, col) = deepest_pixel(&region, h, w).expect("component is non-empty");
    let polarity = if gt.get(row, col) {
        Polarity::Positive
    } else {
        Polarity::Negative
    };
    Ok(Some(Click {
        row,
        col,
        polarity,
        ordinal: 0,
    }))
}

/// Parameters for [`initial_clicks`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialClickParams {
    /// Negatives are drawn from background pixels whose distance to the
    /// object lies in `[margin, 2·margin]`.
    pub margin: f64,
    pub max_negatives: usize,
}

impl Default for InitialClickParams {
    fn default() -> Self {
        InitialClickParams {
            margin: 5.0,
            max_negatives: 3,
        }
    }
}

/// Background pixels whose distance to the foreground lies in
/// `[margin, 2·margin]`, in raster order.
pub fn negative_band(gt: &Mask, margin: f64) -> Vec<(usize, usize)> {
    let (h, w) = (gt.height(), gt.width());
    let dist = squared_distance(gt.bits(), h, w);
    let (lo, hi) = (margin * margin, 4.0 * margin * margin);
    (0..h * w)
        .filter(|&i| !gt.bits()[i] && (dist[i] as f64) >= lo && (dist[i] as f64) <= hi)
        .map(|i| (i / w, i % w))
        .collect()
}

/// One positive click at the deepest foreground pixel, then 0 to
/// `max_negatives` negatives drawn without replacement from the band.
pub fn initial_clicks(gt: &Mask, params: &InitialClickParams, rng: &mut impl Rng) -> Result<ClickSet> {
    if gt.is_empty() {
        return Err(Error::InvalidInput("ground truth mask is empty".into()));
    }
    let mut clicks = ClickSet::new();
    let (row, col) = deepest_pixel(gt.bits(), gt.height(), gt.width()).expect("non-empty mask");
    clicks.push(row, col, Polarity::Positive);
    let wanted = rng.gen_range(0..=params.max_negatives);
    let band = negative_band(gt, params.margin);
    for &(r, c) in band.choose_multiple(rng, wanted.min(band.len())) {
        clicks.push(r, c, Polarity::Negative);
    }
    Ok(clicks)
}

/// Decaying continuation schedule for simulated training clicks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClickSchedule {
    pub max_clicks: usize,
    pub continue_probability: f64,
}

impl Default for ClickSchedule {
    fn default() -> Self {
        ClickSchedule {
            max_clicks: 24,
            continue_probability: 0.8,
        }
    }
}

impl ClickSchedule {
    /// Clicks to add after `initial` ones: keep going while a uniform draw
    /// falls below the continuation probability and the total stays within
    /// `max_clicks`.
    pub fn sample_added(&self, initial: usize, rng: &mut impl Rng) -> usize {
        let mut added = 0;
        while initial + added < self.max_clicks && rng.gen::<f64>() < self.continue_probability {
            added += 1;
        }
        added
    }

    /// Mean of [`Self::sample_added`] for `initial` starting clicks.
    pub fn expected_added(&self, initial: usize) -> f64 {
        let room = self.max_clicks.saturating_sub(initial) as i32;
        (1..=room).map(|k| self.continue_probability.powi(k)).sum()
    }
}

/// Simulated training trajectory: starting from `initial`, adds the number
/// of clicks drawn from `schedule`, each placed by [`next_click`] against the
/// model's current prediction. Returns the clicks and the last probability
/// map, which becomes the previous-mask input of the training forward.
pub fn iterative_clicks<S: Scalar>(
    model: &impl InteractiveSegmenter<S>,
    image: &Tensor<S>,
    gt: &Mask,
    initial: ClickSet,
    schedule: &ClickSchedule,
    rng: &mut impl Rng,
) -> Result<(ClickSet, Tensor<S>)> {
    let mut clicks = initial;
    let mut prev = Tensor::zeros([1, gt.height(), gt.width()]);
    let added = schedule.sample_added(clicks.len(), rng);
    for _ in 0..added {
        let pred = model.predict(image, &clicks, &prev)?;
        prev = pred.prob;
        match next_click(&pred.mask, gt)? {
            Some(c) => {
                clicks.push(c.row, c.col, c.polarity);
            }
            None => break,
        }
    }
    Ok((clicks, prev))
}

/// Pixels of `mask` that are set and touch an unset 4-neighbour (or the
/// frame), or, with `outer`, unset pixels touching a set one.
fn boundary(mask: &Mask, outer: bool) -> Vec<(usize, usize)> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let here = mask.get(r, c);
            if here == outer {
                continue;
            }
            let neighbours = [
                (r > 0).then(|| (r - 1, c)),
                (r + 1 < h).then(|| (r + 1, c)),
                (c > 0).then(|| (r, c - 1)),
                (c + 1 < w).then(|| (r, c + 1)),
            ];
            let touches = neighbours
                .iter()
                .any(|n| n.map_or(!outer, |(nr, nc)| mask.get(nr, nc) != here));
            if touches {
                out.push((r, c));
            }
        }
    }
    out
}

/// Perturbs `gt` by peeling (erosion) or growing (dilation) one random
/// boundary pixel at a time until its IoU with `gt` drops to `max_iou`.
pub fn synthesize_initial_mask(gt: &Mask, max_iou: f64, rng: &mut impl Rng) -> Result<Mask> {
    if gt.is_empty() {
        return Err(Error::InvalidInput("ground truth mask is empty".into()));
    }
    let mut grow = rng.gen_bool(0.5);
    let mut mask = gt.clone();
    loop {
        let inter = mask.and(gt)?.count() as f64;
        let union = mask.or(gt)?.count() as f64;
        if inter / union <= max_iou {
            return Ok(mask);
        }
        let mut candidates = boundary(&mask, grow);
        if candidates.is_empty() || (!grow && mask.count() == 1) {
            grow = !grow;
            candidates = boundary(&mask, grow);
            if candidates.is_empty() {
                return Err(Error::InvalidInput("mask cannot be perturbed".into()));
            }
        }
        let &(r, c) = candidates.choose(rng).expect("non-empty");
        mask.set(r, c, grow);
    }
}
