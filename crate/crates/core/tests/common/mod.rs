//! Helpers shared by the integration tests.
#![allow(dead_code)]

pub mod ops;

use clickseg::evaluation::InteractiveSegmenter;
use clickseg::mask::Mask;
use clickseg::model::Prediction;
use clickseg::tensor::Tensor;
use clickseg::{Click, ClickSet, Polarity, Result};
use rand::Rng;

/// Predicts the ground truth inside disks of `radius` around every click and
/// background elsewhere.
pub struct Reveal {
    pub gt: Mask,
    pub radius: f64,
}

impl InteractiveSegmenter<f64> for Reveal {
    fn predict(&self, _image: &Tensor<f64>, clicks: &ClickSet, _prev: &Tensor<f64>) -> Result<Prediction<f64>> {
        let r2 = self.radius * self.radius;
        let mask = Mask::from_fn(self.gt.height(), self.gt.width(), |r, c| {
            self.gt.get(r, c)
                && clicks.iter().any(|k| {
                    let (dr, dc) = (r as f64 - k.row as f64, c as f64 - k.col as f64);
                    dr * dr + dc * dc <= r2
                })
        });
        Ok(Prediction { prob: mask.to_tensor(), mask })
    }
}

/// Returns the ground truth regardless of the clicks.
pub struct Oracle(pub Mask);

impl InteractiveSegmenter<f64> for Oracle {
    fn predict(&self, _: &Tensor<f64>, _: &ClickSet, _: &Tensor<f64>) -> Result<Prediction<f64>> {
        Ok(Prediction { prob: self.0.to_tensor(), mask: self.0.clone() })
    }
}

/// Never predicts any foreground.
pub struct Empty;

impl InteractiveSegmenter<f64> for Empty {
    fn predict(&self, image: &Tensor<f64>, _: &ClickSet, _: &Tensor<f64>) -> Result<Prediction<f64>> {
        let (h, w) = (image.shape()[1], image.shape()[2]);
        Ok(Prediction { prob: Tensor::zeros([1, h, w]), mask: Mask::empty(h, w) })
    }
}

/// Quadratic-time reference for the corrective click: flood-fill the error
/// region, keep the largest component (earliest first pixel on ties), and
/// take the pixel with the greatest distance to anything outside it,
/// counting the ring around the frame as outside.
pub fn brute_next_click(pred: &Mask, gt: &Mask) -> Option<Click> {
    let (h, w) = (gt.height(), gt.width());
    let err: Vec<bool> = (0..h * w).map(|i| pred.bits()[i] != gt.bits()[i]).collect();
    let mut seen = vec![false; h * w];
    let mut best: Vec<usize> = Vec::new();
    for start in 0..h * w {
        if !err[start] || seen[start] {
            continue;
        }
        let mut comp = vec![start];
        seen[start] = true;
        let mut head = 0;
        while head < comp.len() {
            let i = comp[head];
            head += 1;
            let (r, c) = ((i / w) as i64, (i % w) as i64);
            for (dr, dc) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                    continue;
                }
                let j = nr as usize * w + nc as usize;
                if err[j] && !seen[j] {
                    seen[j] = true;
                    comp.push(j);
                }
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }
    if best.is_empty() {
        return None;
    }
    let mut inside = vec![false; h * w];
    for &i in &best {
        inside[i] = true;
    }
    let mut outside: Vec<(i64, i64)> = Vec::new();
    for r in -1..=h as i64 {
        for c in -1..=w as i64 {
            let edge = r < 0 || c < 0 || r >= h as i64 || c >= w as i64;
            if edge || !inside[r as usize * w + c as usize] {
                outside.push((r, c));
            }
        }
    }
    let mut pick = (usize::MAX, -1i64);
    for i in 0..h * w {
        if !inside[i] {
            continue;
        }
        let (r, c) = ((i / w) as i64, (i % w) as i64);
        let d = outside.iter().map(|&(y, x)| (y - r).pow(2) + (x - c).pow(2)).min().unwrap();
        if d > pick.1 {
            pick = (i, d);
        }
    }
    let (row, col) = (pick.0 / w, pick.0 % w);
    let polarity = if gt.get(row, col) { Polarity::Positive } else { Polarity::Negative };
    Some(Click { row, col, polarity, ordinal: 0 })
}

/// Union of a few random rectangles and disks.
pub fn random_blobs(rng: &mut impl Rng, h: usize, w: usize, count: usize) -> Mask {
    let mut m = Mask::empty(h, w);
    for _ in 0..count {
        let (cy, cx) = (rng.gen_range(0..h) as f64, rng.gen_range(0..w) as f64);
        let size = rng.gen_range(0.5..(h.min(w) as f64 / 3.0).max(1.0));
        let disk = rng.gen_bool(0.5);
        for r in 0..h {
            for c in 0..w {
                let (dy, dx) = (r as f64 - cy, c as f64 - cx);
                let hit = if disk { dy * dy + dx * dx <= size * size } else { dy.abs() <= size && dx.abs() <= size * 0.6 };
                if hit {
                    m.set(r, c, true);
                }
            }
        }
    }
    m
}

/// Flips each pixel independently with probability `p`.
pub fn speckle(rng: &mut impl Rng, m: &Mask, p: f64) -> Mask {
    Mask::from_fn(m.height(), m.width(), |r, c| m.get(r, c) ^ rng.gen_bool(p))
}

/// A prediction/ground-truth pair of one of several kinds.
pub fn random_pair(rng: &mut impl Rng, side: usize) -> (Mask, Mask) {
    let n = rng.gen_range(1..4);
    let gt = random_blobs(rng, side, side, n);
    let pred = match rng.gen_range(0..5) {
        0 => Mask::empty(side, side),
        1 => {
            let n = rng.gen_range(1..4);
            random_blobs(rng, side, side, n)
        }
        2 => speckle(rng, &gt, 0.05),
        3 => gt.clone(),
        _ => {
            let extra = random_blobs(rng, side, side, 1);
            gt.or(&extra).unwrap()
        }
    };
    (pred, gt)
}

pub fn dummy_image(side: usize) -> Tensor<f64> {
    Tensor::full([3, side, side], 0.5)
}

/// Segmenter that identifies the sample by its image and answers from its
/// ground truth through `rule`.
pub struct PerSample<F> {
    pub samples: Vec<clickseg::Sample>,
    pub rule: F,
}

impl<F: Fn(&Mask, &ClickSet) -> Mask> InteractiveSegmenter<f64> for PerSample<F> {
    fn predict(&self, image: &Tensor<f64>, clicks: &ClickSet, _: &Tensor<f64>) -> Result<Prediction<f64>> {
        let sample = self.samples.iter().find(|s| &s.image == image).expect("known image");
        let mask = (self.rule)(&sample.gt, clicks);
        Ok(Prediction { prob: mask.to_tensor(), mask })
    }
}

/// Ground truth within `radius` of any click.
pub fn reveal(gt: &Mask, clicks: &ClickSet, radius: f64) -> Mask {
    Reveal { gt: gt.clone(), radius }
        .predict(&dummy_image(1), clicks, &Tensor::zeros([1, 1, 1]))
        .unwrap()
        .mask
}
