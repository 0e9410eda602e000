//! Per-session state: the letterboxed image, the click history and the
//! overlays derived from it. Pure logic, no HTTP.

use clickseg::dataset::rgb_to_tensor;
use clickseg::evaluation::iou;
use clickseg::mask::Mask;
use clickseg::model::Model;
use clickseg::tensor::Tensor;
use clickseg::{Click, ClickSet, Polarity, NUM_STAGES};
use image::imageops::{self, FilterType};
use image::{GrayImage, Luma, RgbImage};

/// Why a session operation was refused.
#[derive(Debug, Clone, PartialEq)]
pub enum SessionError {
    OutOfBounds { row: i64, col: i64, height: usize, width: usize },
    NothingToUndo,
    InvalidStage(usize),
    Model(String),
}

impl std::fmt::Display for SessionError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SessionError::OutOfBounds { row, col, height, width } => {
                write!(f, "click ({row}, {col}) outside the {height}x{width} image")
            }
            SessionError::NothingToUndo => write!(f, "no click to undo"),
            SessionError::InvalidStage(s) => write!(f, "stage {s} not in 0..{NUM_STAGES}"),
            SessionError::Model(m) => write!(f, "model error: {m}"),
        }
    }
}

impl From<clickseg::Error> for SessionError {
    fn from(e: clickseg::Error) -> Self {
        SessionError::Model(e.to_string())
    }
}

/// Aspect-preserving fit of an `height × width` image into the square model
/// input, centred with zero padding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Letterbox {
    pub height: usize,
    pub width: usize,
    pub size: usize,
    inner_h: usize,
    inner_w: usize,
    top: usize,
    left: usize,
}

impl Letterbox {
    pub fn new(height: usize, width: usize, size: usize) -> Self {
        let scale = size as f64 / height.max(width) as f64;
        let inner_h = ((height as f64 * scale).round() as usize).clamp(1, size);
        let inner_w = ((width as f64 * scale).round() as usize).clamp(1, size);
        Letterbox {
            height,
            width,
            size,
            inner_h,
            inner_w,
            top: (size - inner_h) / 2,
            left: (size - inner_w) / 2,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.height == self.size && self.width == self.size
    }

    /// Model-input pixel containing the centre of image pixel `(row, col)`.
    pub fn to_model(&self, row: usize, col: usize) -> (usize, usize) {
        let r = ((row as f64 + 0.5) * self.inner_h as f64 / self.height as f64) as usize;
        let c = ((col as f64 + 0.5) * self.inner_w as f64 / self.width as f64) as usize;
        (self.top + r.min(self.inner_h - 1), self.left + c.min(self.inner_w - 1))
    }

    /// Image pixel shown at model pixel `(row, col)`, if inside the fitted box.
    fn to_image(&self, row: usize, col: usize) -> Option<(usize, usize)> {
        if row < self.top || col < self.left || row >= self.top + self.inner_h || col >= self.left + self.inner_w {
            return None;
        }
        let r = ((row - self.top) as f64 + 0.5) * self.height as f64 / self.inner_h as f64;
        let c = ((col - self.left) as f64 + 0.5) * self.width as f64 / self.inner_w as f64;
        Some(((r as usize).min(self.height - 1), (c as usize).min(self.width - 1)))
    }

    /// `[3, size, size]` model image.
    pub fn image(&self, img: &RgbImage) -> Tensor<f64> {
        if self.is_identity() {
            return rgb_to_tensor(img);
        }
        let resized = imageops::resize(img, self.inner_w as u32, self.inner_h as u32, FilterType::Triangle);
        let mut canvas = RgbImage::new(self.size as u32, self.size as u32);
        imageops::replace(&mut canvas, &resized, self.left as i64, self.top as i64);
        rgb_to_tensor(&canvas)
    }

    /// Image-space mask as a `[1, size, size]` model tensor; padding is 0.
    pub fn mask_to_model(&self, mask: &Mask) -> Tensor<f64> {
        let n = self.size;
        Tensor::from_fn([1, n, n], |i| match self.to_image(i / n, i % n) {
            Some((r, c)) if mask.get(r, c) => 1.0,
            _ => 0.0,
        })
    }

    /// Samples a row-major `size × size` model-space map at every image pixel.
    pub fn to_image_values<T: Copy>(&self, values: &[T]) -> Vec<T> {
        (0..self.height * self.width)
            .map(|i| {
                let (r, c) = self.to_model(i / self.width, i % self.width);
                values[r * self.size + c]
            })
            .collect()
    }
}

/// One entry of the undo history.
#[derive(Clone, Debug, PartialEq)]
pub struct State {
    /// Clicks in image coordinates, as submitted.
    pub log: Vec<Click>,
    /// The same clicks in model coordinates.
    clicks: ClickSet,
    /// Probability map fed back as the previous mask, `[1, size, size]`.
    prev: Tensor<f64>,
    /// Binary mask in image coordinates.
    pub mask: Mask,
    /// Foreground probability in image coordinates.
    pub prob: Vec<f64>,
}

/// Grayscale overlays for one encoder stage, at image size.
#[derive(Clone, Debug)]
pub struct Overlays {
    pub similarity: GrayImage,
    pub attention: GrayImage,
}

#[derive(Clone, Debug)]
pub struct Session {
    pub id: String,
    pub letterbox: Letterbox,
    image: Tensor<f64>,
    gt: Option<Mask>,
    history: Vec<State>,
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl Session {
    /// `initial_mask` and `gt`, when given, must match the image size; the
    /// caller checks this.
    pub fn new(id: String, img: &RgbImage, size: usize, initial_mask: Option<&Mask>, gt: Option<Mask>) -> Self {
        let (h, w) = (img.height() as usize, img.width() as usize);
        let letterbox = Letterbox::new(h, w, size);
        let image = letterbox.image(img);
        let (prev, mask) = match initial_mask {
            Some(m) => (letterbox.mask_to_model(m), m.clone()),
            None => (Tensor::zeros([1, size, size]), Mask::empty(h, w)),
        };
        let prob = mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let initial = State {
            log: Vec::new(),
            clicks: ClickSet::new(),
            prev,
            mask,
            prob,
        };
        Session {
            id,
            letterbox,
            image,
            gt,
            history: vec![initial],
        }
    }

    pub fn current(&self) -> &State {
        self.history.last().expect("history starts with the initial state")
    }

    pub fn click_count(&self) -> usize {
        self.current().log.len()
    }

    pub fn history_depth(&self) -> usize {
        self.history.len()
    }

    pub fn iou(&self) -> Option<f64> {
        self.gt.as_ref().map(|gt| iou(&self.current().mask, gt).expect("sizes checked at creation"))
    }

    pub fn add_click(&mut self, model: &Model<f64>, row: i64, col: i64, polarity: Polarity) -> Result<&State, SessionError> {
        let lb = self.letterbox;
        if row < 0 || col < 0 || row >= lb.height as i64 || col >= lb.width as i64 {
            return Err(SessionError::OutOfBounds { row, col, height: lb.height, width: lb.width });
        }
        let (row, col) = (row as usize, col as usize);
        let last = self.current();
        let mut clicks = last.clicks.clone();
        let (mr, mc) = lb.to_model(row, col);
        clicks.push(mr, mc, polarity);
        let pred = model.predict(&self.image, &clicks, &last.prev)?;
        let mut log = last.log.clone();
        log.push(Click { row, col, polarity, ordinal: log.len() });
        let bits = lb.to_image_values(pred.mask.bits());
        let state = State {
            log,
            clicks,
            mask: Mask::new(lb.height, lb.width, bits)?,
            prob: lb.to_image_values(pred.prob.data()),
            prev: pred.prob,
        };
        self.history.push(state);
        Ok(self.current())
    }

    pub fn undo(&mut self) -> Result<&State, SessionError> {
        if self.history.len() == 1 {
            return Err(SessionError::NothingToUndo);
        }
        self.history.pop();
        Ok(self.current())
    }

    pub fn reset(&mut self) -> &State {
        self.history.truncate(1);
        self.current()
    }

    /// Similarity field and the attention of the positively clicked patches
    /// at `stage`, for the forward pass that produced the current mask.
    ///
    /// Similarity maps `[0, 1]` linearly to `[0, 255]`. Attention is the mean
    /// over clicked query patches (all patches when there are none),
    /// scaled so its maximum renders at 255.
    pub fn overlays(&self, model: &Model<f64>, stage: usize) -> Result<Overlays, SessionError> {
        if stage >= NUM_STAGES {
            return Err(SessionError::InvalidStage(stage));
        }
        let k = self.history.len() - 1;
        let prev = &self.history[k.saturating_sub(1)].prev;
        let clicks = &self.history[k].clicks;
        let analysis = model.analyze(&self.image, clicks, prev)?;
        let st = &analysis[stage];
        let n = self.letterbox.size;

        let sim = self.upsample(st.similarity.data(), st.side, n);
        let similarity = self.render(&sim);

        let keys = st.attention.shape()[1];
        let key_side = (keys as f64).sqrt().round() as usize;
        let rows: Vec<usize> = if st.clicked_patches.is_empty() {
            (0..st.attention.shape()[0]).collect()
        } else {
            st.clicked_patches.clone()
        };
        let mut mean = vec![0.0; keys];
        for &r in &rows {
            for (m, v) in mean.iter_mut().zip(&st.attention.data()[r * keys..(r + 1) * keys]) {
                *m += v / rows.len() as f64;
            }
        }
        let peak = mean.iter().copied().fold(0.0, f64::max);
        if peak > 0.0 {
            mean.iter_mut().for_each(|v| *v /= peak);
        }
        let att = self.upsample(&mean, key_side, n);
        Ok(Overlays {
            similarity,
            attention: self.render(&att),
        })
    }

    /// Nearest-neighbour upsampling of a `side × side` grid to `n × n`.
    fn upsample(&self, grid: &[f64], side: usize, n: usize) -> Vec<f64> {
        (0..n * n).map(|i| grid[(i / n) * side / n * side + (i % n) * side / n]).collect()
    }

    fn render(&self, model_space: &[f64]) -> GrayImage {
        let lb = self.letterbox;
        let values = lb.to_image_values(model_space);
        GrayImage::from_fn(lb.width as u32, lb.height as u32, |x, y| Luma([to_u8(values[y as usize * lb.width + x as usize])]))
    }
}
