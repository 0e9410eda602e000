//! Click attention: similarity between positively clicked patches and every
//! other patch, measured in a learned embedding space.
//!
//! For a stage with patch features `f` (`[L, C]`), the mapping head `φ`
//! embeds each patch, and every positively clicked patch `k` yields
//! `s_k[j] = (1 + cos(φ(f)_j, φ(f)_k)) / 2`. The field `s` is the mean of the
//! per-click fields, so it lies in `[0, 1]` and equals 1 at a patch for
//! which every click agrees. With no positive clicks the field is all ones,
//! which leaves attention unchanged when used as a bias.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::click::{Click, ClickSet};
use crate::config::{ModelConfig, NUM_STAGES};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::nn::{Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Added under the square root when normalizing embeddings.
const NORM_EPS: f64 = 1e-12;

/// Two-layer mapping `φ: C_i → C′ → C′` with a GELU in between.
#[derive(Clone, Copy, Debug)]
pub struct MappingHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl MappingHead {
    pub fn init<S: Scalar>(store: &mut ParamStore<S>, rng: &mut impl Rng, name: &str, in_dim: usize, out_dim: usize) -> Self {
        MappingHead {
            fc1: Linear::init(store, rng, &format!("{name}.fc1"), in_dim, out_dim),
            fc2: Linear::init(store, rng, &format!("{name}.fc2"), out_dim, out_dim),
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &[Var], x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, p, h)
    }
}

/// Patch index of `click` on the grid of `stage` (0-based).
pub fn click_to_patch(click: &Click, stage: usize, config: &ModelConfig) -> Result<usize> {
    click.check_bounds(config.input_size, config.input_size)?;
    if stage >= NUM_STAGES {
        return Err(Error::InvalidInput(format!("stage {stage} out of range")));
    }
    let p = config.stage_patch_px(stage);
    Ok((click.row / p) * (config.input_size / p) + click.col / p)
}

/// Distinct patches hit by positive clicks at `stage`, in click order.
pub fn positive_patches(clicks: &ClickSet, stage: usize, config: &ModelConfig) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for click in clicks.positives() {
        let idx = click_to_patch(click, stage, config)?;
        if !out.contains(&idx) {
            out.push(idx);
        }
    }
    Ok(out)
}

/// Tape handles produced by [`compute_similarity`].
#[derive(Clone, Copy, Debug)]
pub struct SimilarityVars {
    /// Mean field `s`, `[L, 1]`.
    pub field: Var,
    /// Per-click fields `s_k` as columns, `[L, N_k]`; absent for the neutral
    /// field.
    pub per_click: Option<Var>,
}

/// Similarity of every patch of `features` (`[L, C]`) to the clicked patches.
pub fn compute_similarity<S: Scalar>(
    tape: &mut Tape<S>,
    p: &[Var],
    features: Var,
    patches: &[usize],
    head: &MappingHead,
) -> Result<SimilarityVars> {
    let len = tape.shape(features)[0];
    if let Some(&bad) = patches.iter().find(|&&k| k >= len) {
        return Err(Error::InvalidInput(format!("patch index {bad} out of range {len}")));
    }
    if patches.is_empty() {
        let field = tape.constant(Tensor::ones([len, 1]));
        return Ok(SimilarityVars {
            field,
            per_click: None,
        });
    }
    let g = head.forward(tape, p, features)?;
    let g = tape.row_normalize(g, S::lit(NORM_EPS))?;
    let clicked = tape.select_rows(g, patches)?;
    let clicked_t = tape.transpose(clicked)?;
    let cos = tape.matmul(g, clicked_t)?;
    let per_click = tape.affine(cos, S::lit(0.5), S::lit(0.5))?;
    let per_click = tape.clamp(per_click, S::zero(), S::one())?;
    let n = patches.len();
    let weights = tape.constant(Tensor::full([n, 1], S::one() / S::lit(n as f64)));
    let field = tape.matmul(per_click, weights)?;
    Ok(SimilarityVars {
        field,
        per_click: Some(per_click),
    })
}

/// Ground-truth patch labels at `stage`: 1 when at least half of the
/// patch's pixels are foreground.
pub fn patch_labels<S: Scalar>(gt: &Mask, stage: usize, config: &ModelConfig) -> Result<Tensor<S>> {
    if gt.height() != config.input_size || gt.width() != config.input_size {
        return Err(Error::shape(
            "patch_labels",
            &[gt.height(), gt.width()],
            &[config.input_size, config.input_size],
        ));
    }
    let p = config.stage_patch_px(stage);
    let side = config.grid_side(stage);
    let data = (0..side * side)
        .map(|k| {
            let (py, px) = (k / side, k % side);
            let fg = (0..p * p)
                .filter(|&o| gt.get(py * p + o / p, px * p + o % p))
                .count();
            if 2 * fg >= p * p {
                S::one()
            } else {
                S::zero()
            }
        })
        .collect();
    Tensor::new([side * side, 1], data)
}

/// Mean over stages of `mse(s_i, y_i)`. Only stages that carry a
/// click-derived field take part; returns `None` when there are none.
pub fn click_loss<S: Scalar>(tape: &mut Tape<S>, fields: &[Var], labels: &[Tensor<S>]) -> Result<Option<Var>> {
    if fields.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} similarity fields but {} label maps",
            fields.len(),
            labels.len()
        )));
    }
    if fields.is_empty() {
        return Ok(None);
    }
    let mut total: Option<Var> = None;
    for (&s, y) in fields.iter().zip(labels) {
        let y = tape.constant(y.clone());
        let term = tape.mse(s, y)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    let total = total.expect("non-empty");
    Ok(Some(tape.scale(total, S::one() / S::lit(fields.len() as f64))?))
}
