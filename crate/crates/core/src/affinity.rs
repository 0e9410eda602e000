//! Discriminative affinity between aggregated attention and the current
//! prediction.
//!
//! Per stage, the attention maps of every layer and head are averaged into
//! `A` (`[L, L]`). Weighting the keys by the click field `s` and the pooled
//! foreground probability `x′` gives the positive relevance
//! `Y_pos = A·(s ⊙ x′)`; the background side uses `1 − s` and `x̂′ = 1 − x′`.
//! The loss pulls `Y_pos` toward `x′ ⊙ s` and `Y_neg` toward `x̂′ ⊙ (1 − s)`,
//! with both targets held constant.

use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::geometry::area_pool_map;
use crate::scalar::Scalar;

/// Mean of attention maps that share one shape.
pub fn aggregate_attention<S: Scalar>(tape: &mut Tape<S>, maps: &[Var]) -> Result<Var> {
    let (&first, rest) = maps
        .split_first()
        .ok_or_else(|| Error::InvalidInput("no attention maps to aggregate".into()))?;
    let shape = tape.shape(first).to_vec();
    let mut total = first;
    for &m in rest {
        if tape.shape(m) != shape.as_slice() {
            return Err(Error::shape("aggregate_attention", &shape, tape.shape(m)));
        }
        total = tape.add(total, m)?;
    }
    if rest.is_empty() {
        return Ok(total);
    }
    tape.scale(total, S::one() / S::lit(maps.len() as f64))
}

/// Positive and negative relevance, each `[L, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct Relevance {
    pub pos: Var,
    pub neg: Var,
}

/// `Y_pos = A·(s ⊙ x′)`, `Y_neg = A·((1 − s) ⊙ x̂′)`.
///
/// `attention` is `[L, L]`; `s`, `x_fg` and `x_bg` are `[L, 1]`.
pub fn relevance<S: Scalar>(tape: &mut Tape<S>, attention: Var, s: Var, x_fg: Var, x_bg: Var) -> Result<Relevance> {
    let len = match *tape.shape(attention) {
        [r, c] if r == c => r,
        ref other => return Err(Error::InvalidShape(format!("aggregated attention must be square, got {other:?}"))),
    };
    for v in [s, x_fg, x_bg] {
        if tape.shape(v) != [len, 1] {
            return Err(Error::shape("relevance", &[len, 1], tape.shape(v)));
        }
    }
    let weighted_fg = tape.mul(s, x_fg)?;
    let pos = tape.matmul(attention, weighted_fg)?;
    let not_s = tape.affine(s, -S::one(), S::one())?;
    let weighted_bg = tape.mul(not_s, x_bg)?;
    let neg = tape.matmul(attention, weighted_bg)?;
    Ok(Relevance { pos, neg })
}

/// Inputs for one stage of the affinity loss.
#[derive(Clone, Copy, Debug)]
pub struct StageAffinity {
    /// Aggregated attention `[L, L]`.
    pub attention: Var,
    /// Click field `[L, 1]`.
    pub s: Var,
    /// Pooled foreground probability `[L, 1]`.
    pub x_fg: Var,
    /// Pooled background probability `[L, 1]`.
    pub x_bg: Var,
}

/// `l1(Y_pos, x′ ⊙ s) + l1(Y_neg, x̂′ ⊙ (1 − s))` for one stage, with the
/// targets detached.
pub fn stage_affinity_loss<S: Scalar>(tape: &mut Tape<S>, stage: &StageAffinity) -> Result<Var> {
    let rel = relevance(tape, stage.attention, stage.s, stage.x_fg, stage.x_bg)?;
    let s = tape.detach(stage.s);
    let x_fg = tape.detach(stage.x_fg);
    let x_bg = tape.detach(stage.x_bg);
    let target_pos = tape.mul(x_fg, s)?;
    let not_s = tape.affine(s, -S::one(), S::one())?;
    let target_neg = tape.mul(x_bg, not_s)?;
    let pos = tape.l1(rel.pos, target_pos)?;
    let neg = tape.l1(rel.neg, target_neg)?;
    tape.add(pos, neg)
}

/// Mean of [`stage_affinity_loss`] over the given stages.
pub fn affinity_loss<S: Scalar>(tape: &mut Tape<S>, stages: &[StageAffinity]) -> Result<Var> {
    if stages.is_empty() {
        return Err(Error::InvalidInput("affinity loss needs at least one stage".into()));
    }
    let mut total: Option<Var> = None;
    for stage in stages {
        let term = stage_affinity_loss(tape, stage)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    tape.scale(total.expect("non-empty"), S::one() / S::lit(stages.len() as f64))
}

/// Area-average pools a stage-1 probability grid (`[1, g, g]`) to the patch
/// grid of `stage`, returning detached `(x′, 1 − x′)` as `[L, 1]` columns.
pub fn pooled_probabilities<S: Scalar>(
    tape: &mut Tape<S>,
    prob: Var,
    stage: usize,
    config: &ModelConfig,
) -> Result<(Var, Var)> {
    let side = config.grid_side(0);
    if tape.shape(prob) != [1, side, side] {
        return Err(Error::shape("pooled_probabilities", &[1, side, side], tape.shape(prob)));
    }
    let prob = tape.detach(prob);
    let factor = 1 << stage;
    let pooled = tape.resample(prob, Arc::new(area_pool_map(side, factor)?))?;
    let len = (side / factor) * (side / factor);
    let fg = tape.reshape(pooled, vec![len, 1])?;
    let fg = tape.detach(fg);
    let bg = tape.affine(fg, -S::one(), S::one())?;
    Ok((fg, bg))
}
