use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_STAGES: usize = 4;

/// Architecture of the hierarchical patch-transformer segmenter.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Side of the square input in pixels.
    pub input_size: usize,
    /// Pixel side of a stage-1 patch.
    pub patch_size: usize,
    pub stage_dims: [usize; NUM_STAGES],
    pub heads: [usize; NUM_STAGES],
    pub layers: [usize; NUM_STAGES],
    /// Spatial-reduction ratio of keys/values per stage (1 = none).
    pub reduction: [usize; NUM_STAGES],
    pub n_cls: usize,
    /// Output width of the similarity mapping head.
    pub mapping_dim: usize,
    pub decoder_dim: usize,
    pub mlp_ratio: usize,
    /// Disk radius used when rendering clicks into the input maps.
    pub click_radius: usize,
    /// Bias attention with the click similarity field.
    pub click_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 64,
            patch_size: 4,
            stage_dims: [16, 24, 32, 48],
            heads: [1, 2, 2, 4],
            layers: [1, 1, 2, 1],
            reduction: [1, 1, 1, 1],
            n_cls: 1,
            mapping_dim: 32,
            decoder_dim: 32,
            mlp_ratio: 2,
            click_radius: 3,
            click_attention: true,
        }
    }
}

impl ModelConfig {
    /// 8×8 input, one-pixel patches, one layer per stage. Small enough for
    /// exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        ModelConfig {
            input_size: 8,
            patch_size: 1,
            stage_dims: [4, 6, 8, 8],
            heads: [1, 2, 2, 2],
            layers: [1, 1, 1, 1],
            reduction: [1, 1, 1, 1],
            n_cls: 1,
            mapping_dim: 6,
            decoder_dim: 4,
            mlp_ratio: 2,
            click_radius: 1,
            click_attention: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.n_cls != 1 {
            return err(format!("n_cls must be 1, got {}", self.n_cls));
        }
        if self.patch_size == 0 || self.input_size == 0 {
            return err("input_size and patch_size must be positive".into());
        }
        let unit = self.patch_size << (NUM_STAGES - 1);
        if self.input_size % unit != 0 {
            return err(format!(
                "input_size {} must be divisible by patch_size·8 = {unit}",
                self.input_size
            ));
        }
        if self.mapping_dim == 0 || self.decoder_dim == 0 || self.mlp_ratio == 0 {
            return err("mapping_dim, decoder_dim and mlp_ratio must be positive".into());
        }
        for i in 0..NUM_STAGES {
            let (c, h) = (self.stage_dims[i], self.heads[i]);
            if c == 0 || h == 0 || c % h != 0 {
                return err(format!("stage {}: dim {c} not divisible by {h} heads", i + 1));
            }
            if self.layers[i] == 0 {
                return err(format!("stage {} has no layers", i + 1));
            }
            let r = self.reduction[i];
            if r == 0 || self.grid_side(i) % r != 0 {
                return err(format!(
                    "stage {}: reduction {r} does not divide grid side {}",
                    i + 1,
                    self.grid_side(i)
                ));
            }
        }
        Ok(())
    }

    /// Pixel side of one patch at `stage` (0-based).
    pub fn stage_patch_px(&self, stage: usize) -> usize {
        self.patch_size << stage
    }

    /// Patch-grid side at `stage` (0-based).
    pub fn grid_side(&self, stage: usize) -> usize {
        self.input_size / self.stage_patch_px(stage)
    }

    pub fn num_patches(&self, stage: usize) -> usize {
        let s = self.grid_side(stage);
        s * s
    }
}
