use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

/// Encoder geometry. Each stage after the first halves the token grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Voxels per token along each axis.
    pub patch_embed_stride: usize,
    pub stage_dims: Vec<usize>,
    pub stage_depths: Vec<usize>,
    pub window_size: usize,
    /// Total downsampling from voxels to the bottleneck grid.
    pub bottleneck_stride: usize,
    pub projection_dim: usize,
    pub head_dim: usize,
    pub mlp_ratio: usize,
    /// Channel width of the FPN decoder.
    pub decoder_dim: usize,
}

impl EncoderConfig {
    /// Four-stage encoder for 96³ inputs (token grids 24, 12, 6, 3).
    pub fn standard() -> Self {
        Self {
            patch_embed_stride: 4,
            stage_dims: vec![32, 64, 128, 256],
            stage_depths: vec![1, 1, 2, 1],
            window_size: 3,
            bottleneck_stride: 32,
            projection_dim: 128,
            head_dim: 16,
            mlp_ratio: 4,
            decoder_dim: 32,
        }
    }

    /// Three-stage encoder small enough to train on one CPU core.
    pub fn tiny() -> Self {
        Self {
            patch_embed_stride: 4,
            stage_dims: vec![16, 32, 64],
            stage_depths: vec![1, 1, 1],
            window_size: 2,
            bottleneck_stride: 16,
            projection_dim: 32,
            head_dim: 8,
            mlp_ratio: 2,
            decoder_dim: 16,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stage_dims.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.stage_dims[0]
    }

    pub fn bottleneck_dim(&self) -> usize {
        self.stage_dims[self.num_stages() - 1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_dims.is_empty() {
            return Err(config_err("stage_dims", "at least one stage is required"));
        }
        if self.stage_depths.len() != self.stage_dims.len() {
            return Err(config_err("stage_depths", "must have one entry per stage"));
        }
        for (key, v) in [
            ("patch_embed_stride", self.patch_embed_stride),
            ("window_size", self.window_size),
            ("bottleneck_stride", self.bottleneck_stride),
            ("projection_dim", self.projection_dim),
            ("head_dim", self.head_dim),
            ("mlp_ratio", self.mlp_ratio),
            ("decoder_dim", self.decoder_dim),
        ] {
            if v == 0 {
                return Err(config_err(key, "must be positive"));
            }
        }
        if let Some(d) = self.stage_dims.iter().find(|&&d| d == 0 || d % self.head_dim != 0) {
            return Err(config_err(
                "stage_dims",
                format!("width {d} is not a positive multiple of head_dim {}", self.head_dim),
            ));
        }
        if !self.bottleneck_stride.is_multiple_of(self.patch_embed_stride) {
            return Err(config_err(
                "bottleneck_stride",
                "must be divisible by patch_embed_stride",
            ));
        }
        let expected = self.patch_embed_stride << (self.num_stages() - 1);
        if self.bottleneck_stride != expected {
            return Err(config_err(
                "bottleneck_stride",
                format!(
                    "{} stages with patch_embed_stride {} give stride {expected}",
                    self.num_stages(),
                    self.patch_embed_stride
                ),
            ));
        }
        Ok(())
    }

    /// Token grid of stage `s` for an input of `dims` voxels.
    pub fn stage_grid(&self, dims: [usize; 3], s: usize) -> [usize; 3] {
        dims.map(|d| d / (self.patch_embed_stride << s))
    }

    pub fn patch_grid(&self, dims: [usize; 3]) -> [usize; 3] {
        self.stage_grid(dims, 0)
    }

    pub fn bottleneck_grid(&self, dims: [usize; 3]) -> [usize; 3] {
        self.stage_grid(dims, self.num_stages() - 1)
    }

    /// Checks that an input shape tiles cleanly into every stage's windows.
    pub fn validate_input(&self, dims: [usize; 3]) -> Result<()> {
        if dims.iter().any(|&d| d == 0 || d % self.bottleneck_stride != 0) {
            return Err(Error::InvalidArgument(format!(
                "input shape {dims:?} is not divisible by bottleneck stride {}",
                self.bottleneck_stride
            )));
        }
        for s in 0..self.num_stages() {
            let g = self.stage_grid(dims, s);
            if g.iter().any(|&v| v % self.window_size.min(v) != 0) {
                return Err(Error::InvalidArgument(format!(
                    "stage {s} grid {g:?} is not divisible by window {}",
                    self.window_size
                )));
            }
        }
        Ok(())
    }
}
