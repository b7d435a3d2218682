use rand::seq::index;
use rand::Rng;

use crate::error::{invalid, Result};
use crate::nn::grid_index;

/// A bottleneck-cell mask and its nearest-neighbour upsampling to the
/// patch-token grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenMasks {
    pub bottleneck_grid: [usize; 3],
    pub bottleneck: Vec<bool>,
    pub patch_grid: [usize; 3],
    pub patch: Vec<bool>,
}

impl TokenMasks {
    pub fn masked_cells(&self) -> usize {
        self.bottleneck.iter().filter(|&&b| b).count()
    }

    /// Broadcasts the patch mask to voxels, `stride` voxels per token per axis.
    pub fn voxel_mask(&self, stride: usize) -> Vec<bool> {
        upsample_mask(&self.patch, self.patch_grid, stride)
    }
}

/// Nearest-neighbour upsampling of a boolean grid by an integer factor.
pub fn upsample_mask(mask: &[bool], grid: [usize; 3], factor: usize) -> Vec<bool> {
    let fine = grid.map(|v| v * factor);
    let mut out = Vec::with_capacity(fine.iter().product());
    for i in 0..fine[0] {
        for j in 0..fine[1] {
            for k in 0..fine[2] {
                out.push(mask[grid_index(grid, i / factor, j / factor, k / factor)]);
            }
        }
    }
    out
}

/// Masks `round(ratio * cells)` bottleneck cells (halves round up), chosen
/// uniformly without replacement, and upsamples the result by `factor`.
pub fn make_bottleneck_mask<R: Rng + ?Sized>(
    bottleneck_grid: [usize; 3],
    factor: usize,
    ratio: f64,
    rng: &mut R,
) -> Result<TokenMasks> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(invalid(format!("mask ratio {ratio} outside [0, 1]")));
    }
    if factor == 0 {
        return Err(invalid("upsampling factor must be positive"));
    }
    let cells: usize = bottleneck_grid.iter().product();
    let count = ((ratio * cells as f64 + 0.5).floor() as usize).min(cells);
    let mut bottleneck = vec![false; cells];
    for i in index::sample(rng, cells, count) {
        bottleneck[i] = true;
    }
    let patch = upsample_mask(&bottleneck, bottleneck_grid, factor);
    Ok(TokenMasks {
        bottleneck_grid,
        bottleneck,
        patch_grid: bottleneck_grid.map(|v| v * factor),
        patch,
    })
}
