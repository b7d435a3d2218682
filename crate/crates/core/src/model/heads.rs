use rand::Rng;

use super::blocks::{fold, fold_backward};
use super::config::EncoderConfig;
use super::encoder::FeaturePyramid;
use crate::error::{invalid, Error, Result};
use crate::nn::tensor::{impl_params, join};
use crate::nn::{gelu, gelu_backward, grid_index, relu, relu_backward, Linear, Parameterized, Real, Tensor};

/// Two-layer MLP followed by L2 normalization.
#[derive(Clone, Debug)]
pub struct ProjectionHead<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl_params!(ProjectionHead { fc1, fc2 });

#[derive(Clone, Debug)]
pub struct ProjCache<T> {
    input: Vec<T>,
    hidden: Vec<T>,
    act: Vec<T>,
    unit: Vec<T>,
    norm: T,
}

impl<T: Real> ProjectionHead<T> {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(in_dim, in_dim, rng),
            fc2: Linear::new(in_dim, out_dim, rng),
        }
    }

    pub fn forward(&self, pooled: &[T]) -> Result<(Vec<T>, ProjCache<T>)> {
        if pooled.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalDegeneracy("non-finite pooled embedding".into()));
        }
        let hidden = self.fc1.forward(pooled, 1);
        let act = relu(&hidden);
        let z = self.fc2.forward(&act, 1);
        let norm = z.iter().map(|&v| v * v).sum::<T>().sqrt();
        if !(norm > T::zero()) || !norm.is_finite() {
            return Err(Error::NumericalDegeneracy("projection has zero norm".into()));
        }
        let unit: Vec<T> = z.iter().map(|&v| v / norm).collect();
        Ok((
            unit.clone(),
            ProjCache {
                input: pooled.to_vec(),
                hidden,
                act,
                unit,
                norm,
            },
        ))
    }

    pub fn project(&self, pooled: &[T]) -> Result<Vec<T>> {
        Ok(self.forward(pooled)?.0)
    }

    /// Returns the gradient w.r.t. the pooled input.
    pub fn backward(&self, cache: &ProjCache<T>, d_unit: &[T], grad: &mut Self) -> Vec<T> {
        let dot: T = cache.unit.iter().zip(d_unit).map(|(&u, &d)| u * d).sum();
        let dz: Vec<T> = cache
            .unit
            .iter()
            .zip(d_unit)
            .map(|(&u, &d)| (d - u * dot) / cache.norm)
            .collect();
        let d_act = self.fc2.backward(&cache.act, 1, &dz, &mut grad.fc2);
        let d_hidden = relu_backward(&cache.hidden, &d_act);
        self.fc1.backward(&cache.input, 1, &d_hidden, &mut grad.fc1)
    }
}

/// Top-down feature pyramid decoder producing `out_channels` values per voxel.
#[derive(Clone, Debug)]
pub struct FpnDecoder<T> {
    pub laterals: Vec<Linear<T>>,
    pub head: Linear<T>,
    patch: usize,
    out_channels: usize,
}

impl<T: Real> Parameterized<T> for FpnDecoder<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.laterals.collect(&join(prefix, "laterals"), out);
        self.head.collect(&join(prefix, "head"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        self.laterals.collect_mut(out);
        self.head.collect_mut(out);
    }
}

#[derive(Clone, Debug)]
pub struct DecoderCache<T> {
    inputs: Vec<Vec<T>>,
    grids: Vec<[usize; 3]>,
    fused: Vec<T>,
    act: Vec<T>,
}

fn upsample2<T: Real>(x: &[T], coarse: [usize; 3], c: usize) -> Vec<T> {
    let fine = coarse.map(|v| v * 2);
    let mut out = vec![T::zero(); x.len() * 8];
    for i in 0..fine[0] {
        for j in 0..fine[1] {
            for k in 0..fine[2] {
                let s = grid_index(coarse, i / 2, j / 2, k / 2);
                let d = grid_index(fine, i, j, k);
                out[d * c..(d + 1) * c].copy_from_slice(&x[s * c..(s + 1) * c]);
            }
        }
    }
    out
}

fn upsample2_backward<T: Real>(d: &[T], coarse: [usize; 3], c: usize) -> Vec<T> {
    let fine = coarse.map(|v| v * 2);
    let mut out = vec![T::zero(); d.len() / 8];
    for i in 0..fine[0] {
        for j in 0..fine[1] {
            for k in 0..fine[2] {
                let s = grid_index(coarse, i / 2, j / 2, k / 2);
                let f = grid_index(fine, i, j, k);
                for ch in 0..c {
                    out[s * c + ch] += d[f * c + ch];
                }
            }
        }
    }
    out
}

impl<T: Real> FpnDecoder<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &EncoderConfig, out_channels: usize, rng: &mut R) -> Self {
        let d = cfg.decoder_dim;
        let p = cfg.patch_embed_stride;
        Self {
            laterals: cfg.stage_dims.iter().map(|&c| Linear::new(c, d, rng)).collect(),
            head: Linear::new(d, p * p * p * out_channels, rng),
            patch: p,
            out_channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Zeroes the output projection so the decoder initially predicts zero.
    pub fn zero_head(&mut self) {
        self.head.zero_all();
    }

    /// Returns channel-major voxel output (`[out_channels, voxels]`).
    pub fn forward(&self, pyr: &FeaturePyramid<T>) -> Result<(Vec<T>, DecoderCache<T>)> {
        let s = self.laterals.len();
        if pyr.features.len() != s || pyr.grids.len() != s || pyr.channels.len() != s {
            return Err(invalid(format!(
                "pyramid has {} levels, decoder expects {s}",
                pyr.features.len()
            )));
        }
        for (l, lat) in self.laterals.iter().enumerate() {
            let n: usize = pyr.grids[l].iter().product();
            if pyr.channels[l] != lat.in_dim() || pyr.features[l].len() != n * lat.in_dim() {
                return Err(invalid(format!(
                    "pyramid level {l} does not match decoder width {}",
                    lat.in_dim()
                )));
            }
            if l > 0 && pyr.grids[l].map(|v| v * 2) != pyr.grids[l - 1] {
                return Err(invalid(format!(
                    "pyramid level {l} grid is not half of level {}",
                    l - 1
                )));
            }
        }
        let d = self.head.in_dim();
        let mut top = self.laterals[s - 1].forward(&pyr.features[s - 1], pyr.grids[s - 1].iter().product());
        for l in (0..s - 1).rev() {
            let n: usize = pyr.grids[l].iter().product();
            let mut lat = self.laterals[l].forward(&pyr.features[l], n);
            for (a, b) in lat.iter_mut().zip(upsample2(&top, pyr.grids[l + 1], d)) {
                *a += b;
            }
            top = lat;
        }
        let act = gelu(&top);
        let g0 = pyr.grids[0];
        let rows = self.head.forward(&act, g0.iter().product());
        let dims = g0.map(|v| v * self.patch);
        let out = fold(&rows, dims, self.patch, self.out_channels);
        Ok((
            out,
            DecoderCache {
                inputs: pyr.features.clone(),
                grids: pyr.grids.clone(),
                fused: top,
                act,
            },
        ))
    }

    pub fn decode(&self, pyr: &FeaturePyramid<T>) -> Result<Vec<T>> {
        Ok(self.forward(pyr)?.0)
    }

    /// Returns gradients w.r.t. every pyramid level.
    pub fn backward(&self, cache: &DecoderCache<T>, d_out: &[T], grad: &mut Self) -> Vec<Vec<T>> {
        let d = self.head.in_dim();
        let g0 = cache.grids[0];
        let dims = g0.map(|v| v * self.patch);
        let d_rows = fold_backward(d_out, dims, self.patch, self.out_channels);
        let d_act = self
            .head
            .backward(&cache.act, g0.iter().product(), &d_rows, &mut grad.head);
        let mut d_top = gelu_backward(&cache.fused, &d_act);
        let s = self.laterals.len();
        let mut d_features = Vec::with_capacity(s);
        for l in 0..s {
            let n: usize = cache.grids[l].iter().product();
            d_features.push(self.laterals[l].backward(&cache.inputs[l], n, &d_top, &mut grad.laterals[l]));
            if l + 1 < s {
                d_top = upsample2_backward(&d_top, cache.grids[l + 1], d);
            }
        }
        d_features
    }
}
