use rand::Rng;

use super::blocks::{EmbedCache, PatchEmbed, PatchMerging, ResConvBlock, Stage, StageCache, SwinBlock};
use super::config::EncoderConfig;
use crate::error::{invalid, Result};
use crate::nn::tensor::join;
use crate::nn::{LayerNorm, LnCache, Parameterized, Real, Tensor};

/// Per-stage token features, finest first. The last entry is the
/// (normalized) bottleneck.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T> {
    pub grids: Vec<[usize; 3]>,
    pub channels: Vec<usize>,
    pub features: Vec<Vec<T>>,
}

impl<T: Real> FeaturePyramid<T> {
    pub fn bottleneck(&self) -> &[T] {
        self.features.last().expect("pyramid has at least one stage")
    }

    /// Global average of the bottleneck tokens.
    pub fn pooled(&self) -> Vec<T> {
        let c = *self.channels.last().expect("pyramid has at least one stage");
        let feats = self.bottleneck();
        let n = feats.len() / c;
        let mut out = vec![T::zero(); c];
        for row in feats.chunks_exact(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += *v;
            }
        }
        let inv = T::one() / T::lit(n as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        out
    }
}

/// Masked patch-token positions and the vector substituted for them.
#[derive(Clone, Copy, Debug)]
pub struct TokenMask<'a, T> {
    pub mask: &'a [bool],
    pub token: &'a [T],
}

#[derive(Clone, Debug)]
pub struct EncoderCache<T> {
    embed: EmbedCache<T>,
    masked: Option<Vec<bool>>,
    stages: Vec<StageCache<T>>,
    final_ln: LnCache<T>,
}

/// Patch embedding followed by conv + window-attention stages.
#[derive(Clone, Debug)]
pub struct Encoder<T> {
    cfg: EncoderConfig,
    pub embed: PatchEmbed<T>,
    pub stages: Vec<Stage<T>>,
    pub final_norm: LayerNorm<T>,
}

impl<T: Real> Parameterized<T> for Encoder<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.embed.collect(&join(prefix, "embed"), out);
        self.stages.collect(&join(prefix, "stages"), out);
        self.final_norm.collect(&join(prefix, "final_norm"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        self.embed.collect_mut(out);
        self.stages.collect_mut(out);
        self.final_norm.collect_mut(out);
    }
}

impl<T: Real> Encoder<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let embed = PatchEmbed::new(cfg.patch_embed_stride, cfg.embed_dim(), rng);
        let mut stages = Vec::with_capacity(cfg.num_stages());
        for (s, (&dim, &depth)) in cfg.stage_dims.iter().zip(&cfg.stage_depths).enumerate() {
            let down = (s > 0).then(|| PatchMerging::new(cfg.stage_dims[s - 1], dim, rng));
            let conv = ResConvBlock::new(dim, rng);
            let blocks = (0..depth)
                .map(|b| {
                    let shift = if b % 2 == 1 { cfg.window_size / 2 } else { 0 };
                    SwinBlock::new(dim, dim / cfg.head_dim, cfg.mlp_ratio, shift, rng)
                })
                .collect();
            stages.push(Stage { down, conv, blocks });
        }
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            stages,
            final_norm: LayerNorm::new(cfg.bottleneck_dim()),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Converts every parameter to another float type.
    pub fn cast<U: Real>(&self) -> Encoder<U> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut out = Encoder::<U>::new(&self.cfg, &mut rng).expect("config already validated");
        crate::nn::copy_params(&mut out, self).expect("same architecture");
        out
    }

    /// Runs the encoder on one volume of shape `dims`.
    pub fn forward(
        &self,
        x: &[T],
        dims: [usize; 3],
        mask: Option<TokenMask<'_, T>>,
    ) -> Result<(FeaturePyramid<T>, EncoderCache<T>)> {
        self.cfg.validate_input(dims)?;
        if x.len() != dims.iter().product::<usize>() {
            return Err(invalid(format!("input has {} voxels, shape {dims:?}", x.len())));
        }
        let c0 = self.cfg.embed_dim();
        let grid0 = self.cfg.patch_grid(dims);
        let (mut h, embed) = self.embed.forward(x, dims, self.cfg.patch_embed_stride);
        let masked = match mask {
            Some(m) => {
                let n0: usize = grid0.iter().product();
                if m.mask.len() != n0 {
                    return Err(invalid(format!(
                        "patch mask has {} entries, patch grid {grid0:?} needs {n0}",
                        m.mask.len()
                    )));
                }
                if m.token.len() != c0 {
                    return Err(invalid(format!(
                        "mask token has width {}, expected {c0}",
                        m.token.len()
                    )));
                }
                for (row, _) in h.chunks_exact_mut(c0).zip(m.mask).filter(|(_, &b)| b) {
                    row.copy_from_slice(m.token);
                }
                Some(m.mask.to_vec())
            }
            None => None,
        };

        let mut grids = Vec::new();
        let mut features = Vec::new();
        let mut caches = Vec::new();
        let mut grid = grid0;
        for (s, stage) in self.stages.iter().enumerate() {
            let (y, cache) = stage.forward(&h, grid, self.cfg.window_size);
            grid = self.cfg.stage_grid(dims, s);
            grids.push(grid);
            caches.push(cache);
            features.push(y.clone());
            h = y;
        }
        let n_last: usize = grid.iter().product();
        let (normed, final_ln) = self.final_norm.forward(&h, n_last);
        *features.last_mut().expect("at least one stage") = normed;
        Ok((
            FeaturePyramid {
                grids,
                channels: self.cfg.stage_dims.clone(),
                features,
            },
            EncoderCache {
                embed,
                masked,
                stages: caches,
                final_ln,
            },
        ))
    }

    pub fn encode(&self, x: &[T], dims: [usize; 3], mask: Option<TokenMask<'_, T>>) -> Result<FeaturePyramid<T>> {
        Ok(self.forward(x, dims, mask)?.0)
    }

    /// Accumulates parameter gradients into `grad`.
    ///
    /// `d_features[s]` is the gradient w.r.t. pyramid level `s` (empty means
    /// zero); `d_pooled` is the gradient w.r.t. the pooled embedding. The
    /// gradient reaching masked tokens is added to `d_token` when given.
    pub fn backward(
        &self,
        cache: &EncoderCache<T>,
        d_features: &[Vec<T>],
        d_pooled: Option<&[T]>,
        grad: &mut Self,
        d_token: Option<&mut [T]>,
    ) {
        let last = self.stages.len() - 1;
        let c_last = self.cfg.bottleneck_dim();
        let n_last = cache.final_ln.rows();
        let mut d_norm = match d_features.get(last) {
            Some(d) if !d.is_empty() => d.clone(),
            _ => vec![T::zero(); n_last * c_last],
        };
        if let Some(dp) = d_pooled {
            let inv = T::one() / T::lit(n_last as f64);
            for row in d_norm.chunks_exact_mut(c_last) {
                for (r, g) in row.iter_mut().zip(dp) {
                    *r += *g * inv;
                }
            }
        }
        let mut d = self.final_norm.backward(&cache.final_ln, &d_norm, &mut grad.final_norm);
        for s in (0..=last).rev() {
            if s < last {
                if let Some(df) = d_features.get(s).filter(|v| !v.is_empty()) {
                    for (a, b) in d.iter_mut().zip(df) {
                        *a += *b;
                    }
                }
            }
            d = self.stages[s].backward(&cache.stages[s], &d, &mut grad.stages[s]);
        }
        if let Some(mask) = &cache.masked {
            let c0 = self.cfg.embed_dim();
            let mut d_tok = vec![T::zero(); c0];
            for (row, _) in d.chunks_exact_mut(c0).zip(mask).filter(|(_, &b)| b) {
                for (t, r) in d_tok.iter_mut().zip(row.iter_mut()) {
                    *t += *r;
                    *r = T::zero();
                }
            }
            if let Some(out) = d_token {
                for (o, t) in out.iter_mut().zip(&d_tok) {
                    *o += *t;
                }
            }
        }
        self.embed.backward(&cache.embed, &d, &mut grad.embed);
    }
}
