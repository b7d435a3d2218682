//! Encoder building blocks operating on `[tokens, channels]` grids.

use rand::Rng;

use crate::nn::tensor::{impl_params, join};
use crate::nn::{
    gelu, gelu_backward, grid_index, AttnCache, DepthwiseConv3, LayerNorm, Linear, LnCache, Parameterized, Real,
    Tensor, WindowAttention, WindowLayout,
};

/// Non-overlapping `p³` voxel blocks projected to tokens, then normalized.
#[derive(Clone, Debug)]
pub struct PatchEmbed<T> {
    pub proj: Linear<T>,
    pub norm: LayerNorm<T>,
}

impl_params!(PatchEmbed { proj, norm });

#[derive(Clone, Debug)]
pub struct EmbedCache<T> {
    unfolded: Vec<T>,
    ln: LnCache<T>,
}

/// Rearranges a voxel grid into `[tokens, p³]` rows.
pub fn unfold<T: Real>(x: &[T], dims: [usize; 3], p: usize) -> Vec<T> {
    let g = [dims[0] / p, dims[1] / p, dims[2] / p];
    let mut out = Vec::with_capacity(x.len());
    for ti in 0..g[0] {
        for tj in 0..g[1] {
            for tk in 0..g[2] {
                for a in 0..p {
                    for b in 0..p {
                        let base = grid_index(dims, ti * p + a, tj * p + b, tk * p);
                        out.extend_from_slice(&x[base..base + p]);
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`unfold`] for `channels` interleaved outputs per voxel;
/// the result is channel-major (`[channels, voxels]`).
pub fn fold<T: Real>(rows: &[T], dims: [usize; 3], p: usize, channels: usize) -> Vec<T> {
    let g = [dims[0] / p, dims[1] / p, dims[2] / p];
    let nvox = dims[0] * dims[1] * dims[2];
    let mut out = vec![T::zero(); nvox * channels];
    let width = p * p * p * channels;
    for ti in 0..g[0] {
        for tj in 0..g[1] {
            for tk in 0..g[2] {
                let row = &rows[grid_index(g, ti, tj, tk) * width..][..width];
                for a in 0..p {
                    for b in 0..p {
                        for c in 0..p {
                            let v = grid_index(dims, ti * p + a, tj * p + b, tk * p + c);
                            let r = ((a * p + b) * p + c) * channels;
                            for ch in 0..channels {
                                out[ch * nvox + v] = row[r + ch];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`fold`].
pub fn fold_backward<T: Real>(d: &[T], dims: [usize; 3], p: usize, channels: usize) -> Vec<T> {
    let g = [dims[0] / p, dims[1] / p, dims[2] / p];
    let nvox = dims[0] * dims[1] * dims[2];
    let width = p * p * p * channels;
    let mut rows = vec![T::zero(); g[0] * g[1] * g[2] * width];
    for ti in 0..g[0] {
        for tj in 0..g[1] {
            for tk in 0..g[2] {
                let base = grid_index(g, ti, tj, tk) * width;
                for a in 0..p {
                    for b in 0..p {
                        for c in 0..p {
                            let v = grid_index(dims, ti * p + a, tj * p + b, tk * p + c);
                            let r = ((a * p + b) * p + c) * channels;
                            for ch in 0..channels {
                                rows[base + r + ch] = d[ch * nvox + v];
                            }
                        }
                    }
                }
            }
        }
    }
    rows
}

impl<T: Real> PatchEmbed<T> {
    pub fn new<R: Rng + ?Sized>(stride: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            proj: Linear::new(stride * stride * stride, dim, rng),
            norm: LayerNorm::new(dim),
        }
    }

    pub fn forward(&self, x: &[T], dims: [usize; 3], p: usize) -> (Vec<T>, EmbedCache<T>) {
        let unfolded = unfold(x, dims, p);
        let n = unfolded.len() / (p * p * p);
        let h = self.proj.forward(&unfolded, n);
        let (y, ln) = self.norm.forward(&h, n);
        (y, EmbedCache { unfolded, ln })
    }

    pub fn backward(&self, cache: &EmbedCache<T>, dy: &[T], grad: &mut Self) {
        let n = cache.unfolded.len() / self.proj.in_dim();
        let dh = self.norm.backward(&cache.ln, dy, &mut grad.norm);
        self.proj.backward_params(&cache.unfolded, n, &dh, &mut grad.proj);
    }
}

/// `x + pw(gelu(dwconv(norm(x))))`
#[derive(Clone, Debug)]
pub struct ResConvBlock<T> {
    pub norm: LayerNorm<T>,
    pub dw: DepthwiseConv3<T>,
    pub pw: Linear<T>,
}

impl_params!(ResConvBlock { norm, dw, pw });

#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    ln: LnCache<T>,
    normed: Vec<T>,
    conv: Vec<T>,
    act: Vec<T>,
}

impl<T: Real> ResConvBlock<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self {
            norm: LayerNorm::new(dim),
            dw: DepthwiseConv3::new(dim, rng),
            pw: Linear::new(dim, dim, rng),
        }
    }

    pub fn forward(&self, x: &[T], grid: [usize; 3]) -> (Vec<T>, ConvCache<T>) {
        let n = grid.iter().product();
        let (normed, ln) = self.norm.forward(x, n);
        let conv = self.dw.forward(&normed, grid);
        let act = gelu(&conv);
        let mut y = self.pw.forward(&act, n);
        for (a, b) in y.iter_mut().zip(x) {
            *a += *b;
        }
        (y, ConvCache { ln, normed, conv, act })
    }

    pub fn backward(&self, cache: &ConvCache<T>, grid: [usize; 3], dy: &[T], grad: &mut Self) -> Vec<T> {
        let n = grid.iter().product();
        let d_act = self.pw.backward(&cache.act, n, dy, &mut grad.pw);
        let d_conv = gelu_backward(&cache.conv, &d_act);
        let d_normed = self.dw.backward(&cache.normed, grid, &d_conv, &mut grad.dw);
        let mut dx = self.norm.backward(&cache.ln, &d_normed, &mut grad.norm);
        for (a, b) in dx.iter_mut().zip(dy) {
            *a += *b;
        }
        dx
    }
}

/// Pre-norm transformer block with (shifted) window attention and an MLP.
#[derive(Clone, Debug)]
pub struct SwinBlock<T> {
    pub norm1: LayerNorm<T>,
    pub attn: WindowAttention<T>,
    pub norm2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub shift: usize,
}

impl_params!(SwinBlock {
    norm1,
    attn,
    norm2,
    fc1,
    fc2
});

#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    layout: WindowLayout,
    ln1: LnCache<T>,
    attn: AttnCache<T>,
    ln2: LnCache<T>,
    h2: Vec<T>,
    f1: Vec<T>,
    act: Vec<T>,
}

impl<T: Real> SwinBlock<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, mlp_ratio: usize, shift: usize, rng: &mut R) -> Self {
        Self {
            norm1: LayerNorm::new(dim),
            attn: WindowAttention::new(dim, heads, rng),
            norm2: LayerNorm::new(dim),
            fc1: Linear::new(dim, dim * mlp_ratio, rng),
            fc2: Linear::new(dim * mlp_ratio, dim, rng),
            shift,
        }
    }

    pub fn forward(&self, x: &[T], grid: [usize; 3], window: usize) -> (Vec<T>, BlockCache<T>) {
        let n = grid.iter().product();
        let layout = WindowLayout::new(grid, window, self.shift);
        let (h1, ln1) = self.norm1.forward(x, n);
        let (a, attn) = self.attn.forward(&h1, n, &layout);
        let x1: Vec<T> = x.iter().zip(&a).map(|(p, q)| *p + *q).collect();
        let (h2, ln2) = self.norm2.forward(&x1, n);
        let f1 = self.fc1.forward(&h2, n);
        let act = gelu(&f1);
        let f2 = self.fc2.forward(&act, n);
        let y = x1.iter().zip(&f2).map(|(p, q)| *p + *q).collect();
        (
            y,
            BlockCache {
                layout,
                ln1,
                attn,
                ln2,
                h2,
                f1,
                act,
            },
        )
    }

    pub fn backward(&self, cache: &BlockCache<T>, dy: &[T], grad: &mut Self) -> Vec<T> {
        let n = cache.h2.len() / self.norm2.dim();
        let d_act = self.fc2.backward(&cache.act, n, dy, &mut grad.fc2);
        let d_f1 = gelu_backward(&cache.f1, &d_act);
        let d_h2 = self.fc1.backward(&cache.h2, n, &d_f1, &mut grad.fc1);
        let mut dx1 = self.norm2.backward(&cache.ln2, &d_h2, &mut grad.norm2);
        for (a, b) in dx1.iter_mut().zip(dy) {
            *a += *b;
        }
        let d_h1 = self.attn.backward(&cache.attn, &cache.layout, &dx1, &mut grad.attn);
        let mut dx = self.norm1.backward(&cache.ln1, &d_h1, &mut grad.norm1);
        for (a, b) in dx.iter_mut().zip(&dx1) {
            *a += *b;
        }
        dx
    }
}

/// Concatenates each 2×2×2 neighbourhood and projects it, halving the grid.
#[derive(Clone, Debug)]
pub struct PatchMerging<T> {
    pub norm: LayerNorm<T>,
    pub proj: Linear<T>,
}

impl_params!(PatchMerging { norm, proj });

#[derive(Clone, Debug)]
pub struct MergeCache<T> {
    fine_grid: [usize; 3],
    ln: LnCache<T>,
    normed: Vec<T>,
}

fn merge_source(fine: [usize; 3], i: usize, j: usize, k: usize, child: usize) -> usize {
    let (a, b, c) = (child / 4, (child / 2) % 2, child % 2);
    grid_index(fine, 2 * i + a, 2 * j + b, 2 * k + c)
}

impl<T: Real> PatchMerging<T> {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            norm: LayerNorm::new(8 * in_dim),
            proj: Linear::new(8 * in_dim, out_dim, rng),
        }
    }

    pub fn forward(&self, x: &[T], fine: [usize; 3]) -> (Vec<T>, MergeCache<T>) {
        let c = self.norm.dim() / 8;
        let coarse = [fine[0] / 2, fine[1] / 2, fine[2] / 2];
        let n = coarse.iter().product();
        let mut gathered = Vec::with_capacity(n * 8 * c);
        for i in 0..coarse[0] {
            for j in 0..coarse[1] {
                for k in 0..coarse[2] {
                    for child in 0..8 {
                        let s = merge_source(fine, i, j, k, child);
                        gathered.extend_from_slice(&x[s * c..(s + 1) * c]);
                    }
                }
            }
        }
        let (normed, ln) = self.norm.forward(&gathered, n);
        let y = self.proj.forward(&normed, n);
        (
            y,
            MergeCache {
                fine_grid: fine,
                ln,
                normed,
            },
        )
    }

    pub fn backward(&self, cache: &MergeCache<T>, dy: &[T], grad: &mut Self) -> Vec<T> {
        let c = self.norm.dim() / 8;
        let fine = cache.fine_grid;
        let coarse = [fine[0] / 2, fine[1] / 2, fine[2] / 2];
        let n: usize = coarse.iter().product();
        let d_normed = self.proj.backward(&cache.normed, n, dy, &mut grad.proj);
        let d_gathered = self.norm.backward(&cache.ln, &d_normed, &mut grad.norm);
        let mut dx = vec![T::zero(); fine.iter().product::<usize>() * c];
        for i in 0..coarse[0] {
            for j in 0..coarse[1] {
                for k in 0..coarse[2] {
                    let row = grid_index(coarse, i, j, k);
                    for child in 0..8 {
                        let s = merge_source(fine, i, j, k, child);
                        let src = &d_gathered[(row * 8 + child) * c..(row * 8 + child + 1) * c];
                        dx[s * c..(s + 1) * c].copy_from_slice(src);
                    }
                }
            }
        }
        dx
    }
}

/// One encoder stage: optional downsampling, a residual conv block, then
/// alternating regular / shifted window-attention blocks.
#[derive(Clone, Debug)]
pub struct Stage<T> {
    pub down: Option<PatchMerging<T>>,
    pub conv: ResConvBlock<T>,
    pub blocks: Vec<SwinBlock<T>>,
}

impl<T: Real> Parameterized<T> for Stage<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.down.collect(&join(prefix, "down"), out);
        self.conv.collect(&join(prefix, "conv"), out);
        self.blocks.collect(&join(prefix, "blocks"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        self.down.collect_mut(out);
        self.conv.collect_mut(out);
        self.blocks.collect_mut(out);
    }
}

#[derive(Clone, Debug)]
pub struct StageCache<T> {
    grid: [usize; 3],
    down: Option<MergeCache<T>>,
    conv: ConvCache<T>,
    blocks: Vec<BlockCache<T>>,
}

impl<T: Real> Stage<T> {
    /// `input_grid` is the grid of the incoming tokens (before merging).
    pub fn forward(&self, x: &[T], input_grid: [usize; 3], window: usize) -> (Vec<T>, StageCache<T>) {
        let (mut h, down, grid) = match &self.down {
            Some(m) => {
                let (y, c) = m.forward(x, input_grid);
                (y, Some(c), input_grid.map(|v| v / 2))
            }
            None => (x.to_vec(), None, input_grid),
        };
        let (y, conv) = self.conv.forward(&h, grid);
        h = y;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(&h, grid, window);
            h = y;
            blocks.push(c);
        }
        (
            h,
            StageCache {
                grid,
                down,
                conv,
                blocks,
            },
        )
    }

    pub fn backward(&self, cache: &StageCache<T>, dy: &[T], grad: &mut Self) -> Vec<T> {
        let mut d = dy.to_vec();
        for ((b, c), g) in self.blocks.iter().zip(&cache.blocks).zip(grad.blocks.iter_mut()).rev() {
            d = b.backward(c, &d, g);
        }
        d = self.conv.backward(&cache.conv, cache.grid, &d, &mut grad.conv);
        match (&self.down, &cache.down, grad.down.as_mut()) {
            (Some(m), Some(c), Some(g)) => m.backward(c, &d, g),
            _ => d,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fold_inverts_unfold() {
        let dims = [4, 6, 2];
        let x: Vec<f64> = (0..48).map(|v| v as f64).collect();
        let rows = unfold(&x, dims, 2);
        assert_eq!(fold(&rows, dims, 2, 1), x);
    }

    #[test]
    fn fold_backward_is_adjoint_of_fold() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dims = [4, 4, 2];
        let rows: Vec<f64> = (0..32 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d: Vec<f64> = (0..32 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lhs: f64 = fold(&rows, dims, 2, 2).iter().zip(&d).map(|(a, b)| a * b).sum();
        let rhs: f64 = rows.iter().zip(fold_backward(&d, dims, 2, 2)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    fn check_block_grad<F, B>(x: &[f64], fwd: F, bwd: B)
    where
        F: Fn(&[f64]) -> Vec<f64>,
        B: Fn(&[f64]) -> Vec<f64>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let out = fwd(x);
        let w: Vec<f64> = (0..out.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dx = bwd(&w);
        let h = 1e-6;
        for i in (0..x.len()).step_by(5) {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            let lp: f64 = fwd(&xp).iter().zip(&w).map(|(a, b)| a * b).sum();
            let lm: f64 = fwd(&xm).iter().zip(&w).map(|(a, b)| a * b).sum();
            let num = (lp - lm) / (2.0 * h);
            assert!(
                (num - dx[i]).abs() < 1e-6 * (1.0 + num.abs()),
                "idx {i}: {num} vs {}",
                dx[i]
            );
        }
    }

    #[test]
    fn swin_block_and_merging_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let grid = [4, 4, 2];
        let n = 32;
        let x: Vec<f64> = (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let block = SwinBlock::<f64>::new(4, 2, 2, 1, &mut rng);
        check_block_grad(
            &x,
            |x| block.forward(x, grid, 2).0,
            |w| {
                let (_, c) = block.forward(&x, grid, 2);
                let mut g = block.zeros_like();
                block.backward(&c, w, &mut g)
            },
        );
        let merge = PatchMerging::<f64>::new(4, 6, &mut rng);
        check_block_grad(
            &x,
            |x| merge.forward(x, grid).0,
            |w| {
                let (_, c) = merge.forward(&x, grid);
                let mut g = merge.zeros_like();
                merge.backward(&c, w, &mut g)
            },
        );
        let conv = ResConvBlock::<f64>::new(4, &mut rng);
        check_block_grad(
            &x,
            |x| conv.forward(x, grid).0,
            |w| {
                let (_, c) = conv.forward(&x, grid);
                let mut g = conv.zeros_like();
                conv.backward(&c, grid, w, &mut g)
            },
        );
    }
}
