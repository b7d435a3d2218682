use rand::Rng;

use super::layers::{grid_index, Linear};
use super::tensor::{matmul, Parameterized, Real, Tensor};

/// Token partition of a 3D grid into (optionally cyclically shifted)
/// non-overlapping attention windows.
#[derive(Clone, Debug)]
pub struct WindowLayout {
    windows: Vec<Vec<usize>>,
    /// Region label per window member; tokens attend only within a region.
    /// `None` when no axis is shifted.
    regions: Option<Vec<Vec<u8>>>,
}

impl WindowLayout {
    /// Windows larger than the grid are clamped to the grid, and such axes
    /// are never shifted.
    pub fn new(grid: [usize; 3], window: usize, shift: usize) -> Self {
        let mut w = [0usize; 3];
        let mut s = [0usize; 3];
        for a in 0..3 {
            w[a] = window.min(grid[a]);
            s[a] = if grid[a] <= window { 0 } else { shift % w[a] };
            assert_eq!(grid[a] % w[a], 0, "grid {grid:?} not divisible by window {window}");
        }
        let shifted = s.iter().any(|&v| v > 0);
        let region = |p: usize, a: usize| -> u8 {
            if s[a] == 0 || p < grid[a] - w[a] {
                0
            } else if p < grid[a] - s[a] {
                1
            } else {
                2
            }
        };
        let mut windows = Vec::new();
        let mut regions = Vec::new();
        for wi in 0..grid[0] / w[0] {
            for wj in 0..grid[1] / w[1] {
                for wk in 0..grid[2] / w[2] {
                    let mut toks = Vec::with_capacity(w[0] * w[1] * w[2]);
                    let mut regs = Vec::with_capacity(w[0] * w[1] * w[2]);
                    for a in 0..w[0] {
                        for b in 0..w[1] {
                            for c in 0..w[2] {
                                let p = [wi * w[0] + a, wj * w[1] + b, wk * w[2] + c];
                                let i = (p[0] + s[0]) % grid[0];
                                let j = (p[1] + s[1]) % grid[1];
                                let k = (p[2] + s[2]) % grid[2];
                                toks.push(grid_index(grid, i, j, k));
                                regs.push(region(p[0], 0) * 9 + region(p[1], 1) * 3 + region(p[2], 2));
                            }
                        }
                    }
                    windows.push(toks);
                    regions.push(regs);
                }
            }
        }
        Self {
            windows,
            regions: shifted.then_some(regions),
        }
    }

    pub fn windows(&self) -> &[Vec<usize>] {
        &self.windows
    }

    fn allowed(&self, w: usize, a: usize, b: usize) -> bool {
        match &self.regions {
            None => true,
            Some(r) => r[w][a] == r[w][b],
        }
    }
}

/// Multi-head self-attention restricted to windows of a [`WindowLayout`].
#[derive(Clone, Debug)]
pub struct WindowAttention<T> {
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    heads: usize,
}

impl<T: Real> Parameterized<T> for WindowAttention<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.qkv.collect(&super::tensor::join(prefix, "qkv"), out);
        self.proj.collect(&super::tensor::join(prefix, "proj"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        self.qkv.collect_mut(out);
        self.proj.collect_mut(out);
    }
}

#[derive(Clone, Debug)]
pub struct AttnCache<T> {
    input: Vec<T>,
    qkv: Vec<T>,
    attended: Vec<T>,
    /// Softmax weights, `[window][head]`, each `n_w × n_w`.
    probs: Vec<Vec<Vec<T>>>,
}

impl<T: Real> WindowAttention<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(
            heads > 0 && dim.is_multiple_of(heads),
            "dim {dim} not divisible by {heads} heads"
        );
        Self {
            qkv: Linear::new(dim, 3 * dim, rng),
            proj: Linear::new(dim, dim, rng),
            heads,
        }
    }

    /// Same shape with all parameters zero, for gradient accumulators.
    pub fn zeros_like(&self) -> Self {
        let d = self.dim();
        Self {
            qkv: Linear::zeros(d, 3 * d),
            proj: Linear::zeros(d, d),
            heads: self.heads,
        }
    }

    pub fn dim(&self) -> usize {
        self.proj.in_dim()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn forward(&self, x: &[T], n: usize, layout: &WindowLayout) -> (Vec<T>, AttnCache<T>) {
        let c = self.dim();
        let hd = c / self.heads;
        let scale = T::lit(1.0 / (hd as f64).sqrt());
        let qkv = self.qkv.forward(x, n);
        let mut attended = vec![T::zero(); n * c];
        let mut probs = Vec::with_capacity(layout.windows.len());
        for (wi, toks) in layout.windows.iter().enumerate() {
            let nw = toks.len();
            let mut wprobs = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let q = gather(&qkv, toks, 3 * c, h * hd, hd);
                let k = gather(&qkv, toks, 3 * c, c + h * hd, hd);
                let v = gather(&qkv, toks, 3 * c, 2 * c + h * hd, hd);
                let mut s = vec![T::zero(); nw * nw];
                matmul(&q, false, &k, true, &mut s, nw, hd, nw, false);
                for a in 0..nw {
                    let row = &mut s[a * nw..(a + 1) * nw];
                    let mut mx = T::neg_infinity();
                    for b in 0..nw {
                        if layout.allowed(wi, a, b) {
                            row[b] *= scale;
                            mx = mx.max(row[b]);
                        }
                    }
                    let mut sum = T::zero();
                    for b in 0..nw {
                        if layout.allowed(wi, a, b) {
                            row[b] = (row[b] - mx).exp();
                            sum += row[b];
                        } else {
                            row[b] = T::zero();
                        }
                    }
                    for v in row.iter_mut() {
                        *v /= sum;
                    }
                }
                let mut o = vec![T::zero(); nw * hd];
                matmul(&s, false, &v, false, &mut o, nw, nw, hd, false);
                scatter(&mut attended, &o, toks, c, h * hd, hd, false);
                wprobs.push(s);
            }
            probs.push(wprobs);
        }
        let out = self.proj.forward(&attended, n);
        (
            out,
            AttnCache {
                input: x.to_vec(),
                qkv,
                attended,
                probs,
            },
        )
    }

    pub fn backward(&self, cache: &AttnCache<T>, layout: &WindowLayout, dy: &[T], grad: &mut Self) -> Vec<T> {
        let c = self.dim();
        let n = cache.input.len() / c;
        let hd = c / self.heads;
        let scale = T::lit(1.0 / (hd as f64).sqrt());
        let d_att = self.proj.backward(&cache.attended, n, dy, &mut grad.proj);
        let mut d_qkv = vec![T::zero(); n * 3 * c];
        for (wi, toks) in layout.windows.iter().enumerate() {
            let nw = toks.len();
            for h in 0..self.heads {
                let p = &cache.probs[wi][h];
                let q = gather(&cache.qkv, toks, 3 * c, h * hd, hd);
                let k = gather(&cache.qkv, toks, 3 * c, c + h * hd, hd);
                let v = gather(&cache.qkv, toks, 3 * c, 2 * c + h * hd, hd);
                let d_o = gather(&d_att, toks, c, h * hd, hd);
                let mut dv = vec![T::zero(); nw * hd];
                matmul(p, true, &d_o, false, &mut dv, nw, nw, hd, false);
                let mut dp = vec![T::zero(); nw * nw];
                matmul(&d_o, false, &v, true, &mut dp, nw, hd, nw, false);
                for a in 0..nw {
                    let pr = &p[a * nw..(a + 1) * nw];
                    let dr = &mut dp[a * nw..(a + 1) * nw];
                    let dot: T = pr.iter().zip(dr.iter()).map(|(x, y)| *x * *y).sum();
                    for b in 0..nw {
                        dr[b] = pr[b] * (dr[b] - dot) * scale;
                    }
                }
                let mut dq = vec![T::zero(); nw * hd];
                matmul(&dp, false, &k, false, &mut dq, nw, nw, hd, false);
                let mut dk = vec![T::zero(); nw * hd];
                matmul(&dp, true, &q, false, &mut dk, nw, nw, hd, false);
                scatter(&mut d_qkv, &dq, toks, 3 * c, h * hd, hd, true);
                scatter(&mut d_qkv, &dk, toks, 3 * c, c + h * hd, hd, true);
                scatter(&mut d_qkv, &dv, toks, 3 * c, 2 * c + h * hd, hd, true);
            }
        }
        self.qkv.backward(&cache.input, n, &d_qkv, &mut grad.qkv)
    }
}

fn gather<T: Real>(src: &[T], toks: &[usize], stride: usize, offset: usize, width: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(toks.len() * width);
    for &t in toks {
        out.extend_from_slice(&src[t * stride + offset..t * stride + offset + width]);
    }
    out
}

fn scatter<T: Real>(dst: &mut [T], src: &[T], toks: &[usize], stride: usize, offset: usize, width: usize, add: bool) {
    for (r, &t) in toks.iter().enumerate() {
        let d = &mut dst[t * stride + offset..t * stride + offset + width];
        let s = &src[r * width..(r + 1) * width];
        if add {
            for (a, b) in d.iter_mut().zip(s) {
                *a += *b;
            }
        } else {
            d.copy_from_slice(s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    #[test]
    fn layout_partitions_every_token_exactly_once() {
        for (grid, w, s) in [
            ([4, 4, 4], 2, 0),
            ([6, 6, 6], 3, 1),
            ([4, 8, 2], 4, 2),
            ([3, 3, 3], 3, 1),
        ] {
            let layout = WindowLayout::new(grid, w, s);
            let mut seen = BTreeSet::new();
            for win in layout.windows() {
                for &t in win {
                    assert!(seen.insert(t), "token {t} in two windows");
                }
            }
            assert_eq!(seen.len(), grid.iter().product::<usize>());
        }
    }

    #[test]
    fn shifted_layout_only_masks_wrapped_tokens() {
        // 1D-like grid: tokens that wrapped around must never see the others.
        let layout = WindowLayout::new([4, 1, 1], 2, 1);
        // windows over shifted coords {0,1} -> tokens {1,2}, {2,3} -> tokens {3,0}
        assert_eq!(layout.windows()[0], vec![1, 2]);
        assert_eq!(layout.windows()[1], vec![3, 0]);
        assert!(layout.allowed(0, 0, 1));
        assert!(!layout.allowed(1, 0, 1));
    }

    #[test]
    fn attention_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let grid = [4, 2, 2];
        let n = 16;
        let attn = WindowAttention::<f64>::new(4, 2, &mut rng);
        for shift in [0, 1] {
            let layout = WindowLayout::new(grid, 2, shift);
            let x: Vec<f64> = (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (_, cache) = attn.forward(&x, n, &layout);
            let mut g = attn.zeros_like();
            let dx = attn.backward(&cache, &layout, &w, &mut g);
            let loss = |x: &[f64]| -> f64 { attn.forward(x, n, &layout).0.iter().zip(&w).map(|(a, b)| a * b).sum() };
            let h = 1e-6;
            for i in (0..x.len()).step_by(3) {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let num = (loss(&xp) - loss(&xm)) / (2.0 * h);
                assert!((num - dx[i]).abs() < 1e-6 * (1.0 + num.abs()), "shift {shift} idx {i}");
            }
        }
    }
}
