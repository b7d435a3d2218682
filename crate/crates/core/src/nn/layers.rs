use rand::Rng;

use super::tensor::{impl_params, matmul, Real, Tensor};

/// Fully connected layer applied row-wise to an `n × in` matrix.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    /// `[in, out]`
    pub weight: Tensor<T>,
    /// `[out]`
    pub bias: Tensor<T>,
}

impl_params!(Linear { weight, bias });

impl<T: Real> Linear<T> {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self {
            weight: Tensor::uniform(&[in_dim, out_dim], bound, rng),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[in_dim, out_dim]),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &[T], n: usize) -> Vec<T> {
        let out = self.out_dim();
        let mut y = Vec::with_capacity(n * out);
        for _ in 0..n {
            y.extend_from_slice(self.bias.data());
        }
        matmul(x, false, self.weight.data(), false, &mut y, n, self.in_dim(), out, true);
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &[T], n: usize, dy: &[T], grad: &mut Self) -> Vec<T> {
        self.backward_params(x, n, dy, grad);
        let mut dx = vec![T::zero(); n * self.in_dim()];
        matmul(
            dy,
            false,
            self.weight.data(),
            true,
            &mut dx,
            n,
            self.out_dim(),
            self.in_dim(),
            false,
        );
        dx
    }

    /// Parameter gradients only, for layers whose input needs no gradient.
    pub fn backward_params(&self, x: &[T], n: usize, dy: &[T], grad: &mut Self) {
        let (i, o) = (self.in_dim(), self.out_dim());
        matmul(x, true, dy, false, grad.weight.data_mut(), i, n, o, true);
        let gb = grad.bias.data_mut();
        for row in dy.chunks_exact(o) {
            for (g, d) in gb.iter_mut().zip(row) {
                *g += *d;
            }
        }
    }
}

/// Per-row layer normalization over the channel axis.
#[derive(Clone, Debug)]
pub struct LayerNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl_params!(LayerNorm { gamma, beta });

#[derive(Clone, Debug)]
pub struct LnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

impl<T> LnCache<T> {
    pub fn rows(&self) -> usize {
        self.rstd.len()
    }
}

const LN_EPS: f64 = 1e-5;

impl<T: Real> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        let mut gamma = Tensor::zeros(&[dim]);
        gamma.fill(T::one());
        Self {
            gamma,
            beta: Tensor::zeros(&[dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &[T], n: usize) -> (Vec<T>, LnCache<T>) {
        let c = self.dim();
        debug_assert_eq!(x.len(), n * c);
        let inv_c = T::lit(1.0 / c as f64);
        let eps = T::lit(LN_EPS);
        let mut y = vec![T::zero(); n * c];
        let mut xhat = vec![T::zero(); n * c];
        let mut rstd = vec![T::zero(); n];
        let (g, b) = (self.gamma.data(), self.beta.data());
        for r in 0..n {
            let row = &x[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                y[r * c + j] = h * g[j] + b[j];
            }
        }
        (y, LnCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LnCache<T>, dy: &[T], grad: &mut Self) -> Vec<T> {
        let c = self.dim();
        let n = cache.rstd.len();
        let inv_c = T::lit(1.0 / c as f64);
        let g = self.gamma.data();
        let mut dx = vec![T::zero(); n * c];
        for r in 0..n {
            let xh = &cache.xhat[r * c..(r + 1) * c];
            let d = &dy[r * c..(r + 1) * c];
            let mut sum_dh = T::zero();
            let mut sum_dh_xh = T::zero();
            {
                let gg = grad.gamma.data_mut();
                for j in 0..c {
                    gg[j] += d[j] * xh[j];
                }
            }
            {
                let gb = grad.beta.data_mut();
                for j in 0..c {
                    gb[j] += d[j];
                }
            }
            for j in 0..c {
                let dh = d[j] * g[j];
                sum_dh += dh;
                sum_dh_xh += dh * xh[j];
            }
            let rs = cache.rstd[r];
            for j in 0..c {
                let dh = d[j] * g[j];
                dx[r * c + j] = rs * (dh - inv_c * sum_dh - xh[j] * inv_c * sum_dh_xh);
            }
        }
        dx
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Real>(x: &[T]) -> Vec<T> {
    let (k, a, half) = (T::lit(GELU_K), T::lit(GELU_A), T::lit(0.5));
    x.iter()
        .map(|&v| half * v * (T::one() + (k * (v + a * v * v * v)).tanh()))
        .collect()
}

pub fn gelu_backward<T: Real>(x: &[T], dy: &[T]) -> Vec<T> {
    let (k, a, half, three) = (T::lit(GELU_K), T::lit(GELU_A), T::lit(0.5), T::lit(3.0));
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let t = (k * (v + a * v * v * v)).tanh();
            let dt = (T::one() - t * t) * k * (T::one() + three * a * v * v);
            d * (half * (T::one() + t) + half * v * dt)
        })
        .collect()
}

pub fn relu<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v.max(T::zero())).collect()
}

pub fn relu_backward<T: Real>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
        .collect()
}

/// Row-major linear index of `(i, j, k)` in a grid of extent `g`.
#[inline]
pub fn grid_index(g: [usize; 3], i: usize, j: usize, k: usize) -> usize {
    (i * g[1] + j) * g[2] + k
}

/// Depthwise 3×3×3 convolution with zero padding over a token grid
/// stored as `[tokens, channels]`.
#[derive(Clone, Debug)]
pub struct DepthwiseConv3<T> {
    /// `[27, channels]`, offset-major.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl_params!(DepthwiseConv3 { weight, bias });

fn neighbours(g: [usize; 3], i: usize, j: usize, k: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..27usize).filter_map(move |o| {
        let di = (o / 9) as isize - 1;
        let dj = ((o / 3) % 3) as isize - 1;
        let dk = (o % 3) as isize - 1;
        let (a, b, c) = (i as isize + di, j as isize + dj, k as isize + dk);
        let inside = a >= 0 && b >= 0 && c >= 0 && (a as usize) < g[0] && (b as usize) < g[1] && (c as usize) < g[2];
        inside.then(|| (o, grid_index(g, a as usize, b as usize, c as usize)))
    })
}

impl<T: Real> DepthwiseConv3<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        Self {
            weight: Tensor::uniform(&[27, channels], 1.0 / 27f64.sqrt(), rng),
            bias: Tensor::zeros(&[channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.bias.len()
    }

    pub fn forward(&self, x: &[T], g: [usize; 3]) -> Vec<T> {
        let c = self.channels();
        let n = g[0] * g[1] * g[2];
        let w = self.weight.data();
        let mut y = Vec::with_capacity(n * c);
        for _ in 0..n {
            y.extend_from_slice(self.bias.data());
        }
        for i in 0..g[0] {
            for j in 0..g[1] {
                for k in 0..g[2] {
                    let p = grid_index(g, i, j, k);
                    for (o, q) in neighbours(g, i, j, k) {
                        let wo = &w[o * c..(o + 1) * c];
                        let xq = &x[q * c..(q + 1) * c];
                        let yp = &mut y[p * c..(p + 1) * c];
                        for ch in 0..c {
                            yp[ch] += wo[ch] * xq[ch];
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward(&self, x: &[T], g: [usize; 3], dy: &[T], grad: &mut Self) -> Vec<T> {
        let c = self.channels();
        let n = g[0] * g[1] * g[2];
        let w = self.weight.data();
        let mut dx = vec![T::zero(); n * c];
        {
            let gb = grad.bias.data_mut();
            for row in dy.chunks_exact(c) {
                for (b, d) in gb.iter_mut().zip(row) {
                    *b += *d;
                }
            }
        }
        let gw = grad.weight.data_mut();
        for i in 0..g[0] {
            for j in 0..g[1] {
                for k in 0..g[2] {
                    let p = grid_index(g, i, j, k);
                    let dyp = &dy[p * c..(p + 1) * c];
                    for (o, q) in neighbours(g, i, j, k) {
                        for ch in 0..c {
                            dx[q * c + ch] += w[o * c + ch] * dyp[ch];
                            gw[o * c + ch] += x[q * c + ch] * dyp[ch];
                        }
                    }
                }
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of a scalar loss `sum(w ⊙ f(x))`.
    fn fd_input<F: Fn(&[f64]) -> Vec<f64>>(f: F, x: &[f64], w: &[f64], analytic: &[f64]) {
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            let lp: f64 = f(&xp).iter().zip(w).map(|(a, b)| a * b).sum();
            let lm: f64 = f(&xm).iter().zip(w).map(|(a, b)| a * b).sum();
            let num = (lp - lm) / (2.0 * h);
            assert!(
                (num - analytic[i]).abs() <= 1e-6 * (1.0 + num.abs()),
                "index {i}: fd {num} vs analytic {}",
                analytic[i]
            );
        }
    }

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::<f64>::new(4, 3, &mut rng);
        let x = rand_vec(2 * 4, &mut rng);
        let w = rand_vec(2 * 3, &mut rng);
        let mut g = Linear::zeros(4, 3);
        let dx = lin.backward(&x, 2, &w, &mut g);
        fd_input(|x| lin.forward(x, 2), &x, &w, &dx);
    }

    #[test]
    fn layernorm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ln = LayerNorm::<f64>::new(5);
        ln.gamma = Tensor::from_vec(&[5], rand_vec(5, &mut rng));
        let x = rand_vec(3 * 5, &mut rng);
        let w = rand_vec(3 * 5, &mut rng);
        let (_, cache) = ln.forward(&x, 3);
        let mut g = LayerNorm::new(5);
        let dx = ln.backward(&cache, &w, &mut g);
        fd_input(|x| ln.forward(x, 3).0, &x, &w, &dx);
    }

    #[test]
    fn gelu_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_vec(10, &mut rng).iter().map(|v| v * 3.0).collect::<Vec<_>>();
        let w = rand_vec(10, &mut rng);
        let dx = gelu_backward(&x, &w);
        fd_input(gelu, &x, &w, &dx);
    }

    #[test]
    fn depthwise_conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = [3, 2, 4];
        let c = 2;
        let conv = DepthwiseConv3::<f64>::new(c, &mut rng);
        let x = rand_vec(24 * c, &mut rng);
        let w = rand_vec(24 * c, &mut rng);
        let mut grad = DepthwiseConv3 {
            weight: Tensor::zeros(&[27, c]),
            bias: Tensor::zeros(&[c]),
        };
        let dx = conv.backward(&x, g, &w, &mut grad);
        fd_input(|x| conv.forward(x, g), &x, &w, &dx);
    }

    #[test]
    fn depthwise_conv_centre_tap_only_is_channel_scaling() {
        let c = 3;
        let mut conv = DepthwiseConv3::<f64> {
            weight: Tensor::zeros(&[27, c]),
            bias: Tensor::zeros(&[c]),
        };
        conv.weight.data_mut()[13 * c..14 * c].copy_from_slice(&[1.0, 2.0, -1.0]);
        let x: Vec<f64> = (0..8 * c).map(|v| v as f64).collect();
        let y = conv.forward(&x, [2, 2, 2]);
        for t in 0..8 {
            assert_eq!(y[t * c], x[t * c]);
            assert_eq!(y[t * c + 1], 2.0 * x[t * c + 1]);
            assert_eq!(y[t * c + 2], -x[t * c + 2]);
        }
    }
}
