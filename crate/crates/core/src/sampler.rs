//! Positive-pair sampling and view augmentation for pre-training.

use std::fmt;
use std::str::FromStr;

use ndarray::s;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, Session};
use crate::error::{invalid, Error, Result};
use crate::volume::Modality;

/// How positives are formed: any modality pair of a session (`Mcl`), or two
/// views of one modality (`Cl`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairMode {
    Mcl,
    Cl,
}

impl fmt::Display for PairMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairMode::Mcl => "mcl",
            PairMode::Cl => "cl",
        })
    }
}

impl FromStr for PairMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mcl" => Ok(PairMode::Mcl),
            "cl" => Ok(PairMode::Cl),
            _ => Err(invalid(format!("unknown pair mode '{s}'"))),
        }
    }
}

/// Augmentation ranges. Setting `affine` or `intensity` to false disables
/// that family entirely.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub affine: bool,
    pub intensity: bool,
    pub rotation_deg: f64,
    pub scale_range: (f64, f64),
    pub flip_prob: f64,
    pub gamma_range: (f64, f64),
    pub noise_std_max: f64,
    pub bias_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            affine: true,
            intensity: true,
            rotation_deg: 15.0,
            scale_range: (0.9, 1.1),
            flip_prob: 0.5,
            gamma_range: (0.7, 1.5),
            noise_std_max: 0.1,
            bias_range: (0.9, 1.1),
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            affine: false,
            intensity: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |(a, b): (f64, f64)| a <= b;
        if !(self.rotation_deg >= 0.0)
            || !ordered(self.scale_range)
            || self.scale_range.0 <= 0.0
            || !(0.0..=1.0).contains(&self.flip_prob)
            || !ordered(self.gamma_range)
            || self.gamma_range.0 <= 0.0
            || !(self.noise_std_max >= 0.0)
            || !ordered(self.bias_range)
        {
            return Err(invalid("augmentation ranges are inconsistent"));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Rotation (degrees about each axis), isotropic scale and axis flips.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub rotation_deg: [f64; 3],
    pub scale: f64,
    pub flips: [bool; 3],
}

impl AffineParams {
    pub fn identity() -> Self {
        Self {
            rotation_deg: [0.0; 3],
            scale: 1.0,
            flips: [false; 3],
        }
    }

    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        if !cfg.affine {
            return Self::identity();
        }
        let r = cfg.rotation_deg;
        Self {
            rotation_deg: [0, 1, 2].map(|_| uniform(rng, (-r, r))),
            scale: uniform(rng, cfg.scale_range),
            flips: [0, 1, 2].map(|_| rng.random_bool(cfg.flip_prob)),
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    /// Maps an output offset from the patch centre to the source offset:
    /// `src = R^T · F · out / scale`.
    fn source_offset(&self, d: [f64; 3]) -> [f64; 3] {
        let f = [0, 1, 2].map(|a| if self.flips[a] { -d[a] } else { d[a] });
        let [ax, ay, az] = self.rotation_deg.map(f64::to_radians);
        let (sx, cx) = ax.sin_cos();
        let (sy, cy) = ay.sin_cos();
        let (sz, cz) = az.sin_cos();
        // R = Rz · Ry · Rx
        let r = [
            [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
            [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
            [-sy, cy * sx, cy * cx],
        ];
        [0, 1, 2].map(|i| (0..3).map(|j| r[j][i] * f[j]).sum::<f64>() / self.scale)
    }
}

/// Resamples a cubic patch (`n³`, `k` fastest) under `params` with trilinear
/// interpolation and border replication.
pub fn apply_affine(patch: &[f32], n: usize, params: &AffineParams) -> Vec<f32> {
    if params.is_identity() {
        return patch.to_vec();
    }
    let c = (n as f64 - 1.0) / 2.0;
    let last = (n - 1) as f64;
    let at = |i: usize, j: usize, k: usize| patch[(i * n + j) * n + k];
    let mut out = Vec::with_capacity(n * n * n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let d = params.source_offset([i as f64 - c, j as f64 - c, k as f64 - c]);
                let p = d.map(|v| (v + c).clamp(0.0, last));
                let b = p.map(|v| v.floor() as usize);
                let t = [0, 1, 2].map(|a| p[a] - b[a] as f64);
                let up = b.map(|v| (v + 1).min(n - 1));
                let mut acc = 0.0;
                for corner in 0..8 {
                    let sel = [corner & 4 != 0, corner & 2 != 0, corner & 1 != 0];
                    let mut w = 1.0;
                    for a in 0..3 {
                        w *= if sel[a] { t[a] } else { 1.0 - t[a] };
                    }
                    if w != 0.0 {
                        let idx = [0, 1, 2].map(|a| if sel[a] { up[a] } else { b[a] });
                        acc += w * f64::from(at(idx[0], idx[1], idx[2]));
                    }
                }
                out.push(acc as f32);
            }
        }
    }
    out
}

pub fn affine_augment<R: Rng + ?Sized>(patch: &[f32], n: usize, cfg: &AugmentConfig, rng: &mut R) -> Vec<f32> {
    apply_affine(patch, n, &AffineParams::sample(cfg, rng))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntensityParams {
    pub gamma: f64,
    pub noise_std: f64,
    pub bias: f64,
}

impl IntensityParams {
    pub fn identity() -> Self {
        Self {
            gamma: 1.0,
            noise_std: 0.0,
            bias: 1.0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        if !cfg.intensity {
            return Self::identity();
        }
        Self {
            gamma: uniform(rng, cfg.gamma_range),
            noise_std: uniform(rng, (0.0, cfg.noise_std_max)),
            bias: uniform(rng, cfg.bias_range),
        }
    }
}

/// Gamma on min-max rescaled values (mapped back to the original range),
/// then a multiplicative bias, then additive Gaussian noise.
pub fn apply_intensity<R: Rng + ?Sized>(patch: &[f32], params: &IntensityParams, rng: &mut R) -> Vec<f32> {
    let mut out = patch.to_vec();
    if params.gamma != 1.0 {
        let (lo, hi) = patch
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        let range = f64::from(hi) - f64::from(lo);
        if range > 0.0 {
            for v in &mut out {
                let t = (f64::from(*v) - f64::from(lo)) / range;
                *v = (f64::from(lo) + range * t.powf(params.gamma)) as f32;
            }
        }
    }
    if params.bias != 1.0 {
        let b = params.bias as f32;
        out.iter_mut().for_each(|v| *v *= b);
    }
    if params.noise_std > 0.0 {
        let noise = Normal::new(0.0, params.noise_std).expect("finite std");
        out.iter_mut().for_each(|v| *v += noise.sample(rng) as f32);
    }
    out
}

pub fn intensity_augment<R: Rng + ?Sized>(patch: &[f32], cfg: &AugmentConfig, rng: &mut R) -> Vec<f32> {
    let params = IntensityParams::sample(cfg, rng);
    apply_intensity(patch, &params, rng)
}

/// Independent random streams: spatial choices (session, modalities, origin,
/// affine) and intensity augmentation.
#[derive(Clone, Debug)]
pub struct SamplerRngs {
    pub spatial: ChaCha8Rng,
    pub intensity: ChaCha8Rng,
}

/// One positive pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairItem {
    pub query: Vec<f32>,
    pub key: Vec<f32>,
    /// The query view before intensity augmentation.
    pub target: Vec<f32>,
    pub subject: u32,
    pub session: u32,
    pub modality_q: Modality,
    pub modality_k: Modality,
    pub origin: [usize; 3],
}

/// Batched pairs; views are stored item-major, each `patch³` voxels.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub patch: usize,
    pub items: Vec<PairItem>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// `[batch, patch, patch, patch]`
    pub fn shape(&self) -> [usize; 4] {
        [self.items.len(), self.patch, self.patch, self.patch]
    }

    pub fn subject_ids(&self) -> Vec<u32> {
        self.items.iter().map(|i| i.subject).collect()
    }
}

/// Cuts an `n³` patch at `origin` from a scan.
pub fn crop_patch(session: &Session, m: Modality, origin: [usize; 3], n: usize) -> Result<Vec<f32>> {
    let v = session
        .scan(m)
        .ok_or_else(|| Error::Sampling(format!("session lacks modality {m}")))?;
    let [a, b, c] = origin;
    let view = v.data().slice(s![a..a + n, b..b + n, c..c + n]);
    Ok(view.iter().copied().collect())
}

fn eligible(session: &Session, n: usize) -> bool {
    !session.scans.is_empty() && session.shape().iter().all(|&d| d >= n)
}

/// Draws one positive pair from a uniformly chosen session.
pub fn sample_pair(
    cohort: &Cohort,
    mode: PairMode,
    patch: usize,
    aug: &AugmentConfig,
    rngs: &mut SamplerRngs,
) -> Result<PairItem> {
    let candidates: Vec<&Session> = cohort.sessions.iter().filter(|s| eligible(s, patch)).collect();
    if candidates.is_empty() {
        return Err(Error::Sampling(format!("no session can provide a {patch}³ patch")));
    }
    let rng = &mut rngs.spatial;
    let session = candidates[rng.random_range(0..candidates.len())];
    let mods = session.modalities();
    let (mq, mk) = match mode {
        PairMode::Mcl => (
            mods[rng.random_range(0..mods.len())],
            mods[rng.random_range(0..mods.len())],
        ),
        PairMode::Cl => {
            let m = mods[rng.random_range(0..mods.len())];
            (m, m)
        }
    };
    let shape = session.shape();
    let origin = [0, 1, 2].map(|a| rng.random_range(0..=shape[a] - patch));
    let aff_q = AffineParams::sample(aug, rng);
    let aff_k = AffineParams::sample(aug, rng);
    let target = apply_affine(&crop_patch(session, mq, origin, patch)?, patch, &aff_q);
    let key_view = apply_affine(&crop_patch(session, mk, origin, patch)?, patch, &aff_k);
    let int_q = IntensityParams::sample(aug, &mut rngs.intensity);
    let int_k = IntensityParams::sample(aug, &mut rngs.intensity);
    let query = apply_intensity(&target, &int_q, &mut rngs.intensity);
    let key = apply_intensity(&key_view, &int_k, &mut rngs.intensity);
    Ok(PairItem {
        query,
        key,
        target,
        subject: session.subject,
        session: session.session,
        modality_q: mq,
        modality_k: mk,
        origin,
    })
}

pub fn make_batch(
    cohort: &Cohort,
    mode: PairMode,
    batch_size: usize,
    patch: usize,
    aug: &AugmentConfig,
    rngs: &mut SamplerRngs,
) -> Result<PairBatch> {
    if batch_size == 0 {
        return Err(invalid("batch_size must be at least 1"));
    }
    let items = (0..batch_size)
        .map(|_| sample_pair(cohort, mode, patch, aug, rngs))
        .collect::<Result<Vec<_>>>()?;
    Ok(PairBatch { patch, items })
}
