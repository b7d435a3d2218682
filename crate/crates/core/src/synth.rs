//! Deterministic multi-modal brain phantoms.
//!
//! Each subject gets a tissue label field (CSF rim and ventricles, cortical
//! grey matter, white matter, deep grey nuclei) on an ellipsoidal brain
//! support. Every modality maps the same labels through its own intensity
//! table and adds its own noise, so scans of a session differ in contrast but
//! share their anatomy exactly.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, CohortIndex, Session, Split};
use crate::error::{invalid, Result};
use crate::volume::{Modality, Orientation, Volume};

pub const BACKGROUND: u8 = 0;
pub const CSF: u8 = 1;
pub const GREY: u8 = 2;
pub const WHITE: u8 = 3;
pub const DEEP_GREY: u8 = 4;
const N_LABELS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortSpec {
    pub n_subjects: usize,
    pub sessions_per_subject: usize,
    pub modalities: Vec<Modality>,
    pub volume_shape: [usize; 3],
    /// Probability that a subject carries lesions (and joins the fine-tuning split).
    pub lesion_fraction: f64,
    pub seed: u64,
    #[serde(default = "default_centers")]
    pub n_centers: usize,
}

fn default_centers() -> usize {
    3
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            n_subjects: 16,
            sessions_per_subject: 1,
            modalities: vec![Modality::T1, Modality::T2],
            volume_shape: [128; 3],
            lesion_fraction: 0.0,
            seed: 0,
            n_centers: default_centers(),
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 2 {
            return Err(invalid("a cohort needs at least two subjects"));
        }
        if self.sessions_per_subject == 0 {
            return Err(invalid("sessions_per_subject must be positive"));
        }
        if self.modalities.is_empty() {
            return Err(invalid("at least one modality is required"));
        }
        let mut sorted = self.modalities.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.modalities.len() {
            return Err(invalid("modalities must be distinct"));
        }
        if self.volume_shape.iter().any(|&s| s < 8) {
            return Err(invalid("volume_shape must be at least 8 voxels per axis"));
        }
        if !(0.0..=1.0).contains(&self.lesion_fraction) {
            return Err(invalid("lesion_fraction must lie in [0, 1]"));
        }
        if self.n_centers == 0 {
            return Err(invalid("n_centers must be positive"));
        }
        Ok(())
    }
}

/// Tissue label field shared by all scans of a subject.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectAnatomy {
    pub labels: Array3<u8>,
    pub lesion: Option<Array3<bool>>,
}

/// Generated cohort held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCohort {
    pub spec: CohortSpec,
    pub anatomies: Vec<SubjectAnatomy>,
    pub cohort: Cohort,
}

/// Intensity of each label (background, CSF, GM, WM, deep GM) and of lesions.
pub fn intensity_table(m: Modality) -> ([f32; N_LABELS], f32) {
    match m {
        Modality::T1 => ([0.0, 0.25, 0.55, 0.85, 0.68], 0.12),
        Modality::T2 => ([0.0, 0.92, 0.6, 0.35, 0.48], 1.25),
        Modality::Flair => ([0.0, 0.12, 0.62, 0.42, 0.52], 1.3),
        Modality::Dwi => ([0.0, 0.2, 0.58, 0.45, 0.7], 1.3),
        Modality::Adc => ([0.0, 0.95, 0.5, 0.33, 0.42], 0.1),
        Modality::Synthetic(i) => {
            // A fixed shuffle of well-separated levels per modality id.
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + u64::from(i));
            let mut levels = [0.2f32, 0.4, 0.6, 0.8];
            for k in (1..levels.len()).rev() {
                levels.swap(k, rng.random_range(0..=k));
            }
            ([0.0, levels[0], levels[1], levels[2], levels[3]], 1.3)
        }
    }
}

fn noise_sigma(m: Modality) -> f64 {
    0.02 + 0.005 * (m.index() % 4) as f64
}

/// Sum of a few random low-frequency plane waves, roughly in [-1, 1].
struct SmoothField {
    waves: Vec<([f64; 3], f64, f64)>,
}

impl SmoothField {
    fn new<R: Rng + ?Sized>(rng: &mut R, n_waves: usize, max_freq: f64) -> Self {
        let waves = (0..n_waves)
            .map(|_| {
                let k = [0, 1, 2].map(|_| rng.random_range(-max_freq..max_freq) * 2.0 * PI);
                (k, rng.random_range(0.0..2.0 * PI), rng.random_range(0.5..1.0))
            })
            .collect::<Vec<_>>();
        Self { waves }
    }

    /// `p` in normalized coordinates.
    fn at(&self, p: [f64; 3]) -> f64 {
        let norm: f64 = self.waves.iter().map(|w| w.2).sum();
        self.waves
            .iter()
            .map(|(k, phase, amp)| amp * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phase).cos())
            .sum::<f64>()
            / norm.max(1e-9)
    }
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    /// Normalized radius: below 1 inside.
    fn radius(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

fn generate_anatomy<R: Rng + ?Sized>(shape: [usize; 3], with_lesions: bool, rng: &mut R) -> SubjectAnatomy {
    let centre = shape.map(|s| (s as f64 - 1.0) / 2.0);
    let brain = Ellipsoid {
        center: [0, 1, 2].map(|a| centre[a] + rng.random_range(-0.03..0.03) * shape[a] as f64),
        radii: shape.map(|s| s as f64 * rng.random_range(0.37..0.47)),
    };
    let boundary = SmoothField::new(rng, 4, 2.0);
    let folding = SmoothField::new(rng, 10, 5.0);
    let ventricles = Ellipsoid {
        center: [0, 1, 2].map(|a| brain.center[a] + rng.random_range(-0.05..0.05) * brain.radii[a]),
        radii: [0, 1, 2].map(|a| brain.radii[a] * rng.random_range(0.1..0.3)),
    };
    let nuclei: Vec<Ellipsoid> = [-1.0, 1.0]
        .iter()
        .map(|side| {
            let mut c = brain.center;
            c[0] += side * brain.radii[0] * rng.random_range(0.25..0.4);
            c[1] += brain.radii[1] * rng.random_range(-0.15..0.15);
            c[2] += brain.radii[2] * rng.random_range(-0.2..0.05);
            Ellipsoid {
                center: c,
                radii: brain.radii.map(|r| r * rng.random_range(0.1..0.17)),
            }
        })
        .collect();
    let pockets: Vec<Ellipsoid> = (0..rng.random_range(3..=6))
        .map(|_| {
            let dir = [0, 1, 2].map(|_| rng.random_range(-1.0..1.0f64));
            let len = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-6);
            let depth = rng.random_range(0.35..0.75);
            Ellipsoid {
                center: [0, 1, 2].map(|a| brain.center[a] + dir[a] / len * depth * brain.radii[a]),
                radii: brain.radii.map(|r| r * rng.random_range(0.08..0.18)),
            }
        })
        .collect();
    let wm_edge = rng.random_range(0.55..0.68);
    let csf_edge = rng.random_range(0.86..0.92);

    let labels = Array3::from_shape_fn(shape, |(i, j, k)| {
        let p = [i as f64, j as f64, k as f64];
        let unit = [0, 1, 2].map(|a| p[a] / shape[a] as f64);
        let r = brain.radius(p) + 0.06 * boundary.at(unit);
        if r >= 1.0 {
            return BACKGROUND;
        }
        if ventricles.radius(p) < 1.0 || pockets.iter().any(|e| e.radius(p) < 1.0) {
            return CSF;
        }
        if nuclei.iter().any(|n| n.radius(p) < 1.0) {
            return DEEP_GREY;
        }
        let depth = r + 0.1 * folding.at(unit);
        if depth > csf_edge {
            CSF
        } else if depth > wm_edge {
            GREY
        } else {
            WHITE
        }
    });

    let lesion = with_lesions.then(|| {
        let mut mask = Array3::from_elem(shape, false);
        let white: Vec<(usize, usize, usize)> = labels
            .indexed_iter()
            .filter(|(_, &l)| l == WHITE)
            .map(|(idx, _)| idx)
            .collect();
        let smallest = *shape.iter().min().expect("three axes") as f64;
        let count = rng.random_range(1..=3);
        for _ in 0..count {
            if white.is_empty() {
                break;
            }
            let (ci, cj, ck) = white[rng.random_range(0..white.len())];
            let blob = Ellipsoid {
                center: [ci as f64, cj as f64, ck as f64],
                radii: [0, 1, 2].map(|_| rng.random_range(smallest / 12.0..smallest / 7.0).max(2.0)),
            };
            for ((i, j, k), m) in mask.indexed_iter_mut() {
                if labels[[i, j, k]] != BACKGROUND && blob.radius([i as f64, j as f64, k as f64]) < 1.0 {
                    *m = true;
                }
            }
        }
        mask
    });
    SubjectAnatomy { labels, lesion }
}

/// Integer translation with background fill.
fn shift<A: Clone>(a: &Array3<A>, offset: [i64; 3], fill: A) -> Array3<A> {
    let s = a.shape();
    let shape = [s[0], s[1], s[2]];
    Array3::from_shape_fn(shape, |(i, j, k)| {
        let src = [i as i64 - offset[0], j as i64 - offset[1], k as i64 - offset[2]];
        if (0..3).all(|d| src[d] >= 0 && (src[d] as usize) < shape[d]) {
            a[[src[0] as usize, src[1] as usize, src[2] as usize]].clone()
        } else {
            fill.clone()
        }
    })
}

/// Renders one modality of a (possibly jittered) anatomy.
fn render<R: Rng + ?Sized>(
    labels: &Array3<u8>,
    lesion: Option<&Array3<bool>>,
    texture: &SmoothField,
    m: Modality,
    rng: &mut R,
) -> Array3<f32> {
    let (levels, lesion_level) = intensity_table(m);
    let noise = Normal::new(0.0, noise_sigma(m)).expect("positive sigma");
    let s = labels.shape();
    let shape = [s[0], s[1], s[2]];
    let mut out = Array3::<f32>::zeros(shape);
    for ((i, j, k), v) in out.indexed_iter_mut() {
        let l = labels[[i, j, k]];
        if l == BACKGROUND {
            continue;
        }
        let base = if lesion.is_some_and(|les| les[[i, j, k]]) {
            lesion_level
        } else {
            levels[l as usize]
        };
        let unit = [
            i as f64 / shape[0] as f64,
            j as f64 / shape[1] as f64,
            k as f64 / shape[2] as f64,
        ];
        let tex = 1.0 + 0.04 * texture.at(unit);
        let val = f64::from(base) * tex + noise.sample(rng);
        *v = val.max(1e-3) as f32;
    }
    out
}

fn subject_rng(seed: u64, subject: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((subject as u64) << 2 | purpose);
    rng
}

/// Generates the cohort in memory; the output depends only on `spec`.
pub fn generate_cohort(spec: &CohortSpec) -> Result<SynthCohort> {
    spec.validate()?;
    let mut anatomies = Vec::with_capacity(spec.n_subjects);
    let mut sessions = Vec::new();
    for subject in 0..spec.n_subjects {
        let mut rng = subject_rng(spec.seed, subject, 0);
        let has_lesions = spec.lesion_fraction > 0.0 && rng.random_bool(spec.lesion_fraction);
        let anatomy = generate_anatomy(spec.volume_shape, has_lesions, &mut rng);
        let texture = SmoothField::new(&mut rng, 5, 3.0);
        let mut noise_rng = subject_rng(spec.seed, subject, 1);
        for session in 0..spec.sessions_per_subject {
            let offset = if session == 0 {
                [0; 3]
            } else {
                [0, 1, 2].map(|_| rng.random_range(-2..=2))
            };
            let labels = shift(&anatomy.labels, offset, BACKGROUND);
            let lesion = anatomy.lesion.as_ref().map(|l| shift(l, offset, false));
            let scans = spec
                .modalities
                .iter()
                .map(|&m| {
                    let data = render(&labels, lesion.as_ref(), &texture, m, &mut noise_rng);
                    let mask = labels.mapv(|l| l != BACKGROUND);
                    Volume::new(data, [1.0; 3], Orientation::RAS, m).and_then(|v| v.with_mask(mask))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut scans = scans;
            scans.sort_by_key(|v| v.modality());
            sessions.push(Session {
                subject: subject as u32,
                session: session as u32,
                split: if has_lesions { Split::Finetune } else { Split::Pretrain },
                center: (subject % spec.n_centers) as u32,
                scans,
                lesion,
            });
        }
        anatomies.push(anatomy);
    }
    Ok(SynthCohort {
        spec: spec.clone(),
        anatomies,
        cohort: Cohort::new(sessions)?,
    })
}

/// Writes scans (`.nii.gz`), lesion masks and the manifest under `dir`.
pub fn write_cohort(c: &SynthCohort, dir: &Path) -> Result<CohortIndex> {
    c.cohort.write(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, lesions: f64) -> CohortSpec {
        CohortSpec {
            n_subjects: 4,
            sessions_per_subject: 2,
            modalities: vec![Modality::T1, Modality::T2, Modality::Flair],
            volume_shape: [24, 28, 20],
            lesion_fraction: lesions,
            seed,
            n_centers: 2,
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        assert_eq!(
            generate_cohort(&small(3, 0.5)).unwrap(),
            generate_cohort(&small(3, 0.5)).unwrap()
        );
        assert_ne!(
            generate_cohort(&small(3, 0.5)).unwrap().cohort,
            generate_cohort(&small(4, 0.5)).unwrap().cohort
        );
    }

    #[test]
    fn no_lesions_at_zero_fraction() {
        let c = generate_cohort(&small(1, 0.0)).unwrap();
        assert!(c
            .cohort
            .sessions
            .iter()
            .all(|s| s.lesion.is_none() && s.split == Split::Pretrain));
        let all = generate_cohort(&small(1, 1.0)).unwrap();
        assert!(all.cohort.sessions.iter().all(|s| s.split == Split::Finetune));
        for (s, a) in all
            .cohort
            .sessions
            .iter()
            .zip(all.anatomies.iter().flat_map(|a| [a, a]))
        {
            let l = s.lesion.as_ref().unwrap();
            assert!(l.iter().any(|&x| x));
            if s.session == 0 {
                assert!(l.iter().zip(a.labels.iter()).all(|(&x, &lab)| !x || lab != BACKGROUND));
            }
        }
    }

    #[test]
    fn modalities_share_boundaries_but_not_intensities() {
        let c = generate_cohort(&small(2, 0.0)).unwrap();
        let s = &c.cohort.sessions[0];
        let labels = &c.anatomies[0].labels;
        let (a, b) = (s.scans[0].data(), s.scans[1].data());
        // Brain supports coincide exactly.
        assert!(a.iter().zip(b.iter()).all(|(&x, &y)| (x != 0.0) == (y != 0.0)));
        // Voxelwise intensities are far from perfectly correlated.
        let corr = correlation(a.iter().copied(), b.iter().copied());
        assert!(corr < 0.9, "correlation {corr}");
        // Intensity edges (large neighbour jumps) sit on label boundaries in
        // both modalities.
        for vol in [a, b] {
            let (mut edges, mut on_boundary) = (0, 0);
            for ((i, j, k), &x) in vol.indexed_iter() {
                if i + 1 < vol.shape()[0] && (x - vol[[i + 1, j, k]]).abs() > 0.15 {
                    edges += 1;
                    on_boundary += usize::from(labels[[i, j, k]] != labels[[i + 1, j, k]]);
                }
            }
            assert!(edges > 100);
            assert!(on_boundary as f64 >= 0.99 * edges as f64, "{on_boundary}/{edges}");
        }
    }

    fn correlation(a: impl Iterator<Item = f32>, b: impl Iterator<Item = f32>) -> f64 {
        let pairs: Vec<(f64, f64)> = a.zip(b).map(|(x, y)| (f64::from(x), f64::from(y))).collect();
        let n = pairs.len() as f64;
        let (ma, mb) = pairs
            .iter()
            .fold((0.0, 0.0), |acc, p| (acc.0 + p.0 / n, acc.1 + p.1 / n));
        let cov: f64 = pairs.iter().map(|p| (p.0 - ma) * (p.1 - mb)).sum();
        let va: f64 = pairs.iter().map(|p| (p.0 - ma).powi(2)).sum();
        let vb: f64 = pairs.iter().map(|p| (p.1 - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn subjects_differ_more_than_modalities() {
        let c = generate_cohort(&small(5, 0.0)).unwrap();
        let diff = |x: &Array3<u8>, y: &Array3<u8>| {
            x.iter().zip(y.iter()).filter(|(a, b)| a != b).count() as f64 / x.len() as f64
        };
        let across = diff(&c.anatomies[0].labels, &c.anatomies[1].labels);
        assert!(across > 0.05, "{across}");
        // Within a session every modality renders the identical label field,
        // so the same-subject structure difference is zero by construction.
        let s = &c.cohort.sessions[0];
        let supports: Vec<_> = s.scans.iter().map(|v| v.data().mapv(|x| x != 0.0)).collect();
        assert!(supports.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn written_cohort_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate_cohort(&small(6, 0.5)).unwrap();
        let idx = write_cohort(&c, dir.path()).unwrap();
        assert_eq!(idx.records.len(), 4 * 2 * 3);
        let loaded = CohortIndex::load(dir.path()).unwrap();
        let all = loaded.load_sessions(&[Split::Pretrain, Split::Finetune]).unwrap();
        for (a, b) in all.sessions.iter().zip(&c.cohort.sessions) {
            assert_eq!(a.lesion, b.lesion);
            for (x, y) in a.scans.iter().zip(&b.scans) {
                assert_eq!(x.data(), y.data());
            }
        }
    }
}
