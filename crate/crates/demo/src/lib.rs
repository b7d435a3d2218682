//! WebAssembly bindings for the static demo page in `www/`.

use modalign::cohort::Session;
use modalign::embedeval::central_crop;
use modalign::model::{make_bottleneck_mask, EncoderConfig, MomentumSchedule};
use modalign::preproc::{preprocess_session, PreprocConfig, SessionOutcome};
use modalign::synth::{generate_cohort, CohortSpec};
use modalign::{Error, Modality, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

/// Edge of the displayed cube; a multiple of the tiny encoder's bottleneck stride.
pub const SIDE: usize = 64;
const GENERATED: usize = 72;
const MODALITIES: [Modality; 3] = [Modality::T1, Modality::T2, Modality::Flair];

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

/// One preprocessed synthetic session, cropped to a `SIDE`³ cube.
#[wasm_bindgen]
pub struct Phantom {
    scans: Vec<Vec<f32>>,
    lesion: Vec<bool>,
}

impl Phantom {
    pub fn generate(seed: u32, lesions: bool) -> Result<Self> {
        let spec = CohortSpec {
            n_subjects: 2,
            modalities: MODALITIES.to_vec(),
            volume_shape: [GENERATED; 3],
            lesion_fraction: if lesions { 1.0 } else { 0.0 },
            seed: u64::from(seed),
            ..CohortSpec::default()
        };
        let raw = generate_cohort(&spec)?;
        let cfg = PreprocConfig {
            min_extent_mm: 24.0,
            ..PreprocConfig::default()
        };
        let session: Session = match preprocess_session(&raw.cohort.sessions[0], &cfg)? {
            SessionOutcome::Kept(s) => s,
            SessionOutcome::Rejected(why) => return Err(Error::InvalidArgument(format!("phantom rejected: {why}"))),
        };
        let scans = session.scans.iter().map(|v| central_crop(v.data(), SIDE)).collect();
        let lesion = match &session.lesion {
            Some(l) => central_crop(&l.mapv(f32::from), SIDE)
                .into_iter()
                .map(|x| x > 0.5)
                .collect(),
            None => vec![false; SIDE.pow(3)],
        };
        Ok(Self { scans, lesion })
    }

    /// Grey-level RGBA of axial slice `z`, anterior at the top.
    pub fn render(&self, modality: usize, z: usize, tint: impl Fn(usize) -> Option<[u8; 3]>) -> Result<Vec<u8>> {
        let scan = self
            .scans
            .get(modality)
            .ok_or_else(|| Error::InvalidArgument(format!("no modality {modality}")))?;
        if z >= SIDE {
            return Err(Error::InvalidArgument(format!("slice {z} outside 0..{SIDE}")));
        }
        let (lo, hi) = scan
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
        let mut out = Vec::with_capacity(SIDE * SIDE * 4);
        for row in 0..SIDE {
            let j = SIDE - 1 - row;
            for i in 0..SIDE {
                let idx = (i * SIDE + j) * SIDE + z;
                let g = ((scan[idx] - lo) * scale) as u8;
                let [r, gr, b] = tint(idx).unwrap_or([g, g, g]);
                out.extend_from_slice(&[r, gr, b, 255]);
            }
        }
        Ok(out)
    }

    pub fn masked(&self, modality: usize, z: usize, ratio: f64, seed: u32) -> Result<Vec<u8>> {
        let cfg = EncoderConfig::tiny();
        let dims = [SIDE; 3];
        let factor = cfg.bottleneck_stride / cfg.patch_embed_stride;
        let mut rng = ChaCha8Rng::seed_from_u64(u64::from(seed));
        let masks = make_bottleneck_mask(cfg.bottleneck_grid(dims), factor, ratio, &mut rng)?;
        let hidden = masks.voxel_mask(cfg.patch_embed_stride);
        self.render(modality, z, |idx| hidden[idx].then_some([40, 60, 110]))
    }
}

#[wasm_bindgen]
impl Phantom {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, lesions: bool) -> std::result::Result<Phantom, JsError> {
        Self::generate(seed, lesions).map_err(js)
    }

    pub fn side(&self) -> usize {
        SIDE
    }

    pub fn modality_names() -> Vec<String> {
        MODALITIES.iter().map(|m| m.to_string()).collect()
    }

    /// RGBA slice with lesion voxels optionally drawn in red.
    pub fn slice(&self, modality: usize, z: usize, show_lesion: bool) -> std::result::Result<Vec<u8>, JsError> {
        self.render(modality, z, |idx| {
            (show_lesion && self.lesion[idx]).then_some([230, 40, 40])
        })
        .map_err(js)
    }

    /// RGBA slice with the voxels hidden by a random pre-training mask shaded.
    pub fn masked_slice(
        &self,
        modality: usize,
        z: usize,
        ratio: f64,
        seed: u32,
    ) -> std::result::Result<Vec<u8>, JsError> {
        self.masked(modality, z, ratio, seed).map_err(js)
    }
}

/// Teacher momentum at `points` evenly spaced steps of a `total_steps` run.
pub fn momentum_samples(total_steps: u32, points: usize) -> Result<Vec<f64>> {
    let total = u64::from(total_steps);
    let schedule = MomentumSchedule::default();
    let last = points.saturating_sub(1).max(1) as u64;
    (0..points as u64)
        .map(|i| schedule.at(i * total / last, total))
        .collect()
}

#[wasm_bindgen]
pub fn momentum_curve(total_steps: u32, points: usize) -> std::result::Result<Vec<f64>, JsError> {
    momentum_samples(total_steps, points).map_err(js)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantom_slices_are_rgba_squares() {
        let p = Phantom::generate(3, true).unwrap();
        let img = p.render(0, SIDE / 2, |_| None).unwrap();
        assert_eq!(img.len(), SIDE * SIDE * 4);
        assert!(img.chunks(4).any(|px| px[0] > 128));
        assert!(p.lesion.iter().any(|&l| l));
        assert!(p.render(3, 0, |_| None).is_err());
        assert!(p.render(0, SIDE, |_| None).is_err());
    }

    #[test]
    fn masked_share_follows_the_ratio() {
        let p = Phantom::generate(1, false).unwrap();
        let full = p.masked(0, 20, 1.0, 0).unwrap();
        assert!(full.chunks(4).all(|px| px[..3] == [40, 60, 110]));
        let none = p.masked(0, 20, 0.0, 0).unwrap();
        assert_eq!(none, p.render(0, 20, |_| None).unwrap());
    }

    #[test]
    fn momentum_curve_ramps_then_holds() {
        let c = momentum_samples(1000, 11).unwrap();
        assert_eq!(c.len(), 11);
        assert!((c[0] - 0.996).abs() < 1e-12);
        assert!((c[2] - 0.999).abs() < 1e-12);
        assert!((c[10] - 0.999).abs() < 1e-12);
        assert!(c.windows(2).all(|w| w[1] >= w[0]));
    }
}
