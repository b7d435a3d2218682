//! Curation pipeline: reorient, resample, crop, size filter, clip and normalize.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, CohortIndex, ScanRecord, Session, Split};
use crate::error::{invalid, Error, Result};
use crate::volume::{to_ras, Modality, Orientation, Volume};

/// Brings the volume into RAS axis order.
pub fn reorient_ras(v: &Volume) -> Volume {
    let o = v.orientation();
    if o.is_ras() {
        return v.clone();
    }
    let mut spacing = [0.0; 3];
    for (a, &w) in o.world_axis.iter().enumerate() {
        spacing[w] = v.spacing()[a];
    }
    let data = to_ras(v.data().view(), o);
    let mask = v.brain_mask().map(|m| to_ras(m.view(), o));
    v.replace(data, spacing, Orientation::RAS, mask)
}

/// Output length along one axis after resampling.
fn resampled_len(n: usize, spacing: f64, target: f64) -> usize {
    ((n as f64 * spacing / target).round() as usize).max(1)
}

/// Linear interpolation along `axis`; sample `j` reads source position
/// `j * step`, clamped to the last voxel.
fn interp_axis(src: &Array3<f32>, axis: usize, len: usize, step: f64) -> Array3<f32> {
    let mut shape = [src.shape()[0], src.shape()[1], src.shape()[2]];
    let n = shape[axis];
    shape[axis] = len;
    let mut out = Array3::<f32>::zeros(shape);
    let taps: Vec<(usize, usize, f64)> = (0..len)
        .map(|j| {
            let x = (j as f64 * step).min((n - 1) as f64);
            let i0 = x.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, x - i0 as f64)
        })
        .collect();
    for (mut dst, s) in out.lanes_mut(Axis(axis)).into_iter().zip(src.lanes(Axis(axis))) {
        for (d, &(i0, i1, t)) in dst.iter_mut().zip(&taps) {
            let a = f64::from(s[i0]);
            let b = f64::from(s[i1]);
            *d = if t == 0.0 { s[i0] } else { (a + (b - a) * t) as f32 };
        }
    }
    out
}

fn nearest_axis(src: &Array3<bool>, axis: usize, len: usize, step: f64) -> Array3<bool> {
    let n = src.shape()[axis];
    let idx: Vec<usize> = (0..len)
        .map(|j| ((j as f64 * step).round() as usize).min(n - 1))
        .collect();
    let mut shape = [src.shape()[0], src.shape()[1], src.shape()[2]];
    shape[axis] = len;
    let mut out = Array3::from_elem(shape, false);
    for (mut dst, s) in out.lanes_mut(Axis(axis)).into_iter().zip(src.lanes(Axis(axis))) {
        for (d, &i) in dst.iter_mut().zip(&idx) {
            *d = s[i];
        }
    }
    out
}

/// Resamples to isotropic `target_mm` spacing. Intensities are interpolated
/// trilinearly, masks by nearest neighbour. Voxel 0 keeps its position.
pub fn resample_isotropic(v: &Volume, target_mm: f64) -> Result<Volume> {
    if !(target_mm > 0.0) || !target_mm.is_finite() {
        return Err(invalid(format!("target spacing {target_mm} must be positive")));
    }
    let spacing = v.spacing();
    if spacing.iter().all(|&s| s == target_mm) {
        return Ok(v.clone());
    }
    let shape = v.shape();
    let mut data = v.data().clone();
    let mut mask = v.brain_mask().cloned();
    for axis in 0..3 {
        if spacing[axis] == target_mm {
            continue;
        }
        let len = resampled_len(shape[axis], spacing[axis], target_mm);
        let step = target_mm / spacing[axis];
        data = interp_axis(&data, axis, len, step);
        mask = mask.map(|m| nearest_axis(&m, axis, len, step));
    }
    Ok(v.replace(data, [target_mm; 3], v.orientation(), mask))
}

/// Tight bounding box of the true voxels, or `None` for an empty mask.
pub fn mask_bbox(mask: &Array3<bool>) -> Option<[Range<usize>; 3]> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for ((i, j, k), &m) in mask.indexed_iter() {
        if m {
            any = true;
            for (a, p) in [i, j, k].into_iter().enumerate() {
                lo[a] = lo[a].min(p);
                hi[a] = hi[a].max(p);
            }
        }
    }
    any.then(|| [lo[0]..hi[0] + 1, lo[1]..hi[1] + 1, lo[2]..hi[2] + 1])
}

/// Crops data and mask to the tight bounding box of the brain mask.
pub fn crop_to_bbox(v: &Volume) -> Result<Volume> {
    let mask = v
        .brain_mask()
        .ok_or_else(|| invalid("cropping requires a brain mask"))?;
    let [r0, r1, r2] = mask_bbox(mask).ok_or(Error::EmptyMask)?;
    let slice = ndarray::s![r0, r1, r2];
    let data = v.data().slice(slice).to_owned();
    let mask = mask.slice(slice).to_owned();
    Ok(v.replace(data, v.spacing(), v.orientation(), Some(mask)))
}

/// Percentile `q` (0..=100) of ascending `sorted` values, interpolating
/// linearly between the closest ranks.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty sample");
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

/// Clip bounds and in-mask statistics used by [`clip_normalize`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub clip_low: f64,
    pub clip_high: f64,
    pub mean: f64,
    pub std: f64,
}

pub const CLIP_LOW_PERCENTILE: f64 = 0.5;
pub const CLIP_HIGH_PERCENTILE: f64 = 99.5;

/// Clips to the in-mask 0.5–99.5 percentile range, then z-scores the whole
/// volume with the in-mask mean and standard deviation of the clipped values.
pub fn clip_normalize(v: &Volume) -> Result<Volume> {
    Ok(clip_normalize_with_stats(v)?.0)
}

pub fn clip_normalize_with_stats(v: &Volume) -> Result<(Volume, NormStats)> {
    let mask = v
        .brain_mask()
        .ok_or_else(|| invalid("normalization requires a brain mask"))?;
    let mut inside: Vec<f64> = v
        .data()
        .iter()
        .zip(mask.iter())
        .filter(|(_, &m)| m)
        .map(|(&x, _)| f64::from(x))
        .collect();
    if inside.is_empty() {
        return Err(Error::EmptyMask);
    }
    if inside.len() < 2 {
        return Err(invalid("normalization needs at least two brain voxels"));
    }
    inside.sort_by(f64::total_cmp);
    let lo = percentile(&inside, CLIP_LOW_PERCENTILE);
    let hi = percentile(&inside, CLIP_HIGH_PERCENTILE);
    let n = inside.len() as f64;
    let mean = inside.iter().map(|&x| x.clamp(lo, hi)).sum::<f64>() / n;
    let var = inside.iter().map(|&x| (x.clamp(lo, hi) - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 1e-12 * (1.0 + mean.abs())) {
        return Err(Error::DegenerateVolume(
            "constant intensity inside the brain mask".into(),
        ));
    }
    let data = v.data().mapv(|x| ((f64::from(x).clamp(lo, hi) - mean) / std) as f32);
    let out = v.replace(data, v.spacing(), v.orientation(), Some(mask.clone()));
    Ok((
        out,
        NormStats {
            clip_low: lo,
            clip_high: hi,
            mean,
            std,
        },
    ))
}

/// Keeps volumes whose extent is at least `min_extent_mm` along every axis.
pub fn size_filter(v: &Volume, min_extent_mm: f64) -> bool {
    v.extent_mm().iter().all(|&e| e >= min_extent_mm)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocConfig {
    pub target_mm: f64,
    pub min_extent_mm: f64,
}

impl Default for PreprocConfig {
    fn default() -> Self {
        Self {
            target_mm: 1.0,
            min_extent_mm: 120.0,
        }
    }
}

/// Why a scan was excluded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    Size,
    Degenerate,
    EmptyMask,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::Size => "size",
            RejectReason::Degenerate => "degenerate",
            RejectReason::EmptyMask => "empty-mask",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum PreprocOutcome {
    Kept(Volume),
    Rejected(RejectReason),
}

/// Full pipeline. The brain mask defaults to the nonzero voxels.
pub fn preprocess_volume(v: &Volume, cfg: &PreprocConfig) -> Result<PreprocOutcome> {
    let v = reorient_ras(&v.clone().with_derived_mask());
    let v = resample_isotropic(&v, cfg.target_mm)?;
    let v = match crop_to_bbox(&v) {
        Ok(v) => v,
        Err(Error::EmptyMask) => return Ok(PreprocOutcome::Rejected(RejectReason::EmptyMask)),
        Err(e) => return Err(e),
    };
    if !size_filter(&v, cfg.min_extent_mm) {
        return Ok(PreprocOutcome::Rejected(RejectReason::Size));
    }
    match clip_normalize(&v) {
        Ok(v) => Ok(PreprocOutcome::Kept(v)),
        Err(Error::DegenerateVolume(_)) => Ok(PreprocOutcome::Rejected(RejectReason::Degenerate)),
        Err(e) => Err(e),
    }
}

/// Result of preprocessing all scans of a session together.
#[derive(Clone, Debug, PartialEq)]
pub enum SessionOutcome {
    Kept(Session),
    Rejected(RejectReason),
}

/// Runs the pipeline on co-registered scans with one shared crop (the union
/// of their brain masks), carrying the lesion mask along so scans and labels
/// stay on one grid.
pub fn preprocess_session(s: &Session, cfg: &PreprocConfig) -> Result<SessionOutcome> {
    let first = s
        .scans
        .first()
        .ok_or_else(|| invalid(format!("session {}/{} has no scans", s.subject, s.session)))?;
    let scans: Vec<Volume> = s
        .scans
        .iter()
        .map(|v| resample_isotropic(&reorient_ras(&v.clone().with_derived_mask()), cfg.target_mm))
        .collect::<Result<_>>()?;
    let lesion = match &s.lesion {
        Some(l) => {
            let carrier = Volume::new(
                l.mapv(f32::from),
                first.spacing(),
                first.orientation(),
                first.modality(),
            )?
            .with_mask(l.clone())?;
            let moved = resample_isotropic(&reorient_ras(&carrier), cfg.target_mm)?;
            Some(moved.brain_mask().expect("mask carried through").clone())
        }
        None => None,
    };
    let mut union = Array3::from_elem(scans[0].data().raw_dim(), false);
    for v in &scans {
        let m = v.brain_mask().expect("derived above");
        if m.shape() != union.shape() {
            return Err(invalid("scans of a session are not on one grid"));
        }
        union.zip_mut_with(m, |u, &b| *u |= b);
    }
    let Some([r0, r1, r2]) = mask_bbox(&union) else {
        return Ok(SessionOutcome::Rejected(RejectReason::EmptyMask));
    };
    let slice = ndarray::s![r0, r1, r2];
    let mut out = Vec::with_capacity(scans.len());
    for v in &scans {
        let data = v.data().slice(slice).to_owned();
        let mask = v.brain_mask().expect("derived above").slice(slice).to_owned();
        let cropped = v.replace(data, v.spacing(), v.orientation(), Some(mask));
        if !size_filter(&cropped, cfg.min_extent_mm) {
            return Ok(SessionOutcome::Rejected(RejectReason::Size));
        }
        match clip_normalize(&cropped) {
            Ok(n) => out.push(n),
            Err(Error::DegenerateVolume(_) | Error::EmptyMask) => {
                return Ok(SessionOutcome::Rejected(RejectReason::Degenerate))
            }
            Err(e) => return Err(e),
        }
    }
    Ok(SessionOutcome::Kept(Session {
        scans: out,
        lesion: lesion.map(|l| l.slice(slice).to_owned()),
        ..s.clone()
    }))
}

/// One line of the preprocessing report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocRecord {
    pub subject: u32,
    pub session: u32,
    pub modality: Modality,
    pub source: PathBuf,
    pub kept: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<RejectReason>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shape: Option<[usize; 3]>,
}

pub const PREPROC_REPORT_NAME: &str = "preprocess.jsonl";

/// Preprocesses every session of `index` into `out`, one session in memory
/// at a time. Writes the new manifest and a per-scan report.
pub fn preprocess_cohort(
    index: &CohortIndex,
    cfg: &PreprocConfig,
    out: &Path,
) -> Result<(CohortIndex, Vec<PreprocRecord>)> {
    let mut groups: BTreeMap<(u32, u32), Vec<ScanRecord>> = BTreeMap::new();
    for r in &index.records {
        groups.entry((r.subject, r.session)).or_default().push(r.clone());
    }
    let splits = [Split::Pretrain, Split::Finetune, Split::Validation];
    let mut kept = Vec::new();
    let mut report = Vec::new();
    for recs in groups.into_values() {
        let one = CohortIndex::new(index.root.clone(), recs.clone())?;
        let session = one.load_sessions(&splits)?.sessions.remove(0);
        let outcome = preprocess_session(&session, cfg)?;
        for r in &recs {
            let (ok, reason, shape) = match &outcome {
                SessionOutcome::Kept(s) => (true, None, Some(s.shape())),
                SessionOutcome::Rejected(why) => (false, Some(*why), None),
            };
            report.push(PreprocRecord {
                subject: r.subject,
                session: r.session,
                modality: r.modality,
                source: r.path.clone(),
                kept: ok,
                reason,
                shape,
            });
        }
        if let SessionOutcome::Kept(s) = outcome {
            kept.push(s);
        }
    }
    let new_index = Cohort::new(kept)?.write(out)?;
    let mut w = BufWriter::new(File::create(out.join(PREPROC_REPORT_NAME))?);
    for r in &report {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok((new_index, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Modality;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp(shape: [usize; 3]) -> Volume {
        let n = shape.iter().product();
        Volume::from_flat(shape, (0..n).map(|v| v as f32).collect(), Modality::T1).unwrap()
    }

    /// Direct trilinear interpolation at a fractional source position.
    fn trilinear(v: &Array3<f32>, x: [f64; 3]) -> f64 {
        let s = v.shape();
        let mut acc = 0.0;
        let base: Vec<usize> = (0..3).map(|a| x[a].floor() as usize).collect();
        for corner in 0..8 {
            let mut w = 1.0;
            let mut idx = [0; 3];
            for a in 0..3 {
                let up = (corner >> a) & 1 == 1;
                let t = x[a] - base[a] as f64;
                w *= if up { t } else { 1.0 - t };
                idx[a] = (base[a] + usize::from(up)).min(s[a] - 1);
            }
            acc += w * f64::from(v[idx]);
        }
        acc
    }

    #[test]
    fn resample_doubles_shape() {
        let v = Volume::new(Array3::zeros((100, 100, 100)), [2.0; 3], Orientation::RAS, Modality::T1).unwrap();
        let r = resample_isotropic(&v, 1.0).unwrap();
        assert_eq!(r.shape(), [200; 3]);
        assert_eq!(r.spacing(), [1.0; 3]);
    }

    #[test]
    fn resample_identity_is_bitwise() {
        let v = ramp([5, 6, 7]);
        assert_eq!(resample_isotropic(&v, 1.0).unwrap(), v);
        assert!(resample_isotropic(&v, 0.0).is_err());
    }

    #[test]
    fn anisotropic_resample_matches_trilinear_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = Array3::from_shape_fn((64, 64, 32), |_| rng.random_range(0.0f32..100.0));
        let v = Volume::new(data.clone(), [1.0, 1.0, 2.0], Orientation::RAS, Modality::T1).unwrap();
        let r = resample_isotropic(&v, 1.0).unwrap();
        assert_eq!(r.shape(), [64, 64, 64]);
        for i in 28..36 {
            for j in 28..36 {
                for k in 28..36 {
                    let expect = trilinear(&data, [i as f64, j as f64, k as f64 * 0.5]);
                    assert!((f64::from(r.data()[[i, j, k]]) - expect).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn reorient_ras_identity_and_single_flip() {
        let v = ramp([3, 4, 5]);
        assert_eq!(reorient_ras(&v), v);
        let las = v.replace(v.data().clone(), [1.0; 3], "LAS".parse().unwrap(), None);
        let r = reorient_ras(&las);
        for ((i, j, k), &x) in r.data().indexed_iter() {
            assert_eq!(x, v.data()[[2 - i, j, k]]);
        }
        let back = r.replace(r.data().clone(), [1.0; 3], "LAS".parse().unwrap(), None);
        assert_eq!(reorient_ras(&back).data(), v.data());
    }

    #[test]
    fn corner_marker_lands_at_ras_corner_for_all_codes() {
        let shape = [2, 3, 4];
        for o in Orientation::all() {
            let mut data = Array3::<f32>::zeros(shape);
            data[[0, 0, 0]] = 1.0;
            let v = Volume::new(data, [1.0, 2.0, 3.0], o, Modality::T1).unwrap();
            let r = reorient_ras(&v);
            // Array axis a maps to world axis w; the marker sits at index 0 of
            // each array axis, i.e. at the low end unless that axis is flipped.
            let mut expect = [0usize; 3];
            let mut spacing = [0.0; 3];
            let mut out_shape = [0usize; 3];
            for a in 0..3 {
                let w = o.world_axis[a];
                out_shape[w] = shape[a];
                spacing[w] = v.spacing()[a];
                expect[w] = if o.flipped[a] { shape[a] - 1 } else { 0 };
            }
            assert_eq!(r.shape(), out_shape, "{o}");
            assert_eq!(r.spacing(), spacing);
            assert_eq!(r.data()[expect], 1.0, "{o}");
            assert_eq!(reorient_ras(&r), r);
        }
    }

    #[test]
    fn crop_cases() {
        let v = ramp([4, 4, 4]);
        let full = v.clone().with_mask(Array3::from_elem((4, 4, 4), true)).unwrap();
        assert_eq!(crop_to_bbox(&full).unwrap(), full);

        let big = ramp([10, 10, 10]);
        let mut m = Array3::from_elem((10, 10, 10), false);
        m[[5, 6, 7]] = true;
        let c = crop_to_bbox(&big.clone().with_mask(m).unwrap()).unwrap();
        assert_eq!(c.shape(), [1, 1, 1]);
        assert_eq!(c.data()[[0, 0, 0]], big.data()[[5, 6, 7]]);

        let empty = big.with_mask(Array3::from_elem((10, 10, 10), false)).unwrap();
        assert!(matches!(crop_to_bbox(&empty), Err(Error::EmptyMask)));
    }

    #[test]
    fn random_blob_bbox_matches_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = Array3::from_shape_fn((12, 9, 15), |_| rng.random_bool(0.02));
        let (mut lo, mut hi) = ([usize::MAX; 3], [0; 3]);
        for i in 0..12 {
            for j in 0..9 {
                for k in 0..15 {
                    if m[[i, j, k]] {
                        lo = [lo[0].min(i), lo[1].min(j), lo[2].min(k)];
                        hi = [hi[0].max(i), hi[1].max(j), hi[2].max(k)];
                    }
                }
            }
        }
        let b = mask_bbox(&m).unwrap();
        for a in 0..3 {
            assert_eq!(b[a], lo[a]..hi[a] + 1);
        }
    }

    #[test]
    fn uniform_ramp_percentiles_and_moments() {
        let v = ramp([10, 10, 10])
            .with_mask(Array3::from_elem((10, 10, 10), true))
            .unwrap();
        let (out, st) = clip_normalize_with_stats(&v).unwrap();
        // Rank 0.005·999 = 4.995 and 0.995·999 = 994.005 on the values 0..999.
        assert!((st.clip_low - 4.995).abs() < 1e-9);
        assert!((st.clip_high - 994.005).abs() < 1e-9);
        let n = out.data().len() as f64;
        let mean = out.data().iter().map(|&x| f64::from(x)).sum::<f64>() / n;
        let var = out.data().iter().map(|&x| (f64::from(x) - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-5);
        assert!((var.sqrt() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn constant_volume_is_degenerate() {
        let v = Volume::from_flat([3, 3, 3], vec![5.0; 27], Modality::T1)
            .unwrap()
            .with_derived_mask();
        assert!(matches!(clip_normalize(&v), Err(Error::DegenerateVolume(_))));
    }

    #[test]
    fn size_filter_boundary() {
        let make = |s: [usize; 3]| Volume::new(Array3::zeros(s), [1.0; 3], Orientation::RAS, Modality::T1).unwrap();
        assert!(size_filter(&make([121, 140, 130]), 120.0));
        assert!(!size_filter(&make([119, 140, 130]), 120.0));
        assert!(size_filter(&make([120, 120, 120]), 120.0));
    }

    #[test]
    fn undersized_scan_is_rejected_for_size() {
        let v = Volume::from_flat([20, 20, 20], vec![1.0; 8000], Modality::T1).unwrap();
        assert_eq!(
            preprocess_volume(&v, &PreprocConfig::default()).unwrap(),
            PreprocOutcome::Rejected(RejectReason::Size)
        );
    }

    fn small_cohort(lesion_fraction: f64) -> crate::synth::SynthCohort {
        crate::synth::generate_cohort(&crate::synth::CohortSpec {
            n_subjects: 3,
            volume_shape: [32; 3],
            lesion_fraction,
            seed: 5,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn preprocessing_is_idempotent_with_attached_mask() {
        let c = small_cohort(0.0);
        let cfg = PreprocConfig {
            target_mm: 1.0,
            min_extent_mm: 10.0,
        };
        let PreprocOutcome::Kept(once) = preprocess_volume(&c.cohort.sessions[0].scans[0], &cfg).unwrap() else {
            panic!("rejected")
        };
        let PreprocOutcome::Kept(twice) = preprocess_volume(&once, &cfg).unwrap() else {
            panic!("rejected")
        };
        assert_eq!(once.shape(), twice.shape());
        assert_eq!(once.brain_mask(), twice.brain_mask());
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn session_scans_and_lesion_share_one_crop() {
        let c = small_cohort(1.0);
        let s = &c.cohort.sessions[0];
        let lesion_voxels = s.lesion.as_ref().unwrap().iter().filter(|&&b| b).count();
        assert!(lesion_voxels > 0);
        let cfg = PreprocConfig {
            target_mm: 1.0,
            min_extent_mm: 10.0,
        };
        let SessionOutcome::Kept(out) = preprocess_session(s, &cfg).unwrap() else {
            panic!("rejected")
        };
        let shape = out.shape();
        assert!(shape.iter().all(|&d| d <= 32));
        for v in &out.scans {
            assert_eq!(v.shape(), shape);
        }
        let lesion = out.lesion.as_ref().unwrap();
        assert_eq!(lesion.shape(), &shape[..]);
        // lesions sit inside the brain, so the crop keeps all of them
        assert_eq!(lesion.iter().filter(|&&b| b).count(), lesion_voxels);
    }

    #[test]
    fn session_below_min_extent_is_rejected() {
        let c = small_cohort(0.0);
        let cfg = PreprocConfig {
            target_mm: 1.0,
            min_extent_mm: 120.0,
        };
        let out = preprocess_session(&c.cohort.sessions[0], &cfg).unwrap();
        assert_eq!(out, SessionOutcome::Rejected(RejectReason::Size));
    }

    #[test]
    fn cohort_round_trips_through_disk() {
        let c = small_cohort(0.5);
        let dir = tempfile::tempdir().unwrap();
        let raw = crate::synth::write_cohort(&c, &dir.path().join("raw")).unwrap();
        let cfg = PreprocConfig {
            target_mm: 1.0,
            min_extent_mm: 10.0,
        };
        let (index, report) = preprocess_cohort(&raw, &cfg, &dir.path().join("pre")).unwrap();
        assert_eq!(report.len(), raw.records.len());
        assert!(report.iter().all(|r| r.kept));
        assert!(index.records.iter().all(|r| r.mask_path.is_some()));
        assert!(dir.path().join("pre").join(PREPROC_REPORT_NAME).exists());
        let back = CohortIndex::load(&index.root.join("cohort.jsonl")).unwrap();
        let reloaded = back
            .load_sessions(&[Split::Pretrain, Split::Finetune, Split::Validation])
            .unwrap();
        assert_eq!(reloaded.len(), c.cohort.len());
        for s in &reloaded.sessions {
            for v in &s.scans {
                let PreprocOutcome::Kept(again) = preprocess_volume(v, &cfg).unwrap() else {
                    panic!("rejected")
                };
                assert_eq!(again.shape(), v.shape());
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn normalized_moments_hold(seed in any::<u64>(), scale in 0.1f32..1000.0, offset in -500.0f32..500.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = Array3::from_shape_fn((9, 8, 7), |_| rng.random_range(0.0f32..1.0) * scale + offset);
            let mask = Array3::from_shape_fn((9, 8, 7), |_| rng.random_bool(0.7));
            prop_assume!(mask.iter().filter(|&&m| m).count() >= 2);
            let v = Volume::new(data, [1.0; 3], Orientation::RAS, Modality::T1).unwrap().with_mask(mask.clone()).unwrap();
            let (out, st) = clip_normalize_with_stats(&v).unwrap();
            let vals: Vec<f64> = out.data().iter().zip(mask.iter()).filter(|(_, &m)| m).map(|(&x, _)| f64::from(x)).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let std = (vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(mean.abs() < 1e-5);
            prop_assert!((std - 1.0).abs() < 1e-5);
            // Clipping never widens the range; raw outliers land on the bounds.
            let raw: Vec<f64> = v.data().iter().zip(mask.iter()).filter(|(_, &m)| m).map(|(&x, _)| f64::from(x)).collect();
            let (rmin, rmax) = raw.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
            prop_assert!(st.clip_low >= rmin && st.clip_high <= rmax);
        }

        #[test]
        fn reorient_is_idempotent(code in 0usize..48) {
            let o = Orientation::all()[code];
            let v = ramp([2, 3, 4]);
            let v = v.replace(v.data().clone(), [1.0, 1.5, 2.0], o, None);
            let once = reorient_ras(&v);
            prop_assert_eq!(reorient_ras(&once), once);
        }

        #[test]
        fn resample_twice_is_stable(seed in any::<u64>(), sz in 1.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = Array3::from_shape_fn((6, 7, 5), |_| rng.random_range(-1.0f32..1.0));
            let v = Volume::new(data, [1.0, sz, 0.5], Orientation::RAS, Modality::T1).unwrap();
            let once = resample_isotropic(&v, 1.0).unwrap();
            let twice = resample_isotropic(&once, 1.0).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn crop_never_grows(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mask = Array3::from_shape_fn((7, 6, 5), |_| rng.random_bool(0.1));
            prop_assume!(mask.iter().any(|&m| m));
            let v = ramp([7, 6, 5]).with_mask(mask).unwrap();
            let c = crop_to_bbox(&v).unwrap();
            for a in 0..3 {
                prop_assert!(c.shape()[a] <= v.shape()[a]);
            }
            let kept = c.brain_mask().unwrap().iter().filter(|&&m| m).count();
            prop_assert_eq!(kept, v.brain_mask().unwrap().iter().filter(|&&m| m).count());
        }

        #[test]
        fn size_filter_is_monotone(a in 100usize..140, b in 100usize..140, c in 100usize..140, grow in 0usize..10) {
            let make = |s: [usize; 3]| Volume::new(Array3::zeros(s), [1.0; 3], Orientation::RAS, Modality::T1).unwrap();
            if size_filter(&make([a, b, c]), 120.0) {
                prop_assert!(size_filter(&make([a + grow, b + grow, c + grow]), 120.0));
            }
        }
    }
}
