//! Embedding analyses: cross-modality alignment, cross-subject separability
//! and 2D projections for plotting.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use ndarray::Array3;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cohort::Cohort;
use crate::error::{invalid, Error, Result};
use crate::model::Encoder;
use crate::volume::Modality;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingSource {
    #[default]
    Validation,
    DownstreamTest,
}

/// Pooled bottleneck features of one scan's central crop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub subject: u32,
    pub session: u32,
    pub modality: Modality,
    pub embedding: Vec<f32>,
    pub source: EmbeddingSource,
}

/// Central `n`³ crop, padded with the volume minimum where the volume is
/// smaller than `n` (the background value after normalization).
pub fn central_crop(v: &Array3<f32>, n: usize) -> Vec<f32> {
    let sh = v.shape();
    let fill = v.iter().copied().fold(f32::INFINITY, f32::min);
    let offset: Vec<i64> = sh.iter().map(|&d| (d as i64 - n as i64).div_euclid(2)).collect();
    let mut out = Vec::with_capacity(n.pow(3));
    for i in 0..n as i64 {
        for j in 0..n as i64 {
            for k in 0..n as i64 {
                let p = [i + offset[0], j + offset[1], k + offset[2]];
                let inside = p.iter().zip(sh).all(|(&x, &d)| x >= 0 && (x as usize) < d);
                out.push(if inside {
                    v[[p[0] as usize, p[1] as usize, p[2] as usize]]
                } else {
                    fill
                });
            }
        }
    }
    out
}

/// One unmasked forward per (subject, session, modality).
pub fn extract_embeddings(
    encoder: &Encoder<f32>,
    cohort: &Cohort,
    crop: usize,
    source: EmbeddingSource,
) -> Result<Vec<EmbeddingRecord>> {
    let mut out = Vec::new();
    for s in &cohort.sessions {
        for v in &s.scans {
            let x = central_crop(v.data(), crop);
            let pyr = encoder.encode(&x, [crop; 3], None)?;
            let embedding = pyr.pooled();
            if embedding.iter().any(|e| !e.is_finite()) {
                return Err(Error::NumericalDegeneracy(format!(
                    "non-finite embedding for subject {} session {} {}",
                    s.subject,
                    s.session,
                    v.modality()
                )));
            }
            out.push(EmbeddingRecord {
                subject: s.subject,
                session: s.session,
                modality: v.modality(),
                embedding,
                source,
            });
        }
    }
    Ok(out)
}

/// `1 − cos(a, b)`, in `[0, 2]`.
pub fn cosine_distance(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::NumericalDegeneracy("cosine distance of a zero vector".into()));
    }
    Ok((1.0 - dot / (na.sqrt() * nb.sqrt())).clamp(0.0, 2.0))
}

/// Mean and population standard deviation over enumerated pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairStat {
    pub mean: f64,
    pub std: f64,
    pub n_pairs: usize,
}

impl PairStat {
    fn from_values(v: &[f64]) -> Self {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            n_pairs: v.len(),
        }
    }
}

impl fmt::Display for PairStat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub cross_modality: PairStat,
    pub cross_subject: PairStat,
    pub reference_modality: Modality,
}

impl fmt::Display for AlignmentReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "cross-modality distance: {} ({} pairs)",
            self.cross_modality, self.cross_modality.n_pairs
        )?;
        writeln!(
            f,
            "cross-subject distance ({}): {} ({} pairs)",
            self.reference_modality, self.cross_subject, self.cross_subject.n_pairs
        )
    }
}

/// Cross-modality distances over every unordered modality pair within each
/// (subject, session); cross-subject distances over every subject pair in
/// `reference` (default: the first modality present), using one session per
/// subject chosen with `seed`.
pub fn alignment_report(
    records: &[EmbeddingRecord],
    reference: Option<Modality>,
    seed: u64,
) -> Result<AlignmentReport> {
    let modalities: BTreeSet<Modality> = records.iter().map(|r| r.modality).collect();
    let subjects: BTreeSet<u32> = records.iter().map(|r| r.subject).collect();
    if modalities.len() < 2 || subjects.len() < 2 {
        return Err(invalid(format!(
            "need at least 2 modalities and 2 subjects, got {} and {}",
            modalities.len(),
            subjects.len()
        )));
    }
    if let Some(d) = records.first().map(|r| r.embedding.len()) {
        if records.iter().any(|r| r.embedding.len() != d) {
            return Err(invalid("embeddings differ in dimensionality"));
        }
    }
    let reference = reference.unwrap_or(*modalities.first().expect("non-empty"));

    let mut sessions: BTreeMap<(u32, u32), BTreeMap<Modality, &EmbeddingRecord>> = BTreeMap::new();
    for r in records {
        if sessions
            .entry((r.subject, r.session))
            .or_default()
            .insert(r.modality, r)
            .is_some()
        {
            return Err(invalid(format!(
                "duplicate record for subject {} session {} {}",
                r.subject, r.session, r.modality
            )));
        }
    }

    let mut cross_mod = Vec::new();
    for scans in sessions.values() {
        let v: Vec<&&EmbeddingRecord> = scans.values().collect();
        for i in 0..v.len() {
            for j in i + 1..v.len() {
                cross_mod.push(cosine_distance(&v[i].embedding, &v[j].embedding)?);
            }
        }
    }
    if cross_mod.is_empty() {
        return Err(invalid("no session holds two modalities"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_subject: BTreeMap<u32, Vec<&EmbeddingRecord>> = BTreeMap::new();
    for ((subject, _), scans) in &sessions {
        if let Some(r) = scans.get(&reference) {
            per_subject.entry(*subject).or_default().push(r);
        }
    }
    let chosen: Vec<&EmbeddingRecord> = per_subject
        .values()
        .map(|c| *c.choose(&mut rng).expect("non-empty"))
        .collect();
    if chosen.len() < 2 {
        return Err(invalid(format!("fewer than 2 subjects have modality {reference}")));
    }
    let mut cross_subj = Vec::new();
    for i in 0..chosen.len() {
        for j in i + 1..chosen.len() {
            cross_subj.push(cosine_distance(&chosen[i].embedding, &chosen[j].embedding)?);
        }
    }
    Ok(AlignmentReport {
        cross_modality: PairStat::from_values(&cross_mod),
        cross_subject: PairStat::from_values(&cross_subj),
        reference_modality: reference,
    })
}

/// Any method mapping vectors to deterministic 2D coordinates.
pub trait Reducer2d {
    fn reduce(&self, data: &[Vec<f32>]) -> Result<Vec<[f64; 2]>>;
}

/// Exact t-SNE with a seeded initial layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tsne {
    pub perplexity: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for Tsne {
    fn default() -> Self {
        Self {
            perplexity: 10.0,
            epochs: 1000,
            learning_rate: 200.0,
            seed: 0,
        }
    }
}

impl Reducer2d for Tsne {
    fn reduce(&self, data: &[Vec<f32>]) -> Result<Vec<[f64; 2]>> {
        let n = data.len();
        if n < 3 {
            return Err(invalid(format!("t-SNE needs at least 3 points, got {n}")));
        }
        if !(self.perplexity > 0.0) || self.epochs == 0 {
            return Err(invalid("t-SNE needs positive perplexity and epochs"));
        }
        // The library rejects perplexities above (n - 1) / 3.
        let perplexity = self.perplexity.min((n - 1) as f64 / 3.0);
        let rows: Vec<Vec<f64>> = data.iter().map(|v| v.iter().map(|&x| f64::from(x)).collect()).collect();
        let normal = Normal::new(0.0, 1e-4).expect("valid std");
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let init: Vec<f64> = (0..2 * n).map(|_| normal.sample(&mut rng)).collect();
        let mut tsne: bhtsne::tSNE<f64, Vec<f64>> = bhtsne::tSNE::new(&rows);
        tsne.embedding_dim(2)
            .perplexity(perplexity)
            .epochs(self.epochs)
            .learning_rate(self.learning_rate)
            .initial_embedding(init)
            .exact(|a, b| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum());
        let y = tsne.embedding();
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalDegeneracy(
                "t-SNE produced non-finite coordinates".into(),
            ));
        }
        Ok(y.chunks_exact(2).map(|c| [c[0], c[1]]).collect())
    }
}

/// One row of a coordinates file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordRow {
    pub subject: u32,
    pub session: u32,
    pub modality: Modality,
    pub x: f64,
    pub y: f64,
}

pub fn project_2d(records: &[EmbeddingRecord], reducer: &impl Reducer2d) -> Result<Vec<CoordRow>> {
    if records.len() < 3 {
        return Err(invalid(format!("need at least 3 records, got {}", records.len())));
    }
    let data: Vec<Vec<f32>> = records.iter().map(|r| r.embedding.clone()).collect();
    let xy = reducer.reduce(&data)?;
    Ok(records
        .iter()
        .zip(xy)
        .map(|(r, [x, y])| CoordRow {
            subject: r.subject,
            session: r.session,
            modality: r.modality,
            x,
            y,
        })
        .collect())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => invalid(format!("coordinates file: {other:?}")),
    }
}

/// Reduces `records` to 2D and writes a tab-separated file with a header.
pub fn tsne_export(records: &[EmbeddingRecord], reducer: &impl Reducer2d, out: &Path) -> Result<Vec<CoordRow>> {
    let rows = project_2d(records, reducer)?;
    write_coords(&rows, out)?;
    Ok(rows)
}

pub fn write_coords(rows: &[CoordRow], out: &Path) -> Result<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .from_path(out)
        .map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_coords(path: &Path) -> Result<Vec<CoordRow>> {
    let mut r = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// Mean silhouette coefficient of 2D points under the given cluster labels.
pub fn silhouette(points: &[[f64; 2]], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() || points.len() < 2 {
        return Err(invalid("silhouette needs matching points and labels"));
    }
    let clusters: BTreeSet<usize> = labels.iter().copied().collect();
    if clusters.len() < 2 {
        return Err(invalid("silhouette needs at least 2 clusters"));
    }
    let dist = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let mut total = 0.0;
    for (i, &p) in points.iter().enumerate() {
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for (j, &q) in points.iter().enumerate() {
            if i != j {
                let e = sums.entry(labels[j]).or_default();
                e.0 += dist(p, q);
                e.1 += 1;
            }
        }
        let own = sums.get(&labels[i]).filter(|e| e.1 > 0);
        let Some(&(a_sum, a_n)) = own else {
            continue;
        };
        let a = a_sum / a_n as f64;
        let b = sums
            .iter()
            .filter(|(c, _)| **c != labels[i])
            .map(|(_, &(s, n))| s / n as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        total += if m > 0.0 { (b - a) / m } else { 0.0 };
    }
    Ok(total / points.len() as f64)
}

/// Keeps sessions of `n` subjects drawn without replacement with `seed`.
pub fn sample_subjects(cohort: &Cohort, n: usize, seed: u64) -> Cohort {
    let subjects = cohort.subjects();
    if n >= subjects.len() {
        return cohort.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep: BTreeSet<u32> = subjects.choose_multiple(&mut rng, n).copied().collect();
    cohort.filter(|s| keep.contains(&s.subject))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderConfig;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn rec(subject: u32, session: u32, m: Modality, e: &[f32]) -> EmbeddingRecord {
        EmbeddingRecord {
            subject,
            session,
            modality: m,
            embedding: e.to_vec(),
            source: EmbeddingSource::Validation,
        }
    }

    #[test]
    fn cosine_examples() {
        assert!(cosine_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap().abs() < 1e-12);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 3.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_distance(&[1.0, -2.0], &[-1.0, 2.0]).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(
            cosine_distance(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::NumericalDegeneracy(_))
        ));
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_scale_free(
            a in proptest::collection::vec(-5.0f32..5.0, 4),
            b in proptest::collection::vec(-5.0f32..5.0, 4),
            s in 0.1f32..10.0,
        ) {
            prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
            let d = cosine_distance(&a, &b).unwrap();
            prop_assert!((d - cosine_distance(&b, &a).unwrap()).abs() < 1e-12);
            let scaled: Vec<f32> = a.iter().map(|v| v * s).collect();
            prop_assert!((d - cosine_distance(&scaled, &b).unwrap()).abs() < 1e-6);
        }
    }

    #[test]
    fn hand_built_pairs() {
        let (t1, t2) = (Modality::T1, Modality::T2);
        let recs = vec![
            rec(0, 0, t1, &[1.0, 0.0]),
            rec(0, 0, t2, &[0.0, 1.0]),
            rec(1, 0, t1, &[-1.0, 0.0]),
            rec(1, 0, t2, &[-1.0, 0.0]),
        ];
        let r = alignment_report(&recs, None, 0).unwrap();
        // Pairs: (s0 t1, s0 t2) = 1, (s1 t1, s1 t2) = 0; cross-subject t1 = 2.
        assert_eq!(r.cross_modality.n_pairs, 2);
        assert!((r.cross_modality.mean - 0.5).abs() < 1e-12);
        assert!((r.cross_modality.std - 0.5).abs() < 1e-12);
        assert_eq!(r.cross_subject.n_pairs, 1);
        assert!((r.cross_subject.mean - 2.0).abs() < 1e-12);
        assert_eq!(r.reference_modality, t1);
        assert_eq!(r.cross_modality.to_string(), "0.5000 ± 0.5000");
    }

    #[test]
    fn identical_embeddings_align_perfectly() {
        let recs: Vec<EmbeddingRecord> = (0..3)
            .flat_map(|s| [Modality::T1, Modality::Flair].map(|m| rec(s, 0, m, &[0.3, 0.4, 0.5])))
            .collect();
        let r = alignment_report(&recs, Some(Modality::Flair), 1).unwrap();
        assert!(r.cross_modality.mean.abs() < 1e-12 && r.cross_modality.std.abs() < 1e-12);
        assert_eq!(r.cross_subject.n_pairs, 3);
    }

    #[test]
    fn too_few_records() {
        let one_mod = vec![rec(0, 0, Modality::T1, &[1.0]), rec(1, 0, Modality::T1, &[1.0])];
        assert!(matches!(
            alignment_report(&one_mod, None, 0),
            Err(Error::InvalidArgument(_))
        ));
        let one_subj = vec![rec(0, 0, Modality::T1, &[1.0]), rec(0, 0, Modality::T2, &[1.0])];
        assert!(matches!(
            alignment_report(&one_subj, None, 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn report_ignores_record_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut recs = Vec::new();
        for s in 0..5 {
            for ses in 0..2 {
                for m in [Modality::T1, Modality::T2, Modality::Flair] {
                    let e: Vec<f32> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
                    recs.push(rec(s, ses, m, &e));
                }
            }
        }
        let a = alignment_report(&recs, None, 4).unwrap();
        recs.shuffle(&mut rng);
        let b = alignment_report(&recs, None, 4).unwrap();
        assert_eq!(a.cross_modality.n_pairs, 30);
        assert_eq!(a.cross_subject.n_pairs, 10);
        assert!((a.cross_modality.mean - b.cross_modality.mean).abs() < 1e-12);
        assert!((a.cross_subject.mean - b.cross_subject.mean).abs() < 1e-12);
    }

    #[test]
    fn central_crop_centres_and_pads() {
        let v = Array3::from_shape_fn([6, 4, 3], |(i, j, k)| (i * 100 + j * 10 + k) as f32);
        let c = central_crop(&v, 2);
        assert_eq!(c, vec![210.0, 211.0, 220.0, 221.0, 310.0, 311.0, 320.0, 321.0]);
        let padded = central_crop(&v, 4);
        assert_eq!(padded.len(), 64);
        // Axis 2 has 3 voxels, so offset −1 pads the first column.
        assert_eq!(padded[0], 0.0);
        assert_eq!(padded[1], 100.0);
    }

    #[test]
    fn embeddings_match_direct_pooling() {
        use crate::synth::{generate_cohort, CohortSpec};
        let spec = CohortSpec {
            n_subjects: 2,
            sessions_per_subject: 1,
            modalities: vec![Modality::T1, Modality::T2],
            volume_shape: [36, 36, 36],
            lesion_fraction: 0.0,
            seed: 3,
            n_centers: 1,
        };
        let cohort = generate_cohort(&spec).unwrap().cohort;
        let enc = Encoder::<f32>::new(&EncoderConfig::tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let recs = extract_embeddings(&enc, &cohort, 32, EmbeddingSource::Validation).unwrap();
        assert_eq!(recs.len(), 4);
        let v = cohort.sessions[1].scans[1].data();
        let crop: Vec<f32> = v.slice(ndarray::s![2..34, 2..34, 2..34]).iter().copied().collect();
        let pyr = enc.encode(&crop, [32; 3], None).unwrap();
        let c = pyr.features.last().unwrap();
        let dim = enc.config().bottleneck_dim();
        let rows = c.len() / dim;
        for (d, got) in recs[3].embedding.iter().enumerate() {
            let want: f64 = (0..rows).map(|r| f64::from(c[r * dim + d])).sum::<f64>() / rows as f64;
            assert!((f64::from(*got) - want).abs() < 1e-6);
        }
        let again = extract_embeddings(&enc, &cohort, 32, EmbeddingSource::Validation).unwrap();
        assert_eq!(recs, again);
        let r = alignment_report(&recs, None, 0).unwrap();
        assert!(r.cross_modality.mean > 0.0);
    }

    fn three_clusters() -> (Vec<EmbeddingRecord>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let centres = [[5.0f32, 0.0, 0.0, 0.0], [0.0, 5.0, 0.0, 0.0], [0.0, 0.0, 0.0, 5.0]];
        let mut recs = Vec::new();
        let mut labels = Vec::new();
        for (c, centre) in centres.iter().enumerate() {
            for i in 0..10 {
                let e: Vec<f32> = centre.iter().map(|v| v + rng.random_range(-0.05..0.05)).collect();
                recs.push(rec((c * 10 + i) as u32, 0, Modality::T1, &e));
                labels.push(c);
            }
        }
        (recs, labels)
    }

    #[test]
    fn tsne_separates_clusters_deterministically() {
        let (recs, labels) = three_clusters();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("coords.tsv");
        let t = Tsne {
            epochs: 500,
            ..Tsne::default()
        };
        let rows = tsne_export(&recs, &t, &p).unwrap();
        assert_eq!(rows.len(), recs.len());
        let back = read_coords(&p).unwrap();
        assert_eq!(back, rows);
        let xy: Vec<[f64; 2]> = rows.iter().map(|r| [r.x, r.y]).collect();
        assert!(silhouette(&xy, &labels).unwrap() > 0.5);
        let again = project_2d(&recs, &t).unwrap();
        assert_eq!(again, rows);
        assert!(matches!(project_2d(&recs[..2], &t), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn silhouette_extremes() {
        let pts = [[0.0, 0.0], [0.0, 0.1], [10.0, 0.0], [10.0, 0.1]];
        assert!(silhouette(&pts, &[0, 0, 1, 1]).unwrap() > 0.95);
        assert!(silhouette(&pts, &[0, 1, 0, 1]).unwrap() < 0.0);
    }
}
