//! Cohort manifests (one JSON record per scan) and in-memory sessions.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::io;
use crate::volume::{Modality, Volume};

pub const MANIFEST_NAME: &str = "cohort.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Finetune,
    Validation,
}

/// One scan of one modality in one session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanRecord {
    pub subject: u32,
    pub session: u32,
    pub modality: Modality,
    /// Relative to the manifest directory.
    pub path: PathBuf,
    pub shape: [usize; 3],
    pub split: Split,
    #[serde(default)]
    pub center: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lesion_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
}

/// Scan records of a cohort plus the directory they are relative to.
#[derive(Clone, Debug, PartialEq)]
pub struct CohortIndex {
    pub root: PathBuf,
    pub records: Vec<ScanRecord>,
}

impl CohortIndex {
    pub fn new(root: impl Into<PathBuf>, records: Vec<ScanRecord>) -> Result<Self> {
        let index = Self {
            root: root.into(),
            records,
        };
        index.validate()?;
        Ok(index)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in &self.records {
            if !seen.insert((r.subject, r.session, r.modality)) {
                return Err(invalid(format!(
                    "duplicate scan for subject {} session {} modality {}",
                    r.subject, r.session, r.modality
                )));
            }
        }
        Ok(())
    }

    /// Reads `cohort.jsonl` from `dir` (or the file itself when given).
    pub fn load(path: &Path) -> Result<Self> {
        let (root, file) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST_NAME))
        } else {
            (
                path.parent().unwrap_or(Path::new(".")).to_path_buf(),
                path.to_path_buf(),
            )
        };
        let reader = BufReader::new(File::open(&file)?);
        let mut records = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ScanRecord =
                serde_json::from_str(&line).map_err(|e| invalid(format!("{}:{}: {e}", file.display(), n + 1)))?;
            records.push(rec);
        }
        Self::new(root, records)
    }

    pub fn save(&self) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.root)?;
        let file = self.root.join(MANIFEST_NAME);
        let mut w = BufWriter::new(File::create(&file)?);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(file)
    }

    pub fn modalities(&self) -> Vec<Modality> {
        let set: BTreeSet<Modality> = self.records.iter().map(|r| r.modality).collect();
        set.into_iter().collect()
    }

    pub fn subjects(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.records.iter().map(|r| r.subject).collect();
        set.into_iter().collect()
    }

    /// Loads every scan of the selected splits into memory, grouped by session.
    pub fn load_sessions(&self, splits: &[Split]) -> Result<Cohort> {
        let mut grouped: BTreeMap<(u32, u32), Vec<&ScanRecord>> = BTreeMap::new();
        for r in self.records.iter().filter(|r| splits.contains(&r.split)) {
            grouped.entry((r.subject, r.session)).or_default().push(r);
        }
        let mut sessions = Vec::with_capacity(grouped.len());
        for ((subject, session), mut recs) in grouped {
            recs.sort_by_key(|r| r.modality);
            let first = recs[0];
            let mut scans = Vec::with_capacity(recs.len());
            for r in &recs {
                let mut v = io::read_volume(&self.root.join(&r.path), r.modality)?;
                if let Some(m) = &r.mask_path {
                    v = v.with_mask(io::read_mask(&self.root.join(m))?)?;
                }
                scans.push(v);
            }
            let lesion = match recs.iter().find_map(|r| r.lesion_path.as_ref()) {
                Some(p) => Some(io::read_mask(&self.root.join(p))?),
                None => None,
            };
            sessions.push(Session {
                subject,
                session,
                split: first.split,
                center: first.center,
                scans,
                lesion,
            });
        }
        Cohort::new(sessions)
    }
}

/// All co-registered scans of one acquisition session.
#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub subject: u32,
    pub session: u32,
    pub split: Split,
    pub center: u32,
    /// Sorted by modality; all share one voxel grid.
    pub scans: Vec<Volume>,
    pub lesion: Option<Array3<bool>>,
}

impl Session {
    pub fn shape(&self) -> [usize; 3] {
        self.scans[0].shape()
    }

    pub fn scan(&self, m: Modality) -> Option<&Volume> {
        self.scans.iter().find(|v| v.modality() == m)
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.scans.iter().map(|v| v.modality()).collect()
    }
}

/// Sessions held in memory, in (subject, session) order.
#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub sessions: Vec<Session>,
}

impl Cohort {
    pub fn new(sessions: Vec<Session>) -> Result<Self> {
        for s in &sessions {
            let shape = s
                .scans
                .first()
                .map(|v| v.shape())
                .ok_or_else(|| invalid(format!("session {}/{} has no scans", s.subject, s.session)))?;
            if s.scans.iter().any(|v| v.shape() != shape) {
                return Err(invalid(format!(
                    "scans of subject {} session {} are not on one grid",
                    s.subject, s.session
                )));
            }
            if let Some(l) = &s.lesion {
                if l.shape() != shape {
                    return Err(invalid("lesion mask does not match scan grid"));
                }
            }
        }
        Ok(Self { sessions })
    }

    pub fn subjects(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.sessions.iter().map(|s| s.subject).collect();
        set.into_iter().collect()
    }

    pub fn modalities(&self) -> Vec<Modality> {
        let set: BTreeSet<Modality> = self.sessions.iter().flat_map(|s| s.modalities()).collect();
        set.into_iter().collect()
    }

    pub fn filter(&self, keep: impl Fn(&Session) -> bool) -> Cohort {
        Cohort {
            sessions: self.sessions.iter().filter(|s| keep(s)).cloned().collect(),
        }
    }

    /// Writes scans, attached brain masks and lesion masks as NIfTI plus the
    /// manifest under `dir`.
    pub fn write(&self, dir: &Path) -> Result<CohortIndex> {
        let mut records = Vec::new();
        for s in &self.sessions {
            let rel = Path::new(&format!("sub-{:03}", s.subject)).join(format!("ses-{}", s.session));
            std::fs::create_dir_all(dir.join(&rel))?;
            let lesion_path = match &s.lesion {
                Some(l) => {
                    let p = rel.join("lesion.nii.gz");
                    io::write_mask(&dir.join(&p), l, &s.scans[0])?;
                    Some(p)
                }
                None => None,
            };
            for v in &s.scans {
                let p = rel.join(format!("{}.nii.gz", v.modality()));
                io::write_volume(&dir.join(&p), v)?;
                let mask_path = match v.brain_mask() {
                    Some(m) => {
                        let mp = rel.join(format!("{}_mask.nii.gz", v.modality()));
                        io::write_mask(&dir.join(&mp), m, v)?;
                        Some(mp)
                    }
                    None => None,
                };
                records.push(ScanRecord {
                    subject: s.subject,
                    session: s.session,
                    modality: v.modality(),
                    path: p,
                    shape: v.shape(),
                    split: s.split,
                    center: s.center,
                    lesion_path: lesion_path.clone(),
                    mask_path,
                });
            }
        }
        let index = CohortIndex::new(dir, records)?;
        index.save()?;
        Ok(index)
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }
}

/// Fails unless the cohort offers what contrastive pre-training needs.
pub fn check_pretrain_cohort(c: &Cohort) -> Result<()> {
    if c.subjects().len() < 2 {
        return Err(Error::Sampling("pre-training needs at least two subjects".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(subject: u32, session: u32, m: Modality) -> ScanRecord {
        ScanRecord {
            subject,
            session,
            modality: m,
            path: format!("s{subject}_{session}_{m}.mvol").into(),
            shape: [2, 2, 2],
            split: Split::Pretrain,
            center: 0,
            lesion_path: None,
            mask_path: None,
        }
    }

    #[test]
    fn duplicate_records_are_rejected() {
        let r = vec![rec(0, 0, Modality::T1), rec(0, 0, Modality::T1)];
        assert!(CohortIndex::new("x", r).is_err());
    }

    #[test]
    fn manifest_round_trip_and_loading() {
        let dir = tempfile::tempdir().unwrap();
        let mut recs = Vec::new();
        for (s, m) in [(0, Modality::T1), (0, Modality::T2), (1, Modality::T1)] {
            let r = rec(s, 0, m);
            let v = Volume::from_flat([2, 2, 2], vec![s as f32 + 1.0; 8], m).unwrap();
            io::write_raw(&dir.path().join(&r.path), &v).unwrap();
            recs.push(r);
        }
        let idx = CohortIndex::new(dir.path(), recs).unwrap();
        idx.save().unwrap();
        let back = CohortIndex::load(dir.path()).unwrap();
        assert_eq!(back, idx);
        let cohort = back.load_sessions(&[Split::Pretrain]).unwrap();
        assert_eq!(cohort.len(), 2);
        assert_eq!(cohort.sessions[0].modalities(), vec![Modality::T1, Modality::T2]);
        assert!(back.load_sessions(&[Split::Finetune]).unwrap().is_empty());
    }
}
