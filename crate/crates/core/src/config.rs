//! Experiment configuration: presets, TOML files and dotted-key overrides.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{config_err, Error, Result};
use crate::finetune::FinetuneConfig;
use crate::preproc::PreprocConfig;
use crate::pretrain::PretrainConfig;
use crate::synth::CohortSpec;
use crate::volume::Modality;

pub const RESOLVED_CONFIG_NAME: &str = "resolved_config.toml";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Small enough to run on one CPU core in minutes.
    #[default]
    Desk,
    /// Full-scale hyperparameters; not meant for CI.
    Paper,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        })
    }
}

/// Settings for embedding extraction, alignment and the 2D projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    /// Edge length of the central crop fed to the encoder.
    pub crop: usize,
    pub reference_modality: Modality,
    pub tsne_subjects: usize,
    pub perplexity: f64,
    pub tsne_epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl EvalOptions {
    fn desk() -> Self {
        Self {
            crop: 32,
            reference_modality: Modality::T1,
            tsne_subjects: 30,
            perplexity: 10.0,
            tsne_epochs: 1000,
            learning_rate: 200.0,
            seed: 0,
        }
    }

    fn paper() -> Self {
        Self {
            crop: 96,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 {
            return Err(config_err("crop", "must be positive"));
        }
        if self.tsne_subjects == 0 {
            return Err(config_err("tsne_subjects", "must be positive"));
        }
        if !(self.perplexity > 0.0 && self.perplexity.is_finite()) {
            return Err(config_err("perplexity", "must be positive"));
        }
        if self.tsne_epochs == 0 {
            return Err(config_err("tsne_epochs", "must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(config_err("learning_rate", "must be positive"));
        }
        Ok(())
    }

    pub fn tsne(&self) -> crate::embedeval::Tsne {
        crate::embedeval::Tsne {
            perplexity: self.perplexity,
            epochs: self.tsne_epochs,
            learning_rate: self.learning_rate,
            seed: self.seed,
        }
    }
}

/// Everything a run needs, resolved from a preset, a file and overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    /// Seeds every section that does not set its own.
    pub seed: u64,
    pub output_root: PathBuf,
    pub synth: CohortSpec,
    pub preprocess: PreprocConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalOptions,
}

/// Sections carrying their own `seed` key.
const SEEDED_SECTIONS: [&str; 4] = ["synth", "pretrain", "finetune", "eval"];

impl ExperimentConfig {
    pub fn desk() -> Self {
        Self {
            preset: Preset::Desk,
            seed: 0,
            output_root: PathBuf::from("runs"),
            synth: CohortSpec {
                n_subjects: 32,
                volume_shape: [48; 3],
                lesion_fraction: 0.5,
                ..CohortSpec::default()
            },
            preprocess: PreprocConfig {
                min_extent_mm: 24.0,
                ..PreprocConfig::default()
            },
            pretrain: PretrainConfig::desk(),
            finetune: FinetuneConfig::desk(),
            eval: EvalOptions::desk(),
        }
    }

    pub fn paper() -> Self {
        Self {
            preset: Preset::Paper,
            synth: CohortSpec {
                n_subjects: 32,
                volume_shape: [160; 3],
                lesion_fraction: 0.5,
                ..CohortSpec::default()
            },
            preprocess: PreprocConfig::default(),
            pretrain: PretrainConfig::paper(),
            finetune: FinetuneConfig::paper(),
            eval: EvalOptions::paper(),
            ..Self::desk()
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    /// Resolves `file` (TOML text, may be empty) plus `key=value` overrides
    /// with dotted keys. Overrides win over the file, the file over the
    /// preset it names (desk when absent).
    pub fn resolve(file: &str, overrides: &[(String, String)]) -> Result<Self> {
        let file: Table = toml::from_str(file).map_err(|e| config_err("<file>", e.message().trim()))?;
        let overrides: Vec<(String, Value)> = overrides.iter().map(|(k, v)| (k.clone(), parse_override(v))).collect();

        let preset_value = overrides
            .iter()
            .rev()
            .find(|(k, _)| k == "preset")
            .map(|(_, v)| v.clone())
            .or_else(|| file.get("preset").cloned());
        let preset = match preset_value {
            None => Preset::default(),
            Some(v) => Preset::deserialize(v).map_err(|e| config_err("preset", e.to_string()))?,
        };

        let mut tree = Value::try_from(Self::preset(preset)).expect("presets serialize");
        let mut explicit = BTreeSet::new();
        merge(&mut tree, Value::Table(file), "", &mut explicit)?;
        for (key, value) in overrides {
            set_dotted(&mut tree, &key, value, &mut explicit)?;
        }
        let global = tree.get("seed").cloned().expect("seed key exists");
        for section in SEEDED_SECTIONS {
            if !explicit.contains(&format!("{section}.seed")) {
                tree[section]["seed"] = global.clone();
            }
        }

        let cfg: Self = serde_path_to_error::deserialize(tree).map_err(|e| {
            let key = e.path().to_string();
            config_err(&key, e.into_inner().message().trim())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::resolve(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        fn scoped(section: &str, r: Result<()>) -> Result<()> {
            r.map_err(|e| match e {
                Error::Config { key, message } => config_err(&format!("{section}.{key}"), message),
                Error::InvalidArgument(message) => config_err(section, message),
                other => other,
            })
        }
        scoped("synth", self.synth.validate())?;
        scoped("pretrain", self.pretrain.validate())?;
        scoped("finetune", self.finetune.validate())?;
        scoped("eval", self.eval.validate())?;
        if !(self.preprocess.target_mm > 0.0 && self.preprocess.target_mm.is_finite()) {
            return Err(config_err("preprocess.target_mm", "must be positive"));
        }
        if !(self.preprocess.min_extent_mm >= 0.0 && self.preprocess.min_extent_mm.is_finite()) {
            return Err(config_err("preprocess.min_extent_mm", "must be non-negative"));
        }
        self.pretrain
            .encoder
            .validate_input([self.eval.crop; 3])
            .map_err(|e| config_err("eval.crop", e.to_string()))?;
        if !self.synth.modalities.contains(&self.eval.reference_modality) {
            return Err(config_err("eval.reference_modality", "not among synth.modalities"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the resolved snapshot into `dir`, returning its path.
    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(RESOLVED_CONFIG_NAME);
        std::fs::write(&path, self.to_toml())?;
        Ok(path)
    }
}

/// Reads an override value as TOML, falling back to a bare string so
/// `variant=mcl_mim` works without quotes.
fn parse_override(raw: &str) -> Value {
    match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

/// Overlays `new` onto `base`. Every key must already exist in `base`,
/// since the base is a fully serialized preset.
fn merge(base: &mut Value, new: Value, path: &str, explicit: &mut BTreeSet<String>) -> Result<()> {
    match (base, new) {
        (Value::Table(b), Value::Table(n)) => {
            for (k, v) in n {
                let key = join(path, &k);
                let slot = b.get_mut(&k).ok_or_else(|| config_err(&key, "unknown key"))?;
                merge(slot, v, &key, explicit)?;
            }
            Ok(())
        }
        (Value::Table(_), _) => Err(config_err(path, "expected a table")),
        (slot, v) => {
            check_type(slot, &v, path)?;
            explicit.insert(path.to_string());
            *slot = coerce(slot, v);
            Ok(())
        }
    }
}

fn set_dotted(tree: &mut Value, key: &str, value: Value, explicit: &mut BTreeSet<String>) -> Result<()> {
    let mut parts = key.split('.').rev();
    let mut nested = value;
    let mut leaf = parts.next().unwrap_or_default().to_string();
    for p in parts {
        let mut t = Table::new();
        t.insert(leaf, nested);
        nested = Value::Table(t);
        leaf = p.to_string();
    }
    if leaf.is_empty() {
        return Err(config_err(key, "empty key"));
    }
    let mut t = Table::new();
    t.insert(leaf, nested);
    merge(tree, Value::Table(t), "", explicit)
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

fn check_type(old: &Value, new: &Value, key: &str) -> Result<()> {
    let ok = matches!(
        (old, new),
        (Value::Float(_), Value::Integer(_) | Value::Float(_))
            | (Value::Integer(_), Value::Integer(_))
            | (Value::String(_), Value::String(_))
            | (Value::Boolean(_), Value::Boolean(_))
            | (Value::Array(_), Value::Array(_))
    );
    if ok {
        Ok(())
    } else {
        Err(config_err(
            key,
            format!("expected {}, found {}", type_name(old), type_name(new)),
        ))
    }
}

/// Integers written for float keys (`lr = 1`) stay floats in the tree.
fn coerce(old: &Value, new: Value) -> Value {
    match (old, new) {
        (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
        (_, v) => v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finetune::InitFrom;
    use crate::pretrain::Variant;

    fn kv(k: &str, v: &str) -> (String, String) {
        (k.to_string(), v.to_string())
    }

    fn config_key(e: Error) -> String {
        match e {
            Error::Config { key, .. } => key,
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn empty_file_is_desk_preset() {
        assert_eq!(ExperimentConfig::resolve("", &[]).unwrap(), ExperimentConfig::desk());
    }

    #[test]
    fn flag_overrides_file() {
        let file = "[pretrain]\nvariant = \"cl\"\n";
        let from_file = ExperimentConfig::resolve(file, &[]).unwrap();
        assert_eq!(from_file.pretrain.variant, Variant::Cl);
        let cfg = ExperimentConfig::resolve(file, &[kv("pretrain.variant", "mcl_mim")]).unwrap();
        assert_eq!(cfg.pretrain.variant, Variant::MclMim);
    }

    #[test]
    fn paper_preset_values() {
        let cfg = ExperimentConfig::resolve("preset = \"paper\"", &[]).unwrap();
        assert_eq!(cfg.preset, Preset::Paper);
        let p = &cfg.pretrain;
        assert_eq!(p.loss.temperature, 0.2);
        assert_eq!(p.queue_capacity, 16_384);
        assert_eq!(p.total_steps, 200_000);
        assert_eq!(p.lr, 1e-4);
        assert_eq!(p.weight_decay, 0.01);
        assert_eq!(p.batch_size, 16);
        assert_eq!(p.mask_ratio_range, (0.5, 0.75));
        assert_eq!(cfg.finetune.freeze_fraction, 0.3);
        assert_eq!(cfg.finetune.total_steps, 5_000);
        assert_eq!(cfg.preprocess.min_extent_mm, 120.0);
        let via_flag = ExperimentConfig::resolve("", &[kv("preset", "paper")]).unwrap();
        assert_eq!(via_flag, cfg);
    }

    #[test]
    fn unknown_keys_are_named() {
        let e = ExperimentConfig::resolve("[pretrain]\nlearning_rate = 0.1\n", &[]).unwrap_err();
        assert_eq!(config_key(e), "pretrain.learning_rate");
        let e = ExperimentConfig::resolve("", &[kv("finetune.encoder.depth", "3")]).unwrap_err();
        assert_eq!(config_key(e), "finetune.encoder.depth");
        let e = ExperimentConfig::resolve("colour = 1", &[]).unwrap_err();
        assert_eq!(config_key(e), "colour");
    }

    #[test]
    fn type_mismatches_are_named() {
        let e = ExperimentConfig::resolve("[pretrain]\nbatch_size = \"eight\"\n", &[]).unwrap_err();
        assert_eq!(config_key(e), "pretrain.batch_size");
        let e = ExperimentConfig::resolve("", &[kv("pretrain.variant", "moco")]).unwrap_err();
        assert_eq!(config_key(e), "pretrain.variant");
        let e = ExperimentConfig::resolve("pretrain = 3", &[]).unwrap_err();
        assert_eq!(config_key(e), "pretrain");
    }

    #[test]
    fn constraint_violations_are_named() {
        let e = ExperimentConfig::resolve("", &[kv("pretrain.lr", "-1")]).unwrap_err();
        assert_eq!(config_key(e), "pretrain.lr");
        let e = ExperimentConfig::resolve("", &[kv("pretrain.mask_ratio_range", "[0.8, 0.5]")]).unwrap_err();
        assert!(config_key(e).starts_with("pretrain.mask_ratio"));
        let e = ExperimentConfig::resolve("", &[kv("eval.crop", "40")]).unwrap_err();
        assert_eq!(config_key(e), "eval.crop");
    }

    #[test]
    fn integer_for_float_key_is_accepted() {
        let cfg = ExperimentConfig::resolve("[finetune]\nlr = 1\n", &[]).unwrap();
        assert_eq!(cfg.finetune.lr, 1.0);
    }

    #[test]
    fn global_seed_propagates_unless_overridden() {
        let cfg = ExperimentConfig::resolve("seed = 7\n[finetune]\nseed = 3\n", &[]).unwrap();
        assert_eq!(cfg.synth.seed, 7);
        assert_eq!(cfg.pretrain.seed, 7);
        assert_eq!(cfg.eval.seed, 7);
        assert_eq!(cfg.finetune.seed, 3);
        let cfg = ExperimentConfig::resolve("", &[kv("seed", "11")]).unwrap();
        assert!([cfg.synth.seed, cfg.pretrain.seed, cfg.finetune.seed, cfg.eval.seed]
            .iter()
            .all(|&s| s == 11));
    }

    #[test]
    fn bare_string_overrides() {
        let cfg = ExperimentConfig::resolve("", &[kv("finetune.checkpoint", "runs/final.safetensors")]).unwrap();
        assert_eq!(
            cfg.finetune.checkpoint,
            InitFrom::Checkpoint("runs/final.safetensors".into())
        );
        let cfg = ExperimentConfig::resolve(
            "",
            &[
                kv("synth.modalities", "[\"t1\", \"flair\"]"),
                kv("eval.reference_modality", "flair"),
            ],
        )
        .unwrap();
        assert_eq!(cfg.synth.modalities, vec![Modality::T1, Modality::Flair]);
        assert_eq!(cfg.eval.reference_modality, Modality::Flair);
        let e = ExperimentConfig::resolve("", &[kv("synth.modalities", "[\"t1\", \"pet\"]")]).unwrap_err();
        assert!(config_key(e).starts_with("synth.modalities"));
    }

    #[test]
    fn snapshot_resolves_to_itself() {
        for preset in [Preset::Desk, Preset::Paper] {
            let mut cfg = ExperimentConfig::preset(preset);
            cfg.seed = 42;
            cfg.pretrain.seed = 5;
            let back = ExperimentConfig::resolve(&cfg.to_toml(), &[]).unwrap();
            assert_eq!(back, cfg);
        }
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::desk();
        let path = cfg.write_snapshot(dir.path()).unwrap();
        assert_eq!(ExperimentConfig::from_file(&path, &[]).unwrap(), cfg);
    }

    #[test]
    fn shipped_config_files_match_the_presets() {
        let desk = include_str!("../../../configs/desk.toml");
        let paper = include_str!("../../../configs/paper.toml");
        assert_eq!(ExperimentConfig::resolve(desk, &[]).unwrap(), ExperimentConfig::desk());
        assert_eq!(
            ExperimentConfig::resolve(paper, &[]).unwrap(),
            ExperimentConfig::paper()
        );
    }
}
