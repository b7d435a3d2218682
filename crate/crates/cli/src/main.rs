mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use modalign::checkpoint::Archive;
use modalign::cohort::{Cohort, CohortIndex, Split};
use modalign::config::ExperimentConfig;
use modalign::embedeval::{self, EmbeddingSource};
use modalign::finetune::{self, AblationEntry, InitFrom, SegModel, SegSample};
use modalign::pretrain::{self, PretrainState, Variant};
use modalign::{preproc, synth, Modality};

const ALL_SPLITS: [Split; 3] = [Split::Pretrain, Split::Finetune, Split::Validation];

#[derive(Parser, Debug)]
#[command(
    name = "modalign",
    version,
    about = "Modality-invariant pre-training for multi-modal brain MRI"
)]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// TOML experiment config; the desk preset when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set pretrain.lr=5e-4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Config preset (desk or paper).
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Global seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-modal cohort as NIfTI files.
    Synth(SynthArgs),
    /// Reorient, resample, crop, filter and normalize a cohort.
    Preprocess(PreprocessArgs),
    /// Pre-train an encoder with one of the four objectives.
    Pretrain(PretrainArgs),
    /// Fine-tune a segmentation model on lesion-labelled sessions.
    Finetune(FinetuneArgs),
    /// Score a fine-tuned model on held-out sessions.
    Evaluate(EvaluateArgs),
    /// Cross-modality and cross-subject embedding distances.
    EvalAlign(EvalAlignArgs),
    /// 2D projection of embeddings, written as TSV.
    Tsne(TsneArgs),
    /// Render a coordinates file as a PNG scatter.
    PlotTsne(PlotArgs),
    /// Fine-tune every method at every data fraction and tabulate test Dice.
    Ablate(AblateArgs),
    /// Print the fully resolved configuration as TOML.
    Config,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Number of subjects.
    #[arg(long)]
    subjects: Option<usize>,
    /// Sessions per subject.
    #[arg(long)]
    sessions: Option<usize>,
    /// A count or a comma list such as `t1,t2,flair`.
    #[arg(long)]
    modalities: Option<String>,
    /// Volume shape `X,Y,Z`.
    #[arg(long)]
    shape: Option<String>,
    /// Probability that a subject carries lesions.
    #[arg(long)]
    lesions: Option<f64>,
    /// Number of acquisition centers.
    #[arg(long)]
    centers: Option<usize>,
    /// Output directory for NIfTI files and the cohort index.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    /// Raw cohort directory (with its index).
    #[arg(long = "in", value_name = "DIR")]
    input: PathBuf,
    /// Output directory for the preprocessed cohort.
    #[arg(long)]
    out: PathBuf,
    /// Reject scans smaller than this along any axis.
    #[arg(long)]
    min_extent_mm: Option<f64>,
    /// Isotropic voxel size after resampling.
    #[arg(long)]
    target_mm: Option<f64>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// cl, mcl, cl_mim or mcl_mim.
    #[arg(long)]
    variant: Option<String>,
    /// Preprocessed cohort directory.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for metrics and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Total optimizer steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long, value_name = "CHECKPOINT")]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    /// Pre-training checkpoint, or `scratch`.
    #[arg(long)]
    checkpoint: Option<String>,
    /// Preprocessed cohort directory.
    #[arg(long)]
    data: PathBuf,
    /// Input modality for segmentation.
    #[arg(long)]
    modality: Option<String>,
    /// Share of the training sessions to use.
    #[arg(long)]
    fraction: Option<f64>,
    /// Total optimizer steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Hold these centers out for periodic validation, e.g. `center:0`.
    #[arg(long)]
    split: Option<String>,
    /// Run directory for logs and the model.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Fine-tuned model archive.
    #[arg(long)]
    model: PathBuf,
    /// Preprocessed cohort directory.
    #[arg(long)]
    data: PathBuf,
    /// Test centers, e.g. `center:0,2`; all labelled sessions when omitted.
    #[arg(long)]
    split: Option<String>,
    /// JSON results file; defaults to `evaluation.json` next to the model.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalAlignArgs {
    /// Pre-training checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Preprocessed cohort directory.
    #[arg(long)]
    data: PathBuf,
    /// Text report; a JSON twin is written alongside.
    #[arg(long)]
    out: PathBuf,
    /// Modality used for cross-subject distances.
    #[arg(long)]
    reference: Option<String>,
    /// Tag recorded with each embedding (validation or downstream-test).
    #[arg(long, default_value = "validation")]
    source: String,
}

#[derive(Args, Debug)]
struct TsneArgs {
    /// Pre-training checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Preprocessed cohort directory.
    #[arg(long)]
    data: PathBuf,
    /// Subjects to sample.
    #[arg(long)]
    n: Option<usize>,
    /// t-SNE perplexity.
    #[arg(long)]
    perplexity: Option<f64>,
    /// Output TSV of coordinates.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// Coordinates file from `tsne`.
    coords: PathBuf,
    /// PNG to write.
    #[arg(long)]
    out: PathBuf,
    /// Image edge length in pixels.
    #[arg(long, default_value_t = 800)]
    size: u32,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Preprocessed cohort directory.
    #[arg(long)]
    data: PathBuf,
    /// Test centers, e.g. `center:0`.
    #[arg(long)]
    split: String,
    /// Directory holding `cl/`, `mcl/`, `cl_mim/`, `mcl_mim/` pre-training runs.
    #[arg(long)]
    pretrain_root: Option<PathBuf>,
    /// Extra row `LABEL=CHECKPOINT` (or `LABEL=scratch`). Repeatable.
    #[arg(long = "entry", value_name = "LABEL=PATH")]
    entries: Vec<String>,
    /// Leave out the from-scratch baseline row.
    #[arg(long)]
    no_scratch: bool,
    /// Training-data fractions, one column each.
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 0.75, 0.5, 0.25])]
    fractions: Vec<f64>,
    /// Fine-tuning steps per cell.
    #[arg(long)]
    steps: Option<u64>,
    /// Directory for the table (text and JSON).
    #[arg(long)]
    out: PathBuf,
}

/// Collects `key=value` overrides: `--set` first, then dedicated flags.
struct Overrides(Vec<(String, String)>);

impl Overrides {
    fn new(args: &ConfigArgs) -> Result<Self> {
        let mut v = Vec::new();
        for s in &args.overrides {
            let (k, val) = s
                .split_once('=')
                .ok_or_else(|| usage("--set", format!("expected KEY=VALUE, got `{s}`")))?;
            v.push((k.trim().to_string(), val.trim().to_string()));
        }
        let mut o = Self(v);
        o.raw("preset", args.preset.as_ref().map(|p| quote(p)));
        o.raw("seed", args.seed.map(|s| s.to_string()));
        Ok(o)
    }

    fn raw(&mut self, key: &str, value: Option<String>) {
        if let Some(v) = value {
            self.0.push((key.to_string(), v));
        }
    }

    fn num(&mut self, key: &str, value: Option<impl ToString>) {
        self.raw(key, value.map(|v| v.to_string()));
    }

    fn float(&mut self, key: &str, value: Option<f64>) {
        self.raw(key, value.map(|v| format!("{v:?}")));
    }

    fn string(&mut self, key: &str, value: Option<&str>) {
        self.raw(key, value.map(quote));
    }
}

/// Bad flag values exit like bad config keys.
fn usage(flag: &str, message: impl Into<String>) -> modalign::Error {
    modalign::Error::Config {
        key: flag.to_string(),
        message: message.into(),
    }
}

fn quote(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn resolve(args: &ConfigArgs, o: Overrides) -> Result<ExperimentConfig> {
    let cfg = match &args.config {
        Some(path) => ExperimentConfig::from_file(path, &o.0)?,
        None => ExperimentConfig::resolve("", &o.0)?,
    };
    Ok(cfg)
}

/// `center:0,2` → `[0, 2]`.
fn parse_centers(s: &str) -> Result<Vec<u32>> {
    let ids = s
        .strip_prefix("center:")
        .ok_or_else(|| usage("--split", format!("expected `center:0,2`, got `{s}`")))?;
    Ok(ids
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<u32>()
                .map_err(|_| usage("--split", format!("bad center id `{t}`")))
        })
        .collect::<Result<_, _>>()?)
}

/// A count (`3` → t1, t2, flair) or a comma list.
fn parse_modalities(s: &str) -> Result<Vec<Modality>> {
    let list: Vec<Modality> = match s.parse::<usize>() {
        Ok(n) => (0..n).map(Modality::nth).collect(),
        Err(_) => s
            .split(',')
            .map(|m| {
                m.trim()
                    .parse()
                    .map_err(|e: modalign::Error| usage("--modalities", e.to_string()))
            })
            .collect::<Result<_, _>>()?,
    };
    if list.is_empty() {
        return Err(usage("--modalities", "at least one modality is required").into());
    }
    Ok(list)
}

fn shape_literal(s: &str) -> Result<String> {
    let dims: Vec<usize> = s
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| usage("--shape", format!("bad size `{t}`")))
        })
        .collect::<Result<_, _>>()?;
    if dims.len() != 3 {
        return Err(usage("--shape", format!("expected three comma-separated sizes, got `{s}`")).into());
    }
    Ok(format!("[{}, {}, {}]", dims[0], dims[1], dims[2]))
}

fn load_cohort(dir: &Path, splits: &[Split]) -> Result<Cohort> {
    let index = CohortIndex::load(dir).with_context(|| format!("reading cohort in {}", dir.display()))?;
    Ok(index.load_sessions(splits)?)
}

fn labelled_samples(dir: &Path, modality: Modality) -> Result<Vec<SegSample>> {
    Ok(finetune::seg_samples(&load_cohort(dir, &ALL_SPLITS)?, modality)?)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut o = Overrides::new(&cli.config)?;
    match cli.command {
        Command::Config => {
            print!("{}", resolve(&cli.config, o)?.to_toml());
        }
        Command::Synth(a) => {
            o.num("synth.n_subjects", a.subjects);
            o.num("synth.sessions_per_subject", a.sessions);
            o.raw("synth.volume_shape", a.shape.as_deref().map(shape_literal).transpose()?);
            o.float("synth.lesion_fraction", a.lesions);
            o.num("synth.n_centers", a.centers);
            if let Some(list) = a.modalities.as_deref().map(parse_modalities).transpose()? {
                let quoted: Vec<String> = list.iter().map(|m| quote(&m.to_string())).collect();
                o.raw("synth.modalities", Some(format!("[{}]", quoted.join(", "))));
                o.string(
                    "eval.reference_modality",
                    list.first().map(|m| m.to_string()).as_deref(),
                );
            }
            let cfg = resolve(&cli.config, o)?;
            cfg.write_snapshot(&a.out)?;
            let c = synth::generate_cohort(&cfg.synth)?;
            let index = synth::write_cohort(&c, &a.out)?;
            info!(
                "wrote {} scans of {} sessions to {}",
                index.records.len(),
                c.cohort.len(),
                a.out.display()
            );
        }
        Command::Preprocess(a) => {
            o.float("preprocess.min_extent_mm", a.min_extent_mm);
            o.float("preprocess.target_mm", a.target_mm);
            let cfg = resolve(&cli.config, o)?;
            cfg.write_snapshot(&a.out)?;
            let index =
                CohortIndex::load(&a.input).with_context(|| format!("reading cohort in {}", a.input.display()))?;
            let (_, report) = preproc::preprocess_cohort(&index, &cfg.preprocess, &a.out)?;
            let kept = report.iter().filter(|r| r.kept).count();
            for r in report.iter().filter(|r| !r.kept) {
                warn!(
                    "rejected subject {} session {} {}: {}",
                    r.subject,
                    r.session,
                    r.modality,
                    r.reason.map(|x| x.to_string()).unwrap_or_default()
                );
            }
            info!("kept {kept} of {} scans", report.len());
        }
        Command::Pretrain(a) => {
            o.string("pretrain.variant", a.variant.as_deref());
            o.num("pretrain.total_steps", a.steps);
            let cfg = resolve(&cli.config, o)?;
            cfg.write_snapshot(&a.out)?;
            let cohort = load_cohort(&a.data, &[Split::Pretrain])?;
            let state = match &a.resume {
                Some(p) => {
                    let s = PretrainState::from_archive(&Archive::load(p)?)?;
                    if s.cfg != cfg.pretrain {
                        warn!("resuming with the configuration stored in {}", p.display());
                    }
                    s
                }
                None => PretrainState::new(cfg.pretrain.clone())?,
            };
            info!(
                "pre-training {} on {} sessions for {} steps",
                state.cfg.variant,
                cohort.len(),
                state.cfg.total_steps
            );
            pretrain::run_pretraining(state, &cohort, &a.out)?;
            info!("final checkpoint {}", a.out.join(pretrain::FINAL_CHECKPOINT).display());
        }
        Command::Finetune(a) => {
            o.string("finetune.checkpoint", a.checkpoint.as_deref());
            o.string("finetune.modality", a.modality.as_deref());
            o.float("finetune.data_fraction", a.fraction);
            o.num("finetune.total_steps", a.steps);
            let cfg = resolve(&cli.config, o)?;
            let held_out = a.split.as_deref().map(parse_centers).transpose()?;
            cfg.write_snapshot(&a.out)?;
            let samples = labelled_samples(&a.data, cfg.finetune.modality)?;
            let (train, val) = match &held_out {
                Some(ids) => finetune::split_by_center(&samples, ids)?,
                None => (samples, Vec::new()),
            };
            info!(
                "fine-tuning from {} on {} sessions ({} held out)",
                cfg.finetune.checkpoint,
                train.len(),
                val.len()
            );
            let outcome = finetune::finetune(&cfg.finetune, &train, &val, Some(&a.out))?;
            if let (Some(first), Some(last)) = (outcome.evals.first(), outcome.evals.last()) {
                info!(
                    "validation dice {:.4} at step {} -> {:.4} at step {}",
                    first.mean_dice, first.step, last.mean_dice, last.step
                );
            }
        }
        Command::Evaluate(a) => {
            let held_out = a.split.as_deref().map(parse_centers).transpose()?;
            let (model, ft) = SegModel::from_archive(&Archive::load(&a.model)?)?;
            let samples = labelled_samples(&a.data, ft.modality)?;
            let test = match &held_out {
                Some(ids) => finetune::split_by_center(&samples, ids)?.1,
                None => samples,
            };
            let summary = finetune::evaluate(&model, &test, ft.window, ft.window_overlap, ft.blend)?;
            let mut text = format!("{:>8} {:>8} {:>7} {:>8}\n", "subject", "session", "center", "dice");
            for s in &summary.scores {
                text += &format!("{:>8} {:>8} {:>7} {:>8.4}\n", s.subject, s.session, s.center, s.dice);
            }
            text += &format!(
                "mean dice {:.4} ± {:.4} over {} sessions\n",
                summary.mean_dice,
                summary.std_dice,
                summary.scores.len()
            );
            print!("{text}");
            let out = a.out.unwrap_or_else(|| a.model.with_file_name("evaluation.json"));
            write_json(&out, &summary)?;
            std::fs::write(out.with_extension("txt"), text)?;
        }
        Command::EvalAlign(a) => {
            o.string("eval.reference_modality", a.reference.as_deref());
            let cfg = resolve(&cli.config, o)?;
            let source: EmbeddingSource =
                serde_json::from_value(serde_json::Value::String(a.source.clone())).map_err(|_| {
                    usage(
                        "--source",
                        format!("expected validation or downstream-test, got `{}`", a.source),
                    )
                })?;
            let encoder = pretrain::load_pretrained_encoder(&Archive::load(&a.checkpoint)?)?;
            let cohort = load_cohort(&a.data, &ALL_SPLITS)?;
            let records = embedeval::extract_embeddings(&encoder, &cohort, cfg.eval.crop, source)?;
            let report = embedeval::alignment_report(&records, Some(cfg.eval.reference_modality), cfg.eval.seed)?;
            print!("{report}");
            if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(&a.out, report.to_string())?;
            write_json(&a.out.with_extension("json"), &report)?;
        }
        Command::Tsne(a) => {
            o.num("eval.tsne_subjects", a.n);
            o.float("eval.perplexity", a.perplexity);
            let cfg = resolve(&cli.config, o)?;
            let encoder = pretrain::load_pretrained_encoder(&Archive::load(&a.checkpoint)?)?;
            let cohort = embedeval::sample_subjects(
                &load_cohort(&a.data, &ALL_SPLITS)?,
                cfg.eval.tsne_subjects,
                cfg.eval.seed,
            );
            let records = embedeval::extract_embeddings(&encoder, &cohort, cfg.eval.crop, EmbeddingSource::Validation)?;
            let rows = embedeval::tsne_export(&records, &cfg.eval.tsne(), &a.out)?;
            info!("wrote {} points to {}", rows.len(), a.out.display());
        }
        Command::PlotTsne(a) => {
            let rows = embedeval::read_coords(&a.coords)?;
            plot::scatter(&rows, a.size)?
                .save(&a.out)
                .with_context(|| format!("writing {}", a.out.display()))?;
            info!("wrote {}", a.out.display());
        }
        Command::Ablate(a) => {
            o.num("finetune.total_steps", a.steps);
            let cfg = resolve(&cli.config, o)?;
            let held_out = parse_centers(&a.split)?;
            cfg.write_snapshot(&a.out)?;
            let mut entries = Vec::new();
            if !a.no_scratch {
                entries.push(AblationEntry {
                    label: "From Scratch".into(),
                    checkpoint: InitFrom::Scratch,
                });
            }
            if let Some(root) = &a.pretrain_root {
                for v in Variant::ALL {
                    entries.push(AblationEntry {
                        label: v.label().into(),
                        checkpoint: InitFrom::Checkpoint(root.join(v.to_string()).join(pretrain::FINAL_CHECKPOINT)),
                    });
                }
            }
            for e in &a.entries {
                let (label, path) = e
                    .split_once('=')
                    .ok_or_else(|| usage("--entry", format!("expected LABEL=PATH, got `{e}`")))?;
                entries.push(AblationEntry {
                    label: label.to_string(),
                    checkpoint: InitFrom::from(path),
                });
            }
            let samples = labelled_samples(&a.data, cfg.finetune.modality)?;
            let (train, test) = finetune::split_by_center(&samples, &held_out)?;
            let table = finetune::run_ablation(&cfg.finetune, &a.fractions, &entries, &train, &test)?;
            for (label, why) in &table.skipped {
                warn!("skipped {label}: {why}");
            }
            print!("{table}");
            std::fs::write(a.out.join("ablation.txt"), table.to_string())?;
            write_json(&a.out.join("ablation.json"), &table)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.chain().any(|c| {
                matches!(
                    c.downcast_ref::<modalign::Error>(),
                    Some(modalign::Error::Config { .. })
                )
            });
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn center_lists() {
        assert_eq!(parse_centers("center:0,2").unwrap(), vec![0, 2]);
        assert!(parse_centers("0,2").is_err());
        assert!(parse_centers("center:a").is_err());
    }

    #[test]
    fn modality_lists() {
        assert_eq!(parse_modalities("2").unwrap(), vec![Modality::T1, Modality::T2]);
        assert_eq!(
            parse_modalities("t1, flair").unwrap(),
            vec![Modality::T1, Modality::Flair]
        );
        assert!(parse_modalities("t1,pet").is_err());
        assert!(parse_modalities("0").is_err());
    }

    #[test]
    fn shapes() {
        assert_eq!(shape_literal("48,48,40").unwrap(), "[48, 48, 40]");
        assert!(shape_literal("48,48").is_err());
    }
}
