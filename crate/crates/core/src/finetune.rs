//! Lesion segmentation fine-tuning, sliding-window inference and Dice scoring.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::cohort::Cohort;
use crate::error::{config_err, invalid, Error, Result};
use crate::model::{Encoder, EncoderConfig, FpnDecoder};
use crate::nn::tensor::impl_params;
use crate::nn::{AdamW, AdamWConfig, Parameterized};
use crate::pretrain::load_pretrained_encoder;
use crate::volume::Modality;

pub const FINETUNE_FORMAT: &str = "modalign-finetune/1";
pub const MODEL_NAME: &str = "model.safetensors";
pub const STEP_LOG_NAME: &str = "finetune_steps.jsonl";
pub const EVAL_LOG_NAME: &str = "finetune_evals.jsonl";

/// One labelled scan.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub image: Array3<f32>,
    pub label: Array3<bool>,
    pub center: u32,
    pub subject: u32,
    pub session: u32,
}

impl SegSample {
    pub fn new(image: Array3<f32>, label: Array3<bool>, center: u32, subject: u32, session: u32) -> Result<Self> {
        if image.shape() != label.shape() {
            return Err(invalid(format!(
                "image shape {:?} differs from label shape {:?}",
                image.shape(),
                label.shape()
            )));
        }
        Ok(Self {
            image,
            label,
            center,
            subject,
            session,
        })
    }
}

/// Collects every session that has a lesion mask and a scan of `modality`.
pub fn seg_samples(cohort: &Cohort, modality: Modality) -> Result<Vec<SegSample>> {
    let out: Vec<SegSample> = cohort
        .sessions
        .iter()
        .filter_map(|s| {
            let label = s.lesion.as_ref()?;
            let scan = s.scan(modality)?;
            Some(SegSample::new(
                scan.data().clone(),
                label.clone(),
                s.center,
                s.subject,
                s.session,
            ))
        })
        .collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(invalid(format!("no labelled sessions with modality {modality}")));
    }
    Ok(out)
}

/// Where the encoder weights come from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum InitFrom {
    Scratch,
    Checkpoint(PathBuf),
}

impl fmt::Display for InitFrom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitFrom::Scratch => f.write_str("scratch"),
            InitFrom::Checkpoint(p) => write!(f, "{}", p.display()),
        }
    }
}

impl From<&str> for InitFrom {
    fn from(s: &str) -> Self {
        if s == "scratch" {
            InitFrom::Scratch
        } else {
            InitFrom::Checkpoint(PathBuf::from(s))
        }
    }
}

impl TryFrom<String> for InitFrom {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        if s.is_empty() {
            return Err(invalid("checkpoint must be a path or 'scratch'"));
        }
        Ok(InitFrom::from(s.as_str()))
    }
}

impl From<InitFrom> for String {
    fn from(i: InitFrom) -> String {
        i.to_string()
    }
}

/// How overlapping window predictions are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Blend {
    #[default]
    Uniform,
    Gaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub checkpoint: InitFrom,
    pub modality: Modality,
    pub total_steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub freeze_fraction: f64,
    pub data_fraction: f64,
    pub window: usize,
    pub window_overlap: f64,
    pub blend: Blend,
    /// Validation Dice is computed every this many steps and after the last.
    pub eval_every: u64,
    pub seed: u64,
    /// Architecture for scratch runs; checkpoints bring their own.
    pub encoder: EncoderConfig,
}

impl FinetuneConfig {
    pub fn desk() -> Self {
        Self {
            checkpoint: InitFrom::Scratch,
            modality: Modality::T1,
            total_steps: 500,
            batch_size: 4,
            lr: 1e-3,
            weight_decay: 0.01,
            freeze_fraction: 0.3,
            data_fraction: 1.0,
            window: 32,
            window_overlap: 0.5,
            blend: Blend::Uniform,
            eval_every: 100,
            seed: 0,
            encoder: EncoderConfig::tiny(),
        }
    }

    pub fn paper() -> Self {
        Self {
            total_steps: 5_000,
            batch_size: 2,
            lr: 1e-4,
            window: 96,
            eval_every: 500,
            encoder: EncoderConfig::standard(),
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(config_err("total_steps", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch_size", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err("lr", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(config_err("weight_decay", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.freeze_fraction) {
            return Err(config_err("freeze_fraction", "must lie in [0, 1]"));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(config_err("data_fraction", "must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.window_overlap) {
            return Err(config_err("window_overlap", "must lie in [0, 1)"));
        }
        if self.eval_every == 0 {
            return Err(config_err("eval_every", "must be positive"));
        }
        self.encoder.validate()?;
        self.encoder
            .validate_input([self.window; 3])
            .map_err(|e| config_err("window", e.to_string()))
    }

    /// Steps during which a pre-trained encoder stays fixed.
    pub fn freeze_steps(&self) -> u64 {
        match self.checkpoint {
            InitFrom::Scratch => 0,
            InitFrom::Checkpoint(_) => (self.freeze_fraction * self.total_steps as f64).ceil() as u64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SegModel<T> {
    pub encoder: Encoder<T>,
    pub decoder: FpnDecoder<T>,
}

impl_params!(SegModel { encoder, decoder });

impl SegModel<f32> {
    /// Per-voxel lesion logits for an input whose shape the encoder accepts.
    pub fn logits(&self, x: &[f32], dims: [usize; 3]) -> Result<Vec<f32>> {
        let pyr = self.encoder.encode(x, dims, None)?;
        self.decoder.decode(&pyr)
    }

    pub fn to_archive(&self, cfg: &FinetuneConfig) -> Result<Archive> {
        let mut a = Archive::new(FINETUNE_FORMAT);
        a.set_meta("config", cfg)?;
        a.set_meta("encoder", self.encoder.config())?;
        a.put_params("model", self);
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<(Self, FinetuneConfig)> {
        a.expect_format(FINETUNE_FORMAT)?;
        let cfg: FinetuneConfig = a.meta("config")?;
        let enc_cfg: EncoderConfig = a.meta("encoder")?;
        enc_cfg.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = SegModel {
            encoder: Encoder::new(&enc_cfg, &mut rng)?,
            decoder: FpnDecoder::new(&enc_cfg, 1, &mut rng),
        };
        a.load_params("model", &mut model)?;
        Ok((model, cfg))
    }
}

/// Soft Dice plus binary cross-entropy on one item's logits. Returns the
/// loss and its gradient w.r.t. the logits.
pub fn dice_bce_loss(logits: &[f32], labels: &[bool]) -> Result<(f64, Vec<f64>)> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(invalid(format!("{} logits for {} labels", logits.len(), labels.len())));
    }
    const SMOOTH: f64 = 1.0;
    let n = logits.len() as f64;
    let mut bce = 0.0;
    let mut inter = 0.0;
    let mut sum = 0.0;
    let probs: Vec<f64> = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| {
            let z = f64::from(z);
            let y = if y { 1.0 } else { 0.0 };
            bce += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            let p = 1.0 / (1.0 + (-z).exp());
            inter += p * y;
            sum += p + y;
            p
        })
        .collect();
    let denom = sum + SMOOTH;
    let ratio = (2.0 * inter + SMOOTH) / denom;
    let loss = bce / n + 1.0 - ratio;
    let grad = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let y = if y { 1.0 } else { 0.0 };
            let d_ratio_dp = (2.0 * y * denom - (2.0 * inter + SMOOTH)) / (denom * denom);
            (p - y) / n - d_ratio_dp * p * (1.0 - p)
        })
        .collect();
    Ok((loss, grad))
}

/// `2|A∩B| / (|A|+|B|)`, with two empty masks scoring 1.
pub fn dice(pred: &Array3<bool>, gt: &Array3<bool>) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(invalid(format!(
            "mask shapes {:?} and {:?} differ",
            pred.shape(),
            gt.shape()
        )));
    }
    let (mut both, mut total) = (0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        both += usize::from(a && b);
        total += usize::from(a) + usize::from(b);
    }
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * both as f64 / total as f64
    })
}

fn axis_starts(dim: usize, window: usize, overlap: f64) -> Vec<usize> {
    if dim <= window {
        return vec![0];
    }
    let stride = ((window as f64 * (1.0 - overlap)).round() as usize).max(1);
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + window < dim).collect();
    starts.push(dim - window);
    starts
}

/// Window origins tiling a volume of `shape` (after padding to at least
/// `window` per axis).
pub fn window_origins(shape: [usize; 3], window: usize, overlap: f64) -> Vec<[usize; 3]> {
    let per_axis = shape.map(|d| axis_starts(d, window, overlap));
    let mut out = Vec::new();
    for &a in &per_axis[0] {
        for &b in &per_axis[1] {
            for &c in &per_axis[2] {
                out.push([a, b, c]);
            }
        }
    }
    out
}

fn blend_weights(window: usize, blend: Blend) -> Vec<f64> {
    match blend {
        Blend::Uniform => vec![1.0; window * window * window],
        Blend::Gaussian => {
            let sigma = 0.125 * window as f64;
            let c = (window as f64 - 1.0) / 2.0;
            let g: Vec<f64> = (0..window)
                .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
                .collect();
            let mut w = Vec::with_capacity(window.pow(3));
            for a in &g {
                for b in &g {
                    for c in &g {
                        w.push(a * b * c);
                    }
                }
            }
            w
        }
    }
}

/// Runs `predict` on each window at `origins` of the zero-padded volume and
/// averages overlapping logits in `f64`.
pub fn blend_windows<F>(
    volume: &Array3<f32>,
    window: usize,
    origins: &[[usize; 3]],
    blend: Blend,
    mut predict: F,
) -> Result<Array3<f32>>
where
    F: FnMut(&[f32], [usize; 3]) -> Result<Vec<f32>>,
{
    let shape: [usize; 3] = [volume.shape()[0], volume.shape()[1], volume.shape()[2]];
    let padded = shape.map(|d| d.max(window));
    let mut sum = Array3::<f64>::zeros(padded);
    let mut weight = Array3::<f64>::zeros(padded);
    let w = blend_weights(window, blend);
    let mut crop = vec![0f32; window.pow(3)];
    for o in origins {
        if o.iter().zip(&padded).any(|(&s, &d)| s + window > d) {
            return Err(invalid(format!("window at {o:?} leaves the padded volume {padded:?}")));
        }
        let mut idx = 0;
        for i in 0..window {
            for j in 0..window {
                for k in 0..window {
                    let p = [o[0] + i, o[1] + j, o[2] + k];
                    crop[idx] = volume.get(p).copied().unwrap_or(0.0);
                    idx += 1;
                }
            }
        }
        let logits = predict(&crop, [window; 3])?;
        if logits.len() != crop.len() {
            return Err(invalid(format!(
                "predictor returned {} values for {} voxels",
                logits.len(),
                crop.len()
            )));
        }
        let mut idx = 0;
        for i in 0..window {
            for j in 0..window {
                for k in 0..window {
                    let p = [o[0] + i, o[1] + j, o[2] + k];
                    sum[p] += w[idx] * f64::from(logits[idx]);
                    weight[p] += w[idx];
                    idx += 1;
                }
            }
        }
    }
    let mut out = Array3::<f32>::zeros(shape);
    for ((i, j, k), v) in out.indexed_iter_mut() {
        let wt = weight[[i, j, k]];
        if wt <= 0.0 {
            return Err(invalid(format!("voxel {:?} is not covered by any window", [i, j, k])));
        }
        *v = (sum[[i, j, k]] / wt) as f32;
    }
    Ok(out)
}

/// Sliding-window logits over a whole volume.
pub fn sliding_window_logits(
    model: &SegModel<f32>,
    volume: &Array3<f32>,
    window: usize,
    overlap: f64,
    blend: Blend,
) -> Result<Array3<f32>> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(invalid(format!("overlap {overlap} must lie in [0, 1)")));
    }
    let shape = [volume.shape()[0], volume.shape()[1], volume.shape()[2]];
    let padded = shape.map(|d| d.max(window));
    let origins = window_origins(padded, window, overlap);
    blend_windows(volume, window, &origins, blend, |x, dims| model.logits(x, dims))
}

/// Binary lesion mask: positive where the averaged logit is above zero
/// (sigmoid above one half).
pub fn sliding_window_infer(
    model: &SegModel<f32>,
    volume: &Array3<f32>,
    window: usize,
    overlap: f64,
    blend: Blend,
) -> Result<Array3<bool>> {
    Ok(sliding_window_logits(model, volume, window, overlap, blend)?.mapv(|z| z > 0.0))
}

/// Indices of the first `round(fraction·n)` entries of a seeded permutation,
/// in ascending order. Smaller fractions give subsets of larger ones.
pub fn fraction_subset(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(invalid(format!("data fraction {fraction} must lie in (0, 1]")));
    }
    if n == 0 {
        return Err(invalid("no training samples"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, 12));
    let k = ((fraction * n as f64).round() as usize).clamp(1, n);
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Moves every sample from `held_out` centers into the test partition.
pub fn split_by_center(samples: &[SegSample], held_out: &[u32]) -> Result<(Vec<SegSample>, Vec<SegSample>)> {
    let known: BTreeSet<u32> = samples.iter().map(|s| s.center).collect();
    if let Some(c) = held_out.iter().find(|c| !known.contains(c)) {
        return Err(invalid(format!(
            "center {c} does not occur in the data (centers: {known:?})"
        )));
    }
    let (test, train): (Vec<SegSample>, Vec<SegSample>) =
        samples.iter().cloned().partition(|s| held_out.contains(&s.center));
    if train.is_empty() {
        return Err(invalid("holding out these centers leaves no training data"));
    }
    Ok((train, test))
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Random `window`³ crop, zero-padded where the volume is smaller.
fn random_crop<R: Rng + ?Sized>(s: &SegSample, window: usize, rng: &mut R) -> (Vec<f32>, Vec<bool>) {
    let sh = s.image.shape();
    let origin: Vec<usize> = sh
        .iter()
        .map(|&d| {
            if d > window {
                rng.random_range(0..=d - window)
            } else {
                0
            }
        })
        .collect();
    let mut x = Vec::with_capacity(window.pow(3));
    let mut y = Vec::with_capacity(window.pow(3));
    for i in 0..window {
        for j in 0..window {
            for k in 0..window {
                let p = [origin[0] + i, origin[1] + j, origin[2] + k];
                x.push(s.image.get(p).copied().unwrap_or(0.0));
                y.push(s.label.get(p).copied().unwrap_or(false));
            }
        }
    }
    (x, y)
}

/// One line of the fine-tuning step log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Number of completed optimizer steps.
    pub step: u64,
    pub loss: f64,
    pub encoder_frozen: bool,
    pub encoder_checksum: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub mean_dice: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneState {
    pub cfg: FinetuneConfig,
    pub model: SegModel<f32>,
    pub step: u64,
    encoder_opt: AdamW,
    decoder_opt: AdamW,
    crop_rng: ChaCha8Rng,
}

/// Loads the encoder named by `cfg.checkpoint`, checking it fits the config.
pub fn initial_encoder(cfg: &FinetuneConfig) -> Result<Option<Encoder<f32>>> {
    let path = match &cfg.checkpoint {
        InitFrom::Scratch => return Ok(None),
        InitFrom::Checkpoint(p) => p,
    };
    if !path.exists() {
        return Err(Error::Checkpoint(format!("{} does not exist", path.display())));
    }
    let enc = load_pretrained_encoder(&Archive::load(path)?)?;
    enc.config().validate_input([cfg.window; 3]).map_err(|e| {
        Error::Checkpoint(format!(
            "window {} does not fit the checkpoint encoder: {e}",
            cfg.window
        ))
    })?;
    Ok(Some(enc))
}

impl FinetuneState {
    /// Fresh decoder on top of `encoder`, or a random encoder when `None`.
    pub fn new(cfg: FinetuneConfig, encoder: Option<Encoder<f32>>) -> Result<Self> {
        cfg.validate()?;
        if encoder.is_some() != matches!(cfg.checkpoint, InitFrom::Checkpoint(_)) {
            return Err(invalid(
                "an encoder must be supplied exactly when fine-tuning from a checkpoint",
            ));
        }
        let mut init = stream(cfg.seed, 10);
        let encoder = match encoder {
            Some(e) => e,
            None => Encoder::new(&cfg.encoder, &mut init)?,
        };
        let decoder = FpnDecoder::new(encoder.config(), 1, &mut init);
        let opt = AdamWConfig::new(cfg.lr, cfg.weight_decay);
        Ok(Self {
            model: SegModel { encoder, decoder },
            step: 0,
            encoder_opt: AdamW::new(opt),
            decoder_opt: AdamW::new(opt),
            crop_rng: stream(cfg.seed, 11),
            cfg,
        })
    }

    /// Builds the state, loading a checkpoint encoder if configured.
    pub fn from_config(cfg: FinetuneConfig) -> Result<Self> {
        let enc = initial_encoder(&cfg)?;
        Self::new(cfg, enc)
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.total_steps
    }

    pub fn encoder_frozen(&self) -> bool {
        self.step < self.cfg.freeze_steps()
    }

    pub fn train_step(&mut self, train: &[SegSample]) -> Result<StepRecord> {
        if train.is_empty() {
            return Err(invalid("no training samples"));
        }
        let win = self.cfg.window;
        let dims = [win; 3];
        let b = self.cfg.batch_size;
        let frozen = self.encoder_frozen();
        let model = &self.model;
        let mut grad = model.zeros_like();
        let mut total = 0.0;
        for _ in 0..b {
            let s = &train[self.crop_rng.random_range(0..train.len())];
            let (x, y) = random_crop(s, win, &mut self.crop_rng);
            let (pyr, cache) = model.encoder.forward(&x, dims, None)?;
            let (logits, dcache) = model.decoder.forward(&pyr)?;
            let (loss, g) = dice_bce_loss(&logits, &y)?;
            total += loss;
            let d_logits: Vec<f32> = g.iter().map(|v| (v / b as f64) as f32).collect();
            let d_feats = model.decoder.backward(&dcache, &d_logits, &mut grad.decoder);
            if !frozen {
                model.encoder.backward(&cache, &d_feats, None, &mut grad.encoder, None);
            }
        }
        let loss = total / b as f64;
        let norm = grad.sq_norm();
        if !loss.is_finite() || !norm.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                detail: format!("segmentation loss {loss}, squared gradient norm {norm}"),
            });
        }
        self.decoder_opt
            .step(self.model.decoder.params_mut(), grad.decoder.params())?;
        if !frozen {
            self.encoder_opt
                .step(self.model.encoder.params_mut(), grad.encoder.params())?;
        }
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            loss,
            encoder_frozen: frozen,
            encoder_checksum: self.model.encoder.checksum(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub subject: u32,
    pub session: u32,
    pub center: u32,
    pub dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub scores: Vec<SampleScore>,
    pub mean_dice: f64,
    pub std_dice: f64,
}

pub fn evaluate(
    model: &SegModel<f32>,
    samples: &[SegSample],
    window: usize,
    overlap: f64,
    blend: Blend,
) -> Result<EvalSummary> {
    if samples.is_empty() {
        return Err(invalid("no samples to evaluate"));
    }
    let scores = samples
        .iter()
        .map(|s| {
            let pred = sliding_window_infer(model, &s.image, window, overlap, blend)?;
            Ok(SampleScore {
                subject: s.subject,
                session: s.session,
                center: s.center,
                dice: dice(&pred, &s.label)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = scores.len() as f64;
    let mean = scores.iter().map(|s| s.dice).sum::<f64>() / n;
    let var = scores.iter().map(|s| (s.dice - mean).powi(2)).sum::<f64>() / n;
    Ok(EvalSummary {
        scores,
        mean_dice: mean,
        std_dice: var.sqrt(),
    })
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub model: SegModel<f32>,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

/// Fine-tunes on the configured fraction of `train`, scoring `val`
/// periodically. With `out`, logs and the final model are written there.
pub fn finetune(
    cfg: &FinetuneConfig,
    train: &[SegSample],
    val: &[SegSample],
    out: Option<&Path>,
) -> Result<FinetuneOutcome> {
    let mut state = FinetuneState::from_config(cfg.clone())?;
    let subset: Vec<SegSample> = fraction_subset(train.len(), cfg.data_fraction, cfg.seed)?
        .into_iter()
        .map(|i| train[i].clone())
        .collect();
    let mut logs = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some((
                BufWriter::new(File::create(dir.join(STEP_LOG_NAME))?),
                BufWriter::new(File::create(dir.join(EVAL_LOG_NAME))?),
            ))
        }
        None => None,
    };
    let mut steps = Vec::with_capacity(cfg.total_steps as usize);
    let mut evals = Vec::new();
    while !state.is_done() {
        let rec = state.train_step(&subset)?;
        if let Some((w, _)) = logs.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        }
        steps.push(rec);
        if !val.is_empty() && (state.step % cfg.eval_every == 0 || state.is_done()) {
            let summary = evaluate(&state.model, val, cfg.window, cfg.window_overlap, cfg.blend)?;
            let ev = EvalRecord {
                step: state.step,
                mean_dice: summary.mean_dice,
            };
            if let Some((_, w)) = logs.as_mut() {
                writeln!(w, "{}", serde_json::to_string(&ev)?)?;
            }
            evals.push(ev);
        }
    }
    if let (Some(dir), Some((mut a, mut b))) = (out, logs) {
        a.flush()?;
        b.flush()?;
        state.model.to_archive(cfg)?.save(&dir.join(MODEL_NAME))?;
        std::fs::write(dir.join("finetune_config.json"), serde_json::to_string_pretty(cfg)?)?;
    }
    Ok(FinetuneOutcome {
        model: state.model,
        steps,
        evals,
    })
}

/// One row of the ablation: a label and where its encoder comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub label: String,
    pub checkpoint: InitFrom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    /// Mean test Dice per fraction, in column order.
    pub dice: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub fractions: Vec<f64>,
    pub rows: Vec<AblationRow>,
    /// Entries left out, with the reason.
    pub skipped: Vec<(String, String)>,
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let method_w = self.rows.iter().map(|r| r.label.len()).chain([6]).max().unwrap_or(6);
        let heads: Vec<String> = self
            .fractions
            .iter()
            .map(|p| format!("{}%", (p * 100.0).round()))
            .collect();
        let col_w: Vec<usize> = heads.iter().map(|h| h.len().max(6)).collect();
        write!(f, "| {:<method_w$} |", "Method")?;
        for (h, w) in heads.iter().zip(&col_w) {
            write!(f, " {h:<w$} |")?;
        }
        writeln!(f)?;
        write!(f, "|{}|", "-".repeat(method_w + 2))?;
        for w in &col_w {
            write!(f, "{}|", "-".repeat(w + 2))?;
        }
        writeln!(f)?;
        for r in &self.rows {
            write!(f, "| {:<method_w$} |", r.label)?;
            for (d, w) in r.dice.iter().zip(&col_w) {
                write!(f, " {:<w$} |", format!("{d:.4}"))?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Fine-tunes every entry at every data fraction and scores `test`.
/// Entries whose checkpoint file is missing are skipped.
pub fn run_ablation(
    template: &FinetuneConfig,
    fractions: &[f64],
    entries: &[AblationEntry],
    train: &[SegSample],
    test: &[SegSample],
) -> Result<AblationTable> {
    if fractions.is_empty() || entries.is_empty() {
        return Err(invalid("ablation needs at least one fraction and one entry"));
    }
    let mut table = AblationTable {
        fractions: fractions.to_vec(),
        rows: Vec::new(),
        skipped: Vec::new(),
    };
    for e in entries {
        if let InitFrom::Checkpoint(p) = &e.checkpoint {
            if !p.exists() {
                table
                    .skipped
                    .push((e.label.clone(), format!("checkpoint {} not found", p.display())));
                continue;
            }
        }
        let mut dice = Vec::with_capacity(fractions.len());
        for &fr in fractions {
            let cfg = FinetuneConfig {
                checkpoint: e.checkpoint.clone(),
                data_fraction: fr,
                ..template.clone()
            };
            let outcome = finetune(&cfg, train, &[], None)?;
            dice.push(evaluate(&outcome.model, test, cfg.window, cfg.window_overlap, cfg.blend)?.mean_dice);
        }
        table.rows.push(AblationRow {
            label: e.label.clone(),
            dice,
        });
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::Rng;

    fn mask_from(shape: [usize; 3], bits: &[bool]) -> Array3<bool> {
        Array3::from_shape_vec(shape, bits.to_vec()).unwrap()
    }

    #[test]
    fn dice_examples() {
        let s = [2, 2, 2];
        let a = mask_from(s, &[true, true, true, true, false, false, false, false]);
        let b = mask_from(s, &[true, true, false, false, true, true, false, false]);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let c = a.mapv(|v| !v);
        assert_eq!(dice(&a, &c).unwrap(), 0.0);
        let empty = Array3::from_elem(s, false);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        assert!(dice(&a, &Array3::from_elem([2, 2, 1], false)).is_err());
    }

    proptest! {
        #[test]
        fn dice_symmetric_and_reflexive(bits in proptest::collection::vec(any::<(bool, bool)>(), 27)) {
            let a = mask_from([3, 3, 3], &bits.iter().map(|p| p.0).collect::<Vec<_>>());
            let b = mask_from([3, 3, 3], &bits.iter().map(|p| p.1).collect::<Vec<_>>());
            prop_assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
            if a.iter().any(|&v| v) {
                prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
            }
        }

        #[test]
        fn fraction_subsets_nest(n in 1usize..300, seed in any::<u64>()) {
            let sets: Vec<BTreeSet<usize>> = [0.25, 0.5, 0.75, 1.0]
                .iter()
                .map(|&f| fraction_subset(n, f, seed).unwrap().into_iter().collect())
                .collect();
            for w in sets.windows(2) {
                prop_assert!(w[0].is_subset(&w[1]));
            }
            prop_assert_eq!(sets[3].len(), n);
        }
    }

    #[test]
    fn quarter_of_four_hundred() {
        let a = fraction_subset(400, 0.25, 7).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(a, fraction_subset(400, 0.25, 7).unwrap());
        assert_ne!(a, fraction_subset(400, 0.25, 8).unwrap());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z: Vec<f32> = (0..20).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y: Vec<bool> = (0..20).map(|_| rng.random_bool(0.3)).collect();
        let (_, g) = dice_bce_loss(&z, &y).unwrap();
        for i in 0..z.len() {
            let h = 1e-2f32;
            let mut zp = z.clone();
            zp[i] += h;
            let mut zm = z.clone();
            zm[i] -= h;
            let fd = (dice_bce_loss(&zp, &y).unwrap().0 - dice_bce_loss(&zm, &y).unwrap().0) / (2.0 * f64::from(h));
            assert!((fd - g[i]).abs() < 1e-4, "{i}: {fd} vs {}", g[i]);
        }
    }

    fn sample(center: u32, subject: u32) -> SegSample {
        SegSample::new(
            Array3::zeros([2, 2, 2]),
            Array3::from_elem([2, 2, 2], false),
            center,
            subject,
            0,
        )
        .unwrap()
    }

    #[test]
    fn center_split() {
        let data: Vec<SegSample> = (0..9).map(|i| sample(i % 3, i)).collect();
        let (train, test) = split_by_center(&data, &[1]).unwrap();
        assert!(test.iter().all(|s| s.center == 1));
        assert_eq!(test.len(), 3);
        assert_eq!(train.len(), 6);
        assert!(matches!(
            split_by_center(&data, &[0, 1, 2]),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(split_by_center(&data, &[5]), Err(Error::InvalidArgument(_))));
    }

    proptest! {
        #[test]
        fn center_split_is_a_partition(centers in proptest::collection::vec(0u32..5, 2..40), pick in 0u32..5) {
            let data: Vec<SegSample> = centers.iter().enumerate().map(|(i, &c)| sample(c, i as u32)).collect();
            let known: BTreeSet<u32> = centers.iter().copied().collect();
            match split_by_center(&data, &[pick]) {
                Ok((train, test)) => {
                    let tr: BTreeSet<u32> = train.iter().map(|s| s.center).collect();
                    let te: BTreeSet<u32> = test.iter().map(|s| s.center).collect();
                    prop_assert!(tr.is_disjoint(&te));
                    let mut ids: Vec<u32> = train.iter().chain(&test).map(|s| s.subject).collect();
                    ids.sort_unstable();
                    prop_assert_eq!(ids, (0..data.len() as u32).collect::<Vec<_>>());
                }
                Err(_) => prop_assert!(!known.contains(&pick) || known.len() == 1),
            }
        }
    }

    /// Window predictor whose output depends on both content and position.
    fn toy_predict(x: &[f32], dims: [usize; 3]) -> Result<Vec<f32>> {
        let mean = x.iter().sum::<f32>() / x.len() as f32;
        Ok(x.iter()
            .enumerate()
            .map(|(i, v)| v * 0.5 + mean + (i % dims[2]) as f32 * 0.01)
            .collect())
    }

    #[test]
    fn axis_tiling() {
        assert_eq!(axis_starts(128, 96, 0.5), vec![0, 32]);
        assert_eq!(axis_starts(96, 96, 0.0), vec![0]);
        assert_eq!(axis_starts(20, 32, 0.5), vec![0]);
        assert_eq!(axis_starts(100, 32, 0.5), vec![0, 16, 32, 48, 64, 68]);
    }

    #[test]
    fn overlap_is_plain_average_and_order_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = Array3::from_shape_fn([20, 18, 16], |_| rng.random_range(-1.0f32..1.0));
        let win = 8;
        let origins = window_origins([20, 18, 16], win, 0.5);
        let got = blend_windows(&v, win, &origins, Blend::Uniform, toy_predict).unwrap();
        let mut sum = Array3::<f64>::zeros([20, 18, 16]);
        let mut cnt = Array3::<f64>::zeros([20, 18, 16]);
        for o in &origins {
            let crop: Vec<f32> = v
                .slice(ndarray::s![o[0]..o[0] + win, o[1]..o[1] + win, o[2]..o[2] + win])
                .iter()
                .copied()
                .collect();
            let out = toy_predict(&crop, [win; 3]).unwrap();
            for (idx, val) in out.iter().enumerate() {
                let p = [o[0] + idx / 64, o[1] + (idx / 8) % 8, o[2] + idx % 8];
                sum[p] += f64::from(*val);
                cnt[p] += 1.0;
            }
        }
        for (p, g) in got.indexed_iter() {
            let want = sum[p] / cnt[p];
            assert!((f64::from(*g) - want).abs() < 1e-5);
        }
        let mut shuffled = origins.clone();
        shuffled.shuffle(&mut rng);
        let again = blend_windows(&v, win, &shuffled, Blend::Uniform, toy_predict).unwrap();
        for (a, b) in got.iter().zip(&again) {
            assert!((a - b).abs() < 1e-6);
        }
        let gauss = blend_windows(&v, win, &origins, Blend::Gaussian, |x, _| Ok(vec![0.25; x.len()])).unwrap();
        assert!(gauss.iter().all(|&z| (z - 0.25).abs() < 1e-6));
    }

    #[test]
    fn constant_model_gives_constant_mask() {
        let v = Array3::from_elem([20, 12, 9], 1.0f32);
        for (c, want) in [(0.7f32, true), (-0.2, false)] {
            let origins = window_origins([20, 12, 9].map(|d: usize| d.max(8)), 8, 0.5);
            let z = blend_windows(&v, 8, &origins, Blend::Uniform, |x, _| Ok(vec![c; x.len()])).unwrap();
            assert_eq!(z.shape(), &[20, 12, 9]);
            assert!(z.iter().all(|&l| (l > 0.0) == want));
        }
    }

    #[test]
    fn single_window_is_bitwise_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = EncoderConfig::tiny();
        let model = SegModel {
            encoder: Encoder::<f32>::new(&cfg, &mut rng).unwrap(),
            decoder: FpnDecoder::new(&cfg, 1, &mut rng),
        };
        let v = Array3::from_shape_fn([32, 32, 32], |_| rng.random_range(-1.0f32..1.0));
        let direct = model.logits(v.as_slice().unwrap(), [32; 3]).unwrap();
        let sw = sliding_window_logits(&model, &v, 32, 0.0, Blend::Uniform).unwrap();
        assert!(direct.iter().zip(sw.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let small = v.slice(ndarray::s![..20, ..32, ..17]).to_owned();
        assert_eq!(
            sliding_window_infer(&model, &small, 32, 0.5, Blend::Uniform)
                .unwrap()
                .shape(),
            &[20, 32, 17]
        );
    }

    #[test]
    fn init_from_strings() {
        assert_eq!(InitFrom::from("scratch"), InitFrom::Scratch);
        assert_eq!(
            InitFrom::from("a/b.safetensors"),
            InitFrom::Checkpoint("a/b.safetensors".into())
        );
        let j = serde_json::to_string(&InitFrom::Scratch).unwrap();
        assert_eq!(j, "\"scratch\"");
    }

    #[test]
    fn config_checks() {
        FinetuneConfig::desk().validate().unwrap();
        FinetuneConfig::paper().validate().unwrap();
        let mut c = FinetuneConfig::desk();
        c.data_fraction = 0.0;
        assert!(matches!(c.validate(), Err(Error::Config { key, .. }) if key == "data_fraction"));
        c = FinetuneConfig::desk();
        c.window = 20;
        assert!(matches!(c.validate(), Err(Error::Config { key, .. }) if key == "window"));
        assert_eq!(FinetuneConfig::desk().freeze_steps(), 0);
        c = FinetuneConfig::desk();
        c.checkpoint = InitFrom::from("x");
        c.total_steps = 10;
        assert_eq!(c.freeze_steps(), 3);
        c.total_steps = 11;
        assert_eq!(c.freeze_steps(), 4);
    }

    fn blob_samples(n: usize, seed: u64) -> Vec<SegSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let c = [
                    rng.random_range(8..24),
                    rng.random_range(8..24),
                    rng.random_range(8..24),
                ];
                let label = Array3::from_shape_fn([32, 32, 32], |(a, b, d)| {
                    let r2 = (a as i64 - c[0]).pow(2) + (b as i64 - c[1]).pow(2) + (d as i64 - c[2]).pow(2);
                    r2 <= 25
                });
                let image = label.mapv(|l| if l { 2.0 } else { 0.0 });
                SegSample::new(image, label, (i % 2) as u32, i as u32, 0).unwrap()
            })
            .collect()
    }

    #[test]
    fn freeze_holds_encoder_then_releases() {
        let dir = tempfile::tempdir().unwrap();
        let mut pcfg = crate::pretrain::PretrainConfig::desk();
        pcfg.total_steps = 1;
        let pre = crate::pretrain::PretrainState::new(pcfg).unwrap();
        let ckpt = dir.path().join("p.safetensors");
        pre.to_archive().unwrap().save(&ckpt).unwrap();

        let data = blob_samples(3, 1);
        let mut cfg = FinetuneConfig::desk();
        cfg.total_steps = 10;
        cfg.batch_size = 1;
        cfg.checkpoint = InitFrom::Checkpoint(ckpt);
        let mut st = FinetuneState::from_config(cfg.clone()).unwrap();
        let c0 = st.model.encoder.checksum();
        let d0 = st.model.decoder.checksum();
        let recs: Vec<StepRecord> = (0..10).map(|_| st.train_step(&data).unwrap()).collect();
        for r in &recs[..3] {
            assert_eq!(r.encoder_checksum, c0);
            assert!(r.encoder_frozen);
        }
        assert_ne!(st.model.decoder.checksum(), d0);
        assert_ne!(recs[3].encoder_checksum, c0);

        cfg.checkpoint = InitFrom::Scratch;
        let mut st = FinetuneState::from_config(cfg).unwrap();
        let c0 = st.model.encoder.checksum();
        assert_ne!(st.train_step(&data).unwrap().encoder_checksum, c0);
    }

    #[test]
    fn missing_checkpoint_is_rejected_and_skipped() {
        let mut cfg = FinetuneConfig::desk();
        cfg.checkpoint = InitFrom::from("/nonexistent/x.safetensors");
        assert!(matches!(
            FinetuneState::from_config(cfg.clone()),
            Err(Error::Checkpoint(_))
        ));
        let data = blob_samples(2, 2);
        cfg.total_steps = 1;
        cfg.batch_size = 1;
        let entries = vec![
            AblationEntry {
                label: "From Scratch".into(),
                checkpoint: InitFrom::Scratch,
            },
            AblationEntry {
                label: "CL".into(),
                checkpoint: cfg.checkpoint.clone(),
            },
        ];
        let t = run_ablation(&cfg, &[1.0], &entries, &data, &data).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.skipped.len(), 1);
        assert_eq!(t.rows[0].dice.len(), 1);
        let text = t.to_string();
        assert!(text.starts_with("| Method       | 100%"), "{text}");
        assert!(text.lines().nth(2).unwrap().starts_with("| From Scratch | 0."));
        let again = run_ablation(&cfg, &[1.0], &entries, &data, &data).unwrap();
        assert_eq!(t, again);
    }

    #[test]
    fn learns_separable_blobs() {
        let train = blob_samples(6, 3);
        let val = blob_samples(2, 4);
        let mut cfg = FinetuneConfig::desk();
        cfg.total_steps = 60;
        cfg.eval_every = 30;
        cfg.batch_size = 2;
        let dir = tempfile::tempdir().unwrap();
        let out = finetune(&cfg, &train, &val, Some(dir.path())).unwrap();
        assert_eq!(out.evals.len(), 2);
        assert!(out.steps.last().unwrap().loss < out.steps[0].loss);
        let (model, back) = SegModel::from_archive(&Archive::load(&dir.path().join(MODEL_NAME)).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(model.checksum(), out.model.checksum());
    }
}
