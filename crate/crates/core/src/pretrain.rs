//! Momentum-contrast pre-training with optional masked reconstruction.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::cohort::{check_pretrain_cohort, Cohort};
use crate::error::{config_err, invalid, Error, Result};
use crate::model::{
    make_bottleneck_mask, momentum_update, Encoder, EncoderConfig, FpnDecoder, MomentumSchedule, ProjectionHead,
    TokenMask, TokenMasks,
};
use crate::nn::tensor::impl_params;
use crate::nn::{add_scaled, AdamW, AdamWConfig, Parameterized, Tensor};
use crate::objectives::{combined_loss, info_nce, masked_recon_loss, LossWeights, NegativeQueue};
use crate::sampler::{make_batch, AugmentConfig, PairBatch, PairMode, SamplerRngs};

pub const PRETRAIN_FORMAT: &str = "modalign-pretrain/1";
pub const METRICS_NAME: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.safetensors";

/// The four pre-training configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Cl,
    Mcl,
    ClMim,
    MclMim,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Cl, Variant::Mcl, Variant::ClMim, Variant::MclMim];

    pub fn pair_mode(self) -> PairMode {
        match self {
            Variant::Cl | Variant::ClMim => PairMode::Cl,
            Variant::Mcl | Variant::MclMim => PairMode::Mcl,
        }
    }

    pub fn uses_mim(self) -> bool {
        matches!(self, Variant::ClMim | Variant::MclMim)
    }

    /// Row label used in result tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Cl => "CL",
            Variant::Mcl => "MCL",
            Variant::ClMim => "CL + MIM",
            Variant::MclMim => "MCL + MIM",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Cl => "cl",
            Variant::Mcl => "mcl",
            Variant::ClMim => "cl_mim",
            Variant::MclMim => "mcl_mim",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| invalid(format!("unknown variant '{s}' (expected cl, mcl, cl_mim or mcl_mim)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub variant: Variant,
    pub total_steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub mask_ratio_range: (f64, f64),
    pub queue_capacity: usize,
    pub patch_size: usize,
    pub seed: u64,
    /// Save an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_every: u64,
    pub loss: LossWeights,
    pub momentum: MomentumSchedule,
    pub augment: AugmentConfig,
    pub encoder: EncoderConfig,
}

impl PretrainConfig {
    /// Single-core scale: tiny encoder on 32³ patches.
    pub fn desk() -> Self {
        Self {
            variant: Variant::MclMim,
            total_steps: 2_000,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.01,
            mask_ratio_range: (0.5, 0.75),
            queue_capacity: 1_024,
            patch_size: 32,
            seed: 0,
            checkpoint_every: 500,
            loss: LossWeights::default(),
            momentum: MomentumSchedule::default(),
            augment: AugmentConfig::default(),
            encoder: EncoderConfig::tiny(),
        }
    }

    pub fn paper() -> Self {
        Self {
            total_steps: 200_000,
            batch_size: 16,
            lr: 1e-4,
            queue_capacity: 16_384,
            patch_size: 96,
            checkpoint_every: 10_000,
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
        let (lo, hi) = self.mask_ratio_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(config_err("mask_ratio_range", "must satisfy 0 <= low <= high <= 1"));
        }
        if self.queue_capacity < self.batch_size {
            return Err(config_err("queue_capacity", "must hold at least one batch of keys"));
        }
        self.loss.validate().map_err(|e| config_err("loss", e.to_string()))?;
        let m = &self.momentum;
        if !(0.0 <= m.start && m.start <= m.end && m.end <= 1.0 && (0.0..=1.0).contains(&m.ramp_fraction)) {
            return Err(config_err(
                "momentum",
                "needs 0 <= start <= end <= 1 and ramp_fraction in [0, 1]",
            ));
        }
        self.augment
            .validate()
            .map_err(|e| config_err("augment", e.to_string()))?;
        self.encoder.validate()?;
        self.encoder
            .validate_input([self.patch_size; 3])
            .map_err(|e| config_err("patch_size", e.to_string()))
    }
}

/// Encoder plus projection head; the online and momentum networks share
/// this layout.
#[derive(Clone, Debug)]
pub struct Branch<T> {
    pub encoder: Encoder<T>,
    pub head: ProjectionHead<T>,
}

impl_params!(Branch { encoder, head });

/// Everything the optimizer updates.
#[derive(Clone, Debug)]
pub struct OnlineModel<T> {
    pub branch: Branch<T>,
    pub decoder: Option<FpnDecoder<T>>,
    pub mask_token: Option<Tensor<T>>,
}

impl_params!(OnlineModel {
    branch,
    decoder,
    mask_token
});

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub loss_cl: f64,
    pub loss_mim: Option<f64>,
    pub grad_norm_cl: f64,
    pub grad_norm_mim: Option<f64>,
    pub momentum: f64,
    pub mask_ratio: Option<f64>,
    /// Queue entries available as negatives when the loss was computed.
    pub queue_len: usize,
    pub items_without_negatives: usize,
}

#[derive(Clone, Debug)]
pub struct PretrainState {
    pub cfg: PretrainConfig,
    pub online: OnlineModel<f32>,
    pub momentum: Branch<f32>,
    pub queue: NegativeQueue,
    pub optimizer: AdamW,
    pub step: u64,
    pub sampler_rngs: SamplerRngs,
    pub mask_rng: ChaCha8Rng,
    /// Diagnostic switch: the contrastive branch sees an unmasked forward
    /// and reconstruction gradients stop at the decoder input.
    pub detach_mim: bool,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

struct Forward {
    pyramid: crate::model::FeaturePyramid<f32>,
    cache: crate::model::EncoderCache<f32>,
}

impl PretrainState {
    pub fn new(cfg: PretrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init = stream(cfg.seed, 0);
        let enc = &cfg.encoder;
        let branch = Branch {
            encoder: Encoder::new(enc, &mut init)?,
            head: ProjectionHead::new(enc.bottleneck_dim(), enc.projection_dim, &mut init),
        };
        let (decoder, mask_token) = if cfg.variant.uses_mim() {
            (
                Some(FpnDecoder::new(enc, 1, &mut init)),
                Some(Tensor::normal(&[enc.embed_dim()], 0.02, &mut init)),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            momentum: branch.clone(),
            online: OnlineModel {
                branch,
                decoder,
                mask_token,
            },
            queue: NegativeQueue::new(cfg.queue_capacity, enc.projection_dim)?,
            optimizer: AdamW::new(AdamWConfig::new(cfg.lr, cfg.weight_decay)),
            step: 0,
            sampler_rngs: SamplerRngs {
                spatial: stream(cfg.seed, 1),
                intensity: stream(cfg.seed, 2),
            },
            mask_rng: stream(cfg.seed, 3),
            detach_mim: false,
            cfg,
        })
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.total_steps
    }

    /// Samples a batch from `cohort` and trains on it.
    pub fn train_step(&mut self, cohort: &Cohort) -> Result<(PairBatch, StepMetrics)> {
        let batch = make_batch(
            cohort,
            self.cfg.variant.pair_mode(),
            self.cfg.batch_size,
            self.cfg.patch_size,
            &self.cfg.augment,
            &mut self.sampler_rngs,
        )?;
        let metrics = self.step_on_batch(&batch)?;
        Ok((batch, metrics))
    }

    /// One optimizer step, momentum update and enqueue on a given batch.
    pub fn step_on_batch(&mut self, batch: &PairBatch) -> Result<StepMetrics> {
        let cfg = &self.cfg;
        let n = batch.patch;
        if n != cfg.patch_size || batch.is_empty() {
            return Err(invalid(format!("batch of {n}³ patches, expected {}³", cfg.patch_size)));
        }
        let dims = [n; 3];
        let b = batch.len();
        let enc_cfg = cfg.encoder.clone();
        let mim = cfg.variant.uses_mim();
        let (lo, hi) = cfg.mask_ratio_range;
        let ratio = if lo < hi {
            self.mask_rng.random_range(lo..hi)
        } else {
            lo
        };
        let masks: Vec<TokenMasks> = if mim {
            let factor = enc_cfg.bottleneck_stride / enc_cfg.patch_embed_stride;
            (0..b)
                .map(|_| make_bottleneck_mask(enc_cfg.bottleneck_grid(dims), factor, ratio, &mut self.mask_rng))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };

        let mut keys = Vec::with_capacity(b * enc_cfg.projection_dim);
        for item in &batch.items {
            let pyr = self.momentum.encoder.encode(&item.key, dims, None)?;
            keys.extend(self.momentum.head.project(&pyr.pooled())?);
        }

        let online = &self.online;
        let token = online.mask_token.as_ref().map(|t| t.data());
        let masked_forward = |i: usize| -> Result<Forward> {
            let tm = token.map(|t| TokenMask {
                mask: &masks[i].patch,
                token: t,
            });
            let (pyramid, cache) = online.branch.encoder.forward(&batch.items[i].query, dims, tm)?;
            Ok(Forward { pyramid, cache })
        };
        let mut cl_fwd = Vec::with_capacity(b);
        let mut mim_fwd = Vec::new();
        for i in 0..b {
            if mim && self.detach_mim {
                let (pyramid, cache) = online.branch.encoder.forward(&batch.items[i].query, dims, None)?;
                cl_fwd.push(Forward { pyramid, cache });
                mim_fwd.push(masked_forward(i)?);
            } else {
                cl_fwd.push(masked_forward(i)?);
            }
        }
        let mut queries = Vec::with_capacity(keys.len());
        let mut proj_caches = Vec::with_capacity(b);
        for f in &cl_fwd {
            let (q, c) = online.branch.head.forward(&f.pyramid.pooled())?;
            queries.extend(q);
            proj_caches.push(c);
        }
        let subjects = batch.subject_ids();
        let queue_len = self.queue.len();
        let nce = info_nce(&queries, &keys, &self.queue, &subjects, cfg.loss.temperature)?;

        let p = enc_cfg.projection_dim;
        let lam_cl = cfg.loss.lambda_cl as f32;
        let mut grad_cl = online.zeros_like();
        for (i, (f, pc)) in cl_fwd.iter().zip(&proj_caches).enumerate() {
            let dq: Vec<f32> = nce.grad_q[i * p..(i + 1) * p].iter().map(|g| g * lam_cl).collect();
            let d_pooled = online.branch.head.backward(pc, &dq, &mut grad_cl.branch.head);
            online
                .branch
                .encoder
                .backward(&f.cache, &[], Some(&d_pooled), &mut grad_cl.branch.encoder, None);
        }

        let mut loss_mim = None;
        let mut grad_mim = None;
        if let (Some(decoder), true) = (&online.decoder, mim) {
            let mut g = online.zeros_like();
            let OnlineModel {
                branch: g_branch,
                decoder: g_decoder,
                mask_token: g_token,
            } = &mut g;
            let g_decoder = g_decoder.as_mut().expect("decoder gradient buffer");
            let g_token = g_token.as_mut().expect("mask token gradient buffer");
            let scale = (cfg.loss.lambda_mim / b as f64) as f32;
            let mut total = 0.0;
            let source = if self.detach_mim { &mim_fwd } else { &cl_fwd };
            for (i, f) in source.iter().enumerate() {
                let (pred, dcache) = decoder.forward(&f.pyramid)?;
                let vmask = masks[i].voxel_mask(enc_cfg.patch_embed_stride);
                let rl = masked_recon_loss(&pred, &batch.items[i].target, &vmask)?;
                total += rl.loss;
                let d_pred: Vec<f32> = rl.grad.iter().map(|v| v * scale).collect();
                let d_feats = decoder.backward(&dcache, &d_pred, g_decoder);
                if !self.detach_mim {
                    online.branch.encoder.backward(
                        &f.cache,
                        &d_feats,
                        None,
                        &mut g_branch.encoder,
                        Some(g_token.data_mut()),
                    );
                }
            }
            loss_mim = Some(total / b as f64);
            grad_mim = Some(g);
        }

        let loss_cl = nce.loss;
        let loss = combined_loss(loss_cl, loss_mim.unwrap_or(0.0), &cfg.loss);
        let grad_norm_cl = grad_cl.sq_norm().sqrt();
        let grad_norm_mim = grad_mim.as_ref().map(|g| g.sq_norm().sqrt());
        if !loss.is_finite() || !grad_norm_cl.is_finite() || !grad_norm_mim.unwrap_or(0.0).is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                detail: format!(
                    "loss_cl={loss_cl} loss_mim={loss_mim:?} grad_norm_cl={grad_norm_cl} \
                     grad_norm_mim={grad_norm_mim:?} mask_ratio={ratio}"
                ),
            });
        }
        let mut grad = grad_cl;
        if let Some(g) = &grad_mim {
            add_scaled(&mut grad, g, 1.0);
        }
        self.optimizer.step(self.online.params_mut(), grad.params())?;

        let m = cfg.momentum.at(self.step, cfg.total_steps)?;
        momentum_update(&mut self.momentum, &self.online.branch, m)?;
        self.queue.enqueue(&keys, &subjects)?;

        let metrics = StepMetrics {
            step: self.step,
            loss,
            loss_cl,
            loss_mim,
            grad_norm_cl,
            grad_norm_mim,
            momentum: m,
            mask_ratio: mim.then_some(ratio),
            queue_len,
            items_without_negatives: nce.items_without_negatives,
        };
        self.step += 1;
        Ok(metrics)
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new(PRETRAIN_FORMAT);
        a.set_meta("config", &self.cfg)?;
        a.set_meta("encoder", &self.cfg.encoder)?;
        a.set_meta("step", &self.step)?;
        a.set_meta("adam_step", &self.optimizer.steps_taken())?;
        a.set_meta("detach_mim", &self.detach_mim)?;
        a.put_params("online", &self.online);
        a.put_params("momentum", &self.momentum);
        let (m, v) = self.optimizer.moments();
        for (i, (mi, vi)) in m.iter().zip(v).enumerate() {
            a.put_f64(&format!("adam.m.{i}"), &[mi.len()], mi);
            a.put_f64(&format!("adam.v.{i}"), &[vi.len()], vi);
        }
        a.set_meta("adam_tensors", &m.len())?;
        let (keys, subjects, len, cursor) = self.queue.raw_parts();
        a.put_f32("queue.keys", &[self.queue.capacity(), self.queue.dim()], keys);
        a.put_u32("queue.subjects", &[self.queue.capacity()], subjects);
        a.set_meta("queue", &(len, cursor))?;
        a.put_rng("rng.spatial", &self.sampler_rngs.spatial)?;
        a.put_rng("rng.intensity", &self.sampler_rngs.intensity)?;
        a.put_rng("rng.mask", &self.mask_rng)?;
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        a.expect_format(PRETRAIN_FORMAT)?;
        let cfg: PretrainConfig = a.meta("config")?;
        let mut s = Self::new(cfg)?;
        a.load_params("online", &mut s.online)?;
        a.load_params("momentum", &mut s.momentum)?;
        s.step = a.meta("step")?;
        s.detach_mim = a.meta("detach_mim")?;
        let n: usize = a.meta("adam_tensors")?;
        let adam_step: u64 = a.meta("adam_step")?;
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for i in 0..n {
            m.push(a.get_f64(&format!("adam.m.{i}"))?.1);
            v.push(a.get_f64(&format!("adam.v.{i}"))?.1);
        }
        s.optimizer = AdamW::restore(s.optimizer.cfg, adam_step, m, v);
        let (len, cursor): (usize, usize) = a.meta("queue")?;
        let (_, keys) = a.get_f32("queue.keys")?;
        let (_, subjects) = a.get_u32("queue.subjects")?;
        s.queue = NegativeQueue::from_raw_parts(
            s.cfg.queue_capacity,
            s.cfg.encoder.projection_dim,
            keys,
            subjects,
            len,
            cursor,
        )
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
        s.sampler_rngs = SamplerRngs {
            spatial: a.get_rng("rng.spatial")?,
            intensity: a.get_rng("rng.intensity")?,
        };
        s.mask_rng = a.get_rng("rng.mask")?;
        Ok(s)
    }
}

/// Rebuilds the online encoder stored in a pre-training checkpoint.
pub fn load_pretrained_encoder(a: &Archive) -> Result<Encoder<f32>> {
    a.expect_format(PRETRAIN_FORMAT)?;
    let cfg: EncoderConfig = a.meta("encoder")?;
    cfg.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut enc = Encoder::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    a.load_params("online.branch.encoder", &mut enc)?;
    Ok(enc)
}

pub fn checkpoint_path(out: &Path, step: u64) -> PathBuf {
    out.join("checkpoints").join(format!("step_{step:07}.safetensors"))
}

/// Keeps only records strictly before `step` so a resumed run appends
/// without duplicates.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut kept = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: StepMetrics = serde_json::from_str(&line)?;
        if rec.step < step {
            kept.push(line);
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    for l in kept {
        writeln!(w, "{l}")?;
    }
    w.flush()?;
    Ok(())
}

fn write_failure_dump(out: &Path, batch: Option<&PairBatch>, err: &Error) -> Result<PathBuf> {
    let items: Vec<serde_json::Value> = batch
        .map(|b| {
            b.items
                .iter()
                .map(|it| {
                    let stats = |v: &[f32]| {
                        let finite = v.iter().all(|x| x.is_finite());
                        let (lo, hi) = v
                            .iter()
                            .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, c), &x| (a.min(x), c.max(x)));
                        serde_json::json!({ "finite": finite, "min": lo, "max": hi })
                    };
                    serde_json::json!({
                        "subject": it.subject,
                        "session": it.session,
                        "modality_q": it.modality_q.to_string(),
                        "modality_k": it.modality_k.to_string(),
                        "origin": it.origin,
                        "query": stats(&it.query),
                        "key": stats(&it.key),
                    })
                })
                .collect()
        })
        .unwrap_or_default();
    let path = out.join("failure.json");
    let dump = serde_json::json!({ "error": err.to_string(), "items": items });
    std::fs::write(&path, serde_json::to_string_pretty(&dump)?)?;
    Ok(path)
}

/// Trains until `total_steps`, writing metrics and checkpoints under `out`.
/// A state restored from a checkpoint continues where it stopped.
pub fn run_pretraining(mut state: PretrainState, cohort: &Cohort, out: &Path) -> Result<PretrainState> {
    check_pretrain_cohort(cohort)?;
    std::fs::create_dir_all(out)?;
    let metrics_path = out.join(METRICS_NAME);
    if state.step == 0 {
        File::create(&metrics_path)?;
    } else {
        truncate_metrics(&metrics_path, state.step)?;
    }
    let mut log = BufWriter::new(OpenOptions::new().append(true).create(true).open(&metrics_path)?);
    let total = state.cfg.total_steps;
    let report_every = (total / 20).max(1);
    while !state.is_done() {
        let batch = make_batch(
            cohort,
            state.cfg.variant.pair_mode(),
            state.cfg.batch_size,
            state.cfg.patch_size,
            &state.cfg.augment,
            &mut state.sampler_rngs,
        )?;
        let metrics = match state.step_on_batch(&batch) {
            Ok(m) => m,
            Err(e) => {
                log.flush()?;
                if matches!(e, Error::NonFinite { .. }) {
                    let dump = write_failure_dump(out, Some(&batch), &e)?;
                    log::error!("wrote diagnostics to {}", dump.display());
                }
                return Err(e);
            }
        };
        serde_json::to_writer(&mut log, &metrics)?;
        log.write_all(b"\n")?;
        if metrics.step % report_every == 0 || state.step == total {
            log::info!(
                "step {}/{} loss {:.4} (cl {:.4}, mim {}) queue {}",
                state.step,
                total,
                metrics.loss,
                metrics.loss_cl,
                metrics.loss_mim.map_or("-".to_string(), |v| format!("{v:.4}")),
                state.queue.len()
            );
        }
        let every = state.cfg.checkpoint_every;
        if every > 0 && state.step.is_multiple_of(every) && state.step < total {
            log.flush()?;
            state.to_archive()?.save(&checkpoint_path(out, state.step))?;
        }
    }
    log.flush()?;
    state.to_archive()?.save(&out.join(FINAL_CHECKPOINT))?;
    Ok(state)
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_cohort, CohortSpec};
    use crate::volume::Modality;

    fn tiny_cfg(variant: Variant, steps: u64) -> PretrainConfig {
        PretrainConfig {
            variant,
            total_steps: steps,
            batch_size: 2,
            queue_capacity: 8,
            checkpoint_every: 0,
            ..PretrainConfig::desk()
        }
    }

    fn cohort() -> Cohort {
        generate_cohort(&CohortSpec {
            n_subjects: 3,
            sessions_per_subject: 1,
            modalities: vec![Modality::T1, Modality::T2],
            volume_shape: [36, 36, 36],
            lesion_fraction: 0.0,
            seed: 1,
            n_centers: 1,
        })
        .unwrap()
        .cohort
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert_eq!(Variant::ClMim.pair_mode(), PairMode::Cl);
        assert!("byol".parse::<Variant>().is_err());
    }

    #[test]
    fn invalid_config_names_key() {
        let mut c = PretrainConfig::desk();
        c.mask_ratio_range = (0.8, 0.5);
        assert!(matches!(c.validate(), Err(Error::Config { key, .. }) if key == "mask_ratio_range"));
        let mut c = PretrainConfig::desk();
        c.patch_size = 40;
        assert!(matches!(c.validate(), Err(Error::Config { key, .. }) if key == "patch_size"));
        PretrainConfig::paper().validate().unwrap();
    }

    #[test]
    fn first_loss_is_zero_and_momentum_follows_ema() {
        let c = cohort();
        let mut s = PretrainState::new(tiny_cfg(Variant::MclMim, 10)).unwrap();
        let (_, m0) = s.train_step(&c).unwrap();
        assert_eq!(m0.loss_cl, 0.0);
        assert_eq!(m0.queue_len, 0);
        assert!(m0.loss_mim.unwrap() > 0.0);

        let before = s.momentum.clone();
        let (_, m1) = s.train_step(&c).unwrap();
        assert!(m1.loss_cl > 0.0);
        let m = m1.momentum;
        for ((t, old), new) in s
            .momentum
            .params()
            .iter()
            .zip(before.params())
            .zip(s.online.branch.params())
        {
            for ((x, o), n) in t.data().iter().zip(old.data()).zip(new.data()) {
                let want = (m * f64::from(*o) + (1.0 - m) * f64::from(*n)) as f32;
                assert!((x - want).abs() <= 1e-6 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn pair_mode_is_the_only_difference_between_mim_variants() {
        let c = cohort();
        let mut a = PretrainState::new(tiny_cfg(Variant::ClMim, 4)).unwrap();
        let mut b = PretrainState::new(tiny_cfg(Variant::MclMim, 4)).unwrap();
        for _ in 0..3 {
            let (batch, ma) = a.train_step(&c).unwrap();
            let mb = b.step_on_batch(&batch).unwrap();
            assert_eq!(ma, mb);
        }
        assert_eq!(a.online.checksum(), b.online.checksum());
    }

    #[test]
    fn detached_reconstruction_matches_plain_contrastive_trajectory() {
        let c = cohort();
        let mut plain = PretrainState::new(tiny_cfg(Variant::Mcl, 10)).unwrap();
        let mut cfg = tiny_cfg(Variant::MclMim, 10);
        cfg.loss.lambda_mim = 0.0;
        let mut detached = PretrainState::new(cfg).unwrap();
        detached.detach_mim = true;
        // Same initial branch weights: MIM parts are drawn after the branch.
        assert_eq!(plain.online.branch.checksum(), detached.online.branch.checksum());
        for _ in 0..10 {
            plain.train_step(&c).unwrap();
            detached.train_step(&c).unwrap();
            assert_eq!(plain.online.branch.checksum(), detached.online.branch.checksum());
            assert_eq!(plain.momentum.checksum(), detached.momentum.checksum());
        }
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let c = cohort();
        let dir = tempfile::tempdir().unwrap();
        let full = run_pretraining(
            PretrainState::new(tiny_cfg(Variant::MclMim, 6)).unwrap(),
            &c,
            dir.path(),
        )
        .unwrap();
        let full_log = std::fs::read_to_string(dir.path().join(METRICS_NAME)).unwrap();

        let dir2 = tempfile::tempdir().unwrap();
        let mut half_cfg = tiny_cfg(Variant::MclMim, 6);
        half_cfg.checkpoint_every = 3;
        let mut s = PretrainState::new(half_cfg).unwrap();
        for _ in 0..3 {
            s.train_step(&c).unwrap();
        }
        let restored =
            PretrainState::from_archive(&Archive::from_bytes(&s.to_archive().unwrap().to_bytes().unwrap()).unwrap())
                .unwrap();
        let mut restored_full = restored.clone();
        restored_full.cfg.checkpoint_every = 0;
        let resumed = run_pretraining(restored_full, &c, dir2.path()).unwrap();
        assert_eq!(resumed.online.checksum(), full.online.checksum());
        assert_eq!(resumed.momentum.checksum(), full.momentum.checksum());
        assert_eq!(resumed.queue, full.queue);
        let tail: Vec<&str> = full_log.lines().skip(3).collect();
        let got = std::fs::read_to_string(dir2.path().join(METRICS_NAME)).unwrap();
        assert_eq!(got.lines().collect::<Vec<_>>(), tail);
        let enc = load_pretrained_encoder(&Archive::load(&dir.path().join(FINAL_CHECKPOINT)).unwrap()).unwrap();
        assert_eq!(enc.checksum(), full.online.branch.encoder.checksum());
    }

    #[test]
    fn gradients_never_touch_the_momentum_network() {
        let c = cohort();
        let mut cfg = tiny_cfg(Variant::MclMim, 5);
        cfg.momentum.start = 1.0;
        cfg.momentum.end = 1.0;
        let mut s = PretrainState::new(cfg).unwrap();
        let before = s.momentum.checksum();
        for _ in 0..3 {
            s.train_step(&c).unwrap();
        }
        assert_eq!(s.momentum.checksum(), before);
        assert_ne!(s.online.branch.checksum(), before);
    }
}
