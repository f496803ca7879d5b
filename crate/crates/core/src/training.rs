//! Two-stage optimization: fusion-only denoising pretraining with a frozen
//! backbone, then full fine-tuning. Also the few-shot subsetting harness.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gating::{gate, FusionAssignment, FusionEntry};
use crate::model::{write_checkpoint, Checkpoint, Example, Model, ModelError, Partition};
use crate::segmentation::{BOS, EOS, MASK, PAD};
use crate::tensor::Matrix;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("loss became non-finite at step {0}")]
    NonFiniteLoss(usize),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("run directory io: {0}")]
    Io(#[from] std::io::Error),
}

/// Stage seed derived from the master seed: first 8 bytes of
/// `sha256(master_le ‖ label)`.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub mask_ratio: f64,
    pub span_lambda: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.5,
            span_lambda: 3.5,
            batch_size: 8,
            steps: 200,
            learning_rate: 0.05,
            momentum: 0.9,
            clip_norm: Some(1.0),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(TrainError::InvalidConfig(format!("mask_ratio {} outside (0, 1)", self.mask_ratio)));
        }
        if !(self.span_lambda > 0.0) {
            return Err(TrainError::InvalidConfig(format!("span_lambda {} must be positive", self.span_lambda)));
        }
        check_optimizer(self.batch_size, self.learning_rate, self.momentum)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub smoothing: f64,
    pub clip_norm: Option<f64>,
    /// Name of the validation metric used for checkpoint selection.
    pub metric: String,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            epochs: 10,
            learning_rate: 0.05,
            momentum: 0.9,
            smoothing: 0.1,
            clip_norm: Some(1.0),
            metric: "bleu4".into(),
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(TrainError::InvalidConfig(format!("smoothing {} outside [0, 1)", self.smoothing)));
        }
        check_optimizer(self.batch_size, self.learning_rate, self.momentum)
    }
}

fn check_optimizer(batch_size: usize, lr: f64, momentum: f64) -> Result<(), TrainError> {
    if batch_size == 0 {
        return Err(TrainError::InvalidConfig("batch_size must be positive".into()));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(TrainError::InvalidConfig(format!("learning rate {lr}")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(TrainError::InvalidConfig(format!("momentum {momentum} outside [0, 1)")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSample {
    /// `<bos>`, unmasked tokens and one `<mask>` per masked run, `<eos>`.
    pub noised: Vec<u32>,
    /// The original sequence.
    pub target: Vec<u32>,
    /// Per-content-position mask flags.
    pub masked: Vec<bool>,
    /// Span lengths as drawn, before clamping.
    pub raw_span_lengths: Vec<u64>,
}

impl MaskedSample {
    pub fn masked_fraction(&self) -> f64 {
        self.masked.iter().filter(|&&m| m).count() as f64 / self.masked.len().max(1) as f64
    }
}

/// Span-masks the content tokens of `tokens` (everything except `<bos>`,
/// `<eos>` and `<pad>`).
///
/// Spans are drawn until the masked fraction first reaches `mask_ratio`. Each
/// span length is Poisson(`span_lambda`) clamped to at least 1, starts at a
/// uniformly chosen unmasked position, is clipped at the end of the sequence
/// and may merge with spans already placed.
pub fn mask_spans<R: Rng + ?Sized>(tokens: &[u32], mask_ratio: f64, span_lambda: f64, rng: &mut R) -> MaskedSample {
    let content: Vec<u32> = tokens
        .iter()
        .copied()
        .filter(|&t| t != BOS && t != EOS && t != PAD)
        .collect();
    let n = content.len();
    let mut masked = vec![false; n];
    let mut raw = Vec::new();
    let poisson = Poisson::new(span_lambda).expect("span_lambda > 0");
    let mut count = 0;
    while n > 0 && (count as f64) < mask_ratio * n as f64 {
        let drawn = poisson.sample(rng) as u64;
        raw.push(drawn);
        let len = drawn.max(1) as usize;
        let free: Vec<usize> = (0..n).filter(|&i| !masked[i]).collect();
        let start = free[rng.random_range(0..free.len())];
        for m in &mut masked[start..(start + len).min(n)] {
            if !*m {
                *m = true;
                count += 1;
            }
        }
    }
    let mut noised = vec![BOS];
    for (i, &t) in content.iter().enumerate() {
        if !masked[i] {
            noised.push(t);
        } else if i == 0 || !masked[i - 1] {
            noised.push(MASK);
        }
    }
    noised.push(EOS);
    let mut target = vec![BOS];
    target.extend(&content);
    target.push(EOS);
    MaskedSample {
        noised,
        target,
        masked,
        raw_span_lengths: raw,
    }
}

/// A caption and the image synthesized from it.
#[derive(Debug, Clone)]
pub struct CaptionImage {
    /// `<bos> ... <eos>`
    pub ids: Vec<u32>,
    pub image: Matrix,
    pub gamma: f32,
}

/// Denoising example: masked caption in, original caption out. The caption
/// is one synthesis unit, so every content token of the noised input shares
/// the image when it passes the gate.
pub fn denoising_example<R: Rng + ?Sized>(pair: &CaptionImage, cfg: &PretrainConfig, theta: f64, rng: &mut R) -> Example {
    let sample = mask_spans(&pair.ids, cfg.mask_ratio, cfg.span_lambda, rng);
    let gated = gate(pair.gamma as f64, theta);
    let last = sample.noised.len() - 1;
    let entries = (0..sample.noised.len())
        .map(|i| {
            if gated && i != 0 && i != last {
                FusionEntry::Attend(0)
            } else {
                FusionEntry::Skip
            }
        })
        .collect();
    Example {
        src: sample.noised,
        tgt: sample.target,
        assign: FusionAssignment { entries, image_count: 1 },
        images: vec![pair.image.clone()],
    }
}

/// Stochastic gradient descent with heavy-ball momentum:
/// `v ← μ·v + g`, `w ← w − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    velocity: Vec<Matrix>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64, clip_norm: Option<f64>) -> Self {
        Self {
            learning_rate,
            momentum,
            clip_norm,
            velocity: Vec::new(),
        }
    }

    /// Updates every parameter not in `frozen`. Frozen tensors are not
    /// touched at all, so they stay bit-identical.
    pub fn step(&mut self, model: &mut Model, grads: &[Matrix], frozen: &[Partition]) {
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
        }
        let scale = match self.clip_norm {
            Some(c) => {
                let norm = grads
                    .iter()
                    .flat_map(|g| g.data().iter())
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for ((p, g), v) in model.params_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            if frozen.contains(&p.partition) {
                continue;
            }
            for ((w, &gi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = self.momentum * *vi + scale * gi;
                *w -= self.learning_rate * *vi;
            }
        }
    }
}

const FROZEN_FOR_PRETRAIN: [Partition; 1] = [Partition::Backbone];

/// One fusion-only update on `batch`; returns the loss before the update.
pub fn pretrain_step(model: &mut Model, opt: &mut Sgd, batch: &[Example]) -> Result<f64, TrainError> {
    if model.params().count(Partition::Fusion) == 0 {
        return Err(TrainError::InvalidConfig("model has no fusion parameters to pretrain".into()));
    }
    let (loss, grads) = model.param_gradients(batch, 0.0, &FROZEN_FOR_PRETRAIN)?;
    opt.step(model, &grads, &FROZEN_FOR_PRETRAIN);
    Ok(loss)
}

/// One update of every partition; returns the loss before the update.
pub fn finetune_step(model: &mut Model, opt: &mut Sgd, batch: &[Example], smoothing: f64) -> Result<f64, TrainError> {
    let (loss, grads) = model.param_gradients(batch, smoothing, &[])?;
    opt.step(model, &grads, &[]);
    Ok(loss)
}

/// Run directory: `config.txt`, `loss.log`, `epoch-N.ckpt`, `best.ckpt`.
pub struct RunDir {
    path: PathBuf,
    log: BufWriter<File>,
    vocab: Vec<String>,
}

impl RunDir {
    pub fn create(path: &Path, snapshot: &[(String, String)], vocab: Vec<String>) -> Result<Self, TrainError> {
        std::fs::create_dir_all(path)?;
        let mut cfg = String::new();
        for (k, v) in snapshot {
            cfg.push_str(&format!("{k}={v}\n"));
        }
        std::fs::write(path.join("config.txt"), cfg)?;
        let log = BufWriter::new(File::create(path.join("loss.log"))?);
        Ok(Self {
            path: path.to_path_buf(),
            log,
            vocab,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn log_step(&mut self, step: usize, loss: f64, model: &Model) -> Result<(), TrainError> {
        let sums: Vec<String> = Partition::ALL
            .iter()
            .map(|&p| format!("{}={}", p.as_str(), model.params().checksum_hex(p)))
            .collect();
        writeln!(self.log, "{step} {loss:.6} {}", sums.join(" "))?;
        Ok(())
    }

    pub fn log_line(&mut self, line: &str) -> Result<(), TrainError> {
        writeln!(self.log, "{line}")?;
        Ok(())
    }

    pub fn save(&mut self, name: &str, model: &Model) -> Result<PathBuf, TrainError> {
        self.log.flush()?;
        let path = self.path.join(format!("{name}.ckpt"));
        write_checkpoint(&path, &Checkpoint::from_model(model, &self.vocab))?;
        Ok(path)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = self.log.flush();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
}

/// Fusion-only denoising pretraining over `pairs`.
pub fn pretrain(
    model: &mut Model,
    pairs: &[CaptionImage],
    cfg: &PretrainConfig,
    theta: f64,
    mut run: Option<&mut RunDir>,
) -> Result<PretrainReport, TrainError> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "pretrain"));
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum, cfg.clip_norm);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<Example> = (0..cfg.batch_size.min(pairs.len()))
            .map(|_| {
                let pair = &pairs[rng.random_range(0..pairs.len())];
                denoising_example(pair, cfg, theta, &mut rng)
            })
            .collect();
        let loss = pretrain_step(model, &mut opt, &batch)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss(step));
        }
        if let Some(run) = run.as_deref_mut() {
            run.log_step(step, loss, model)?;
        }
        losses.push(loss);
    }
    if let Some(run) = run {
        run.save("pretrained", model)?;
    }
    Ok(PretrainReport { losses })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneReport {
    pub losses: Vec<f64>,
    /// Validation metric after each epoch.
    pub epoch_metrics: Vec<f64>,
    pub best_epoch: usize,
}

/// Full fine-tuning. After each epoch `validate` scores the model; the
/// highest-scoring epoch's parameters are left in `model` at the end
/// (earliest epoch wins ties).
pub fn finetune<F>(
    model: &mut Model,
    train: &[Example],
    cfg: &FinetuneConfig,
    mut validate: F,
    mut run: Option<&mut RunDir>,
) -> Result<FinetuneReport, TrainError>
where
    F: FnMut(&Model) -> Result<f64, TrainError>,
{
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "finetune"));
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum, cfg.clip_norm);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut losses = Vec::new();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Model)> = None;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| train[i].clone()).collect();
            let loss = finetune_step(model, &mut opt, &batch, cfg.smoothing)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss(step));
            }
            if let Some(run) = run.as_deref_mut() {
                run.log_step(step, loss, model)?;
            }
            losses.push(loss);
            step += 1;
        }
        let metric = validate(model)?;
        metrics.push(metric);
        if let Some(run) = run.as_deref_mut() {
            run.log_line(&format!("epoch {epoch} {}={metric:.6}", cfg.metric))?;
            run.save(&format!("epoch-{epoch}"), model)?;
        }
        if best.as_ref().is_none_or(|(_, m, _)| metric > *m) {
            best = Some((epoch, metric, model.clone()));
        }
    }
    let best_epoch = match best {
        Some((epoch, _, params)) => {
            *model = params;
            epoch
        }
        None => 0,
    };
    if let Some(run) = run {
        run.save("best", model)?;
    }
    Ok(FinetuneReport {
        losses,
        epoch_metrics: metrics,
        best_epoch,
    })
}

/// Indices of a uniform sample without replacement of
/// `max(1, round(fraction·n))` items, ascending.
pub fn few_shot_split(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>, TrainError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(TrainError::InvalidConfig(format!("fraction {fraction} outside (0, 1]")));
    }
    if n == 0 {
        return Err(TrainError::EmptyDataset);
    }
    let k = ((fraction * n as f64).round() as usize).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Seeds for the independent few-shot groups.
pub fn few_shot_seeds(master: u64, groups: usize) -> Vec<u64> {
    (0..groups).map(|g| derive_seed(master, &format!("fewshot-group-{g}"))).collect()
}
