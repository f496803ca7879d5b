//! Beam search and nucleus sampling over a step-wise next-token scorer.

use rand::Rng;

use crate::gating::FusionAssignment;
use crate::model::{Model, ModelError};
use crate::segmentation::{BOS, EOS, MASK, PAD};
use crate::tensor::Matrix;

/// Tokens never generated.
pub const BANNED: [u32; 3] = [PAD, BOS, MASK];

/// Slack when comparing cumulative nucleus mass against `top_p`.
const MASS_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Beam,
    Nucleus,
}

impl std::str::FromStr for DecodeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "beam" => Ok(Self::Beam),
            "nucleus" => Ok(Self::Nucleus),
            other => Err(format!("unknown decode mode '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub beam_size: usize,
    pub top_p: f64,
    pub temperature: f64,
    /// Maximum generated tokens, `<eos>` included.
    pub max_len: usize,
    pub seed: u64,
    /// Rank beam hypotheses by mean instead of summed log-probability.
    pub length_normalize: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Beam,
            beam_size: 5,
            top_p: 0.9,
            temperature: 0.7,
            max_len: 32,
            seed: 0,
            length_normalize: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.beam_size == 0 {
            return Err("beam_size must be at least 1".into());
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p {} outside (0, 1]", self.top_p));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(format!("temperature {} must be positive", self.temperature));
        }
        if self.max_len == 0 {
            return Err("max_len must be at least 1".into());
        }
        Ok(())
    }
}

/// Log-probabilities over the vocabulary with banned tokens removed
/// (`-inf`) and the rest renormalized.
pub fn step_log_probs(logits: &[f64], temperature: f64) -> Vec<f64> {
    let allowed = |i: usize| !BANNED.contains(&(i as u32));
    let max = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| allowed(i))
        .map(|(_, &v)| v / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| allowed(i))
        .map(|(_, &v)| (v / temperature - max).exp())
        .sum();
    let log_z = max + z.ln();
    logits
        .iter()
        .enumerate()
        .map(|(i, &v)| if allowed(i) { v / temperature - log_z } else { f64::NEG_INFINITY })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens after `<bos>`, ending in `<eos>` unless cut at max_len.
    pub tokens: Vec<u32>,
    /// Summed log-probability.
    pub score: f64,
}

struct Finished {
    hyp: Hypothesis,
    step: usize,
}

fn rank(h: &Hypothesis, normalize: bool) -> f64 {
    if normalize {
        h.score / h.tokens.len().max(1) as f64
    } else {
        h.score
    }
}

/// Beam search. `logits(prefix)` returns next-token logits for a prefix that
/// starts with `<bos>`.
///
/// Each step expands every live hypothesis by every allowed token and ranks
/// the candidates by score, then token order. A candidate ending in `<eos>`
/// or reaching `max_len` finishes if it ranks within the top `beam_size`;
/// the best `beam_size` unfinished candidates stay live. Search stops once
/// no live hypothesis can outscore the best finished one. The result is the
/// best finished hypothesis, ties going to the earlier finish, then to
/// lexicographic token order.
pub fn beam_search<F>(mut logits: F, cfg: &DecodeConfig) -> Result<Hypothesis, ModelError>
where
    F: FnMut(&[u32]) -> Result<Vec<f64>, ModelError>,
{
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
    }];
    let mut finished: Vec<Finished> = Vec::new();
    for step in 0..cfg.max_len {
        let mut cands = Vec::new();
        for h in &live {
            let mut prefix = vec![BOS];
            prefix.extend(&h.tokens);
            let lp = step_log_probs(&logits(&prefix)?, 1.0);
            for (t, &l) in lp.iter().enumerate() {
                if l == f64::NEG_INFINITY {
                    continue;
                }
                let mut tokens = h.tokens.clone();
                tokens.push(t as u32);
                cands.push(Hypothesis {
                    tokens,
                    score: h.score + l,
                });
            }
        }
        cands.sort_by(|a, b| {
            rank(b, cfg.length_normalize)
                .total_cmp(&rank(a, cfg.length_normalize))
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        let mut next = Vec::with_capacity(cfg.beam_size);
        for (r, c) in cands.into_iter().enumerate() {
            let done = c.tokens.last() == Some(&EOS) || c.tokens.len() == cfg.max_len;
            if done {
                if r < cfg.beam_size {
                    finished.push(Finished { hyp: c, step });
                }
            } else if next.len() < cfg.beam_size {
                next.push(c);
            }
            if r + 1 >= cfg.beam_size && next.len() == cfg.beam_size {
                break;
            }
        }
        live = next;
        let best_done = finished
            .iter()
            .map(|f| rank(&f.hyp, cfg.length_normalize))
            .fold(f64::NEG_INFINITY, f64::max);
        let best_live = live
            .iter()
            .map(|h| rank(h, cfg.length_normalize))
            .fold(f64::NEG_INFINITY, f64::max);
        // without length normalization scores only fall, so this is exact
        if live.is_empty() || (!cfg.length_normalize && best_done >= best_live) {
            break;
        }
    }
    finished.extend(live.into_iter().map(|hyp| Finished { hyp, step: cfg.max_len }));
    finished
        .into_iter()
        .min_by(|a, b| {
            rank(&b.hyp, cfg.length_normalize)
                .total_cmp(&rank(&a.hyp, cfg.length_normalize))
                .then(a.step.cmp(&b.step))
                .then_with(|| a.hyp.tokens.cmp(&b.hyp.tokens))
        })
        .map(|f| f.hyp)
        .ok_or_else(|| ModelError::InvalidConfig("beam search produced no hypothesis".into()))
}

/// Smallest probability-sorted prefix with mass ≥ `top_p` (never empty).
/// Tokens tied with the last one kept are kept too when the prefix
/// overshoots `top_p`. Returned in descending probability order.
pub fn nucleus_set(probs: &[f64], top_p: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut cum = 0.0;
    let mut keep = 0;
    for &i in &order {
        cum += probs[i];
        keep += 1;
        if cum >= top_p - MASS_TOLERANCE {
            break;
        }
    }
    if cum > top_p + MASS_TOLERANCE {
        let last = probs[order[keep - 1]];
        while keep < order.len() && probs[order[keep]] == last {
            keep += 1;
        }
    }
    order.truncate(keep.max(1));
    order
}

/// Draws one token from the renormalized nucleus of `probs`.
pub fn sample_from_nucleus<R: Rng + ?Sized>(probs: &[f64], top_p: f64, rng: &mut R) -> (usize, Vec<usize>) {
    let set = nucleus_set(probs, top_p);
    let total: f64 = set.iter().map(|&i| probs[i]).sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for &i in &set {
        acc += probs[i];
        if u < acc {
            return (i, set);
        }
    }
    (*set.last().expect("nucleus is never empty"), set)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    pub tokens: Vec<u32>,
    /// The nucleus each token was drawn from.
    pub nuclei: Vec<Vec<usize>>,
}

/// Nucleus sampling: temperature, softmax over allowed tokens, truncate to
/// the nucleus, renormalize, sample.
pub fn nucleus_sample<F, R>(mut logits: F, cfg: &DecodeConfig, rng: &mut R) -> Result<Sampled, ModelError>
where
    F: FnMut(&[u32]) -> Result<Vec<f64>, ModelError>,
    R: Rng + ?Sized,
{
    let mut tokens = Vec::new();
    let mut nuclei = Vec::new();
    while tokens.len() < cfg.max_len {
        let mut prefix = vec![BOS];
        prefix.extend(&tokens);
        let probs: Vec<f64> = step_log_probs(&logits(&prefix)?, cfg.temperature)
            .into_iter()
            .map(f64::exp)
            .collect();
        let (t, set) = sample_from_nucleus(&probs, cfg.top_p, rng);
        tokens.push(t as u32);
        nuclei.push(set);
        if t as u32 == EOS {
            break;
        }
    }
    Ok(Sampled { tokens, nuclei })
}

/// Encodes the source once and decodes per `cfg.mode`. The generation
/// length is capped by the model's positional table.
pub fn generate(
    model: &Model,
    src: &[u32],
    images: &[Matrix],
    assign: &FusionAssignment,
    cfg: &DecodeConfig,
) -> Result<Vec<u32>, ModelError> {
    cfg.validate().map_err(ModelError::InvalidConfig)?;
    let enc = model.encode(src, images, assign)?;
    let mut cfg = cfg.clone();
    cfg.max_len = cfg.max_len.min(model.config().max_len - 1);
    let step = |prefix: &[u32]| model.next_token_logits(&enc, prefix);
    match cfg.mode {
        DecodeMode::Beam => Ok(beam_search(step, &cfg)?.tokens),
        DecodeMode::Nucleus => {
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed);
            Ok(nucleus_sample(step, &cfg, &mut rng)?.tokens)
        }
    }
}
