//! Dataset records and the path from raw text to model-ready examples:
//! segment, tokenize, look up (or synthesize) images, gate.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augmenter::{sentence_digest, AugmentError, AugmentRequest, Augmenter};
use crate::embed_cache::{CacheError, EmbeddingCache, ImageEmbedding};
use crate::gating::{build_fusion_assignment, synthesis_texts, GateConfig, GateError};
use crate::model::Example;
use crate::segmentation::{segment_text, tokenize, SegmentError, SegmentMode, TokenizedDocument, Vocab};
use crate::tensor::Matrix;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("record {index}: {source}")]
    Segment {
        index: usize,
        #[source]
        source: SegmentError,
    },
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error("no cached image for \"{0}\"; run prepare first")]
    CacheMiss(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub source: String,
    /// May be absent in inputs that are only generated from.
    #[serde(default)]
    pub target: String,
}

/// One JSON object per non-blank line.
pub fn read_jsonl(path: &Path) -> Result<Vec<Record>, DataError> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, records: &[Record]) -> Result<(), DataError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r).expect("record serializes"))?;
    }
    f.flush()?;
    Ok(())
}

/// Settings shared by `prepare` and example construction.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub mode: SegmentMode,
    pub gate: GateConfig,
    pub seed: u64,
    pub steps: u32,
    pub patch_count: usize,
    pub image_dim: usize,
}

pub fn tokenize_source(text: &str, vocab: &Vocab, mode: SegmentMode) -> Result<TokenizedDocument, SegmentError> {
    Ok(tokenize(&segment_text(text, mode)?, vocab))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PrepareStats {
    /// Synthesis texts across all records, duplicates included.
    pub texts: usize,
    /// Distinct texts after normalization.
    pub unique: usize,
    pub hits: usize,
    pub misses: usize,
}

impl PrepareStats {
    pub fn hit_rate(&self) -> f64 {
        if self.unique == 0 {
            1.0
        } else {
            self.hits as f64 / self.unique as f64
        }
    }
}

/// Synthesizes an image for every synthesis text not yet in `cache`.
/// Requests go out in first-seen order, `batch` at a time.
pub fn prepare(
    sources: &[String],
    vocab: &Vocab,
    augmenter: &Augmenter,
    cache: &mut EmbeddingCache,
    cfg: &PipelineConfig,
    batch: usize,
) -> Result<PrepareStats, DataError> {
    let mut stats = PrepareStats::default();
    let mut seen = HashSet::new();
    let mut pending = Vec::new();
    for (index, src) in sources.iter().enumerate() {
        let doc = tokenize_source(src, vocab, cfg.mode).map_err(|source| DataError::Segment { index, source })?;
        for text in synthesis_texts(&doc, cfg.gate.granularity) {
            stats.texts += 1;
            if !seen.insert(sentence_digest(&text)) {
                continue;
            }
            stats.unique += 1;
            if cache.lookup(&text).is_some() {
                stats.hits += 1;
            } else {
                stats.misses += 1;
                pending.push(text);
            }
        }
    }
    for chunk in pending.chunks(batch.max(1)) {
        let reqs: Vec<AugmentRequest> = chunk
            .iter()
            .map(|t| AugmentRequest {
                steps: cfg.steps,
                ..AugmentRequest::new(t.clone(), cfg.seed, cfg.patch_count, cfg.image_dim)
            })
            .collect();
        for (text, aug) in chunk.iter().zip(augmenter.augment_batch(&reqs)?) {
            cache.store(ImageEmbedding::from_augmentation(text, aug))?;
        }
    }
    Ok(stats)
}

/// Visuality scores of every synthesis text of every source, from the cache.
pub fn corpus_gammas(
    sources: &[String],
    vocab: &Vocab,
    cache: &EmbeddingCache,
    cfg: &PipelineConfig,
) -> Result<Vec<f32>, DataError> {
    let mut out = Vec::new();
    for (index, src) in sources.iter().enumerate() {
        let doc = tokenize_source(src, vocab, cfg.mode).map_err(|source| DataError::Segment { index, source })?;
        for text in synthesis_texts(&doc, cfg.gate.granularity) {
            out.push(cache.lookup(&text).ok_or(DataError::CacheMiss(text))?.gamma);
        }
    }
    Ok(out)
}

/// Builds the model input for one source. Images that no token attends
/// to are left as empty `0 × d` placeholders.
pub fn source_example(
    source: &str,
    target_ids: Vec<u32>,
    vocab: &Vocab,
    cache: &EmbeddingCache,
    cfg: &PipelineConfig,
) -> Result<Example, DataError> {
    let doc = tokenize_source(source, vocab, cfg.mode).map_err(|source| DataError::Segment { index: 0, source })?;
    let texts = synthesis_texts(&doc, cfg.gate.granularity);
    let embs = texts
        .iter()
        .map(|t| cache.lookup(t).ok_or_else(|| DataError::CacheMiss(t.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    let gammas: Vec<f32> = embs.iter().map(|e| e.gamma).collect();
    let assign = build_fusion_assignment(&doc, &gammas, &cfg.gate)?;
    let used: HashSet<usize> = assign.used_images().into_iter().collect();
    let (_, d) = cache.shape();
    let images = embs
        .iter()
        .enumerate()
        .map(|(k, e)| {
            if used.contains(&k) {
                e.patches.to_matrix()
            } else {
                Matrix::zeros(0, d)
            }
        })
        .collect();
    Ok(Example {
        src: doc.ids,
        tgt: target_ids,
        assign,
        images,
    })
}

pub fn build_examples(
    records: &[Record],
    vocab: &Vocab,
    cache: &EmbeddingCache,
    cfg: &PipelineConfig,
) -> Result<Vec<Example>, DataError> {
    records
        .iter()
        .enumerate()
        .map(|(index, r)| {
            source_example(&r.source, vocab.encode(&r.target), vocab, cache, cfg).map_err(|e| match e {
                DataError::Segment { source, .. } => DataError::Segment { index, source },
                other => other,
            })
        })
        .collect()
}
