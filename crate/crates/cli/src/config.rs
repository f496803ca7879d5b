//! Flat `key=value` run configuration. Every key is also a `--key` flag;
//! values from the file are applied first and flags override them.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// `(key, default, help)`. An empty default means unset.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "master seed; stage seeds are derived from it"),
    // paths
    ("train", "", "training set (JSONL with source/target)"),
    ("valid", "", "validation set; falls back to the training set"),
    ("test", "", "test set for generate, evaluate and fewshot"),
    ("cache", "cache.livc", "image embedding cache file"),
    ("checkpoint", "", "checkpoint to start from or generate with"),
    ("run-dir", "run", "output directory for training runs"),
    ("output", "", "generate: output text file (stdout if unset)"),
    ("hypotheses", "", "evaluate: generated texts, one per line"),
    ("report", "", "evaluate: JSONL report file to append to"),
    ("noun-lexicon", "", "noun list for fusion-scope=nouns_only"),
    ("mock-fixtures", "", "mock backend fixture file"),
    // augmentation
    ("backend", "mock", "mock | remote | noise"),
    ("remote-url", "http://127.0.0.1:8765", "augmentation sidecar base URL"),
    ("remote-timeout-secs", "120", "per-request timeout"),
    ("remote-retries", "3", "retries after 503 or connection failure"),
    ("augment-batch", "16", "sentences per augmenter call"),
    ("diffusion-steps", "25", "passed through to the sidecar"),
    ("patch-count", "50", "rows of each image patch matrix"),
    // segmentation and gating
    ("segment-mode", "prose", "prose | e2e_mr"),
    ("theta", "0.27", "visuality threshold"),
    ("granularity", "sent", "doc | sent | word"),
    ("fusion-scope", "all_tokens", "all_tokens | nouns_only"),
    // model
    ("vocab-size", "8000", "maximum vocabulary size"),
    ("model-dim", "64", ""),
    ("heads", "4", ""),
    ("encoder-layers", "2", ""),
    ("decoder-layers", "2", ""),
    ("ffn-dim", "auto", "auto = 4 x model-dim"),
    ("image-dim", "768", "width of each image patch row"),
    ("projection-hidden", "auto", "auto = 2 x model-dim"),
    ("fusion-strategy", "cross_attention", "cross_attention | concat_encoder_output | self_attention_concat | none"),
    ("fusion-layers", "all", "encoder layers with a fusion sub-layer: all or a comma list"),
    ("fusion-norm", "pre", "pre | post"),
    ("max-len", "64", "maximum sequence length"),
    // optimization
    ("momentum", "0.9", ""),
    ("clip-norm", "1.0", "global gradient norm cap, or none"),
    ("mask-ratio", "0.5", ""),
    ("span-lambda", "3.5", ""),
    ("pretrain-batch-size", "8", ""),
    ("pretrain-steps", "200", ""),
    ("pretrain-learning-rate", "0.05", ""),
    ("batch-size", "8", ""),
    ("epochs", "10", ""),
    ("learning-rate", "0.05", ""),
    ("smoothing", "0.1", "label smoothing"),
    ("metric", "bleu4", "validation metric for checkpoint selection"),
    // decoding
    ("decode-mode", "beam", "beam | nucleus"),
    ("beam-size", "5", ""),
    ("top-p", "0.9", ""),
    ("temperature", "0.7", ""),
    ("decode-max-len", "32", "maximum generated tokens"),
    ("length-normalize", "false", ""),
    // analyses
    ("theta-grid", "0,0.1,0.2,0.27,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1", "sweep-theta grid"),
    ("fractions", "0.001,0.003,0.01,0.03", "fewshot training-set fractions"),
    ("groups", "5", "fewshot groups per fraction"),
];

#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
    explicit: BTreeSet<&'static str>,
}

fn canonical(key: &str) -> Result<&'static str, String> {
    KEYS.iter()
        .map(|(k, _, _)| *k)
        .find(|k| *k == key)
        .ok_or_else(|| format!("unknown config key '{key}'"))
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v, _)| (*k, v.to_string())).collect(),
            explicit: BTreeSet::new(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let k = canonical(key)?;
        self.values.insert(k, value.trim().to_string());
        self.explicit.insert(k);
        Ok(())
    }

    /// `key=value` lines; `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("config {}: {e}", path.display()))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("{}:{}: expected key=value", path.display(), i + 1))?;
            self.set(k.trim(), v).map_err(|e| format!("{}:{}: {e}", path.display(), i + 1))?;
        }
        Ok(())
    }

    pub fn is_set(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unknown key {key}"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, String>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key).parse().map_err(|e| format!("{key}={}: {e}", self.raw(key)))
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.raw(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, String>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| format!("{key}: '{s}': {e}")))
            .collect()
    }

    pub fn snapshot(&self) -> Vec<(String, String)> {
        self.values.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }
}
