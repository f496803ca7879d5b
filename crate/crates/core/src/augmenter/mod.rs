//! Sentence → image-representation augmenters.
//!
//! Every backend produces a [`RawAugmentation`]: a visuality score `gamma`
//! and the encoded `p × d` patch matrix of the image synthesized for the
//! sentence. Downstream code never sees which backend produced it.

mod remote;

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use remote::{encode_patches, RemoteBackend, RemoteConfig, MAX_REMOTE_BATCH};

pub const DEFAULT_STEPS: u32 = 25;
pub const DEFAULT_PATCH_COUNT: usize = 50;
pub const DEFAULT_IMAGE_DIM: usize = 768;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("augmentation service unavailable: {0}")]
    RemoteUnavailable(String),
    #[error("augmentation service rejected the request ({status}): {body}")]
    RemoteRejected { status: u16, body: String },
    #[error("malformed augmentation response: {0}")]
    BadResponse(String),
    #[error("patch matrix shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("augmentation contains non-finite values")]
    NonFinite,
    #[error("visuality score {0} outside [-1, 1]")]
    GammaOutOfRange(f32),
    #[error("vector dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("invalid request: {0}")]
    InvalidRequest(&'static str),
    #[error("fixture file: {0}")]
    Fixture(String),
}

impl AugmentError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, Self::RemoteUnavailable(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentRequest {
    pub sentence: String,
    /// Diffusion steps; only the remote backend consumes it.
    pub steps: u32,
    pub seed: u64,
    pub patch_count: usize,
    pub dim: usize,
}

impl AugmentRequest {
    pub fn new(sentence: impl Into<String>, seed: u64, patch_count: usize, dim: usize) -> Self {
        Self {
            sentence: sentence.into(),
            steps: DEFAULT_STEPS,
            seed,
            patch_count,
            dim,
        }
    }

    fn validate(&self) -> Result<(), AugmentError> {
        if self.steps == 0 {
            return Err(AugmentError::InvalidRequest("steps must be >= 1"));
        }
        if self.patch_count == 0 || self.dim == 0 {
            return Err(AugmentError::InvalidRequest("patch_count and dim must be >= 1"));
        }
        Ok(())
    }
}

/// Row-major `rows × cols` matrix of 32-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl PatchMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), rows * cols, "patch matrix data length");
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_matrix(&self) -> crate::tensor::Matrix {
        crate::tensor::Matrix::from_vec(self.rows, self.cols, self.data.iter().map(|&v| v as f64).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawAugmentation {
    pub gamma: f32,
    pub patches: PatchMatrix,
}

impl RawAugmentation {
    /// Rejects wrong shapes, non-finite values and out-of-range scores.
    pub fn validate(&self, req: &AugmentRequest) -> Result<(), AugmentError> {
        let expected = (req.patch_count, req.dim);
        let actual = (self.patches.rows, self.patches.cols);
        if expected != actual || self.patches.data.len() != req.patch_count * req.dim {
            return Err(AugmentError::ShapeMismatch { expected, actual });
        }
        if !self.gamma.is_finite() || self.patches.data.iter().any(|v| !v.is_finite()) {
            return Err(AugmentError::NonFinite);
        }
        if !(-1.0..=1.0).contains(&self.gamma) {
            return Err(AugmentError::GammaOutOfRange(self.gamma));
        }
        Ok(())
    }
}

/// Trim, collapse internal whitespace, lowercase.
pub fn normalize_sentence(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// SHA-256 of the normalized sentence; the cache key.
pub fn sentence_digest(s: &str) -> [u8; 32] {
    Sha256::digest(normalize_sentence(s).as_bytes()).into()
}

/// Cosine similarity of two vectors, clamped to `[-1, 1]`.
///
/// Callers pass unit vectors; the norms are still divided out so rounding in
/// the inputs never pushes the score outside its codomain.
pub fn score_visuality(text_vec: &[f64], image_vec: &[f64]) -> Result<f64, AugmentError> {
    if text_vec.len() != image_vec.len() {
        return Err(AugmentError::DimensionMismatch(text_vec.len(), image_vec.len()));
    }
    let dot: f64 = text_vec.iter().zip(image_vec).map(|(a, b)| a * b).sum();
    let na = text_vec.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = image_vec.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Deterministic stand-in for synthesis + scoring.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    /// Normalized sentence → forced visuality score.
    fixtures: HashMap<String, f32>,
}

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fixtures<I, S>(fixtures: I) -> Result<Self, AugmentError>
    where
        I: IntoIterator<Item = (S, f32)>,
        S: AsRef<str>,
    {
        let mut map = HashMap::new();
        for (s, g) in fixtures {
            if !(-1.0..=1.0).contains(&g) {
                return Err(AugmentError::GammaOutOfRange(g));
            }
            map.insert(normalize_sentence(s.as_ref()), g);
        }
        Ok(Self { fixtures: map })
    }

    /// Loads a JSON object mapping sentence → gamma.
    pub fn from_fixture_file(path: &Path) -> Result<Self, AugmentError> {
        let text = std::fs::read_to_string(path).map_err(|e| AugmentError::Fixture(format!("{}: {e}", path.display())))?;
        let map: HashMap<String, f32> =
            serde_json::from_str(&text).map_err(|e| AugmentError::Fixture(format!("{}: {e}", path.display())))?;
        let mut entries: Vec<_> = map.into_iter().collect();
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        Self::with_fixtures(entries)
    }

    /// Hash-derived score in `[0, 1)`, independent of the request seed.
    pub fn hashed_gamma(sentence: &str) -> f32 {
        let d = sentence_digest(sentence);
        let bits = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
        // 24 bits keep the value exactly representable below 1.0 in f32.
        (bits >> 40) as f32 / (1u64 << 24) as f32
    }

    pub fn augment(&self, req: &AugmentRequest) -> RawAugmentation {
        let norm = normalize_sentence(&req.sentence);
        let digest: [u8; 32] = Sha256::digest(norm.as_bytes()).into();
        let mut h = Sha256::new();
        h.update(digest);
        h.update(req.seed.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
        let data: Vec<f32> = (0..req.patch_count * req.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let gamma = self
            .fixtures
            .get(&norm)
            .copied()
            .unwrap_or_else(|| Self::hashed_gamma(&norm));
        RawAugmentation {
            gamma,
            patches: PatchMatrix::new(req.patch_count, req.dim, data),
        }
    }
}

/// Images replaced by seed-determined Gaussian noise, always gated in.
pub fn noise_augment(req: &AugmentRequest) -> RawAugmentation {
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let data: Vec<f32> = (0..req.patch_count * req.dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    RawAugmentation {
        gamma: 1.0,
        patches: PatchMatrix::new(req.patch_count, req.dim, data),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Mock,
    Remote,
    Noise,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mock" => Ok(Self::Mock),
            "remote" => Ok(Self::Remote),
            "noise" => Ok(Self::Noise),
            other => Err(format!("unknown augmenter backend '{other}'")),
        }
    }
}

impl std::fmt::Display for BackendKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mock => "mock",
            Self::Remote => "remote",
            Self::Noise => "noise",
        })
    }
}

pub enum Augmenter {
    Mock(MockBackend),
    Remote(RemoteBackend),
    Noise,
}

impl Augmenter {
    pub fn kind(&self) -> BackendKind {
        match self {
            Self::Mock(_) => BackendKind::Mock,
            Self::Remote(_) => BackendKind::Remote,
            Self::Noise => BackendKind::Noise,
        }
    }

    pub fn augment(&self, req: &AugmentRequest) -> Result<RawAugmentation, AugmentError> {
        Ok(self.augment_batch(std::slice::from_ref(req))?.remove(0))
    }

    /// Results come back in request order regardless of backend.
    pub fn augment_batch(&self, reqs: &[AugmentRequest]) -> Result<Vec<RawAugmentation>, AugmentError> {
        for r in reqs {
            r.validate()?;
        }
        let out = match self {
            Self::Mock(m) => reqs.iter().map(|r| m.augment(r)).collect(),
            Self::Noise => reqs.iter().map(noise_augment).collect(),
            Self::Remote(r) => r.augment_batch(reqs)?,
        };
        for (req, aug) in reqs.iter().zip(&out) {
            aug.validate(req)?;
        }
        Ok(out)
    }
}
