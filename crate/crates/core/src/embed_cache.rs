//! Offline store of augmentation results keyed by sentence digest.
//!
//! File layout, little-endian throughout:
//!
//! ```text
//! "LIVC" | u32 version=1 | u32 p | u32 d | u64 entry_count
//! entry_count × ( [u8; 32] key | f32 gamma | p·d × f32, row-major )
//! ```
//!
//! Entries are written in ascending key order so identical caches produce
//! identical files.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::augmenter::{sentence_digest, PatchMatrix, RawAugmentation};

pub const MAGIC: &[u8; 4] = b"LIVC";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("embedding shape {actual:?} does not match cache shape {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("not an embedding cache (bad magic)")]
    BadMagic,
    #[error("unsupported cache version {0}")]
    UnsupportedVersion(u32),
    #[error("cache file truncated: need {needed} bytes, have {have}")]
    TruncatedFile { needed: usize, have: usize },
    #[error("cache file has {0} trailing bytes")]
    TrailingData(usize),
    #[error("invalid cache entry: {0}")]
    InvalidEntry(String),
    #[error("cache io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEmbedding {
    pub key: [u8; 32],
    pub gamma: f32,
    pub patches: PatchMatrix,
}

impl ImageEmbedding {
    pub fn from_augmentation(sentence: &str, aug: RawAugmentation) -> Self {
        Self {
            key: sentence_digest(sentence),
            gamma: aug.gamma,
            patches: aug.patches,
        }
    }

    fn check(&self) -> Result<(), CacheError> {
        if !self.gamma.is_finite() || !(-1.0..=1.0).contains(&self.gamma) {
            return Err(CacheError::InvalidEntry(format!("gamma {}", self.gamma)));
        }
        if self.patches.data.iter().any(|v| !v.is_finite()) {
            return Err(CacheError::InvalidEntry("non-finite patch value".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    p: usize,
    d: usize,
    entries: BTreeMap<[u8; 32], (f32, Vec<f32>)>,
}

impl EmbeddingCache {
    pub fn new(p: usize, d: usize) -> Self {
        Self {
            p,
            d,
            entries: BTreeMap::new(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.p, self.d)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Upsert; the last write for a key wins.
    pub fn store(&mut self, emb: ImageEmbedding) -> Result<(), CacheError> {
        let actual = (emb.patches.rows, emb.patches.cols);
        if actual != (self.p, self.d) || emb.patches.data.len() != self.p * self.d {
            return Err(CacheError::ShapeMismatch {
                expected: (self.p, self.d),
                actual,
            });
        }
        emb.check()?;
        self.entries.insert(emb.key, (emb.gamma, emb.patches.data));
        Ok(())
    }

    pub fn lookup(&self, sentence: &str) -> Option<ImageEmbedding> {
        self.lookup_key(&sentence_digest(sentence))
    }

    pub fn lookup_key(&self, key: &[u8; 32]) -> Option<ImageEmbedding> {
        self.entries.get(key).map(|(gamma, data)| ImageEmbedding {
            key: *key,
            gamma: *gamma,
            patches: PatchMatrix::new(self.p, self.d, data.clone()),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = ImageEmbedding> + '_ {
        self.entries.keys().filter_map(|k| self.lookup_key(k))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let entry_len = 32 + 4 + 4 * self.p * self.d;
        let mut out = Vec::with_capacity(HEADER_LEN + entry_len * self.entries.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.p as u32).to_le_bytes());
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (key, (gamma, data)) in &self.entries {
            out.extend_from_slice(key);
            out.extend_from_slice(&gamma.to_le_bytes());
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a whole file image. Any shortfall is reported as truncation,
    /// never as a partial cache.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CacheError> {
        let need = |n: usize| {
            if bytes.len() < n {
                Err(CacheError::TruncatedFile {
                    needed: n,
                    have: bytes.len(),
                })
            } else {
                Ok(())
            }
        };
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));

        need(4)?;
        if &bytes[..4] != MAGIC {
            return Err(CacheError::BadMagic);
        }
        need(8)?;
        let version = u32_at(4);
        if version != VERSION {
            return Err(CacheError::UnsupportedVersion(version));
        }
        need(HEADER_LEN)?;
        let p = u32_at(8) as usize;
        let d = u32_at(12) as usize;
        let count = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
        let entry_len = 32 + 4 + 4 * p * d;
        let total = usize::try_from(count)
            .ok()
            .and_then(|c| c.checked_mul(entry_len))
            .and_then(|b| b.checked_add(HEADER_LEN))
            .ok_or_else(|| CacheError::InvalidEntry(format!("entry count {count} overflows")))?;
        need(total)?;
        if bytes.len() > total {
            return Err(CacheError::TrailingData(bytes.len() - total));
        }

        let mut cache = Self::new(p, d);
        for chunk in bytes[HEADER_LEN..].chunks_exact(entry_len) {
            let key: [u8; 32] = chunk[..32].try_into().expect("32 bytes");
            let gamma = f32::from_le_bytes(chunk[32..36].try_into().expect("4 bytes"));
            let data = chunk[36..]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let emb = ImageEmbedding {
                key,
                gamma,
                patches: PatchMatrix::new(p, d, data),
            };
            emb.check()?;
            if cache.entries.insert(key, (gamma, emb.patches.data)).is_some() {
                return Err(CacheError::InvalidEntry("duplicate key".into()));
            }
        }
        Ok(cache)
    }

    /// Writes a temp file beside `path` and renames it into place.
    pub fn persist(&self, path: &Path) -> Result<(), CacheError> {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&self.to_bytes())?;
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| CacheError::Io(e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CacheError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn emb(sentence: &str, gamma: f32, p: usize, d: usize, fill: f32) -> ImageEmbedding {
        ImageEmbedding {
            key: sentence_digest(sentence),
            gamma,
            patches: PatchMatrix::new(p, d, (0..p * d).map(|i| fill + i as f32).collect()),
        }
    }

    #[test]
    fn store_lookup_roundtrip_and_normalization() {
        let mut c = EmbeddingCache::new(2, 3);
        let e = emb("the cat", 0.4, 2, 3, 0.5);
        c.store(e.clone()).unwrap();
        assert_eq!(c.lookup("the cat"), Some(e.clone()));
        assert_eq!(c.lookup("  The  Cat "), Some(e));
        assert_eq!(c.lookup("a dog"), None);
    }

    #[test]
    fn last_write_wins() {
        let mut c = EmbeddingCache::new(1, 1);
        c.store(emb("x", 0.1, 1, 1, 0.0)).unwrap();
        c.store(emb("x", 0.7, 1, 1, 0.0)).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.lookup("x").unwrap().gamma, 0.7);
    }

    #[test]
    fn shape_guard() {
        let mut c = EmbeddingCache::new(2, 3);
        assert!(matches!(
            c.store(emb("x", 0.1, 3, 3, 0.0)),
            Err(CacheError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn file_sizes() {
        let mut c = EmbeddingCache::new(2, 3);
        assert_eq!(c.to_bytes().len(), 24);
        c.store(emb("x", 0.1, 2, 3, 0.0)).unwrap();
        assert_eq!(c.to_bytes().len(), 24 + 60);
    }

    #[test]
    fn header_errors() {
        let mut bytes = EmbeddingCache::new(1, 1).to_bytes();
        bytes[0] = b'X';
        assert!(matches!(EmbeddingCache::from_bytes(&bytes), Err(CacheError::BadMagic)));
        let mut bytes = EmbeddingCache::new(1, 1).to_bytes();
        bytes[4] = 2;
        assert!(matches!(
            EmbeddingCache::from_bytes(&bytes),
            Err(CacheError::UnsupportedVersion(2))
        ));
        let mut bytes = EmbeddingCache::new(1, 1).to_bytes();
        bytes.push(0);
        assert!(matches!(EmbeddingCache::from_bytes(&bytes), Err(CacheError::TrailingData(1))));
    }

    #[test]
    fn persist_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.livc");
        let mut c = EmbeddingCache::new(2, 2);
        c.store(emb("a", -0.25, 2, 2, f32::MIN_POSITIVE)).unwrap();
        c.persist(&path).unwrap();
        let back = EmbeddingCache::load(&path).unwrap();
        assert_eq!(back, c);
        assert_eq!(std::fs::read(&path).unwrap(), c.to_bytes());
    }

    proptest! {
        #[test]
        fn truncation_never_yields_a_cache(n in 0usize..3, cut_frac in 0.0f64..1.0) {
            let mut c = EmbeddingCache::new(2, 2);
            for i in 0..n {
                c.store(emb(&format!("s{i}"), 0.5, 2, 2, i as f32)).unwrap();
            }
            let bytes = c.to_bytes();
            let cut = ((bytes.len() as f64) * cut_frac) as usize;
            let truncated = matches!(EmbeddingCache::from_bytes(&bytes[..cut]), Err(CacheError::TruncatedFile { .. }));
            prop_assert!(truncated);
        }
    }
}
