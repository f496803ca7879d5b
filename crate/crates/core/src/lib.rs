//! Visually augmented text generation: per-sentence image augmentation,
//! visuality gating and a plug-in fusion layer for a seq2seq transformer.

pub mod augmenter;
pub mod autograd;
pub mod data;
pub mod decoding;
pub mod embed_cache;
pub mod gating;
pub mod metrics;
pub mod model;
pub mod segmentation;
pub mod tensor;
pub mod training;
