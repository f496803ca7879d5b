//! Encoder-decoder backbone with plug-in vision-text fusion.
//!
//! The backbone is a post-norm transformer. Fusion sub-layers sit after the
//! self-attention sub-layer of the configured encoder layers; a token either
//! skips the sub-layer entirely or cross-attends to the projected patches of
//! exactly one image. A single projection MLP maps raw patch rows into the
//! model width and is shared by every fusion layer.

mod checkpoint;
mod params;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autograd::{NodeId, Tape};
use crate::gating::FusionAssignment;
use crate::segmentation::PAD;
use crate::tensor::Matrix;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use params::{Param, ParamSet, Partition};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("{what}: expected shape {expected:?}, got {actual:?}")]
    ShapeMismatch {
        what: String,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("token attends to image {0} but no such image was supplied")]
    UnprojectedImage(usize),
    #[error("sequence length {len} exceeds max_len {max}")]
    LengthOverflow { len: usize, max: usize },
    #[error("fusion assignment covers {entries} tokens, sequence has {tokens}")]
    AssignmentMismatch { tokens: usize, entries: usize },
    #[error("non-finite gradient in '{0}'")]
    NonFiniteGradient(String),
    #[error("missing parameter '{0}'")]
    MissingParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionStrategy {
    /// Per-layer cross-attention from tokens to their image's patches.
    CrossAttention,
    /// Decoder cross-attends over `[encoder output ; gated image rows]`.
    ConcatEncoderOutput,
    /// Gated image rows prepended to the encoder input sequence.
    SelfAttentionConcat,
    None,
}

impl FusionStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::CrossAttention => "cross_attention",
            Self::ConcatEncoderOutput => "concat_encoder_output",
            Self::SelfAttentionConcat => "self_attention_concat",
            Self::None => "none",
        }
    }
}

impl std::str::FromStr for FusionStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cross_attention" => Ok(Self::CrossAttention),
            "concat_encoder_output" => Ok(Self::ConcatEncoderOutput),
            "self_attention_concat" => Ok(Self::SelfAttentionConcat),
            "none" => Ok(Self::None),
            other => Err(format!("unknown fusion strategy '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionNorm {
    /// `s + W_O·MHA(LN(s), I, I)`
    Pre,
    /// `LN(s + W_O·MHA(s, I, I))`
    Post,
}

impl std::str::FromStr for FusionNorm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pre" => Ok(Self::Pre),
            "post" => Ok(Self::Post),
            other => Err(format!("unknown fusion norm '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    /// Width of raw patch rows coming from the augmenter.
    pub image_dim: usize,
    /// Hidden width of the projection MLP.
    pub projection_hidden: usize,
    pub fusion_strategy: FusionStrategy,
    /// Encoder layers carrying a fusion sub-layer.
    pub fusion_layers: Vec<usize>,
    pub fusion_norm: FusionNorm,
    pub max_len: usize,
}

impl ModelConfig {
    /// Defaults: every encoder layer fused, pre-norm, projection hidden = 2·d.
    pub fn new(vocab_size: usize, model_dim: usize, heads: usize, layers: usize, image_dim: usize) -> Self {
        Self {
            vocab_size,
            model_dim,
            heads,
            encoder_layers: layers,
            decoder_layers: layers,
            ffn_dim: 4 * model_dim,
            image_dim,
            projection_hidden: 2 * model_dim,
            fusion_strategy: FusionStrategy::CrossAttention,
            fusion_layers: (0..layers).collect(),
            fusion_norm: FusionNorm::Pre,
            max_len: 64,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return bad(format!("model_dim {} not divisible by heads {}", self.model_dim, self.heads));
        }
        if self.vocab_size < crate::segmentation::RESERVED.len() {
            return bad(format!("vocab_size {} below reserved token count", self.vocab_size));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return bad("encoder and decoder need at least one layer".into());
        }
        if self.ffn_dim == 0 || self.image_dim == 0 || self.projection_hidden == 0 || self.max_len < 2 {
            return bad("ffn_dim, image_dim, projection_hidden must be positive and max_len >= 2".into());
        }
        if let Some(l) = self.fusion_layers.iter().find(|&&l| l >= self.encoder_layers) {
            return bad(format!("fusion layer {l} outside [0, {})", self.encoder_layers));
        }
        Ok(())
    }

    fn fused(&self, layer: usize) -> bool {
        self.fusion_strategy == FusionStrategy::CrossAttention && self.fusion_layers.contains(&layer)
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let layers = self
            .fusion_layers
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",");
        vec![
            ("vocab-size".into(), self.vocab_size.to_string()),
            ("model-dim".into(), self.model_dim.to_string()),
            ("heads".into(), self.heads.to_string()),
            ("encoder-layers".into(), self.encoder_layers.to_string()),
            ("decoder-layers".into(), self.decoder_layers.to_string()),
            ("ffn-dim".into(), self.ffn_dim.to_string()),
            ("image-dim".into(), self.image_dim.to_string()),
            ("projection-hidden".into(), self.projection_hidden.to_string()),
            ("fusion-strategy".into(), self.fusion_strategy.as_str().into()),
            ("fusion-layers".into(), layers),
            (
                "fusion-norm".into(),
                match self.fusion_norm {
                    FusionNorm::Pre => "pre".into(),
                    FusionNorm::Post => "post".into(),
                },
            ),
            ("max-len".into(), self.max_len.to_string()),
        ]
    }

    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self, ModelError> {
        let get = |k: &str| {
            map.get(k)
                .ok_or_else(|| ModelError::InvalidConfig(format!("missing key '{k}'")))
        };
        let num = |k: &str| -> Result<usize, ModelError> {
            get(k)?
                .parse()
                .map_err(|e| ModelError::InvalidConfig(format!("{k}: {e}")))
        };
        let parse = |k: &str| get(k).map(|s| s.to_string());
        let layers = parse("fusion-layers")?;
        let fusion_layers = if layers.trim().is_empty() {
            Vec::new()
        } else {
            layers
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|e| ModelError::InvalidConfig(format!("fusion-layers: {e}")))?
        };
        let cfg = Self {
            vocab_size: num("vocab-size")?,
            model_dim: num("model-dim")?,
            heads: num("heads")?,
            encoder_layers: num("encoder-layers")?,
            decoder_layers: num("decoder-layers")?,
            ffn_dim: num("ffn-dim")?,
            image_dim: num("image-dim")?,
            projection_hidden: num("projection-hidden")?,
            fusion_strategy: parse("fusion-strategy")?.parse().map_err(ModelError::InvalidConfig)?,
            fusion_layers,
            fusion_norm: parse("fusion-norm")?.parse().map_err(ModelError::InvalidConfig)?,
            max_len: num("max-len")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct InitOptions {
    /// Zero the fusion output projection so a fresh fusion sub-layer is a no-op under pre-norm.
    pub zero_fusion_output: bool,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            zero_fusion_output: true,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct LinearIds {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct NormIds {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct AttnIds {
    q: LinearIds,
    k: LinearIds,
    v: LinearIds,
    o: LinearIds,
}

#[derive(Debug, Clone, Copy)]
struct FfnIds {
    up: LinearIds,
    down: LinearIds,
}

#[derive(Debug, Clone, Copy)]
struct FusionIds {
    norm: NormIds,
    attn: AttnIds,
}

#[derive(Debug, Clone)]
struct EncLayerIds {
    self_attn: AttnIds,
    norm1: NormIds,
    fusion: Option<FusionIds>,
    ffn: FfnIds,
    norm2: NormIds,
}

#[derive(Debug, Clone)]
struct DecLayerIds {
    self_attn: AttnIds,
    norm1: NormIds,
    cross_attn: AttnIds,
    norm2: NormIds,
    ffn: FfnIds,
    norm3: NormIds,
}

#[derive(Debug, Clone)]
struct Layout {
    tok_emb: usize,
    enc_pos: usize,
    dec_pos: usize,
    encoder: Vec<EncLayerIds>,
    decoder: Vec<DecLayerIds>,
    out: LinearIds,
    projection: Option<(LinearIds, LinearIds)>,
}

/// Registers every parameter name/shape of a config, in a fixed order.
struct LayoutBuilder {
    specs: Vec<(String, Partition, (usize, usize), Init)>,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, part: Partition, shape: (usize, usize), init: Init) -> usize {
        self.specs.push((name, part, shape, init));
        self.specs.len() - 1
    }

    fn linear(&mut self, name: &str, part: Partition, fan_in: usize, fan_out: usize, zero: bool) -> LinearIds {
        let init = if zero { Init::Zeros } else { Init::Normal((fan_in as f64).powf(-0.5)) };
        LinearIds {
            w: self.add(format!("{name}.w"), part, (fan_in, fan_out), init),
            b: self.add(format!("{name}.b"), part, (1, fan_out), Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, part: Partition, d: usize) -> NormIds {
        NormIds {
            g: self.add(format!("{name}.g"), part, (1, d), Init::Ones),
            b: self.add(format!("{name}.b"), part, (1, d), Init::Zeros),
        }
    }

    fn attn(&mut self, name: &str, part: Partition, d: usize, zero_out: bool) -> AttnIds {
        AttnIds {
            q: self.linear(&format!("{name}.q"), part, d, d, false),
            k: self.linear(&format!("{name}.k"), part, d, d, false),
            v: self.linear(&format!("{name}.v"), part, d, d, false),
            o: self.linear(&format!("{name}.o"), part, d, d, zero_out),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, hidden: usize) -> FfnIds {
        FfnIds {
            up: self.linear(&format!("{name}.up"), Partition::Backbone, d, hidden, false),
            down: self.linear(&format!("{name}.down"), Partition::Backbone, hidden, d, false),
        }
    }
}

fn build_layout(cfg: &ModelConfig, init: InitOptions) -> (Layout, Vec<(String, Partition, (usize, usize), Init)>) {
    let d = cfg.model_dim;
    let bb = Partition::Backbone;
    let mut b = LayoutBuilder { specs: Vec::new() };
    let emb_std = (d as f64).powf(-0.5);
    let tok_emb = b.add("tok_emb".into(), bb, (cfg.vocab_size, d), Init::Normal(emb_std));
    let enc_pos = b.add("enc_pos".into(), bb, (cfg.max_len, d), Init::Normal(emb_std));
    let dec_pos = b.add("dec_pos".into(), bb, (cfg.max_len, d), Init::Normal(emb_std));
    let encoder = (0..cfg.encoder_layers)
        .map(|l| {
            let p = format!("enc.{l}");
            let self_attn = b.attn(&format!("{p}.self_attn"), bb, d, false);
            let norm1 = b.norm(&format!("{p}.norm1"), bb, d);
            let fusion = cfg.fused(l).then(|| FusionIds {
                norm: b.norm(&format!("{p}.fusion.norm"), Partition::Fusion, d),
                attn: b.attn(&format!("{p}.fusion.attn"), Partition::Fusion, d, init.zero_fusion_output),
            });
            let ffn = b.ffn(&format!("{p}.ffn"), d, cfg.ffn_dim);
            let norm2 = b.norm(&format!("{p}.norm2"), bb, d);
            EncLayerIds {
                self_attn,
                norm1,
                fusion,
                ffn,
                norm2,
            }
        })
        .collect();
    let decoder = (0..cfg.decoder_layers)
        .map(|l| {
            let p = format!("dec.{l}");
            DecLayerIds {
                self_attn: b.attn(&format!("{p}.self_attn"), bb, d, false),
                norm1: b.norm(&format!("{p}.norm1"), bb, d),
                cross_attn: b.attn(&format!("{p}.cross_attn"), bb, d, false),
                norm2: b.norm(&format!("{p}.norm2"), bb, d),
                ffn: b.ffn(&format!("{p}.ffn"), d, cfg.ffn_dim),
                norm3: b.norm(&format!("{p}.norm3"), bb, d),
            }
        })
        .collect();
    let out = b.linear("out", bb, d, cfg.vocab_size, false);
    let projection = (cfg.fusion_strategy != FusionStrategy::None).then(|| {
        (
            b.linear("proj.in", Partition::Projection, cfg.image_dim, cfg.projection_hidden, false),
            b.linear("proj.out", Partition::Projection, cfg.projection_hidden, d, false),
        )
    });
    (
        Layout {
            tok_emb,
            enc_pos,
            dec_pos,
            encoder,
            decoder,
            out,
            projection,
        },
        b.specs,
    )
}

/// Encoder result: the memory the decoder attends to and its blocked keys.
pub struct EncoderOut {
    pub memory: NodeId,
    pub blocked: Vec<bool>,
}

/// Encoder memory detached from any tape, for step-wise decoding.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub memory: Matrix,
    pub blocked: Vec<bool>,
}

/// One training or scoring pair with its images.
#[derive(Debug, Clone)]
pub struct Example {
    pub src: Vec<u32>,
    /// `<bos> ... <eos>`
    pub tgt: Vec<u32>,
    pub assign: FusionAssignment,
    /// Raw `p × image_dim` patches indexed by assignment image index.
    pub images: Vec<Matrix>,
}

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    params: ParamSet,
    layout: Layout,
}

impl Model {
    pub fn new(cfg: ModelConfig, init: InitOptions, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let (layout, specs) = build_layout(&cfg, init);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = specs
            .into_iter()
            .map(|(name, partition, (r, c), init)| {
                let value = match init {
                    Init::Normal(std) => Matrix::random_normal(r, c, std, &mut rng),
                    Init::Zeros => Matrix::zeros(r, c),
                    Init::Ones => Matrix::filled(r, c, 1.0),
                };
                Param { name, partition, value }
            })
            .collect();
        Ok(Self {
            cfg,
            params: ParamSet::new(params),
            layout,
        })
    }

    /// Builds `cfg`'s parameter layout, taking every tensor that `source`
    /// provides by name and initializing the rest from `seed`.
    ///
    /// Plugging fresh fusion layers into a trained backbone is
    /// `Model::assemble(cfg_with_fusion, trained.params(), InitOptions::default(), seed)`.
    pub fn assemble(cfg: ModelConfig, source: &ParamSet, init: InitOptions, seed: u64) -> Result<Self, ModelError> {
        let mut model = Self::new(cfg, init, seed)?;
        for p in model.params.iter_mut() {
            if let Some(src) = source.get(&p.name) {
                if src.value.shape() != p.value.shape() {
                    return Err(ModelError::ShapeMismatch {
                        what: p.name.clone(),
                        expected: p.value.shape(),
                        actual: src.value.shape(),
                    });
                }
                p.value = src.value.clone();
            }
        }
        Ok(model)
    }

    /// Like [`Model::assemble`] but every tensor must come from `source`.
    pub fn from_params(cfg: ModelConfig, source: &ParamSet) -> Result<Self, ModelError> {
        let model = Self::assemble(cfg, source, InitOptions::default(), 0)?;
        if let Some(p) = model.params.iter().find(|p| source.get(&p.name).is_none()) {
            return Err(ModelError::MissingParam(p.name.clone()));
        }
        for p in model.params.iter() {
            let src = source.get(&p.name).expect("checked above");
            if src.partition != p.partition {
                return Err(ModelError::Checkpoint(format!(
                    "'{}' labeled {:?}, expected {:?}",
                    p.name, src.partition, p.partition
                )));
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn p(&self, tape: &mut Tape, id: usize) -> NodeId {
        tape.param(crate::autograd::ParamId(id), &self.params.by_index(id).value)
    }

    fn linear(&self, tape: &mut Tape, x: NodeId, ids: LinearIds) -> NodeId {
        let w = self.p(tape, ids.w);
        let b = self.p(tape, ids.b);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }

    fn norm(&self, tape: &mut Tape, x: NodeId, ids: NormIds) -> NodeId {
        let g = self.p(tape, ids.g);
        let b = self.p(tape, ids.b);
        tape.layer_norm(x, g, b)
    }

    fn ffn(&self, tape: &mut Tape, x: NodeId, ids: FfnIds) -> NodeId {
        let h = self.linear(tape, x, ids.up);
        let h = tape.gelu(h);
        self.linear(tape, h, ids.down)
    }

    /// Multi-head attention of `query` rows over `kv` rows, output-projected.
    /// `blocked` is row-major `q_rows × kv_rows`.
    fn attention(&self, tape: &mut Tape, ids: AttnIds, query: NodeId, kv: NodeId, blocked: Option<&[bool]>) -> NodeId {
        let q = self.linear(tape, query, ids.q);
        let k = self.linear(tape, kv, ids.k);
        let v = self.linear(tape, kv, ids.v);
        let heads = self.cfg.heads;
        let dh = self.cfg.model_dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let outs: Vec<NodeId> = (0..heads)
            .map(|h| {
                let qh = tape.slice_cols(q, h * dh, dh);
                let kh = tape.slice_cols(k, h * dh, dh);
                let vh = tape.slice_cols(v, h * dh, dh);
                let s = tape.matmul_bt(qh, kh);
                let s = tape.scale(s, scale);
                let a = tape.softmax(s, blocked);
                tape.matmul(a, vh)
            })
            .collect();
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs) };
        self.linear(tape, cat, ids.o)
    }

    /// Row-wise two-layer map from raw patch width to model width.
    pub fn project_on(&self, tape: &mut Tape, raw: &Matrix) -> Result<NodeId, ModelError> {
        let (first, second) = self
            .layout
            .projection
            .ok_or_else(|| ModelError::InvalidConfig("fusion strategy 'none' has no projection".into()))?;
        if raw.cols() != self.cfg.image_dim {
            return Err(ModelError::ShapeMismatch {
                what: "raw image patches".into(),
                expected: (raw.rows(), self.cfg.image_dim),
                actual: raw.shape(),
            });
        }
        let x = tape.constant(raw.clone());
        let h = self.linear(tape, x, first);
        let h = tape.gelu(h);
        Ok(self.linear(tape, h, second))
    }

    pub fn project_patches(&self, raw: &Matrix) -> Result<Matrix, ModelError> {
        let mut tape = Tape::new();
        let out = self.project_on(&mut tape, raw)?;
        Ok(tape.value(out).clone())
    }

    /// Fusion sub-layer of encoder layer `layer`: skip rows pass through
    /// untouched, attend rows cross-attend to their own image.
    pub fn fusion_on(
        &self,
        tape: &mut Tape,
        layer: usize,
        states: NodeId,
        projected: &BTreeMap<usize, NodeId>,
        assign: &FusionAssignment,
    ) -> Result<NodeId, ModelError> {
        let Some(ids) = self.layout.encoder.get(layer).and_then(|l| l.fusion) else {
            return Ok(states);
        };
        let groups = assign.groups();
        if groups.is_empty() {
            return Ok(states);
        }
        let mut new_rows = Vec::with_capacity(groups.len());
        let mut idx = Vec::with_capacity(assign.len());
        for (image, tokens) in groups {
            let kv = *projected.get(&image).ok_or(ModelError::UnprojectedImage(image))?;
            let q = tape.gather_rows(states, &tokens);
            let rows = match self.cfg.fusion_norm {
                FusionNorm::Pre => {
                    let qn = self.norm(tape, q, ids.norm);
                    let a = self.attention(tape, ids.attn, qn, kv, None);
                    tape.add(q, a)
                }
                FusionNorm::Post => {
                    let a = self.attention(tape, ids.attn, q, kv, None);
                    let r = tape.add(q, a);
                    self.norm(tape, r, ids.norm)
                }
            };
            new_rows.push(rows);
            idx.extend(tokens);
        }
        let rows = if new_rows.len() == 1 { new_rows[0] } else { tape.concat_rows(&new_rows) };
        Ok(tape.replace_rows(states, rows, &idx))
    }

    /// Standalone fusion forward on already-projected images.
    pub fn fusion_layer_forward(
        &self,
        layer: usize,
        states: &Matrix,
        projected: &[Matrix],
        assign: &FusionAssignment,
    ) -> Result<Matrix, ModelError> {
        if assign.len() != states.rows() {
            return Err(ModelError::AssignmentMismatch {
                tokens: states.rows(),
                entries: assign.len(),
            });
        }
        let mut tape = Tape::new();
        let s = tape.constant(states.clone());
        let mut nodes = BTreeMap::new();
        for k in assign.used_images() {
            let m = projected.get(k).ok_or(ModelError::UnprojectedImage(k))?;
            nodes.insert(k, tape.constant(m.clone()));
        }
        let out = self.fusion_on(&mut tape, layer, s, &nodes, assign)?;
        Ok(tape.value(out).clone())
    }

    fn check_len(&self, len: usize) -> Result<(), ModelError> {
        if len > self.cfg.max_len {
            return Err(ModelError::LengthOverflow {
                len,
                max: self.cfg.max_len,
            });
        }
        Ok(())
    }

    fn embed(&self, tape: &mut Tape, ids: &[u32], pos_table: usize) -> NodeId {
        let tok = self.p(tape, self.layout.tok_emb);
        let pos = self.p(tape, pos_table);
        let idx: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        let e = tape.gather_rows(tok, &idx);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let p = tape.gather_rows(pos, &positions);
        tape.add(e, p)
    }

    pub fn encode_on(
        &self,
        tape: &mut Tape,
        src: &[u32],
        images: &[Matrix],
        assign: &FusionAssignment,
    ) -> Result<EncoderOut, ModelError> {
        self.check_len(src.len())?;
        if assign.len() != src.len() {
            return Err(ModelError::AssignmentMismatch {
                tokens: src.len(),
                entries: assign.len(),
            });
        }
        if let Some(&bad) = src.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(ModelError::InvalidConfig(format!("token id {bad} outside vocabulary")));
        }
        let strategy = self.cfg.fusion_strategy;
        let mut projected = BTreeMap::new();
        if strategy != FusionStrategy::None {
            for k in assign.used_images() {
                let raw = images.get(k).ok_or(ModelError::UnprojectedImage(k))?;
                projected.insert(k, self.project_on(tape, raw)?);
            }
        }

        let mut x = self.embed(tape, src, self.layout.enc_pos);
        let mut key_blocked: Vec<bool> = src.iter().map(|&t| t == PAD).collect();
        let mut prefix_rows = 0;
        if strategy == FusionStrategy::SelfAttentionConcat && !projected.is_empty() {
            let mut parts: Vec<NodeId> = projected.values().copied().collect();
            prefix_rows = parts.iter().map(|&n| tape.value(n).rows()).sum();
            parts.push(x);
            x = tape.concat_rows(&parts);
            let mut blocked = vec![false; prefix_rows];
            blocked.extend(key_blocked);
            key_blocked = blocked;
        }
        let mask = broadcast_mask(&key_blocked, key_blocked.len());

        for (l, ids) in self.layout.encoder.iter().enumerate() {
            let a = self.attention(tape, ids.self_attn, x, x, Some(&mask));
            let r = tape.add(x, a);
            let mut h = self.norm(tape, r, ids.norm1);
            if ids.fusion.is_some() {
                h = self.fusion_on(tape, l, h, &projected, assign)?;
            }
            let f = self.ffn(tape, h, ids.ffn);
            let r = tape.add(h, f);
            x = self.norm(tape, r, ids.norm2);
        }
        if prefix_rows > 0 {
            x = tape.slice_rows(x, prefix_rows, src.len());
        }

        let mut blocked: Vec<bool> = src.iter().map(|&t| t == PAD).collect();
        if strategy == FusionStrategy::ConcatEncoderOutput && !projected.is_empty() {
            let mut parts = vec![x];
            parts.extend(projected.values().copied());
            let extra: usize = projected.values().map(|&n| tape.value(n).rows()).sum();
            x = tape.concat_rows(&parts);
            blocked.extend(std::iter::repeat_n(false, extra));
        }
        Ok(EncoderOut { memory: x, blocked })
    }

    /// Teacher-forced decoder over `tgt_in`; returns `len(tgt_in) × vocab` logits.
    pub fn decode_on(&self, tape: &mut Tape, enc: &EncoderOut, tgt_in: &[u32]) -> Result<NodeId, ModelError> {
        self.check_len(tgt_in.len())?;
        let t = tgt_in.len();
        let mut self_blocked = vec![false; t * t];
        for r in 0..t {
            for c in 0..t {
                self_blocked[r * t + c] = c > r || (tgt_in[c] == PAD && c != r);
            }
        }
        let cross_blocked = broadcast_mask(&enc.blocked, t);
        let mut y = self.embed(tape, tgt_in, self.layout.dec_pos);
        for ids in &self.layout.decoder {
            let a = self.attention(tape, ids.self_attn, y, y, Some(&self_blocked));
            let r = tape.add(y, a);
            let h = self.norm(tape, r, ids.norm1);
            let c = self.attention(tape, ids.cross_attn, h, enc.memory, Some(&cross_blocked));
            let r = tape.add(h, c);
            let h = self.norm(tape, r, ids.norm2);
            let f = self.ffn(tape, h, ids.ffn);
            let r = tape.add(h, f);
            y = self.norm(tape, r, ids.norm3);
        }
        Ok(self.linear(tape, y, self.layout.out))
    }

    pub fn encode(&self, src: &[u32], images: &[Matrix], assign: &FusionAssignment) -> Result<Encoded, ModelError> {
        let mut tape = Tape::new();
        let enc = self.encode_on(&mut tape, src, images, assign)?;
        Ok(Encoded {
            memory: tape.value(enc.memory).clone(),
            blocked: enc.blocked,
        })
    }

    /// Final encoder states (`T × d`), image rows excluded.
    pub fn encoder_forward(&self, src: &[u32], images: &[Matrix], assign: &FusionAssignment) -> Result<Matrix, ModelError> {
        let enc = self.encode(src, images, assign)?;
        let d = self.cfg.model_dim;
        Ok(Matrix::from_vec(src.len(), d, enc.memory.data()[..src.len() * d].to_vec()))
    }

    /// Logits over the vocabulary for the token following `prefix`.
    pub fn next_token_logits(&self, enc: &Encoded, prefix: &[u32]) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let memory = tape.constant(enc.memory.clone());
        let out = EncoderOut {
            memory,
            blocked: enc.blocked.clone(),
        };
        let logits = self.decode_on(&mut tape, &out, prefix)?;
        let v = tape.value(logits);
        Ok(v.row(v.rows() - 1).to_vec())
    }

    /// Logits for every decoder position of `tgt_in` (teacher forcing).
    pub fn seq2seq_forward(
        &self,
        src: &[u32],
        images: &[Matrix],
        assign: &FusionAssignment,
        tgt_in: &[u32],
    ) -> Result<Matrix, ModelError> {
        let mut tape = Tape::new();
        let enc = self.encode_on(&mut tape, src, images, assign)?;
        let logits = self.decode_on(&mut tape, &enc, tgt_in)?;
        Ok(tape.value(logits).clone())
    }

    /// Builds the summed smoothed cross-entropy of `batch` on `tape`; returns
    /// the mean-loss node and the number of scored positions.
    pub fn batch_loss_on(&self, tape: &mut Tape, batch: &[Example], smoothing: f64) -> Result<(NodeId, usize), ModelError> {
        let mut sums = Vec::with_capacity(batch.len());
        let mut count = 0;
        for ex in batch {
            if ex.tgt.len() < 2 {
                continue;
            }
            let enc = self.encode_on(tape, &ex.src, &ex.images, &ex.assign)?;
            let tgt_in = &ex.tgt[..ex.tgt.len() - 1];
            let logits = self.decode_on(tape, &enc, tgt_in)?;
            let targets: Vec<Option<usize>> = ex.tgt[1..]
                .iter()
                .map(|&t| (t != PAD).then_some(t as usize))
                .collect();
            count += targets.iter().flatten().count();
            sums.push(tape.smoothed_xent(logits, &targets, smoothing));
        }
        if sums.is_empty() || count == 0 {
            return Err(ModelError::InvalidConfig("batch has no scored target positions".into()));
        }
        let mut total = sums[0];
        for &s in &sums[1..] {
            total = tape.add(total, s);
        }
        Ok((tape.scale(total, 1.0 / count as f64), count))
    }

    pub fn batch_loss(&self, batch: &[Example], smoothing: f64) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let (loss, _) = self.batch_loss_on(&mut tape, batch, smoothing)?;
        Ok(tape.value(loss).get(0, 0))
    }

    /// Mean loss and exact gradients for every parameter, ordered like
    /// [`ParamSet`]. Partitions in `frozen` get identically zero gradients.
    pub fn param_gradients(
        &self,
        batch: &[Example],
        smoothing: f64,
        frozen: &[Partition],
    ) -> Result<(f64, Vec<Matrix>), ModelError> {
        let mut tape = Tape::new();
        let (loss, _) = self.batch_loss_on(&mut tape, batch, smoothing)?;
        let loss_value = tape.value(loss).get(0, 0);
        let mut grads: Vec<Matrix> = self
            .params
            .iter()
            .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
            .collect();
        for (pid, g) in tape.backward(loss).entries {
            grads[pid.0] = g;
        }
        for (p, g) in self.params.iter().zip(grads.iter_mut()) {
            if frozen.contains(&p.partition) {
                g.data_mut().fill(0.0);
            } else if !g.is_finite() {
                return Err(ModelError::NonFiniteGradient(p.name.clone()));
            }
        }
        Ok((loss_value, grads))
    }

    /// Teacher-forced argmax accuracy over scored positions, restricted to
    /// positions where `select(position_in_target)` holds.
    pub fn teacher_forced_accuracy<F>(&self, batch: &[Example], select: F) -> Result<f64, ModelError>
    where
        F: Fn(usize, usize) -> bool,
    {
        let (mut hit, mut total) = (0usize, 0usize);
        for ex in batch {
            let tgt_in = &ex.tgt[..ex.tgt.len() - 1];
            let logits = self.seq2seq_forward(&ex.src, &ex.images, &ex.assign, tgt_in)?;
            for (i, &gold) in ex.tgt[1..].iter().enumerate() {
                if gold == PAD || !select(i + 1, ex.tgt.len()) {
                    continue;
                }
                total += 1;
                if argmax(logits.row(i)) == gold as usize {
                    hit += 1;
                }
            }
        }
        Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
    }
}

/// Same key mask for each of `rows` query rows.
fn broadcast_mask(key_blocked: &[bool], rows: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(rows * key_blocked.len());
    for _ in 0..rows {
        out.extend_from_slice(key_blocked);
    }
    out
}

/// Index of the largest value; the earliest wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean label-smoothed cross-entropy over non-pad targets.
pub fn smoothed_loss(logits: &Matrix, targets: &[u32], smoothing: f64) -> f64 {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let t: Vec<Option<usize>> = targets.iter().map(|&t| (t != PAD).then_some(t as usize)).collect();
    let n = t.iter().flatten().count();
    let s = tape.smoothed_xent(l, &t, smoothing);
    if n == 0 {
        0.0
    } else {
        tape.value(s).get(0, 0) / n as f64
    }
}

#[cfg(test)]
mod tests;
