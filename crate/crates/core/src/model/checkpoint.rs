//! Named-tensor checkpoint container.
//!
//! Little-endian layout:
//!
//! ```text
//! "VACK" | u32 version=1
//! u32 config_len | config as `key=value` lines (UTF-8)
//! u32 vocab_len  | vocabulary, one token per line (UTF-8)
//! u32 tensor_count
//! tensor_count × ( u16 name_len | name | u8 partition | u32 rows | u32 cols )
//! tensor data in header order, rows × cols × f32, row-major
//! ```
//!
//! Partition codes: 0 backbone, 1 fusion, 2 projection.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use super::{Model, ModelConfig, ModelError, Param, ParamSet, Partition};
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VACK";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vec<String>,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn from_model(model: &Model, vocab: &[String]) -> Self {
        Self {
            config: model.config().clone(),
            vocab: vocab.to_vec(),
            params: model.params().clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg: String = self
            .config
            .to_kv()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        put_block(&mut out, cfg.as_bytes());
        put_block(&mut out, self.vocab.join("\n").as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in self.params.iter() {
            out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(p.partition.code());
            out.extend_from_slice(&(p.value.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(p.value.cols() as u32).to_le_bytes());
        }
        for p in self.params.iter() {
            for &v in p.value.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let n = r.u32()? as usize;
        let cfg_text = std::str::from_utf8(r.take(n)?).map_err(|_| bad("config is not UTF-8"))?;
        let mut kv = BTreeMap::new();
        for line in cfg_text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("config line '{line}'")))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let config = ModelConfig::from_kv(&kv)?;
        let n = r.u32()? as usize;
        let vocab_text = std::str::from_utf8(r.take(n)?).map_err(|_| bad("vocab is not UTF-8"))?;
        let vocab: Vec<String> = if vocab_text.is_empty() {
            Vec::new()
        } else {
            vocab_text.split('\n').map(String::from).collect()
        };
        let count = r.u32()? as usize;
        let mut headers = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| bad("tensor name is not UTF-8"))?
                .to_string();
            let code = r.take(1)?[0];
            let partition = Partition::from_code(code).ok_or_else(|| bad(format!("partition code {code}")))?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            headers.push((name, partition, rows, cols));
        }
        let mut params = Vec::with_capacity(headers.len());
        for (name, partition, rows, cols) in headers {
            let len = rows.checked_mul(cols).and_then(|n| n.checked_mul(4)).ok_or_else(|| bad("tensor too large"))?;
            let data = r
                .take(len)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            params.push(Param {
                name,
                partition,
                value: Matrix::from_vec(rows, cols, data),
            });
        }
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            vocab,
            params: ParamSet::new(params),
        })
    }

    /// Rebuilds the stored model, checking every tensor and partition label.
    pub fn model(&self) -> Result<Model, ModelError> {
        Model::from_params(self.config.clone(), &self.params)
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), ModelError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&ckpt.to_bytes())?;
    tmp.persist(path).map_err(|e| ModelError::Io(e.error))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

fn put_block(out: &mut Vec<u8>, data: &[u8]) {
    out.extend_from_slice(&(data.len() as u32).to_le_bytes());
    out.extend_from_slice(data);
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            bad(format!("truncated: need {} bytes at offset {}, have {}", n, self.pos, self.bytes.len()))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
}
