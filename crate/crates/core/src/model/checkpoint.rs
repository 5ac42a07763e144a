//! Binary checkpoint container.
//!
//! ```text
//! b"LAUC"            magic
//! u32 LE             format version (1)
//! u32 LE             header length in bytes
//! header             UTF-8 JSON: {"config", "vocab", "step", "tensors": [{name, component, shape}]}
//! payload            every tensor's values as f32 LE, in header order
//! ```
//!
//! Parameter values are kept on the f32 grid, so save/load is bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Component, ModelConfig, ModelError, ModelParams, Result, Tensor};
use crate::corpus::Vocabulary;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LAUC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub vocab: Option<Vocabulary>,
    pub step: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Option<Vocabulary>,
    step: Option<u64>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    component: Component,
    shape: Vec<usize>,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

pub fn write_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let header = Header {
        config: ckpt.params.config.clone(),
        vocab: ckpt.vocab.clone(),
        step: ckpt.step,
        tensors: ckpt
            .params
            .tensors()
            .iter()
            .map(|t| TensorEntry {
                name: t.name.clone(),
                component: t.component,
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
    let mut out = Vec::with_capacity(12 + header.len() + 4 * ckpt.params.num_parameters());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for t in ckpt.params.tensors() {
        for &v in &t.data {
            let narrow = v as f32;
            if f64::from(narrow) != v {
                return Err(bad(format!(
                    "tensor '{}' holds {v}, not representable as f32",
                    t.name
                )));
            }
            out.extend_from_slice(&narrow.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("missing LAUC magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = 12usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[12..header_end])
        .map_err(|e| bad(format!("bad header: {e}")))?;
    let mut payload = bytes[header_end..].chunks_exact(4);
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let data: Vec<f64> = payload
            .by_ref()
            .take(n)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        if data.len() != n {
            return Err(bad(format!("truncated payload in tensor '{}'", entry.name)));
        }
        tensors.push(Tensor {
            name: entry.name,
            component: entry.component,
            shape: entry.shape,
            data,
        });
    }
    if payload.next().is_some() || !payload.remainder().is_empty() {
        return Err(bad("trailing bytes after payload"));
    }
    let params = ModelParams::from_tensors(header.config, tensors)?;
    if let Some(v) = &header.vocab {
        if v.len() != params.config.vocab_size {
            return Err(bad(format!(
                "vocabulary has {} tokens but config says {}",
                v.len(),
                params.config.vocab_size
            )));
        }
    }
    Ok(Checkpoint {
        params,
        vocab: header.vocab,
        step: header.step,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = write_checkpoint(ckpt)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(&fs::read(path)?)
}
