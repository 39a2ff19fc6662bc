//! Model checkpoint serialization.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LLMC" | version u32 | config_len u32 | config JSON | tensor_count u32
//! per tensor: name_len u16 | name | rank u8 | extents u32[rank] | f32 data
//! ```
//!
//! Bit-exact across platforms; `load(save(w))` reproduces every tensor bit
//! for bit.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights};
use crate::tensor::Tensor;
use std::collections::HashMap;
use std::path::Path;

const MAGIC: &[u8; 4] = b"LLMC";
const VERSION: u32 = 1;

pub(crate) fn to_bytes(weights: &ModelWeights, config: &ModelConfig) -> Result<Vec<u8>> {
    let config_json = serde_json::to_string(config)
        .map_err(|e| Error::CheckpointFormat { field: "config", detail: e.to_string() })?;
    let named = weights.named();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(config_json.as_bytes());
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, tensor) in named {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(tensor.shape().len() as u8);
        for &e in tensor.shape() {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CheckpointFormat {
                field,
                detail: format!(
                    "file truncated: needed {n} bytes at offset {}, have {}",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, field: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }
}

pub(crate) fn from_bytes(bytes: &[u8]) -> Result<(ModelWeights, ModelConfig)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::CheckpointFormat {
            field: "magic",
            detail: "expected LLMC".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::CheckpointFormat {
            field: "version",
            detail: format!("unsupported version {version}"),
        });
    }
    let config_len = r.u32("config_len")? as usize;
    let config_json = std::str::from_utf8(r.take(config_len, "config")?)
        .map_err(|e| Error::CheckpointFormat { field: "config", detail: e.to_string() })?;
    let config: ModelConfig = serde_json::from_str(config_json)
        .map_err(|e| Error::CheckpointFormat { field: "config", detail: e.to_string() })?;
    config.validate().map_err(|e| Error::CheckpointFormat {
        field: "config",
        detail: e.to_string(),
    })?;

    let count = r.u32("tensor_count")? as usize;
    let mut tensors: HashMap<String, Tensor> = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16("tensor.name")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor.name")?)
            .map_err(|e| Error::CheckpointFormat { field: "tensor.name", detail: e.to_string() })?
            .to_string();
        let rank = r.take(1, "tensor.rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("tensor.extents")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4, "tensor.data")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut t = Tensor::new(shape, data).map_err(|e| Error::CheckpointFormat {
            field: "tensor.extents",
            detail: format!("{name}: {e}"),
        })?;
        t.set_requires_grad(true);
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::CheckpointFormat {
                field: "tensor.name",
                detail: format!("duplicate tensor {name}"),
            });
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::CheckpointFormat {
            field: "tensor_count",
            detail: format!("{} trailing bytes after the last tensor", bytes.len() - r.pos),
        });
    }

    // Assemble in canonical order, verifying shape against the config.
    let template = ModelWeights::init(&config, 0).map_err(|e| Error::CheckpointFormat {
        field: "config",
        detail: e.to_string(),
    })?;
    let expected: Vec<(String, Vec<usize>)> = template
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if expected.len() != count {
        return Err(Error::CheckpointFormat {
            field: "tensor_count",
            detail: format!("config needs {} tensors, file holds {count}", expected.len()),
        });
    }
    let mut weights = template;
    for (name, slot) in weights.named_mut() {
        let loaded = tensors.remove(&name).ok_or_else(|| Error::CheckpointFormat {
            field: "tensor.name",
            detail: format!("missing tensor {name}"),
        })?;
        let want = expected.iter().find(|(n, _)| *n == name).map(|(_, s)| s).unwrap();
        if loaded.shape() != want.as_slice() {
            return Err(Error::CheckpointFormat {
                field: "tensor.extents",
                detail: format!("{name}: file says {:?}, config needs {:?}", loaded.shape(), want),
            });
        }
        *slot = loaded;
    }
    Ok((weights, config))
}

/// Writes weights and config to `path` in the binary checkpoint format.
pub fn save_checkpoint(
    weights: &ModelWeights,
    config: &ModelConfig,
    path: impl AsRef<Path>,
) -> Result<()> {
    std::fs::write(path, to_bytes(weights, config)?)?;
    Ok(())
}

/// Reads a checkpoint back; the inverse of [`save_checkpoint`].
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelWeights, ModelConfig)> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes)
}
