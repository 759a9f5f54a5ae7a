//! Model checkpoints.
//!
//! Layout: the 8 bytes `EDITCKPT`, the header length as a little-endian
//! `u64`, a UTF-8 JSON header, then every tensor as little-endian `f32`
//! values in header order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DiTConfig, ElasticDit};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"EDITCKPT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the data section.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub dtype: String,
    pub config: DiTConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn write<W: Write>(model: &ElasticDit, mut out: W) -> Result<()> {
    let mut tensors = Vec::with_capacity(model.params.len());
    let mut offset = 0;
    for (_, p) in model.params.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
        });
        offset += 4 * p.value.len();
    }
    let header = serde_json::to_vec(&Header {
        dtype: "f32".into(),
        config: model.cfg.clone(),
        tensors,
    })?;
    out.write_all(MAGIC)?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    let mut data = Vec::with_capacity(offset);
    for (_, p) in model.params.iter() {
        for &v in p.value.as_slice() {
            data.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out.write_all(&data)?;
    Ok(())
}

pub fn read<R: Read>(mut input: R) -> Result<ElasticDit> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = usize::try_from(u64::from_le_bytes(len))
        .map_err(|_| Error::Checkpoint("header length overflows".into()))?;
    let mut header = vec![0u8; len];
    input.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;
    if header.dtype != "f32" {
        return Err(Error::Checkpoint(format!("unsupported dtype {}", header.dtype)));
    }
    let mut data = Vec::new();
    input.read_to_end(&mut data)?;

    let mut model = ElasticDit::new(header.config.clone(), 0)?;
    if header.tensors.len() != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            model.params.len(),
            header.tensors.len()
        )));
    }
    for entry in &header.tensors {
        let id = model
            .params
            .find(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {}", entry.name)))?;
        let n: usize = entry.shape.iter().product();
        let bytes = data
            .get(entry.offset..entry.offset + 4 * n)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} runs past the data", entry.name)))?;
        let values = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let t = Tensor::new(&entry.shape, values)
            .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", entry.name)))?;
        model
            .params
            .set(id, t)
            .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", entry.name)))?;
    }
    Ok(model)
}

pub fn save(model: &ElasticDit, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write(model, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ElasticDit> {
    read(fs::File::open(path)?)
}

/// Rounds every parameter to `f32`, the precision checkpoints store.
pub fn round_to_f32(model: &mut ElasticDit) {
    let flat: Vec<f64> = model.params.to_flat().iter().map(|&v| v as f32 as f64).collect();
    model.params.load_flat(&flat).expect("same parameter count");
}
