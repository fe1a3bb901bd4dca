//! Single-file checkpoint container: a little-endian u64 header length, a
//! JSON header carrying an arbitrary config document plus tensor
//! names/shapes/offsets, then raw little-endian f32 tensor data.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{ParamStore, Tensor};

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload section.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: serde_json::Value,
    tensors: Vec<TensorMeta>,
}

pub fn save(
    path: &Path,
    config: &serde_json::Value,
    params: &ParamStore,
) -> Result<(), CheckpointError> {
    let mut metas = Vec::with_capacity(params.len());
    let mut offset = 0u64;
    for (name, t) in params.iter() {
        metas.push(TensorMeta {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 4 * t.data().len() as u64;
    }
    let header = Header { config: config.clone(), tensors: metas };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (_, t) in params.iter() {
        // Standard layout so iteration order matches the declared shape.
        let data = t.data().as_standard_layout();
        for &v in data.iter() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(serde_json::Value, ParamStore), CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut len_buf = [0u8; 8];
    r.read_exact(&mut len_buf)?;
    let header_len = u64::from_le_bytes(len_buf) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;

    let mut params = ParamStore::new();
    let mut expected_offset = 0u64;
    for meta in &header.tensors {
        if meta.offset != expected_offset {
            return Err(CheckpointError::Malformed(format!(
                "tensor {} at offset {}, expected {}",
                meta.name, meta.offset, expected_offset
            )));
        }
        let n: usize = meta.shape.iter().product();
        let mut vals = Vec::with_capacity(n);
        let mut buf = [0u8; 4];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            vals.push(f32::from_le_bytes(buf) as f64);
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&meta.shape), vals)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        params.add(&meta.name, Tensor::new(arr));
        expected_offset += 4 * n as u64;
    }
    Ok((header.config, params))
}
