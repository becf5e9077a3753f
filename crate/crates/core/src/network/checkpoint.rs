//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "TAFCKPT\0"
//! version    u32      1
//! config     u32 length + UTF-8 JSON {"model": ModelConfig, "echo": any}
//! count      u32      number of tensors
//! tensor*    u32 name length, name, u32 rank, u64 dims[rank], f64 values (row-major)
//! ```

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TAFCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    #[serde(default)]
    echo: serde_json::Value,
}

pub fn encode_checkpoint(model: &Model, echo: &serde_json::Value) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        model: model.config.clone(),
        echo: echo.clone(),
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    let tensors = model.params.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(t.nrows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.ncols() as u64).to_le_bytes());
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    cursor: Cursor<&'a [u8]>,
    path: &'a Path,
}

impl Reader<'_> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        self.cursor.read_exact(&mut buf).map_err(|_| Error::UnexpectedEof {
            path: self.path.to_path_buf(),
        })?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn bad(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            msg: msg.into(),
        }
    }
}

/// Decode a checkpoint, returning the model and the echoed run config.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(Model, serde_json::Value)> {
    let mut r = Reader {
        cursor: Cursor::new(bytes),
        path,
    };
    if r.bytes(8)? != CHECKPOINT_MAGIC {
        return Err(r.bad("bad magic, not a checkpoint"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.bad(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(&r.bytes(len)?)?;
    header.model.validate()?;
    let mut params = ModelParams::zeros(&header.model);

    let count = r.u32()? as usize;
    let mut expected = params.tensors_mut();
    if count != expected.len() {
        return Err(r.bad(format!(
            "checkpoint holds {count} tensors, architecture needs {}",
            expected.len()
        )));
    }
    for (name, slot) in expected.iter_mut() {
        let name_len = r.u32()? as usize;
        let stored = String::from_utf8(r.bytes(name_len)?).map_err(|_| r.bad("tensor name is not UTF-8"))?;
        if &stored != name {
            return Err(r.bad(format!("expected tensor {name}, found {stored}")));
        }
        let rank = r.u32()?;
        if rank != 2 {
            return Err(r.bad(format!("tensor {name} has rank {rank}")));
        }
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        if (rows, cols) != slot.dim() {
            return Err(r.bad(format!(
                "tensor {name} has shape {rows}x{cols}, expected {:?}",
                slot.dim()
            )));
        }
        let raw = r.bytes(rows * cols * 8)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        **slot = Array2::from_shape_vec((rows, cols), values).expect("shape checked");
    }
    drop(expected);
    Ok((
        Model {
            config: header.model,
            params,
        },
        header.echo,
    ))
}

pub fn save_checkpoint(model: &Model, echo: &serde_json::Value, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model, echo)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, serde_json::Value)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_every_bit() {
        let model = Model::new(ModelConfig::new(4, 6, 3), 1).unwrap();
        let echo = serde_json::json!({"seed": 1});
        let bytes = encode_checkpoint(&model, &echo).unwrap();
        let (back, echo_back) = decode_checkpoint(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, model);
        assert_eq!(echo_back, echo);
        assert_eq!(encode_checkpoint(&back, &echo).unwrap(), bytes);
    }

    #[test]
    fn truncation_and_corruption_are_detected() {
        let model = Model::new(ModelConfig::new(4, 6, 3), 1).unwrap();
        let bytes = encode_checkpoint(&model, &serde_json::Value::Null).unwrap();
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 3], Path::new("x")),
            Err(Error::UnexpectedEof { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_checkpoint(&bad, Path::new("x")),
            Err(Error::Format { .. })
        ));
    }
}
