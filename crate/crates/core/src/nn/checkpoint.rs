//! Binary checkpoint format.
//!
//! ```text
//! magic     8 bytes  "FLOWCKPT"
//! version   u32
//! config    u32 length + JSON ModelConfig
//! metadata  u32 length + UTF-8 (free-form, usually JSON)
//! tensors   u32 count, then per tensor:
//!             u16 name length + name, u8 rank, rank x u64 dims
//! values    f64 for every tensor in table order
//! ```
//!
//! All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::model::{ForecastModel, ModelConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FLOWCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: Default::default(),
        message: msg.into(),
    }
}

pub fn write_checkpoint<W: Write>(mut w: W, model: &ForecastModel, metadata: &str) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let config = serde_json::to_vec(&model.config)?;
    w.write_all(&(config.len() as u32).to_le_bytes())?;
    w.write_all(&config)?;
    w.write_all(&(metadata.len() as u32).to_le_bytes())?;
    w.write_all(metadata.as_bytes())?;
    let tensors = model.params.tensors();
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, shape, _) in &tensors {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[shape.len() as u8])?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
    }
    for (_, _, values) in &tensors {
        for v in *values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| bad(format!("truncated: {e}")))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_bytes<R: Read>(r: &mut R, len: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|e| bad(format!("truncated: {e}")))?;
    Ok(buf)
}

/// Returns the model and the metadata string stored with it.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(ForecastModel, String)> {
    if &read_array::<8, _>(&mut r)? != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let len = read_u32(&mut r)? as usize;
    let config: ModelConfig = serde_json::from_slice(&read_bytes(&mut r, len)?)?;
    let len = read_u32(&mut r)? as usize;
    let metadata = String::from_utf8(read_bytes(&mut r, len)?).map_err(|_| bad("metadata is not UTF-8"))?;
    let mut model = ForecastModel::init(config, 0)?;
    let expected: Vec<(String, Vec<usize>)> = model.params.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
    let count = read_u32(&mut r)? as usize;
    if count != expected.len() {
        return Err(bad(format!("{count} tensors, expected {}", expected.len())));
    }
    for (name, shape) in &expected {
        let len = u16::from_le_bytes(read_array(&mut r)?) as usize;
        let found = String::from_utf8(read_bytes(&mut r, len)?).map_err(|_| bad("tensor name is not UTF-8"))?;
        let rank = read_array::<1, _>(&mut r)?[0] as usize;
        let dims = (0..rank)
            .map(|_| Ok(u64::from_le_bytes(read_array(&mut r)?) as usize))
            .collect::<Result<Vec<_>>>()?;
        if &found != name || &dims != shape {
            return Err(bad(format!("tensor {found} {dims:?} does not match {name} {shape:?}")));
        }
    }
    for values in model.params.tensors_mut() {
        for v in values.iter_mut() {
            *v = f64::from_le_bytes(read_array(&mut r)?);
        }
    }
    if !model.params.all_finite() {
        return Err(bad("non-finite parameter values"));
    }
    Ok((model, metadata))
}

pub fn save_checkpoint(path: &Path, model: &ForecastModel, metadata: &str) -> Result<()> {
    let file = File::create(path)?;
    write_checkpoint(BufWriter::new(file), model, metadata).map_err(|e| with_path(e, path))
}

pub fn load_checkpoint(path: &Path) -> Result<(ForecastModel, String)> {
    let file = File::open(path).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    read_checkpoint(BufReader::new(file)).map_err(|e| with_path(e, path))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Checkpoint { message, .. } => Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ForecastModel {
        ForecastModel::init(
            ModelConfig {
                lookback: 3,
                hidden: 5,
                heads: 2,
                head_dim: 3,
                ..ModelConfig::default()
            },
            11,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let model = small();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &model, "{\"q\":0.1}").unwrap();
        let (back, meta) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, model);
        assert_eq!(meta, "{\"q\":0.1}");
    }

    #[test]
    fn corrupted_magic_and_truncation_are_rejected() {
        let model = small();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &model, "").unwrap();
        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(read_checkpoint(bad_magic.as_slice()).is_err());
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
    }
}
