//! Flat parameter container.
//!
//! Layout: the magic bytes `SDE1`, then for each parameter in store order:
//! name length (u32 LE), UTF-8 name bytes, rank (u32 LE), each extent (u32 LE),
//! and the values as 32-bit little-endian floats. The file ends after the last
//! parameter.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SDE1";

fn err<T>(msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Checkpoint(msg.into()))
}

pub fn write_checkpoint<F: Real, W: Write>(store: &ParamStore<F>, mut out: W) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    for (name, t) in store.iter() {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for &x in t.data() {
            out.write_all(&(x.to_f64_lossy() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(buf: &[u8], pos: &mut usize) -> Result<u32> {
    let Some(bytes) = buf.get(*pos..*pos + 4) else {
        return err("truncated file");
    };
    *pos += 4;
    Ok(u32::from_le_bytes(bytes.try_into().unwrap()))
}

/// Reads every `(name, tensor)` record of a checkpoint.
pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    if buf.len() < 4 || &buf[..4] != CHECKPOINT_MAGIC {
        return err("bad magic");
    }
    let mut pos = 4;
    let mut out = Vec::new();
    while pos < buf.len() {
        let n = read_u32(&buf, &mut pos)? as usize;
        let Some(name) = buf.get(pos..pos + n) else {
            return err("truncated name");
        };
        let name = String::from_utf8(name.to_vec()).map_err(|_| TensorError::Checkpoint("name is not UTF-8".into()))?;
        pos += n;
        let rank = read_u32(&buf, &mut pos)? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(&buf, &mut pos).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let Some(raw) = buf.get(pos..pos + 4 * count) else {
            return err(format!("truncated values for {name}"));
        };
        pos += 4 * count;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

/// Overwrites the values of `store` from a checkpoint; names and shapes must
/// match exactly.
pub fn load_into<F: Real>(store: &mut ParamStore<F>, records: &[(String, Tensor<f32>)]) -> Result<()> {
    if records.len() != store.len() {
        return err(format!(
            "checkpoint has {} parameters, model expects {}",
            records.len(),
            store.len()
        ));
    }
    for (name, t) in records {
        let Some(id) = store.id_of(name) else {
            return err(format!("unknown parameter {name}"));
        };
        if store.get(id).shape() != t.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "checkpoint",
                lhs: store.get(id).shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        *store.get_mut(id) = t.cast();
    }
    Ok(())
}

pub fn save<F: Real>(store: &ParamStore<F>, path: &Path) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(store, f)
}

pub fn load<F: Real>(store: &mut ParamStore<F>, path: &Path) -> Result<()> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let records = read_checkpoint(f)?;
    load_into(store, &records)
}
