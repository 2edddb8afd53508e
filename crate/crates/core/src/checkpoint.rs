//! Binary checkpoint format.
//!
//! Layout (little-endian): magic `MUGN1`; `u32` tensor count; then per
//! tensor `u16` name length, UTF-8 name, `u8` rank, `rank × u32` dims and
//! `product(dims) × f32` data.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 5] = b"MUGN1";

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    w.write_all(MAGIC)?;
    let count = u32::try_from(tensors.len()).map_err(|_| Error::Checkpoint("too many tensors".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, t) in tensors {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Checkpoint("rank > 255".into()))?;
        w.write_all(&[rank])?;
        for &d in t.dims() {
            let d = u32::try_from(d).map_err(|_| Error::Checkpoint("extent > u32".into()))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
    Ok(b)
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<f32>)>> {
    let magic: [u8; 5] = read_exact(&mut r)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a MUGN1 checkpoint".into()));
    }
    let count = u32::from_le_bytes(read_exact(&mut r)?);
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Checkpoint(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let [rank] = read_exact::<_, 1>(&mut r)?;
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            dims.push(u32::from_le_bytes(read_exact(&mut r)?) as usize);
        }
        let n: usize = dims.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)
            .map_err(|e| Error::Checkpoint(format!("truncated data for `{name}`: {e}")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(&dims, data).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

/// Save every parameter and buffer of `store` (converted to f32).
pub fn save<T: Real>(store: &ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    let tensors: Vec<(String, Tensor<f32>)> =
        store.named_tensors().map(|(n, t)| (n.to_string(), t.cast())).collect();
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_tensors(&mut w, &tensors)?;
    w.flush()?;
    Ok(())
}

/// Load a checkpoint into an already-built store. Every stored tensor must
/// be present in the checkpoint with matching dims.
pub fn load<T: Real>(store: &mut ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::open(path)?;
    let tensors = read_tensors(std::io::BufReader::new(file))?;
    if tensors.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model expects {}",
            tensors.len(),
            store.len()
        )));
    }
    for (name, t) in tensors {
        store.set(&name, t.cast())?;
    }
    Ok(())
}
