//! Binary checkpoint layout (all integers u64 little-endian, data f64 LE):
//!
//! ```text
//! "GNDACKPT"
//! count
//! count x { name_len, name bytes, ndim, dims[ndim], data[prod(dims)] }
//! step
//! 2*count x { same record, named "<param>.m" then "<param>.v" }
//! ```

use std::io::{Read, Write};

use super::{AdError, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GNDACKPT";

pub fn write_checkpoint<W: Write>(store: &ParamStore, mut w: W) -> Result<(), AdError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for (name, p) in store.entries() {
        write_record(&mut w, name, &p.value)?;
    }
    w.write_all(&store.step.to_le_bytes())?;
    w.write_all(&(2 * store.len() as u64).to_le_bytes())?;
    for (name, p) in store.entries() {
        write_record(&mut w, &format!("{name}.m"), &p.m)?;
        write_record(&mut w, &format!("{name}.v"), &p.v)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamStore, AdError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(AdError::Checkpoint(format!("bad magic {magic:?}")));
    }
    let mut store = ParamStore::new();
    let count = read_u64(&mut r)?;
    for _ in 0..count {
        let (name, t) = read_record(&mut r)?;
        store.insert(name, t)?;
    }
    store.step = read_u64(&mut r)?;
    let moments = read_u64(&mut r)?;
    for _ in 0..moments {
        let (name, t) = read_record(&mut r)?;
        let (base, slot) = name
            .rsplit_once('.')
            .ok_or_else(|| AdError::Checkpoint(format!("bad optimizer record `{name}`")))?;
        let p = store.param_mut(base).ok_or_else(|| AdError::UnknownParam(base.to_string()))?;
        if t.shape() != p.value.shape() {
            return Err(AdError::Checkpoint(format!("shape mismatch for `{name}`")));
        }
        match slot {
            "m" => p.m = t,
            "v" => p.v = t,
            _ => return Err(AdError::Checkpoint(format!("bad optimizer record `{name}`"))),
        }
    }
    Ok(store)
}

pub(crate) fn write_record<W: Write>(w: &mut W, name: &str, t: &Tensor) -> Result<(), AdError> {
    w.write_all(&(name.len() as u64).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_record<R: Read>(r: &mut R) -> Result<(String, Tensor), AdError> {
    let len = read_u64(r)? as usize;
    if len > 1 << 16 {
        return Err(AdError::Checkpoint(format!("implausible name length {len}")));
    }
    let mut name = vec![0u8; len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|e| AdError::Checkpoint(e.to_string()))?;
    let ndim = read_u64(r)? as usize;
    if ndim > 8 {
        return Err(AdError::Checkpoint(format!("implausible rank {ndim} for `{name}`")));
    }
    let shape = (0..ndim).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
    let numel: usize = shape.iter().product();
    let mut bytes = vec![0u8; numel * 8];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((name, Tensor::new(shape, data)?))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
