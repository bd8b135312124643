//! `VXCK` parameter files: a header `{magic, version, record count}` followed by
//! records `{name length, name, rank, extents, f32 data}`, all little-endian.
//! Buffers are stored as records whose name starts with `@`.

use std::io::{Read, Write};
use std::path::Path;

use crate::element::Element;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::TensorError;

pub const MAGIC: &[u8; 4] = b"VXCK";
pub const VERSION: u32 = 1;
const BUFFER_PREFIX: char = '@';

pub fn write<T: Element, W: Write>(store: &ParamStore<T>, mut out: W) -> Result<(), TensorError> {
    let records: Vec<(String, &Tensor<T>)> = store
        .iter()
        .map(|(k, v)| (k.to_string(), v))
        .chain(store.buffers().map(|(k, v)| (format!("{BUFFER_PREFIX}{k}"), v)))
        .collect();
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(records.len() as u32).to_le_bytes())?;
    for (name, t) in records {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut bytes = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        out.write_all(&bytes)?;
    }
    Ok(())
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32, TensorError> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b).map_err(|e| TensorError::Checkpoint(format!("truncated file: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read<T: Element, R: Read>(mut input: R) -> Result<ParamStore<T>, TensorError> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(|_| TensorError::Checkpoint("missing header".into()))?;
    if &magic != MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut input)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = read_u32(&mut input)? as usize;
        if len > 4096 {
            return Err(TensorError::Checkpoint(format!("implausible name length {len}")));
        }
        let mut name = vec![0u8; len];
        input.read_exact(&mut name).map_err(|e| TensorError::Checkpoint(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| TensorError::Checkpoint("name is not UTF-8".into()))?;
        let rank = read_u32(&mut input)? as usize;
        if rank > 8 {
            return Err(TensorError::Checkpoint(format!("implausible rank {rank} for `{name}`")));
        }
        let shape = (0..rank).map(|_| read_u32(&mut input).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let numel = numel.filter(|&n| n <= 1 << 30).ok_or_else(|| TensorError::Checkpoint(format!("implausible shape {shape:?}")))?;
        let mut bytes = vec![0u8; numel * 4];
        input.read_exact(&mut bytes).map_err(|e| TensorError::Checkpoint(format!("truncated data for `{name}`: {e}")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        let t = Tensor::new(&shape, data)?;
        match name.strip_prefix(BUFFER_PREFIX) {
            Some(buffer) => store.insert_buffer(buffer, t),
            None => store.insert(name, t),
        }
    }
    Ok(store)
}

/// Writes to a sibling temp file and renames it into place.
pub fn save<T: Element>(store: &ParamStore<T>, path: &Path) -> Result<(), TensorError> {
    let mut bytes = Vec::new();
    write(store, &mut bytes)?;
    let tmp = path.with_extension("vxck.tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load<T: Element>(path: &Path) -> Result<ParamStore<T>, TensorError> {
    let bytes = std::fs::read(path)?;
    read(bytes.as_slice())
}
