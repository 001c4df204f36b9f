//! Single-file checkpoint format.
//!
//! Layout: 8-byte magic, then a JSON manifest (length-prefixed) listing
//! name/shape/dtype/offset per tensor, then one raw little-endian buffer per
//! tensor. The manifest carries a format version and the content hash of the
//! run config that produced the weights; loaders verify both.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Element, ParamStore};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PLABCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    dtype: String,
    config_hash: String,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    byte_len: u64,
}

pub fn save<E: Element>(params: &ParamStore<E>, config_hash: &str, path: &Path) -> Result<()> {
    let width = E::DTYPE.size() as u64;
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0u64;
    for p in params.iter() {
        let byte_len = p.data.len() as u64 * width;
        tensors.push(Entry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            offset,
            byte_len,
        });
        offset += byte_len;
    }
    let manifest = Manifest {
        version: VERSION,
        dtype: E::DTYPE.name().to_string(),
        config_hash: config_hash.to_string(),
        tensors,
    };
    let mjson = serde_json::to_vec(&manifest)?;

    let mut f = std::fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(mjson.len() as u64).to_le_bytes())?;
    f.write_all(&mjson)?;
    let mut payload = Vec::with_capacity(offset as usize);
    for p in params.iter() {
        for &v in &p.data {
            v.write_le(&mut payload);
        }
    }
    f.write_all(&payload)?;
    Ok(())
}

/// Reads the manifest and raw payload without interpreting elements.
fn read_raw(path: &Path) -> Result<(Manifest, Vec<u8>)> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint(format!("{}: truncated header", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {:02x?}",
            path.display(),
            magic
        )));
    }
    let mut lenb = [0u8; 8];
    f.read_exact(&mut lenb)?;
    let mlen = u64::from_le_bytes(lenb) as usize;
    let mut mjson = vec![0u8; mlen];
    f.read_exact(&mut mjson)
        .map_err(|_| Error::Checkpoint(format!("{}: truncated manifest", path.display())))?;
    let manifest: Manifest = serde_json::from_slice(&mjson)?;
    if manifest.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }
    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;
    Ok((manifest, payload))
}

/// The config hash recorded at save time.
pub fn stored_config_hash(path: &Path) -> Result<String> {
    Ok(read_raw(path)?.0.config_hash)
}

/// Load weights into an existing registry. Parameter names and the element
/// type must match; shapes are overwritten (positional tables legitimately
/// change across resolutions).
pub fn load<E: Element>(params: &mut ParamStore<E>, path: &Path) -> Result<String> {
    load_resampling(params, path, |_, shape, data| Ok((shape, data)))
}

/// Load with a per-tensor transform hook: (name, stored shape, stored data)
/// → (shape, data) actually installed. Used for positional-table resampling
/// when transferring weights across input resolutions.
pub fn load_resampling<E, F>(
    params: &mut ParamStore<E>,
    path: &Path,
    mut transform: F,
) -> Result<String>
where
    E: Element,
    F: FnMut(&str, Vec<usize>, Vec<E>) -> Result<(Vec<usize>, Vec<E>)>,
{
    let (manifest, payload) = read_raw(path)?;
    if manifest.dtype != E::DTYPE.name() {
        return Err(Error::Checkpoint(format!(
            "element type mismatch: checkpoint {}, run {}",
            manifest.dtype,
            E::DTYPE.name()
        )));
    }
    let width = E::DTYPE.size();
    for e in &manifest.tensors {
        let start = e.offset as usize;
        let end = start + e.byte_len as usize;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "{}: payload truncated at byte {} (expected {})",
                e.name,
                payload.len(),
                end
            )));
        }
        let data: Vec<E> = payload[start..end]
            .chunks_exact(width)
            .map(E::read_le)
            .collect();
        let (shape, data) = transform(&e.name, e.shape.clone(), data)?;
        params.set_data(&e.name, shape, data)?;
    }
    Ok(manifest.config_hash)
}
