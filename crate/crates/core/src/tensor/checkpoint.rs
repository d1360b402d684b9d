//! Checkpoint file format.
//!
//! Layout: 8-byte little-endian header length, a JSON object mapping each
//! parameter name to `{shape, dtype, byte_offset, trainable}`, then the raw
//! little-endian IEEE-754 payload. Names are written in sorted order so a
//! rerun produces byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dtype, ParamStore, Scalar};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    shape: Vec<usize>,
    dtype: Dtype,
    byte_offset: usize,
    trainable: bool,
}

pub fn save_checkpoint<S: Scalar>(store: &ParamStore<S>, path: &Path) -> Result<()> {
    let mut header: BTreeMap<String, HeaderEntry> = BTreeMap::new();
    let mut payload: Vec<u8> = Vec::new();
    for (name, entry) in store.iter() {
        header.insert(
            name.clone(),
            HeaderEntry {
                shape: entry.shape.clone(),
                dtype: S::DTYPE,
                byte_offset: payload.len(),
                trainable: entry.trainable,
            },
        );
        for v in entry.data.iter() {
            v.write_le(&mut payload);
        }
    }
    let header_bytes = serde_json::to_vec(&header)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    f.write_all(&header_bytes)?;
    f.write_all(&payload)?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<ParamStore<S>> {
    let bytes = fs::read(path)
        .map_err(|e| Error::MissingArtifact(format!("checkpoint {}: {e}", path.display())))?;
    if bytes.len() < 8 {
        return Err(Error::Data(format!("checkpoint {} truncated", path.display())));
    }
    let hlen = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
    let header: BTreeMap<String, HeaderEntry> = serde_json::from_slice(&bytes[8..8 + hlen])?;
    let payload = &bytes[8 + hlen..];
    let width = S::byte_width();
    let mut store = ParamStore::new();
    for (name, h) in header {
        if h.dtype != S::DTYPE {
            return Err(Error::Data(format!(
                "checkpoint {name}: dtype {:?} does not match requested {:?}",
                h.dtype,
                S::DTYPE
            )));
        }
        let n: usize = h.shape.iter().product();
        let start = h.byte_offset;
        let end = start + n * width;
        if end > payload.len() {
            return Err(Error::Data(format!("checkpoint {name}: payload out of range")));
        }
        let slice = &payload[start..end];
        let data: Vec<S> = (0..n).map(|i| S::read_le(slice, i)).collect();
        store.insert(&name, h.shape, data, h.trainable);
    }
    Ok(store)
}
