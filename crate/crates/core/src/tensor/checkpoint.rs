//! Single-file tensor container: magic, manifest length, JSON manifest of
//! `(name, shape, offset)`, then a little-endian f64 payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DSTSGCK1";

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<ManifestEntry>,
}

pub fn write_checkpoint<W: Write>(mut w: W, entries: &[(String, Tensor)]) -> Result<()> {
    let mut offset = 0u64;
    let mut manifest = Manifest { tensors: vec![] };
    for (name, t) in entries {
        if manifest.tensors.iter().any(|e| &e.name == name) {
            return Err(Error::contract(format!("duplicate checkpoint entry {name}")));
        }
        manifest.tensors.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 8 * t.numel() as u64;
    }
    let json = serde_json::to_vec(&manifest)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut payload = Vec::with_capacity(offset as usize);
    for (_, t) in entries {
        for x in t.data() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    w.write_all(&payload)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut head = [0u8; 16];
    r.read_exact(&mut head)
        .map_err(|e| Error::Ingestion(format!("checkpoint header: {e}")))?;
    if &head[..8] != MAGIC {
        return Err(Error::Ingestion("not a checkpoint file (bad magic)".into()));
    }
    let len = u64::from_le_bytes(head[8..].try_into().unwrap()) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)
        .map_err(|e| Error::Ingestion(format!("checkpoint manifest: {e}")))?;
    let manifest: Manifest = serde_json::from_slice(&json)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    manifest
        .tensors
        .into_iter()
        .map(|e| {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 8 * n;
            if end > payload.len() {
                return Err(Error::Ingestion(format!(
                    "checkpoint entry {} needs bytes {start}..{end}, payload has {}",
                    e.name,
                    payload.len()
                )));
            }
            let data = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok((e.name, Tensor::new(e.shape, data)?))
        })
        .collect()
}

pub fn save_checkpoint(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, entries)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    read_checkpoint(fs::File::open(path)?)
}
