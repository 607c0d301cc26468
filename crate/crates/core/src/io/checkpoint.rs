//! Versioned binary parameter blob with a JSON sidecar.
//!
//! Blob layout, little endian: magic `SDS3DCKP`, `u32` version, `u32` array
//! count, then per array a `u32` name length, the UTF-8 name, a `u64` element
//! count and the raw `f64` values. The sidecar holds run metadata and must
//! agree with the blob on version and array names.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"SDS3DCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    version: u32,
    arrays: Vec<(String, usize)>,
    meta: serde_json::Value,
}

impl Checkpoint {
    pub fn array(&self, name: &str) -> Result<&[f64]> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing array `{name}`")))
    }

    pub fn has_array(&self, name: &str) -> bool {
        self.arrays.iter().any(|(n, _)| n == name)
    }
}

/// Sidecar path next to a blob: `x.bin` pairs with `x.json`.
pub fn sidecar_path(blob: &Path) -> PathBuf {
    blob.with_extension("json")
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(ckpt.arrays.len() as u32).to_le_bytes());
    for (name, values) in &ckpt.arrays {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    // Write to a temporary name first so an interrupted save keeps the old checkpoint.
    let tmp = path.with_extension("bin.tmp");
    std::fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    let sidecar = Sidecar {
        version: CHECKPOINT_VERSION,
        arrays: ckpt.arrays.iter().map(|(n, v)| (n.clone(), v.len())).collect(),
        meta: ckpt.meta.clone(),
    };
    let side = sidecar_path(path);
    std::fs::write(&side, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&side, e))?;
    Ok(())
}

fn take<'a>(data: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if data.len() < n {
        return Err(Error::CorruptCheckpoint("truncated blob".into()));
    }
    let (head, rest) = data.split_at(n);
    *data = rest;
    Ok(head)
}

fn read_u32(data: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(data, 4)?.try_into().expect("4 bytes")))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::CheckpointNotFound(path.to_path_buf()));
    }
    let mut raw = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    let mut data = raw.as_slice();
    if take(&mut data, 8)? != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = read_u32(&mut data)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CorruptCheckpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut data)? as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut data)? as usize;
        let name = String::from_utf8(take(&mut data, name_len)?.to_vec())
            .map_err(|_| Error::CorruptCheckpoint("array name is not UTF-8".into()))?;
        let len = u64::from_le_bytes(take(&mut data, 8)?.try_into().expect("8 bytes")) as usize;
        let bytes = take(&mut data, len.checked_mul(8).ok_or_else(|| Error::CorruptCheckpoint("array too large".into()))?)?;
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        arrays.push((name, values));
    }
    if !data.is_empty() {
        return Err(Error::CorruptCheckpoint("trailing bytes".into()));
    }
    let side = sidecar_path(path);
    let text = std::fs::read(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: Sidecar = serde_json::from_slice(&text)?;
    let names: Vec<(String, usize)> = arrays.iter().map(|(n, v)| (n.clone(), v.len())).collect();
    if sidecar.version != version || sidecar.arrays != names {
        return Err(Error::CorruptCheckpoint("sidecar does not match blob".into()));
    }
    Ok(Checkpoint {
        meta: sidecar.meta,
        arrays,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let ckpt = Checkpoint {
            meta: serde_json::json!({"iteration": 7}),
            arrays: vec![
                ("a".into(), vec![1.0, -0.0, f64::MIN_POSITIVE, 1.0 / 3.0]),
                ("empty".into(), vec![]),
            ],
        };
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.meta, ckpt.meta);
        for ((_, a), (_, b)) in back.arrays.iter().zip(&ckpt.arrays) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert!(back.array("missing").is_err());
    }

    #[test]
    fn missing_and_corrupt_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("none.bin");
        assert!(matches!(load_checkpoint(&path), Err(Error::CheckpointNotFound(_))));
        std::fs::write(&path, b"nonsense").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CorruptCheckpoint(_))));
    }
}
