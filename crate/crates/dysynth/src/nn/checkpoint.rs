//! Binary checkpoint format for named parameter tensors.
//!
//! Layout (all little-endian):
//! `"CKPT"` | version `u16` = 1 | count `u32` | per entry:
//! name length `u16`, UTF-8 name, ndim `u8`, dims `u32[ndim]`, `f32` payload.
//!
//! Round-trips are bit-exact at f32 precision; f64 models are narrowed on
//! save and widened on load.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"CKPT";
const VERSION: u16 = 1;

/// One named tensor as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn save(entries: &[CheckpointEntry], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        let numel: usize = e.shape.iter().product();
        if numel != e.data.len() {
            return Err(Error::Checkpoint(format!(
                "entry {}: shape {:?} does not match {} values",
                e.name,
                e.shape,
                e.data.len()
            )));
        }
        if e.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: format!("checkpoint entry {}", e.name) });
        }
        let name = e.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(e.shape.len() as u8);
        for &d in &e.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &e.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<CheckpointEntry>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0, path };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(Error::BadMagic { path: path.into(), expected: "CKPT" });
    }
    let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::BadVersion { path: path.into(), found: version });
    }
    let count = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("bad entry name: {e}")))?;
        let ndim = cur.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = cur.take(numel * 4)?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push(CheckpointEntry { name, shape, data });
    }
    if cur.pos != bytes.len() {
        return Err(Error::PayloadMismatch { path: path.into(), expected: cur.pos, found: bytes.len() });
    }
    Ok(entries)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::PayloadMismatch {
                path: self.path.into(),
                expected: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let entries = vec![
            CheckpointEntry { name: "enc.w".into(), shape: vec![2, 3], data: vec![0.1, -2.5, 3.25, 0.0, 1e-7, 9.0] },
            CheckpointEntry { name: "enc.b".into(), shape: vec![3], data: vec![-0.5, 0.25, 0.125] },
        ];
        save(&entries, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(entries, loaded);
        let bytes1 = std::fs::read(&path).unwrap();
        save(&loaded, &path).unwrap();
        assert_eq!(bytes1, std::fs::read(&path).unwrap());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"XXXX\x01\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(load(&path), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn non_finite_rejected_on_save() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.ckpt");
        let entries =
            vec![CheckpointEntry { name: "w".into(), shape: vec![1], data: vec![f32::NAN] }];
        assert!(matches!(save(&entries, &path), Err(Error::NonFinite { .. })));
    }
}
