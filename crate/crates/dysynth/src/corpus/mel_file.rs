//! Binary mel spectrogram files.
//!
//! Layout, little-endian: `"MELF"` | version `u16` = 1 | `n_frames u32` |
//! `n_mels u32` | `f32` payload, row-major frames. Round-trips are bit-exact.

use std::path::Path;

use super::MelSpectrogram;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"MELF";
const VERSION: u16 = 1;

pub fn write_mel(mel: &MelSpectrogram, path: &Path) -> Result<()> {
    // MelSpectrogram guarantees finiteness on construction; re-check anyway in
    // case the caller built the payload through unsafe float ops.
    if mel.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: format!("mel payload for {}", path.display()) });
    }
    let mut buf = Vec::with_capacity(14 + mel.data().len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(mel.n_frames() as u32).to_le_bytes());
    buf.extend_from_slice(&(mel.n_mels() as u32).to_le_bytes());
    for v in mel.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_mel(path: &Path) -> Result<MelSpectrogram> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 14 {
        return Err(Error::PayloadMismatch { path: path.into(), expected: 14, found: bytes.len() });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic { path: path.into(), expected: "MELF" });
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != VERSION {
        return Err(Error::BadVersion { path: path.into(), found: version });
    }
    let n_frames = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let n_mels = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let expected = 14 + n_frames * n_mels * 4;
    if bytes.len() != expected {
        return Err(Error::PayloadMismatch { path: path.into(), expected, found: bytes.len() });
    }
    let data: Vec<f32> = bytes[14..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    MelSpectrogram::new(n_frames, n_mels, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_frame_file_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.mel");
        let mel = MelSpectrogram::new(1, 80, vec![0.0; 80]).unwrap();
        write_mel(&mel, &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 4 + 2 + 4 + 4 + 320);
        assert_eq!(read_mel(&path).unwrap(), mel);
    }

    #[test]
    fn bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.mel");
        std::fs::write(&path, b"XXXX\x01\x00\x01\x00\x00\x00\x50\x00\x00\x00").unwrap();
        assert!(matches!(read_mel(&path), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.mel");
        let mel = MelSpectrogram::new(2, 80, vec![1.0; 160]).unwrap();
        write_mel(&mel, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 8);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_mel(&path), Err(Error::PayloadMismatch { .. })));
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(frames in 1usize..40, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..frames * 80).map(|_| rng.gen_range(-10.0f32..10.0)).collect();
            let mel = MelSpectrogram::new(frames, 80, data).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("r.mel");
            write_mel(&mel, &path).unwrap();
            let bytes1 = std::fs::read(&path).unwrap();
            let back = read_mel(&path).unwrap();
            prop_assert_eq!(&back, &mel);
            write_mel(&back, &path).unwrap();
            prop_assert_eq!(bytes1, std::fs::read(&path).unwrap());
        }
    }
}
