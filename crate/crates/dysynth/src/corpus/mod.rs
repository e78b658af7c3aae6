//! On-disk corpus artifacts: manifests, alignments, mel files, prosody target
//! files, and the procedural toy corpus that stands in for a real recording
//! session.
//!
//! File conventions, relative to the directory containing `manifest.jsonl`:
//! - `alignments/<id>.jsonl` — phone alignments, one JSON object per line;
//! - `mels/<id>.mel` — binary mel spectrogram (`MELF` format, see [`mel_file`]);
//! - `prosody/<id>.json` — per-frame pitch (Hz) and energy vectors, the
//!   variance-adaptor ground truth for corpora without raw audio.

mod alignment;
mod manifest;
mod mel_file;
mod toy;

pub use alignment::{load_alignment, write_alignment, AlignmentEntry};
pub use manifest::{load_manifest, write_manifest};
pub use mel_file::{read_mel, write_mel};
pub use toy::{generate_toy_corpus, ToyCorpusSpec};

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::model::SynthesisControls;
use crate::{Error, Result};

/// Discrete dysarthria severity: 0 = Normal, 1 = Low, 2 = Moderate.
pub const N_SEVERITIES: usize = 3;

/// Mel band count; fixed by the model and the file format.
pub const N_MELS: usize = 80;

/// Phoneme tokens with their word memberships.
///
/// `word_index` is non-decreasing and starts at 0; a pause token carries the
/// word index of the token before it. Inter-word slots (the positions eligible
/// for pause insertion) are derived, never stored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhonemeSequence {
    pub tokens: Vec<String>,
    pub word_index: Vec<usize>,
}

impl PhonemeSequence {
    pub fn new(tokens: Vec<String>, word_index: Vec<usize>) -> Result<Self> {
        let seq = Self { tokens, word_index };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.len() != self.word_index.len() {
            return Err(Error::Invalid(format!(
                "phoneme sequence has {} tokens but {} word indices",
                self.tokens.len(),
                self.word_index.len()
            )));
        }
        if let Some(&first) = self.word_index.first() {
            if first != 0 {
                return Err(Error::Invalid("word_index must start at 0".into()));
            }
        }
        for w in self.word_index.windows(2) {
            if w[1] < w[0] {
                return Err(Error::Invalid("word_index must be non-decreasing".into()));
            }
        }
        for t in &self.tokens {
            crate::phones::phone_id(t)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_words(&self) -> usize {
        self.word_index.last().map_or(0, |&w| w + 1)
    }

    /// Positions `i` where a pause may be inserted between token `i` and
    /// `i+1`: a word boundary with no pause already adjacent.
    pub fn inter_word_slots(&self) -> Vec<usize> {
        let mut slots = Vec::new();
        for i in 0..self.tokens.len().saturating_sub(1) {
            if self.word_index[i] != self.word_index[i + 1]
                && !crate::phones::is_pause(&self.tokens[i])
                && !crate::phones::is_pause(&self.tokens[i + 1])
            {
                slots.push(i);
            }
        }
        slots
    }

    /// Build from per-word phone lists.
    pub fn from_words(words: &[Vec<String>]) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut word_index = Vec::new();
        for (w, phones) in words.iter().enumerate() {
            for p in phones {
                tokens.push(p.clone());
                word_index.push(w);
            }
        }
        Self::new(tokens, word_index)
    }
}

/// One corpus record.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: String,
    pub severity: usize,
    pub text: String,
    pub phones: PhonemeSequence,
    pub alignment: Option<PathBuf>,
    pub mel: Option<PathBuf>,
    pub audio: Option<PathBuf>,
    /// Set only in augmented manifests.
    pub synthetic: bool,
    pub controls: Option<SynthesisControls>,
    pub source_id: Option<String>,
}

impl Utterance {
    pub fn validate(&self) -> Result<()> {
        if self.severity >= N_SEVERITIES {
            return Err(Error::SeverityOutOfRange { id: self.id.clone(), severity: self.severity as i64 });
        }
        if !self.text.trim().is_empty() && self.phones.is_empty() {
            return Err(Error::InvalidUtterance {
                id: self.id.clone(),
                msg: "non-empty text but empty phoneme sequence".into(),
            });
        }
        self.phones.validate().map_err(|e| Error::InvalidUtterance { id: self.id.clone(), msg: e.to_string() })
    }

    /// Resolve a manifest-relative path against the manifest's directory.
    pub fn resolve(base: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }
}

/// An 80-band mel spectrogram, `n_frames x 80` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    n_frames: usize,
    data: Vec<f32>,
}

impl MelSpectrogram {
    pub fn new(n_frames: usize, n_mels: usize, data: Vec<f32>) -> Result<Self> {
        if n_mels != N_MELS {
            return Err(Error::Invalid(format!("mel spectrogram must have {N_MELS} bands, got {n_mels}")));
        }
        if n_frames == 0 {
            return Err(Error::EmptyInput("mel spectrogram with zero frames"));
        }
        if data.len() != n_frames * n_mels {
            return Err(Error::Invalid(format!(
                "mel payload: {} values for {n_frames}x{n_mels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "mel spectrogram".into() });
        }
        Ok(Self { n_frames, data })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_mels(&self) -> usize {
        N_MELS
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * N_MELS..][..N_MELS]
    }
}

/// Per-frame prosody ground truth stored next to each mel file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProsodyFile {
    /// Per-frame F0 in Hz, 0 = unvoiced.
    pub pitch: Vec<f32>,
    /// Per-frame energy, non-negative.
    pub energy: Vec<f32>,
}

impl ProsodyFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Parse { path: path.into(), line: e.line(), msg: e.to_string() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("prosody serialization");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inter_word_slots_skip_pauses() {
        // we | PAU | like to: slot between "like" and "to" only; the boundary
        // occupied by the pause is not eligible on either side.
        let seq = PhonemeSequence::new(
            ["W", "IY", "PAU", "L", "AY", "K", "T", "UW"].iter().map(|s| s.to_string()).collect(),
            vec![0, 0, 0, 1, 1, 1, 2, 2],
        )
        .unwrap();
        assert_eq!(seq.inter_word_slots(), vec![5]);
        assert_eq!(seq.n_words(), 3);
    }

    #[test]
    fn zero_frame_mel_rejected() {
        assert!(matches!(MelSpectrogram::new(0, 80, vec![]), Err(Error::EmptyInput(_))));
        assert!(MelSpectrogram::new(1, 40, vec![0.0; 40]).is_err());
        assert!(MelSpectrogram::new(1, 80, vec![f32::NAN; 80]).is_err());
    }
}
