//! Phone alignments: JSON lines with keys `phone`, `start`, `end`, `word`.
//!
//! Entries are validated to be sorted, non-overlapping and non-negative;
//! silence segments keep the `"sp"` phone label and the preceding word's
//! index.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentEntry {
    pub phone: String,
    /// Segment start in seconds.
    pub start: f64,
    /// Segment end in seconds, strictly greater than `start`.
    pub end: f64,
    /// Word index; silence uses the preceding word's index.
    pub word: usize,
}

impl AlignmentEntry {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

fn validate(entries: &[AlignmentEntry]) -> Result<()> {
    const TIME_EPS: f64 = 1e-9;
    for (i, e) in entries.iter().enumerate() {
        if e.start < 0.0 {
            return Err(Error::Alignment { index: i, msg: format!("negative start {}", e.start) });
        }
        if e.end <= e.start {
            return Err(Error::Alignment {
                index: i,
                msg: format!("end {} not after start {}", e.end, e.start),
            });
        }
        if i > 0 {
            let prev = &entries[i - 1];
            if e.start + TIME_EPS < prev.end {
                return Err(Error::Alignment {
                    index: i,
                    msg: format!("overlaps previous segment (starts {} before end {})", e.start, prev.end),
                });
            }
            if e.word < prev.word {
                return Err(Error::Alignment {
                    index: i,
                    msg: format!("word index {} decreases after {}", e.word, prev.word),
                });
            }
        }
    }
    Ok(())
}

pub fn load_alignment(path: &Path) -> Result<Vec<AlignmentEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: AlignmentEntry = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.into(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        entries.push(entry);
    }
    validate(&entries)?;
    Ok(entries)
}

pub fn write_alignment(entries: &[AlignmentEntry], path: &Path) -> Result<()> {
    validate(entries)?;
    let mut buf = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut buf, e).expect("alignment serialization");
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_lines(lines: &[&str]) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.jsonl");
        std::fs::write(&path, lines.join("\n")).unwrap();
        (dir, path)
    }

    #[test]
    fn loads_and_preserves_order() {
        let (_d, path) = write_lines(&[
            r#"{"phone":"AE","start":0.10,"end":0.25,"word":0}"#,
            r#"{"phone":"sp","start":0.25,"end":0.45,"word":0}"#,
            r#"{"phone":"N","start":0.45,"end":0.60,"word":1}"#,
        ]);
        let entries = load_alignment(&path).unwrap();
        assert_eq!(entries.len(), 3);
        assert!((entries[0].duration() - 0.15).abs() < 1e-12);
        assert_eq!(entries[1].phone, "sp");
    }

    #[test]
    fn overlap_rejected() {
        let (_d, path) = write_lines(&[
            r#"{"phone":"AE","start":0.0,"end":0.30,"word":0}"#,
            r#"{"phone":"N","start":0.25,"end":0.50,"word":0}"#,
        ]);
        assert!(matches!(load_alignment(&path), Err(Error::Alignment { index: 1, .. })));
    }

    #[test]
    fn negative_time_rejected() {
        let (_d, path) = write_lines(&[r#"{"phone":"AE","start":-0.1,"end":0.2,"word":0}"#]);
        assert!(load_alignment(&path).is_err());
    }

    #[test]
    fn non_monotone_word_rejected() {
        let (_d, path) = write_lines(&[
            r#"{"phone":"AE","start":0.0,"end":0.2,"word":1}"#,
            r#"{"phone":"N","start":0.2,"end":0.4,"word":0}"#,
        ]);
        assert!(load_alignment(&path).is_err());
    }
}
