//! Corpus manifests: UTF-8 JSON lines, one utterance per line.
//!
//! Keys: `id`, `speaker`, `severity`, `text`, `phones` (array), `word_index`
//! (array), `alignment`, `mel`, `audio` (nullable paths relative to the
//! manifest). Augmented manifests add `synthetic`, `controls`, `source_id`.

use std::collections::HashSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{PhonemeSequence, Utterance, N_SEVERITIES};
use crate::model::SynthesisControls;
use crate::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    speaker: String,
    severity: i64,
    text: String,
    phones: Vec<String>,
    word_index: Vec<usize>,
    alignment: Option<String>,
    mel: Option<String>,
    audio: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    synthetic: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    controls: Option<SynthesisControls>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source_id: Option<String>,
}

impl Record {
    fn into_utterance(self) -> Result<Utterance> {
        if !(0..N_SEVERITIES as i64).contains(&self.severity) {
            return Err(Error::SeverityOutOfRange { id: self.id, severity: self.severity });
        }
        let utt = Utterance {
            id: self.id,
            speaker: self.speaker,
            severity: self.severity as usize,
            text: self.text,
            phones: PhonemeSequence { tokens: self.phones, word_index: self.word_index },
            alignment: self.alignment.map(PathBuf::from),
            mel: self.mel.map(PathBuf::from),
            audio: self.audio.map(PathBuf::from),
            synthetic: self.synthetic,
            controls: self.controls,
            source_id: self.source_id,
        };
        utt.validate()?;
        Ok(utt)
    }

    fn from_utterance(u: &Utterance) -> Self {
        let path_str = |p: &Option<PathBuf>| p.as_ref().map(|p| p.to_string_lossy().into_owned());
        Record {
            id: u.id.clone(),
            speaker: u.speaker.clone(),
            severity: u.severity as i64,
            text: u.text.clone(),
            phones: u.phones.tokens.clone(),
            word_index: u.phones.word_index.clone(),
            alignment: path_str(&u.alignment),
            mel: path_str(&u.mel),
            audio: path_str(&u.audio),
            synthetic: u.synthetic,
            controls: u.controls.clone(),
            source_id: u.source_id.clone(),
        }
    }
}

/// Parse a manifest, preserving file order and rejecting duplicate ids.
pub fn load_manifest(path: &Path) -> Result<Vec<Utterance>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.into(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        let utt = record.into_utterance()?;
        if !seen.insert(utt.id.clone()) {
            return Err(Error::DuplicateId(utt.id));
        }
        out.push(utt);
    }
    Ok(out)
}

pub fn write_manifest(utterances: &[Utterance], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for u in utterances {
        let record = Record::from_utterance(u);
        serde_json::to_writer(&mut buf, &record).expect("manifest serialization");
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_line() -> &'static str {
        r#"{"id":"u1","speaker":"M05","severity":2,"text":"bad and good","phones":["B","AE","D","AE","N","D","G","UH","D"],"word_index":[0,0,0,1,1,1,2,2,2],"alignment":null,"mel":null,"audio":null}"#
    }

    #[test]
    fn loads_a_well_formed_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(&path, format!("{}\n", sample_line())).unwrap();
        let utts = load_manifest(&path).unwrap();
        assert_eq!(utts.len(), 1);
        assert_eq!(utts[0].severity, 2);
        assert_eq!(utts[0].phones.n_words(), 3);
    }

    #[test]
    fn empty_file_is_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_manifest(&path).unwrap().is_empty());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(&path, format!("{}\n{}\n", sample_line(), sample_line())).unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::DuplicateId(id)) if id == "u1"));
    }

    #[test]
    fn severity_out_of_range_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(&path, sample_line().replace("\"severity\":2", "\"severity\":3")).unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::SeverityOutOfRange { .. })));
    }

    #[test]
    fn parse_error_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(&path, format!("{}\n{{not json\n", sample_line())).unwrap();
        match load_manifest(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn write_then_load_preserves_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(&path, format!("{}\n", sample_line())).unwrap();
        let utts = load_manifest(&path).unwrap();
        let out = dir.path().join("copy.jsonl");
        write_manifest(&utts, &out).unwrap();
        assert_eq!(load_manifest(&out).unwrap(), utts);
    }
}
