//! Procedural toy corpus.
//!
//! Stands in for a real multi-speaker recording session so the full pipeline
//! (analysis, training, synthesis, augmentation) runs at desk scale. Ground
//! truth is built directly: every phoneme has a frozen base duration scaled by
//! the speaker's severity multiplier, pauses appear at inter-word slots with a
//! severity-dependent probability, pitch/energy are deterministic functions of
//! (phoneme, speaker, severity), and mel frames are smooth per-phoneme
//! spectral templates scaled by energy. Output is byte-identical for a given
//! spec.

use std::path::Path;

use rand::Rng;

use super::{
    write_alignment, write_manifest, write_mel, AlignmentEntry, MelSpectrogram, PhonemeSequence,
    ProsodyFile, Utterance, N_MELS, N_SEVERITIES,
};
use crate::phones::{self, LEXICON, PAUSE, SILENCE};
use crate::prosody::FrameParams;
use crate::util::{rng_for, unit_hash};
use crate::{Error, Result};

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ToyCorpusSpec {
    pub n_speakers_per_severity: usize,
    pub n_utterances_per_speaker: usize,
    /// Sentence length in words, inclusive bounds.
    pub sentence_length_range: (usize, usize),
    /// Per-severity speaking-rate multipliers, positive and non-decreasing.
    pub severity_duration_multipliers: [f64; N_SEVERITIES],
    /// Per-slot pause probabilities, in [0,1] and non-decreasing.
    pub severity_pause_rates: [f64; N_SEVERITIES],
    pub base_seed: u64,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        Self {
            n_speakers_per_severity: 3,
            n_utterances_per_speaker: 20,
            sentence_length_range: (2, 5),
            severity_duration_multipliers: [1.0, 1.3, 1.8],
            severity_pause_rates: [0.05, 0.25, 0.5],
            base_seed: 42,
        }
    }
}

impl ToyCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers_per_severity == 0 || self.n_utterances_per_speaker == 0 {
            return Err(Error::Config("toy corpus needs at least one speaker and utterance per severity".into()));
        }
        let (lo, hi) = self.sentence_length_range;
        if lo < 1 || hi < lo {
            return Err(Error::Config(format!("bad sentence length range ({lo}, {hi})")));
        }
        let m = &self.severity_duration_multipliers;
        if m.iter().any(|&v| v <= 0.0) || m[0] > m[1] || m[1] > m[2] {
            return Err(Error::Config(format!("duration multipliers {m:?} must be positive and non-decreasing")));
        }
        let p = &self.severity_pause_rates;
        if p.iter().any(|&v| !(0.0..=1.0).contains(&v)) || p[0] > p[1] || p[1] > p[2] {
            return Err(Error::Config(format!("pause rates {p:?} must lie in [0,1] and be non-decreasing")));
        }
        Ok(())
    }
}

const SEVERITY_PREFIX: [&str; N_SEVERITIES] = ["N", "L", "M"];
/// Base pause length in seconds before severity scaling; long enough that a
/// 0.9x jitter still clears the default 150 ms analysis threshold.
const PAUSE_BASE_S: f64 = 0.20;

/// Frozen base duration of a phoneme in seconds.
fn phone_base_duration(phone: &str) -> f64 {
    0.06 + 0.10 * unit_hash(&[phone, "dur"])
}

fn speaker_base_pitch(speaker: &str) -> f64 {
    110.0 + 130.0 * unit_hash(&[speaker, "f0"])
}

fn phone_pitch_offset(phone: &str) -> f64 {
    -25.0 + 50.0 * unit_hash(&[phone, "f0"])
}

fn phone_pitch(phone: &str, speaker: &str, severity: usize) -> f64 {
    if !phones::is_voiced(phone) {
        return 0.0;
    }
    (speaker_base_pitch(speaker) + phone_pitch_offset(phone)) * (1.0 + 0.03 * severity as f64)
}

fn phone_energy(phone: &str, speaker: &str, severity: usize) -> f64 {
    if phones::is_pause(phone) {
        return 0.02;
    }
    (0.35 + 0.5 * unit_hash(&[phone, "en"]))
        * (0.9 + 0.2 * unit_hash(&[speaker, "en"]))
        * (1.0 - 0.06 * severity as f64)
}

/// Per-phoneme spectral template: a few Gaussian bumps over the mel axis.
fn phone_template(phone: &str, speaker: &str) -> [f64; N_MELS] {
    let mut t = [0.02f64; N_MELS];
    if phones::is_pause(phone) {
        return t;
    }
    let spk_shift = (unit_hash(&[speaker, "shape"]) - 0.5) * 6.0;
    for b in 0..3 {
        let tag = ["b0", "b1", "b2"][b];
        let center = 4.0 + 70.0 * unit_hash(&[phone, tag, "c"]) + spk_shift;
        let width = 2.0 + 6.0 * unit_hash(&[phone, tag, "w"]);
        let amp = 0.35 + 0.65 * unit_hash(&[phone, tag, "a"]);
        for (m, v) in t.iter_mut().enumerate() {
            let d = (m as f64 - center) / width;
            *v += amp * (-0.5 * d * d).exp();
        }
    }
    t
}

struct BuiltUtterance {
    utt: Utterance,
    alignment: Vec<AlignmentEntry>,
    mel: MelSpectrogram,
    prosody: ProsodyFile,
}

fn build_utterance(
    spec: &ToyCorpusSpec,
    params: &FrameParams,
    severity: usize,
    speaker: &str,
    id: &str,
    prompt_index: u64,
    global_index: u64,
) -> BuiltUtterance {
    let mut rng = rng_for(spec.base_seed, "toy-utt", global_index);
    let hop_s = params.hop_seconds();

    // Prompts form a shared list keyed by the utterance index alone, so every
    // speaker at every severity reads the same sentences.
    let mut sentence_rng = rng_for(spec.base_seed, "toy-sentence", prompt_index);
    let (lo, hi) = spec.sentence_length_range;
    let n_words = sentence_rng.gen_range(lo..=hi);
    let mut words = Vec::with_capacity(n_words);
    let mut word_phones: Vec<Vec<String>> = Vec::with_capacity(n_words);
    for _ in 0..n_words {
        let (w, ph) = LEXICON[sentence_rng.gen_range(0..LEXICON.len())];
        words.push(w.to_string());
        word_phones.push(ph.iter().map(|p| p.to_string()).collect());
    }
    let text = words.join(" ");
    let base = PhonemeSequence::from_words(&word_phones).expect("lexicon phones are valid");

    // Pause insertion at inter-word slots.
    let rate = spec.severity_pause_rates[severity];
    let mut tokens = Vec::new();
    let mut word_index = Vec::new();
    for i in 0..base.tokens.len() {
        tokens.push(base.tokens[i].clone());
        word_index.push(base.word_index[i]);
        let boundary = i + 1 < base.tokens.len() && base.word_index[i] != base.word_index[i + 1];
        if boundary && rng.gen::<f64>() < rate {
            tokens.push(PAUSE.to_string());
            word_index.push(base.word_index[i]);
        }
    }
    let phones_seq = PhonemeSequence { tokens, word_index };

    // Durations in frames, alignment on exact frame boundaries.
    let mult = spec.severity_duration_multipliers[severity];
    let mut durations = Vec::with_capacity(phones_seq.len());
    for tok in &phones_seq.tokens {
        let jitter = 0.9 + 0.2 * rng.gen::<f64>();
        let dur_s = if phones::is_pause(tok) {
            PAUSE_BASE_S * (1.0 + 0.35 * severity as f64) * jitter
        } else {
            phone_base_duration(tok) * mult * jitter
        };
        durations.push(((dur_s / hop_s).round() as usize).max(1));
    }
    let n_frames: usize = durations.iter().sum();

    let mut alignment = Vec::with_capacity(phones_seq.len());
    let mut cursor = 0usize;
    for (tok, &frames) in phones_seq.tokens.iter().zip(&durations) {
        let phone = if phones::is_pause(tok) { SILENCE.to_string() } else { tok.clone() };
        alignment.push(AlignmentEntry {
            phone,
            start: cursor as f64 * hop_s,
            end: (cursor + frames) as f64 * hop_s,
            word: phones_seq.word_index[alignment.len()],
        });
        cursor += frames;
    }

    // Frame-level prosody targets and the mel pattern.
    let mut pitch = Vec::with_capacity(n_frames);
    let mut energy = Vec::with_capacity(n_frames);
    let mut mel_data = vec![0f32; n_frames * N_MELS];
    let mut f = 0usize;
    for (tok, &frames) in phones_seq.tokens.iter().zip(&durations) {
        let p = phone_pitch(tok, speaker, severity);
        let e = phone_energy(tok, speaker, severity);
        let template = phone_template(tok, speaker);
        for _ in 0..frames {
            pitch.push(p as f32);
            energy.push(e as f32);
            for m in 0..N_MELS {
                mel_data[f * N_MELS + m] = (template[m] * e) as f32;
            }
            f += 1;
        }
    }
    // One smoothing pass along time so phone transitions are gradual.
    let raw = mel_data.clone();
    for t in 0..n_frames {
        let prev = if t > 0 { t - 1 } else { t };
        let next = if t + 1 < n_frames { t + 1 } else { t };
        for m in 0..N_MELS {
            mel_data[t * N_MELS + m] =
                0.25 * raw[prev * N_MELS + m] + 0.5 * raw[t * N_MELS + m] + 0.25 * raw[next * N_MELS + m];
        }
    }
    let mel = MelSpectrogram::new(n_frames, N_MELS, mel_data).expect("procedural mel is finite");

    let utt = Utterance {
        id: id.to_string(),
        speaker: speaker.to_string(),
        severity,
        text,
        phones: phones_seq,
        alignment: Some(format!("alignments/{id}.jsonl").into()),
        mel: Some(format!("mels/{id}.mel").into()),
        audio: None,
        synthetic: false,
        controls: None,
        source_id: None,
    };
    BuiltUtterance { utt, alignment, mel, prosody: ProsodyFile { pitch, energy } }
}

/// Generate the corpus under `out_dir` and return the manifest records.
///
/// Layout: `manifest.jsonl`, `alignments/`, `mels/`, `prosody/`. Reruns with
/// the same spec produce byte-identical files.
pub fn generate_toy_corpus(spec: &ToyCorpusSpec, out_dir: &Path) -> Result<Vec<Utterance>> {
    spec.validate()?;
    let params = FrameParams::default();
    for sub in ["alignments", "mels", "prosody"] {
        std::fs::create_dir_all(out_dir.join(sub)).map_err(|e| Error::io(out_dir.join(sub), e))?;
    }

    let mut utterances = Vec::new();
    let mut global_index = 0u64;
    for severity in 0..N_SEVERITIES {
        for spk in 0..spec.n_speakers_per_severity {
            let speaker = format!("{}{:02}", SEVERITY_PREFIX[severity], spk + 1);
            for j in 0..spec.n_utterances_per_speaker {
                let id = format!("{speaker}-{j:03}");
                let built =
                    build_utterance(spec, &params, severity, &speaker, &id, j as u64, global_index);
                global_index += 1;
                write_alignment(&built.alignment, &out_dir.join(format!("alignments/{id}.jsonl")))?;
                write_mel(&built.mel, &out_dir.join(format!("mels/{id}.mel")))?;
                built.prosody.save(&out_dir.join(format!("prosody/{id}.json")))?;
                utterances.push(built.utt);
            }
        }
    }
    write_manifest(&utterances, &out_dir.join("manifest.jsonl"))?;
    Ok(utterances)
}
