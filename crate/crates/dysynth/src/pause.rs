//! Between-word pause statistics and pause-token insertion.
//!
//! Pause frequency is parameterized per severity as pauses-per-utterance over
//! inter-word-slots-per-utterance, giving a per-slot probability; pause count
//! for a sentence is then binomial in its slot count, so longer sentences get
//! proportionally more pauses. Pause *duration* is not modeled here at all:
//! the inserted token runs through the trained duration predictor like any
//! other phoneme.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AlignmentEntry, PhonemeSequence, N_SEVERITIES};
use crate::phones::{PAUSE, SILENCE};
use crate::{Error, Result};

/// Default minimum silence length that counts as a between-word pause.
pub const DEFAULT_PAUSE_MIN_MS: f64 = 150.0;

/// Sentence-length distribution (in words) used to calibrate default slot
/// counts and the acceptance statistics: uniform over 2..=10 words, mean
/// slot count 5.
pub fn calibration_sentence_lengths() -> Vec<usize> {
    (2..=10).collect()
}

/// Mean inter-word slots per utterance under the calibration distribution.
pub const CALIBRATION_MEAN_SLOTS: f64 = 5.0;

/// Observed per-utterance pause behavior for each severity group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupStats {
    pub pauses_per_utterance: f64,
    pub slots_per_utterance: f64,
}

impl GroupStats {
    /// Per-slot probability, clamped to [0,1].
    pub fn slot_probability(&self) -> f64 {
        (self.pauses_per_utterance / self.slots_per_utterance).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeverityPauseStats {
    pub groups: [GroupStats; N_SEVERITIES],
}

impl Default for SeverityPauseStats {
    /// Reference per-severity pause frequencies (0.26 / 0.84 / 2.51 pauses per
    /// utterance) over the calibration slot count.
    fn default() -> Self {
        let g = |p: f64| GroupStats { pauses_per_utterance: p, slots_per_utterance: CALIBRATION_MEAN_SLOTS };
        Self { groups: [g(0.26), g(0.84), g(2.51)] }
    }
}

impl SeverityPauseStats {
    pub fn slot_probability(&self, severity: usize) -> f64 {
        self.groups[severity].slot_probability()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut map = BTreeMap::new();
        for (s, g) in self.groups.iter().enumerate() {
            map.insert(
                s.to_string(),
                SerializedGroup {
                    pauses_per_utterance: g.pauses_per_utterance,
                    slots_per_utterance: g.slots_per_utterance,
                },
            );
        }
        let text = serde_json::to_string_pretty(&map).expect("stats serialization");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map: BTreeMap<String, SerializedGroup> = serde_json::from_str(&text)
            .map_err(|e| Error::Parse { path: path.into(), line: e.line(), msg: e.to_string() })?;
        let mut groups = [GroupStats { pauses_per_utterance: 0.0, slots_per_utterance: 1.0 }; N_SEVERITIES];
        for s in 0..N_SEVERITIES {
            let g = map
                .get(&s.to_string())
                .ok_or_else(|| Error::Config(format!("pause stats missing severity {s}")))?;
            if g.slots_per_utterance <= 0.0 {
                return Err(Error::Config(format!("severity {s}: slots_per_utterance must be positive")));
            }
            groups[s] = GroupStats {
                pauses_per_utterance: g.pauses_per_utterance,
                slots_per_utterance: g.slots_per_utterance,
            };
        }
        Ok(Self { groups })
    }
}

#[derive(Serialize, Deserialize)]
struct SerializedGroup {
    pauses_per_utterance: f64,
    slots_per_utterance: f64,
}

/// One analyzed utterance: its severity, word count and alignment.
pub struct UtteranceAlignment<'a> {
    pub severity: usize,
    pub n_words: usize,
    pub alignment: &'a [AlignmentEntry],
}

/// Whether a silence entry sits strictly between two words and is long enough
/// to count as a pause.
fn is_between_word_pause(alignment: &[AlignmentEntry], index: usize, min_s: f64) -> bool {
    let e = &alignment[index];
    if e.phone != SILENCE || e.duration() < min_s {
        return false;
    }
    let before = alignment[..index].iter().rev().find(|a| a.phone != SILENCE);
    let after = alignment[index + 1..].iter().find(|a| a.phone != SILENCE);
    match (before, after) {
        (Some(b), Some(a)) => a.word > b.word,
        _ => false,
    }
}

/// Average pause and slot counts per severity group.
///
/// A pause is a `"sp"` segment of at least `pause_min_ms` strictly between two
/// words; slots are `n_words - 1`. Groups with no utterances, or whose
/// utterances are all single words, are errors.
pub fn estimate_stats(items: &[UtteranceAlignment<'_>], pause_min_ms: f64) -> Result<SeverityPauseStats> {
    let min_s = pause_min_ms / 1000.0;
    let mut pauses = [0usize; N_SEVERITIES];
    let mut slots = [0usize; N_SEVERITIES];
    let mut counts = [0usize; N_SEVERITIES];
    for item in items {
        if item.severity >= N_SEVERITIES {
            return Err(Error::SeverityOutOfRange { id: String::new(), severity: item.severity as i64 });
        }
        counts[item.severity] += 1;
        slots[item.severity] += item.n_words.saturating_sub(1);
        for i in 0..item.alignment.len() {
            if is_between_word_pause(item.alignment, i, min_s) {
                pauses[item.severity] += 1;
            }
        }
    }
    let mut groups = [GroupStats { pauses_per_utterance: 0.0, slots_per_utterance: 0.0 }; N_SEVERITIES];
    for s in 0..N_SEVERITIES {
        if counts[s] == 0 {
            return Err(Error::EmptySeverityGroup { severity: s, msg: "no utterances".into() });
        }
        let slots_per = slots[s] as f64 / counts[s] as f64;
        if slots_per == 0.0 {
            return Err(Error::EmptySeverityGroup {
                severity: s,
                msg: "only single-word utterances (no inter-word slots)".into(),
            });
        }
        groups[s] = GroupStats {
            pauses_per_utterance: pauses[s] as f64 / counts[s] as f64,
            slots_per_utterance: slots_per,
        };
    }
    Ok(SeverityPauseStats { groups })
}

/// How the pause count for one utterance is realized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PauseSampling {
    /// Binomial(slots, p) draw.
    Stochastic,
    /// round(slots * p), reproducible without an RNG.
    Deterministic,
}

/// Number of pauses to insert for a sentence of `n_words`.
pub fn pause_count(
    n_words: usize,
    severity: usize,
    stats: &SeverityPauseStats,
    sampling: PauseSampling,
    rng: &mut ChaCha8Rng,
) -> usize {
    if n_words <= 1 {
        return 0;
    }
    let n_slots = n_words - 1;
    let p = stats.slot_probability(severity);
    match sampling {
        PauseSampling::Deterministic => ((n_slots as f64 * p).round() as usize).min(n_slots),
        PauseSampling::Stochastic => (0..n_slots).filter(|_| rng.gen::<f64>() < p).count(),
    }
}

/// Insert `k` pause tokens at distinct inter-word slots chosen uniformly.
///
/// Pause tokens inherit the preceding token's word index; the output length is
/// the input length plus `k`. Slots already adjacent to a pause are not
/// eligible, so pauses never stack.
pub fn insert_pauses(phones: &PhonemeSequence, k: usize, rng: &mut ChaCha8Rng) -> Result<PhonemeSequence> {
    let slots = phones.inter_word_slots();
    if k > slots.len() {
        return Err(Error::Invalid(format!("cannot insert {k} pauses into {} slots", slots.len())));
    }
    if k == 0 {
        return Ok(phones.clone());
    }
    let mut chosen: Vec<usize> =
        rand::seq::index::sample(rng, slots.len(), k).into_iter().map(|i| slots[i]).collect();
    chosen.sort_unstable_by(|a, b| b.cmp(a));
    let mut out = phones.clone();
    for slot in chosen {
        out.tokens.insert(slot + 1, PAUSE.to_string());
        out.word_index.insert(slot + 1, out.word_index[slot]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;

    fn entry(phone: &str, start: f64, end: f64, word: usize) -> AlignmentEntry {
        AlignmentEntry { phone: phone.into(), start, end, word }
    }

    /// Five-word utterance with `n_pauses` qualifying pauses.
    fn alignment_with_pauses(n_pauses: usize) -> Vec<AlignmentEntry> {
        let mut entries = Vec::new();
        let mut t = 0.0;
        for w in 0..5 {
            entries.push(entry("AA", t, t + 0.2, w));
            t += 0.2;
            if w < n_pauses {
                entries.push(entry(SILENCE, t, t + 0.3, w));
                t += 0.3;
            }
        }
        entries
    }

    #[test]
    fn direct_counting_oracle() {
        // 10 utterances of 5 words (4 slots each) carrying 8 qualifying
        // pauses total at severity 2.
        let alignments: Vec<Vec<AlignmentEntry>> = (0..10)
            .map(|i| alignment_with_pauses(if i < 4 { 2 } else { 0 }))
            .collect();
        let mut items: Vec<UtteranceAlignment> = alignments
            .iter()
            .map(|a| UtteranceAlignment { severity: 2, n_words: 5, alignment: a })
            .collect();
        // populate the other groups so they do not error
        let filler = alignment_with_pauses(0);
        items.push(UtteranceAlignment { severity: 0, n_words: 5, alignment: &filler });
        items.push(UtteranceAlignment { severity: 1, n_words: 5, alignment: &filler });
        let stats = estimate_stats(&items, 150.0).unwrap();
        assert!((stats.groups[2].pauses_per_utterance - 0.8).abs() < 1e-12);
        assert!((stats.groups[2].slots_per_utterance - 4.0).abs() < 1e-12);
        assert!((stats.slot_probability(2) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn short_silences_do_not_count() {
        let mut a = alignment_with_pauses(0);
        // insert a 100 ms silence: below the 150 ms threshold
        a.insert(1, entry(SILENCE, 0.2, 0.3, 0));
        let items: Vec<UtteranceAlignment> = (0..3)
            .map(|s| UtteranceAlignment { severity: s, n_words: 5, alignment: &a })
            .collect();
        let stats = estimate_stats(&items, 150.0).unwrap();
        assert_eq!(stats.groups[0].pauses_per_utterance, 0.0);
        // the same corpus at a 50 ms threshold counts it
        let stats = estimate_stats(&items, 50.0).unwrap();
        assert!(stats.groups[0].pauses_per_utterance > 0.0);
    }

    #[test]
    fn single_word_group_errors() {
        let a = vec![entry("AA", 0.0, 0.3, 0)];
        let items: Vec<UtteranceAlignment> = (0..3)
            .map(|s| UtteranceAlignment { severity: s, n_words: 1, alignment: &a })
            .collect();
        assert!(matches!(estimate_stats(&items, 150.0), Err(Error::EmptySeverityGroup { .. })));
    }

    #[test]
    fn missing_group_errors() {
        let a = alignment_with_pauses(1);
        let items = [UtteranceAlignment { severity: 0, n_words: 5, alignment: &a }];
        assert!(matches!(
            estimate_stats(&items, 150.0),
            Err(Error::EmptySeverityGroup { severity: 1, .. })
        ));
    }

    #[test]
    fn leading_and_trailing_silence_excluded() {
        let a = vec![
            entry(SILENCE, 0.0, 0.4, 0),
            entry("AA", 0.4, 0.6, 0),
            entry(SILENCE, 0.6, 1.0, 0),
            entry("N", 1.0, 1.2, 1),
            entry(SILENCE, 1.2, 1.8, 1),
        ];
        let items: Vec<UtteranceAlignment> = (0..3)
            .map(|s| UtteranceAlignment { severity: s, n_words: 2, alignment: &a })
            .collect();
        let stats = estimate_stats(&items, 150.0).unwrap();
        // only the middle silence is between two words
        assert_eq!(stats.groups[0].pauses_per_utterance, 1.0);
    }

    #[test]
    fn pause_count_edge_cases() {
        let stats = SeverityPauseStats::default();
        let mut rng = rng_for(1, "pause", 0);
        for s in 0..N_SEVERITIES {
            assert_eq!(pause_count(1, s, &stats, PauseSampling::Stochastic, &mut rng), 0);
        }
        // deterministic: 4 slots at p = 0.5 -> 2
        let half = SeverityPauseStats {
            groups: [GroupStats { pauses_per_utterance: 2.0, slots_per_utterance: 4.0 }; 3],
        };
        assert_eq!(pause_count(5, 1, &half, PauseSampling::Deterministic, &mut rng), 2);
    }

    #[test]
    fn stochastic_mean_matches_binomial() {
        let stats = SeverityPauseStats {
            groups: [GroupStats { pauses_per_utterance: 1.5, slots_per_utterance: 6.0 }; 3],
        };
        let mut rng = rng_for(7, "pause-mc", 0);
        let n = 100_000;
        let total: usize =
            (0..n).map(|_| pause_count(7, 0, &stats, PauseSampling::Stochastic, &mut rng)).sum();
        let mean = total as f64 / n as f64;
        assert!((mean - 6.0 * 0.25).abs() < 0.02, "binomial mean {mean}");
    }

    #[test]
    fn default_ratios_match_reference() {
        let stats = SeverityPauseStats::default();
        let r1 = stats.groups[1].pauses_per_utterance / stats.groups[0].pauses_per_utterance;
        let r2 = stats.groups[2].pauses_per_utterance / stats.groups[0].pauses_per_utterance;
        assert!((r1 - 3.23).abs() < 0.01, "low/normal ratio {r1}");
        assert!((r2 - 9.65).abs() < 0.01, "moderate/normal ratio {r2}");
    }

    fn three_word_seq() -> PhonemeSequence {
        PhonemeSequence::new(
            ["W", "IY", "L", "AY", "K", "T", "UW"].iter().map(|s| s.to_string()).collect(),
            vec![0, 0, 1, 1, 1, 2, 2],
        )
        .unwrap()
    }

    #[test]
    fn insert_zero_is_identity() {
        let seq = three_word_seq();
        let mut rng = rng_for(3, "ins", 0);
        assert_eq!(insert_pauses(&seq, 0, &mut rng).unwrap(), seq);
    }

    #[test]
    fn insert_all_slots() {
        let seq = three_word_seq();
        let mut rng = rng_for(3, "ins", 1);
        let out = insert_pauses(&seq, 2, &mut rng).unwrap();
        assert_eq!(out.len(), seq.len() + 2);
        assert_eq!(out.tokens[2], PAUSE);
        assert_eq!(out.tokens[6], PAUSE);
        assert_eq!(out.word_index[2], 0);
        assert_eq!(out.word_index[6], 1);
        // every boundary now occupied: no further slots
        assert!(out.inter_word_slots().is_empty());
        assert!(insert_pauses(&seq, 3, &mut rng).is_err());
    }

    #[test]
    fn insertion_never_at_edges_or_adjacent_to_pause() {
        let seq = PhonemeSequence::new(
            ["B", "AE", "D", "AE", "N", "D", "G", "UH", "D", "N", "AW"].iter().map(|s| s.to_string()).collect(),
            vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3],
        )
        .unwrap();
        let mut rng = rng_for(11, "edges", 0);
        for trial in 0..200 {
            let k = trial % 4;
            let out = insert_pauses(&seq, k, &mut rng).unwrap();
            assert_ne!(out.tokens.first().unwrap(), PAUSE);
            assert_ne!(out.tokens.last().unwrap(), PAUSE);
            for w in out.tokens.windows(2) {
                assert!(!(w[0] == PAUSE && w[1] == PAUSE), "adjacent pauses");
            }
        }
    }

    #[test]
    fn slot_pairs_chosen_uniformly() {
        // 4 slots, k = 2: each of the C(4,2)=6 pairs should appear with
        // frequency 1/6 within 0.01 over 1e5 seeded draws.
        let seq = PhonemeSequence::new(
            ["B", "AE", "AE", "N", "G", "UH", "N", "AW", "S", "IY"].iter().map(|s| s.to_string()).collect(),
            vec![0, 0, 1, 1, 2, 2, 3, 3, 4, 4],
        )
        .unwrap();
        let slots = seq.inter_word_slots();
        assert_eq!(slots.len(), 4);
        let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let n = 100_000;
        let mut rng = rng_for(99, "uniform", 0);
        for _ in 0..n {
            let out = insert_pauses(&seq, 2, &mut rng).unwrap();
            let positions: Vec<usize> =
                out.tokens.iter().enumerate().filter(|(_, t)| *t == PAUSE).map(|(i, _)| i).collect();
            assert_eq!(positions.len(), 2);
            *counts.entry((positions[0], positions[1])).or_default() += 1;
        }
        assert_eq!(counts.len(), 6);
        for (&pair, &c) in &counts {
            let freq = c as f64 / n as f64;
            assert!((freq - 1.0 / 6.0).abs() < 0.01, "pair {pair:?} frequency {freq}");
        }
    }

    #[test]
    fn stats_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stats.json");
        let stats = SeverityPauseStats::default();
        stats.save(&path).unwrap();
        assert_eq!(SeverityPauseStats::load(&path).unwrap(), stats);
        let bytes1 = std::fs::read(&path).unwrap();
        SeverityPauseStats::load(&path).unwrap().save(&path).unwrap();
        assert_eq!(bytes1, std::fs::read(&path).unwrap());
    }
}
