//! Deterministic training: corpus loading, the Adam loop, validation and
//! checkpointing.
//!
//! Everything downstream of the config is a pure function of the corpus bytes
//! and the seed: parameter init, the train/validation split, batch order and
//! dropout masks all come from ChaCha streams derived from `TrainConfig::seed`,
//! so reruns produce byte-identical checkpoints.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{load_alignment, load_manifest, read_mel, ProsodyFile, Utterance};
use crate::model::{
    AcousticModel, CheckpointMeta, LossValues, LossWeights, ModelConfig, TrainItem,
};
use crate::nn::scalar::sc;
use crate::nn::{Adam, Scalar, Tape};
use crate::phones;
use crate::prosody::{
    compute_normalization, phoneme_durations, pool_to_phoneme, FrameParams, NormStats, PoolKind,
    ProsodyTargets,
};
use crate::util::rng_for;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub seed: u64,
    pub validation_fraction: f64,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            learning_rate: 1e-3,
            adam_betas: (0.9, 0.98),
            adam_eps: 1e-9,
            seed: 42,
            validation_fraction: 0.1,
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) || self.validation_fraction == 0.0 {
            return Err(Error::Config(format!(
                "validation_fraction {} must lie in (0,1)",
                self.validation_fraction
            )));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config("learning_rate must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// One fully loaded training example before normalization.
pub struct LoadedExample {
    pub id: String,
    pub phone_tokens: Vec<String>,
    pub phone_ids: Vec<usize>,
    pub speaker: String,
    pub severity: usize,
    pub durations: Vec<usize>,
    pub phoneme_pitch: Vec<f64>,
    pub phoneme_energy: Vec<f64>,
    pub frame_pitch: Vec<f64>,
    pub frame_energy: Vec<f64>,
    pub mel: Vec<f32>,
    pub n_frames: usize,
}

pub struct LoadedCorpus {
    pub examples: Vec<LoadedExample>,
    pub speakers: Vec<String>,
}

impl LoadedCorpus {
    pub fn speaker_index(&self, name: &str) -> Result<usize> {
        self.speakers
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| Error::UnknownSpeaker(name.to_string()))
    }
}

fn load_example(base: &Path, utt: &Utterance, params: &FrameParams) -> Result<LoadedExample> {
    let align_rel = utt.alignment.as_ref().ok_or_else(|| Error::InvalidUtterance {
        id: utt.id.clone(),
        msg: "missing alignment path".into(),
    })?;
    let mel_rel = utt.mel.as_ref().ok_or_else(|| Error::InvalidUtterance {
        id: utt.id.clone(),
        msg: "missing mel path".into(),
    })?;
    let alignment = load_alignment(&Utterance::resolve(base, align_rel))?;
    let mel = read_mel(&Utterance::resolve(base, mel_rel))?;

    if alignment.len() != utt.phones.len() {
        return Err(Error::InvalidUtterance {
            id: utt.id.clone(),
            msg: format!("{} aligned segments for {} phones", alignment.len(), utt.phones.len()),
        });
    }
    for (entry, token) in alignment.iter().zip(&utt.phones.tokens) {
        let entry_tok = if entry.phone == phones::SILENCE { phones::PAUSE } else { entry.phone.as_str() };
        if entry_tok != token {
            return Err(Error::InvalidUtterance {
                id: utt.id.clone(),
                msg: format!("alignment phone {entry_tok:?} does not match token {token:?}"),
            });
        }
    }

    let durations = phoneme_durations(&alignment, params, mel.n_frames())?;

    // Per-frame prosody ground truth from the sidecar file.
    let prosody_path = Utterance::resolve(base, std::path::Path::new(&format!("prosody/{}.json", utt.id)));
    let prosody = ProsodyFile::load(&prosody_path)?;
    if prosody.pitch.len() != mel.n_frames() || prosody.energy.len() != mel.n_frames() {
        return Err(Error::InvalidUtterance {
            id: utt.id.clone(),
            msg: format!(
                "prosody file has {} pitch / {} energy frames for {} mel frames",
                prosody.pitch.len(),
                prosody.energy.len(),
                mel.n_frames()
            ),
        });
    }
    let frame_pitch: Vec<f64> = prosody.pitch.iter().map(|&v| v as f64).collect();
    let frame_energy: Vec<f64> = prosody.energy.iter().map(|&v| v as f64).collect();
    let phoneme_pitch = pool_to_phoneme(&frame_pitch, &durations, PoolKind::VoicedMean)?;
    let phoneme_energy = pool_to_phoneme(&frame_energy, &durations, PoolKind::Mean)?;
    let phone_ids: Vec<usize> =
        utt.phones.tokens.iter().map(|t| phones::phone_id(t)).collect::<Result<_>>()?;

    Ok(LoadedExample {
        id: utt.id.clone(),
        phone_tokens: utt.phones.tokens.clone(),
        phone_ids,
        speaker: utt.speaker.clone(),
        severity: utt.severity,
        durations,
        phoneme_pitch,
        phoneme_energy,
        frame_pitch,
        frame_energy,
        n_frames: mel.n_frames(),
        mel: mel.data().to_vec(),
    })
}

/// Load every utterance of a manifest with its alignment, mel and prosody
/// targets. Speakers are collected in first-appearance order.
pub fn load_corpus(manifest_path: &Path, params: &FrameParams) -> Result<LoadedCorpus> {
    let base = manifest_path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let utterances = load_manifest(manifest_path)?;
    if utterances.is_empty() {
        return Err(Error::EmptyInput("corpus manifest has no utterances"));
    }
    let mut speakers: Vec<String> = Vec::new();
    let mut examples = Vec::with_capacity(utterances.len());
    for utt in &utterances {
        if !speakers.contains(&utt.speaker) {
            speakers.push(utt.speaker.clone());
        }
        examples.push(load_example(&base, utt, params)?);
    }
    Ok(LoadedCorpus { examples, speakers })
}

/// Prosody targets of the examples, for normalization.
fn targets_of(examples: &[&LoadedExample]) -> Vec<ProsodyTargets> {
    examples
        .iter()
        .map(|e| ProsodyTargets {
            durations: e.durations.clone(),
            pitch: e.phoneme_pitch.clone(),
            energy: e.phoneme_energy.clone(),
        })
        .collect()
}

/// Normalize one example into a model-ready item.
pub fn to_train_item<T: Scalar>(ex: &LoadedExample, speaker_idx: usize, norm: &NormStats) -> TrainItem<T> {
    let z = |v: f64, mean: f64, std: f64| sc::<T>((v - mean) / std);
    TrainItem {
        id: ex.id.clone(),
        phone_ids: ex.phone_ids.clone(),
        speaker: speaker_idx,
        severity: ex.severity,
        durations: ex.durations.clone(),
        log_dur: ex.durations.iter().map(|&d| sc((1.0 + d as f64).ln())).collect(),
        pitch_z: ex.phoneme_pitch.iter().map(|&p| z(p, norm.pitch_mean, norm.pitch_std)).collect(),
        energy_z: ex.phoneme_energy.iter().map(|&e| z(e, norm.energy_mean, norm.energy_std)).collect(),
        pitch_voiced: ex.phoneme_pitch.iter().map(|&p| p > 0.0).collect(),
        frame_pitch_z: ex.frame_pitch.iter().map(|&p| z(p, norm.pitch_mean, norm.pitch_std)).collect(),
        frame_energy_z: ex.frame_energy.iter().map(|&e| z(e, norm.energy_mean, norm.energy_std)).collect(),
        frame_pitch_voiced: ex.frame_pitch.iter().map(|&p| p > 0.0).collect(),
        mel: ex.mel.iter().map(|&v| T::of_f32(v)).collect(),
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
struct MetricsLine<'a> {
    epoch: usize,
    split: &'a str,
    mel: f64,
    duration: f64,
    pitch: f64,
    energy: f64,
    severity: f64,
    total: f64,
}

fn metrics_line(epoch: usize, split: &str, v: &LossValues) -> String {
    serde_json::to_string(&MetricsLine {
        epoch,
        split,
        mel: v.mel,
        duration: v.duration,
        pitch: v.pitch,
        energy: v.energy,
        severity: v.severity,
        total: v.total,
    })
    .expect("metrics serialization")
}

#[derive(Clone, Debug)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train: LossValues,
    pub val: Option<LossValues>,
}

#[derive(Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub norm: NormStats,
    pub n_train: usize,
    pub n_val: usize,
}

fn mean_losses(acc: &[(LossValues, usize)]) -> LossValues {
    let total_n: usize = acc.iter().map(|(_, n)| n).sum();
    let mut out =
        LossValues { mel: 0.0, duration: 0.0, pitch: 0.0, energy: 0.0, severity: 0.0, total: 0.0 };
    for (v, n) in acc {
        let w = *n as f64 / total_n as f64;
        out.mel += v.mel * w;
        out.duration += v.duration * w;
        out.pitch += v.pitch * w;
        out.energy += v.energy * w;
        out.severity += v.severity * w;
        out.total += v.total * w;
    }
    out
}

/// Teacher-forced loss over a split without touching parameters.
pub fn evaluate(
    model: &AcousticModel<f32>,
    items: &[TrainItem<f32>],
    weights: &LossWeights,
    batch_size: usize,
) -> Result<LossValues> {
    if items.is_empty() {
        return Err(Error::EmptyInput("evaluate on empty split"));
    }
    let mut acc = Vec::new();
    let mut rng = rng_for(0, "eval", 0);
    for batch in items.chunks(batch_size) {
        let tape = Tape::with_mode(false, false);
        let losses = model.training_forward(&tape, batch, weights, &mut rng)?;
        acc.push((losses.values(&tape), batch.len()));
    }
    Ok(mean_losses(&acc))
}

/// Train a model on a loaded corpus; returns the trained model (at its
/// best-validation parameters), the checkpoint metadata and the epoch log.
///
/// The split shuffles utterances once with the run seed and takes
/// `floor(validation_fraction * n)` for validation; a split too small to
/// populate validation falls back to training-only with the final epoch
/// retained.
pub fn train(
    model_config: &ModelConfig,
    config: &TrainConfig,
    corpus: &LoadedCorpus,
    metrics_out: Option<&Path>,
) -> Result<(AcousticModel<f32>, CheckpointMeta, TrainReport)> {
    model_config.validate()?;
    config.validate()?;
    if corpus.examples.is_empty() {
        return Err(Error::EmptyInput("training corpus is empty"));
    }

    // Deterministic split.
    let n = corpus.examples.len();
    let mut order: Vec<usize> = (0..n).collect();
    shuffle(&mut order, &mut rng_for(config.seed, "split", 0));
    let n_val = (config.validation_fraction * n as f64).floor() as usize;
    let (val_idx, train_idx) = order.split_at(n_val);
    if train_idx.is_empty() {
        return Err(Error::Config("validation fraction leaves no training data".into()));
    }

    let train_examples: Vec<&LoadedExample> = train_idx.iter().map(|&i| &corpus.examples[i]).collect();
    let norm = compute_normalization(&targets_of(&train_examples))?;

    let items = |idx: &[usize]| -> Result<Vec<TrainItem<f32>>> {
        idx.iter()
            .map(|&i| {
                let ex = &corpus.examples[i];
                Ok(to_train_item::<f32>(ex, corpus.speaker_index(&ex.speaker)?, &norm))
            })
            .collect()
    };
    let train_items = items(train_idx)?;
    let val_items = items(val_idx)?;

    let mut model = AcousticModel::<f32>::new(model_config, corpus.speakers.len(), config.seed)?;
    let mut opt = Adam::<f32>::new(config.learning_rate, config.adam_betas, config.adam_eps);

    let mut log = String::new();
    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: 0,
        norm,
        n_train: train_items.len(),
        n_val: val_items.len(),
    };
    let mut best_val = f64::INFINITY;
    let mut best_entries = None;

    for epoch in 1..=config.epochs {
        let mut batch_order: Vec<usize> = (0..train_items.len()).collect();
        shuffle(&mut batch_order, &mut rng_for(config.seed, "epoch", epoch as u64));
        let mut acc = Vec::new();
        for (bi, chunk) in batch_order.chunks(config.batch_size).enumerate() {
            let batch: Vec<TrainItem<f32>> = chunk.iter().map(|&i| train_items[i].clone()).collect();
            let tape = Tape::new(true);
            let mut dropout_rng =
                rng_for(config.seed, "dropout", (epoch as u64) << 32 | bi as u64);
            let losses =
                model.training_forward(&tape, &batch, &config.loss_weights, &mut dropout_rng)?;
            let values = losses.values(&tape);
            if !values.total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            let grads = tape.backward(losses.total)?;
            let grad_map = tape.param_gradients(&grads);
            let mut params = model.params_mut();
            opt.step(&mut params, &grad_map);
            acc.push((values, batch.len()));
        }
        let train_metrics = mean_losses(&acc);
        log.push_str(&metrics_line(epoch, "train", &train_metrics));
        log.push('\n');

        let val_metrics = if val_items.is_empty() {
            None
        } else {
            let v = evaluate(&model, &val_items, &config.loss_weights, config.batch_size)?;
            log.push_str(&metrics_line(epoch, "val", &v));
            log.push('\n');
            Some(v)
        };
        let selection = val_metrics.map(|v| v.total).unwrap_or(train_metrics.total);
        if selection < best_val {
            best_val = selection;
            best_entries = Some(model.to_entries());
            report.best_epoch = epoch;
        }
        report.epochs.push(EpochMetrics { epoch, train: train_metrics, val: val_metrics });
    }

    if let Some(entries) = best_entries {
        model.load_entries(&entries)?;
    }
    if let Some(path) = metrics_out {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(log.as_bytes()).map_err(|e| Error::io(path, e))?;
    }
    let meta = CheckpointMeta {
        model: *model_config,
        speakers: corpus.speakers.clone(),
        phones: phones::INVENTORY.iter().map(|s| s.to_string()).collect(),
        norm,
    };
    Ok((model, meta, report))
}

/// Fisher-Yates with an explicit stream.
fn shuffle(indices: &mut [usize], rng: &mut rand_chacha::ChaCha8Rng) {
    use rand::Rng;
    for i in (1..indices.len()).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_toy_corpus, ToyCorpusSpec};

    fn tiny_corpus(dir: &Path, utts: usize) -> LoadedCorpus {
        let spec = ToyCorpusSpec {
            n_speakers_per_severity: 1,
            n_utterances_per_speaker: utts,
            sentence_length_range: (2, 3),
            ..ToyCorpusSpec::default()
        };
        generate_toy_corpus(&spec, dir).unwrap();
        load_corpus(&dir.join("manifest.jsonl"), &FrameParams::default()).unwrap()
    }

    #[test]
    fn corpus_loads_with_consistent_targets() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = tiny_corpus(dir.path(), 3);
        assert_eq!(corpus.examples.len(), 9);
        assert_eq!(corpus.speakers.len(), 3);
        for ex in &corpus.examples {
            assert_eq!(ex.durations.iter().sum::<usize>(), ex.n_frames);
            assert_eq!(ex.phoneme_pitch.len(), ex.phone_ids.len());
            assert_eq!(ex.frame_pitch.len(), ex.n_frames);
        }
    }

    #[test]
    fn validation_split_is_exact_and_disjoint() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = tiny_corpus(dir.path(), 4);
        // 12 utterances? no: 3 severities x 1 speaker x 4 = 12; fraction 0.5 -> 6/6
        let cfg = TrainConfig {
            epochs: 1,
            validation_fraction: 0.5,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let (_m, _meta, report) = train(&ModelConfig::tiny(), &cfg, &corpus, None).unwrap();
        assert_eq!(report.n_train, 6);
        assert_eq!(report.n_val, 6);
    }

    #[test]
    fn training_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = tiny_corpus(dir.path(), 2);
        let cfg = TrainConfig { epochs: 2, batch_size: 3, ..TrainConfig::default() };
        let run = || {
            let (m, _, _) = train(&ModelConfig::tiny(), &cfg, &corpus, None).unwrap();
            m.to_entries()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "same seed must give identical checkpoints");
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = tiny_corpus(dir.path(), 2);
        let cfg = TrainConfig { epochs: 1, learning_rate: 0.0, ..TrainConfig::default() };
        let (m, _, _) = train(&ModelConfig::tiny(), &cfg, &corpus, None).unwrap();
        let fresh = AcousticModel::<f32>::new(&ModelConfig::tiny(), corpus.speakers.len(), cfg.seed).unwrap();
        assert_eq!(m.to_entries(), fresh.to_entries());
    }

    #[test]
    fn evaluate_is_repeatable_and_rejects_empty() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = tiny_corpus(dir.path(), 2);
        let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
        let (m, meta, _) = train(&ModelConfig::tiny(), &cfg, &corpus, None).unwrap();
        let items: Vec<TrainItem<f32>> = corpus
            .examples
            .iter()
            .map(|e| to_train_item(e, corpus.speaker_index(&e.speaker).unwrap(), &meta.norm))
            .collect();
        let a = evaluate(&m, &items, &LossWeights::default(), 4).unwrap();
        let b = evaluate(&m, &items, &LossWeights::default(), 4).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            evaluate(&m, &[], &LossWeights::default(), 4),
            Err(Error::EmptyInput(_))
        ));
    }
}
