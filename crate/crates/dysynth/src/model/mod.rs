//! The severity-conditioned non-autoregressive acoustic model.
//!
//! Phoneme embeddings with sinusoidal positions run through a stack of
//! feed-forward transformer blocks; the speaker embedding is added to the
//! encoder output. The variance adaptor then conditions on a severity
//! embedding (added before the duration/pitch/energy predictors), predicts
//! per-phoneme log-durations, applies pitch and energy either per phoneme
//! (before length regulation, under the source mask) or per frame (after,
//! under the mel mask), expands to frame level, and a second block stack
//! decodes an 80-band mel spectrogram. An auxiliary head classifies the
//! severity from the pre-severity-embedding hidden sequence.
//!
//! Inference-time control: pitch, energy and duration predictions are scaled
//! by coefficients in [0,2] before use, exactly (`applied = coef * predicted`
//! elementwise); severity is a discrete embedding row choice.

mod config;
mod layers;

pub use config::{MaskingMode, ModelConfig, SynthesisControls};
pub use layers::sinusoidal_positions;

use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::N_MELS;
use crate::nn::checkpoint::{self, CheckpointEntry};
use crate::nn::scalar::sc;
use crate::nn::{grad_check, Differentiable, Parameter, Scalar, Tape, Tensor, Var};
use crate::phones;
use crate::prosody::NormStats;
use crate::{Error, Result};

use layers::{Embedding, FftBlock, Linear, VariancePredictor};

/// Mean speech-phone duration (frames) assumed at initialization, so that an
/// untrained checkpoint already predicts usable durations.
const INIT_DURATION_FRAMES: f64 = 6.0;

pub struct AcousticModel<T: Scalar> {
    pub config: ModelConfig,
    phone_emb: Embedding<T>,
    speaker_emb: Embedding<T>,
    severity_emb: Embedding<T>,
    encoder: Vec<FftBlock<T>>,
    duration_pred: VariancePredictor<T>,
    pitch_pred: VariancePredictor<T>,
    energy_pred: VariancePredictor<T>,
    severity_head: VariancePredictor<T>,
    pitch_proj: Linear<T>,
    energy_proj: Linear<T>,
    decoder: Vec<FftBlock<T>>,
    mel_out: Linear<T>,
}

/// One training example with teacher-forcing targets.
#[derive(Clone, Debug)]
pub struct TrainItem<T> {
    pub id: String,
    pub phone_ids: Vec<usize>,
    pub speaker: usize,
    pub severity: usize,
    /// Ground-truth frame counts per phoneme.
    pub durations: Vec<usize>,
    /// log(1 + duration) targets.
    pub log_dur: Vec<T>,
    /// Normalized phoneme-level pitch/energy targets.
    pub pitch_z: Vec<T>,
    pub energy_z: Vec<T>,
    pub pitch_voiced: Vec<bool>,
    /// Normalized frame-level targets (used in frame masking mode).
    pub frame_pitch_z: Vec<T>,
    pub frame_energy_z: Vec<T>,
    pub frame_pitch_voiced: Vec<bool>,
    /// Target mel, `sum(durations) x 80` row-major.
    pub mel: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub mel: f64,
    pub duration: f64,
    pub pitch: f64,
    pub energy: f64,
    pub severity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { mel: 1.0, duration: 1.0, pitch: 1.0, energy: 1.0, severity: 1.0 }
    }
}

/// Tape handles for each loss component.
pub struct LossVars {
    pub mel: Var,
    pub duration: Var,
    pub pitch: Var,
    pub energy: Var,
    pub severity: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub mel: f64,
    pub duration: f64,
    pub pitch: f64,
    pub energy: f64,
    pub severity: f64,
    pub total: f64,
}

impl LossVars {
    pub fn values<T: Scalar>(&self, tape: &Tape<T>) -> LossValues {
        let get = |v: Var| tape.value(v).item().as_f64();
        LossValues {
            mel: get(self.mel),
            duration: get(self.duration),
            pitch: get(self.pitch),
            energy: get(self.energy),
            severity: get(self.severity),
            total: get(self.total),
        }
    }
}

/// Everything a synthesis run produces besides the report bookkeeping.
#[derive(Clone, Debug)]
pub struct InferenceOutput {
    /// Row-major `n_frames x 80` mel.
    pub mel: Vec<f32>,
    pub n_frames: usize,
    /// Per-phoneme predicted duration in frames, before the coefficient.
    pub duration_pre: Vec<f64>,
    /// `duration_coef * duration_pre`, before rounding.
    pub duration_applied: Vec<f64>,
    /// Rounded, clamped frame counts actually used.
    pub durations: Vec<usize>,
    /// Predicted pitch in Hz before/after the coefficient. Phoneme-level in
    /// phoneme masking mode, frame-level in frame mode.
    pub pitch_pre: Vec<f64>,
    pub pitch_applied: Vec<f64>,
    pub energy_pre: Vec<f64>,
    pub energy_applied: Vec<f64>,
}

struct PaddedBatch<T> {
    b: usize,
    l_max: usize,
    ids: Vec<usize>,
    speaker_ids: Vec<usize>,
    src_valid: Vec<bool>,
    _marker: std::marker::PhantomData<T>,
}

fn pad_rows<T: Scalar>(rows: &[Vec<usize>], speakers: &[usize]) -> PaddedBatch<T> {
    let b = rows.len();
    let l_max = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut ids = vec![0usize; b * l_max];
    let mut speaker_ids = vec![0usize; b * l_max];
    let mut src_valid = vec![false; b * l_max];
    for (bi, row) in rows.iter().enumerate() {
        for (li, &id) in row.iter().enumerate() {
            ids[bi * l_max + li] = id;
            src_valid[bi * l_max + li] = true;
        }
        for li in 0..l_max {
            speaker_ids[bi * l_max + li] = speakers[bi];
        }
    }
    PaddedBatch { b, l_max, ids, speaker_ids, src_valid, _marker: std::marker::PhantomData }
}

impl<T: Scalar> AcousticModel<T> {
    pub fn new(config: &ModelConfig, n_speakers: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if n_speakers == 0 {
            return Err(Error::Config("model needs at least one speaker".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden;
        let mut encoder = Vec::new();
        for i in 0..config.n_encoder_blocks {
            encoder.push(FftBlock::new(
                &format!("enc.{i}"),
                h,
                config.ff_hidden,
                config.ff_conv_kernel,
                config.n_heads,
                config.block_dropout,
                &mut rng,
            ));
        }
        let mut decoder = Vec::new();
        for i in 0..config.n_decoder_blocks {
            decoder.push(FftBlock::new(
                &format!("dec.{i}"),
                h,
                config.ff_hidden,
                config.ff_conv_kernel,
                config.n_heads,
                config.block_dropout,
                &mut rng,
            ));
        }
        let k = config.predictor_conv_kernel;
        let dr = config.predictor_dropout;
        let mut duration_pred = VariancePredictor::new("adaptor.duration", h, k, 1, dr, &mut rng);
        // Bias the untrained duration predictor toward a plausible phone length.
        duration_pred.out.b.value.data_mut()[0] = sc((1.0 + INIT_DURATION_FRAMES).ln());
        let model = Self {
            config: *config,
            phone_emb: Embedding::new("embed.phone", phones::vocab_size(), h, &mut rng),
            speaker_emb: Embedding::new("embed.speaker", n_speakers, h, &mut rng),
            severity_emb: Embedding::new("embed.severity", config.n_severities, h, &mut rng),
            encoder,
            duration_pred,
            pitch_pred: VariancePredictor::new("adaptor.pitch", h, k, 1, dr, &mut rng),
            energy_pred: VariancePredictor::new("adaptor.energy", h, k, 1, dr, &mut rng),
            severity_head: VariancePredictor::new("adaptor.severity_head", h, k, config.n_severities, dr, &mut rng),
            pitch_proj: Linear::new("adaptor.pitch_proj", 1, h, &mut rng),
            energy_proj: Linear::new("adaptor.energy_proj", 1, h, &mut rng),
            decoder,
            mel_out: Linear::new("dec.mel_out", h, N_MELS, &mut rng),
        };
        Ok(model)
    }

    pub fn n_speakers(&self) -> usize {
        self.speaker_emb.rows()
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut p = Vec::new();
        p.extend(self.phone_emb.params());
        p.extend(self.speaker_emb.params());
        p.extend(self.severity_emb.params());
        for b in &self.encoder {
            p.extend(b.params());
        }
        p.extend(self.duration_pred.params());
        p.extend(self.pitch_pred.params());
        p.extend(self.energy_pred.params());
        p.extend(self.severity_head.params());
        p.extend(self.pitch_proj.params());
        p.extend(self.energy_proj.params());
        for b in &self.decoder {
            p.extend(b.params());
        }
        p.extend(self.mel_out.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut p = Vec::new();
        p.extend(self.phone_emb.params_mut());
        p.extend(self.speaker_emb.params_mut());
        p.extend(self.severity_emb.params_mut());
        for b in &mut self.encoder {
            p.extend(b.params_mut());
        }
        p.extend(self.duration_pred.params_mut());
        p.extend(self.pitch_pred.params_mut());
        p.extend(self.energy_pred.params_mut());
        p.extend(self.severity_head.params_mut());
        p.extend(self.pitch_proj.params_mut());
        p.extend(self.energy_proj.params_mut());
        for b in &mut self.decoder {
            p.extend(b.params_mut());
        }
        p.extend(self.mel_out.params_mut());
        p
    }

    /// Zero a severity embedding row (testing hook for conditioning checks).
    pub fn zero_severity_embeddings(&mut self) {
        for v in self.severity_emb.table.value.data_mut() {
            *v = T::zero();
        }
    }

    fn check_inputs(&self, rows: &[Vec<usize>], speakers: &[usize]) -> Result<()> {
        let vocab = phones::vocab_size();
        for row in rows {
            if row.is_empty() {
                return Err(Error::EmptyInput("encode: empty phoneme sequence"));
            }
            if let Some(&bad) = row.iter().find(|&&id| id >= vocab) {
                return Err(Error::UnknownPhoneme(format!("id {bad}")));
            }
        }
        for &s in speakers {
            if s >= self.n_speakers() {
                return Err(Error::UnknownSpeaker(format!("id {s}")));
            }
        }
        Ok(())
    }

    /// Embed, position-encode and run the encoder blocks; the speaker
    /// embedding row is added to every output position.
    ///
    /// Returns the hidden sequence `(B, L_max, hidden)` and the source mask.
    pub fn encode(
        &self,
        tape: &Tape<T>,
        rows: &[Vec<usize>],
        speakers: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Vec<bool>, usize)> {
        self.check_inputs(rows, speakers)?;
        let padded = pad_rows::<T>(rows, speakers);
        let (b, l_max) = (padded.b, padded.l_max);
        let mut x = self.phone_emb.forward(tape, &padded.ids, b, l_max)?;
        let pe = tile_positions::<T>(b, l_max, self.config.hidden);
        let pe = tape.leaf(pe);
        x = tape.add(x, pe)?;
        x = tape.mask_positions(x, &padded.src_valid)?;
        for block in &self.encoder {
            x = block.forward(tape, x, &padded.src_valid, rng)?;
        }
        let spk = self.speaker_emb.forward(tape, &padded.speaker_ids, b, l_max)?;
        x = tape.add(x, spk)?;
        x = tape.mask_positions(x, &padded.src_valid)?;
        Ok((x, padded.src_valid, l_max))
    }

    fn severity_logits(
        &self,
        tape: &Tape<T>,
        hidden: Var,
        src_valid: &[bool],
        b: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let pooled = tape.masked_mean_pool(hidden, src_valid)?;
        let pooled = tape.reshape(pooled, &[b, 1, self.config.hidden])?;
        let logits = self.severity_head.forward(tape, pooled, &vec![true; b], rng)?;
        tape.reshape(logits, &[b, self.config.n_severities])
    }

    fn add_severity(
        &self,
        tape: &Tape<T>,
        x: Var,
        severities: &[usize],
        b: usize,
        l_max: usize,
        src_valid: &[bool],
    ) -> Result<Var> {
        let mut ids = vec![0usize; b * l_max];
        for bi in 0..b {
            for li in 0..l_max {
                ids[bi * l_max + li] = severities[bi];
            }
        }
        let sev = self.severity_emb.forward(tape, &ids, b, l_max)?;
        let x = tape.add(x, sev)?;
        tape.mask_positions(x, src_valid)
    }

    fn project_scalar_track(
        &self,
        tape: &Tape<T>,
        x: Var,
        proj: &Linear<T>,
        values: Tensor<T>,
        valid: &[bool],
    ) -> Result<Var> {
        let v = tape.leaf(values);
        let emb = proj.forward(tape, v)?;
        let x = tape.add(x, emb)?;
        tape.mask_positions(x, valid)
    }

    /// Teacher-forced forward pass over a padded batch, producing the loss
    /// components and their weighted total.
    pub fn training_forward(
        &self,
        tape: &Tape<T>,
        batch: &[TrainItem<T>],
        weights: &LossWeights,
        rng: &mut ChaCha8Rng,
    ) -> Result<LossVars> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("training_forward on empty batch"));
        }
        for item in batch {
            let l = item.phone_ids.len();
            if item.durations.len() != l || item.pitch_z.len() != l || item.energy_z.len() != l {
                return Err(Error::InvalidUtterance {
                    id: item.id.clone(),
                    msg: "target lengths disagree with phoneme count".into(),
                });
            }
            let t: usize = item.durations.iter().sum();
            if item.mel.len() != t * N_MELS {
                return Err(Error::InvalidUtterance {
                    id: item.id.clone(),
                    msg: format!("mel has {} values for {t} frames", item.mel.len()),
                });
            }
        }
        let b = batch.len();
        let rows: Vec<Vec<usize>> = batch.iter().map(|i| i.phone_ids.clone()).collect();
        let speakers: Vec<usize> = batch.iter().map(|i| i.speaker).collect();
        let severities: Vec<usize> = batch.iter().map(|i| i.severity).collect();
        let (x, src_valid, l_max) = self.encode(tape, &rows, &speakers, rng)?;

        // Severity head sees the pre-severity-embedding sequence.
        let sev_logits = self.severity_logits(tape, x, &src_valid, b, rng)?;
        let x = self.add_severity(tape, x, &severities, b, l_max, &src_valid)?;

        let d_hat = self.duration_pred.forward(tape, x, &src_valid, rng)?;

        // Padded duration rows for the regulator and the mel mask.
        let durations: Vec<Vec<usize>> = batch
            .iter()
            .map(|i| {
                let mut d = i.durations.clone();
                d.resize(l_max, 0);
                d
            })
            .collect();
        let totals: Vec<usize> = durations.iter().map(|d| d.iter().sum()).collect();
        let t_max = *totals.iter().max().unwrap();
        let mut mel_valid = vec![false; b * t_max];
        for bi in 0..b {
            for t in 0..totals[bi] {
                mel_valid[bi * t_max + t] = true;
            }
        }

        let pad2 = |get: &dyn Fn(&TrainItem<T>) -> &[T], len: usize| -> Tensor<T> {
            let mut data = vec![T::zero(); b * len];
            for (bi, item) in batch.iter().enumerate() {
                let src = get(item);
                data[bi * len..][..src.len()].copy_from_slice(src);
            }
            Tensor::new(&[b, len, 1], data).unwrap()
        };

        let (p_hat, e_hat, frames, pitch_loss_mask, pe_loss_valid_len) = match self.config.masking_mode {
            MaskingMode::Phoneme => {
                let p_hat = self.pitch_pred.forward(tape, x, &src_valid, rng)?;
                let pitch_targets = pad2(&|i| &i.pitch_z, l_max);
                let x = self.project_scalar_track(tape, x, &self.pitch_proj, pitch_targets, &src_valid)?;
                let e_hat = self.energy_pred.forward(tape, x, &src_valid, rng)?;
                let energy_targets = pad2(&|i| &i.energy_z, l_max);
                let x = self.project_scalar_track(tape, x, &self.energy_proj, energy_targets, &src_valid)?;
                let frames = tape.length_regulate(x, &durations)?;
                let mut voiced = vec![false; b * l_max];
                for (bi, item) in batch.iter().enumerate() {
                    for (li, &v) in item.pitch_voiced.iter().enumerate() {
                        voiced[bi * l_max + li] = v && src_valid[bi * l_max + li];
                    }
                }
                (p_hat, e_hat, frames, voiced, l_max)
            }
            MaskingMode::Frame => {
                let frames = tape.length_regulate(x, &durations)?;
                let p_hat = self.pitch_pred.forward(tape, frames, &mel_valid, rng)?;
                let pitch_targets = pad2(&|i| &i.frame_pitch_z, t_max);
                let frames =
                    self.project_scalar_track(tape, frames, &self.pitch_proj, pitch_targets, &mel_valid)?;
                let e_hat = self.energy_pred.forward(tape, frames, &mel_valid, rng)?;
                let energy_targets = pad2(&|i| &i.frame_energy_z, t_max);
                let frames =
                    self.project_scalar_track(tape, frames, &self.energy_proj, energy_targets, &mel_valid)?;
                let mut voiced = vec![false; b * t_max];
                for (bi, item) in batch.iter().enumerate() {
                    for (fi, &v) in item.frame_pitch_voiced.iter().enumerate() {
                        voiced[bi * t_max + fi] = v && mel_valid[bi * t_max + fi];
                    }
                }
                (p_hat, e_hat, frames, voiced, t_max)
            }
        };

        let mel_pred = self.decode(tape, frames, &mel_valid, rng)?;

        // Targets.
        let mut mel_target = vec![T::zero(); b * t_max * N_MELS];
        for (bi, item) in batch.iter().enumerate() {
            mel_target[bi * t_max * N_MELS..][..item.mel.len()].copy_from_slice(&item.mel);
        }
        let mel_target = Tensor::new(&[b, t_max, N_MELS], mel_target)?;
        let dur_target = pad2(&|i| &i.log_dur, l_max);
        let (pitch_target, energy_target) = match self.config.masking_mode {
            MaskingMode::Phoneme => (pad2(&|i| &i.pitch_z, l_max), pad2(&|i| &i.energy_z, l_max)),
            MaskingMode::Frame => (pad2(&|i| &i.frame_pitch_z, t_max), pad2(&|i| &i.frame_energy_z, t_max)),
        };
        let energy_mask = match self.config.masking_mode {
            MaskingMode::Phoneme => &src_valid,
            MaskingMode::Frame => &mel_valid,
        };

        let mel_loss = tape.masked_mse(mel_pred, &mel_target, &mel_valid)?;
        let dur_loss = tape.masked_mse(d_hat, &dur_target, &src_valid)?;
        let pitch_loss = if pitch_loss_mask.iter().any(|&v| v) {
            debug_assert_eq!(pitch_loss_mask.len(), b * pe_loss_valid_len);
            tape.masked_mse(p_hat, &pitch_target, &pitch_loss_mask)?
        } else {
            tape.leaf(Tensor::scalar(T::zero()))
        };
        let energy_loss = tape.masked_mse(e_hat, &energy_target, energy_mask)?;
        let sev_loss = tape.cross_entropy(sev_logits, &severities)?;

        let mut total = tape.scale(mel_loss, sc(weights.mel))?;
        for (loss, w) in [
            (dur_loss, weights.duration),
            (pitch_loss, weights.pitch),
            (energy_loss, weights.energy),
            (sev_loss, weights.severity),
        ] {
            let scaled = tape.scale(loss, sc(w))?;
            total = tape.add(total, scaled)?;
        }
        Ok(LossVars {
            mel: mel_loss,
            duration: dur_loss,
            pitch: pitch_loss,
            energy: energy_loss,
            severity: sev_loss,
            total,
        })
    }

    /// Run the decoder blocks and mel projection on a frame-level sequence.
    pub fn decode(
        &self,
        tape: &Tape<T>,
        frames: Var,
        mel_valid: &[bool],
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let shape = tape.shape(frames);
        let (b, t_max) = (shape[0], shape[1]);
        if t_max == 0 {
            return Err(Error::EmptyInput("decode on empty frame sequence"));
        }
        let pe = tape.leaf(tile_positions::<T>(b, t_max, self.config.hidden));
        let mut y = tape.add(frames, pe)?;
        y = tape.mask_positions(y, mel_valid)?;
        for block in &self.decoder {
            y = block.forward(tape, y, mel_valid, rng)?;
        }
        self.mel_out.forward(tape, y)
    }

    /// Synthesize one utterance.
    ///
    /// `duration_pre_override` substitutes externally computed pre-coefficient
    /// durations position-by-position (used to keep speech-phone durations
    /// fixed when pause tokens are spliced into the sequence).
    pub fn infer(
        &self,
        phone_ids: &[usize],
        speaker: usize,
        controls: &SynthesisControls,
        norm: &NormStats,
        duration_pre_override: Option<&[Option<f64>]>,
    ) -> Result<InferenceOutput> {
        controls.validate()?;
        norm.validate()?;
        let tape = Tape::inference();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rng = &mut rng;
        let l = phone_ids.len();
        let (x, valid, _) = self.encode(&tape, &[phone_ids.to_vec()], &[speaker], rng)?;
        let x = self.add_severity(&tape, x, &[controls.severity], 1, l, &valid)?;

        // Durations.
        let d_hat = self.duration_pred.forward(&tape, x, &valid, rng)?;
        let d_hat = tape.value(d_hat);
        let mut duration_pre: Vec<f64> = d_hat.data().iter().map(|v| v.as_f64().exp() - 1.0).collect();
        if let Some(over) = duration_pre_override {
            if over.len() != l {
                return Err(Error::Invalid(format!("duration override has {} entries for {l} phones", over.len())));
            }
            for (d, o) in duration_pre.iter_mut().zip(over) {
                if let Some(v) = o {
                    *d = *v;
                }
            }
        }
        let duration_applied: Vec<f64> = duration_pre.iter().map(|&d| controls.duration_coef * d).collect();
        let durations: Vec<usize> = duration_applied
            .iter()
            .zip(phone_ids)
            .map(|(&d, &id)| {
                let floor: i64 = if phones::INVENTORY[id] == phones::PAUSE { 0 } else { 1 };
                (d.round() as i64).max(floor).max(0) as usize
            })
            .collect();
        let total: usize = durations.iter().sum();
        if total == 0 {
            return Err(Error::EmptyInput("all durations rounded to zero"));
        }

        let denorm_clamp = |z: f64, mean: f64, std: f64| (z * std + mean).max(0.0);
        let renorm = |v: f64, mean: f64, std: f64| (v - mean) / std;

        let (mel_var, pitch_pre, pitch_applied, energy_pre, energy_applied, mel_valid);
        match self.config.masking_mode {
            MaskingMode::Phoneme => {
                let p_hat = self.pitch_pred.forward(&tape, x, &valid, rng)?;
                let p_pre: Vec<f64> = tape
                    .value(p_hat)
                    .data()
                    .iter()
                    .map(|v| denorm_clamp(v.as_f64(), norm.pitch_mean, norm.pitch_std))
                    .collect();
                let p_app: Vec<f64> = p_pre.iter().map(|&v| controls.pitch_coef * v).collect();
                let p_z: Vec<T> =
                    p_app.iter().map(|&v| sc(renorm(v, norm.pitch_mean, norm.pitch_std))).collect();
                let x = self.project_scalar_track(
                    &tape,
                    x,
                    &self.pitch_proj,
                    Tensor::new(&[1, l, 1], p_z)?,
                    &valid,
                )?;
                let e_hat = self.energy_pred.forward(&tape, x, &valid, rng)?;
                let e_pre: Vec<f64> = tape
                    .value(e_hat)
                    .data()
                    .iter()
                    .map(|v| denorm_clamp(v.as_f64(), norm.energy_mean, norm.energy_std))
                    .collect();
                let e_app: Vec<f64> = e_pre.iter().map(|&v| controls.energy_coef * v).collect();
                let e_z: Vec<T> =
                    e_app.iter().map(|&v| sc(renorm(v, norm.energy_mean, norm.energy_std))).collect();
                let x = self.project_scalar_track(
                    &tape,
                    x,
                    &self.energy_proj,
                    Tensor::new(&[1, l, 1], e_z)?,
                    &valid,
                )?;
                let frames = tape.length_regulate(x, &[durations.clone()])?;
                mel_valid = vec![true; total];
                mel_var = self.decode(&tape, frames, &mel_valid, rng)?;
                pitch_pre = p_pre;
                pitch_applied = p_app;
                energy_pre = e_pre;
                energy_applied = e_app;
            }
            MaskingMode::Frame => {
                let frames = tape.length_regulate(x, &[durations.clone()])?;
                mel_valid = vec![true; total];
                let p_hat = self.pitch_pred.forward(&tape, frames, &mel_valid, rng)?;
                let p_pre: Vec<f64> = tape
                    .value(p_hat)
                    .data()
                    .iter()
                    .map(|v| denorm_clamp(v.as_f64(), norm.pitch_mean, norm.pitch_std))
                    .collect();
                let p_app: Vec<f64> = p_pre.iter().map(|&v| controls.pitch_coef * v).collect();
                let p_z: Vec<T> =
                    p_app.iter().map(|&v| sc(renorm(v, norm.pitch_mean, norm.pitch_std))).collect();
                let frames = self.project_scalar_track(
                    &tape,
                    frames,
                    &self.pitch_proj,
                    Tensor::new(&[1, total, 1], p_z)?,
                    &mel_valid,
                )?;
                let e_hat = self.energy_pred.forward(&tape, frames, &mel_valid, rng)?;
                let e_pre: Vec<f64> = tape
                    .value(e_hat)
                    .data()
                    .iter()
                    .map(|v| denorm_clamp(v.as_f64(), norm.energy_mean, norm.energy_std))
                    .collect();
                let e_app: Vec<f64> = e_pre.iter().map(|&v| controls.energy_coef * v).collect();
                let e_z: Vec<T> =
                    e_app.iter().map(|&v| sc(renorm(v, norm.energy_mean, norm.energy_std))).collect();
                let frames = self.project_scalar_track(
                    &tape,
                    frames,
                    &self.energy_proj,
                    Tensor::new(&[1, total, 1], e_z)?,
                    &mel_valid,
                )?;
                mel_var = self.decode(&tape, frames, &mel_valid, rng)?;
                pitch_pre = p_pre;
                pitch_applied = p_app;
                energy_pre = e_pre;
                energy_applied = e_app;
            }
        }
        let mel_tensor = tape.value(mel_var);
        mel_tensor.check_finite("synthesized mel")?;
        Ok(InferenceOutput {
            mel: mel_tensor.to_f32_vec(),
            n_frames: total,
            duration_pre,
            duration_applied,
            durations,
            pitch_pre,
            pitch_applied,
            energy_pre,
            energy_applied,
        })
    }

    // ------------------------------------------------------------------
    // checkpointing
    // ------------------------------------------------------------------

    pub fn to_entries(&self) -> Vec<CheckpointEntry> {
        self.params()
            .into_iter()
            .map(|p| CheckpointEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.to_f32_vec(),
            })
            .collect()
    }

    pub fn load_entries(&mut self, entries: &[CheckpointEntry]) -> Result<()> {
        let mut by_name: std::collections::BTreeMap<&str, &CheckpointEntry> =
            entries.iter().map(|e| (e.name.as_str(), e)).collect();
        for p in self.params_mut() {
            let e = by_name.remove(p.name.as_str()).ok_or_else(|| {
                Error::Checkpoint(format!("missing parameter {} in checkpoint", p.name))
            })?;
            if e.shape != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {}: checkpoint shape {:?} vs model {:?}",
                    p.name,
                    e.shape,
                    p.value.shape()
                )));
            }
            let data: Vec<T> = e.data.iter().map(|&v| T::of_f32(v)).collect();
            p.value = Tensor::new(&e.shape, data)?;
        }
        if let Some((name, _)) = by_name.into_iter().next() {
            return Err(Error::Checkpoint(format!("checkpoint has unknown parameter {name}")));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.to_entries(), path)
    }
}

/// Hyperparameters and corpus metadata stored as JSON next to a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub speakers: Vec<String>,
    pub phones: Vec<String>,
    pub norm: NormStats,
}

impl CheckpointMeta {
    pub fn meta_path(ckpt: &Path) -> std::path::PathBuf {
        let mut p = ckpt.as_os_str().to_owned();
        p.push(".json");
        std::path::PathBuf::from(p)
    }

    pub fn save(&self, ckpt_path: &Path) -> Result<()> {
        let path = Self::meta_path(ckpt_path);
        let text = serde_json::to_string_pretty(self).expect("meta serialization");
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(ckpt_path: &Path) -> Result<Self> {
        let path = Self::meta_path(ckpt_path);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Parse { path, line: e.line(), msg: e.to_string() })?;
        meta.model.validate()?;
        meta.norm.validate()?;
        let inventory: Vec<String> = phones::INVENTORY.iter().map(|s| s.to_string()).collect();
        if meta.phones != inventory {
            return Err(Error::Checkpoint("checkpoint phone inventory differs from this build".into()));
        }
        Ok(meta)
    }

    pub fn speaker_index(&self, speaker: &str) -> Result<usize> {
        self.speakers
            .iter()
            .position(|s| s == speaker)
            .ok_or_else(|| Error::UnknownSpeaker(speaker.to_string()))
    }
}

/// Load a model and its metadata from a checkpoint pair.
pub fn load_model(ckpt_path: &Path) -> Result<(AcousticModel<f32>, CheckpointMeta)> {
    let meta = CheckpointMeta::load(ckpt_path)?;
    let entries = checkpoint::load(ckpt_path)?;
    let mut model = AcousticModel::<f32>::new(&meta.model, meta.speakers.len(), 0)?;
    model.load_entries(&entries)?;
    Ok((model, meta))
}

fn tile_positions<T: Scalar>(b: usize, len: usize, dim: usize) -> Tensor<T> {
    let pe = sinusoidal_positions::<T>(len, dim);
    let mut data = Vec::with_capacity(b * len * dim);
    for _ in 0..b {
        data.extend_from_slice(pe.data());
    }
    Tensor::new(&[b, len, dim], data).expect("tiled positions")
}

// ----------------------------------------------------------------------
// full-model gradient check harness
// ----------------------------------------------------------------------

/// A model plus one fixed batch, packaged for finite-difference checking.
pub struct GradCheckHarness<T: Scalar> {
    pub model: AcousticModel<T>,
    pub batch: Vec<TrainItem<T>>,
    pub weights: LossWeights,
}

impl<T: Scalar> Differentiable<T> for GradCheckHarness<T> {
    fn forward_loss(&self, tape: &Tape<T>) -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        Ok(self.model.training_forward(tape, &self.batch, &self.weights, &mut rng)?.total)
    }
    fn parameters(&self) -> Vec<&Parameter<T>> {
        self.model.params()
    }
    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.model.params_mut()
    }
}

/// A small synthetic four-phoneme batch for gradient checking.
pub fn tiny_train_batch<T: Scalar>() -> Vec<TrainItem<T>> {
    let durations = vec![2usize, 3, 1, 2];
    let total: usize = durations.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    use rand::Rng as _;
    let mel: Vec<T> = (0..total * N_MELS).map(|_| sc(rng.gen_range(0.0..1.0))).collect();
    let frame_pitch_z: Vec<T> = (0..total).map(|_| sc(rng.gen_range(-1.0..1.0))).collect();
    let frame_energy_z: Vec<T> = (0..total).map(|_| sc(rng.gen_range(-1.0..1.0))).collect();
    vec![TrainItem {
        id: "gc".into(),
        phone_ids: vec![1, 7, 2, 0],
        speaker: 0,
        severity: 1,
        durations: durations.clone(),
        log_dur: durations.iter().map(|&d| sc((1.0 + d as f64).ln())).collect(),
        pitch_z: vec![sc(0.5), sc(-0.2), sc(1.1), sc(0.0)],
        energy_z: vec![sc(0.1), sc(0.4), sc(-0.6), sc(-1.0)],
        pitch_voiced: vec![true, true, true, false],
        frame_pitch_z,
        frame_energy_z,
        frame_pitch_voiced: (0..total).map(|i| i % 3 != 2).collect(),
        mel,
    }]
}

/// Finite-difference check of the full model at tiny geometry.
pub fn full_model_grad_check(masking: MaskingMode) -> Result<f64> {
    let mut config = ModelConfig::tiny();
    config.masking_mode = masking;
    let model = AcousticModel::<f64>::new(&config, 2, 31)?;
    let mut harness =
        GradCheckHarness { model, batch: tiny_train_batch::<f64>(), weights: LossWeights::default() };
    grad_check(&mut harness, 1e-4)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model() -> AcousticModel<f32> {
        AcousticModel::<f32>::new(&ModelConfig::tiny(), 3, 5).unwrap()
    }

    #[test]
    fn parameter_names_unique() {
        let m = small_model();
        let names: Vec<&str> = m.params().iter().map(|p| p.name.as_str()).collect();
        let mut sorted = names.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len(), "duplicate parameter names");
    }

    #[test]
    fn encode_shape_contract() {
        let m = small_model();
        let tape = Tape::inference();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (x, valid, l) = m.encode(&tape, &[vec![1, 2, 3, 4, 5, 6, 7]], &[0], &mut rng).unwrap();
        assert_eq!(tape.shape(x), vec![1, 7, ModelConfig::tiny().hidden]);
        assert_eq!(l, 7);
        assert!(valid.iter().all(|&v| v));
    }

    #[test]
    fn encode_rejects_unknown_ids() {
        let m = small_model();
        let tape = Tape::inference();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            m.encode(&tape, &[vec![1, 999]], &[0], &mut rng),
            Err(Error::UnknownPhoneme(_))
        ));
        assert!(matches!(
            m.encode(&tape, &[vec![1, 2]], &[9], &mut rng),
            Err(Error::UnknownSpeaker(_))
        ));
    }

    #[test]
    fn speaker_difference_is_embedding_row_difference() {
        let m = small_model();
        let tape = Tape::inference();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ids = vec![1usize, 5, 9];
        let (a, _, _) = m.encode(&tape, &[ids.clone()], &[0], &mut rng).unwrap();
        let (b, _, _) = m.encode(&tape, &[ids], &[1], &mut rng).unwrap();
        let av = tape.value(a);
        let bv = tape.value(b);
        let h = m.config.hidden;
        let table = &m.speaker_emb.table.value;
        for pos in 0..3 {
            for j in 0..h {
                let diff = av.data()[pos * h + j] - bv.data()[pos * h + j];
                let row_diff = table.data()[j] - table.data()[h + j];
                assert!((diff - row_diff).abs() < 1e-5, "pos {pos} dim {j}");
            }
        }
    }

    #[test]
    fn zeroed_severity_rows_make_severities_identical() {
        let mut m = small_model();
        m.zero_severity_embeddings();
        let norm = NormStats {
            pitch_mean: 150.0,
            pitch_std: 40.0,
            energy_mean: 0.5,
            energy_std: 0.2,
            log_duration_mean: 2.0,
            log_duration_std: 0.5,
        };
        let ids = vec![1usize, 7, 2];
        let mut outs = Vec::new();
        for sev in 0..3 {
            let controls = SynthesisControls { severity: sev, ..SynthesisControls::default() };
            outs.push(m.infer(&ids, 0, &controls, &norm, None).unwrap());
        }
        assert_eq!(outs[0].mel, outs[1].mel);
        assert_eq!(outs[1].mel, outs[2].mel);
        assert_eq!(outs[0].durations, outs[2].durations);
    }

    #[test]
    fn batch_extension_does_not_change_first_item() {
        let m = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tape1 = Tape::inference();
        let (a, _, _) = m.encode(&tape1, &[vec![1, 2, 3, 4, 5]], &[0], &mut rng).unwrap();
        let tape2 = Tape::inference();
        let (b, _, l_max) = m
            .encode(&tape2, &[vec![1, 2, 3, 4, 5], vec![6, 7]], &[0, 1], &mut rng)
            .unwrap();
        let av = tape1.value(a);
        let bv = tape2.value(b);
        let h = m.config.hidden;
        assert_eq!(l_max, 5);
        for pos in 0..5 {
            for j in 0..h {
                let d = (av.data()[pos * h + j] - bv.data()[pos * h + j]).abs();
                assert!(d < 1e-5, "padding changed unpadded output by {d}");
            }
        }
    }

    #[test]
    fn duration_coefficient_doubles_pre_rounding_durations() {
        let m = small_model();
        let norm = NormStats {
            pitch_mean: 150.0,
            pitch_std: 40.0,
            energy_mean: 0.5,
            energy_std: 0.2,
            log_duration_mean: 2.0,
            log_duration_std: 0.5,
        };
        let ids = vec![1usize, 7, 2, 20];
        let base = SynthesisControls::default();
        let o1 = m.infer(&ids, 0, &base, &norm, None).unwrap();
        let doubled = SynthesisControls { duration_coef: 2.0, ..base.clone() };
        let o2 = m.infer(&ids, 0, &doubled, &norm, None).unwrap();
        for (a, b) in o1.duration_applied.iter().zip(&o2.duration_applied) {
            assert_eq!(*b, 2.0 * *a);
        }
        assert_eq!(o1.duration_pre, o2.duration_pre);
    }

    #[test]
    fn pitch_coefficient_zero_silences_applied_pitch() {
        let m = small_model();
        let norm = NormStats {
            pitch_mean: 150.0,
            pitch_std: 40.0,
            energy_mean: 0.5,
            energy_std: 0.2,
            log_duration_mean: 2.0,
            log_duration_std: 0.5,
        };
        let controls = SynthesisControls { pitch_coef: 0.0, ..SynthesisControls::default() };
        let out = m.infer(&[1, 7, 2], 0, &controls, &norm, None).unwrap();
        assert!(out.pitch_applied.iter().all(|&v| v == 0.0));
        // law: applied == coef * pre, elementwise, exactly
        let c = SynthesisControls { pitch_coef: 1.7, energy_coef: 0.3, ..SynthesisControls::default() };
        let out = m.infer(&[1, 7, 2], 0, &c, &norm, None).unwrap();
        for (pre, app) in out.pitch_pre.iter().zip(&out.pitch_applied) {
            assert_eq!(*app, 1.7 * *pre);
        }
        for (pre, app) in out.energy_pre.iter().zip(&out.energy_applied) {
            assert_eq!(*app, 0.3 * *pre);
        }
    }

    #[test]
    fn teacher_forced_frame_count_matches_targets() {
        let m = AcousticModel::<f64>::new(&ModelConfig::tiny(), 2, 3).unwrap();
        let batch = tiny_train_batch::<f64>();
        let tape = Tape::new(false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let losses = m.training_forward(&tape, &batch, &LossWeights::default(), &mut rng).unwrap();
        let v = losses.values(&tape);
        assert!(v.total.is_finite());
        assert!(v.mel > 0.0);
    }

    #[test]
    fn loss_identity_case_is_zero() {
        // a hand-built duration MSE: predictions in log space [0.5, 1.0] vs
        // targets [0.0, 1.0] -> mean((0.5)^2, 0)/2 = 0.125
        let tape = Tape::<f64>::new(false);
        let pred = tape.leaf(Tensor::new(&[1, 2, 1], vec![0.5, 1.0]).unwrap());
        let target = Tensor::new(&[1, 2, 1], vec![0.0, 1.0]).unwrap();
        let loss = tape.masked_mse(pred, &target, &[true, true]).unwrap();
        assert!((tape.value(loss).item() - 0.125).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_preserves_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = small_model();
        m.save(&path).unwrap();
        let mut m2 = AcousticModel::<f32>::new(&ModelConfig::tiny(), 3, 99).unwrap();
        m2.load_entries(&checkpoint::load(&path).unwrap()).unwrap();
        for (a, b) in m.params().iter().zip(m2.params().iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        // byte-identical re-save
        let bytes1 = std::fs::read(&path).unwrap();
        m2.save(&path).unwrap();
        assert_eq!(bytes1, std::fs::read(&path).unwrap());
    }

    #[test]
    fn phoneme_and_frame_modes_agree_on_frame_count() {
        let norm = NormStats {
            pitch_mean: 150.0,
            pitch_std: 40.0,
            energy_mean: 0.5,
            energy_std: 0.2,
            log_duration_mean: 2.0,
            log_duration_std: 0.5,
        };
        let mut cfg = ModelConfig::tiny();
        cfg.masking_mode = MaskingMode::Phoneme;
        let m1 = AcousticModel::<f32>::new(&cfg, 2, 5).unwrap();
        cfg.masking_mode = MaskingMode::Frame;
        let mut m2 = AcousticModel::<f32>::new(&cfg, 2, 99).unwrap();
        m2.load_entries(&m1.to_entries()).unwrap();
        let controls = SynthesisControls::default();
        let o1 = m1.infer(&[1, 7, 2, 20], 0, &controls, &norm, None).unwrap();
        let o2 = m2.infer(&[1, 7, 2, 20], 0, &controls, &norm, None).unwrap();
        assert_eq!(o1.durations, o2.durations);
        assert_eq!(o1.n_frames, o2.n_frames);
    }
}
