//! Variance-adaptor ground truth: per-frame pitch and energy extraction,
//! phoneme durations from alignments, phoneme-level pooling, and corpus
//! normalization statistics.

use serde::{Deserialize, Serialize};

use crate::corpus::AlignmentEntry;
use crate::{Error, Result};

/// Short-time analysis parameters shared by feature extraction and vocoding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrameParams {
    pub sample_rate: u32,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for FrameParams {
    fn default() -> Self {
        Self { sample_rate: 16000, win_length: 1024, hop_length: 256, n_mels: 80, fmin: 0.0, fmax: 8000.0 }
    }
}

impl FrameParams {
    pub fn validate(&self) -> Result<()> {
        if self.hop_length == 0 || self.hop_length > self.win_length {
            return Err(Error::Config(format!(
                "hop {} must be in 1..=win {}",
                self.hop_length, self.win_length
            )));
        }
        if self.fmax > self.sample_rate as f64 / 2.0 {
            return Err(Error::Config(format!(
                "fmax {} above Nyquist {}",
                self.fmax,
                self.sample_rate as f64 / 2.0
            )));
        }
        if self.n_mels != crate::corpus::N_MELS {
            return Err(Error::Config(format!("n_mels must be {}", crate::corpus::N_MELS)));
        }
        Ok(())
    }

    pub fn hop_seconds(&self) -> f64 {
        self.hop_length as f64 / self.sample_rate as f64
    }

    /// Number of analysis frames for a signal length (no centering; short
    /// signals yield a single zero-padded frame).
    pub fn n_frames(&self, n_samples: usize) -> usize {
        if n_samples <= self.win_length {
            1
        } else {
            1 + (n_samples - self.win_length) / self.hop_length
        }
    }
}

/// Per-phoneme prosody targets paired with one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct ProsodyTargets {
    /// Frame counts, one per phoneme; sums to the paired mel's frame count.
    pub durations: Vec<usize>,
    /// Mean F0 in Hz per phoneme; 0 marks unvoiced.
    pub pitch: Vec<f64>,
    /// Mean frame energy per phoneme, non-negative.
    pub energy: Vec<f64>,
}

/// Corpus z-score statistics for the predictor targets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub pitch_mean: f64,
    pub pitch_std: f64,
    pub energy_mean: f64,
    pub energy_std: f64,
    pub log_duration_mean: f64,
    pub log_duration_std: f64,
}

impl NormStats {
    pub fn validate(&self) -> Result<()> {
        if self.pitch_std <= 0.0 || self.energy_std <= 0.0 || self.log_duration_std <= 0.0 {
            return Err(Error::Config("normalization stds must be positive".into()));
        }
        Ok(())
    }
}

const F0_MIN_HZ: f64 = 60.0;
const F0_MAX_HZ: f64 = 400.0;
const VOICING_THRESHOLD: f64 = 0.3;

fn frame_slice(samples: &[f32], params: &FrameParams, t: usize) -> Vec<f64> {
    let start = t * params.hop_length;
    (0..params.win_length)
        .map(|i| samples.get(start + i).copied().unwrap_or(0.0) as f64)
        .collect()
}

/// Autocorrelation F0 per analysis frame; 0 marks unvoiced.
///
/// The normalized autocorrelation is length-corrected (`win/(win-lag)`), the
/// peak is refined by parabolic interpolation, and a frame counts as voiced
/// when the corrected peak reaches 0.3. Search range 60-400 Hz.
pub fn extract_f0(samples: &[f32], params: &FrameParams) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("extract_f0 on empty signal"));
    }
    params.validate()?;
    let sr = params.sample_rate as f64;
    let lag_min = (sr / F0_MAX_HZ).floor() as usize;
    let lag_max = ((sr / F0_MIN_HZ).ceil() as usize).min(params.win_length - 1);
    let n = params.n_frames(samples.len());
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let mut frame = frame_slice(samples, params, t);
        let mean = frame.iter().sum::<f64>() / frame.len() as f64;
        for v in frame.iter_mut() {
            *v -= mean;
        }
        let r0: f64 = frame.iter().map(|v| v * v).sum();
        if r0 <= 0.0 {
            out.push(0.0);
            continue;
        }
        let win = params.win_length as f64;
        let acf = |lag: usize| -> f64 {
            let mut acc = 0.0;
            for i in 0..params.win_length - lag {
                acc += frame[i] * frame[i + lag];
            }
            (acc / r0) * (win / (win - lag as f64))
        };
        let mut peak = 0.0f64;
        for lag in lag_min..=lag_max {
            let v = acf(lag);
            if v > peak {
                peak = v;
            }
        }
        if peak < VOICING_THRESHOLD {
            out.push(0.0);
            continue;
        }
        // Period multiples score nearly as high as the fundamental; take the
        // smallest lag within 90% of the peak to avoid octave-down errors.
        let mut best_lag = 0usize;
        let mut best = 0.0f64;
        for lag in lag_min..=lag_max {
            let v = acf(lag);
            if v >= 0.9 * peak {
                best_lag = lag;
                best = v;
                break;
            }
        }
        if best_lag == 0 {
            out.push(0.0);
            continue;
        }
        // Parabolic refinement around the integer peak.
        let refined = if best_lag > lag_min && best_lag < lag_max {
            let ym = acf(best_lag - 1);
            let y0 = best;
            let yp = acf(best_lag + 1);
            let denom = ym - 2.0 * y0 + yp;
            if denom.abs() > 1e-12 {
                best_lag as f64 + 0.5 * (ym - yp) / denom
            } else {
                best_lag as f64
            }
        } else {
            best_lag as f64
        };
        out.push(sr / refined);
    }
    Ok(out)
}

fn hann(win: usize) -> Vec<f64> {
    (0..win)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos())
        .collect()
}

/// RMS of each Hann-windowed frame.
pub fn extract_energy(samples: &[f32], params: &FrameParams) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("extract_energy on empty signal"));
    }
    params.validate()?;
    let window = hann(params.win_length);
    let n = params.n_frames(samples.len());
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let frame = frame_slice(samples, params, t);
        let sum_sq: f64 = frame.iter().zip(&window).map(|(&x, &w)| (x * w) * (x * w)).sum();
        out.push((sum_sq / params.win_length as f64).sqrt());
    }
    Ok(out)
}

/// Per-phoneme frame counts from an alignment.
///
/// Boundaries are rounded to the hop grid; the final phone absorbs the
/// remainder so the counts sum exactly to `n_frames`.
pub fn phoneme_durations(
    alignment: &[AlignmentEntry],
    params: &FrameParams,
    n_frames: usize,
) -> Result<Vec<usize>> {
    if alignment.is_empty() {
        return Err(Error::EmptyInput("phoneme_durations on empty alignment"));
    }
    let hop_s = params.hop_seconds();
    let end_frame = (alignment.last().unwrap().end / hop_s).round() as i64;
    if end_frame > n_frames as i64 + 1 {
        return Err(Error::Alignment {
            index: alignment.len() - 1,
            msg: format!("alignment ends at frame {end_frame}, more than one frame past {n_frames}"),
        });
    }
    let bound = |s: f64| (s / hop_s).round() as i64;
    let mut durations = Vec::with_capacity(alignment.len());
    for i in 0..alignment.len() {
        let start = bound(alignment[i].start);
        let end = if i + 1 < alignment.len() { bound(alignment[i + 1].start) } else { n_frames as i64 };
        if end < start {
            return Err(Error::Alignment {
                index: i,
                msg: format!("segment maps to negative frame span ({start}..{end})"),
            });
        }
        durations.push((end - start) as usize);
    }
    Ok(durations)
}

/// How frame values are reduced over a phoneme's span.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    /// Plain mean (energy).
    Mean,
    /// Mean over voiced (non-zero) frames only; 0 if the span has none (pitch).
    VoicedMean,
}

/// Reduce frame-level values to one value per phoneme.
pub fn pool_to_phoneme(frame_values: &[f64], durations: &[usize], kind: PoolKind) -> Result<Vec<f64>> {
    let total: usize = durations.iter().sum();
    if frame_values.len() != total {
        return Err(Error::Invalid(format!(
            "pool_to_phoneme: {} frame values for durations summing to {total}",
            frame_values.len()
        )));
    }
    let mut out = Vec::with_capacity(durations.len());
    let mut f = 0usize;
    for &d in durations {
        let span = &frame_values[f..f + d];
        f += d;
        if d == 0 {
            out.push(0.0);
            continue;
        }
        match kind {
            PoolKind::Mean => out.push(span.iter().sum::<f64>() / d as f64),
            PoolKind::VoicedMean => {
                let voiced: Vec<f64> = span.iter().copied().filter(|&v| v > 0.0).collect();
                if voiced.is_empty() {
                    out.push(0.0);
                } else {
                    out.push(voiced.iter().sum::<f64>() / voiced.len() as f64);
                }
            }
        }
    }
    Ok(out)
}

const STD_FLOOR: f64 = 1e-5;

fn population_stats(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt().max(STD_FLOOR))
}

/// Population mean/std of the corpus targets.
///
/// Pitch statistics cover voiced phonemes only; durations are measured in
/// `ln(1 + frames)`. Requires at least two voiced phonemes.
pub fn compute_normalization(targets: &[ProsodyTargets]) -> Result<NormStats> {
    let mut pitch = Vec::new();
    let mut energy = Vec::new();
    let mut log_dur = Vec::new();
    for t in targets {
        for (&p, (&e, &d)) in t.pitch.iter().zip(t.energy.iter().zip(&t.durations)) {
            if p > 0.0 {
                pitch.push(p);
            }
            energy.push(e);
            log_dur.push((1.0 + d as f64).ln());
        }
    }
    if pitch.len() < 2 {
        return Err(Error::Invalid(format!("need at least 2 voiced phonemes for pitch stats, found {}", pitch.len())));
    }
    let (pitch_mean, pitch_std) = population_stats(&pitch);
    let (energy_mean, energy_std) = population_stats(&energy);
    let (log_duration_mean, log_duration_std) = population_stats(&log_dur);
    Ok(NormStats { pitch_mean, pitch_std, energy_mean, energy_std, log_duration_mean, log_duration_std })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn sine(freq: f64, seconds: f64, params: &FrameParams) -> Vec<f32> {
        let n = (seconds * params.sample_rate as f64) as usize;
        (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / params.sample_rate as f64).sin() as f32)
            .collect()
    }

    #[test]
    fn pure_sine_tracks_within_two_hz() {
        let params = FrameParams::default();
        let f0 = extract_f0(&sine(200.0, 1.0, &params), &params).unwrap();
        assert!(!f0.is_empty());
        for &v in &f0 {
            assert!((v - 200.0).abs() <= 2.0, "frame F0 {v}");
        }
    }

    #[test]
    fn white_noise_is_mostly_unvoiced() {
        let params = FrameParams::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let noise: Vec<f32> = (0..16000).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let f0 = extract_f0(&noise, &params).unwrap();
        let unvoiced = f0.iter().filter(|&&v| v == 0.0).count();
        assert!(
            unvoiced as f64 >= 0.9 * f0.len() as f64,
            "{unvoiced}/{} frames unvoiced",
            f0.len()
        );
    }

    #[test]
    fn zero_signal_is_unvoiced_and_zero_energy() {
        let params = FrameParams::default();
        let silence = vec![0.0f32; 8000];
        assert!(extract_f0(&silence, &params).unwrap().iter().all(|&v| v == 0.0));
        assert!(extract_energy(&silence, &params).unwrap().iter().all(|&v| v == 0.0));
        assert!(extract_f0(&[], &params).is_err());
        assert!(extract_energy(&[], &params).is_err());
    }

    #[test]
    fn constant_signal_energy_closed_form() {
        let params = FrameParams::default();
        let a = 0.25f32;
        let samples = vec![a; 16000];
        let energy = extract_energy(&samples, &params).unwrap();
        let window = hann(params.win_length);
        let expected = a as f64 * (window.iter().map(|w| w * w).sum::<f64>() / params.win_length as f64).sqrt();
        // Interior frames see the full constant signal.
        for &e in &energy[..energy.len() - 4] {
            assert!((e - expected).abs() < 1e-9, "energy {e} vs closed form {expected}");
        }
    }

    #[test]
    fn doubling_amplitude_doubles_energy_exactly() {
        let params = FrameParams::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let samples: Vec<f32> = (0..12000).map(|_| rng.gen_range(-0.4f32..0.4)).collect();
        let doubled: Vec<f32> = samples.iter().map(|&v| v * 2.0).collect();
        let e1 = extract_energy(&samples, &params).unwrap();
        let e2 = extract_energy(&doubled, &params).unwrap();
        for (a, b) in e1.iter().zip(&e2) {
            assert_eq!(*b, *a * 2.0);
        }
    }

    fn entry(phone: &str, start: f64, end: f64, word: usize) -> AlignmentEntry {
        AlignmentEntry { phone: phone.into(), start, end, word }
    }

    #[test]
    fn single_phone_takes_all_frames() {
        let params = FrameParams::default();
        let align = vec![entry("AA", 0.0, 1.6, 0)];
        assert_eq!(phoneme_durations(&align, &params, 100).unwrap(), vec![100]);
    }

    #[test]
    fn boundary_rounding_splits_sixteen_sixteen() {
        let params = FrameParams::default();
        // 0.25 s at hop 16 ms = 15.625 frames; rounding the shared boundary
        // gives 16 + 16 over a 32-frame utterance.
        let align = vec![entry("AA", 0.0, 0.25, 0), entry("N", 0.25, 0.50, 0)];
        assert_eq!(phoneme_durations(&align, &params, 32).unwrap(), vec![16, 16]);
    }

    #[test]
    fn alignment_far_past_mel_rejected() {
        let params = FrameParams::default();
        let align = vec![entry("AA", 0.0, 1.0, 0)];
        // 1.0 s = 62.5 frames, n_frames = 10: more than one frame past.
        assert!(phoneme_durations(&align, &params, 10).is_err());
    }

    proptest! {
        #[test]
        fn durations_always_sum_to_n_frames(boundaries in proptest::collection::vec(0.01f64..0.3, 1..12)) {
            let params = FrameParams::default();
            let mut align = Vec::new();
            let mut t = 0.0;
            for (i, d) in boundaries.iter().enumerate() {
                align.push(entry("AA", t, t + d, i / 3));
                t += d;
            }
            let n_frames = (t / params.hop_seconds()).round() as usize + 1;
            let durations = phoneme_durations(&align, &params, n_frames).unwrap();
            prop_assert_eq!(durations.iter().sum::<usize>(), n_frames);
        }

        #[test]
        fn pooling_commutes_with_concatenation(
            a in proptest::collection::vec(0.0f64..5.0, 1..20),
            b in proptest::collection::vec(0.0f64..5.0, 1..20),
        ) {
            let da = vec![a.len()];
            let db = vec![b.len()];
            let mut joined = a.clone();
            joined.extend_from_slice(&b);
            let sep = [
                pool_to_phoneme(&a, &da, PoolKind::Mean).unwrap(),
                pool_to_phoneme(&b, &db, PoolKind::Mean).unwrap(),
            ]
            .concat();
            let both = pool_to_phoneme(&joined, &[a.len(), b.len()], PoolKind::Mean).unwrap();
            for (x, y) in sep.iter().zip(&both) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pooling_examples() {
        let v = pool_to_phoneme(&[1.0, 1.0, 3.0, 3.0, 3.0], &[2, 3], PoolKind::Mean).unwrap();
        assert_eq!(v, vec![1.0, 3.0]);
        let v = pool_to_phoneme(&[9.0, 9.0, 9.0, 9.0, 9.0], &[0, 5], PoolKind::Mean).unwrap();
        assert_eq!(v[0], 0.0);
        let v = pool_to_phoneme(&[200.0, 0.0, 220.0], &[3], PoolKind::VoicedMean).unwrap();
        assert_eq!(v, vec![210.0]);
        assert!(pool_to_phoneme(&[1.0], &[2], PoolKind::Mean).is_err());
    }

    #[test]
    fn normalization_examples() {
        let t = ProsodyTargets { durations: vec![4, 4], pitch: vec![100.0, 300.0], energy: vec![0.5, 0.5], };
        let stats = compute_normalization(&[t]).unwrap();
        assert_eq!(stats.pitch_mean, 200.0);
        assert_eq!(stats.pitch_std, 100.0);
        // identical energies hit the std floor
        assert_eq!(stats.energy_std, 1e-5);
        // fewer than 2 voiced phonemes is an error
        let t = ProsodyTargets { durations: vec![4], pitch: vec![0.0], energy: vec![0.5] };
        assert!(compute_normalization(&[t]).is_err());
    }

    #[test]
    fn normalization_invariant_to_utterance_order() {
        let mk = |p: f64, e: f64, d: usize| ProsodyTargets {
            durations: vec![d, d + 1],
            pitch: vec![p, p + 40.0],
            energy: vec![e, e * 2.0],
        };
        let a = vec![mk(120.0, 0.4, 3), mk(180.0, 0.7, 8), mk(90.0, 0.2, 5)];
        let b = vec![a[2].clone(), a[0].clone(), a[1].clone()];
        let sa = compute_normalization(&a).unwrap();
        let sb = compute_normalization(&b).unwrap();
        assert!((sa.pitch_mean - sb.pitch_mean).abs() < 1e-12);
        assert!((sa.energy_std - sb.energy_std).abs() < 1e-12);
        assert!((sa.log_duration_mean - sb.log_duration_mean).abs() < 1e-12);
    }
}
