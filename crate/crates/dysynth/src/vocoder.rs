//! Griffin-Lim waveform reconstruction from mel spectrograms.
//!
//! The mel is lifted to a linear-frequency magnitude spectrogram through a
//! regularized pseudo-inverse of the triangular mel filterbank (negative
//! values clipped to zero), then iterative phase estimation alternates STFT
//! analysis and overlap-add synthesis until the phases settle.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::MelSpectrogram;
use crate::prosody::FrameParams;
use crate::{Error, Result};

fn hann(win: usize) -> Vec<f64> {
    (0..win)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos())
        .collect()
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank, `n_mels x (win/2 + 1)` row-major.
pub fn mel_filterbank(params: &FrameParams) -> Vec<f64> {
    let n_bins = params.win_length / 2 + 1;
    let n_mels = params.n_mels;
    let sr = params.sample_rate as f64;
    let mel_lo = hz_to_mel(params.fmin);
    let mel_hi = hz_to_mel(params.fmax);
    let centers: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = |k: usize| k as f64 * sr / params.win_length as f64;
    let mut fb = vec![0f64; n_mels * n_bins];
    for m in 0..n_mels {
        let (lo, mid, hi) = (centers[m], centers[m + 1], centers[m + 2]);
        for k in 0..n_bins {
            let f = bin_hz(k);
            let w = if f <= lo || f >= hi {
                0.0
            } else if f <= mid {
                (f - lo) / (mid - lo)
            } else {
                (hi - f) / (hi - mid)
            };
            fb[m * n_bins + k] = w;
        }
    }
    fb
}

/// Apply the filterbank to a linear magnitude frame.
pub fn mel_from_linear(fb: &[f64], linear: &[f64], n_mels: usize) -> Vec<f64> {
    let n_bins = linear.len();
    (0..n_mels)
        .map(|m| fb[m * n_bins..][..n_bins].iter().zip(linear).map(|(&w, &v)| w * v).sum())
        .collect()
}

/// Cholesky solve of the symmetric positive-definite system `a x = b`,
/// where `a` is `n x n` row-major. Consumes `a`.
fn cholesky_solve(mut a: Vec<f64>, b: &[f64], n: usize) -> Result<Vec<f64>> {
    // factor: a = L L^T, L stored in the lower triangle
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d <= 0.0 {
            return Err(Error::Invalid("mel filterbank Gram matrix is not positive definite".into()));
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut v = a[i * n + j];
            for k in 0..j {
                v -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = v / d;
        }
    }
    // forward then back substitution
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            let t = y[k];
            y[i] -= a[i * n + k] * t;
        }
        y[i] /= a[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            let t = y[k];
            y[i] -= a[k * n + i] * t;
        }
        y[i] /= a[i * n + i];
    }
    Ok(y)
}

/// Pseudo-inverse lift of a mel frame back to linear magnitudes:
/// `linear = B^T (B B^T + eps I)^{-1} mel`, clipped at zero.
struct MelInverter {
    fb: Vec<f64>,
    gram_inv_rows: Vec<f64>,
    n_mels: usize,
    n_bins: usize,
}

impl MelInverter {
    fn new(params: &FrameParams) -> Result<Self> {
        let n_bins = params.win_length / 2 + 1;
        let n_mels = params.n_mels;
        let fb = mel_filterbank(params);
        // Gram = B B^T + eps I
        let mut gram = vec![0f64; n_mels * n_mels];
        for i in 0..n_mels {
            for j in i..n_mels {
                let mut acc = 0.0;
                for k in 0..n_bins {
                    acc += fb[i * n_bins + k] * fb[j * n_bins + k];
                }
                gram[i * n_mels + j] = acc;
                gram[j * n_mels + i] = acc;
            }
        }
        let trace: f64 = (0..n_mels).map(|i| gram[i * n_mels + i]).sum();
        let eps = 1e-8 * trace / n_mels as f64;
        for i in 0..n_mels {
            gram[i * n_mels + i] += eps;
        }
        // Rows of Gram^{-1}, solved column by column.
        let mut gram_inv_rows = vec![0f64; n_mels * n_mels];
        for c in 0..n_mels {
            let mut e = vec![0f64; n_mels];
            e[c] = 1.0;
            let col = cholesky_solve(gram.clone(), &e, n_mels)?;
            for r in 0..n_mels {
                gram_inv_rows[r * n_mels + c] = col[r];
            }
        }
        Ok(Self { fb, gram_inv_rows, n_mels, n_bins })
    }

    fn invert(&self, mel: &[f64]) -> Vec<f64> {
        let mut y = vec![0f64; self.n_mels];
        for r in 0..self.n_mels {
            y[r] = self.gram_inv_rows[r * self.n_mels..][..self.n_mels]
                .iter()
                .zip(mel)
                .map(|(&a, &b)| a * b)
                .sum();
        }
        let mut linear = vec![0f64; self.n_bins];
        for (m, &ym) in y.iter().enumerate() {
            if ym == 0.0 {
                continue;
            }
            for (k, l) in linear.iter_mut().enumerate() {
                *l += self.fb[m * self.n_bins + k] * ym;
            }
        }
        for l in linear.iter_mut() {
            if *l < 0.0 {
                *l = 0.0;
            }
        }
        linear
    }
}

/// Short-time Fourier transform, non-centered frames, Hann window.
/// Returns `n_frames x (win/2+1)` complex bins.
pub fn stft(samples: &[f32], params: &FrameParams) -> Vec<Vec<Complex<f64>>> {
    let win = params.win_length;
    let n_bins = win / 2 + 1;
    let window = hann(win);
    let n = params.n_frames(samples.len());
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(win);
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let start = t * params.hop_length;
        let mut buf: Vec<Complex<f64>> = (0..win)
            .map(|i| Complex::new(samples.get(start + i).copied().unwrap_or(0.0) as f64 * window[i], 0.0))
            .collect();
        fft.process(&mut buf);
        out.push(buf[..n_bins].to_vec());
    }
    out
}

/// Inverse STFT by windowed overlap-add with squared-window normalization.
/// Output length is `(n_frames - 1) * hop + win`.
pub fn istft(frames: &[Vec<Complex<f64>>], params: &FrameParams) -> Vec<f64> {
    let win = params.win_length;
    let hop = params.hop_length;
    let n_bins = win / 2 + 1;
    let window = hann(win);
    let n_frames = frames.len();
    let out_len = (n_frames.saturating_sub(1)) * hop + win;
    let mut out = vec![0f64; out_len];
    let mut norm = vec![0f64; out_len];
    let mut planner = FftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(win);
    let mut buf = vec![Complex::new(0.0, 0.0); win];
    for (t, frame) in frames.iter().enumerate() {
        buf[..n_bins].copy_from_slice(frame);
        for k in 1..win - n_bins + 1 {
            buf[win - k] = frame[k].conj();
        }
        ifft.process(&mut buf);
        let start = t * hop;
        for i in 0..win {
            let v = buf[i].re / win as f64;
            out[start + i] += v * window[i];
            norm[start + i] += window[i] * window[i];
        }
    }
    for (o, &n) in out.iter_mut().zip(&norm) {
        if n > 1e-9 {
            *o /= n;
        }
    }
    out
}

/// Reconstruct a waveform from a mel spectrogram.
///
/// Phase starts from a seeded random field and is refined for `n_iters`
/// analysis/synthesis rounds. Samples come back in [-1, 1]; the length is
/// `(n_frames - 1) * hop + win`.
pub fn griffin_lim(
    mel: &MelSpectrogram,
    params: &FrameParams,
    n_iters: usize,
    seed: u64,
) -> Result<Vec<f32>> {
    params.validate()?;
    if mel.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "griffin_lim input mel".into() });
    }
    let inverter = MelInverter::new(params)?;
    let n_frames = mel.n_frames();
    let magnitudes: Vec<Vec<f64>> = (0..n_frames)
        .map(|t| {
            let row: Vec<f64> = mel.frame(t).iter().map(|&v| v as f64).collect();
            inverter.invert(&row)
        })
        .collect();

    let silent = magnitudes.iter().all(|f| f.iter().all(|&v| v == 0.0));
    let out_len = (n_frames - 1) * params.hop_length + params.win_length;
    if silent {
        return Ok(vec![0.0; out_len]);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec: Vec<Vec<Complex<f64>>> = magnitudes
        .iter()
        .map(|frame| {
            frame
                .iter()
                .map(|&m| {
                    let phase = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                    Complex::from_polar(m, phase)
                })
                .collect()
        })
        .collect();

    for _ in 0..n_iters {
        let wave = istft(&spec, params);
        let wave_f32: Vec<f32> = wave.iter().map(|&v| v as f32).collect();
        let reanalyzed = stft(&wave_f32, params);
        for (t, frame) in spec.iter_mut().enumerate() {
            if t >= reanalyzed.len() {
                break;
            }
            for (k, c) in frame.iter_mut().enumerate() {
                let phase = reanalyzed[t][k].arg();
                *c = Complex::from_polar(magnitudes[t][k], phase);
            }
        }
    }
    let wave = istft(&spec, params);
    debug_assert_eq!(wave.len(), out_len);
    let peak = wave.iter().fold(0f64, |m, &v| m.max(v.abs()));
    let scale = if peak > 1.0 { 1.0 / peak } else { 1.0 };
    Ok(wave.iter().map(|&v| (v * scale) as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::N_MELS;

    #[test]
    fn filterbank_rows_cover_the_band() {
        let params = FrameParams::default();
        let fb = mel_filterbank(&params);
        let n_bins = params.win_length / 2 + 1;
        for m in 0..N_MELS {
            let sum: f64 = fb[m * n_bins..][..n_bins].iter().sum();
            assert!(sum > 0.0, "mel band {m} is empty");
        }
    }

    #[test]
    fn istft_of_stft_reconstructs_interior() {
        let params = FrameParams::default();
        let samples: Vec<f32> = (0..8192)
            .map(|i| (2.0 * std::f64::consts::PI * 250.0 * i as f64 / 16000.0).sin() as f32 * 0.5)
            .collect();
        let frames = stft(&samples, &params);
        let back = istft(&frames, &params);
        // interior samples (a window away from both edges) reconstruct closely
        for i in params.win_length..back.len() - params.win_length {
            assert!((back[i] - samples[i] as f64).abs() < 1e-6, "sample {i}");
        }
    }

    #[test]
    fn zero_mel_gives_silence_with_exact_length() {
        let params = FrameParams::default();
        let mel = MelSpectrogram::new(12, N_MELS, vec![0.0; 12 * N_MELS]).unwrap();
        let wave = griffin_lim(&mel, &params, 8, 1).unwrap();
        assert_eq!(wave.len(), 11 * params.hop_length + params.win_length);
        assert!(wave.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_length_formula_holds() {
        let params = FrameParams::default();
        for n_frames in [1usize, 2, 7, 33] {
            let mel = MelSpectrogram::new(n_frames, N_MELS, vec![0.1; n_frames * N_MELS]).unwrap();
            let wave = griffin_lim(&mel, &params, 2, 0).unwrap();
            assert_eq!(wave.len(), (n_frames - 1) * params.hop_length + params.win_length);
        }
    }

    #[test]
    fn sine_round_trip_recovers_dominant_frequency() {
        let params = FrameParams::default();
        let freq = 300.0;
        let samples: Vec<f32> = (0..16000)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin() as f32 * 0.6)
            .collect();
        // analysis: true mel of the signal
        let frames = stft(&samples, &params);
        let fb = mel_filterbank(&params);
        let n_frames = frames.len();
        let mut mel_data = Vec::with_capacity(n_frames * N_MELS);
        for frame in &frames {
            let mags: Vec<f64> = frame.iter().map(|c| c.norm()).collect();
            for v in mel_from_linear(&fb, &mags, N_MELS) {
                mel_data.push(v as f32);
            }
        }
        let mel = MelSpectrogram::new(n_frames, N_MELS, mel_data).unwrap();
        let wave = griffin_lim(&mel, &params, 40, 7).unwrap();

        // dominant frequency via a long FFT on the reconstruction
        let mut planner = FftPlanner::<f64>::new();
        let n = 32768;
        let fft = planner.plan_fft_forward(n);
        let mut buf: Vec<Complex<f64>> = (0..n)
            .map(|i| Complex::new(wave.get(i).copied().unwrap_or(0.0) as f64, 0.0))
            .collect();
        fft.process(&mut buf);
        let (peak_bin, _) = buf[..n / 2]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))
            .unwrap();
        let peak_hz = peak_bin as f64 * params.sample_rate as f64 / n as f64;
        assert!((peak_hz - freq).abs() <= 10.0, "dominant frequency {peak_hz:.1} Hz");
    }
}
