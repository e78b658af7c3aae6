//! Model hyperparameters and the inference control surface.

use serde::{Deserialize, Serialize};

use crate::corpus::{N_MELS, N_SEVERITIES};
use crate::{Error, Result};

/// Where pitch/energy conditioning is applied relative to length regulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskingMode {
    /// Predict and add pitch/energy per phoneme under the source mask, then
    /// length-regulate (default).
    Phoneme,
    /// Length-regulate first, then predict and add pitch/energy per frame
    /// under the mel mask.
    Frame,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_encoder_blocks: usize,
    pub n_decoder_blocks: usize,
    pub hidden: usize,
    pub n_heads: usize,
    /// Kernel of the first feed-forward convolution in each transformer block.
    pub ff_conv_kernel: usize,
    /// Width of the feed-forward convolution stack.
    pub ff_hidden: usize,
    pub n_mels: usize,
    pub n_severities: usize,
    pub predictor_conv_kernel: usize,
    pub predictor_dropout: f64,
    pub block_dropout: f64,
    pub masking_mode: MaskingMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_encoder_blocks: 4,
            n_decoder_blocks: 4,
            hidden: 256,
            n_heads: 2,
            ff_conv_kernel: 9,
            ff_hidden: 1024,
            n_mels: N_MELS,
            n_severities: N_SEVERITIES,
            predictor_conv_kernel: 3,
            predictor_dropout: 0.5,
            block_dropout: 0.1,
            masking_mode: MaskingMode::Phoneme,
        }
    }
}

impl ModelConfig {
    /// Reduced geometry for fast desk-scale training and tests.
    pub fn small() -> Self {
        Self { n_encoder_blocks: 2, n_decoder_blocks: 2, hidden: 32, ff_hidden: 64, ..Self::default() }
    }

    /// Tiny geometry for finite-difference checking of the full model.
    pub fn tiny() -> Self {
        Self {
            n_encoder_blocks: 1,
            n_decoder_blocks: 1,
            hidden: 8,
            n_heads: 2,
            ff_conv_kernel: 3,
            ff_hidden: 12,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.hidden % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} must be a positive multiple of n_heads {}",
                self.hidden, self.n_heads
            )));
        }
        if self.n_severities != N_SEVERITIES {
            return Err(Error::Config(format!("n_severities must be {N_SEVERITIES}")));
        }
        if self.n_mels != N_MELS {
            return Err(Error::Config(format!("n_mels must be {N_MELS}")));
        }
        if self.ff_conv_kernel % 2 == 0 || self.predictor_conv_kernel % 2 == 0 {
            return Err(Error::Config("convolution kernels must be odd for same padding".into()));
        }
        if !(0.0..1.0).contains(&self.predictor_dropout) || !(0.0..1.0).contains(&self.block_dropout) {
            return Err(Error::Config("dropout rates must lie in [0,1)".into()));
        }
        Ok(())
    }
}

/// The five inference knobs plus the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisControls {
    pub pitch_coef: f64,
    pub energy_coef: f64,
    pub duration_coef: f64,
    pub severity: usize,
    pub pause_insertion: bool,
    pub seed: u64,
}

impl Default for SynthesisControls {
    fn default() -> Self {
        Self {
            pitch_coef: 1.0,
            energy_coef: 1.0,
            duration_coef: 1.0,
            severity: 0,
            pause_insertion: false,
            seed: 0,
        }
    }
}

impl SynthesisControls {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("pitch", self.pitch_coef),
            ("energy", self.energy_coef),
            ("duration", self.duration_coef),
        ] {
            if !(0.0..=2.0).contains(&value) || !value.is_finite() {
                return Err(Error::CoefficientRange { name: match name {
                    "pitch" => "pitch_coef",
                    "energy" => "energy_coef",
                    _ => "duration_coef",
                }, value });
            }
        }
        if self.severity >= N_SEVERITIES {
            return Err(Error::Config(format!("severity {} outside {{0,1,2}}", self.severity)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::small().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn coefficient_range_enforced() {
        let mut c = SynthesisControls::default();
        c.validate().unwrap();
        c.pitch_coef = 2.5;
        assert!(matches!(c.validate(), Err(Error::CoefficientRange { .. })));
        c.pitch_coef = 2.0;
        c.severity = 3;
        assert!(c.validate().is_err());
    }
}
