//! Severity-controllable dysarthric speech synthesis for ASR data augmentation.
//!
//! The crate implements a compact non-autoregressive acoustic model (feed-forward
//! transformer encoder/decoder with a variance adaptor) extended with two
//! dysarthria-specific controls: a discrete severity level that conditions the
//! duration/pitch/energy predictors, and a statistical between-word pause
//! insertion model. Around the model sit the pieces needed to run the whole
//! pipeline on disk: corpus formats and a procedural toy corpus, prosody target
//! extraction, a deterministic trainer with gradient checking, Griffin-Lim
//! vocoding, and a coefficient-grid augmentation driver that batch-synthesizes
//! an enlarged training manifest.
//!
//! Everything is deterministic given explicit seeds; no GPU, no external model
//! files.

pub mod corpus;
pub mod error;
pub mod model;
pub mod nn;
pub mod pause;
pub mod phones;
pub mod prosody;
pub mod train;
pub mod util;

pub use error::{Error, Result};
