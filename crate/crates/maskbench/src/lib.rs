//! Two-speaker speech separation workbench built around conditioned
//! time-frequency masking.
//!
//! The pipeline: synthetic mixtures are forged from a directory of clean
//! per-speaker clips, an encoder-decoder network predicts one soft mask per
//! source from the mixture magnitude spectrogram and a per-source
//! conditioning embedding, and estimates are reconstructed with the mixture
//! phase and scored with BSS metrics (SDR/SIR/SAR) plus STOI.
//!
//! All numeric code is generic over the scalar type via [`Scalar`]
//! (`f32` or `f64`); the concrete aliases below pin the two configurations
//! used in practice: `f32` for training, `f64` for scoring and oracles.

pub mod audio;
pub mod bench;
pub mod dsp;
pub mod error;
pub mod forge;
pub mod grid;
pub mod mask;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod scalar;

pub use error::{Error, ErrorClass, Result};
pub use scalar::Scalar;

/// Training-precision waveform.
pub type Waveform32 = audio::Waveform<f32>;
/// Scoring/oracle-precision waveform.
pub type Waveform64 = audio::Waveform<f64>;
/// Training-precision STFT grid.
pub type Spectrogram32 = dsp::ComplexSpectrogram<f32>;
/// Scoring/oracle-precision STFT grid.
pub type Spectrogram64 = dsp::ComplexSpectrogram<f64>;
/// Training-precision dense tensor.
pub type Tensor32 = nn::Tensor<f32>;
/// Gradient-check-precision dense tensor.
pub type Tensor64 = nn::Tensor<f64>;
/// Training-precision time-frequency mask.
pub type Mask32 = mask::TimeFreqMask<f32>;
/// Scoring-precision time-frequency mask.
pub type Mask64 = mask::TimeFreqMask<f64>;
