//! Crate-wide error type.
//!
//! Variants are grouped into three classes so the CLI can map them onto
//! distinct exit codes: configuration errors, data errors, numeric failures.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse classification used for CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unreadable wav file {path}: {detail}")]
    WavUnreadable { path: PathBuf, detail: String },

    #[error("{path}: expected PCM signed 16-bit, got {detail}")]
    WavNotPcm16 { path: PathBuf, detail: String },

    #[error("{path}: expected mono audio, got {channels} channels")]
    WavNotMono { path: PathBuf, channels: u16 },

    #[error("sample rate {rate_hz} Hz below the 8000 Hz resampling floor")]
    SampleRateTooLow { rate_hz: u32 },

    #[error("sample rate mismatch: waveform is {actual} Hz, config expects {expected} Hz")]
    SampleRateMismatch { expected: u32, actual: u32 },

    #[error("silent source (rms {rms:.3e} below 1e-8); unusable for mixing")]
    SilentSource { rms: f64 },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("output length {out_len} inconsistent with {frames} frames at hop {hop}")]
    InconsistentLength {
        out_len: usize,
        frames: usize,
        hop: usize,
    },

    #[error("conditioning embedding has length {actual}, network expects {expected}")]
    EmbeddingLength { expected: usize, actual: usize },

    #[error("fusion requires at least one embedding")]
    FusionEmpty,

    #[error("cannot build category {category}: {detail}")]
    InfeasibleCategory { category: String, detail: String },

    #[error("manifest split '{split}' contains no records")]
    EmptySplit { split: String },

    #[error("speaker '{id}' unknown to the embedding provider")]
    UnknownSpeaker { id: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown config key '{key}' in section [{section}]")]
    UnknownConfigKey { section: String, key: String },

    #[error("checkpoint {path}: {detail}")]
    CheckpointCorrupt { path: PathBuf, detail: String },

    #[error("checkpoint field '{field}' mismatch: file has {actual}, expected {expected}")]
    CheckpointField {
        field: String,
        expected: String,
        actual: String,
    },

    #[error("reference signals are rank deficient (gram condition {cond:.3e})")]
    RankDeficientReferences { cond: f64 },

    #[error("signal too short after silence removal: {frames} frames, need at least {needed}")]
    TooShortForStoi { frames: usize, needed: usize },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("csv error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    /// Which CLI exit-code class this error belongs to.
    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            Config(_) | UnknownConfigKey { .. } => ErrorClass::Config,
            RankDeficientReferences { .. } | NonFinite { .. } => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(
        context: impl Into<String>,
        expected: impl Into<String>,
        actual: impl Into<String>,
    ) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }
}
