use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the conversion pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed wav file {path}: {detail}")]
    WavFormat { path: PathBuf, detail: String },

    #[error("unsupported wav format in {path}: {detail} (only 16-bit PCM mono is supported)")]
    WavUnsupported { path: PathBuf, detail: String },

    #[error("invalid sample rate {rate}")]
    InvalidRate { rate: u32 },

    #[error("buffer of {len} samples is shorter than one frame ({nfft})")]
    InputTooShort { len: usize, nfft: usize },

    #[error("invalid stft config: {detail}")]
    StftConfig { detail: String },

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: String, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("magnitude/phase frame counts differ: {mag_frames} vs {phase_frames}")]
    FrameAlignment {
        mag_frames: usize,
        phase_frames: usize,
    },

    #[error("feature cache {path}: {detail}")]
    Cache { path: PathBuf, detail: String },

    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error("manifest {path}: {detail}")]
    Manifest { path: PathBuf, detail: String },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("conversion produced zero usable frames")]
    EmptyAudio,

    #[error("invalid config value for {key}: {detail}")]
    Config { key: String, detail: String },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op: op.into(),
            detail: detail.into(),
        }
    }

    pub fn non_finite(op: impl Into<String>) -> Self {
        Error::NonFinite { op: op.into() }
    }

    /// Tags an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
