use std::path::PathBuf;

/// Errors produced anywhere in the enhancement toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("cleaner frozen")]
    CleanerFrozen,

    #[error("context too short: {frames} frames available, {needed} required")]
    ContextTooShort { frames: usize, needed: usize },

    #[error("singular system at bin {bin}")]
    Singular { bin: usize },

    #[error("non-Hermitian matrix at bin {bin}")]
    NotHermitian { bin: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("zero-power input: {0}")]
    ZeroPower(&'static str),

    #[error("insufficient noise: need {needed} samples, got {got}")]
    InsufficientNoise { needed: usize, got: usize },

    #[error("bad magic in {0}")]
    BadMagic(&'static str),

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated container")]
    Truncated,

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("mask already log-compressed")]
    AlreadyLog,

    #[error("expected log-compressed mel input")]
    NotLog,

    #[error("unsupported codec: {0}")]
    UnsupportedCodec(String),

    #[error("malformed WAV header: {0}")]
    MalformedHeader(String),

    #[error("truncated WAV data")]
    TruncatedData,

    #[error("sample out of range [-1, 1]: {0}")]
    SampleOutOfRange(f32),

    #[error("sample rate mismatch: expected {expected} Hz, got {got} Hz")]
    SampleRateMismatch { expected: u32, got: u32 },

    #[error("missing weights for method {0}")]
    MissingWeights(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
