use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] imse_core::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: invalid WAV file: {reason}", path.display())]
    Wav { path: PathBuf, reason: String },

    #[error("{}: unsupported WAV encoding: {reason}", path.display())]
    UnsupportedWav { path: PathBuf, reason: String },

    #[error("sample rate mismatch: input is {got} Hz but the model runs at {expected} Hz (pass --resample to convert)")]
    RateMismatch { got: u32, expected: u32 },

    #[error("{}: corrupt checkpoint: {reason}", path.display())]
    Checkpoint { path: PathBuf, reason: String },

    #[error("{}: checkpoint format version {found} is not supported (this build reads version {expected})", path.display())]
    CheckpointVersion { path: PathBuf, found: u32, expected: u32 },

    #[error("{}: invalid config: {reason}", path.display())]
    Config { path: PathBuf, reason: String },

    #[error("{0}")]
    Tolerance(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;
