use std::path::PathBuf;

use facedepth_autograd::AutogradError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    Shape {
        context: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("metric undefined: {0}")]
    Metric(String),
    #[error("non-finite value at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
    #[error("corrupt data in {path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },
    #[error("format version mismatch in {path}: found {found}, expected {expected}")]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image encoding error: {0}")]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Params(#[from] AutogradError),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn corrupt(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Stable machine-readable code, printed by the CLI.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Contract(_) | Error::Shape { .. } => "E_CONTRACT",
            Error::Config(_) => "E_CONFIG",
            Error::Metric(_) => "E_METRIC",
            Error::NonFinite { .. } => "E_NONFINITE",
            Error::Corrupt { .. } | Error::Json(_) => "E_CORRUPT",
            Error::Version { .. } => "E_VERSION",
            Error::Io { .. } | Error::Image(_) => "E_IO",
            Error::Params(_) => "E_CHECKPOINT",
        }
    }

    /// Process exit status for this error class.
    pub fn exit_code(&self) -> u8 {
        match self.code() {
            "E_CONTRACT" => 3,
            "E_CONFIG" => 4,
            "E_METRIC" => 5,
            "E_NONFINITE" => 6,
            "E_CORRUPT" => 7,
            "E_VERSION" => 8,
            "E_IO" => 9,
            "E_CHECKPOINT" => 10,
            _ => 1,
        }
    }
}
