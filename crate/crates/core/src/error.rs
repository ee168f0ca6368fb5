use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("corrupt input: {0}")]
    CorruptInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("unsegmentable volume: {0}")]
    Unsegmentable(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("non-finite loss at epoch {epoch}, step {step}: {value}")]
    NonFinite { epoch: usize, step: usize, value: f64 },

    #[error("missing artifact {artifact}: run {stage} first")]
    MissingStage { stage: String, artifact: PathBuf },

    #[error("bad file format in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("id mismatch: {0}")]
    IdMismatch(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Short stable tag used in the CLI's machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::CorruptInput(_) => "corrupt_input",
            Error::Shape(_) => "shape",
            Error::Empty(_) => "empty",
            Error::Unsegmentable(_) => "unsegmentable",
            Error::InvalidData(_) => "invalid_data",
            Error::NonFinite { .. } => "non_finite",
            Error::MissingStage { .. } => "missing_stage",
            Error::Format { .. } => "format",
            Error::IdMismatch(_) => "id_mismatch",
            Error::Tensor(_) => "tensor",
        }
    }
}
