use std::path::PathBuf;

/// Errors produced by the simulation and training toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument was outside its valid domain (non-finite SNR, negative variance, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A model, codebook or experiment was configured inconsistently.
    #[error("configuration error: {0}")]
    Config(String),

    /// Power normalization of an all-zero vector.
    #[error("degenerate codeword: all-zero input has no power scale")]
    DegenerateCodeword,

    /// Cosine similarity with a zero-norm operand.
    #[error("cosine similarity is undefined for a zero-norm vector")]
    UndefinedSimilarity,

    /// Codebook fitting could not proceed.
    #[error("codebook fit failed: {0}")]
    Fit(String),

    /// Serialized data does not decode to a valid object.
    #[error("corrupt data: {0}")]
    Corruption(String),

    /// A text file has a malformed line.
    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// Parsed content violates a data invariant.
    #[error("validation failed: {0}")]
    Validation(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },

    /// A caller broke a documented usage contract (e.g. an unfrozen hash module in the
    /// composite objective).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A required artifact (checkpoint, codebook) is missing.
    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("tensor: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("metadata: {0}")]
    Metadata(String),
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Metadata(e.to_string())
    }
}

impl From<toml::ser::Error> for Error {
    fn from(e: toml::ser::Error) -> Self {
        Error::Metadata(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
