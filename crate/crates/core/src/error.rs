use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward called on a tensor that is not part of a recorded graph")]
    NoGraph,

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("atrous rate {rate} too large for {feature}x{feature} feature maps: {detail}")]
    RateTooLarge {
        rate: usize,
        feature: usize,
        detail: String,
    },

    #[error("channel mismatch: {0}")]
    ChannelMismatch(String),

    #[error("missing channel `{0}`")]
    MissingChannel(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch} (sic={sic}, sod={sod}, floe={floe})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        sic: f64,
        sod: f64,
        floe: f64,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short stable identifier used in machine-readable CLI errors and FFI codes.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NoGraph => "no_graph",
            Error::MissingGradient(_) => "missing_gradient",
            Error::RateTooLarge { .. } => "rate_too_large",
            Error::ChannelMismatch(_) => "channel_mismatch",
            Error::MissingChannel(_) => "missing_channel",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Config(_) => "config",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
macro_rules! invalid {
    ($($arg:tt)*) => { $crate::error::Error::InvalidArgument(format!($($arg)*)) };
}
pub(crate) use invalid;
pub(crate) use shape_err;
