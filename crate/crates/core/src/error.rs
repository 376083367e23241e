use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("axis {axis} has odd length {len}; enable pad-to-even or crop the input")]
    OddAxis { axis: usize, len: usize },

    #[error("{requested} wavelet levels requested but an input of shape {shape:?} admits at most {max}")]
    TooManyLevels {
        requested: usize,
        max: usize,
        shape: Vec<usize>,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("empty {0}")]
    Empty(String),

    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("config: {0}")]
    Config(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit status: 1 for invalid input or configuration, 2 for
    /// failures while running (I/O, corrupt files, numerical breakdown).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_)
            | Error::InvalidArgument(_)
            | Error::OddAxis { .. }
            | Error::TooManyLevels { .. }
            | Error::LabelOutOfRange { .. }
            | Error::Empty(_)
            | Error::Config(_)
            | Error::Json(_) => 1,
            Error::BadMagic { .. } | Error::Version { .. } | Error::Truncated(_) | Error::NonFinite(_) | Error::Io(_) => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;
