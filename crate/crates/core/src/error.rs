use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate region: {0}")]
    DegenerateRegion(String),

    #[error("singular triangle (signed area {area:e} px^2)")]
    SingularTriangle { area: f64 },

    #[error("feature file: bad magic {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("feature file: unsupported version {0}")]
    UnsupportedVersion(u16),

    #[error("feature file truncated: expected {expected} bytes, got {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("feature file: dimensions {height}x{width}x{dim} overflow the payload size")]
    DimOverflow { height: u32, width: u32, dim: u32 },

    #[error("malformed input at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("annotation: {0}")]
    Annotation(String),

    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::DegenerateRegion(_) => "degenerate_region",
            Error::SingularTriangle { .. } => "singular_triangle",
            Error::BadMagic { .. } => "bad_magic",
            Error::UnsupportedVersion(_) => "unsupported_version",
            Error::Truncated { .. } => "truncated",
            Error::DimOverflow { .. } => "dim_overflow",
            Error::Format { .. } => "format",
            Error::Annotation(_) => "annotation",
            Error::NonFinite { .. } => "non_finite",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    /// Process exit code: 2 usage/constraint, 3 input format, 4 numerical guard, 5 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_) | Error::DegenerateRegion(_) | Error::SingularTriangle { .. } => 2,
            Error::BadMagic { .. }
            | Error::UnsupportedVersion(_)
            | Error::Truncated { .. }
            | Error::DimOverflow { .. }
            | Error::Format { .. }
            | Error::Annotation(_)
            | Error::Json(_) => 3,
            Error::NonFinite { .. } => 4,
            Error::Io { .. } => 5,
        }
    }
}
