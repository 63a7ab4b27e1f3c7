use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate direction: {0}")]
    DegenerateDirection(&'static str),

    #[error("back-facing configuration: n.v = {0}")]
    BackFacing(f64),

    #[error("grazing singularity: l.n = {0} is below the grazing threshold")]
    Grazing(f64),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("order mismatch: lighting order {light} vs zonal table order {table}")]
    OrderMismatch { light: usize, table: usize },

    #[error("insufficient observations: {got} usable, {needed} required")]
    InsufficientObservations { got: usize, needed: usize },

    #[error("dark environment: channel {channel} has 0th coefficient {value}")]
    DarkEnvironment { channel: usize, value: f64 },

    #[error("not a rotation matrix: {0}")]
    NotRotation(String),

    #[error("unsupported geometry kind: {0}")]
    UnsupportedGeometry(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("optimization diverged at iteration {iteration}: {trace}")]
    Divergence { iteration: usize, trace: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by malformed or missing input files.
    pub fn is_input_format(&self) -> bool {
        matches!(
            self,
            Error::Format(_) | Error::Io { .. } | Error::Json { .. } | Error::Image { .. }
        )
    }

    /// True for errors raised by numerical failure rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Divergence { .. }
                | Error::DarkEnvironment { .. }
                | Error::InsufficientObservations { .. }
                | Error::Grazing(_)
                | Error::DegenerateDirection(_)
        )
    }
}
