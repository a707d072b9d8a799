use thiserror::Error;

/// Error surface shared by the whole crate.
///
/// The variants partition into the exit-code classes the CLI reports:
/// configuration/usage problems, data problems, and numeric failures.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not satisfy an operation's contract.
    #[error("shape error: {0}")]
    Shape(String),
    /// Invalid configuration value or combination.
    #[error("configuration error: {0}")]
    Config(String),
    /// Input value outside an operation's mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),
    /// NaN/Inf surfaced, or statistics degenerated.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// API misuse (e.g. backward on a non-scalar, or a consumed graph).
    #[error("usage error: {0}")]
    Usage(String),
    /// Unknown category id or class.
    #[error("lookup error: {0}")]
    Lookup(String),
    /// Dataset-level problem: missing pairs, empty intersections, bad metadata.
    #[error("dataset error: {0}")]
    Data(String),
    /// Malformed tensor archive.
    #[error("archive error: {0}")]
    Archive(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
