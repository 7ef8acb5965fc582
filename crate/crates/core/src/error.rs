use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("canonical point ({u}, {v}, {w}) lies outside the unit cube")]
    OutOfCube { u: f64, v: f64, w: f64 },

    #[error("feature row {row} has L2 norm {norm:e} below 1e-12")]
    DegenerateFeature { row: usize, norm: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("malformed {what} at byte offset {offset}: {message}")]
    Format {
        what: &'static str,
        offset: u64,
        message: String,
    },

    #[error("only {found} co-visible tracks survived (minimum {min})")]
    TooFewTracks { found: usize, min: usize },

    #[error("template is not visible from the camera")]
    EmptyFrame,

    #[error("map has no valid pixels")]
    EmptyForeground,

    #[error("degenerate triangulation: {0}")]
    Degenerate(String),

    #[error("triangulated point is at infinity (|w| = {0:e})")]
    PointAtInfinity(f64),

    #[error("residual is empty: posed template does not overlap the observation")]
    EmptyResidual,

    #[error("{path}: {source}")]
    InFile { path: String, source: Box<Error> },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Attaches the file a failure came from.
    pub fn in_file(self, path: &std::path::Path) -> Self {
        match self {
            e @ Error::InFile { .. } => e,
            e => Error::InFile {
                path: path.display().to_string(),
                source: Box::new(e),
            },
        }
    }

    /// The error with any file context removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::InFile { source, .. } => source.root(),
            e => e,
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(what: &'static str, offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            what,
            offset,
            message: message.into(),
        }
    }
}
