use std::fmt;

/// Error category. Tests match on the kind; messages carry the specifics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Tensor/layer dimension mismatch.
    Shape,
    /// An operation contract was violated (e.g. non-scalar loss).
    Contract,
    /// A value could not be evaluated (non-finite result).
    Evaluation,
    /// A parameter or label is outside its declared range.
    Range,
    /// A sample does not belong to the cohort (no opacities).
    Ineligible,
    /// Dataset-level problem (missing level, empty split, bad manifest).
    Data,
    /// Bad configuration (unknown key, type mismatch, indivisible batch).
    Config,
    /// Malformed file contents (checkpoint magic, PGM/CSV syntax).
    Format,
    /// Checkpoint does not match the network spec.
    Compatibility,
    /// Training failure (non-finite gradient).
    Training,
    /// A request exceeds what the data can provide.
    Request,
    /// Filesystem error.
    Io,
    /// Invalid input image.
    Input,
    /// Network construction failure (bad skip edge, unreachable block).
    Construction,
    /// The model produced an unusable prediction.
    Model,
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ErrorKind::Shape => "shape",
            ErrorKind::Contract => "contract",
            ErrorKind::Evaluation => "evaluation",
            ErrorKind::Range => "range",
            ErrorKind::Ineligible => "ineligible",
            ErrorKind::Data => "data",
            ErrorKind::Config => "config",
            ErrorKind::Format => "format",
            ErrorKind::Compatibility => "compatibility",
            ErrorKind::Training => "training",
            ErrorKind::Request => "request",
            ErrorKind::Io => "io",
            ErrorKind::Input => "input",
            ErrorKind::Construction => "construction",
            ErrorKind::Model => "model",
        };
        f.write_str(s)
    }
}

/// Crate-wide error: the originating module, a category, and a message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Error {
    pub module: &'static str,
    pub kind: ErrorKind,
    pub msg: String,
}

impl Error {
    pub fn new(module: &'static str, kind: ErrorKind, msg: impl Into<String>) -> Self {
        Error { module, kind, msg: msg.into() }
    }

    pub fn shape(module: &'static str, msg: impl Into<String>) -> Self {
        Self::new(module, ErrorKind::Shape, msg)
    }

    pub fn config(module: &'static str, msg: impl Into<String>) -> Self {
        Self::new(module, ErrorKind::Config, msg)
    }

    pub fn io(module: &'static str, path: &std::path::Path, err: &std::io::Error) -> Self {
        Self::new(module, ErrorKind::Io, format!("{}: {}", path.display(), err))
    }
}

impl fmt::Display for Error {
    // Single-line rendering; newlines stripped so CLI errors stay machine-parsable.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = self.msg.replace('\n', " ");
        write!(f, "[{}] {}: {}", self.module, self.kind, msg)
    }
}

impl std::error::Error for Error {}

pub type Result<T> = std::result::Result<T, Error>;
