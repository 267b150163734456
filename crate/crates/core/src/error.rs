use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by kernels, file formats and training drivers.
#[derive(Debug)]
pub enum Error {
    /// Two tensors (or a tensor and a layer) disagree on shape.
    ShapeMismatch {
        what: &'static str,
        left: String,
        right: String,
    },
    /// A convolution/pooling configuration yields an empty output.
    EmptyOutput {
        what: &'static str,
        detail: String,
    },
    /// A scalar parameter is outside its legal range.
    InvalidParam {
        name: &'static str,
        detail: String,
    },
    /// A binary file does not start with the expected magic bytes.
    BadMagic {
        expected: &'static str,
        found: Vec<u8>,
    },
    /// A binary file ended before its header said it would.
    Truncated {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    /// A file header carries a value we cannot interpret.
    BadHeader {
        what: &'static str,
        detail: String,
    },
    /// Text formats (annotations, detections) with a malformed line.
    BadRecord {
        path: String,
        line: usize,
        detail: String,
    },
    /// A training driver was handed an empty dataset.
    EmptyDataset,
    /// Scene generation could not meet the requested area target.
    InfeasibleScene {
        detail: String,
    },
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { what, left, right } => {
                write!(f, "shape mismatch in {what}: {left} vs {right}")
            }
            Error::EmptyOutput { what, detail } => {
                write!(f, "empty output in {what}: {detail}")
            }
            Error::InvalidParam { name, detail } => {
                write!(f, "invalid parameter {name}: {detail}")
            }
            Error::BadMagic { expected, found } => {
                write!(f, "bad magic bytes: expected {expected:?}, found {found:?}")
            }
            Error::Truncated {
                what,
                expected,
                found,
            } => {
                write!(f, "truncated {what}: expected {expected} bytes, found {found}")
            }
            Error::BadHeader { what, detail } => write!(f, "bad {what} header: {detail}"),
            Error::BadRecord { path, line, detail } => {
                write!(f, "bad record in {path}:{line}: {detail}")
            }
            Error::EmptyDataset => write!(f, "dataset is empty"),
            Error::InfeasibleScene { detail } => write!(f, "infeasible scene spec: {detail}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
