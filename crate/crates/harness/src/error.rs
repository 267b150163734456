use std::fmt;

use guided_conv::Error as CoreError;

/// Harness-level failures; each variant renders as one machine-parsable
/// line: `error: <kind>: <detail>`.
#[derive(Debug)]
pub enum HarnessError {
    UnknownSubcommand { name: String },
    BadFlag { detail: String },
    BadConfig { detail: String },
    MissingFile { path: String, detail: String },
    Core(CoreError),
    Io(std::io::Error),
    BadImage { detail: String },
}

impl HarnessError {
    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::UnknownSubcommand { .. } => "unknown-subcommand",
            HarnessError::BadFlag { .. } => "bad-flag",
            HarnessError::BadConfig { .. } => "invalid-config",
            HarnessError::MissingFile { .. } => "missing-file",
            HarnessError::Core(_) => "pipeline",
            HarnessError::Io(_) => "io",
            HarnessError::BadImage { .. } => "bad-image",
        }
    }
}

impl fmt::Display for HarnessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HarnessError::UnknownSubcommand { name } => {
                write!(f, "error: unknown-subcommand: {name}")
            }
            HarnessError::BadFlag { detail } => write!(f, "error: bad-flag: {detail}"),
            HarnessError::BadConfig { detail } => {
                write!(f, "error: invalid-config: {}", one_line(detail))
            }
            HarnessError::MissingFile { path, detail } => {
                write!(f, "error: missing-file: {path}: {}", one_line(detail))
            }
            HarnessError::Core(e) => write!(f, "error: pipeline: {}", one_line(&e.to_string())),
            HarnessError::Io(e) => write!(f, "error: io: {}", one_line(&e.to_string())),
            HarnessError::BadImage { detail } => {
                write!(f, "error: bad-image: {}", one_line(detail))
            }
        }
    }
}

fn one_line(s: &str) -> String {
    s.replace('\n', " ")
}

impl std::error::Error for HarnessError {}

impl From<CoreError> for HarnessError {
    fn from(e: CoreError) -> Self {
        HarnessError::Core(e)
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e)
    }
}
