use std::fmt;
use std::path::Path;

use sparsealign::Error;

/// A command failure with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_DATA: u8 = 4;

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::InsufficientData(_) => EXIT_CONFIG,
            Error::Io { .. } => EXIT_IO,
            Error::Dimension { .. }
            | Error::DuplicateId(_)
            | Error::Normalization { .. }
            | Error::InvalidRecord { .. }
            | Error::Format(_)
            | Error::Corruption(_)
            | Error::MissingQrels(_)
            | Error::Parse { .. } => EXIT_DATA,
            Error::Convergence { .. } | Error::Numerical { .. } => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub fn write_file(path: &Path, data: &[u8]) -> Result<(), Failure> {
    std::fs::write(path, data).map_err(|e| Failure::io(path, e))
}
