//! Exit codes: 0 success, 2 usage or config, 3 numeric failure, 4 I/O.

use std::fmt;
use std::path::Path;

use flag_core::FlagError;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Numeric(String),
    Io(String),
}

pub type CliResult<T> = Result<T, Failure>;

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Numeric(_) => 3,
            Self::Io(_) => 4,
        }
    }

    /// Stable tag printed as `error[tag]` on stderr.
    pub fn tag(&self) -> &'static str {
        match self {
            Self::Usage(_) => "usage",
            Self::Numeric(_) => "numeric",
            Self::Io(_) => "io",
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) | Self::Numeric(m) | Self::Io(m) => f.write_str(m),
        }
    }
}

impl From<FlagError> for Failure {
    fn from(e: FlagError) -> Self {
        let msg = e.to_string();
        if e.is_numeric() {
            return Self::Numeric(msg);
        }
        match e {
            FlagError::Io(_) | FlagError::Parse { .. } => Self::Io(msg),
            _ => Self::Usage(msg),
        }
    }
}

/// Attaches the offending path to file errors.
pub fn at_path<T>(path: &Path, r: flag_core::Result<T>) -> CliResult<T> {
    r.map_err(|e| match Failure::from(e) {
        Failure::Io(m) => Failure::Io(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    at_path(path, flag_core::io::write_atomic(path, bytes))
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}
