use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
///
/// Variants are grouped by how the CLI reports them: precondition and
/// configuration problems exit with status 1, numerical aborts with status 2.
#[derive(Debug, Error)]
pub enum OsseError {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("point ({x:.3}, {y:.3}) lies outside the grid extent")]
    OutOfExtent { x: f64, y: f64 },

    #[error("non-finite {variable} at cell ({i}, {j}), t = {t:.3} s")]
    NonFinite {
        variable: &'static str,
        i: usize,
        j: usize,
        t: f64,
    },

    #[error("unstable configuration: time step {dt:.3e} s underflowed at t = {t:.3} s")]
    Unstable { dt: f64, t: f64 },

    #[error("degenerate innovation covariance")]
    DegenerateCovariance,

    #[error("member {member}: {source}")]
    Member {
        member: usize,
        #[source]
        source: Box<OsseError>,
    },

    #[error("cycle {cycle} (t = {t:.0} s): {source}")]
    Cycle {
        cycle: usize,
        t: f64,
        #[source]
        source: Box<OsseError>,
    },

    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl OsseError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        OsseError::Invalid(msg.into())
    }

    pub fn parse(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        OsseError::Parse {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        OsseError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for solver and analysis failures, as opposed to bad inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            OsseError::NonFinite { .. }
            | OsseError::Unstable { .. }
            | OsseError::DegenerateCovariance => true,
            OsseError::Member { source, .. } | OsseError::Cycle { source, .. } => {
                source.is_numerical()
            }
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, OsseError>;
