//! Files, run manifests and the `poolcal` command line around
//! [`poolcal_core`].

pub mod cli;
pub mod csv_io;
pub mod formats;
pub mod manifest;
pub mod presets;
pub mod simulate;

use std::path::{Path, PathBuf};

pub use poolcal_core as core;

/// Exit status for input and validation problems.
pub const EXIT_INPUT: u8 = 2;
/// Exit status when a calibration model cannot be fitted.
pub const EXIT_CALIBRATION: u8 = 3;
/// Exit status when an estimate did not converge.
pub const EXIT_CONVERGENCE: u8 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] poolcal_core::Error),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{0}")]
    Format(String),

    #[error("{0}")]
    Usage(String),

    #[error("{}: {inner}", path.display())]
    InFile { path: PathBuf, inner: Box<CliError> },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Prefixes the message with the file it concerns.
    pub fn in_file(self, path: &Path) -> Self {
        match self {
            e @ (CliError::Io { .. } | CliError::InFile { .. }) => e,
            e => CliError::InFile {
                path: path.to_path_buf(),
                inner: Box::new(e),
            },
        }
    }

    pub fn exit_code(&self) -> u8 {
        use poolcal_core::Error as E;
        match self {
            CliError::Core(E::EmptyCalibration { .. } | E::Separation { .. } | E::SingularDesign { .. }) => {
                EXIT_CALIBRATION
            }
            CliError::Core(
                E::NonFinite(_) | E::NotStationary(_) | E::SingularBread { .. } | E::Simulation(_),
            ) => EXIT_CONVERGENCE,
            CliError::InFile { inner, .. } => inner.exit_code(),
            _ => EXIT_INPUT,
        }
    }
}
