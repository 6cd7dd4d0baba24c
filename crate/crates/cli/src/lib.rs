//! Library side of the `tomorib` binary: run configuration, subcommands and
//! exit codes.

pub mod commands;
pub mod config;

use tomorib_core::CoreError;

/// Process exit codes by error category. Usage errors exit with 2 (from
/// the argument parser).
pub mod exit {
    pub const OK: u8 = 0;
    pub const USAGE: u8 = 2;
    pub const CONFIG: u8 = 3;
    pub const MISSING_INPUT: u8 = 4;
    pub const MISSING_CHECKPOINT: u8 = 5;
    pub const GEOMETRY: u8 = 6;
    pub const FORMAT: u8 = 7;
    pub const INVALID: u8 = 8;
    pub const NETWORK: u8 = 9;
    pub const IO: u8 = 10;
}

/// Short category name and exit code of an error.
pub fn categorize(e: &CoreError) -> (&'static str, u8) {
    match e.root() {
        CoreError::Config(_) => ("config", exit::CONFIG),
        CoreError::MissingInput(_) => ("missing input", exit::MISSING_INPUT),
        CoreError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => ("missing input", exit::MISSING_INPUT),
        CoreError::MissingCheckpoint(_) => ("missing checkpoint", exit::MISSING_CHECKPOINT),
        CoreError::Geometry(_) => ("geometry mismatch", exit::GEOMETRY),
        CoreError::Format(_) => ("file format", exit::FORMAT),
        CoreError::InvalidArgument(_) | CoreError::Range(_) | CoreError::LesionPlacement(_) | CoreError::State(_) => {
            ("invalid argument", exit::INVALID)
        }
        CoreError::Nn(_) => ("network", exit::NETWORK),
        CoreError::Io(_) | CoreError::Context { .. } => ("io", exit::IO),
    }
}
