use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty source grid: no lattice point within {shell_radius} m at spacing {spacing} m")]
    EmptyGrid { spacing: f64, shell_radius: f64 },

    #[error("sensor at {sensor:?} coincides with dipole at {dipole:?}")]
    SensorAtDipole { sensor: [f64; 3], dipole: [f64; 3] },

    #[error("invalid source configuration: {0}")]
    InvalidSource(String),

    #[error("configuration error: {0}")]
    InvalidConfig(String),

    #[error("cell {cell} out of range (grid has {n_cells} cells)")]
    CellOutOfRange { cell: usize, n_cells: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("noise sigma {sigma:e} T is below sigma_floor {floor:e} T")]
    NoiseBelowFloor { sigma: f64, floor: f64 },

    #[error("tempering exponent {0} outside [0, 1]")]
    ExponentOutOfRange(f64),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("malformed lead-field file at byte {offset}: {reason}")]
    MalformedLeadField { offset: u64, reason: String },

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("estimate inconsistent with ensemble: {0}")]
    Inconsistent(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code for command-line use: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParameter(_)
            | Error::InvalidConfig(_)
            | Error::NoiseBelowFloor { .. }
            | Error::ExponentOutOfRange(_)
            | Error::EmptyGrid { .. } => 2,
            Error::Numerical(_) | Error::SensorAtDipole { .. } => 4,
            _ => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
