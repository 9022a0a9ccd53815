//! Adaptive sequential Monte Carlo sampler for multi-dipole source estimation
//! from a single MEG topography.
//!
//! The forward model is a homogeneous spherical conductor. The posterior over
//! the number of dipoles, their grid cells, orientations and strengths is
//! approximated by a particle population tempered from the prior
//! (`f = 0`) to the posterior (`f = 1`), with reversible-jump moves.

pub mod config;
pub mod error;
pub mod estimates;
pub mod exec;
pub mod geometry;
pub mod kernels;
pub mod likelihood;
pub mod metrics;
pub mod rng;
pub mod sampler;
pub mod state;
pub mod synthgen;

pub use config::Config;
pub use error::{Error, Result};
pub use estimates::{point_estimate, EstimatedConfig};
pub use exec::Execution;
pub use geometry::{LeadField, SensorArray, SourceGrid};
pub use likelihood::{NoiseModel, Topography};
pub use sampler::{AdaptConfig, Ensemble, Sampler, SamplerOutput};
pub use state::{Dipole, PriorParams, SourceConfig};
