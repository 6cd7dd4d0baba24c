//! Chest tomosynthesis simulation, reconstruction and rib suppression.

pub mod config;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod phantom;
pub mod projector;
pub mod recon;
pub mod suppression;
pub mod volume;

pub use error::{CoreError, Result};
