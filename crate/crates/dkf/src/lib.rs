//! Distributed Kalman filtering for sparse large-scale systems.
//!
//! Sensors run local information filters on overlapping sub-systems. Shared
//! observations are fused by consensus, and the band of the global error
//! covariance is assimilated with the distributed iterate-collapse inversion
//! (DICI). Centralized filters are provided as baselines.

pub mod banded;
pub mod config;
pub mod consensus;
pub mod decomposition;
pub mod dici;
pub mod error;
pub mod filters;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod simulator;
pub mod sparse;

pub use error::{DkfError, Result};
