//! Centralized information filters and the distributed local information
//! filters.

mod central;
mod lif;

pub use central::{cif_step, clbif_step, riccati_traces, CentralFilter, CentralState};
pub use lif::{InfoState, Lif, LifConfig, StepDiagnostics};

/// Whether a state holds a prediction or a filtered quantity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatePhase {
    Predicted,
    Filtered,
}
