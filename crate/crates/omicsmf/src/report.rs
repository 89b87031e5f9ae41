//! Shared fit-outcome types for the linear and nonlinear solvers.

use serde::{Deserialize, Serialize};

/// Why a solver stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Relative loss change fell below the configured tolerance.
    Converged,
    /// The iteration cap was reached.
    MaxIters,
    /// Backtracking hit the minimum step size without finding descent; the
    /// best point so far is returned.
    StepUnderflow,
}

/// Trace and bookkeeping for one solver run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Objective value before the first update, then after each cycle or
    /// accepted step.
    pub loss_trace: Vec<f64>,
    /// Update cycles (linear) or accepted steps (nonlinear) performed.
    pub iterations: usize,
    pub wall_clock_secs: f64,
    pub termination: Termination,
    pub seed: u64,
}

impl FitReport {
    pub fn final_loss(&self) -> f64 {
        *self
            .loss_trace
            .last()
            .expect("loss trace holds at least the initial value")
    }
}
