//! Scenario runner for the demand-response equilibrium library: case
//! configuration, day-long BDR/ADR studies, weight sweeps, method
//! comparison and plot data.

// Negated float comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod report;
pub mod runner;

pub use config::{CaseConfig, ClassConfig, SolverMode};
pub use report::{emit_plot_data, plot_data, DayTotals, Pair, PlotKind, RunReport};
pub use runner::{compare_methods, power_flow_table, run_case, sweep_weights, Comparison, Scenario, SweepPoint};

use drpe_core::Error;

/// Process exit code for an error: 1 when a solver failed to converge,
/// 2 for usage and configuration problems, 3 for bad input data.
pub fn exit_code(e: &Error) -> i32 {
    match e.root() {
        Error::NonConvergence { .. }
        | Error::Cycling { .. }
        | Error::Numerical(_)
        | Error::Infeasible(_)
        | Error::Contract(_) => 1,
        Error::Config(_) | Error::Parameter(_) => 2,
        Error::Parse { .. } | Error::Topology(_) | Error::Io { .. } => 3,
        Error::InContext { .. } => unreachable!("root strips context"),
    }
}
