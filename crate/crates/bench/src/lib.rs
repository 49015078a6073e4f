//! Fixtures shared by the solver benchmarks.

use std::path::PathBuf;

use drpe_cli::{CaseConfig, Scenario};
use drpe_core::equilibrium::PeriodCase;

/// Period `t` (0-based) of a shipped case under `cases/`.
pub fn shipped_period(case: &str, t: usize) -> PeriodCase {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../cases")
        .join(case)
        .join("case.toml");
    let cfg = CaseConfig::load(path).expect("shipped case loads");
    Scenario::build(&cfg)
        .and_then(|sc| sc.period_case(t))
        .expect("shipped case builds")
}
