//! Distribution-network demand-response pricing: network model, AC power
//! flow, retail tariffs, the aggregator response game, a constrained NLP
//! solver and the leader-follower equilibrium machinery built on them.

// Negated float comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod equilibrium;
pub mod error;
pub mod follower;
pub mod netmodel;
pub mod nlp;
pub mod powerflow;
pub mod tariff;

pub use error::{Error, Result};
pub use follower::{DrpConfig, Follower, FollowerSolution, ResponseMode};
pub use netmodel::{Bus, Line, Network, PeriodLoads};
pub use nlp::{NlpOptions, NlpProblem, NlpSolution, NlpStatus};
pub use powerflow::{PowerFlowSolution, VoltageState};
pub use tariff::{BoundMode, TariffSchedule};
