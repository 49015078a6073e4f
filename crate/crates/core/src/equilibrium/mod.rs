//! Leader-follower equilibrium of one period: LSE cost accounting, the
//! per-leader MPEC, the penalized EPEC system and Gauss–Seidel
//! diagonalization.

mod diag;
mod epec;
mod model;
mod mpec;

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::follower::{self, DrpConfig, Follower, FollowerSolution, GseReport, ResponseMode};
use crate::netmodel::{Network, PeriodLoads};
use crate::nlp::NlpStatus;
use crate::powerflow::{solve_pf_with, NetworkForms, PfOptions, PowerFlowSolution, VoltageState};
use crate::tariff::TariffSchedule;

pub use diag::{diagonalize, DiagOptions, SweepRecord};
pub use epec::{
    assemble_epec_nlp, estimate_duals, evaluate_stationarity, solve_epec, status_label, EpecOptions, EpecProblem,
    LeaderDuals, ResidualBlock, StationarityReport, ACCEPT_TOL,
};
pub use model::PeriodModel;
pub use mpec::{build_mpec, solve_mpec, MpecInstance, MpecOptions, MpecResult};

/// Everything needed to solve one period.
#[derive(Debug, Clone)]
pub struct PeriodCase {
    /// 0-based period index.
    pub period: usize,
    pub net: Arc<Network>,
    pub forms: Arc<NetworkForms>,
    pub loads: PeriodLoads,
    pub rtp: f64,
    /// Retail rate paid at each bus.
    pub bus_rate: Vec<f64>,
    /// Followers in ascending id order.
    pub followers: Vec<Follower>,
    /// (bus index, share) of each DRP's curtailment; shares sum to 1.
    pub placement: Vec<Vec<(usize, f64)>>,
    /// Cap on total curtailment, kW.
    pub p_max: f64,
    pub mode: ResponseMode,
    pub pf: PfOptions,
}

impl PeriodCase {
    /// Build period `t`. A DRP without explicit buses aggregates every bus
    /// of its class; curtailment is spread over its buses in proportion to
    /// their flexible load.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        net: Arc<Network>,
        forms: Arc<NetworkForms>,
        loads: PeriodLoads,
        tariff: &TariffSchedule,
        t: usize,
        drps: &[DrpConfig],
        pmax_fraction: f64,
        mode: ResponseMode,
        pf: PfOptions,
    ) -> Result<Self> {
        if t >= tariff.n_periods() {
            return Err(Error::Config(format!(
                "period {} outside the {}-period price series",
                t + 1,
                tariff.n_periods()
            )));
        }
        if !(pmax_fraction >= 0.0) {
            return Err(Error::Parameter(format!(
                "pmax_fraction must be nonnegative, got {pmax_fraction}"
            )));
        }
        let mut drps: Vec<&DrpConfig> = drps.iter().collect();
        drps.sort_by(|a, b| a.id.cmp(&b.id));
        let mut used = BTreeSet::new();
        let mut followers = Vec::with_capacity(drps.len());
        let mut placement = Vec::with_capacity(drps.len());
        for cfg in drps {
            cfg.validate()?;
            let buses: Vec<usize> = if cfg.buses.is_empty() {
                net.buses
                    .iter()
                    .enumerate()
                    .filter(|(_, b)| b.class.as_deref() == Some(cfg.class.as_str()))
                    .map(|(i, _)| i)
                    .collect()
            } else {
                cfg.buses
                    .iter()
                    .map(|&id| {
                        net.index_of(id)
                            .ok_or_else(|| Error::Config(format!("DRP {}: unknown bus {id}", cfg.id)))
                    })
                    .collect::<Result<_>>()?
            };
            for &i in &buses {
                if !used.insert(i) {
                    return Err(Error::Config(format!(
                        "DRP {}: bus {} already belongs to another DRP",
                        cfg.id, net.buses[i].id
                    )));
                }
            }
            let p_base: f64 = buses.iter().map(|&i| loads.flex_p[i]).sum();
            let shares = if p_base > 0.0 {
                buses
                    .iter()
                    .map(|&i| (i, loads.flex_p[i] / p_base))
                    .filter(|s| s.1 > 0.0)
                    .collect()
            } else {
                let w = 1.0 / buses.len().max(1) as f64;
                buses.iter().map(|&i| (i, w)).collect()
            };
            let class = Some(cfg.class.as_str());
            followers.push(Follower::from_config(
                cfg,
                p_base,
                tariff.class_flat(class),
                tariff.incentive_bounds(class, t),
            ));
            placement.push(shares);
        }
        let bus_rate = net
            .buses
            .iter()
            .map(|b| tariff.class_flat(b.class.as_deref()))
            .collect();
        let p_max = pmax_fraction * followers.iter().map(|f| f.p_base).sum::<f64>();
        Ok(Self {
            period: t,
            net,
            forms,
            loads,
            rtp: tariff.rtp[t],
            bus_rate,
            followers,
            placement,
            p_max,
            mode,
            pf,
        })
    }

    pub fn n_drps(&self) -> usize {
        self.followers.len()
    }

    pub fn lower_incentives(&self) -> Vec<f64> {
        self.followers.iter().map(|f| f.incentive_lo).collect()
    }

    /// Active curtailment per bus, kW.
    pub fn curtailment_by_bus(&self, p: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; self.net.n_buses()];
        for (shares, &pd) in self.placement.iter().zip(p) {
            for &(i, w) in shares {
                c[i] += w * pd;
            }
        }
        c
    }

    pub fn solve_pf(&self, p: &[f64], start: Option<&VoltageState>) -> Result<PowerFlowSolution> {
        let curt = self.curtailment_by_bus(p);
        solve_pf_with(&self.net, &self.forms, &self.loads, &curt, &self.pf, start)
    }
}

/// Terms of the LSE cost for one period (currency).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    /// Real-time price times slack generation.
    pub purchase: f64,
    /// Retail revenue on the load left after curtailment.
    pub revenue: f64,
    /// Incentives paid for curtailment.
    pub payment: f64,
    /// purchase − revenue + payment.
    pub total: f64,
}

/// LSE cost of a solved period.
pub fn lse_cost(case: &PeriodCase, pf: &PowerFlowSolution, rho: &[f64], p: &[f64]) -> CostBreakdown {
    let curt = case.curtailment_by_bus(p);
    let purchase = case.rtp * pf.p_gen;
    let revenue: f64 = (0..case.net.n_buses())
        .map(|i| case.bus_rate[i] * (case.loads.p[i] - curt[i]))
        .sum();
    let payment: f64 = rho.iter().zip(p).map(|(r, q)| r * q).sum();
    CostBreakdown {
        purchase,
        revenue,
        payment,
        total: purchase - revenue + payment,
    }
}

/// Follower equilibrium, power flow and cost at fixed offers.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub rho: Vec<f64>,
    pub ve: FollowerSolution,
    pub pf: PowerFlowSolution,
    pub cost: CostBreakdown,
}

pub fn evaluate(case: &PeriodCase, rho: &[f64], start: Option<&VoltageState>) -> Result<Outcome> {
    let ve = follower::solve_ve(rho, &case.followers, case.p_max, case.mode)?;
    let pf = case.solve_pf(&ve.p, start)?;
    let cost = lse_cost(case, &pf, rho, &ve.p);
    Ok(Outcome {
        rho: rho.to_vec(),
        ve,
        pf,
        cost,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Diagonalization,
    PenalizedNlp,
    /// Outside the DR window: flat-rate incentives, no curtailment.
    Pinned,
}

#[derive(Debug, Clone)]
pub struct PeriodEquilibrium {
    pub period: usize,
    pub method: Method,
    pub rho: Vec<f64>,
    pub p: Vec<f64>,
    /// Shared multiplier of the curtailment cap.
    pub lambda: f64,
    pub ve: FollowerSolution,
    pub pf: PowerFlowSolution,
    pub cost: CostBreakdown,
    pub duals: Vec<LeaderDuals>,
    pub stationarity: StationarityReport,
    pub sweeps: usize,
    pub trace: Vec<SweepRecord>,
    pub nlp_status: Option<NlpStatus>,
    /// C_Pen at the raw NLP iterate before the consistency pass.
    pub raw_c_pen: Option<f64>,
}

impl PeriodEquilibrium {
    pub fn c_pen(&self) -> f64 {
        self.stationarity.c_pen
    }

    /// Objective value of each DRP at the equilibrium.
    pub fn drp_costs(&self, case: &PeriodCase) -> Vec<f64> {
        case.followers
            .iter()
            .zip(self.p.iter().zip(&self.rho))
            .map(|(f, (&p, &r))| follower::drp_objective(p, r, f))
            .collect()
    }
}

/// A period outside the DR window.
pub fn pinned_period(case: &PeriodCase) -> Result<PeriodEquilibrium> {
    let d = case.n_drps();
    let rho = case.lower_incentives();
    let p = vec![0.0; d];
    let pf = case.solve_pf(&p, None)?;
    let cost = lse_cost(case, &pf, &rho, &p);
    Ok(PeriodEquilibrium {
        period: case.period,
        method: Method::Pinned,
        ve: FollowerSolution {
            p: p.clone(),
            lambda: 0.0,
            nu_lo: vec![0.0; d],
            nu_hi: vec![0.0; d],
            kkt_residual: 0.0,
        },
        rho,
        p,
        lambda: 0.0,
        pf,
        cost,
        duals: Vec::new(),
        stationarity: StationarityReport::empty(),
        sweeps: 0,
        trace: Vec::new(),
        nlp_status: None,
        raw_c_pen: None,
    })
}

/// Probe an equilibrium with unilateral deviations. Leader deviations are
/// scored on the LSE cost after the followers re-equilibrate.
pub fn certify(case: &PeriodCase, eq: &PeriodEquilibrium, samples: usize, seed: u64) -> Result<GseReport> {
    let cost = |d: usize, r: f64| -> Result<f64> {
        let mut rho = eq.rho.clone();
        rho[d] = r;
        Ok(evaluate(case, &rho, Some(&eq.pf.voltage))?.cost.total)
    };
    follower::check_gse(
        &eq.rho,
        &eq.p,
        &case.followers,
        case.p_max,
        case.mode,
        Some(&cost),
        samples,
        seed,
    )
}

/// Whole-day result.
#[derive(Debug, Clone)]
pub struct EquilibriumSolution {
    pub periods: Vec<PeriodEquilibrium>,
}

impl EquilibriumSolution {
    pub fn incentives(&self) -> Vec<Vec<f64>> {
        self.periods.iter().map(|p| p.rho.clone()).collect()
    }

    pub fn responses(&self) -> Vec<Vec<f64>> {
        self.periods.iter().map(|p| p.p.clone()).collect()
    }

    pub fn lse_cost(&self) -> f64 {
        self.periods.iter().map(|p| p.cost.total).sum()
    }

    pub fn drp_payment(&self) -> f64 {
        self.periods.iter().map(|p| p.cost.payment).sum()
    }

    /// Largest penalty residual over the solved periods.
    pub fn c_pen(&self) -> f64 {
        self.periods.iter().map(|p| p.c_pen()).fold(0.0, f64::max)
    }

    pub fn iterations(&self) -> usize {
        self.periods.iter().map(|p| p.sweeps).max().unwrap_or(0)
    }
}
