//! Gauss–Seidel diagonalization over the leaders' MPECs.

use std::sync::Arc;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::epec::{estimate_duals, evaluate_stationarity, LeaderDuals};
use super::model::PeriodModel;
use super::mpec::{solve_mpec, MpecOptions};
use super::{evaluate, Method, PeriodCase, PeriodEquilibrium};

#[derive(Debug, Clone)]
pub struct DiagOptions {
    /// Max-norm change of (incentives, curtailments) that ends the loop.
    pub eps: f64,
    pub max_outer: usize,
    /// Leader order within a sweep; ascending DRP order when `None`.
    pub order: Option<Vec<usize>>,
    pub mpec: MpecOptions,
}

impl Default for DiagOptions {
    fn default() -> Self {
        Self {
            eps: 0.01,
            max_outer: 20,
            order: None,
            mpec: MpecOptions::default(),
        }
    }
}

/// Strategy snapshot after a sweep (sweep 0 is the starting point).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub sweep: usize,
    pub rho: Vec<f64>,
    /// Curtailments, kW.
    pub p: Vec<f64>,
    pub change: f64,
    pub lse_cost: f64,
}

fn change(a: &SweepRecord, rho: &[f64], p: &[f64]) -> f64 {
    a.rho
        .iter()
        .zip(rho)
        .chain(a.p.iter().zip(p))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Solve one period by sweeping the leaders' MPECs until the strategy
/// vector stops moving. Starts from incentives at their floors and the
/// follower equilibrium there. The returned sweep count includes the final
/// confirming sweep.
pub fn diagonalize(case: &PeriodCase, opts: &DiagOptions) -> Result<PeriodEquilibrium> {
    if !(opts.eps > 0.0) {
        return Err(Error::Parameter(format!("eps must be positive, got {}", opts.eps)));
    }
    let model = Arc::new(PeriodModel::new(case)?);
    let d = model.d;
    let order: Vec<usize> = match &opts.order {
        Some(o) => {
            let mut sorted = o.clone();
            sorted.sort_unstable();
            if sorted != (0..d).collect::<Vec<_>>() {
                return Err(Error::Config(format!(
                    "sweep order {o:?} is not a permutation of 0..{d}"
                )));
            }
            o.clone()
        }
        None => (0..d).collect(),
    };
    let mut rho = case.lower_incentives();
    let mut out = evaluate(case, &rho, None).map_err(|e| e.in_period(case.period))?;
    let mut trace = vec![SweepRecord {
        sweep: 0,
        rho: rho.clone(),
        p: out.ve.p.clone(),
        change: f64::INFINITY,
        lse_cost: out.cost.total,
    }];
    let mut sweeps = 0;
    let mut converged = d == 0;
    while !converged {
        if sweeps >= opts.max_outer {
            let last = trace.last().map_or(f64::INFINITY, |r| r.change);
            return Err(Error::Cycling {
                sweeps,
                last_change: last,
                trace: trace
                    .iter()
                    .map(|r| r.rho.iter().chain(&r.p).copied().collect())
                    .collect(),
            }
            .in_period(case.period));
        }
        sweeps += 1;
        let mut status = Vec::with_capacity(d);
        for &k in &order {
            let res = solve_mpec(case, &model, k, &rho, &opts.mpec)
                .map_err(|e| e.in_drp(case.period, &case.followers[k].id))?;
            rho[k] = res.rho;
            status.push(res.nlp_status);
            out = res.outcome;
        }
        if out.rho != rho {
            out = evaluate(case, &rho, Some(&out.pf.voltage)).map_err(|e| e.in_period(case.period))?;
        }
        let delta = change(trace.last().expect("trace starts non-empty"), &rho, &out.ve.p);
        debug!(
            "period {} sweep {sweeps}: change {delta:.3e}, LSE cost {:.4}, polish {status:?}",
            case.period + 1,
            out.cost.total
        );
        trace.push(SweepRecord {
            sweep: sweeps,
            rho: rho.clone(),
            p: out.ve.p.clone(),
            change: delta,
            lse_cost: out.cost.total,
        });
        converged = delta <= opts.eps;
    }

    let xp = model.primal_from(&out);
    let duals: Vec<LeaderDuals> = (0..d).map(|k| estimate_duals(&model, &xp, k, 1e-9).0).collect();
    let stationarity = evaluate_stationarity(case, &xp, &duals)?;
    Ok(PeriodEquilibrium {
        period: case.period,
        method: Method::Diagonalization,
        p: out.ve.p.clone(),
        lambda: out.ve.lambda,
        rho,
        ve: out.ve,
        pf: out.pf,
        cost: out.cost,
        duals,
        stationarity,
        sweeps,
        trace,
        nlp_status: None,
        raw_c_pen: None,
    })
}
