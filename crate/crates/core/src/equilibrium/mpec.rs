//! One leader's bilevel problem with the follower KKT system embedded.

use std::sync::Arc;

use log::{debug, warn};

use crate::error::{Error, Result};
use crate::nlp::{minimize_with, NlpOptions, NlpProblem, NlpSolution, NlpStatus, SparseJacobian};
use crate::powerflow::{check_limits, VoltageState};

use super::model::PeriodModel;
use super::{evaluate, Outcome, PeriodCase};

#[derive(Debug, Clone)]
pub struct MpecOptions {
    /// Grid points of the incentive scan.
    pub grid: usize,
    /// Width at which the golden-section refinement stops.
    pub golden_tol: f64,
    /// Run the full-space NLP from the scanned optimum.
    pub polish: bool,
    pub nlp: NlpOptions,
    /// Initial weight of the complementarity penalty.
    pub penalty: f64,
    pub max_penalty: f64,
    /// Σ s∘υ accepted as complementary.
    pub comp_tol: f64,
}

impl Default for MpecOptions {
    fn default() -> Self {
        Self {
            grid: 41,
            golden_tol: 1e-10,
            polish: true,
            nlp: NlpOptions {
                tol: 1e-9,
                max_outer: 40,
                max_inner: 500,
                ..NlpOptions::default()
            },
            penalty: 10.0,
            max_penalty: 1e6,
            comp_tol: 1e-8,
        }
    }
}

/// Penalized MPEC of leader `leader` with rival incentives held fixed.
///
/// Variables follow the period model layout. Equalities are the power
/// balance, follower stationarity and slack definitions; inequalities are
/// the operating limits; complementarity `s∘υ = 0` enters the objective
/// with weight `penalty`.
#[derive(Debug, Clone)]
pub struct MpecInstance {
    pub leader: usize,
    pub rivals: Vec<f64>,
    pub penalty: f64,
    pub model: Arc<PeriodModel>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

pub fn build_mpec(case: &PeriodCase, d: usize, rivals: &[f64]) -> Result<MpecInstance> {
    let model = Arc::new(PeriodModel::new(case)?);
    MpecInstance::new(model, d, rivals, MpecOptions::default().penalty)
}

impl MpecInstance {
    pub fn new(model: Arc<PeriodModel>, leader: usize, rivals: &[f64], penalty: f64) -> Result<Self> {
        if leader >= model.d {
            return Err(Error::Config(format!("leader {leader} outside {} DRPs", model.d)));
        }
        if rivals.len() != model.d {
            return Err(Error::Config(format!(
                "rival profile has {} incentives, expected {}",
                rivals.len(),
                model.d
            )));
        }
        let mut rb = model.rho_bounds.clone();
        for (k, &r) in rivals.iter().enumerate() {
            if k == leader {
                continue;
            }
            let (a, b) = rb[k];
            if !(r >= a - 1e-12 && r <= b + 1e-12) {
                return Err(Error::Config(format!("rival {k} incentive {r} outside [{a}, {b}]")));
            }
            rb[k] = (r.clamp(a, b), r.clamp(a, b));
        }
        let (lo, hi) = model.bounds_with(&rb);
        Ok(Self {
            leader,
            rivals: rivals.to_vec(),
            penalty,
            model,
            lo,
            hi,
        })
    }

    /// (variables, equalities, inequalities)
    pub fn dimensions(&self) -> (usize, usize, usize) {
        (self.num_vars(), self.num_eq(), self.num_ineq())
    }

    /// Full-space solve with penalty escalation until the complementarity
    /// products vanish. Escalation stops at the first stage that does not
    /// converge, since a larger penalty only worsens the conditioning.
    pub fn solve_from(&mut self, x0: &[f64], opts: &MpecOptions) -> Result<NlpSolution> {
        let mut x = x0.to_vec();
        loop {
            let sol = minimize_with(self, &x, &opts.nlp, None)?;
            let comp = self.model.complementarity(&sol.x);
            debug!(
                "MPEC leader {}: penalty {:.0e} status {:?} complementarity {comp:.2e}",
                self.leader, self.penalty, sol.status
            );
            if comp <= opts.comp_tol || self.penalty >= opts.max_penalty || !sol.converged() {
                return Ok(sol);
            }
            self.penalty *= 10.0;
            x = sol.x;
        }
    }
}

impl NlpProblem for MpecInstance {
    fn num_vars(&self) -> usize {
        self.model.n_primal()
    }
    fn num_eq(&self) -> usize {
        self.model.n_eq()
    }
    fn num_ineq(&self) -> usize {
        self.model.n_limits()
    }
    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (self.lo.clone(), self.hi.clone())
    }
    fn objective(&self, x: &[f64]) -> f64 {
        self.model.cost(x) + self.penalty * self.model.complementarity(x)
    }
    fn gradient(&self, x: &[f64], g: &mut [f64]) {
        g.iter_mut().for_each(|v| *v = 0.0);
        let m = &self.model;
        m.cost_grad_into(x, g);
        for j in 0..m.n_pairs() {
            g[m.s(j)] += self.penalty * x[m.ups(j)];
            g[m.ups(j)] += self.penalty * x[m.s(j)];
        }
    }
    fn eq_values(&self, x: &[f64], out: &mut [f64]) {
        self.model.eq_values(x, out);
    }
    fn eq_jacobian(&self, x: &[f64], jac: &mut SparseJacobian) {
        self.model.eq_jacobian(x, jac, 0);
    }
    fn ineq_values(&self, x: &[f64], out: &mut [f64]) {
        self.model.limit_values(x, out);
    }
    fn ineq_jacobian(&self, x: &[f64], jac: &mut SparseJacobian) {
        self.model.limit_jacobian(x, jac, 0);
    }
}

#[derive(Debug, Clone)]
pub struct MpecResult {
    pub rho: f64,
    pub outcome: Outcome,
    /// Status of the full-space polish, when it ran.
    pub nlp_status: Option<NlpStatus>,
    pub evaluations: usize,
}

/// Scored LSE cost; limit violations make a point worse than any feasible one.
fn scored(case: &PeriodCase, out: &Outcome) -> f64 {
    let worst = check_limits(&case.net, &out.pf)
        .iter()
        .map(|v| -v.margin)
        .fold(0.0, f64::max);
    out.cost.total + 1e9 * worst
}

/// Best incentive of leader `d` with the others held at `rho`.
///
/// The incentive is scanned on a grid, refined by golden section around the
/// best grid point and then, optionally, polished by the full-space NLP. Ties
/// go to the lowest incentive.
pub fn solve_mpec(
    case: &PeriodCase,
    model: &Arc<PeriodModel>,
    d: usize,
    rho: &[f64],
    opts: &MpecOptions,
) -> Result<MpecResult> {
    let (lo, hi) = model.rho_bounds[d];
    let mut evaluations = 0;
    let mut start: Option<VoltageState> = None;
    let mut eval = |r: f64| -> Result<(f64, Outcome)> {
        let mut trial = rho.to_vec();
        trial[d] = r;
        let out = evaluate(case, &trial, start.as_ref())?;
        start = Some(out.pf.voltage.clone());
        evaluations += 1;
        Ok((scored(case, &out), out))
    };

    if hi - lo <= 0.0 {
        let (_, out) = eval(lo)?;
        return Ok(MpecResult {
            rho: lo,
            outcome: out,
            nlp_status: None,
            evaluations,
        });
    }

    let g = opts.grid.max(3);
    let pts: Vec<f64> = (0..g).map(|i| lo + (hi - lo) * i as f64 / (g - 1) as f64).collect();
    let mut best = (0, f64::INFINITY);
    let mut best_out = None;
    for (i, &r) in pts.iter().enumerate() {
        let (z, out) = eval(r)?;
        if best_out.is_none() || z < best.1 - 1e-12 * (1.0 + best.1.abs()) {
            best = (i, z);
            best_out = Some(out);
        }
    }
    let (mut a, mut b) = (pts[best.0.saturating_sub(1)], pts[(best.0 + 1).min(g - 1)]);
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - phi * (b - a);
    let mut e = a + phi * (b - a);
    let mut fc = eval(c)?.0;
    let mut fe = eval(e)?.0;
    while b - a > opts.golden_tol {
        if fc <= fe {
            b = e;
            e = c;
            fe = fc;
            c = b - phi * (b - a);
            fc = eval(c)?.0;
        } else {
            a = c;
            c = e;
            fc = fe;
            e = a + phi * (b - a);
            fe = eval(e)?.0;
        }
    }
    let mut rho_best = pts[best.0];
    let mut z_best = best.1;
    let mut out_best = best_out.expect("grid evaluated");
    let r_mid = 0.5 * (a + b);
    let (z_mid, out_mid) = eval(r_mid)?;
    if z_mid < z_best - 1e-12 * (1.0 + z_best.abs()) {
        rho_best = r_mid;
        z_best = z_mid;
        out_best = out_mid;
    }
    // Value comparisons stall near the square root of rounding; a secant on
    // the central-difference slope resolves an interior minimizer further.
    let (cell_lo, cell_hi) = (pts[best.0.saturating_sub(1)], pts[(best.0 + 1).min(g - 1)]);
    if rho_best > lo && rho_best < hi {
        let h = 1e-5 * (hi - lo).max(1e-3);
        let mut slope = |r: f64| -> Result<f64> { Ok((eval(r + h)?.0 - eval(r - h)?.0) / (2.0 * h)) };
        let (mut r0, mut r1) = (rho_best - 10.0 * h, rho_best);
        let (mut s0, mut s1) = (slope(r0)?, slope(r1)?);
        for _ in 0..8 {
            if s1 == s0 {
                break;
            }
            let r2 = r1 - s1 * (r1 - r0) / (s1 - s0);
            if !(r2 - h > cell_lo && r2 + h < cell_hi) || (r2 - r1).abs() <= 1e-13 * (1.0 + r1.abs()) {
                break;
            }
            (r0, s0) = (r1, s1);
            r1 = r2;
            s1 = slope(r1)?;
        }
        if r1 != rho_best && r1 > cell_lo && r1 < cell_hi {
            let (z, out) = eval(r1)?;
            if z <= z_best + 1e-10 * (1.0 + z_best.abs()) {
                rho_best = r1;
                z_best = z.min(z_best);
                out_best = out;
            }
        }
    }
    // A refined point within rounding of a bound is the bound.
    for bound in [lo, hi] {
        if (rho_best - bound).abs() <= 1e-7 * (1.0 + bound.abs()) && rho_best != bound {
            let (zb, ob) = eval(bound)?;
            if zb <= z_best + 1e-12 * (1.0 + z_best.abs()) {
                rho_best = bound;
                z_best = zb;
                out_best = ob;
            }
        }
    }

    let mut nlp_status = None;
    // A best response on a bound is exact already; only interior optima gain
    // from the stationary-point polish.
    if opts.polish && rho_best > lo && rho_best < hi {
        let mut inst = MpecInstance::new(model.clone(), d, rho, opts.penalty)?;
        let x0 = model.primal_from(&out_best);
        match inst.solve_from(&x0, opts) {
            Ok(sol) => {
                nlp_status = Some(sol.status);
                let r = sol.x[d].clamp(lo, hi);
                if r != rho_best {
                    let (z, out) = eval(r)?;
                    // Value comparisons only resolve the minimizer to about the
                    // square root of rounding; a converged stationary point that
                    // ties within rounding is the sharper estimate.
                    let slack = if sol.converged() { 1e-10 } else { -1e-12 };
                    if z < z_best + slack * (1.0 + z_best.abs()) {
                        debug!("MPEC polish moved leader {d} from {rho_best} to {r}");
                        rho_best = r;
                        out_best = out;
                    }
                }
            }
            Err(e) => warn!("MPEC polish for leader {d} failed: {e}"),
        }
    }
    Ok(MpecResult {
        rho: rho_best,
        outcome: out_best,
        nlp_status,
        evaluations,
    })
}
