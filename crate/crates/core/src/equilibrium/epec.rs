//! Joint strong-stationarity system of all leaders, solved as one NLP whose
//! objective sums every complementarity product (C_Pen), plus the residual
//! evaluator used to accept equilibria from either method.

use std::sync::Arc;

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nlp::{minimize_with, NlpOptions, NlpProblem, NlpStatus, SparseJacobian};

use super::diag::SweepRecord;
use super::model::PeriodModel;
use super::mpec::{solve_mpec, MpecOptions};
use super::{evaluate, Method, PeriodCase, PeriodEquilibrium};

/// Residual and penalty threshold for accepting an equilibrium.
pub const ACCEPT_TOL: f64 = 1e-6;

/// Multipliers of one leader's MPEC.
///
/// `y` pairs with the equalities (power balance, follower stationarity,
/// slack definitions), `pi` with the operating limits, `phi1`/`phi2` with
/// `s ≥ 0`/`υ ≥ 0`, `phi3` with `Σ s∘υ ≤ 0`, and `mu_lo`/`mu_hi` with the
/// incentive interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderDuals {
    pub y: Vec<f64>,
    pub pi: Vec<f64>,
    pub phi1: Vec<f64>,
    pub phi2: Vec<f64>,
    pub phi3: f64,
    pub mu_lo: f64,
    pub mu_hi: f64,
}

impl LeaderDuals {
    fn zeros(m: &PeriodModel) -> Self {
        Self {
            y: vec![0.0; m.n_eq()],
            pi: vec![0.0; m.n_limits()],
            phi1: vec![0.0; m.n_pairs()],
            phi2: vec![0.0; m.n_pairs()],
            phi3: 0.0,
            mu_lo: 0.0,
            mu_hi: 0.0,
        }
    }

    fn fits(&self, m: &PeriodModel) -> bool {
        self.y.len() == m.n_eq()
            && self.pi.len() == m.n_limits()
            && self.phi1.len() == m.n_pairs()
            && self.phi2.len() == m.n_pairs()
    }

    fn signs(&self) -> f64 {
        self.pi
            .iter()
            .chain(&self.phi1)
            .chain(&self.phi2)
            .chain([&self.phi3, &self.mu_lo, &self.mu_hi])
            .map(|v| (-v).max(0.0))
            .fold(0.0, f64::max)
    }
}

/// Gradient of leader `d`'s MPEC Lagrangian over the whole primal vector.
fn leader_gradient(m: &PeriodModel, x: &[f64], du: &LeaderDuals, d: usize) -> Vec<f64> {
    let mut g = vec![0.0; m.n_primal()];
    m.cost_grad_into(x, &mut g);
    m.eq_dense_jacobian(x).tmul_add(&du.y, &mut g);
    let neg: Vec<f64> = du.pi.iter().map(|v| -v).collect();
    m.limit_sparse_jacobian(x).tmul_add(&neg, &mut g);
    for j in 0..m.n_pairs() {
        g[m.s(j)] += -du.phi1[j] + du.phi3 * x[m.ups(j)];
        g[m.ups(j)] += -du.phi2[j] + du.phi3 * x[m.s(j)];
    }
    g[m.rho(d)] += du.mu_hi - du.mu_lo;
    g
}

/// Role of a primal index, used to name residual blocks.
fn role(m: &PeriodModel, i: usize) -> &'static str {
    if i < m.d {
        "incentive"
    } else if i < m.pg() {
        "voltage"
    } else if i < m.pg() + 2 {
        "generation"
    } else if i < m.ups(0) {
        "curtailment"
    } else if i < m.s(0) {
        "follower multipliers"
    } else {
        "slacks"
    }
}

/// Least squares over free columns `[0, n_free)` and nonnegative columns
/// after them (Lawson–Hanson with the free columns always passive).
///
/// Columns are scaled to unit norm and every subproblem is solved on the
/// full matrix; eliminating the free columns by projection first loses too
/// much accuracy on the dual blocks.
fn mixed_nnls(a: &DMatrix<f64>, b: &DVector<f64>, n_free: usize) -> DVector<f64> {
    let n = a.ncols();
    if n == 0 {
        return DVector::zeros(0);
    }
    let norms: Vec<f64> = (0..n)
        .map(|j| {
            let c = a.column(j).norm();
            if c > 0.0 {
                c
            } else {
                1.0
            }
        })
        .collect();
    let mut a = a.clone();
    for (j, &c) in norms.iter().enumerate() {
        a.column_mut(j).unscale_mut(c);
    }
    let a = &a;
    let tol = 1e-12 * b.norm().max(1.0) * (a.nrows().max(n) as f64);
    let solve_on = |set: &[bool]| -> DVector<f64> {
        let idx: Vec<usize> = (0..n).filter(|&i| set[i]).collect();
        let mut full = DVector::zeros(n);
        if idx.is_empty() {
            return full;
        }
        // Multiplier columns can be exactly dependent; a relative cutoff
        // keeps rounding from deciding the rank.
        let svd = a.select_columns(idx.iter()).svd(true, true);
        let cut = 1e-10 * svd.singular_values.amax().max(1e-300);
        let z = svd.solve(b, cut).unwrap_or_else(|_| DVector::zeros(idx.len()));
        for (k, &i) in idx.iter().enumerate() {
            full[i] = z[k];
        }
        full
    };
    let mut passive: Vec<bool> = (0..n).map(|i| i < n_free).collect();
    let mut x = solve_on(&passive);
    let mut skip = vec![false; n];
    for _ in 0..3 * n + 10 {
        let w = a.transpose() * (b - a * &x);
        let pick = (n_free..n)
            .filter(|&i| !passive[i] && !skip[i])
            .max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(j) = pick else { break };
        if w[j] <= tol {
            break;
        }
        passive[j] = true;
        let mut changed = false;
        for _ in 0..3 * n + 10 {
            let z = solve_on(&passive);
            if (n_free..n).filter(|&i| passive[i]).all(|i| z[i] > 0.0) {
                x = z;
                changed = true;
                break;
            }
            let mut alpha = f64::INFINITY;
            for i in (n_free..n).filter(|&i| passive[i] && z[i] <= 0.0) {
                let den = x[i] - z[i];
                if den > 0.0 {
                    alpha = alpha.min(x[i] / den);
                }
            }
            if !alpha.is_finite() {
                alpha = 0.0;
            }
            let before = x.clone();
            x += (z - &x) * alpha;
            for i in n_free..n {
                if passive[i] && x[i] <= 1e-15 {
                    passive[i] = false;
                    x[i] = 0.0;
                }
            }
            if (&x - before).amax() > 0.0 {
                changed = true;
            }
        }
        if changed {
            skip.iter_mut().for_each(|s| *s = false);
        } else {
            passive[j] = false;
            skip[j] = true;
        }
    }
    // The loop can stop mid-interpolation; finish on the passive set.
    let z = solve_on(&passive);
    if (n_free..n).filter(|&i| passive[i]).all(|i| z[i] >= 0.0) {
        x = z;
    }
    for (v, &c) in x.iter_mut().zip(&norms) {
        *v /= c;
    }
    x
}

/// Multipliers that best satisfy leader `d`'s stationarity at primal `x`.
///
/// Sign-constrained multipliers are only admitted where their constraint is
/// within `act_tol` of active, so the complementarity products stay zero.
/// Returns the multipliers and the remaining stationarity residual.
pub fn estimate_duals(model: &PeriodModel, x: &[f64], d: usize, act_tol: f64) -> (LeaderDuals, f64) {
    let m = model;
    let free = m.free_rows(d);
    let mut row_of = vec![usize::MAX; m.n_primal()];
    for (k, &i) in free.iter().enumerate() {
        row_of[i] = k;
    }
    let mut h = vec![0.0; m.n_limits()];
    m.limit_values(x, &mut h);
    let (lo, hi) = m.rho_bounds[d];

    enum Col {
        Pi(usize),
        Phi1(usize),
        Phi2(usize),
        Phi3,
        MuLo,
        MuHi,
    }
    let mut cols = Vec::new();
    for (j, &hj) in h.iter().enumerate() {
        if hj <= act_tol {
            cols.push(Col::Pi(j));
        }
    }
    for j in 0..m.n_pairs() {
        if x[m.s(j)] <= act_tol {
            cols.push(Col::Phi1(j));
        }
        if x[m.ups(j)] <= act_tol {
            cols.push(Col::Phi2(j));
        }
    }
    cols.push(Col::Phi3);
    // A collapsed interval is an equality: one signed multiplier instead of
    // two opposite sign-constrained columns.
    let pinned = hi - lo <= act_tol;
    if !pinned {
        if x[m.rho(d)] - lo <= act_tol {
            cols.push(Col::MuLo);
        }
        if hi - x[m.rho(d)] <= act_tol {
            cols.push(Col::MuHi);
        }
    }

    let neq = m.n_eq();
    let n_free = neq + usize::from(pinned);
    let mut a = DMatrix::<f64>::zeros(free.len(), n_free + cols.len());
    if pinned {
        a[(row_of[m.rho(d)], neq)] = 1.0;
    }
    for &(r, c, v) in &m.eq_dense_jacobian(x).entries {
        if row_of[c] != usize::MAX {
            a[(row_of[c], r)] += v;
        }
    }
    let jh = m.limit_sparse_jacobian(x);
    for (k, col) in cols.iter().enumerate() {
        let c = n_free + k;
        match *col {
            Col::Pi(j) => {
                for &(r, i, v) in &jh.entries {
                    if r == j && row_of[i] != usize::MAX {
                        a[(row_of[i], c)] -= v;
                    }
                }
            }
            Col::Phi1(j) => a[(row_of[m.s(j)], c)] -= 1.0,
            Col::Phi2(j) => a[(row_of[m.ups(j)], c)] -= 1.0,
            Col::Phi3 => {
                for j in 0..m.n_pairs() {
                    a[(row_of[m.s(j)], c)] += x[m.ups(j)];
                    a[(row_of[m.ups(j)], c)] += x[m.s(j)];
                }
            }
            Col::MuLo => a[(row_of[m.rho(d)], c)] -= 1.0,
            Col::MuHi => a[(row_of[m.rho(d)], c)] += 1.0,
        }
    }
    let mut g = vec![0.0; m.n_primal()];
    m.cost_grad_into(x, &mut g);
    let b = DVector::from_iterator(free.len(), free.iter().map(|&i| -g[i]));
    let sol = mixed_nnls(&a, &b, n_free);

    let mut du = LeaderDuals::zeros(m);
    du.y.copy_from_slice(&sol.as_slice()[..neq]);
    if pinned {
        du.mu_hi = sol[neq].max(0.0);
        du.mu_lo = (-sol[neq]).max(0.0);
    }
    for (k, col) in cols.iter().enumerate() {
        let v = sol[n_free + k].max(0.0);
        match *col {
            Col::Pi(j) => du.pi[j] = v,
            Col::Phi1(j) => du.phi1[j] = v,
            Col::Phi2(j) => du.phi2[j] = v,
            Col::Phi3 => du.phi3 = v,
            Col::MuLo => du.mu_lo = v,
            Col::MuHi => du.mu_hi = v,
        }
    }
    let g = leader_gradient(m, x, &du, d);
    let res = free.iter().map(|&i| g[i].abs()).fold(0.0, f64::max);
    (du, res)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationarityReport {
    pub blocks: Vec<ResidualBlock>,
    pub c_pen: f64,
    pub max_residual: f64,
    pub accepted: bool,
}

impl StationarityReport {
    pub fn empty() -> Self {
        Self {
            blocks: Vec::new(),
            c_pen: 0.0,
            max_residual: 0.0,
            accepted: true,
        }
    }

    /// Largest residual among blocks whose name contains `role`.
    pub fn block(&self, role: &str) -> Option<f64> {
        self.blocks
            .iter()
            .filter(|b| b.name.contains(role))
            .map(|b| b.value)
            .reduce(f64::max)
    }
}

/// Σ of all complementarity products at primal `x` with the given duals.
fn c_pen_of(m: &PeriodModel, x: &[f64], duals: &[LeaderDuals]) -> f64 {
    let mut h = vec![0.0; m.n_limits()];
    m.limit_values(x, &mut h);
    let mut c = m.complementarity(x).abs();
    for (d, du) in duals.iter().enumerate() {
        let (lo, hi) = m.rho_bounds[d];
        for j in 0..m.n_pairs() {
            c += (du.phi1[j] * x[m.s(j)]).abs() + (du.phi2[j] * x[m.ups(j)]).abs();
        }
        c += (du.mu_lo * (x[m.rho(d)] - lo)).abs() + (du.mu_hi * (hi - x[m.rho(d)])).abs();
        c += du.pi.iter().zip(&h).map(|(p, hj)| (p * hj).abs()).sum::<f64>();
    }
    c
}

/// Residual of every block of the joint stationarity system at primal `x`.
pub fn evaluate_stationarity(case: &PeriodCase, x: &[f64], duals: &[LeaderDuals]) -> Result<StationarityReport> {
    let m = PeriodModel::new(case)?;
    if x.len() != m.n_primal() {
        return Err(Error::Contract(format!(
            "primal point has {} entries, expected {}",
            x.len(),
            m.n_primal()
        )));
    }
    if duals.len() != m.d || duals.iter().any(|du| !du.fits(&m)) {
        return Err(Error::Contract(format!(
            "expected {} complete dual blocks, got {}",
            m.d,
            duals.len()
        )));
    }
    let mut blocks = Vec::new();
    let mut eqv = vec![0.0; m.n_eq()];
    m.eq_values(x, &mut eqv);
    let maxabs = |s: &[f64]| s.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let n = m.n;
    blocks.push(ResidualBlock {
        name: "power balance".into(),
        value: maxabs(&eqv[..2 * n]),
    });
    blocks.push(ResidualBlock {
        name: "follower stationarity".into(),
        value: maxabs(&eqv[2 * n..2 * n + m.d]),
    });
    blocks.push(ResidualBlock {
        name: "slack definitions".into(),
        value: maxabs(&eqv[2 * n + m.d..]),
    });
    let mut h = vec![0.0; m.n_limits()];
    m.limit_values(x, &mut h);
    blocks.push(ResidualBlock {
        name: "operating limits".into(),
        value: h.iter().map(|v| (-v).max(0.0)).fold(0.0, f64::max),
    });
    let primal_signs = (0..m.n_pairs())
        .flat_map(|j| [x[m.s(j)], x[m.ups(j)]])
        .chain((0..m.d).flat_map(|d| [x[m.rho(d)] - m.rho_bounds[d].0, m.rho_bounds[d].1 - x[m.rho(d)]]))
        .map(|v| (-v).max(0.0))
        .fold(0.0, f64::max);
    blocks.push(ResidualBlock {
        name: "primal signs".into(),
        value: primal_signs,
    });
    for (d, du) in duals.iter().enumerate() {
        let id = &case.followers[d].id;
        let g = leader_gradient(&m, x, du, d);
        let mut by_role: Vec<(&'static str, f64)> = Vec::new();
        for i in m.free_rows(d) {
            let r = role(&m, i);
            match by_role.iter_mut().find(|(k, _)| *k == r) {
                Some(e) => e.1 = e.1.max(g[i].abs()),
                None => by_role.push((r, g[i].abs())),
            }
        }
        for (r, v) in by_role {
            blocks.push(ResidualBlock {
                name: format!("{id}: {r}"),
                value: v,
            });
        }
        blocks.push(ResidualBlock {
            name: format!("{id}: dual signs"),
            value: du.signs(),
        });
    }
    let c_pen = c_pen_of(&m, x, duals);
    let max_residual = blocks.iter().map(|b| b.value).fold(0.0, f64::max);
    Ok(StationarityReport {
        blocks,
        c_pen,
        max_residual,
        accepted: max_residual <= ACCEPT_TOL && c_pen <= ACCEPT_TOL,
    })
}

/// The penalized joint system of one period.
///
/// Variables: the shared primal vector, limit slacks ϖ, and per leader the
/// multiplier block `(y, π, φ1, φ2, φ3, μ_lo, μ_hi)` with interval slacks
/// `(ω_lo, ω_hi)`. Constraints: primal feasibility once, `h(x) − ϖ = 0`, and
/// per leader its Lagrangian stationarity and the ω definitions. The
/// objective is C_Pen.
#[derive(Debug, Clone)]
pub struct EpecProblem {
    pub model: Arc<PeriodModel>,
    free: Vec<Vec<usize>>,
    row_starts: Vec<usize>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

pub fn assemble_epec_nlp(case: &PeriodCase) -> Result<EpecProblem> {
    let model = Arc::new(PeriodModel::new(case)?);
    let free: Vec<Vec<usize>> = (0..model.d).map(|d| model.free_rows(d)).collect();
    let mut row_starts = Vec::with_capacity(model.d);
    let mut r = model.n_eq() + model.n_limits();
    for f in &free {
        row_starts.push(r);
        r += f.len() + 2;
    }
    let mut p = EpecProblem {
        model,
        free,
        row_starts,
        lo: Vec::new(),
        hi: Vec::new(),
    };
    let nv = p.num_vars();
    let (mut lo, mut hi) = p.model.bounds_with(&p.model.rho_bounds);
    lo.resize(nv, 0.0);
    hi.resize(nv, f64::INFINITY);
    for d in 0..p.model.d {
        for r in 0..p.model.n_eq() {
            lo[p.y(d, r)] = f64::NEG_INFINITY;
        }
    }
    p.lo = lo;
    p.hi = hi;
    Ok(p)
}

impl EpecProblem {
    fn block_len(&self) -> usize {
        let m = &self.model;
        m.n_eq() + m.n_limits() + 2 * m.n_pairs() + 5
    }
    fn varpi(&self, j: usize) -> usize {
        self.model.n_primal() + j
    }
    fn lead(&self, d: usize) -> usize {
        self.model.n_primal() + self.model.n_limits() + d * self.block_len()
    }
    fn y(&self, d: usize, r: usize) -> usize {
        self.lead(d) + r
    }
    fn pi(&self, d: usize, j: usize) -> usize {
        self.lead(d) + self.model.n_eq() + j
    }
    fn phi1(&self, d: usize, j: usize) -> usize {
        self.pi(d, self.model.n_limits()) + j
    }
    fn phi2(&self, d: usize, j: usize) -> usize {
        self.phi1(d, self.model.n_pairs()) + j
    }
    fn phi3(&self, d: usize) -> usize {
        self.phi2(d, self.model.n_pairs())
    }
    fn mu_lo(&self, d: usize) -> usize {
        self.phi3(d) + 1
    }
    fn mu_hi(&self, d: usize) -> usize {
        self.phi3(d) + 2
    }
    fn om_lo(&self, d: usize) -> usize {
        self.phi3(d) + 3
    }
    fn om_hi(&self, d: usize) -> usize {
        self.phi3(d) + 4
    }

    /// Multiplier block of leader `d` read from a full variable vector.
    pub fn duals(&self, x: &[f64], d: usize) -> LeaderDuals {
        let m = &self.model;
        LeaderDuals {
            y: x[self.y(d, 0)..self.y(d, 0) + m.n_eq()].to_vec(),
            pi: x[self.pi(d, 0)..self.pi(d, 0) + m.n_limits()].to_vec(),
            phi1: x[self.phi1(d, 0)..self.phi1(d, 0) + m.n_pairs()].to_vec(),
            phi2: x[self.phi2(d, 0)..self.phi2(d, 0) + m.n_pairs()].to_vec(),
            phi3: x[self.phi3(d)],
            mu_lo: x[self.mu_lo(d)],
            mu_hi: x[self.mu_hi(d)],
        }
    }

    /// C_Pen at a full variable vector.
    pub fn c_pen(&self, x: &[f64]) -> f64 {
        self.objective(x)
    }

    /// Starting point: incentives at their floors, the follower equilibrium
    /// and power flow there, and least-squares multipliers.
    pub fn initial_point(&self, case: &PeriodCase) -> Result<Vec<f64>> {
        self.initial_point_at(case, &case.lower_incentives())
    }

    /// Consistent starting point at incentives `rho`.
    pub fn initial_point_at(&self, case: &PeriodCase, rho: &[f64]) -> Result<Vec<f64>> {
        let m = &self.model;
        let out = evaluate(case, rho, None)?;
        let xp = m.primal_from(&out);
        let mut x = vec![0.0; self.num_vars()];
        x[..m.n_primal()].copy_from_slice(&xp);
        let mut h = vec![0.0; m.n_limits()];
        m.limit_values(&xp, &mut h);
        for (j, hj) in h.iter().enumerate() {
            x[self.varpi(j)] = hj.max(0.0);
        }
        for d in 0..m.d {
            let (du, _) = estimate_duals(m, &xp, d, 1e-9);
            self.write_duals(&mut x, d, &du);
            let (lo, hi) = m.rho_bounds[d];
            x[self.om_lo(d)] = xp[m.rho(d)] - lo;
            x[self.om_hi(d)] = hi - xp[m.rho(d)];
        }
        Ok(x)
    }

    fn write_duals(&self, x: &mut [f64], d: usize, du: &LeaderDuals) {
        let m = &self.model;
        x[self.y(d, 0)..self.y(d, 0) + m.n_eq()].copy_from_slice(&du.y);
        x[self.pi(d, 0)..self.pi(d, 0) + m.n_limits()].copy_from_slice(&du.pi);
        x[self.phi1(d, 0)..self.phi1(d, 0) + m.n_pairs()].copy_from_slice(&du.phi1);
        x[self.phi2(d, 0)..self.phi2(d, 0) + m.n_pairs()].copy_from_slice(&du.phi2);
        x[self.phi3(d)] = du.phi3;
        x[self.mu_lo(d)] = du.mu_lo;
        x[self.mu_hi(d)] = du.mu_hi;
    }
}

impl NlpProblem for EpecProblem {
    fn num_vars(&self) -> usize {
        self.model.n_primal() + self.model.n_limits() + self.model.d * self.block_len()
    }
    fn num_eq(&self) -> usize {
        self.model.n_eq() + self.model.n_limits() + self.free.iter().map(|f| f.len() + 2).sum::<usize>()
    }
    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (self.lo.clone(), self.hi.clone())
    }
    fn objective(&self, x: &[f64]) -> f64 {
        let m = &self.model;
        let mut c = m.complementarity(x);
        for d in 0..m.d {
            for j in 0..m.n_pairs() {
                c += x[self.phi1(d, j)] * x[m.s(j)] + x[self.phi2(d, j)] * x[m.ups(j)];
            }
            c += x[self.mu_lo(d)] * x[self.om_lo(d)] + x[self.mu_hi(d)] * x[self.om_hi(d)];
            for j in 0..m.n_limits() {
                c += x[self.pi(d, j)] * x[self.varpi(j)];
            }
        }
        c
    }
    fn gradient(&self, x: &[f64], g: &mut [f64]) {
        let m = &self.model;
        g.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..m.n_pairs() {
            g[m.s(j)] += x[m.ups(j)];
            g[m.ups(j)] += x[m.s(j)];
        }
        for d in 0..m.d {
            for j in 0..m.n_pairs() {
                g[self.phi1(d, j)] += x[m.s(j)];
                g[m.s(j)] += x[self.phi1(d, j)];
                g[self.phi2(d, j)] += x[m.ups(j)];
                g[m.ups(j)] += x[self.phi2(d, j)];
            }
            g[self.mu_lo(d)] += x[self.om_lo(d)];
            g[self.om_lo(d)] += x[self.mu_lo(d)];
            g[self.mu_hi(d)] += x[self.om_hi(d)];
            g[self.om_hi(d)] += x[self.mu_hi(d)];
            for j in 0..m.n_limits() {
                g[self.pi(d, j)] += x[self.varpi(j)];
                g[self.varpi(j)] += x[self.pi(d, j)];
            }
        }
    }
    fn eq_values(&self, x: &[f64], out: &mut [f64]) {
        let m = &self.model;
        let np = m.n_primal();
        let (neq, mh) = (m.n_eq(), m.n_limits());
        let xp = &x[..np];
        m.eq_values(xp, &mut out[..neq]);
        m.limit_values(xp, &mut out[neq..neq + mh]);
        for j in 0..mh {
            out[neq + j] -= x[self.varpi(j)];
        }
        for d in 0..m.d {
            let du = self.duals(x, d);
            let g = leader_gradient(m, xp, &du, d);
            let r0 = self.row_starts[d];
            for (k, &i) in self.free[d].iter().enumerate() {
                out[r0 + k] = g[i];
            }
            let r = r0 + self.free[d].len();
            let (lo, hi) = m.rho_bounds[d];
            out[r] = x[self.om_lo(d)] - (xp[m.rho(d)] - lo);
            out[r + 1] = x[self.om_hi(d)] - (hi - xp[m.rho(d)]);
        }
    }
    fn eq_jacobian(&self, x: &[f64], jac: &mut SparseJacobian) {
        let m = &self.model;
        let np = m.n_primal();
        let (neq, mh) = (m.n_eq(), m.n_limits());
        let xp = &x[..np];
        m.eq_jacobian(xp, jac, 0);
        m.limit_jacobian(xp, jac, neq);
        for j in 0..mh {
            jac.push(neq + j, self.varpi(j), -1.0);
        }
        let je = m.eq_dense_jacobian(xp);
        let jh = m.limit_sparse_jacobian(xp);
        let cost_h = m.cost_hess_entries();
        for d in 0..m.d {
            let du = self.duals(x, d);
            let r0 = self.row_starts[d];
            let mut row_of = vec![usize::MAX; np];
            for (k, &i) in self.free[d].iter().enumerate() {
                row_of[i] = r0 + k;
            }
            let neg_pi: Vec<f64> = du.pi.iter().map(|v| -v).collect();
            let hv = m.voltage_hessian(xp, &du.y[..2 * m.n], &neg_pi);
            for a in 0..2 * m.n {
                let row = row_of[m.v(a)];
                if row == usize::MAX {
                    continue;
                }
                for b in 0..2 * m.n {
                    jac.push(row, m.v(b), hv[(a, b)]);
                }
            }
            for &(r, c, v) in &cost_h {
                if row_of[r] != usize::MAX {
                    jac.push(row_of[r], c, v);
                }
            }
            for j in 0..m.n_pairs() {
                let (rs, ru) = (row_of[m.s(j)], row_of[m.ups(j)]);
                jac.push(rs, m.ups(j), du.phi3);
                jac.push(ru, m.s(j), du.phi3);
                jac.push(rs, self.phi1(d, j), -1.0);
                jac.push(ru, self.phi2(d, j), -1.0);
                jac.push(rs, self.phi3(d), xp[m.ups(j)]);
                jac.push(ru, self.phi3(d), xp[m.s(j)]);
            }
            for &(r, c, v) in &je.entries {
                if row_of[c] != usize::MAX {
                    jac.push(row_of[c], self.y(d, r), v);
                }
            }
            for &(r, c, v) in &jh.entries {
                if row_of[c] != usize::MAX {
                    jac.push(row_of[c], self.pi(d, r), -v);
                }
            }
            let rr = row_of[m.rho(d)];
            jac.push(rr, self.mu_lo(d), -1.0);
            jac.push(rr, self.mu_hi(d), 1.0);
            let r = r0 + self.free[d].len();
            jac.push(r, self.om_lo(d), 1.0);
            jac.push(r, m.rho(d), -1.0);
            jac.push(r + 1, self.om_hi(d), 1.0);
            jac.push(r + 1, m.rho(d), 1.0);
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpecOptions {
    pub nlp: NlpOptions,
    /// Incentives this close (relative) to a bound are snapped onto it
    /// before the consistency pass.
    pub snap_tol: f64,
    /// Consistent restarts after an unaccepted solve.
    pub restarts: usize,
}

impl Default for EpecOptions {
    fn default() -> Self {
        Self {
            nlp: NlpOptions {
                tol: 1e-9,
                max_outer: 30,
                max_inner: 5000,
                estimate_multipliers: false,
                ..Default::default()
            },
            snap_tol: 1e-6,
            restarts: 3,
        }
    }
}

/// Solve one period through the joint penalized NLP.
///
/// The NLP fixes the incentives; followers and the network are then
/// re-solved exactly at those incentives, multipliers re-estimated, and the
/// stationarity report computed on that consistent point.
///
/// The floor start can stall in a local minimum of C_Pen, so the NLP is
/// restarted from each leader's best response to the floor profile when the
/// first result is not accepted. The candidate with the smallest residual
/// is returned.
pub fn solve_epec(case: &PeriodCase, opts: &EpecOptions) -> Result<PeriodEquilibrium> {
    let prob = assemble_epec_nlp(case)?;
    let m = prob.model.clone();
    let floor = case.lower_incentives();
    let mut best: Option<PeriodEquilibrium> = None;
    for start in 0..2 {
        let rho0 = if start == 0 {
            floor.clone()
        } else {
            let mpec = MpecOptions {
                polish: false,
                ..Default::default()
            };
            (0..m.d)
                .map(|d| Ok(solve_mpec(case, &m, d, &floor, &mpec)?.rho))
                .collect::<Result<Vec<f64>>>()
                .map_err(|e| e.in_period(case.period))?
        };
        let mut cand = epec_from(case, &prob, &rho0, opts)?;
        // Restart from a consistent point at the NLP's incentives while that
        // keeps reducing the residual.
        for _ in 0..opts.restarts {
            if cand.stationarity.accepted {
                break;
            }
            let next = epec_from(case, &prob, &cand.rho.clone(), opts)?;
            if next.stationarity.max_residual.max(next.c_pen()) >= cand.stationarity.max_residual.max(cand.c_pen()) {
                break;
            }
            cand = next;
        }
        let better = best.as_ref().map_or(true, |b| {
            cand.stationarity.max_residual.max(cand.c_pen()) < b.stationarity.max_residual.max(b.c_pen())
        });
        if better {
            best = Some(cand);
        }
        if best.as_ref().is_some_and(|b| b.stationarity.accepted) {
            break;
        }
    }
    Ok(best.expect("at least one start"))
}

fn epec_from(case: &PeriodCase, prob: &EpecProblem, rho0: &[f64], opts: &EpecOptions) -> Result<PeriodEquilibrium> {
    let m = prob.model.clone();
    let x0 = prob
        .initial_point_at(case, rho0)
        .map_err(|e| e.in_period(case.period))?;
    debug!(
        "EPEC period {}: {} variables, {} equalities, start {rho0:?}, initial C_Pen {:.3e}",
        case.period + 1,
        prob.num_vars(),
        prob.num_eq(),
        prob.c_pen(&x0)
    );
    let sol = minimize_with(prob, &x0, &opts.nlp, None).map_err(|e| e.in_period(case.period))?;
    let raw_c_pen = prob.c_pen(&sol.x);
    debug!(
        "EPEC period {}: status {:?}, C_Pen {raw_c_pen:.3e}, violation {:.3e}",
        case.period + 1,
        sol.status,
        sol.constraint_violation
    );
    let rho: Vec<f64> = (0..m.d)
        .map(|d| {
            let (lo, hi) = m.rho_bounds[d];
            let r = sol.x[m.rho(d)].clamp(lo, hi);
            let tol = opts.snap_tol * (1.0 + lo.abs().max(hi.abs()));
            if r - lo <= tol {
                lo
            } else if hi - r <= tol {
                hi
            } else {
                r
            }
        })
        .collect();
    let out = evaluate(case, &rho, None).map_err(|e| e.in_period(case.period))?;
    let xp = m.primal_from(&out);
    let duals: Vec<LeaderDuals> = (0..m.d).map(|d| estimate_duals(&m, &xp, d, 1e-9).0).collect();
    let stationarity = evaluate_stationarity(case, &xp, &duals)?;
    Ok(PeriodEquilibrium {
        period: case.period,
        method: Method::PenalizedNlp,
        p: out.ve.p.clone(),
        lambda: out.ve.lambda,
        rho,
        ve: out.ve,
        pf: out.pf,
        cost: out.cost,
        duals,
        stationarity,
        sweeps: sol.outer_iterations,
        trace: Vec::<SweepRecord>::new(),
        nlp_status: Some(sol.status),
        raw_c_pen: Some(raw_c_pen),
    })
}

/// Status of a raw NLP solve, exposed for reports.
pub fn status_label(s: Option<NlpStatus>) -> &'static str {
    match s {
        Some(NlpStatus::Converged) => "converged",
        Some(NlpStatus::MaxIter) => "max_iter",
        Some(NlpStatus::Infeasible) => "infeasible",
        None => "-",
    }
}
