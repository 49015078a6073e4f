//! Smooth constrained minimization.
//!
//! Augmented Lagrangian outer loop over equality constraints `c(x) = 0` and
//! inequalities `h(x) ≥ 0`, with box bounds handled directly by a projected
//! limited-memory BFGS inner solve.
//!
//! Sign convention: the Lagrangian is `f + λᵀc − μᵀh − z_loᵀ(x − l) − z_upᵀ(u − x)`
//! with `μ, z_lo, z_up ≥ 0`. For `min x² + y²` subject to `x + y − 1 = 0` the
//! equality multiplier is therefore −1.

use std::collections::VecDeque;

use log::debug;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Jacobian stored as (row, column, value) triplets; duplicates add up.
#[derive(Debug, Clone, Default)]
pub struct SparseJacobian {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseJacobian {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(
            r < self.rows && c < self.cols,
            "({r}, {c}) outside {}x{}",
            self.rows,
            self.cols
        );
        if v != 0.0 {
            self.entries.push((r, c, v));
        }
    }

    /// out += Jᵀ w
    pub fn tmul_add(&self, w: &[f64], out: &mut [f64]) {
        for &(r, c, v) in &self.entries {
            out[c] += v * w[r];
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows, self.cols);
        for &(r, c, v) in &self.entries {
            m[(r, c)] += v;
        }
        m
    }
}

/// A smooth problem `min f(x)` s.t. `c(x) = 0`, `h(x) ≥ 0`, `l ≤ x ≤ u`.
pub trait NlpProblem {
    fn num_vars(&self) -> usize;
    fn num_eq(&self) -> usize {
        0
    }
    fn num_ineq(&self) -> usize {
        0
    }
    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.num_vars();
        (vec![f64::NEG_INFINITY; n], vec![f64::INFINITY; n])
    }
    fn objective(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64], grad: &mut [f64]);
    fn eq_values(&self, _x: &[f64], _out: &mut [f64]) {}
    fn eq_jacobian(&self, _x: &[f64], _jac: &mut SparseJacobian) {}
    fn ineq_values(&self, _x: &[f64], _out: &mut [f64]) {}
    fn ineq_jacobian(&self, _x: &[f64], _jac: &mut SparseJacobian) {}
}

#[derive(Debug, Clone)]
pub struct NlpOptions {
    pub tol: f64,
    pub max_outer: usize,
    pub initial_penalty: f64,
    /// Penalty growth when feasibility stalls.
    pub penalty_factor: f64,
    pub max_penalty: f64,
    pub max_inner: usize,
    /// Stored correction pairs of the inner quasi-Newton solve.
    pub memory: usize,
    /// Seed multipliers with a least-squares fit at the starting point.
    pub estimate_multipliers: bool,
    /// Problems with at most this many variables use the dense
    /// Gauss–Newton/BFGS inner solve; larger ones use limited-memory BFGS.
    pub dense_limit: usize,
}

impl Default for NlpOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_outer: 12,
            initial_penalty: 10.0,
            penalty_factor: 10.0,
            max_penalty: 1e10,
            max_inner: 3000,
            memory: 20,
            estimate_multipliers: true,
            dense_limit: 2000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NlpStatus {
    Converged,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct Multipliers {
    pub eq: Vec<f64>,
    pub ineq: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct NlpSolution {
    pub x: Vec<f64>,
    pub mult_eq: Vec<f64>,
    pub mult_ineq: Vec<f64>,
    pub mult_lower: Vec<f64>,
    pub mult_upper: Vec<f64>,
    pub objective_value: f64,
    /// Max norm of the projected Lagrangian gradient.
    pub kkt_residual: f64,
    pub constraint_violation: f64,
    pub status: NlpStatus,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
}

impl NlpSolution {
    pub fn converged(&self) -> bool {
        self.status == NlpStatus::Converged
    }
}

pub fn minimize(p: &dyn NlpProblem, x0: &[f64], tol: f64, max_iter: usize) -> Result<NlpSolution> {
    let opts = NlpOptions {
        tol,
        max_outer: max_iter,
        ..Default::default()
    };
    minimize_with(p, x0, &opts, None)
}

struct Evaluator<'a> {
    p: &'a dyn NlpProblem,
    n: usize,
    m_eq: usize,
    m_in: usize,
}

impl Evaluator<'_> {
    fn finite(vals: &[f64], what: &str) -> Result<()> {
        if vals.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numerical(format!("non-finite {what}")))
        }
    }

    fn constraints(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut c = vec![0.0; self.m_eq];
        let mut h = vec![0.0; self.m_in];
        self.p.eq_values(x, &mut c);
        self.p.ineq_values(x, &mut h);
        Self::finite(&c, "equality constraint value")?;
        Self::finite(&h, "inequality constraint value")?;
        Ok((c, h))
    }

    fn jacobians(&self, x: &[f64]) -> (SparseJacobian, SparseJacobian) {
        let mut je = SparseJacobian::new(self.m_eq, self.n);
        let mut ji = SparseJacobian::new(self.m_in, self.n);
        self.p.eq_jacobian(x, &mut je);
        self.p.ineq_jacobian(x, &mut ji);
        (je, ji)
    }

    /// Gradient of f + λᵀc − μᵀh.
    fn lagrangian_grad(&self, x: &[f64], lam: &[f64], mu: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.n];
        self.p.gradient(x, &mut g);
        let (je, ji) = self.jacobians(x);
        je.tmul_add(lam, &mut g);
        let neg: Vec<f64> = mu.iter().map(|m| -m).collect();
        ji.tmul_add(&neg, &mut g);
        g
    }

    /// Constraint weights of the augmented Lagrangian gradient at `x`.
    fn weights(&self, x: &[f64], lam: &[f64], mu: &[f64], r: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let (c, h) = self.constraints(x)?;
        let w_eq = c.iter().zip(lam).map(|(&ci, &li)| li + r * ci).collect();
        let w_in = h
            .iter()
            .zip(mu)
            .map(|(&hj, &mj)| if hj < mj / r { -mj + r * hj } else { 0.0 })
            .collect();
        Ok((w_eq, w_in))
    }

    /// ∇f(x) + J(x)ᵀw with fixed weights.
    fn weighted_grad(&self, x: &[f64], w_eq: &[f64], w_in: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.n];
        self.p.gradient(x, &mut g);
        let (je, ji) = self.jacobians(x);
        je.tmul_add(w_eq, &mut g);
        ji.tmul_add(w_in, &mut g);
        g
    }

    /// Augmented Lagrangian value and gradient.
    fn augmented(&self, x: &[f64], lam: &[f64], mu: &[f64], r: f64, grad: &mut [f64]) -> Result<f64> {
        let f = self.p.objective(x);
        if !f.is_finite() {
            return Err(Error::Numerical("non-finite objective".into()));
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        self.p.gradient(x, grad);
        Self::finite(grad, "objective gradient")?;
        let (c, h) = self.constraints(x)?;
        let (je, ji) = self.jacobians(x);
        let mut val = f;
        let w_eq: Vec<f64> = c
            .iter()
            .zip(lam)
            .map(|(&ci, &li)| {
                val += li * ci + 0.5 * r * ci * ci;
                li + r * ci
            })
            .collect();
        je.tmul_add(&w_eq, grad);
        let w_in: Vec<f64> = h
            .iter()
            .zip(mu)
            .map(|(&hj, &mj)| {
                if hj < mj / r {
                    val += -mj * hj + 0.5 * r * hj * hj;
                    -mj + r * hj
                } else {
                    val += -mj * mj / (2.0 * r);
                    0.0
                }
            })
            .collect();
        ji.tmul_add(&w_in, grad);
        Ok(val)
    }
}

fn project(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, &l), &u) in x.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(l, u);
    }
}

fn projected_gradient_norm(x: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    x.iter()
        .zip(g)
        .zip(lo.iter().zip(hi))
        .map(|((&xi, &gi), (&l, &u))| (xi - (xi - gi).clamp(l, u)).abs())
        .fold(0.0, f64::max)
}

struct InnerOutcome {
    iterations: usize,
}

/// Projected L-BFGS on a box.
fn projected_lbfgs(
    fg: &mut dyn FnMut(&[f64], &mut [f64]) -> Result<f64>,
    x: &mut [f64],
    lo: &[f64],
    hi: &[f64],
    tol: f64,
    max_iter: usize,
    memory: usize,
) -> Result<InnerOutcome> {
    let n = x.len();
    let mut g = vec![0.0; n];
    let mut f = fg(x, &mut g)?;
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut stagnant = 0;
    let mut it = 0;
    while it < max_iter {
        if projected_gradient_norm(x, &g, lo, hi) <= tol {
            break;
        }
        it += 1;
        let free: Vec<bool> = (0..n)
            .map(|i| !((x[i] <= lo[i] && g[i] > 0.0) || (x[i] >= hi[i] && g[i] < 0.0)))
            .collect();
        let dot = |a: &[f64], b: &[f64]| -> f64 { (0..n).filter(|&i| free[i]).map(|i| a[i] * b[i]).sum() };

        // Two-loop recursion restricted to the free variables.
        let mut d: Vec<f64> = (0..n).map(|i| if free[i] { -g[i] } else { 0.0 }).collect();
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, _) in pairs.iter().rev() {
            let sy = dot(s, y);
            if sy <= 0.0 {
                alphas.push(0.0);
                continue;
            }
            let a = dot(s, &d) / sy;
            for i in 0..n {
                if free[i] {
                    d[i] -= a * y[i];
                }
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = pairs.back() {
            let yy = dot(y, y);
            let sy = dot(s, y);
            if yy > 0.0 && sy > 0.0 {
                let gamma = sy / yy;
                d.iter_mut().for_each(|v| *v *= gamma);
            }
        }
        for ((s, y, _), a) in pairs.iter().zip(alphas.iter().rev()) {
            let sy = dot(s, y);
            if sy <= 0.0 {
                continue;
            }
            let b = dot(y, &d) / sy;
            for i in 0..n {
                if free[i] {
                    d[i] += (a - b) * s[i];
                }
            }
        }
        let mut gd: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        if !(gd < 0.0) {
            pairs.clear();
            for i in 0..n {
                d[i] = if free[i] { -g[i] } else { 0.0 };
            }
            gd = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        }
        let mut alpha = if pairs.is_empty() {
            let dn = d.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            (1.0 / dn.max(1e-300)).min(1.0)
        } else {
            1.0
        };

        let mut accepted = false;
        for _ in 0..60 {
            for i in 0..n {
                x_new[i] = x[i] + alpha * d[i];
            }
            project(&mut x_new, lo, hi);
            let decrease: f64 = (0..n).map(|i| g[i] * (x_new[i] - x[i])).sum();
            if x_new == x {
                break;
            }
            let f_try = match fg(&x_new, &mut g_new) {
                Ok(v) => v,
                Err(Error::Numerical(_)) => f64::INFINITY,
                Err(e) => return Err(e),
            };
            if f_try.is_finite() && f_try <= f + 1e-4 * decrease {
                let df = f - f_try;
                let s: Vec<f64> = (0..n).map(|i| x_new[i] - x[i]).collect();
                let y: Vec<f64> = (0..n).map(|i| g_new[i] - g[i]).collect();
                let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
                let ss: f64 = s.iter().map(|v| v * v).sum();
                let yy: f64 = y.iter().map(|v| v * v).sum();
                if sy > 1e-12 * (ss * yy).sqrt() {
                    pairs.push_back((s, y, sy));
                    if pairs.len() > memory {
                        pairs.pop_front();
                    }
                }
                x.copy_from_slice(&x_new);
                g.copy_from_slice(&g_new);
                stagnant = if df <= 1e-15 * (1.0 + f.abs()) { stagnant + 1 } else { 0 };
                f = f_try;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            if pairs.is_empty() {
                break;
            }
            pairs.clear();
            continue;
        }
        if stagnant >= 8 {
            break;
        }
    }
    Ok(InnerOutcome { iterations: it })
}

/// Rows of a sparse Jacobian, each as (column, value) pairs.
fn rows_of(j: &SparseJacobian) -> Vec<Vec<(usize, f64)>> {
    let mut rows = vec![Vec::new(); j.rows];
    for &(r, c, v) in &j.entries {
        rows[r].push((c, v));
    }
    rows
}

/// Gauss–Newton part of the augmented Lagrangian Hessian: r·JᵀJ over the
/// equalities and the inequalities inside the penalized region.
fn gauss_newton(ev: &Evaluator, x: &[f64], mu: &[f64], r: f64) -> Result<DMatrix<f64>> {
    let (_, h) = ev.constraints(x)?;
    let (je, ji) = ev.jacobians(x);
    let mut m = DMatrix::zeros(ev.n, ev.n);
    let mut add = |row: &[(usize, f64)]| {
        for &(a, va) in row {
            for &(b, vb) in row {
                m[(a, b)] += r * va * vb;
            }
        }
    };
    for row in rows_of(&je) {
        add(&row);
    }
    for (j, row) in rows_of(&ji).into_iter().enumerate() {
        if h[j] < mu[j] / r {
            add(&row);
        }
    }
    Ok(m)
}

/// Projected quasi-Newton on a box for the augmented Lagrangian. The model
/// Hessian is the Gauss–Newton term plus a damped BFGS estimate of the
/// remaining curvature; steps are taken on the free variables and projected.
#[allow(clippy::too_many_arguments)]
fn projected_newton(
    ev: &Evaluator,
    lam: &[f64],
    mu: &[f64],
    r: f64,
    x: &mut [f64],
    lo: &[f64],
    hi: &[f64],
    tol: f64,
    max_iter: usize,
    b: &mut DMatrix<f64>,
) -> Result<InnerOutcome> {
    let n = x.len();
    let mut g = vec![0.0; n];
    let mut f = ev.augmented(x, lam, mu, r, &mut g)?;
    let mut gn = gauss_newton(ev, x, mu, r)?;
    let mut tau = 0.0_f64;
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut stagnant = 0;
    let mut it = 0;
    while it < max_iter {
        let pg = projected_gradient_norm(x, &g, lo, hi);
        if pg <= tol {
            break;
        }
        it += 1;
        let eps = pg.min(1e-3);
        let free: Vec<usize> = (0..n)
            .filter(|&i| !((x[i] - lo[i] <= eps && g[i] > 0.0) || (hi[i] - x[i] <= eps && g[i] < 0.0)))
            .filter(|&i| lo[i] < hi[i])
            .collect();
        if free.is_empty() {
            break;
        }
        let nf = free.len();
        let mut hff = DMatrix::<f64>::zeros(nf, nf);
        for (a, &i) in free.iter().enumerate() {
            for (c, &j) in free.iter().enumerate() {
                hff[(a, c)] = gn[(i, j)] + b[(i, j)];
            }
        }
        let scale = (0..nf).map(|a| hff[(a, a)].abs()).fold(0.0, f64::max).max(1e-12);
        let rhs = DVector::from_iterator(nf, free.iter().map(|&i| -g[i]));
        let mut d = vec![0.0; n];
        let mut solved = false;
        let mut t = tau.max(1e-12 * scale);
        for _ in 0..30 {
            let mut m = hff.clone();
            for a in 0..nf {
                m[(a, a)] += t;
            }
            if let Some(ch) = m.cholesky() {
                let sol = ch.solve(&rhs);
                for (a, &i) in free.iter().enumerate() {
                    d[i] = sol[a];
                }
                solved = true;
                break;
            }
            t *= 10.0;
        }
        if !solved {
            for &i in &free {
                d[i] = -g[i] / scale;
            }
        }
        // Fixed variables move along the projected gradient.
        for i in 0..n {
            if !free.contains(&i) {
                d[i] = -g[i] / scale;
            }
        }

        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..50 {
            for i in 0..n {
                x_new[i] = x[i] + alpha * d[i];
            }
            project(&mut x_new, lo, hi);
            if x_new == x {
                break;
            }
            let decrease: f64 = (0..n).map(|i| g[i] * (x_new[i] - x[i])).sum();
            let f_try = match ev.augmented(&x_new, lam, mu, r, &mut g_new) {
                Ok(v) => v,
                Err(Error::Numerical(_)) => f64::INFINITY,
                Err(e) => return Err(e),
            };
            if !f_try.is_finite() || decrease >= 0.0 {
                alpha *= 0.5;
                continue;
            }
            // Near the optimum the decrease drops below rounding in f; a step
            // that is flat to rounding and shrinks the projected gradient
            // still counts as progress.
            let armijo = f_try <= f + 1e-4 * decrease;
            let flat =
                f_try <= f + 1e-13 * (1.0 + f.abs()) && projected_gradient_norm(&x_new, &g_new, lo, hi) <= 0.5 * pg;
            if armijo || flat {
                accepted = true;
                let df = f - f_try;
                stagnant = if df <= 1e-16 * (1.0 + f.abs()) && !flat {
                    stagnant + 1
                } else {
                    0
                };
                f = f_try;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            if tau > 1e8 * scale {
                break;
            }
            tau = (tau * 10.0).max(1e-6 * scale);
            b.fill(0.0);
            continue;
        }
        tau = if alpha == 1.0 { tau * 0.1 } else { tau };
        let gn_new = gauss_newton(ev, &x_new, mu, r)?;
        let s = DVector::from_iterator(n, (0..n).map(|i| x_new[i] - x[i]));
        // Structured secant: curvature of f and of the constraints at fixed
        // weights, so switching penalized rows does not pollute the estimate.
        let (w_eq, w_in) = ev.weights(&x_new, lam, mu, r)?;
        let g_old = ev.weighted_grad(x, &w_eq, &w_in);
        let mut y = DVector::from_iterator(n, (0..n).map(|i| g_new[i] - g_old[i]));
        let bs = &*b * &s;
        let sbs = s.dot(&bs);
        let sy = s.dot(&y);
        let ss = s.norm_squared();
        if sbs > 1e-14 * ss * scale {
            if sy < 0.2 * sbs {
                let th = 0.8 * sbs / (sbs - sy);
                y = &y * th + &bs * (1.0 - th);
            }
            let sy = s.dot(&y);
            *b -= &bs * bs.transpose() / sbs;
            *b += &y * y.transpose() / sy;
        } else if sy > 1e-12 * ss.sqrt() * y.norm() {
            *b += &y * y.transpose() / sy;
        }
        x.copy_from_slice(&x_new);
        g.copy_from_slice(&g_new);
        gn = gn_new;
        if stagnant >= 5 {
            break;
        }
    }
    Ok(InnerOutcome { iterations: it })
}

/// Least-squares multipliers at `x` for the equalities and the nearly active
/// inequalities, fitted on the variables away from their bounds.
fn estimate_multipliers(ev: &Evaluator, x: &[f64], lo: &[f64], hi: &[f64], tol: f64) -> Result<Multipliers> {
    let (_, h) = ev.constraints(x)?;
    let (je, ji) = ev.jacobians(x);
    let mut g = vec![0.0; ev.n];
    ev.p.gradient(x, &mut g);
    let free: Vec<usize> = (0..ev.n).filter(|&i| x[i] > lo[i] && x[i] < hi[i]).collect();
    let active: Vec<usize> = (0..ev.m_in).filter(|&j| h[j] <= tol.max(1e-8)).collect();
    let cols = ev.m_eq + active.len();
    let mut lam = vec![0.0; ev.m_eq];
    let mut mu = vec![0.0; ev.m_in];
    if cols == 0 || free.is_empty() {
        return Ok(Multipliers { eq: lam, ineq: mu });
    }
    let mut row_of = vec![usize::MAX; ev.n];
    for (k, &i) in free.iter().enumerate() {
        row_of[i] = k;
    }
    let mut a = DMatrix::<f64>::zeros(free.len(), cols);
    for &(r, c, v) in &je.entries {
        if row_of[c] != usize::MAX {
            a[(row_of[c], r)] += v;
        }
    }
    let mut col_of = vec![usize::MAX; ev.m_in];
    for (k, &j) in active.iter().enumerate() {
        col_of[j] = ev.m_eq + k;
    }
    for &(r, c, v) in &ji.entries {
        if row_of[c] != usize::MAX && col_of[r] != usize::MAX {
            a[(row_of[c], col_of[r])] -= v;
        }
    }
    let b = DVector::from_iterator(free.len(), free.iter().map(|&i| -g[i]));
    let sol = a
        .svd(true, true)
        .solve(&b, 1e-10)
        .map_err(|e| Error::Numerical(format!("multiplier estimate: {e}")))?;
    lam.copy_from_slice(&sol.as_slice()[..ev.m_eq]);
    for (k, &j) in active.iter().enumerate() {
        mu[j] = sol[ev.m_eq + k].max(0.0);
    }
    Ok(Multipliers { eq: lam, ineq: mu })
}

pub fn minimize_with(
    p: &dyn NlpProblem,
    x0: &[f64],
    opts: &NlpOptions,
    warm: Option<&Multipliers>,
) -> Result<NlpSolution> {
    let ev = Evaluator {
        p,
        n: p.num_vars(),
        m_eq: p.num_eq(),
        m_in: p.num_ineq(),
    };
    if x0.len() != ev.n {
        return Err(Error::Contract(format!(
            "x0 has {} entries, problem has {}",
            x0.len(),
            ev.n
        )));
    }
    let (lo, hi) = p.bounds();
    let mut x = x0.to_vec();
    project(&mut x, &lo, &hi);

    let (mut lam, mut mu) = match warm {
        Some(m) if m.eq.len() == ev.m_eq && m.ineq.len() == ev.m_in => (m.eq.clone(), m.ineq.clone()),
        _ if opts.estimate_multipliers && ev.n * (ev.m_eq + ev.m_in) <= 4_000_000 => {
            let m = estimate_multipliers(&ev, &x, &lo, &hi, opts.tol)?;
            (m.eq, m.ineq)
        }
        _ => (vec![0.0; ev.m_eq], vec![0.0; ev.m_in]),
    };

    let mut r = opts.initial_penalty;
    let mut prev_viol = f64::INFINITY;
    let mut inner_total = 0;
    let mut status = NlpStatus::MaxIter;
    let mut outer = 0;
    let mut viol = f64::INFINITY;
    // Curvature estimate of the dense path, kept across outer iterations.
    let dense = ev.n <= opts.dense_limit;
    let mut b = if dense {
        DMatrix::zeros(ev.n, ev.n)
    } else {
        DMatrix::zeros(0, 0)
    };
    let mut kkt = f64::INFINITY;
    while outer < opts.max_outer {
        outer += 1;
        let (lam_k, mu_k) = (lam.clone(), mu.clone());
        let inner = if dense {
            projected_newton(
                &ev,
                &lam_k,
                &mu_k,
                r,
                &mut x,
                &lo,
                &hi,
                opts.tol,
                opts.max_inner,
                &mut b,
            )?
        } else {
            let mut fg = |z: &[f64], g: &mut [f64]| ev.augmented(z, &lam_k, &mu_k, r, g);
            projected_lbfgs(&mut fg, &mut x, &lo, &hi, opts.tol, opts.max_inner, opts.memory)?
        };
        inner_total += inner.iterations;

        let (c, h) = ev.constraints(&x)?;
        viol = c
            .iter()
            .map(|v| v.abs())
            .chain(h.iter().map(|v| (-v).max(0.0)))
            .fold(0.0, f64::max);
        for (l, &ci) in lam.iter_mut().zip(&c) {
            *l += r * ci;
        }
        for (m, &hj) in mu.iter_mut().zip(&h) {
            *m = (*m - r * hj).max(0.0);
        }
        let comp = mu.iter().zip(&h).map(|(m, hj)| (m * hj).abs()).fold(0.0, f64::max);
        let lg = ev.lagrangian_grad(&x, &lam, &mu);
        kkt = projected_gradient_norm(&x, &lg, &lo, &hi).max(comp);
        debug!(
            "augmented Lagrangian outer {outer}: penalty {r:.1e} violation {viol:.3e} kkt {kkt:.3e} inner {}",
            inner.iterations
        );
        if viol <= opts.tol && kkt <= opts.tol {
            status = NlpStatus::Converged;
            break;
        }
        if viol > opts.tol && viol > 0.25 * prev_viol {
            if r >= opts.max_penalty {
                // Feasibility has stalled at the largest penalty.
                break;
            }
            r = (r * opts.penalty_factor).min(opts.max_penalty);
        }
        prev_viol = viol;
    }
    if status != NlpStatus::Converged && viol > opts.tol.sqrt() {
        status = NlpStatus::Infeasible;
    }

    let lg = ev.lagrangian_grad(&x, &lam, &mu);
    let mut mult_lower = vec![0.0; ev.n];
    let mut mult_upper = vec![0.0; ev.n];
    for i in 0..ev.n {
        if x[i] <= lo[i] && lg[i] > 0.0 {
            mult_lower[i] = lg[i];
        } else if x[i] >= hi[i] && lg[i] < 0.0 {
            mult_upper[i] = -lg[i];
        }
    }
    Ok(NlpSolution {
        objective_value: p.objective(&x),
        x,
        mult_eq: lam,
        mult_ineq: mu,
        mult_lower,
        mult_upper,
        kkt_residual: kkt,
        constraint_violation: viol,
        status,
        outer_iterations: outer,
        inner_iterations: inner_total,
    })
}

/// Worst relative error between the analytic derivatives of `p` and central
/// finite differences with step `h`.
pub fn check_gradients(p: &dyn NlpProblem, x: &[f64], h: f64) -> f64 {
    let n = p.num_vars();
    let (m_eq, m_in) = (p.num_eq(), p.num_ineq());
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1.0);
    let mut worst: f64 = 0.0;

    let mut g = vec![0.0; n];
    p.gradient(x, &mut g);
    let mut je = SparseJacobian::new(m_eq, n);
    p.eq_jacobian(x, &mut je);
    let je = je.to_dense();
    let mut ji = SparseJacobian::new(m_in, n);
    p.ineq_jacobian(x, &mut ji);
    let ji = ji.to_dense();

    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    let (mut cp, mut cm) = (vec![0.0; m_eq], vec![0.0; m_eq]);
    let (mut hp, mut hm) = (vec![0.0; m_in], vec![0.0; m_in]);
    for k in 0..n {
        xp[k] = x[k] + h;
        xm[k] = x[k] - h;
        let fd = (p.objective(&xp) - p.objective(&xm)) / (2.0 * h);
        worst = worst.max(rel(g[k], fd));
        p.eq_values(&xp, &mut cp);
        p.eq_values(&xm, &mut cm);
        for r in 0..m_eq {
            worst = worst.max(rel(je[(r, k)], (cp[r] - cm[r]) / (2.0 * h)));
        }
        p.ineq_values(&xp, &mut hp);
        p.ineq_values(&xm, &mut hm);
        for r in 0..m_in {
            worst = worst.max(rel(ji[(r, k)], (hp[r] - hm[r]) / (2.0 * h)));
        }
        xp[k] = x[k];
        xm[k] = x[k];
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    struct Shifted;
    impl NlpProblem for Shifted {
        fn num_vars(&self) -> usize {
            1
        }
        fn objective(&self, x: &[f64]) -> f64 {
            (x[0] - 3.0).powi(2)
        }
        fn gradient(&self, x: &[f64], g: &mut [f64]) {
            g[0] = 2.0 * (x[0] - 3.0);
        }
    }

    struct Circle {
        scale: f64,
    }
    impl NlpProblem for Circle {
        fn num_vars(&self) -> usize {
            2
        }
        fn num_eq(&self) -> usize {
            1
        }
        fn objective(&self, x: &[f64]) -> f64 {
            self.scale * (x[0] * x[0] + x[1] * x[1])
        }
        fn gradient(&self, x: &[f64], g: &mut [f64]) {
            g[0] = 2.0 * self.scale * x[0];
            g[1] = 2.0 * self.scale * x[1];
        }
        fn eq_values(&self, x: &[f64], out: &mut [f64]) {
            out[0] = x[0] + x[1] - 1.0;
        }
        fn eq_jacobian(&self, _x: &[f64], jac: &mut SparseJacobian) {
            jac.push(0, 0, 1.0);
            jac.push(0, 1, 1.0);
        }
    }

    #[test]
    fn unconstrained_quadratic() {
        let s = minimize(&Shifted, &[0.0], 1e-8, 12).unwrap();
        assert!(s.converged());
        assert_abs_diff_eq!(s.x[0], 3.0, epsilon = 1e-7);
        assert!(s.objective_value < 1e-12);
    }

    #[test]
    fn equality_multiplier_sign() {
        let s = minimize(&Circle { scale: 1.0 }, &[0.0, 0.0], 1e-8, 12).unwrap();
        assert!(s.converged());
        assert_abs_diff_eq!(s.x[0], 0.5, epsilon = 1e-7);
        assert_abs_diff_eq!(s.x[1], 0.5, epsilon = 1e-7);
        assert_abs_diff_eq!(s.mult_eq[0], -1.0, epsilon = 1e-6);
    }

    #[test]
    fn objective_scaling_scales_multipliers() {
        let a = minimize(&Circle { scale: 1.0 }, &[0.2, 0.1], 1e-8, 12).unwrap();
        let b = minimize(&Circle { scale: 10.0 }, &[0.2, 0.1], 1e-8, 12).unwrap();
        assert!(a.converged() && b.converged());
        assert_abs_diff_eq!(a.x[0], b.x[0], epsilon = 1e-7);
        assert_abs_diff_eq!(10.0 * a.mult_eq[0], b.mult_eq[0], epsilon = 1e-5);
    }

    #[test]
    fn gradient_check_on_exact_derivatives() {
        assert!(check_gradients(&Circle { scale: 2.0 }, &[0.3, -0.7], 1e-6) <= 1e-6);
    }

    struct Corrupt;
    impl NlpProblem for Corrupt {
        fn num_vars(&self) -> usize {
            2
        }
        fn num_eq(&self) -> usize {
            1
        }
        fn objective(&self, x: &[f64]) -> f64 {
            x[0] * x[1]
        }
        fn gradient(&self, x: &[f64], g: &mut [f64]) {
            g[0] = x[1];
            g[1] = x[0];
        }
        fn eq_values(&self, x: &[f64], out: &mut [f64]) {
            out[0] = x[0] * x[0] - x[1];
        }
        fn eq_jacobian(&self, x: &[f64], jac: &mut SparseJacobian) {
            jac.push(0, 0, 2.0 * x[0] + 0.5);
            jac.push(0, 1, -1.0);
        }
    }

    #[test]
    fn gradient_check_detects_corruption() {
        assert!(check_gradients(&Corrupt, &[1.0, 2.0], 1e-6) > 1e-2);
    }
}
