//! Per-unit algebraic model of one period shared by the MPEC and EPEC
//! problems.
//!
//! Primal vector layout (D DRPs, n buses):
//! `[ρ (D) | e (n) | f (n) | pg | qg | p (D) | υ (2D+1) | s (2D+1)]`
//! with `υ = (λ, ν_lo, ν_hi)` the follower multipliers and
//! `s = (s_cap, s_lo, s_hi)` the matching slacks. Curtailments and slacks
//! are in pu; incentives and follower multipliers in currency/kWh.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::follower::Stationarity;
use crate::nlp::SparseJacobian;
use crate::powerflow::NetworkForms;

use super::{Outcome, PeriodCase};

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Limit {
    VoltageLow(usize),
    VoltageHigh(usize),
    Flow(usize),
    PgLow,
    PgHigh,
    QgLow,
    QgHigh,
}

#[derive(Debug, Clone)]
pub struct PeriodModel {
    pub d: usize,
    pub n: usize,
    pub(crate) forms: Arc<NetworkForms>,
    pub(crate) slack: usize,
    pub(crate) slack_voltage: f64,
    pub(crate) base_kw: f64,
    pub(crate) load_p: Vec<f64>,
    pub(crate) load_q: Vec<f64>,
    /// Per bus: (DRP, share) of curtailment landing there.
    pub(crate) bus_share: Vec<Vec<(usize, f64)>>,
    /// Reactive/active ratio of each bus load.
    pub(crate) q_ratio: Vec<f64>,
    pub(crate) bus_rate: Vec<f64>,
    /// Retail rate seen by each DRP's curtailment.
    pub(crate) drp_rate: Vec<f64>,
    pub(crate) rtp: f64,
    /// Follower stationarity in pu curtailment: a·p − (c0 + c1 ρ).
    pub(crate) coef: Vec<Stationarity>,
    pub(crate) p_lo: Vec<f64>,
    pub(crate) p_hi: Vec<f64>,
    pub(crate) p_max: f64,
    pub rho_bounds: Vec<(f64, f64)>,
    pub(crate) limits: Vec<Limit>,
    vmin_sq: Vec<f64>,
    vmax_sq: Vec<f64>,
    smax_sq: Vec<f64>,
    pg_bounds: (f64, f64),
    qg_bounds: (f64, f64),
}

impl PeriodModel {
    pub fn new(case: &PeriodCase) -> Result<Self> {
        let net = &case.net;
        let n = net.n_buses();
        let d = case.n_drps();
        let base_kw = net.base_kva();
        let mut bus_share = vec![Vec::new(); n];
        for (k, shares) in case.placement.iter().enumerate() {
            for &(i, w) in shares {
                bus_share[i].push((k, w));
            }
        }
        let q_ratio = (0..n)
            .map(|i| {
                let p = case.loads.p[i];
                if p > 0.0 {
                    case.loads.q[i] / p
                } else {
                    0.0
                }
            })
            .collect();
        let drp_rate = case
            .placement
            .iter()
            .map(|s| s.iter().map(|&(i, w)| w * case.bus_rate[i]).sum())
            .collect();
        let coef = case
            .followers
            .iter()
            .map(|f| {
                let c = f.stationarity(case.mode);
                Stationarity { a: c.a * base_kw, ..c }
            })
            .collect();
        let mut limits = Vec::new();
        for i in (0..n).filter(|&i| i != net.slack) {
            limits.push(Limit::VoltageLow(i));
            limits.push(Limit::VoltageHigh(i));
        }
        for (l, line) in net.lines.iter().enumerate() {
            if line.flow_limit.is_finite() {
                limits.push(Limit::Flow(l));
            }
        }
        limits.extend([Limit::PgLow, Limit::PgHigh, Limit::QgLow, Limit::QgHigh]);
        for &(lo, hi) in &[net.pg_bounds, net.qg_bounds] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Parameter("generation bounds must be finite and ordered".into()));
            }
        }
        Ok(Self {
            d,
            n,
            forms: case.forms.clone(),
            slack: net.slack,
            slack_voltage: net.slack_voltage,
            base_kw,
            load_p: case.loads.p.iter().map(|&v| v / base_kw).collect(),
            load_q: case.loads.q.iter().map(|&v| v / base_kw).collect(),
            bus_share,
            q_ratio,
            bus_rate: case.bus_rate.clone(),
            drp_rate,
            rtp: case.rtp,
            coef,
            p_lo: case.followers.iter().map(|f| f.p_lo / base_kw).collect(),
            p_hi: case.followers.iter().map(|f| f.p_hi / base_kw).collect(),
            p_max: case.p_max / base_kw,
            rho_bounds: case
                .followers
                .iter()
                .map(|f| (f.incentive_lo, f.incentive_hi))
                .collect(),
            limits,
            vmin_sq: net.buses.iter().map(|b| b.v_min * b.v_min).collect(),
            vmax_sq: net.buses.iter().map(|b| b.v_max * b.v_max).collect(),
            smax_sq: net.lines.iter().map(|l| l.flow_limit * l.flow_limit).collect(),
            pg_bounds: net.pg_bounds,
            qg_bounds: net.qg_bounds,
        })
    }

    // ---- layout ----

    pub fn rho(&self, k: usize) -> usize {
        k
    }
    pub fn v(&self, j: usize) -> usize {
        self.d + j
    }
    pub fn pg(&self) -> usize {
        self.d + 2 * self.n
    }
    pub fn qg(&self) -> usize {
        self.pg() + 1
    }
    pub fn p(&self, k: usize) -> usize {
        self.d + 2 * self.n + 2 + k
    }
    /// Follower multipliers: 0 = cap, 1+k = lower bound, 1+D+k = upper bound.
    pub fn ups(&self, j: usize) -> usize {
        2 * self.d + 2 * self.n + 2 + j
    }
    pub fn s(&self, j: usize) -> usize {
        self.ups(0) + self.n_pairs() + j
    }
    pub fn n_pairs(&self) -> usize {
        2 * self.d + 1
    }
    pub fn n_primal(&self) -> usize {
        self.s(0) + self.n_pairs()
    }
    pub fn n_eq(&self) -> usize {
        2 * self.n + self.d + self.n_pairs()
    }
    pub fn n_limits(&self) -> usize {
        self.limits.len()
    }

    fn vslice<'a>(&self, x: &'a [f64]) -> &'a [f64] {
        &x[self.d..self.d + 2 * self.n]
    }

    /// Primal indices a leader's stationarity conditions are taken over:
    /// everything except rival incentives and the fixed slack voltage.
    pub fn free_rows(&self, leader: usize) -> Vec<usize> {
        let fixed = [self.v(self.slack), self.v(self.n + self.slack)];
        (0..self.n_primal())
            .filter(|&i| !(i < self.d && i != leader) && !fixed.contains(&i))
            .collect()
    }

    /// Box bounds with the given incentive intervals.
    pub fn bounds_with(&self, rho_bounds: &[(f64, f64)]) -> (Vec<f64>, Vec<f64>) {
        let np = self.n_primal();
        let mut lo = vec![f64::NEG_INFINITY; np];
        let mut hi = vec![f64::INFINITY; np];
        for (k, &(a, b)) in rho_bounds.iter().enumerate() {
            lo[k] = a;
            hi[k] = b;
        }
        for j in 0..2 * self.n {
            lo[self.v(j)] = -2.0;
            hi[self.v(j)] = 2.0;
        }
        lo[self.v(self.slack)] = self.slack_voltage;
        hi[self.v(self.slack)] = self.slack_voltage;
        lo[self.v(self.n + self.slack)] = 0.0;
        hi[self.v(self.n + self.slack)] = 0.0;
        lo[self.pg()] = self.pg_bounds.0;
        hi[self.pg()] = self.pg_bounds.1;
        lo[self.qg()] = self.qg_bounds.0;
        hi[self.qg()] = self.qg_bounds.1;
        for j in 0..self.n_pairs() {
            lo[self.ups(j)] = 0.0;
            lo[self.s(j)] = 0.0;
        }
        (lo, hi)
    }

    /// Primal point matching an evaluated outcome exactly.
    pub fn primal_from(&self, out: &Outcome) -> Vec<f64> {
        let mut x = vec![0.0; self.n_primal()];
        x[..self.d].copy_from_slice(&out.rho);
        let v = out.pf.voltage.stacked();
        x[self.d..self.d + 2 * self.n].copy_from_slice(&v);
        x[self.pg()] = out.pf.p_gen / self.base_kw;
        x[self.qg()] = out.pf.q_gen / self.base_kw;
        let p: Vec<f64> = out.ve.p.iter().map(|v| v / self.base_kw).collect();
        for k in 0..self.d {
            x[self.p(k)] = p[k];
            x[self.ups(1 + k)] = out.ve.nu_lo[k];
            x[self.ups(1 + self.d + k)] = out.ve.nu_hi[k];
            x[self.s(1 + k)] = (p[k] - self.p_lo[k]).max(0.0);
            x[self.s(1 + self.d + k)] = (self.p_hi[k] - p[k]).max(0.0);
        }
        x[self.ups(0)] = out.ve.lambda;
        x[self.s(0)] = (self.p_max - p.iter().sum::<f64>()).max(0.0);
        x
    }

    // ---- objective: LSE cost / base ----

    pub fn cost(&self, x: &[f64]) -> f64 {
        let mut z = self.rtp * x[self.pg()];
        for i in 0..self.n {
            z -= self.bus_rate[i] * self.load_p[i];
        }
        for k in 0..self.d {
            z += (self.drp_rate[k] + x[self.rho(k)]) * x[self.p(k)];
        }
        z
    }

    pub fn cost_grad_into(&self, x: &[f64], g: &mut [f64]) {
        g[self.pg()] += self.rtp;
        for k in 0..self.d {
            g[self.p(k)] += self.drp_rate[k] + x[self.rho(k)];
            g[self.rho(k)] += x[self.p(k)];
        }
    }

    /// Constant Hessian of the cost: the ρ_k·p_k products.
    pub fn cost_hess_entries(&self) -> Vec<(usize, usize, f64)> {
        (0..self.d)
            .flat_map(|k| [(self.rho(k), self.p(k), 1.0), (self.p(k), self.rho(k), 1.0)])
            .collect()
    }

    /// Σ s∘υ
    pub fn complementarity(&self, x: &[f64]) -> f64 {
        (0..self.n_pairs()).map(|j| x[self.s(j)] * x[self.ups(j)]).sum()
    }

    // ---- equalities: P balance (n), Q balance (n), follower stationarity (D), slack definitions (2D+1) ----

    pub fn eq_values(&self, x: &[f64], out: &mut [f64]) {
        let (n, d) = (self.n, self.d);
        let v = self.vslice(x);
        for i in 0..n {
            let mut cp = 0.0;
            for &(k, w) in &self.bus_share[i] {
                cp += w * x[self.p(k)];
            }
            let mut pb = self.forms.p_inj[i].eval(v) + self.load_p[i] - cp;
            let mut qb = self.forms.q_inj[i].eval(v) + self.load_q[i] - cp * self.q_ratio[i];
            if i == self.slack {
                pb -= x[self.pg()];
                qb -= x[self.qg()];
            }
            out[i] = pb;
            out[n + i] = qb;
        }
        let lam = x[self.ups(0)];
        let mut total = 0.0;
        for k in 0..d {
            let c = &self.coef[k];
            let p = x[self.p(k)];
            total += p;
            out[2 * n + k] = c.a * p - c.drive(x[self.rho(k)]) + lam - x[self.ups(1 + k)] + x[self.ups(1 + d + k)];
            out[2 * n + d + 1 + k] = x[self.s(1 + k)] - p + self.p_lo[k];
            out[2 * n + d + 1 + d + k] = x[self.s(1 + d + k)] - self.p_hi[k] + p;
        }
        out[2 * n + d] = x[self.s(0)] - self.p_max + total;
    }

    /// Rows start at `row0`; columns are primal indices.
    pub fn eq_jacobian(&self, x: &[f64], jac: &mut SparseJacobian, row0: usize) {
        let (n, d) = (self.n, self.d);
        let v = self.vslice(x);
        let mut g = vec![0.0; 2 * n];
        for i in 0..n {
            for (row, form, ratio) in [
                (row0 + i, &self.forms.p_inj[i], 1.0),
                (row0 + n + i, &self.forms.q_inj[i], self.q_ratio[i]),
            ] {
                g.iter_mut().for_each(|z| *z = 0.0);
                form.grad_into(v, 1.0, &mut g);
                for (j, &gj) in g.iter().enumerate() {
                    jac.push(row, self.v(j), gj);
                }
                for &(k, w) in &self.bus_share[i] {
                    jac.push(row, self.p(k), -w * ratio);
                }
            }
            if i == self.slack {
                jac.push(row0 + i, self.pg(), -1.0);
                jac.push(row0 + n + i, self.qg(), -1.0);
            }
        }
        let fs = row0 + 2 * n;
        let sd = fs + d;
        for k in 0..d {
            let c = &self.coef[k];
            jac.push(fs + k, self.p(k), c.a);
            jac.push(fs + k, self.rho(k), -c.c1);
            jac.push(fs + k, self.ups(0), 1.0);
            jac.push(fs + k, self.ups(1 + k), -1.0);
            jac.push(fs + k, self.ups(1 + d + k), 1.0);
            jac.push(sd, self.p(k), 1.0);
            jac.push(sd + 1 + k, self.s(1 + k), 1.0);
            jac.push(sd + 1 + k, self.p(k), -1.0);
            jac.push(sd + 1 + d + k, self.s(1 + d + k), 1.0);
            jac.push(sd + 1 + d + k, self.p(k), 1.0);
        }
        jac.push(sd, self.s(0), 1.0);
    }

    // ---- operating limits h(x) ≥ 0 ----

    pub fn limit_values(&self, x: &[f64], out: &mut [f64]) {
        let v = self.vslice(x);
        for (r, lim) in self.limits.iter().enumerate() {
            out[r] = match *lim {
                Limit::VoltageLow(i) => self.forms.v_sq[i].eval(v) - self.vmin_sq[i],
                Limit::VoltageHigh(i) => self.vmax_sq[i] - self.forms.v_sq[i].eval(v),
                Limit::Flow(l) => self.smax_sq[l] - self.forms.flow_sq(l, v),
                Limit::PgLow => x[self.pg()] - self.pg_bounds.0,
                Limit::PgHigh => self.pg_bounds.1 - x[self.pg()],
                Limit::QgLow => x[self.qg()] - self.qg_bounds.0,
                Limit::QgHigh => self.qg_bounds.1 - x[self.qg()],
            };
        }
    }

    pub fn limit_jacobian(&self, x: &[f64], jac: &mut SparseJacobian, row0: usize) {
        let v = self.vslice(x);
        let mut g = vec![0.0; 2 * self.n];
        for (r, lim) in self.limits.iter().enumerate() {
            let row = row0 + r;
            g.iter_mut().for_each(|z| *z = 0.0);
            match *lim {
                Limit::VoltageLow(i) => self.forms.v_sq[i].grad_into(v, 1.0, &mut g),
                Limit::VoltageHigh(i) => self.forms.v_sq[i].grad_into(v, -1.0, &mut g),
                Limit::Flow(l) => self.forms.flow_sq_grad_into(l, v, -1.0, &mut g),
                Limit::PgLow => jac.push(row, self.pg(), 1.0),
                Limit::PgHigh => jac.push(row, self.pg(), -1.0),
                Limit::QgLow => jac.push(row, self.qg(), 1.0),
                Limit::QgHigh => jac.push(row, self.qg(), -1.0),
            }
            for (j, &gj) in g.iter().enumerate() {
                jac.push(row, self.v(j), gj);
            }
        }
    }

    /// Σ w_eq,i ∇²(balance_i) + Σ w_h,j ∇²h_j over the (e, f) block.
    pub fn voltage_hessian(&self, x: &[f64], w_eq: &[f64], w_h: &[f64]) -> DMatrix<f64> {
        let n = self.n;
        let v = self.vslice(x);
        let mut h = DMatrix::zeros(2 * n, 2 * n);
        for i in 0..n {
            if w_eq[i] != 0.0 {
                self.forms.p_inj[i].hess_into(w_eq[i], &mut h);
            }
            if w_eq[n + i] != 0.0 {
                self.forms.q_inj[i].hess_into(w_eq[n + i], &mut h);
            }
        }
        for (r, lim) in self.limits.iter().enumerate() {
            let w = w_h[r];
            if w == 0.0 {
                continue;
            }
            match *lim {
                Limit::VoltageLow(i) => self.forms.v_sq[i].hess_into(w, &mut h),
                Limit::VoltageHigh(i) => self.forms.v_sq[i].hess_into(-w, &mut h),
                Limit::Flow(l) => self.forms.flow_sq_hess_into(l, v, -w, &mut h),
                _ => {}
            }
        }
        h
    }

    pub fn eq_dense_jacobian(&self, x: &[f64]) -> SparseJacobian {
        let mut j = SparseJacobian::new(self.n_eq(), self.n_primal());
        self.eq_jacobian(x, &mut j, 0);
        j
    }

    pub fn limit_sparse_jacobian(&self, x: &[f64]) -> SparseJacobian {
        let mut j = SparseJacobian::new(self.n_limits(), self.n_primal());
        self.limit_jacobian(x, &mut j, 0);
        j
    }
}
