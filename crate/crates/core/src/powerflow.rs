//! AC power flow in rectangular coordinates.
//!
//! Every network quantity used here (bus injections, branch flows, squared
//! voltage magnitudes) is a quadratic form in the stacked voltage vector
//! `v = [e_1..e_n, f_1..f_n]`. The same forms back the Newton solver and the
//! constraint blocks of the equilibrium problems, so first and second
//! derivatives come from one place.

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netmodel::{Network, PeriodLoads};

/// Σ c·v_i·v_j over the stored terms.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QuadForm {
    pub terms: Vec<(usize, usize, f64)>,
}

impl QuadForm {
    fn add_product(&mut self, a: &[(usize, f64)], b: &[(usize, f64)], scale: f64) {
        for &(i, ca) in a {
            for &(j, cb) in b {
                let c = scale * ca * cb;
                if c != 0.0 {
                    self.terms.push((i, j, c));
                }
            }
        }
    }

    fn scaled(&self, s: f64) -> QuadForm {
        QuadForm {
            terms: self.terms.iter().map(|&(i, j, c)| (i, j, s * c)).collect(),
        }
    }

    fn plus(&self, other: &QuadForm) -> QuadForm {
        let mut terms = self.terms.clone();
        terms.extend_from_slice(&other.terms);
        QuadForm { terms }
    }

    pub fn eval(&self, v: &[f64]) -> f64 {
        self.terms.iter().map(|&(i, j, c)| c * v[i] * v[j]).sum()
    }

    /// out += scale · ∇q(v)
    pub fn grad_into(&self, v: &[f64], scale: f64, out: &mut [f64]) {
        for &(i, j, c) in &self.terms {
            out[i] += scale * c * v[j];
            out[j] += scale * c * v[i];
        }
    }

    pub fn grad(&self, v: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; v.len()];
        self.grad_into(v, 1.0, &mut g);
        g
    }

    /// out += scale · ∇²q (constant).
    pub fn hess_into(&self, scale: f64, out: &mut DMatrix<f64>) {
        for &(i, j, c) in &self.terms {
            out[(i, j)] += scale * c;
            out[(j, i)] += scale * c;
        }
    }
}

/// Where a branch's apparent power is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum FlowMeasure {
    #[default]
    SendingEnd,
    /// Average of the sending-end and (negated) receiving-end complex power.
    MeanOfEnds,
}

/// Quadratic forms of one network.
#[derive(Debug, Clone)]
pub struct NetworkForms {
    pub n: usize,
    pub p_inj: Vec<QuadForm>,
    pub q_inj: Vec<QuadForm>,
    pub v_sq: Vec<QuadForm>,
    /// Active and reactive parts of the measured branch flow.
    pub flow_p: Vec<QuadForm>,
    pub flow_q: Vec<QuadForm>,
    /// Sending-end branch flows, kept for loss bookkeeping.
    pub send_p: Vec<QuadForm>,
    pub send_q: Vec<QuadForm>,
    pub measure: FlowMeasure,
}

impl NetworkForms {
    pub fn new(net: &Network, measure: FlowMeasure) -> Self {
        let n = net.n_buses();
        let (e, f) = (|i: usize| i, |i: usize| n + i);
        let mut g_bus = vec![vec![0.0; n]; n];
        let mut b_bus = vec![vec![0.0; n]; n];
        let idx = net.line_indices();
        for (l, &(i, j)) in net.lines.iter().zip(&idx) {
            g_bus[i][i] += l.g;
            g_bus[j][j] += l.g;
            b_bus[i][i] += l.b;
            b_bus[j][j] += l.b;
            g_bus[i][j] -= l.g;
            g_bus[j][i] -= l.g;
            b_bus[i][j] -= l.b;
            b_bus[j][i] -= l.b;
        }

        let mut p_inj = Vec::with_capacity(n);
        let mut q_inj = Vec::with_capacity(n);
        for k in 0..n {
            // Injected current I_k = Σ_m Y_km V_m, split into real/imag linear forms.
            let mut re = Vec::new();
            let mut im = Vec::new();
            for m in 0..n {
                let (g, b) = (g_bus[k][m], b_bus[k][m]);
                if g != 0.0 || b != 0.0 {
                    re.extend([(e(m), g), (f(m), -b)]);
                    im.extend([(e(m), b), (f(m), g)]);
                }
            }
            let mut p = QuadForm::default();
            p.add_product(&[(e(k), 1.0)], &re, 1.0);
            p.add_product(&[(f(k), 1.0)], &im, 1.0);
            let mut q = QuadForm::default();
            q.add_product(&[(f(k), 1.0)], &re, 1.0);
            q.add_product(&[(e(k), 1.0)], &im, -1.0);
            p_inj.push(p);
            q_inj.push(q);
        }

        let branch = |from: usize, to: usize, g: f64, b: f64| {
            let re = [(e(from), g), (e(to), -g), (f(from), -b), (f(to), b)];
            let im = [(f(from), g), (f(to), -g), (e(from), b), (e(to), -b)];
            let mut p = QuadForm::default();
            p.add_product(&[(e(from), 1.0)], &re, 1.0);
            p.add_product(&[(f(from), 1.0)], &im, 1.0);
            let mut q = QuadForm::default();
            q.add_product(&[(f(from), 1.0)], &re, 1.0);
            q.add_product(&[(e(from), 1.0)], &im, -1.0);
            (p, q)
        };
        let mut send_p = Vec::new();
        let mut send_q = Vec::new();
        let mut flow_p = Vec::new();
        let mut flow_q = Vec::new();
        for (l, &(i, j)) in net.lines.iter().zip(&idx) {
            let (ps, qs) = branch(i, j, l.g, l.b);
            let (pr, qr) = branch(j, i, l.g, l.b);
            match measure {
                FlowMeasure::SendingEnd => {
                    flow_p.push(ps.clone());
                    flow_q.push(qs.clone());
                }
                FlowMeasure::MeanOfEnds => {
                    flow_p.push(ps.scaled(0.5).plus(&pr.scaled(-0.5)));
                    flow_q.push(qs.scaled(0.5).plus(&qr.scaled(-0.5)));
                }
            }
            send_p.push(ps);
            send_q.push(qs);
        }

        let v_sq = (0..n)
            .map(|k| QuadForm {
                terms: vec![(e(k), e(k), 1.0), (f(k), f(k), 1.0)],
            })
            .collect();
        Self {
            n,
            p_inj,
            q_inj,
            v_sq,
            flow_p,
            flow_q,
            send_p,
            send_q,
            measure,
        }
    }

    /// Squared measured apparent flow of line `l`.
    pub fn flow_sq(&self, l: usize, v: &[f64]) -> f64 {
        let p = self.flow_p[l].eval(v);
        let q = self.flow_q[l].eval(v);
        p * p + q * q
    }

    /// out += scale · ∇|S_l|²
    pub fn flow_sq_grad_into(&self, l: usize, v: &[f64], scale: f64, out: &mut [f64]) {
        let p = self.flow_p[l].eval(v);
        let q = self.flow_q[l].eval(v);
        self.flow_p[l].grad_into(v, 2.0 * p * scale, out);
        self.flow_q[l].grad_into(v, 2.0 * q * scale, out);
    }

    /// out += scale · ∇²|S_l|²
    pub fn flow_sq_hess_into(&self, l: usize, v: &[f64], scale: f64, out: &mut DMatrix<f64>) {
        let p = self.flow_p[l].eval(v);
        let q = self.flow_q[l].eval(v);
        let gp = self.flow_p[l].grad(v);
        let gq = self.flow_q[l].grad(v);
        for (i, (&a, &c)) in gp.iter().zip(&gq).enumerate() {
            if a == 0.0 && c == 0.0 {
                continue;
            }
            for (j, (&b, &d)) in gp.iter().zip(&gq).enumerate() {
                out[(i, j)] += scale * 2.0 * (a * b + c * d);
            }
        }
        self.flow_p[l].hess_into(2.0 * p * scale, out);
        self.flow_q[l].hess_into(2.0 * q * scale, out);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltageState {
    pub e: Vec<f64>,
    pub f: Vec<f64>,
}

impl VoltageState {
    pub fn flat(net: &Network) -> Self {
        let n = net.n_buses();
        let mut e = vec![1.0; n];
        e[net.slack] = net.slack_voltage;
        Self { e, f: vec![0.0; n] }
    }

    pub fn stacked(&self) -> Vec<f64> {
        let mut v = self.e.clone();
        v.extend_from_slice(&self.f);
        v
    }

    pub fn from_stacked(v: &[f64]) -> Self {
        let n = v.len() / 2;
        Self {
            e: v[..n].to_vec(),
            f: v[n..].to_vec(),
        }
    }

    pub fn magnitude(&self, i: usize) -> f64 {
        self.e[i].hypot(self.f[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowSolution {
    pub voltage: VoltageState,
    /// Slack injections, kW / kVAR.
    pub p_gen: f64,
    pub q_gen: f64,
    /// Network losses as the sum of bus injections, kW / kVAR.
    pub p_loss: f64,
    pub q_loss: f64,
    /// Measured apparent flow per line, pu.
    pub line_flows: Vec<f64>,
    /// Largest mismatch at a non-slack bus, pu.
    pub residual_norm: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct PfOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub measure: FlowMeasure,
}

impl Default for PfOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 50,
            measure: FlowMeasure::SendingEnd,
        }
    }
}

/// Power flow with nominal options. `curtail_p` is the active curtailment per
/// bus in kW; reactive curtailment follows the bus power factor.
pub fn solve_pf(net: &Network, loads: &PeriodLoads, curtail_p: &[f64]) -> Result<PowerFlowSolution> {
    let forms = NetworkForms::new(net, FlowMeasure::SendingEnd);
    solve_pf_with(net, &forms, loads, curtail_p, &PfOptions::default(), None)
}

pub fn solve_pf_with(
    net: &Network,
    forms: &NetworkForms,
    loads: &PeriodLoads,
    curtail_p: &[f64],
    opts: &PfOptions,
    start: Option<&VoltageState>,
) -> Result<PowerFlowSolution> {
    let n = net.n_buses();
    if loads.p.len() != n || curtail_p.len() != n {
        return Err(Error::Contract(format!(
            "load vectors sized {}/{} for {n} buses",
            loads.p.len(),
            curtail_p.len()
        )));
    }
    let q_curt = loads.reactive_curtailment(curtail_p);
    let net_p: Vec<f64> = (0..n).map(|i| net.to_pu(loads.p[i] - curtail_p[i])).collect();
    let net_q: Vec<f64> = (0..n).map(|i| net.to_pu(loads.q[i] - q_curt[i])).collect();
    solve_injections(net, forms, &net_p, &net_q, opts, start)
}

/// Indices of the non-slack buses in Newton ordering.
fn pq_buses(net: &Network) -> Vec<usize> {
    (0..net.n_buses()).filter(|&i| i != net.slack).collect()
}

/// Mismatch `P_inj(v) + load` at non-slack buses, P block then Q block.
fn mismatch(forms: &NetworkForms, pq: &[usize], v: &[f64], net_p: &[f64], net_q: &[f64]) -> DVector<f64> {
    let m = pq.len();
    DVector::from_fn(2 * m, |r, _| {
        if r < m {
            forms.p_inj[pq[r]].eval(v) + net_p[pq[r]]
        } else {
            forms.q_inj[pq[r - m]].eval(v) + net_q[pq[r - m]]
        }
    })
}

/// Jacobian of the non-slack mismatches with respect to non-slack (e, f).
pub fn mismatch_jacobian(net: &Network, forms: &NetworkForms, v: &[f64]) -> DMatrix<f64> {
    let pq = pq_buses(net);
    let n = net.n_buses();
    let m = pq.len();
    let mut jac = DMatrix::zeros(2 * m, 2 * m);
    for (r, &k) in pq.iter().enumerate() {
        for (block, form) in [(0, &forms.p_inj[k]), (m, &forms.q_inj[k])] {
            let g = form.grad(v);
            for (c, &b) in pq.iter().enumerate() {
                jac[(block + r, c)] = g[b];
                jac[(block + r, m + c)] = g[n + b];
            }
        }
    }
    jac
}

/// One Newton update of the non-slack voltages; returns the step's max norm.
pub fn newton_step(net: &Network, forms: &NetworkForms, v: &mut [f64], net_p: &[f64], net_q: &[f64]) -> Result<f64> {
    let pq = pq_buses(net);
    let n = net.n_buses();
    let m = pq.len();
    let rhs = -mismatch(forms, &pq, v, net_p, net_q);
    let jac = mismatch_jacobian(net, forms, v);
    let dx = jac
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("singular power-flow Jacobian".into()))?;
    for (c, &b) in pq.iter().enumerate() {
        v[b] += dx[c];
        v[n + b] += dx[m + c];
    }
    Ok(dx.amax())
}

/// Newton solve for given net bus loads in pu (load positive).
pub fn solve_injections(
    net: &Network,
    forms: &NetworkForms,
    net_p: &[f64],
    net_q: &[f64],
    opts: &PfOptions,
    start: Option<&VoltageState>,
) -> Result<PowerFlowSolution> {
    let pq = pq_buses(net);
    let mut state = start.cloned().unwrap_or_else(|| VoltageState::flat(net));
    state.e[net.slack] = net.slack_voltage;
    state.f[net.slack] = 0.0;
    let mut v = state.stacked();

    let mut residual = mismatch(forms, &pq, &v, net_p, net_q).amax();
    let mut iterations = 0;
    while residual > opts.tol {
        if iterations >= opts.max_iter || !residual.is_finite() {
            return Err(Error::NonConvergence { iterations, residual });
        }
        newton_step(net, forms, &mut v, net_p, net_q)?;
        iterations += 1;
        residual = mismatch(forms, &pq, &v, net_p, net_q).amax();
        debug!("power flow iteration {iterations}: residual {residual:.3e}");
    }
    // One more step after the tolerance is met: convergence is quadratic, so
    // it is cheap and makes warm and cold starts agree to rounding.
    if residual > 1e-13 {
        let mut trial = v.clone();
        newton_step(net, forms, &mut trial, net_p, net_q)?;
        let r = mismatch(forms, &pq, &trial, net_p, net_q).amax();
        if r < residual {
            v = trial;
            residual = r;
            iterations += 1;
        }
    }

    let s = net.base_kva();
    let p_slack = forms.p_inj[net.slack].eval(&v);
    let q_slack = forms.q_inj[net.slack].eval(&v);
    let p_loss: f64 = forms.p_inj.iter().map(|q| q.eval(&v)).sum();
    let q_loss: f64 = forms.q_inj.iter().map(|q| q.eval(&v)).sum();
    let line_flows = (0..net.lines.len()).map(|l| forms.flow_sq(l, &v).sqrt()).collect();
    Ok(PowerFlowSolution {
        voltage: VoltageState::from_stacked(&v),
        p_gen: (p_slack + net_p[net.slack]) * s,
        q_gen: (q_slack + net_q[net.slack]) * s,
        p_loss: p_loss * s,
        q_loss: q_loss * s,
        line_flows,
        residual_norm: residual,
        iterations,
    })
}

/// Network losses from the bus-injection balance, kW / kVAR.
pub fn losses(sol: &PowerFlowSolution) -> (f64, f64) {
    (sol.p_loss, sol.q_loss)
}

/// Network losses summed branch by branch as |I|²R and |I|²X, kW / kVAR.
pub fn branch_losses(net: &Network, sol: &PowerFlowSolution) -> (f64, f64) {
    let (e, f) = (&sol.voltage.e, &sol.voltage.f);
    let mut p = 0.0;
    let mut q = 0.0;
    for (l, (i, j)) in net.lines.iter().zip(net.line_indices()) {
        let dv2 = (e[i] - e[j]).powi(2) + (f[i] - f[j]).powi(2);
        let i2 = dv2 * (l.g * l.g + l.b * l.b);
        p += i2 * l.r_pu;
        q += i2 * l.x_pu;
    }
    (p * net.base_kva(), q * net.base_kva())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LimitKind {
    VoltageLow { bus: usize },
    VoltageHigh { bus: usize },
    Flow { line: usize },
    GenerationP,
    GenerationQ,
}

/// A violated bound; `margin` is negative and uses the constraint's own units
/// (squared pu for voltages and flows, pu for generation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitViolation {
    pub kind: LimitKind,
    pub margin: f64,
}

pub fn check_limits(net: &Network, sol: &PowerFlowSolution) -> Vec<LimitViolation> {
    let mut out = Vec::new();
    for (i, bus) in net.buses.iter().enumerate() {
        let v2 = sol.voltage.e[i].powi(2) + sol.voltage.f[i].powi(2);
        let lo = v2 - bus.v_min * bus.v_min;
        let hi = bus.v_max * bus.v_max - v2;
        if lo < 0.0 {
            out.push(LimitViolation {
                kind: LimitKind::VoltageLow { bus: bus.id },
                margin: lo,
            });
        }
        if hi < 0.0 {
            out.push(LimitViolation {
                kind: LimitKind::VoltageHigh { bus: bus.id },
                margin: hi,
            });
        }
    }
    for (l, line) in net.lines.iter().enumerate() {
        let margin = line.flow_limit.powi(2) - sol.line_flows[l].powi(2);
        if margin < 0.0 {
            out.push(LimitViolation {
                kind: LimitKind::Flow { line: l },
                margin,
            });
        }
    }
    let pg = net.to_pu(sol.p_gen);
    let qg = net.to_pu(sol.q_gen);
    let gen_margin = |x: f64, (lo, hi): (f64, f64)| (x - lo).min(hi - x);
    let mp = gen_margin(pg, net.pg_bounds);
    if mp < 0.0 {
        out.push(LimitViolation {
            kind: LimitKind::GenerationP,
            margin: mp,
        });
    }
    let mq = gen_margin(qg, net.qg_bounds);
    if mq < 0.0 {
        out.push(LimitViolation {
            kind: LimitKind::GenerationQ,
            margin: mq,
        });
    }
    out
}
