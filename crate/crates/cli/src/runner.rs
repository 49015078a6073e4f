//! Day-long studies: BDR power flows, equilibrium solves in the DR windows
//! and ADR power flows.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use log::info;
use rayon::prelude::*;

use drpe_core::equilibrium::{
    diagonalize, lse_cost, pinned_period, solve_epec, CostBreakdown, DiagOptions, EpecOptions, Method, PeriodCase,
    PeriodEquilibrium,
};
use drpe_core::follower::disutility;
use drpe_core::netmodel::{
    assign_classes, build_loads, parse_network_with, sample_flexibility, ClassSpec, LoadProfileSet, Network,
    PeriodLoads,
};
use drpe_core::powerflow::{FlowMeasure, NetworkForms, PfOptions, PowerFlowSolution};
use drpe_core::tariff::{parse_rtp, TariffSchedule};
use drpe_core::{Error, Result};

use crate::config::{CaseConfig, SolverMode};
use crate::report::{ClassRow, DayTotals, DrpEntry, Pair, PeriodRow, RunReport, TraceRow};

/// A case with its data loaded and loads built.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub cfg: CaseConfig,
    pub net: Arc<Network>,
    pub forms: Arc<NetworkForms>,
    pub tariff: TariffSchedule,
    pub loads: Vec<PeriodLoads>,
}

impl Scenario {
    pub fn build(cfg: &CaseConfig) -> Result<Self> {
        let net = parse_network_with(&cfg.network, &cfg.network_opts)?;
        let specs: Vec<ClassSpec> = cfg
            .classes
            .iter()
            .map(|c| ClassSpec {
                name: c.name.clone(),
                buses: c.buses.clone(),
            })
            .collect();
        let net = Arc::new(assign_classes(&net, &specs)?);
        let rtp = parse_rtp(&cfg.rtp)?;
        let n = rtp.len();
        if let Some(&t) = cfg.peak_periods.iter().find(|&&t| t > n) {
            return Err(Error::Config(format!(
                "peak period {t} beyond the {n}-period price series"
            )));
        }
        let kappa = cfg.classes.iter().map(|c| (c.name.clone(), c.kappa)).collect();
        let mut tariff = TariffSchedule::new(rtp, cfg.flat_rate, kappa)?;
        tariff.mode = cfg.bounds;
        tariff.basis = cfg.cap_basis;
        let profile = LoadProfileSet {
            n_periods: n,
            class_factors: cfg
                .profiles
                .iter()
                .filter(|(k, _)| k.as_str() != "default")
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            default_factors: cfg.profiles.get("default").cloned().unwrap_or_else(|| vec![1.0; n]),
            flex: cfg.flex,
        };
        let fractions = sample_flexibility(&profile, net.n_buses(), cfg.seed)?;
        let loads = build_loads(&net, &profile, &fractions)?;
        let forms = Arc::new(NetworkForms::new(&net, FlowMeasure::SendingEnd));
        Ok(Self {
            cfg: cfg.clone(),
            net,
            forms,
            tariff,
            loads,
        })
    }

    pub fn n_periods(&self) -> usize {
        self.tariff.n_periods()
    }

    /// Whether 0-based period `t` lies in a DR window.
    pub fn is_peak(&self, t: usize) -> bool {
        self.cfg.peak_periods.contains(&(t + 1))
    }

    /// Period `t` (0-based) as an equilibrium case.
    pub fn period_case(&self, t: usize) -> Result<PeriodCase> {
        PeriodCase::build(
            self.net.clone(),
            self.forms.clone(),
            self.loads[t].clone(),
            &self.tariff,
            t,
            &self.cfg.drps,
            self.cfg.pmax_fraction,
            self.cfg.response,
            PfOptions::default(),
        )
    }
}

/// One period solved before and after DR.
#[derive(Debug, Clone)]
pub struct PeriodResult {
    pub case: PeriodCase,
    pub bdr: PowerFlowSolution,
    pub bdr_cost: CostBreakdown,
    pub eq: PeriodEquilibrium,
}

/// Equilibrium solver used for one period.
pub fn solve_period(case: &PeriodCase, method: Method, eps: f64) -> Result<PeriodEquilibrium> {
    match method {
        Method::Pinned => pinned_period(case),
        Method::Diagonalization => diagonalize(
            case,
            &DiagOptions {
                eps,
                ..Default::default()
            },
        ),
        Method::PenalizedNlp => {
            let eq = solve_epec(case, &EpecOptions::default())?;
            if !eq.stationarity.accepted {
                return Err(Error::NonConvergence {
                    iterations: eq.sweeps,
                    residual: eq.stationarity.max_residual.max(eq.c_pen()),
                }
                .in_period(case.period));
            }
            Ok(eq)
        }
    }
}

fn method_for(mode: SolverMode) -> Method {
    match mode {
        SolverMode::Diag | SolverMode::Both => Method::Diagonalization,
        SolverMode::Nlp => Method::PenalizedNlp,
    }
}

/// Solve every period; off-window periods are pinned.
pub fn solve_day(sc: &Scenario, method: Method) -> Result<Vec<PeriodResult>> {
    (0..sc.n_periods())
        .into_par_iter()
        .map(|t| {
            let case = sc.period_case(t)?;
            let bdr = case
                .solve_pf(&vec![0.0; case.n_drps()], None)
                .map_err(|e| e.in_period(t))?;
            let bdr_cost = lse_cost(&case, &bdr, &case.lower_incentives(), &vec![0.0; case.n_drps()]);
            let m = if sc.is_peak(t) { method } else { Method::Pinned };
            let eq = solve_period(&case, m, sc.cfg.eps)?;
            Ok(PeriodResult {
                case,
                bdr,
                bdr_cost,
                eq,
            })
        })
        .collect()
}

fn method_label(m: Method) -> &'static str {
    match m {
        Method::Diagonalization => "diag",
        Method::PenalizedNlp => "nlp",
        Method::Pinned => "pinned",
    }
}

/// Run the configured study and assemble its report.
pub fn run_case(cfg: &CaseConfig) -> Result<RunReport> {
    let sc = Scenario::build(cfg)?;
    let results = solve_day(&sc, method_for(cfg.solver))?;
    info!("{}: {} periods solved", cfg.name, results.len());
    Ok(assemble(&sc, &results))
}

/// Report from solved periods.
pub fn assemble(sc: &Scenario, results: &[PeriodResult]) -> RunReport {
    let cfg = &sc.cfg;
    let mut drps: Vec<DrpEntry> = cfg
        .drps
        .iter()
        .map(|d| DrpEntry {
            id: d.id.clone(),
            class: d.class.clone(),
        })
        .collect();
    drps.sort_by(|a, b| a.id.cmp(&b.id));

    // Load per class (untagged load under "-").
    let mut class_names: Vec<String> = cfg.classes.iter().map(|c| c.name.clone()).collect();
    class_names.sort();
    let untagged = sc.net.buses.iter().any(|b| b.class.is_none() && b.p_kw > 0.0);
    if untagged {
        class_names.push("-".into());
    }
    let class_of = |i: usize| sc.net.buses[i].class.clone().unwrap_or_else(|| "-".into());
    let mut classes: BTreeMap<String, ClassRow> = class_names
        .iter()
        .map(|c| {
            (
                c.clone(),
                ClassRow {
                    name: c.clone(),
                    load: Vec::new(),
                    bill: Pair::default(),
                },
            )
        })
        .collect();

    let mut periods = Vec::with_capacity(results.len());
    let mut schedule = Vec::with_capacity(results.len());
    let mut trace = Vec::new();
    for r in results {
        let case = &r.case;
        let eq = &r.eq;
        let curt = case.curtailment_by_bus(&eq.p);
        let adr_loads = case.loads.curtailed(&curt);
        let f = &case.followers;
        let drp_bdr: f64 = f.iter().map(|x| x.w1 * x.p_base * x.flat_rate).sum();
        let drp_adr: f64 = eq.drp_costs(case).iter().sum();
        let discomfort: f64 = f.iter().zip(&eq.p).map(|(x, &p)| disutility(p, x.theta, x.gamma)).sum();
        periods.push(PeriodRow {
            period: case.period + 1,
            rtp: case.rtp,
            peak: sc.is_peak(case.period),
            method: method_label(eq.method).into(),
            load_p: Pair::new(case.loads.total_p(), adr_loads.total_p()),
            load_q: Pair::new(case.loads.total_q(), adr_loads.total_q()),
            flex_p: Pair::new(case.loads.flex_p.iter().sum(), adr_loads.flex_p.iter().sum()),
            flex_q: Pair::new(case.loads.flex_q.iter().sum(), adr_loads.flex_q.iter().sum()),
            pg: Pair::new(r.bdr.p_gen, eq.pf.p_gen),
            qg: Pair::new(r.bdr.q_gen, eq.pf.q_gen),
            loss_p: Pair::new(r.bdr.p_loss, eq.pf.p_loss),
            loss_q: Pair::new(r.bdr.q_loss, eq.pf.q_loss),
            lse_bdr: r.bdr_cost,
            lse_adr: eq.cost,
            drp_cost: Pair::new(drp_bdr, drp_adr),
            discomfort,
            sweeps: eq.sweeps,
            c_pen: eq.c_pen(),
            residual: eq.stationarity.max_residual,
        });
        schedule.push(
            f.iter()
                .enumerate()
                .map(|(d, x)| crate::report::ScheduleEntry {
                    rho_lo: x.incentive_lo,
                    rho_hi: x.incentive_hi,
                    rho: eq.rho[d],
                    p_base: x.p_base,
                    p: eq.p[d],
                })
                .collect(),
        );
        for rec in &eq.trace {
            trace.push(TraceRow {
                period: case.period + 1,
                sweep: rec.sweep,
                change: rec.change,
                lse_cost: rec.lse_cost,
                rho: rec.rho.clone(),
            });
        }

        let mut load: BTreeMap<String, Pair> = class_names.iter().map(|c| (c.clone(), Pair::default())).collect();
        let mut bill: BTreeMap<String, Pair> = load.clone();
        for i in 0..sc.net.n_buses() {
            let c = class_of(i);
            let (Some(l), Some(b)) = (load.get_mut(&c), bill.get_mut(&c)) else {
                continue;
            };
            l.bdr += case.loads.p[i];
            l.adr += adr_loads.p[i];
            b.bdr += case.bus_rate[i] * case.loads.p[i];
            b.adr += case.bus_rate[i] * adr_loads.p[i];
        }
        for (k, x) in f.iter().enumerate() {
            let class = &cfg.drps.iter().find(|d| d.id == x.id).expect("DRP from config").class;
            if let Some(b) = bill.get_mut(class) {
                b.adr -= eq.rho[k] * eq.p[k];
            }
        }
        for (c, row) in classes.iter_mut() {
            row.load.push(load[c]);
            row.bill.bdr += bill[c].bdr;
            row.bill.adr += bill[c].adr;
        }
    }
    let classes: Vec<ClassRow> = class_names
        .iter()
        .map(|c| classes.remove(c).expect("class row"))
        .collect();
    let day = DayTotals::from_rows(&periods, &classes);
    RunReport {
        name: cfg.name.clone(),
        currency: cfg.currency.clone(),
        solver: cfg.solver.label().into(),
        response: format!("{:?}", cfg.response).to_lowercase(),
        eps: cfg.eps,
        seed: cfg.seed,
        flat_rate: sc.tariff.flat_rate,
        drps,
        periods,
        schedule,
        classes,
        day,
        trace,
    }
}

/// One point of the weight sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub w1: f64,
    pub w2: f64,
    /// Day customer bill after DR.
    pub bill: f64,
    pub discomfort: f64,
}

/// Runs with every DRP weighted (w1, 1 − w1) for w1 = 0, step, …, 1.
pub fn sweep_weights(cfg: &CaseConfig, step: f64) -> Result<Vec<SweepPoint>> {
    let n = (1.0 / step).round();
    if !(step > 0.0) || n < 1.0 || (n * step - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("sweep step {step} must divide 1 evenly")));
    }
    let n = n as usize;
    (0..=n)
        .map(|k| {
            let w1 = k as f64 / n as f64;
            let rep = run_case(&cfg.with_weights(w1))?;
            Ok(SweepPoint {
                w1,
                w2: 1.0 - w1,
                bill: rep.day.customer_bill.adr,
                discomfort: rep.day.discomfort.adr,
            })
        })
        .collect()
}

/// Outcome of one solver over the DR windows.
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub label: &'static str,
    /// Equilibria by 1-based period; failed periods are absent.
    pub periods: BTreeMap<usize, PeriodEquilibrium>,
    pub failures: Vec<String>,
    pub seconds: f64,
}

impl MethodRun {
    pub fn lse_cost(&self) -> f64 {
        self.periods.values().map(|e| e.cost.total).sum()
    }
    pub fn payment(&self) -> f64 {
        self.periods.values().map(|e| e.cost.payment).sum()
    }
    pub fn curtailment(&self) -> f64 {
        self.periods.values().map(|e| e.p.iter().sum::<f64>()).sum()
    }
}

/// Both solvers on the DR windows of a case.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub drps: Vec<DrpEntry>,
    pub diag: MethodRun,
    pub nlp: MethodRun,
}

fn run_method(sc: &Scenario, cases: &[PeriodCase], method: Method) -> MethodRun {
    let start = Instant::now();
    let mut periods = BTreeMap::new();
    let mut failures = Vec::new();
    for case in cases {
        match solve_period(case, method, sc.cfg.eps) {
            Ok(eq) => {
                periods.insert(case.period + 1, eq);
            }
            Err(e) => failures.push(format!("period {}: {e}", case.period + 1)),
        }
    }
    MethodRun {
        label: method_label(method),
        periods,
        failures,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Solve the DR windows with both methods. Solver failures are recorded, not
/// returned, so a partial comparison is still available.
pub fn compare_methods(cfg: &CaseConfig) -> Result<Comparison> {
    let sc = Scenario::build(cfg)?;
    let cases: Vec<PeriodCase> = (0..sc.n_periods())
        .filter(|&t| sc.is_peak(t))
        .map(|t| sc.period_case(t))
        .collect::<Result<_>>()?;
    let mut drps: Vec<DrpEntry> = cfg
        .drps
        .iter()
        .map(|d| DrpEntry {
            id: d.id.clone(),
            class: d.class.clone(),
        })
        .collect();
    drps.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(Comparison {
        drps,
        diag: run_method(&sc, &cases, Method::Diagonalization),
        nlp: run_method(&sc, &cases, Method::PenalizedNlp),
    })
}

/// Percent deviation of `b` from the reference `a`.
pub fn pct_error(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        100.0 * (b - a).abs() / a.abs().max(1e-12)
    }
}

impl Comparison {
    pub fn render(&self, currency: &str) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let _ = writeln!(s, "[schedule]");
        let _ = writeln!(
            s,
            "period,drp,class,rho_diag,rho_nlp,rho_err_pct,p_diag,p_nlp,p_err_pct"
        );
        let keys: std::collections::BTreeSet<usize> = self
            .diag
            .periods
            .keys()
            .chain(self.nlp.periods.keys())
            .copied()
            .collect();
        let cell = |v: Option<f64>| v.map_or_else(|| "failed".to_string(), |x| format!("{x:.6}"));
        for t in keys {
            let (a, b) = (self.diag.periods.get(&t), self.nlp.periods.get(&t));
            for (d, e) in self.drps.iter().enumerate() {
                let (ra, rb) = (a.map(|x| x.rho[d]), b.map(|x| x.rho[d]));
                let (pa, pb) = (a.map(|x| x.p[d]), b.map(|x| x.p[d]));
                let err = |x: Option<f64>, y: Option<f64>| match (x, y) {
                    (Some(x), Some(y)) => format!("{:.4}", pct_error(x, y)),
                    _ => "-".into(),
                };
                let _ = writeln!(
                    s,
                    "{t},{},{},{},{},{},{},{},{}",
                    e.id,
                    e.class,
                    cell(ra),
                    cell(rb),
                    err(ra, rb),
                    cell(pa),
                    cell(pb),
                    err(pa, pb)
                );
            }
        }
        let _ = writeln!(s, "\n[economics]");
        let _ = writeln!(s, "quantity,diag,nlp,err_pct");
        for (name, a, b) in [
            (
                format!("lse_cost_{currency}"),
                self.diag.lse_cost(),
                self.nlp.lse_cost(),
            ),
            (
                format!("drp_payment_{currency}"),
                self.diag.payment(),
                self.nlp.payment(),
            ),
            (
                "curtailment_kwh".to_string(),
                self.diag.curtailment(),
                self.nlp.curtailment(),
            ),
        ] {
            let _ = writeln!(s, "{name},{a:.6},{b:.6},{:.4}", pct_error(a, b));
        }
        let _ = writeln!(s, "\n[timing]");
        let _ = writeln!(s, "diag_seconds = {:.3}", self.diag.seconds);
        let _ = writeln!(s, "nlp_seconds = {:.3}", self.nlp.seconds);
        for (label, run) in [("diag", &self.diag), ("nlp", &self.nlp)] {
            for f in &run.failures {
                let _ = writeln!(s, "# {label} failed: {f}");
            }
        }
        s
    }
}

/// BDR power flow of one period (1-based), as a text table.
pub fn power_flow_table(cfg: &CaseConfig, period: usize) -> Result<String> {
    use std::fmt::Write;
    let sc = Scenario::build(cfg)?;
    if !(1..=sc.n_periods()).contains(&period) {
        return Err(Error::Config(format!("period {period} outside 1..{}", sc.n_periods())));
    }
    let t = period - 1;
    let case = sc.period_case(t)?;
    let pf = case
        .solve_pf(&vec![0.0; case.n_drps()], None)
        .map_err(|e| e.in_period(t))?;
    let loads = &sc.loads[t];
    let mut s = String::new();
    let _ = writeln!(s, "period = {period}");
    let _ = writeln!(s, "p_gen_kw = {:.6}", pf.p_gen);
    let _ = writeln!(s, "q_gen_kvar = {:.6}", pf.q_gen);
    let _ = writeln!(s, "p_loss_kw = {:.6}", pf.p_loss);
    let _ = writeln!(s, "q_loss_kvar = {:.6}", pf.q_loss);
    let _ = writeln!(s, "residual_pu = {:.3e}", pf.residual_norm);
    let _ = writeln!(s, "iterations = {}", pf.iterations);
    let _ = writeln!(s, "\nbus,class,v_pu,angle_deg,p_kw,q_kvar");
    for (i, b) in sc.net.buses.iter().enumerate() {
        let (e, f) = (pf.voltage.e[i], pf.voltage.f[i]);
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            b.id,
            b.class.as_deref().unwrap_or("-"),
            pf.voltage.magnitude(i),
            f.atan2(e).to_degrees(),
            loads.p[i],
            loads.q[i]
        );
    }
    Ok(s)
}
