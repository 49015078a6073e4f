//! Lower-level game among demand-response providers.
//!
//! For fixed incentive offers each DRP picks a curtailment that trades its
//! residual flexible bill and the incentive it earns against customer
//! discomfort. All DRPs share one cap on total curtailment per period, and
//! the variational equilibrium prices that cap with a single multiplier.
//!
//! Both response modes reduce to the same stationarity shape
//! `a·p − (c0 + c1·ρ) + λ − ν_lo + ν_hi = 0`, which is what the
//! equilibrium layer embeds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THETA: f64 = 0.012;
pub const DEFAULT_GAMMA: f64 = 0.08;
pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_CHI: f64 = 1.0;
pub const DEFAULT_PMAX_FRACTION: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ResponseMode {
    /// Curtailment minimizes the weighted bill/discomfort objective.
    #[default]
    Optimal,
    /// Curtailment tracks the linear incentive-response curve.
    Linear,
}

impl std::str::FromStr for ResponseMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "optimal" => Ok(Self::Optimal),
            "linear" => Ok(Self::Linear),
            _ => Err(Error::Config(format!("response must be optimal or linear, got '{s}'"))),
        }
    }
}

/// Behavioural parameters of one DRP, constant over the day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrpConfig {
    pub id: String,
    pub class: String,
    /// Bus ids whose flexible demand the DRP aggregates.
    pub buses: Vec<usize>,
    pub w1: f64,
    pub w2: f64,
    pub theta: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub chi: f64,
}

impl DrpConfig {
    pub fn new(id: &str, class: &str, buses: Vec<usize>) -> Self {
        Self {
            id: id.to_string(),
            class: class.to_string(),
            buses,
            w1: 0.5,
            w2: 0.5,
            theta: DEFAULT_THETA,
            gamma: DEFAULT_GAMMA,
            alpha: DEFAULT_ALPHA,
            chi: DEFAULT_CHI,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(format!("DRP {}: {m}", self.id)));
        if !(0.0..=1.0).contains(&self.w1) || !(0.0..=1.0).contains(&self.w2) {
            return bad(format!("weights ({}, {}) must lie in [0, 1]", self.w1, self.w2));
        }
        if (self.w1 + self.w2 - 1.0).abs() > 1e-12 {
            return bad(format!("weights ({}, {}) must sum to 1", self.w1, self.w2));
        }
        if !(self.theta >= 0.0 && self.gamma >= 0.0) {
            return bad("theta and gamma must be nonnegative".into());
        }
        if !(self.alpha >= 0.0 && self.chi >= 0.0) {
            return bad("alpha and chi must be nonnegative".into());
        }
        Ok(())
    }
}

/// One DRP's data for one period, in kW and currency/kWh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Follower {
    pub id: String,
    pub w1: f64,
    pub w2: f64,
    pub theta: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub chi: f64,
    pub p_lo: f64,
    pub p_hi: f64,
    /// Flexible demand before DR.
    pub p_base: f64,
    /// Flat retail rate of the DRP's class.
    pub flat_rate: f64,
    pub incentive_lo: f64,
    pub incentive_hi: f64,
}

/// Affine stationarity coefficients: gradient = a·p − (c0 + c1·ρ).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stationarity {
    pub a: f64,
    pub c0: f64,
    pub c1: f64,
}

impl Stationarity {
    pub fn drive(&self, rho: f64) -> f64 {
        self.c0 + self.c1 * rho
    }
}

impl Follower {
    pub fn from_config(cfg: &DrpConfig, p_base: f64, flat_rate: f64, bounds: (f64, f64)) -> Self {
        Self {
            id: cfg.id.clone(),
            w1: cfg.w1,
            w2: cfg.w2,
            theta: cfg.theta,
            gamma: cfg.gamma,
            alpha: cfg.alpha,
            chi: cfg.chi,
            p_lo: 0.0,
            p_hi: p_base,
            p_base,
            flat_rate,
            incentive_lo: bounds.0,
            incentive_hi: bounds.1,
        }
    }

    pub fn stationarity(&self, mode: ResponseMode) -> Stationarity {
        match mode {
            ResponseMode::Optimal => Stationarity {
                a: self.w2 * self.theta,
                c0: self.w1 * self.flat_rate - self.w2 * self.gamma,
                c1: self.w1,
            },
            ResponseMode::Linear => {
                let width = self.incentive_hi - self.incentive_lo;
                if width > 0.0 {
                    let k = self.alpha * self.p_hi / width;
                    Stationarity {
                        a: 1.0,
                        c0: -k * self.incentive_lo,
                        c1: k * self.chi,
                    }
                } else {
                    Stationarity {
                        a: 1.0,
                        c0: self.p_lo,
                        c1: 0.0,
                    }
                }
            }
        }
    }

    fn clip(&self, p: f64) -> f64 {
        p.clamp(self.p_lo, self.p_hi)
    }
}

/// Customer discomfort of curtailing `p` kW.
pub fn disutility(p: f64, theta: f64, gamma: f64) -> f64 {
    0.5 * theta * p * p + gamma * p
}

/// DRP objective for one period: weighted residual flexible bill net of the
/// incentive, plus weighted discomfort.
pub fn drp_objective(p: f64, rho_inc: f64, f: &Follower) -> f64 {
    f.w1 * ((f.p_base - p) * f.flat_rate - p * rho_inc) + f.w2 * disutility(p, f.theta, f.gamma)
}

/// Linear incentive-response curve, clamped to the DRP's box.
pub fn induced_demand(rho_inc: f64, f: &Follower) -> f64 {
    let width = f.incentive_hi - f.incentive_lo;
    if width <= 0.0 {
        return f.p_lo;
    }
    f.clip(f.alpha * f.p_hi / width * (f.chi * rho_inc - f.incentive_lo))
}

/// Objective a follower minimizes in the given mode.
pub fn follower_objective(p: f64, rho_inc: f64, f: &Follower, mode: ResponseMode) -> f64 {
    match mode {
        ResponseMode::Optimal => drp_objective(p, rho_inc, f),
        ResponseMode::Linear => {
            let s = f.stationarity(mode);
            0.5 * (p - s.drive(rho_inc)).powi(2)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FollowerSolution {
    /// Curtailment per DRP, kW.
    pub p: Vec<f64>,
    /// Shared multiplier of the curtailment cap.
    pub lambda: f64,
    pub nu_lo: Vec<f64>,
    pub nu_hi: Vec<f64>,
    pub kkt_residual: f64,
}

/// Variational equilibrium of the follower game for fixed offers.
pub fn solve_ve(rho_inc: &[f64], followers: &[Follower], p_max: f64, mode: ResponseMode) -> Result<FollowerSolution> {
    solve_ve_from(rho_inc, followers, p_max, mode, 0.0)
}

/// As [`solve_ve`], with the multiplier search seeded at `lambda_start`.
pub fn solve_ve_from(
    rho_inc: &[f64],
    followers: &[Follower],
    p_max: f64,
    mode: ResponseMode,
    lambda_start: f64,
) -> Result<FollowerSolution> {
    if rho_inc.len() != followers.len() {
        return Err(Error::Contract(format!(
            "{} offers for {} DRPs",
            rho_inc.len(),
            followers.len()
        )));
    }
    for f in followers {
        if !(f.p_lo >= 0.0 && f.p_lo <= f.p_hi) {
            return Err(Error::Parameter(format!(
                "DRP {}: invalid box [{}, {}]",
                f.id, f.p_lo, f.p_hi
            )));
        }
    }
    let lo_sum: f64 = followers.iter().map(|f| f.p_lo).sum();
    if lo_sum > p_max * (1.0 + 1e-12) + 1e-12 {
        return Err(Error::Infeasible(format!(
            "minimum curtailment {lo_sum} exceeds the cap {p_max}"
        )));
    }
    let coef: Vec<Stationarity> = followers.iter().map(|f| f.stationarity(mode)).collect();
    let drive: Vec<f64> = coef.iter().zip(rho_inc).map(|(c, &r)| c.drive(r)).collect();
    let scale = 1.0 + drive.iter().fold(0.0_f64, |m, d| m.max(d.abs()));

    // Response at a given multiplier; `tie_high` resolves zero-curvature ties.
    let respond = |lambda: f64, tie_high: bool| -> Vec<f64> {
        followers
            .iter()
            .zip(&coef)
            .zip(&drive)
            .map(|((f, c), &u)| {
                if c.a > 0.0 {
                    f.clip((u - lambda) / c.a)
                } else if u > lambda || (u == lambda && tie_high) {
                    f.p_hi
                } else {
                    f.p_lo
                }
            })
            .collect()
    };
    let total = |p: &[f64]| p.iter().sum::<f64>();

    let mut p = respond(0.0, false);
    let mut lambda = 0.0;
    if total(&p) > p_max {
        // Bracket the multiplier, starting from the supplied guess.
        let (mut lo, mut hi) = if lambda_start > 0.0 && total(&respond(lambda_start, false)) > p_max {
            (lambda_start, 2.0 * lambda_start)
        } else if lambda_start > 0.0 {
            (0.0, lambda_start)
        } else {
            (0.0, 1.0)
        };
        while total(&respond(hi, false)) > p_max {
            lo = hi;
            hi *= 2.0;
            if hi > 1e12 * scale {
                return Err(Error::Numerical("multiplier bracket diverged".into()));
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if total(&respond(mid, false)) > p_max {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        // Exact finish on the active piece of the response curve.
        lambda = hi;
        let mid = respond(0.5 * (lo + hi), false);
        let free: Vec<usize> = (0..followers.len())
            .filter(|&i| coef[i].a > 0.0 && mid[i] > followers[i].p_lo && mid[i] < followers[i].p_hi)
            .collect();
        if !free.is_empty() {
            let fixed: f64 = (0..followers.len()).filter(|i| !free.contains(i)).map(|i| mid[i]).sum();
            let inv: f64 = free.iter().map(|&i| 1.0 / coef[i].a).sum();
            let num: f64 = free.iter().map(|&i| drive[i] / coef[i].a).sum::<f64>() + fixed - p_max;
            lambda = (num / inv).max(0.0);
            p = respond(lambda, false);
            // Players fixed at a bound keep the bound they had on the piece.
            for i in 0..followers.len() {
                if !free.contains(&i) {
                    p[i] = mid[i];
                }
            }
        } else {
            let ties: Vec<usize> = (0..followers.len())
                .filter(|&i| coef[i].a == 0.0 && (drive[i] - lambda).abs() <= 1e-9 * scale)
                .collect();
            p = respond(lambda, false);
            if !ties.is_empty() {
                lambda = drive[ties[0]];
                let rest: f64 = (0..followers.len()).filter(|i| !ties.contains(i)).map(|i| p[i]).sum();
                let room: f64 = ties.iter().map(|&i| followers[i].p_hi - followers[i].p_lo).sum();
                let fill = ((p_max - rest - ties.iter().map(|&i| followers[i].p_lo).sum::<f64>()) / room.max(1e-300))
                    .clamp(0.0, 1.0);
                for &i in &ties {
                    p[i] = followers[i].p_lo + fill * (followers[i].p_hi - followers[i].p_lo);
                }
            }
        }
    }

    let mut nu_lo = vec![0.0; followers.len()];
    let mut nu_hi = vec![0.0; followers.len()];
    for i in 0..followers.len() {
        let g = coef[i].a * p[i] - drive[i] + lambda;
        if p[i] <= followers[i].p_lo && g > 0.0 {
            nu_lo[i] = g;
        } else if p[i] >= followers[i].p_hi && g < 0.0 {
            nu_hi[i] = -g;
        }
    }
    let mut sol = FollowerSolution {
        p,
        lambda,
        nu_lo,
        nu_hi,
        kkt_residual: 0.0,
    };
    sol.kkt_residual = kkt_residual(&sol, rho_inc, followers, p_max, mode);
    Ok(sol)
}

/// Largest violation among stationarity, feasibility, sign and
/// complementarity conditions of the follower KKT system.
pub fn kkt_residual(
    sol: &FollowerSolution,
    rho_inc: &[f64],
    followers: &[Follower],
    p_max: f64,
    mode: ResponseMode,
) -> f64 {
    let mut r: f64 = 0.0;
    let slack = p_max - sol.p.iter().sum::<f64>();
    r = r.max((-slack).max(0.0)).max((-sol.lambda).max(0.0));
    r = r.max((sol.lambda * slack).abs());
    for (i, f) in followers.iter().enumerate() {
        let c = f.stationarity(mode);
        let p = sol.p[i];
        let g = c.a * p - c.drive(rho_inc[i]) + sol.lambda - sol.nu_lo[i] + sol.nu_hi[i];
        r = r
            .max(g.abs())
            .max((f.p_lo - p).max(0.0))
            .max((p - f.p_hi).max(0.0))
            .max((-sol.nu_lo[i]).max(0.0))
            .max((-sol.nu_hi[i]).max(0.0))
            .max((sol.nu_lo[i] * (p - f.p_lo)).abs())
            .max((sol.nu_hi[i] * (f.p_hi - p)).abs());
    }
    r
}

/// Interval of cap multipliers consistent with DRP `d`'s own optimality
/// conditions when every other DRP is held at `p`.
pub fn coupling_multiplier_range(
    d: usize,
    p: &[f64],
    rho_inc: &[f64],
    followers: &[Follower],
    p_max: f64,
    mode: ResponseMode,
    tol: f64,
) -> (f64, f64) {
    let f = &followers[d];
    let c = f.stationarity(mode);
    let cap = p_max
        - p.iter()
            .enumerate()
            .filter(|&(i, _)| i != d)
            .map(|(_, v)| v)
            .sum::<f64>();
    let pd = p[d];
    let r = c.drive(rho_inc[d]) - c.a * pd;
    if cap - pd > tol {
        return (0.0, 0.0);
    }
    let at_lo = pd - f.p_lo <= tol;
    let at_hi = f.p_hi - pd <= tol;
    match (at_lo, at_hi) {
        (true, true) => (0.0, f64::INFINITY),
        (true, false) => (r.max(0.0), f64::INFINITY),
        (false, true) => (0.0, r.max(0.0)),
        (false, false) => (r, r),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniquenessReport {
    /// Diagonal of the pseudo-gradient Jacobian.
    pub diagonal: Vec<f64>,
    pub min_eigenvalue: f64,
    pub positive_definite: bool,
}

/// Strong monotonicity of the follower pseudo-gradient. The Jacobian is
/// diagonal, so positive definiteness is a sign check on its entries.
pub fn check_uniqueness(followers: &[Follower], mode: ResponseMode) -> UniquenessReport {
    let diagonal: Vec<f64> = followers.iter().map(|f| f.stationarity(mode).a).collect();
    let min_eigenvalue = diagonal.iter().copied().fold(f64::INFINITY, f64::min);
    UniquenessReport {
        positive_definite: !diagonal.is_empty() && min_eigenvalue > 0.0,
        diagonal,
        min_eigenvalue,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GseReport {
    pub samples: usize,
    /// Largest relative improvement found by any follower deviation.
    pub follower_improvement: f64,
    /// Largest relative improvement found by any leader deviation.
    pub leader_improvement: f64,
    /// Who found the largest improvement, e.g. `follower R` or `leader A`.
    pub worst: Option<String>,
    pub certified: bool,
}

/// Relative improvement threshold for certifying an equilibrium.
pub const GSE_TOL: f64 = 1e-6;

/// Probe an equilibrium candidate with random unilateral deviations.
///
/// Followers deviate within their box and the room the cap leaves them.
/// Leaders deviate within their incentive interval; `leader_cost(d, ρ)`
/// returns the leader objective after the followers re-equilibrate.
#[allow(clippy::too_many_arguments)]
pub fn check_gse(
    rho_inc: &[f64],
    p: &[f64],
    followers: &[Follower],
    p_max: f64,
    mode: ResponseMode,
    leader_cost: Option<&dyn Fn(usize, f64) -> Result<f64>>,
    samples: usize,
    seed: u64,
) -> Result<GseReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut follower_improvement: f64 = 0.0;
    let mut leader_improvement: f64 = 0.0;
    let mut worst: Option<(f64, String)> = None;
    let note = |v: f64, who: String, worst: &mut Option<(f64, String)>| {
        if worst.as_ref().map_or(v > 0.0, |(w, _)| v > *w) {
            *worst = Some((v, who));
        }
    };
    let n = followers.len();
    let per_player = samples.div_ceil((2 * n).max(1)).max(1);
    let mut drawn = 0;

    for (d, f) in followers.iter().enumerate() {
        let cap = p_max
            - p.iter()
                .enumerate()
                .filter(|&(i, _)| i != d)
                .map(|(_, v)| v)
                .sum::<f64>();
        let hi = f.p_hi.min(cap).max(f.p_lo);
        let base = follower_objective(p[d], rho_inc[d], f, mode);
        let scale = base.abs().max(f.w1 * f.p_base * f.flat_rate).max(1.0);
        for k in 0..per_player {
            let q = match k {
                0 => f.p_lo,
                1 => hi,
                _ => rng.gen_range(f.p_lo..=hi),
            };
            let gain = (base - follower_objective(q, rho_inc[d], f, mode)) / scale;
            follower_improvement = follower_improvement.max(gain);
            note(gain, format!("follower {}", f.id), &mut worst);
            drawn += 1;
        }
    }

    if let Some(cost) = leader_cost {
        for (d, f) in followers.iter().enumerate() {
            let base = cost(d, rho_inc[d])?;
            let scale = base.abs().max(1.0);
            for k in 0..per_player {
                let r = match k {
                    0 => f.incentive_lo,
                    1 => f.incentive_hi,
                    _ if f.incentive_hi > f.incentive_lo => rng.gen_range(f.incentive_lo..=f.incentive_hi),
                    _ => f.incentive_lo,
                };
                let gain = (base - cost(d, r)?) / scale;
                leader_improvement = leader_improvement.max(gain);
                note(gain, format!("leader {}", f.id), &mut worst);
                drawn += 1;
            }
        }
    }
    Ok(GseReport {
        samples: drawn,
        follower_improvement,
        leader_improvement,
        worst: worst.map(|(_, w)| w),
        certified: follower_improvement <= GSE_TOL && leader_improvement <= GSE_TOL,
    })
}
