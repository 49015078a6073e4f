//! Retail price environment: real-time prices, the flat retail rate, class
//! scaling and the incentive-rate bounds offered to each class.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Markup of the flat retail rate over the mean real-time price.
pub const FLAT_RATE_MARKUP: f64 = 1.05;

pub fn flat_rate_from_rtp(rtp: &[f64]) -> Result<f64> {
    if rtp.is_empty() {
        return Err(Error::Parameter("empty RTP series".into()));
    }
    if rtp.iter().any(|&p| !(p > 0.0)) {
        return Err(Error::Parameter("RTP prices must be positive".into()));
    }
    Ok(FLAT_RATE_MARKUP * rtp.iter().sum::<f64>() / rtp.len() as f64)
}

/// Class price from a base price and the class subsidy/overcharge factor.
pub fn class_rate(base: f64, kappa: f64) -> Result<f64> {
    if !(1.0 + kappa > 0.0) {
        return Err(Error::Parameter(format!(
            "1 + kappa must be positive, got kappa = {kappa}"
        )));
    }
    Ok(base * (1.0 + kappa))
}

/// Which price caps the incentive interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum UpperBasis {
    /// RTP × (1 + κ_d).
    #[default]
    ClassScaled,
    /// RTP as published.
    Raw,
}

impl std::str::FromStr for UpperBasis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class_scaled" => Ok(Self::ClassScaled),
            "raw" => Ok(Self::Raw),
            _ => Err(Error::Config(format!(
                "incentive_cap must be class_scaled or raw, got '{s}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum BoundMode {
    /// [class flat, max(class flat, cap)].
    #[default]
    Constrained,
    /// [0, cap]: the flat-rate floor is dropped.
    UpperOnly,
    /// [0, twice the day's largest cap]: a box wide enough to be inactive.
    Unconstrained,
}

impl std::str::FromStr for BoundMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constrained" => Ok(Self::Constrained),
            "upper_only" => Ok(Self::UpperOnly),
            "unconstrained" => Ok(Self::Unconstrained),
            _ => Err(Error::Config(format!(
                "incentive_bounds must be constrained, unconstrained or upper_only, got '{s}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TariffSchedule {
    pub rtp: Vec<f64>,
    pub flat_rate: f64,
    pub kappa: BTreeMap<String, f64>,
    pub basis: UpperBasis,
    pub mode: BoundMode,
}

impl TariffSchedule {
    /// Build a schedule; the flat rate defaults to the RTP markup rule.
    pub fn new(rtp: Vec<f64>, flat_rate: Option<f64>, kappa: BTreeMap<String, f64>) -> Result<Self> {
        let derived = flat_rate_from_rtp(&rtp)?;
        let flat_rate = flat_rate.unwrap_or(derived);
        if !(flat_rate > 0.0) {
            return Err(Error::Parameter("flat rate must be positive".into()));
        }
        for (c, &k) in &kappa {
            class_rate(1.0, k).map_err(|e| Error::Parameter(format!("class {c}: {e}")))?;
        }
        Ok(Self {
            rtp,
            flat_rate,
            kappa,
            basis: UpperBasis::default(),
            mode: BoundMode::default(),
        })
    }

    pub fn n_periods(&self) -> usize {
        self.rtp.len()
    }

    /// κ of a class; unknown classes and untagged load are unscaled.
    pub fn kappa_of(&self, class: Option<&str>) -> f64 {
        class.and_then(|c| self.kappa.get(c)).copied().unwrap_or(0.0)
    }

    /// Flat retail rate paid by a class.
    pub fn class_flat(&self, class: Option<&str>) -> f64 {
        self.flat_rate * (1.0 + self.kappa_of(class))
    }

    fn cap(&self, class: Option<&str>, t: usize) -> f64 {
        match self.basis {
            UpperBasis::ClassScaled => self.rtp[t] * (1.0 + self.kappa_of(class)),
            UpperBasis::Raw => self.rtp[t],
        }
    }

    /// Incentive interval (lo, hi) for a class in period `t` (0-based).
    pub fn incentive_bounds(&self, class: Option<&str>, t: usize) -> (f64, f64) {
        let flat = self.class_flat(class);
        match self.mode {
            BoundMode::Constrained => (flat, flat.max(self.cap(class, t))),
            BoundMode::UpperOnly => (0.0, flat.max(self.cap(class, t))),
            BoundMode::Unconstrained => {
                let widest = (0..self.n_periods()).map(|s| self.cap(class, s)).fold(flat, f64::max);
                (0.0, 2.0 * widest)
            }
        }
    }
}

/// Read an RTP file of `hour,price` lines. Hours must run 1, 2, … in order.
pub fn parse_rtp(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_rtp_str(&text, &path.display().to_string())
}

pub fn parse_rtp_str(text: &str, name: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let perr = |msg: String| Error::Parse {
            path: name.to_string(),
            line: k + 1,
            msg,
        };
        let (h, p) = line
            .split_once(',')
            .ok_or_else(|| perr(format!("expected 'hour,price', got '{line}'")))?;
        let (h, p) = (h.trim(), p.trim());
        if h == "hour" {
            continue;
        }
        let hour: usize = h.parse().map_err(|_| perr(format!("bad hour '{h}'")))?;
        let price: f64 = p.parse().map_err(|_| perr(format!("bad price '{p}'")))?;
        if hour != out.len() + 1 {
            return Err(perr(format!("expected hour {}, got {hour}", out.len() + 1)));
        }
        if !(price > 0.0 && price.is_finite()) {
            return Err(perr(format!("price must be positive, got {price}")));
        }
        out.push(price);
    }
    if out.is_empty() {
        return Err(Error::Parameter(format!("{name}: no RTP entries")));
    }
    Ok(out)
}
