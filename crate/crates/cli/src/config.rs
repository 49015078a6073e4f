//! Case configuration files (TOML).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use drpe_core::follower::{DrpConfig, ResponseMode, DEFAULT_PMAX_FRACTION};
use drpe_core::netmodel::{parse_bus_ranges, FlexDistribution, NetworkOptions};
use drpe_core::tariff::{BoundMode, UpperBasis};
use drpe_core::{Error, Result};

/// Which equilibrium solver handles the DR windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolverMode {
    #[default]
    Diag,
    Nlp,
    /// Both solvers run; reports use diagonalization.
    Both,
}

impl std::str::FromStr for SolverMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diag" => Ok(Self::Diag),
            "nlp" => Ok(Self::Nlp),
            "both" => Ok(Self::Both),
            _ => Err(Error::Config(format!("solver must be diag, nlp or both, got '{s}'"))),
        }
    }
}

impl SolverMode {
    pub fn label(self) -> &'static str {
        match self {
            Self::Diag => "diag",
            Self::Nlp => "nlp",
            Self::Both => "both",
        }
    }
}

/// A class: its buses and price factor.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassConfig {
    pub name: String,
    pub buses: Vec<usize>,
    pub kappa: f64,
}

/// Fully resolved case. Paths are absolute or relative to the working
/// directory; relative paths in the file are resolved against the file.
#[derive(Debug, Clone)]
pub struct CaseConfig {
    pub name: String,
    pub network: PathBuf,
    pub rtp: PathBuf,
    pub currency: String,
    /// Flat retail rate; derived from the RTP series when absent.
    pub flat_rate: Option<f64>,
    pub classes: Vec<ClassConfig>,
    /// Hourly load factors per class name.
    pub profiles: BTreeMap<String, Vec<f64>>,
    pub flex: FlexDistribution,
    pub drps: Vec<DrpConfig>,
    /// 1-based periods where DR is active.
    pub peak_periods: Vec<usize>,
    pub eps: f64,
    pub seed: u64,
    pub solver: SolverMode,
    pub response: ResponseMode,
    pub bounds: BoundMode,
    pub cap_basis: UpperBasis,
    pub pmax_fraction: f64,
    pub network_opts: NetworkOptions,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCase {
    name: Option<String>,
    network: PathBuf,
    rtp: PathBuf,
    currency: Option<String>,
    flat_rate: Option<f64>,
    seed: Option<u64>,
    eps: Option<f64>,
    solver: Option<String>,
    response: Option<String>,
    incentive_bounds: Option<String>,
    incentive_cap: Option<String>,
    peak_windows: Option<Vec<String>>,
    /// Default (w1, w2) for DRPs that set neither.
    weights: Option<[f64; 2]>,
    #[serde(default)]
    system: RawSystem,
    flex: Option<RawFlex>,
    #[serde(default)]
    classes: BTreeMap<String, RawClass>,
    #[serde(default)]
    profile: BTreeMap<String, Factors>,
    #[serde(default)]
    drp: BTreeMap<String, RawDrp>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawSystem {
    pmax_fraction: Option<f64>,
    base_mva: Option<f64>,
    base_kv: Option<f64>,
    slack_bus: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFlex {
    mu: f64,
    sigma: f64,
    min: f64,
    max: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawClass {
    buses: Buses,
    #[serde(default)]
    kappa: f64,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Buses {
    Ranges(String),
    List(Vec<usize>),
}

impl Buses {
    fn resolve(&self) -> Result<Vec<usize>> {
        match self {
            Buses::Ranges(s) => parse_bus_ranges(s),
            Buses::List(v) => Ok(v.clone()),
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Factors {
    Text(String),
    List(Vec<f64>),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDrp {
    class: String,
    buses: Option<Buses>,
    w1: Option<f64>,
    theta: Option<f64>,
    gamma: Option<f64>,
    alpha: Option<f64>,
    chi: Option<f64>,
}

/// Peak windows of the form `8-11` (inclusive) or single periods.
pub fn parse_periods(windows: &[String]) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for w in windows {
        out.extend(parse_bus_ranges(w).map_err(|_| Error::Config(format!("invalid peak window '{w}'")))?);
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

impl CaseConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let dir = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, dir)
    }

    /// Parse configuration text; relative file paths resolve against `dir`.
    pub fn from_toml(text: &str, dir: &Path) -> Result<Self> {
        let raw: RawCase = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let classes = raw
            .classes
            .iter()
            .map(|(name, c)| {
                Ok(ClassConfig {
                    name: name.clone(),
                    buses: c.buses.resolve()?,
                    kappa: c.kappa,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let profiles = raw
            .profile
            .iter()
            .map(|(name, f)| {
                let v = match f {
                    Factors::List(v) => v.clone(),
                    Factors::Text(s) => s
                        .split(',')
                        .map(|x| {
                            x.trim()
                                .parse::<f64>()
                                .map_err(|_| Error::Config(format!("profile.{name}: bad factor '{}'", x.trim())))
                        })
                        .collect::<Result<_>>()?,
                };
                Ok((name.clone(), v))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        let (w1, w2) = match raw.weights {
            Some([a, b]) => (a, b),
            None => (0.5, 0.5),
        };
        let drps = raw
            .drp
            .iter()
            .map(|(id, d)| {
                let buses = match &d.buses {
                    Some(b) => b.resolve()?,
                    None => Vec::new(),
                };
                let mut cfg = DrpConfig::new(id, &d.class, buses);
                (cfg.w1, cfg.w2) = match d.w1 {
                    Some(w) => (w, 1.0 - w),
                    None => (w1, w2),
                };
                if let Some(v) = d.theta {
                    cfg.theta = v;
                }
                if let Some(v) = d.gamma {
                    cfg.gamma = v;
                }
                if let Some(v) = d.alpha {
                    cfg.alpha = v;
                }
                if let Some(v) = d.chi {
                    cfg.chi = v;
                }
                Ok(cfg)
            })
            .collect::<Result<Vec<_>>>()?;
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { dir.join(p) };
        let mut network_opts = NetworkOptions::default();
        if let Some(v) = raw.system.base_mva {
            network_opts.base_mva = v;
        }
        if let Some(v) = raw.system.base_kv {
            network_opts.base_kv = v;
        }
        if let Some(v) = raw.system.slack_bus {
            network_opts.slack_bus = v;
        }
        let cfg = CaseConfig {
            name: raw.name.unwrap_or_else(|| "case".into()),
            network: resolve(&raw.network),
            rtp: resolve(&raw.rtp),
            currency: raw.currency.unwrap_or_else(|| "currency".into()),
            flat_rate: raw.flat_rate,
            classes,
            profiles,
            flex: raw.flex.map_or_else(FlexDistribution::default, |f| FlexDistribution {
                mu: f.mu,
                sigma: f.sigma,
                min: f.min,
                max: f.max,
            }),
            drps,
            peak_periods: parse_periods(&raw.peak_windows.unwrap_or_else(|| vec!["8-11".into(), "18-22".into()]))?,
            eps: raw.eps.unwrap_or(0.01),
            seed: raw.seed.unwrap_or(0),
            solver: raw.solver.as_deref().unwrap_or("diag").parse()?,
            response: raw.response.as_deref().unwrap_or("optimal").parse()?,
            bounds: raw.incentive_bounds.as_deref().unwrap_or("constrained").parse()?,
            cap_basis: raw.incentive_cap.as_deref().unwrap_or("class_scaled").parse()?,
            pmax_fraction: raw.system.pmax_fraction.unwrap_or(DEFAULT_PMAX_FRACTION),
            network_opts,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if let Some(&t) = self.peak_periods.iter().find(|&&t| !(1..=24).contains(&t)) {
            return Err(Error::Config(format!("peak period {t} outside 1..24")));
        }
        for d in &self.drps {
            if !self.classes.iter().any(|c| c.name == d.class) {
                return Err(Error::Config(format!("DRP {} names unknown class {}", d.id, d.class)));
            }
            d.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        for name in self.profiles.keys() {
            if name != "default" && !self.classes.iter().any(|c| &c.name == name) {
                return Err(Error::Config(format!("profile.{name} names unknown class")));
            }
        }
        for p in [&self.network, &self.rtp] {
            if !p.is_file() {
                return Err(Error::Config(format!("file not found: {}", p.display())));
            }
        }
        Ok(())
    }

    /// Same case with every DRP's weights set to (w1, 1 − w1).
    pub fn with_weights(&self, w1: f64) -> Self {
        let mut c = self.clone();
        for d in &mut c.drps {
            d.w1 = w1;
            d.w2 = 1.0 - w1;
        }
        c
    }
}
