//! Distribution network, customer classes and hourly load composition.
//!
//! Case files are comma-delimited tables with the header
//! `bus,from,to,r_ohm,x_ohm,p_kw,q_kvar,vmin_pu,vmax_pu,smax_kva`. Each row
//! carries the load and voltage limits of `bus` and, when `from`/`to` are
//! present, one series branch. A row with empty `from`/`to` declares a bus
//! without a branch (typically the substation). `#` starts a comment.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

const HEADER: [&str; 10] = [
    "bus", "from", "to", "r_ohm", "x_ohm", "p_kw", "q_kvar", "vmin_pu", "vmax_pu", "smax_kva",
];

/// Upper limit on the flexible share of any bus load.
pub const MAX_FLEX_FRACTION: f64 = 0.30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    /// Nominal active load, kW.
    pub p_kw: f64,
    /// Nominal reactive load, kVAR.
    pub q_kvar: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub class: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    /// Bus ids.
    pub from: usize,
    pub to: usize,
    pub r_pu: f64,
    pub x_pu: f64,
    /// Series conductance and susceptance, pu.
    pub g: f64,
    pub b: f64,
    /// Apparent power limit, pu. Infinite when the case gives none.
    pub flow_limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    /// Index into `buses`.
    pub slack: usize,
    pub slack_voltage: f64,
    pub base_mva: f64,
    pub base_kv: f64,
    /// Slack generation bounds, pu.
    pub pg_bounds: (f64, f64),
    pub qg_bounds: (f64, f64),
}

/// Parsing options that the case table itself does not carry.
#[derive(Debug, Clone)]
pub struct NetworkOptions {
    pub base_mva: f64,
    pub base_kv: f64,
    pub slack_bus: usize,
    pub slack_voltage: f64,
    pub default_vmin: f64,
    pub default_vmax: f64,
    /// Slack generation bounds, kW / kVAR.
    pub pg_kw: (f64, f64),
    pub qg_kvar: (f64, f64),
}

impl Default for NetworkOptions {
    fn default() -> Self {
        Self {
            base_mva: 1.0,
            base_kv: 12.66,
            slack_bus: 1,
            slack_voltage: 1.0,
            default_vmin: 0.9,
            default_vmax: 1.1,
            pg_kw: (0.0, 20_000.0),
            qg_kvar: (0.0, 20_000.0),
        }
    }
}

impl Network {
    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    /// Base power in kVA; one per-unit of power equals this many kW.
    pub fn base_kva(&self) -> f64 {
        self.base_mva * 1000.0
    }

    pub fn base_ohm(&self) -> f64 {
        self.base_kv * self.base_kv / self.base_mva
    }

    pub fn index_of(&self, id: usize) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub fn to_pu(&self, kw: f64) -> f64 {
        kw / self.base_kva()
    }

    pub fn from_pu(&self, pu: f64) -> f64 {
        pu * self.base_kva()
    }

    pub fn total_load(&self) -> (f64, f64) {
        self.buses
            .iter()
            .fold((0.0, 0.0), |(p, q), b| (p + b.p_kw, q + b.q_kvar))
    }

    /// Nominal active load of every bus tagged with `class`, kW.
    pub fn class_load(&self, class: &str) -> f64 {
        self.buses
            .iter()
            .filter(|b| b.class.as_deref() == Some(class))
            .map(|b| b.p_kw)
            .sum()
    }

    /// Line indices as (from index, to index) pairs.
    pub fn line_indices(&self) -> Vec<(usize, usize)> {
        let idx: HashMap<usize, usize> = self.buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect();
        self.lines.iter().map(|l| (idx[&l.from], idx[&l.to])).collect()
    }

    fn check_connected(&self) -> Result<()> {
        let n = self.buses.len();
        let mut adj = vec![Vec::new(); n];
        for (a, b) in self.line_indices() {
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([self.slack]);
        seen[self.slack] = true;
        while let Some(i) = queue.pop_front() {
            for &j in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        let orphans: Vec<usize> = (0..n).filter(|&i| !seen[i]).map(|i| self.buses[i].id).collect();
        if orphans.is_empty() {
            Ok(())
        } else {
            Err(Error::Topology(format!(
                "buses {orphans:?} are not connected to the slack bus"
            )))
        }
    }
}

pub fn parse_network(path: impl AsRef<Path>) -> Result<Network> {
    parse_network_with(path, &NetworkOptions::default())
}

pub fn parse_network_with(path: impl AsRef<Path>, opts: &NetworkOptions) -> Result<Network> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_network_str(&text, &path.display().to_string(), opts)
}

/// Parse a case table held in memory; `name` labels error messages.
pub fn parse_network_str(text: &str, name: &str, opts: &NetworkOptions) -> Result<Network> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: name.to_string(),
        line,
        msg,
    };
    if opts.base_mva <= 0.0 || opts.base_kv <= 0.0 {
        return Err(Error::Parameter("base_mva and base_kv must be positive".into()));
    }
    let z_base = opts.base_kv * opts.base_kv / opts.base_mva;
    let s_base = opts.base_mva * 1000.0;

    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| perr(1, format!("unreadable header: {e}")))?
        .clone();
    let got: Vec<&str> = header.iter().collect();
    if got != HEADER {
        return Err(perr(
            1,
            format!("expected header {}, got {}", HEADER.join(","), got.join(",")),
        ));
    }

    let mut buses: BTreeMap<usize, Bus> = BTreeMap::new();
    let mut lines = Vec::new();
    let mut pairs = HashSet::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            perr(line, e.to_string())
        })?;
        let line_no = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() != HEADER.len() {
            return Err(perr(
                line_no,
                format!("expected {} fields, found {}", HEADER.len(), rec.len()),
            ));
        }
        let field = |i: usize| rec.get(i).unwrap_or("");
        let num = |i: usize| -> Result<Option<f64>> {
            let s = field(i);
            if s.is_empty() {
                return Ok(None);
            }
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(Some)
                .ok_or_else(|| perr(line_no, format!("column {}: '{s}' is not a number", HEADER[i])))
        };
        let id = |i: usize| -> Result<Option<usize>> {
            let s = field(i);
            if s.is_empty() {
                return Ok(None);
            }
            match s.parse::<usize>() {
                Ok(v) if v >= 1 => Ok(Some(v)),
                _ => Err(perr(line_no, format!("column {}: '{s}' is not a bus id", HEADER[i]))),
            }
        };

        let bus = id(0)?.ok_or_else(|| perr(line_no, "missing bus id".into()))?;
        let p_kw = num(5)?.unwrap_or(0.0);
        let q_kvar = num(6)?.unwrap_or(0.0);
        let v_min = num(7)?.unwrap_or(opts.default_vmin);
        let v_max = num(8)?.unwrap_or(opts.default_vmax);
        if p_kw < 0.0 || q_kvar < 0.0 {
            return Err(perr(line_no, "loads must be nonnegative".into()));
        }
        if !(v_min > 0.0 && v_min <= v_max) {
            return Err(perr(line_no, format!("invalid voltage limits [{v_min}, {v_max}]")));
        }
        if buses.contains_key(&bus) {
            return Err(perr(line_no, format!("bus {bus} declared twice")));
        }
        buses.insert(
            bus,
            Bus {
                id: bus,
                p_kw,
                q_kvar,
                v_min,
                v_max,
                class: None,
            },
        );

        match (id(1)?, id(2)?) {
            (None, None) => {}
            (Some(from), Some(to)) => {
                if from == to {
                    return Err(Error::Topology(format!(
                        "line {from}->{to} on line {line_no} is a self-loop"
                    )));
                }
                let key = (from.min(to), from.max(to));
                if !pairs.insert(key) {
                    return Err(Error::Topology(format!("duplicate line {from}-{to} on line {line_no}")));
                }
                let r = num(3)?.ok_or_else(|| perr(line_no, "missing r_ohm".into()))?;
                let x = num(4)?.ok_or_else(|| perr(line_no, "missing x_ohm".into()))?;
                if r < 0.0 || (r == 0.0 && x == 0.0) {
                    return Err(perr(line_no, "line impedance must be nonzero with r >= 0".into()));
                }
                let flow_limit = match num(9)? {
                    Some(s) if s > 0.0 => s / s_base,
                    Some(_) => return Err(perr(line_no, "smax_kva must be positive".into())),
                    None => f64::INFINITY,
                };
                let (r_pu, x_pu) = (r / z_base, x / z_base);
                let den = r_pu * r_pu + x_pu * x_pu;
                lines.push(Line {
                    from,
                    to,
                    r_pu,
                    x_pu,
                    g: r_pu / den,
                    b: -x_pu / den,
                    flow_limit,
                });
            }
            _ => return Err(perr(line_no, "from and to must both be set or both empty".into())),
        }
    }

    // Endpoints without their own row get zero load and default limits.
    for l in &lines {
        for id in [l.from, l.to] {
            buses.entry(id).or_insert_with(|| Bus {
                id,
                p_kw: 0.0,
                q_kvar: 0.0,
                v_min: opts.default_vmin,
                v_max: opts.default_vmax,
                class: None,
            });
        }
    }
    let buses: Vec<Bus> = buses.into_values().collect();
    let slack = buses
        .iter()
        .position(|b| b.id == opts.slack_bus)
        .ok_or_else(|| Error::Topology(format!("slack bus {} not present", opts.slack_bus)))?;
    let (pg_lo, pg_hi) = opts.pg_kw;
    let (qg_lo, qg_hi) = opts.qg_kvar;
    if !(pg_lo >= 0.0 && pg_lo <= pg_hi && pg_hi.is_finite()) || !(qg_lo >= 0.0 && qg_lo <= qg_hi && qg_hi.is_finite())
    {
        return Err(Error::Parameter(
            "slack generation bounds must be nonnegative and finite".into(),
        ));
    }
    let net = Network {
        buses,
        lines,
        slack,
        slack_voltage: opts.slack_voltage,
        base_mva: opts.base_mva,
        base_kv: opts.base_kv,
        pg_bounds: (pg_lo / s_base, pg_hi / s_base),
        qg_bounds: (qg_lo / s_base, qg_hi / s_base),
    };
    net.check_connected()?;
    Ok(net)
}

/// A named customer class and the bus ids it covers.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSpec {
    pub name: String,
    pub buses: Vec<usize>,
}

/// Parse bus lists such as `2-10,12,14-15`.
pub fn parse_bus_ranges(s: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let bad = || Error::Config(format!("invalid bus range '{part}'"));
        if let Some((a, b)) = part.split_once('-') {
            let a: usize = a.trim().parse().map_err(|_| bad())?;
            let b: usize = b.trim().parse().map_err(|_| bad())?;
            if a > b {
                return Err(bad());
            }
            out.extend(a..=b);
        } else {
            out.push(part.parse().map_err(|_| bad())?);
        }
    }
    Ok(out)
}

/// Tag buses with customer classes. Buses outside every class stay untagged.
pub fn assign_classes(net: &Network, mapping: &[ClassSpec]) -> Result<Network> {
    let mut out = net.clone();
    for b in &mut out.buses {
        b.class = None;
    }
    let mut owner: HashMap<usize, &str> = HashMap::new();
    for spec in mapping {
        for &id in &spec.buses {
            let Some(i) = out.index_of(id) else {
                return Err(Error::Config(format!(
                    "class {} names bus {id}, which is not in the network",
                    spec.name
                )));
            };
            if let Some(prev) = owner.insert(id, &spec.name) {
                return Err(Error::Config(format!(
                    "bus {id} is claimed by classes {prev} and {}",
                    spec.name
                )));
            }
            out.buses[i].class = Some(spec.name.clone());
        }
    }
    Ok(out)
}

/// Truncated normal law for the flexible share of each bus load.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlexDistribution {
    pub mu: f64,
    pub sigma: f64,
    pub min: f64,
    pub max: f64,
}

impl Default for FlexDistribution {
    fn default() -> Self {
        Self {
            mu: 0.15,
            sigma: 0.05,
            min: 0.0,
            max: MAX_FLEX_FRACTION,
        }
    }
}

impl FlexDistribution {
    fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::Parameter(format!(
                "flex.sigma must be positive, got {}",
                self.sigma
            )));
        }
        if !(0.0 <= self.min && self.min <= self.max && self.max <= MAX_FLEX_FRACTION) {
            return Err(Error::Parameter(format!(
                "flex bounds [{}, {}] must satisfy 0 <= min <= max <= {MAX_FLEX_FRACTION}",
                self.min, self.max
            )));
        }
        Ok(())
    }

    /// Inverse-CDF draw from a uniform `u` in [0, 1).
    pub fn quantile(&self, u: f64) -> f64 {
        if self.min == self.max {
            return self.min;
        }
        let std = Normal::new(0.0, 1.0).expect("standard normal");
        let a = std.cdf((self.min - self.mu) / self.sigma);
        let b = std.cdf((self.max - self.mu) / self.sigma);
        let x = if b - a > 1e-300 {
            self.mu + self.sigma * std.inverse_cdf(a + u * (b - a))
        } else {
            // Interval lies far in one tail; the mass piles on the nearer edge.
            if self.mu < self.min {
                self.min
            } else {
                self.max
            }
        };
        x.clamp(self.min, self.max)
    }
}

/// Hourly class load factors and the flexibility law.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadProfileSet {
    pub n_periods: usize,
    /// Factors in [0, 1] per class, one per period.
    pub class_factors: BTreeMap<String, Vec<f64>>,
    /// Factors for buses whose class has no profile (or no class).
    pub default_factors: Vec<f64>,
    pub flex: FlexDistribution,
}

impl LoadProfileSet {
    /// Flat profile: every bus at nominal load in every period.
    pub fn flat(n_periods: usize) -> Self {
        Self {
            n_periods,
            class_factors: BTreeMap::new(),
            default_factors: vec![1.0; n_periods],
            flex: FlexDistribution::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.flex.validate()?;
        let all = self
            .class_factors
            .iter()
            .map(|(k, v)| (k.as_str(), v))
            .chain(std::iter::once(("default", &self.default_factors)));
        for (name, f) in all {
            if f.len() != self.n_periods {
                return Err(Error::Config(format!(
                    "profile.{name} has {} factors, expected {}",
                    f.len(),
                    self.n_periods
                )));
            }
            if f.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Config(format!("profile.{name} factors must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn factor(&self, class: Option<&str>, t: usize) -> f64 {
        class
            .and_then(|c| self.class_factors.get(c))
            .unwrap_or(&self.default_factors)[t]
    }
}

/// Flexible fractions indexed `[bus][period]`, drawn bus-major from one stream.
pub fn sample_flexibility(profile: &LoadProfileSet, n_buses: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    profile.flex.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_buses)
        .map(|_| {
            (0..profile.n_periods)
                .map(|_| profile.flex.quantile(rng.gen::<f64>()))
                .collect()
        })
        .collect())
}

/// Loads of every bus in one period, in kW / kVAR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodLoads {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub flex_p: Vec<f64>,
    pub flex_q: Vec<f64>,
}

impl PeriodLoads {
    pub fn zeros(n: usize) -> Self {
        Self {
            p: vec![0.0; n],
            q: vec![0.0; n],
            flex_p: vec![0.0; n],
            flex_q: vec![0.0; n],
        }
    }

    pub fn inflexible_p(&self, i: usize) -> f64 {
        self.p[i] - self.flex_p[i]
    }

    pub fn inflexible_q(&self, i: usize) -> f64 {
        self.q[i] - self.flex_q[i]
    }

    pub fn total_p(&self) -> f64 {
        self.p.iter().sum()
    }

    pub fn total_q(&self) -> f64 {
        self.q.iter().sum()
    }

    /// Reactive curtailment that keeps each bus power factor unchanged.
    pub fn reactive_curtailment(&self, p_curt: &[f64]) -> Vec<f64> {
        p_curt
            .iter()
            .zip(self.p.iter().zip(&self.q))
            .map(|(&c, (&p, &q))| if p > 0.0 { c * q / p } else { 0.0 })
            .collect()
    }

    /// Loads after removing `p_curt` kW per bus at constant power factor.
    pub fn curtailed(&self, p_curt: &[f64]) -> PeriodLoads {
        let q_curt = self.reactive_curtailment(p_curt);
        PeriodLoads {
            p: self.p.iter().zip(p_curt).map(|(a, c)| a - c).collect(),
            q: self.q.iter().zip(&q_curt).map(|(a, c)| a - c).collect(),
            flex_p: self.flex_p.iter().zip(p_curt).map(|(a, c)| a - c).collect(),
            flex_q: self.flex_q.iter().zip(&q_curt).map(|(a, c)| a - c).collect(),
        }
    }
}

/// Hourly bus loads from class profiles and sampled flexible fractions.
/// Untagged buses carry no flexible demand.
pub fn build_loads(net: &Network, profile: &LoadProfileSet, fractions: &[Vec<f64>]) -> Result<Vec<PeriodLoads>> {
    profile.validate()?;
    if fractions.len() != net.n_buses() {
        return Err(Error::Contract(format!(
            "{} flexibility rows for {} buses",
            fractions.len(),
            net.n_buses()
        )));
    }
    Ok((0..profile.n_periods)
        .map(|t| {
            let mut out = PeriodLoads::zeros(net.n_buses());
            for (i, bus) in net.buses.iter().enumerate() {
                let f = profile.factor(bus.class.as_deref(), t);
                let flex = if bus.class.is_some() { fractions[i][t] } else { 0.0 };
                out.p[i] = bus.p_kw * f;
                out.q[i] = bus.q_kvar * f;
                out.flex_p[i] = flex * out.p[i];
                out.flex_q[i] = flex * out.q[i];
            }
            out
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_BUS: &str = "bus,from,to,r_ohm,x_ohm,p_kw,q_kvar,vmin_pu,vmax_pu,smax_kva
1,,,,,0,0,1.0,1.0,
2,1,2,0,0.1,0,0,0.9,1.1,
";

    fn unit_base() -> NetworkOptions {
        NetworkOptions {
            base_kv: 1.0,
            base_mva: 1.0,
            ..Default::default()
        }
    }

    #[test]
    fn two_bus_admittance() {
        let net = parse_network_str(TWO_BUS, "two", &unit_base()).unwrap();
        assert_eq!(net.n_buses(), 2);
        let l = &net.lines[0];
        assert_eq!(l.g, 0.0);
        assert!((l.b + 10.0).abs() < 1e-12);
        assert!(l.flow_limit.is_infinite());
    }

    #[test]
    fn self_loop_is_topology_error() {
        let text = "bus,from,to,r_ohm,x_ohm,p_kw,q_kvar,vmin_pu,vmax_pu,smax_kva
1,,,,,0,0,,,
5,5,5,0.1,0.1,10,5,,,
";
        let err = parse_network_str(text, "loop", &unit_base()).unwrap_err();
        assert!(matches!(err, Error::Topology(_)), "{err}");
    }

    #[test]
    fn duplicate_and_disconnected() {
        let dup = "bus,from,to,r_ohm,x_ohm,p_kw,q_kvar,vmin_pu,vmax_pu,smax_kva
2,1,2,0.1,0.1,10,5,,,
3,2,1,0.1,0.1,10,5,,,
";
        assert!(matches!(
            parse_network_str(dup, "dup", &unit_base()),
            Err(Error::Topology(_))
        ));
        let island = "bus,from,to,r_ohm,x_ohm,p_kw,q_kvar,vmin_pu,vmax_pu,smax_kva
2,1,2,0.1,0.1,10,5,,,
4,3,4,0.1,0.1,10,5,,,
";
        assert!(matches!(
            parse_network_str(island, "island", &unit_base()),
            Err(Error::Topology(_))
        ));
    }

    #[test]
    fn malformed_row_reports_line() {
        let text = "bus,from,to,r_ohm,x_ohm,p_kw,q_kvar,vmin_pu,vmax_pu,smax_kva
# comment
2,1,2,0.1,0.1,10,5,,,
3,2,3,abc,0.1,10,5,,,
";
        match parse_network_str(text, "bad", &unit_base()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ranges() {
        assert_eq!(parse_bus_ranges("2-4, 7").unwrap(), vec![2, 3, 4, 7]);
        assert!(parse_bus_ranges("5-2").is_err());
    }

    #[test]
    fn degenerate_flex_interval() {
        let mut p = LoadProfileSet::flat(24);
        p.flex = FlexDistribution {
            mu: 0.2,
            sigma: 0.3,
            min: 0.1,
            max: 0.1,
        };
        let f = sample_flexibility(&p, 3, 9).unwrap();
        assert!(f.iter().flatten().all(|&x| x == 0.1));
    }

    #[test]
    fn sigma_must_be_positive() {
        let mut p = LoadProfileSet::flat(4);
        p.flex.sigma = 0.0;
        assert!(matches!(sample_flexibility(&p, 2, 1), Err(Error::Parameter(_))));
    }
}
