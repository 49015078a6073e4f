//! Run reports: plain-text rendering, parsing and plot data.

use std::collections::HashMap;
use std::fmt::Write;
use std::path::Path;

use drpe_core::equilibrium::CostBreakdown;
use drpe_core::{Error, Result};

/// A quantity before and after DR.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Pair {
    pub bdr: f64,
    pub adr: f64,
}

impl Pair {
    pub fn new(bdr: f64, adr: f64) -> Self {
        Self { bdr, adr }
    }

    /// Reduction from BDR to ADR in percent of BDR.
    pub fn reduction_pct(&self) -> f64 {
        if self.bdr == 0.0 {
            0.0
        } else {
            100.0 * (self.bdr - self.adr) / self.bdr.abs()
        }
    }

    fn add(&mut self, o: Pair) {
        self.bdr += o.bdr;
        self.adr += o.adr;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DrpEntry {
    pub id: String,
    pub class: String,
}

/// One period of the day. Powers in kW/kVAR, costs in the case currency.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodRow {
    /// 1-based.
    pub period: usize,
    pub rtp: f64,
    pub peak: bool,
    pub method: String,
    pub load_p: Pair,
    pub load_q: Pair,
    pub flex_p: Pair,
    pub flex_q: Pair,
    pub pg: Pair,
    pub qg: Pair,
    pub loss_p: Pair,
    pub loss_q: Pair,
    pub lse_bdr: CostBreakdown,
    pub lse_adr: CostBreakdown,
    pub drp_cost: Pair,
    /// Customer discomfort after DR (zero before).
    pub discomfort: f64,
    pub sweeps: usize,
    pub c_pen: f64,
    pub residual: f64,
}

impl PeriodRow {
    pub fn lse(&self) -> Pair {
        Pair::new(self.lse_bdr.total, self.lse_adr.total)
    }
}

/// Incentive and response of one DRP in one period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleEntry {
    pub rho_lo: f64,
    pub rho_hi: f64,
    pub rho: f64,
    pub p_base: f64,
    pub p: f64,
}

/// A customer class: hourly demand and the day bill.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassRow {
    pub name: String,
    pub load: Vec<Pair>,
    /// Retail charges net of incentives received.
    pub bill: Pair,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub period: usize,
    pub sweep: usize,
    pub change: f64,
    pub lse_cost: f64,
    pub rho: Vec<f64>,
}

/// Day-level aggregates.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DayTotals {
    pub total_energy: Pair,
    pub avg_peak_demand: Pair,
    pub flexible_energy: Pair,
    pub flexible_energy_q: Pair,
    pub lse_cost: Pair,
    pub purchase_cost: Pair,
    pub revenue: Pair,
    pub drp_payment: Pair,
    pub customer_bill: Pair,
    pub discomfort: Pair,
    pub drp_cost: Pair,
    pub loss_p: Pair,
    pub loss_q: Pair,
}

impl DayTotals {
    pub fn from_rows(rows: &[PeriodRow], classes: &[ClassRow]) -> Self {
        let mut d = DayTotals::default();
        let peak: Vec<&PeriodRow> = rows.iter().filter(|r| r.peak).collect();
        for r in rows {
            d.total_energy.add(r.load_p);
            d.flexible_energy.add(r.flex_p);
            d.flexible_energy_q.add(r.flex_q);
            d.lse_cost.add(r.lse());
            d.purchase_cost.add(Pair::new(r.lse_bdr.purchase, r.lse_adr.purchase));
            d.revenue.add(Pair::new(r.lse_bdr.revenue, r.lse_adr.revenue));
            d.drp_payment.add(Pair::new(r.lse_bdr.payment, r.lse_adr.payment));
            d.discomfort.add(Pair::new(0.0, r.discomfort));
            d.drp_cost.add(r.drp_cost);
            d.loss_p.add(r.loss_p);
            d.loss_q.add(r.loss_q);
        }
        if !peak.is_empty() {
            let n = peak.len() as f64;
            d.avg_peak_demand = Pair::new(
                peak.iter().map(|r| r.load_p.bdr).sum::<f64>() / n,
                peak.iter().map(|r| r.load_p.adr).sum::<f64>() / n,
            );
        }
        for c in classes {
            d.customer_bill.add(c.bill);
        }
        d
    }

    /// Curtailed share of the day's flexible active energy, percent.
    pub fn dr_contribution_pct(&self) -> f64 {
        self.flexible_energy.reduction_pct()
    }

    pub fn dr_contribution_q_pct(&self) -> f64 {
        self.flexible_energy_q.reduction_pct()
    }

    fn named(&self) -> [(&'static str, Pair); 13] {
        [
            ("total_energy_kwh", self.total_energy),
            ("avg_peak_demand_kw", self.avg_peak_demand),
            ("flexible_energy_kwh", self.flexible_energy),
            ("flexible_energy_kvarh", self.flexible_energy_q),
            ("lse_cost", self.lse_cost),
            ("purchase_cost", self.purchase_cost),
            ("retail_revenue", self.revenue),
            ("drp_payment", self.drp_payment),
            ("customer_bill", self.customer_bill),
            ("discomfort_cost", self.discomfort),
            ("drp_cost", self.drp_cost),
            ("active_loss_kwh", self.loss_p),
            ("reactive_loss_kvarh", self.loss_q),
        ]
    }

    fn set(&mut self, name: &str, v: Pair) -> bool {
        let slot = match name {
            "total_energy_kwh" => &mut self.total_energy,
            "avg_peak_demand_kw" => &mut self.avg_peak_demand,
            "flexible_energy_kwh" => &mut self.flexible_energy,
            "flexible_energy_kvarh" => &mut self.flexible_energy_q,
            "lse_cost" => &mut self.lse_cost,
            "purchase_cost" => &mut self.purchase_cost,
            "retail_revenue" => &mut self.revenue,
            "drp_payment" => &mut self.drp_payment,
            "customer_bill" => &mut self.customer_bill,
            "discomfort_cost" => &mut self.discomfort,
            "drp_cost" => &mut self.drp_cost,
            "active_loss_kwh" => &mut self.loss_p,
            "reactive_loss_kvarh" => &mut self.loss_q,
            _ => return false,
        };
        *slot = v;
        true
    }
}

/// Everything a `run` produces.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub name: String,
    pub currency: String,
    pub solver: String,
    pub response: String,
    pub eps: f64,
    pub seed: u64,
    pub flat_rate: f64,
    pub drps: Vec<DrpEntry>,
    pub periods: Vec<PeriodRow>,
    /// `[period][drp]`.
    pub schedule: Vec<Vec<ScheduleEntry>>,
    pub classes: Vec<ClassRow>,
    pub day: DayTotals,
    pub trace: Vec<TraceRow>,
}

const PERIOD_COLUMNS: &[&str] = &[
    "period",
    "rtp",
    "peak",
    "method",
    "load_p_bdr",
    "load_p_adr",
    "load_q_bdr",
    "load_q_adr",
    "flex_p_bdr",
    "flex_p_adr",
    "flex_q_bdr",
    "flex_q_adr",
    "pg_bdr",
    "pg_adr",
    "qg_bdr",
    "qg_adr",
    "loss_p_bdr",
    "loss_p_adr",
    "loss_q_bdr",
    "loss_q_adr",
    "purchase_bdr",
    "revenue_bdr",
    "payment_bdr",
    "lse_cost_bdr",
    "purchase_adr",
    "revenue_adr",
    "payment_adr",
    "lse_cost_adr",
    "drp_cost_bdr",
    "drp_cost_adr",
    "discomfort",
    "sweeps",
    "c_pen",
    "residual",
];

fn f6(x: f64) -> String {
    let s = format!("{x:.6}");
    // Avoid "-0.000000" so equal values render identically.
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

fn pair(p: Pair) -> String {
    format!("{},{}", f6(p.bdr), f6(p.adr))
}

impl RunReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# drpe run report");
        let _ = writeln!(s, "[case]");
        let _ = writeln!(s, "name = {}", self.name);
        let _ = writeln!(s, "currency = {}", self.currency);
        let _ = writeln!(s, "solver = {}", self.solver);
        let _ = writeln!(s, "response = {}", self.response);
        let _ = writeln!(s, "eps = {}", self.eps);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "flat_rate = {}", f6(self.flat_rate));
        let ids: Vec<&str> = self.drps.iter().map(|d| d.id.as_str()).collect();
        let cls: Vec<&str> = self.drps.iter().map(|d| d.class.as_str()).collect();
        let _ = writeln!(s, "drps = {}", ids.join(","));
        let _ = writeln!(s, "drp_classes = {}", cls.join(","));

        let _ = writeln!(s, "\n[periods]");
        let _ = writeln!(s, "{}", PERIOD_COLUMNS.join(","));
        for r in &self.periods {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{:.3e},{:.3e}",
                r.period,
                f6(r.rtp),
                u8::from(r.peak),
                r.method,
                pair(r.load_p),
                pair(r.load_q),
                pair(r.flex_p),
                pair(r.flex_q),
                pair(r.pg),
                pair(r.qg),
                pair(r.loss_p),
                pair(r.loss_q),
                f6(r.lse_bdr.purchase),
                f6(r.lse_bdr.revenue),
                f6(r.lse_bdr.payment),
                f6(r.lse_bdr.total),
                f6(r.lse_adr.purchase),
                f6(r.lse_adr.revenue),
                f6(r.lse_adr.payment),
                f6(r.lse_adr.total),
                pair(r.drp_cost),
                f6(r.discomfort),
                r.sweeps,
                r.c_pen,
                r.residual
            );
        }

        let _ = writeln!(s, "\n[schedule]");
        let _ = writeln!(s, "period,drp,rho_lo,rho_hi,rho,p_base,p");
        for (r, row) in self.periods.iter().zip(&self.schedule) {
            for (d, e) in self.drps.iter().zip(row) {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{}",
                    r.period,
                    d.id,
                    f6(e.rho_lo),
                    f6(e.rho_hi),
                    f6(e.rho),
                    f6(e.p_base),
                    f6(e.p)
                );
            }
        }

        let _ = writeln!(s, "\n[class_bills]");
        let _ = writeln!(s, "class,bdr,adr,change_pct");
        for c in &self.classes {
            let _ = writeln!(s, "{},{},{:.4}", c.name, pair(c.bill), -c.bill.reduction_pct());
        }

        let _ = writeln!(s, "\n[class_load]");
        let _ = writeln!(s, "period,class,bdr,adr");
        for c in &self.classes {
            for (t, l) in c.load.iter().enumerate() {
                let _ = writeln!(s, "{},{},{}", t + 1, c.name, pair(*l));
            }
        }

        let _ = writeln!(s, "\n[day]");
        let _ = writeln!(s, "quantity,bdr,adr,change_pct");
        for (name, v) in self.day.named() {
            let _ = writeln!(s, "{name},{},{:.4}", pair(v), -v.reduction_pct());
        }
        let _ = writeln!(s, "\n[summary]");
        let _ = writeln!(s, "dr_contribution_p_pct = {:.4}", self.day.dr_contribution_pct());
        let _ = writeln!(s, "dr_contribution_q_pct = {:.4}", self.day.dr_contribution_q_pct());
        let _ = writeln!(s, "lse_cost_reduction_pct = {:.4}", self.day.lse_cost.reduction_pct());
        let _ = writeln!(s, "active_loss_reduction_pct = {:.4}", self.day.loss_p.reduction_pct());
        let _ = writeln!(
            s,
            "reactive_loss_reduction_pct = {:.4}",
            self.day.loss_q.reduction_pct()
        );
        let _ = writeln!(
            s,
            "max_sweeps = {}",
            self.periods.iter().map(|r| r.sweeps).max().unwrap_or(0)
        );
        let _ = writeln!(
            s,
            "max_c_pen = {:.3e}",
            self.periods.iter().map(|r| r.c_pen).fold(0.0, f64::max)
        );

        let _ = writeln!(s, "\n[trace]");
        let _ = writeln!(
            s,
            "period,sweep,change,lse_cost,{}",
            ids.iter().map(|i| format!("rho_{i}")).collect::<Vec<_>>().join(",")
        );
        for t in &self.trace {
            let rho: Vec<String> = t.rho.iter().map(|&x| f6(x)).collect();
            let change = if t.change.is_finite() {
                format!("{:.3e}", t.change)
            } else {
                "inf".into()
            };
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                t.period,
                t.sweep,
                change,
                f6(t.lse_cost),
                rho.join(",")
            );
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.render()).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parse the text written by [`RunReport::render`].
    pub fn parse(text: &str, name: &str) -> Result<Self> {
        let sections = split_sections(text, name)?;
        let get = |s: &str| {
            sections.get(s).ok_or_else(|| Error::Parse {
                path: name.to_string(),
                line: 0,
                msg: format!("missing section [{s}]"),
            })
        };
        let case = get("case")?;
        let kv: HashMap<&str, &str> = case
            .lines
            .iter()
            .filter_map(|(_, l)| l.split_once('=').map(|(k, v)| (k.trim(), v.trim())))
            .collect();
        let key = |k: &str| {
            kv.get(k).copied().ok_or_else(|| Error::Parse {
                path: name.to_string(),
                line: case.start,
                msg: format!("missing key {k}"),
            })
        };
        let perr = |line: usize, msg: String| Error::Parse {
            path: name.to_string(),
            line,
            msg,
        };
        let num = |line: usize, v: &str| -> Result<f64> {
            match v {
                "inf" => Ok(f64::INFINITY),
                _ => v.parse().map_err(|_| perr(line, format!("bad number '{v}'"))),
            }
        };
        let split = |v: &str| -> Vec<String> {
            if v.is_empty() {
                Vec::new()
            } else {
                v.split(',').map(str::to_string).collect()
            }
        };
        let ids = split(key("drps")?);
        let cls = split(key("drp_classes")?);
        let drps: Vec<DrpEntry> = ids
            .into_iter()
            .zip(cls)
            .map(|(id, class)| DrpEntry { id, class })
            .collect();

        let table = |s: &str| -> Result<Table> { Table::new(get(s)?, name) };

        let pt = table("periods")?;
        let mut periods = Vec::new();
        for (line, row) in pt.rows() {
            let f = |c: &str| num(line, pt.cell(row, c));
            let p = |c: &str| -> Result<Pair> { Ok(Pair::new(f(&format!("{c}_bdr"))?, f(&format!("{c}_adr"))?)) };
            let cost = |suffix: &str| -> Result<CostBreakdown> {
                Ok(CostBreakdown {
                    purchase: f(&format!("purchase_{suffix}"))?,
                    revenue: f(&format!("revenue_{suffix}"))?,
                    payment: f(&format!("payment_{suffix}"))?,
                    total: f(&format!("lse_cost_{suffix}"))?,
                })
            };
            periods.push(PeriodRow {
                period: f("period")? as usize,
                rtp: f("rtp")?,
                peak: pt.cell(row, "peak") == "1",
                method: pt.cell(row, "method").to_string(),
                load_p: p("load_p")?,
                load_q: p("load_q")?,
                flex_p: p("flex_p")?,
                flex_q: p("flex_q")?,
                pg: p("pg")?,
                qg: p("qg")?,
                loss_p: p("loss_p")?,
                loss_q: p("loss_q")?,
                lse_bdr: cost("bdr")?,
                lse_adr: cost("adr")?,
                drp_cost: p("drp_cost")?,
                discomfort: f("discomfort")?,
                sweeps: f("sweeps")? as usize,
                c_pen: f("c_pen")?,
                residual: f("residual")?,
            });
        }

        let st = table("schedule")?;
        let mut schedule = vec![Vec::new(); periods.len()];
        for (line, row) in st.rows() {
            let t = num(line, st.cell(row, "period"))? as usize;
            let slot = schedule
                .get_mut(t.wrapping_sub(1))
                .ok_or_else(|| perr(line, format!("period {t} not in [periods]")))?;
            let f = |c: &str| num(line, st.cell(row, c));
            slot.push(ScheduleEntry {
                rho_lo: f("rho_lo")?,
                rho_hi: f("rho_hi")?,
                rho: f("rho")?,
                p_base: f("p_base")?,
                p: f("p")?,
            });
        }

        let bt = table("class_bills")?;
        let mut classes = Vec::new();
        for (line, row) in bt.rows() {
            classes.push(ClassRow {
                name: bt.cell(row, "class").to_string(),
                load: Vec::new(),
                bill: Pair::new(num(line, bt.cell(row, "bdr"))?, num(line, bt.cell(row, "adr"))?),
            });
        }
        let lt = table("class_load")?;
        for (line, row) in lt.rows() {
            let c = lt.cell(row, "class");
            let class = classes
                .iter_mut()
                .find(|x| x.name == c)
                .ok_or_else(|| perr(line, format!("class {c} not in [class_bills]")))?;
            class.load.push(Pair::new(
                num(line, lt.cell(row, "bdr"))?,
                num(line, lt.cell(row, "adr"))?,
            ));
        }

        let dt = table("day")?;
        let mut day = DayTotals::default();
        for (line, row) in dt.rows() {
            let q = dt.cell(row, "quantity");
            let v = Pair::new(num(line, dt.cell(row, "bdr"))?, num(line, dt.cell(row, "adr"))?);
            if !day.set(q, v) {
                return Err(perr(line, format!("unknown day quantity {q}")));
            }
        }

        let tt = table("trace")?;
        let mut trace = Vec::new();
        for (line, row) in tt.rows() {
            trace.push(TraceRow {
                period: num(line, tt.cell(row, "period"))? as usize,
                sweep: num(line, tt.cell(row, "sweep"))? as usize,
                change: num(line, tt.cell(row, "change"))?,
                lse_cost: num(line, tt.cell(row, "lse_cost"))?,
                rho: drps
                    .iter()
                    .map(|d| num(line, tt.cell(row, &format!("rho_{}", d.id))))
                    .collect::<Result<_>>()?,
            });
        }

        Ok(RunReport {
            name: key("name")?.to_string(),
            currency: key("currency")?.to_string(),
            solver: key("solver")?.to_string(),
            response: key("response")?.to_string(),
            eps: num(case.start, key("eps")?)?,
            seed: key("seed")?.parse().map_err(|_| perr(case.start, "bad seed".into()))?,
            flat_rate: num(case.start, key("flat_rate")?)?,
            drps,
            periods,
            schedule,
            classes,
            day,
            trace,
        })
    }

    /// Class bills after DR add up to the total customer bill.
    pub fn class_bill_total(&self) -> Pair {
        let mut p = Pair::default();
        for c in &self.classes {
            p.add(c.bill);
        }
        p
    }
}

struct Section<'a> {
    start: usize,
    lines: Vec<(usize, &'a str)>,
}

fn split_sections<'a>(text: &'a str, name: &str) -> Result<HashMap<&'a str, Section<'a>>> {
    let mut out: HashMap<&str, Section> = HashMap::new();
    let mut current: Option<&str> = None;
    for (k, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(s) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = Some(s);
            out.insert(
                s,
                Section {
                    start: k + 1,
                    lines: Vec::new(),
                },
            );
            continue;
        }
        let Some(s) = current else {
            return Err(Error::Parse {
                path: name.to_string(),
                line: k + 1,
                msg: "content before the first section".into(),
            });
        };
        out.get_mut(s).expect("section opened").lines.push((k + 1, line));
    }
    Ok(out)
}

struct Table<'a> {
    columns: HashMap<&'a str, usize>,
    rows: Vec<(usize, Vec<&'a str>)>,
}

impl<'a> Table<'a> {
    fn new(sec: &Section<'a>, name: &str) -> Result<Self> {
        let Some(&(hline, header)) = sec.lines.first() else {
            return Err(Error::Parse {
                path: name.to_string(),
                line: sec.start,
                msg: "table without header".into(),
            });
        };
        let columns: HashMap<&str, usize> = header.split(',').enumerate().map(|(i, c)| (c, i)).collect();
        let width = columns.len();
        let mut rows = Vec::new();
        for &(line, l) in &sec.lines[1..] {
            let cells: Vec<&str> = l.split(',').collect();
            if cells.len() != width {
                return Err(Error::Parse {
                    path: name.to_string(),
                    line,
                    msg: format!("expected {width} fields, got {}", cells.len()),
                });
            }
            rows.push((line, cells));
        }
        let _ = hline;
        Ok(Self { columns, rows })
    }

    fn rows(&self) -> impl Iterator<Item = (usize, &Vec<&'a str>)> {
        self.rows.iter().map(|(l, r)| (*l, r))
    }

    /// Cell by column name; a missing column reads as an empty cell.
    fn cell(&self, row: &[&'a str], col: &str) -> &'a str {
        self.columns.get(col).map_or("", |&i| row[i])
    }
}

/// Series that `plotdata` can extract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    LoadP,
    LoadQ,
    LossP,
    LossQ,
    ClassContribution,
}

impl std::str::FromStr for PlotKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "load_p" => Ok(Self::LoadP),
            "load_q" => Ok(Self::LoadQ),
            "loss_p" => Ok(Self::LossP),
            "loss_q" => Ok(Self::LossQ),
            "class_contribution" => Ok(Self::ClassContribution),
            _ => Err(Error::Config(format!(
                "unknown plot kind '{s}' (expected load_p, load_q, loss_p, loss_q or class_contribution)"
            ))),
        }
    }
}

/// Comma-delimited `period,bdr,adr` columns. Class contributions come as
/// one block per class, each introduced by a `# class <name>` line.
pub fn plot_data(report: &RunReport, kind: PlotKind) -> String {
    let mut s = String::from("period,bdr,adr\n");
    let series = |f: fn(&PeriodRow) -> Pair| -> Vec<Pair> { report.periods.iter().map(f).collect() };
    let block = |s: &mut String, v: &[Pair]| {
        for (t, p) in v.iter().enumerate() {
            let _ = writeln!(s, "{},{}", t + 1, pair(*p));
        }
    };
    match kind {
        PlotKind::LoadP => block(&mut s, &series(|r| r.load_p)),
        PlotKind::LoadQ => block(&mut s, &series(|r| r.load_q)),
        PlotKind::LossP => block(&mut s, &series(|r| r.loss_p)),
        PlotKind::LossQ => block(&mut s, &series(|r| r.loss_q)),
        PlotKind::ClassContribution => {
            for c in &report.classes {
                let _ = writeln!(s, "# class {}", c.name);
                block(&mut s, &c.load);
            }
        }
    }
    s
}

pub fn emit_plot_data(report: &RunReport, kind: PlotKind, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, plot_data(report, kind)).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}
