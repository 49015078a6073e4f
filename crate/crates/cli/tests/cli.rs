use std::path::{Path, PathBuf};
use std::process::Command;

use drpe_cli::{plot_data, run_case, sweep_weights, CaseConfig, PlotKind, RunReport};

fn case_dir(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../cases").join(name)
}

fn load(name: &str) -> CaseConfig {
    CaseConfig::load(case_dir(name).join("case.toml")).unwrap()
}

/// The case file with `edit` applied to its text.
fn edited(name: &str, edit: impl Fn(String) -> String) -> CaseConfig {
    let dir = case_dir(name);
    let text = std::fs::read_to_string(dir.join("case.toml")).unwrap();
    CaseConfig::from_toml(&edit(text), &dir).unwrap()
}

fn drpe(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_drpe")).args(args).output().unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn report_survives_a_text_roundtrip() {
    let report = run_case(&load("desk5")).unwrap();
    let text = report.render();
    let back = RunReport::parse(&text, "desk5").unwrap();
    assert_eq!(back.render(), text);
    assert_eq!(back.periods.len(), 3);
    assert_eq!(back.drps.len(), 2);
}

#[test]
fn runs_are_deterministic() {
    let cfg = load("desk5");
    assert_eq!(run_case(&cfg).unwrap().render(), run_case(&cfg).unwrap().render());
}

#[test]
fn cost_and_bill_accounting_adds_up() {
    let r = run_case(&load("desk5")).unwrap();
    for row in &r.periods {
        for c in [&row.lse_bdr, &row.lse_adr] {
            assert!((c.total - (c.purchase - c.revenue + c.payment)).abs() <= 1e-9 * c.purchase);
        }
        // Generation covers load plus losses.
        assert!((row.pg.adr - row.load_p.adr - row.loss_p.adr).abs() < 1e-6);
    }
    let bills = r.class_bill_total();
    assert!((bills.bdr - r.day.customer_bill.bdr).abs() < 1e-6);
    assert!((bills.adr - r.day.customer_bill.adr).abs() < 1e-6);
    // Retail revenue net of incentives is what customers pay.
    let net = r.day.revenue.adr - r.day.drp_payment.adr;
    assert!((net - r.day.customer_bill.adr).abs() < 1e-6 * net);
}

#[test]
fn zero_flexibility_leaves_the_day_unchanged() {
    let cfg = edited("desk5", |t| {
        t.replace("mu = 0.2", "mu = 0.0")
            .replace("min = 0.2", "min = 0.0")
            .replace("max = 0.2", "max = 0.0")
    });
    let r = run_case(&cfg).unwrap();
    for row in &r.periods {
        assert_eq!(row.load_p.adr, row.load_p.bdr);
        assert_eq!(row.loss_p.adr, row.loss_p.bdr);
        assert!((row.lse_adr.total - row.lse_bdr.total).abs() < 1e-9);
    }
    assert_eq!(r.day.dr_contribution_pct(), 0.0);
}

/// LSE cost of the two-bus case as a function of the incentive, computed
/// from the follower's closed-form response and a fixed-point voltage
/// solve of the single line.
fn two_bus_cost(rho: f64) -> (f64, f64) {
    let (flat, rtp, theta, gamma) = (3.0, 14.0, 0.3, 0.08);
    let (p_load, q_load, flex) = (500.0, 250.0, 100.0);
    // Equal weights: p = (flat + ρ − γ) / θ within [0, flexible load].
    let p = ((flat + rho - gamma) / theta).clamp(0.0, flex);
    let zb = 12.66f64 * 12.66;
    let (r, x) = (0.80 / zb, 0.60 / zb);
    let (pl, ql) = ((p_load - p) / 1000.0, (q_load - p * q_load / p_load) / 1000.0);
    let (mut vr, mut vi) = (1.0, 0.0);
    for _ in 0..200 {
        let d: f64 = vr * vr + vi * vi;
        let (ir, ii) = ((pl * vr + ql * vi) / d, (pl * vi - ql * vr) / d);
        vr = 1.0 - (r * ir - x * ii);
        vi = -(r * ii + x * ir);
    }
    let loss = (pl * pl + ql * ql) / (vr * vr + vi * vi) * r * 1000.0;
    (rtp * (p_load - p + loss) - flat * (p_load - p) + rho * p, p)
}

#[test]
fn two_bus_matches_hand_oracle() {
    let (lo, hi) = (3.0, 14.0);
    let (mut a, mut b) = (lo, hi);
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    while b - a > 1e-10 {
        let c = b - phi * (b - a);
        let d = a + phi * (b - a);
        if two_bus_cost(c).0 <= two_bus_cost(d).0 {
            b = d;
        } else {
            a = c;
        }
    }
    let rho = 0.5 * (a + b);
    let (cost, p) = two_bus_cost(rho);
    // Frozen from the oracle above.
    assert!((rho - 4.082049).abs() < 1e-5, "{rho}");

    let r = run_case(&load("two_bus")).unwrap();
    let e = &r.schedule[0][0];
    assert!((e.rho - rho).abs() < 1e-4, "{} vs {rho}", e.rho);
    assert!((e.p - p).abs() < 1e-3, "{} vs {p}", e.p);
    assert!((r.periods[0].lse_adr.total - cost).abs() < 1e-6 * cost);
    assert_eq!((e.rho_lo, e.rho_hi), (lo, hi));
}

#[test]
fn weight_sweep_has_eleven_points_and_sane_endpoints() {
    let pts = sweep_weights(&load("desk5"), 0.1).unwrap();
    assert_eq!(pts.len(), 11);
    assert_eq!(pts[0].w1, 0.0);
    assert_eq!(pts[0].discomfort, 0.0);
    assert!(pts[10].bill <= pts[0].bill);
    assert!(sweep_weights(&load("desk5"), 0.3).is_err());
}

#[test]
fn plot_series_cover_every_period() {
    let r = run_case(&load("desk5")).unwrap();
    let s = plot_data(&r, PlotKind::LoadP);
    assert_eq!(s.lines().count(), 4);
    assert!(s.starts_with("period,bdr,adr\n"));
    let s = plot_data(&r, PlotKind::ClassContribution);
    assert_eq!(s.matches("# class ").count(), 2);
}

#[test]
fn cli_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let report = tmp.path().join("r.txt");
    let cfg = case_dir("desk5").join("case.toml");
    let out = drpe(&["run", path_str(&cfg), "--out", path_str(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let plot = tmp.path().join("p.csv");
    let out = drpe(&[
        "plotdata",
        path_str(&report),
        "--kind",
        "loss_p",
        "--out",
        path_str(&plot),
    ]);
    assert!(out.status.success());
    assert!(std::fs::read_to_string(&plot).unwrap().starts_with("period,bdr,adr"));

    let out = drpe(&[
        "plotdata",
        path_str(&report),
        "--kind",
        "voltage",
        "--out",
        path_str(&plot),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "network = \"n.csv\"\nrtp = \"r.csv\"\nunknown_key = 1\n").unwrap();
    assert_eq!(drpe(&["run", path_str(&bad)]).status.code(), Some(2));

    // Malformed network data is an input error.
    std::fs::write(tmp.path().join("n.csv"), "bus,from\n1,2,3\n").unwrap();
    std::fs::write(tmp.path().join("r.csv"), "hour,price\n1,3.0\n").unwrap();
    let broken = tmp.path().join("broken.toml");
    std::fs::write(
        &broken,
        "network = \"n.csv\"\nrtp = \"r.csv\"\npeak_windows = [\"1\"]\n",
    )
    .unwrap();
    assert_eq!(drpe(&["run", path_str(&broken)]).status.code(), Some(3));

    let out = drpe(&["sweep", path_str(&cfg)]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 12);
    assert!(text.starts_with("w1,w2,customer_bill,discomfort_cost"));

    assert_eq!(drpe(&["pf", path_str(&cfg), "--period", "2"]).status.code(), Some(0));
    assert_eq!(drpe(&["pf", path_str(&cfg), "--period", "9"]).status.code(), Some(2));
}

#[test]
fn raw_cap_basis_lifts_discounted_class_ceiling() {
    let scaled = run_case(&load("desk5")).unwrap();
    let raw = run_case(&edited("desk5", |t| {
        t.replace("seed = 1", "seed = 1\nincentive_cap = \"raw\"")
    }))
    .unwrap();
    // Y pays half the flat rate; its ceiling is half the price unless raw.
    assert_eq!(scaled.schedule[2][1].rho_hi, 7.0);
    assert_eq!(raw.schedule[2][1].rho_hi, 14.0);
    assert_eq!(raw.schedule[2][0].rho_hi, scaled.schedule[2][0].rho_hi);
}
