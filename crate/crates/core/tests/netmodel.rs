use std::path::PathBuf;

use drpe_core::netmodel::*;
use drpe_core::Error;
use proptest::prelude::*;

fn ieee33() -> Network {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../cases/ieee33/network.csv");
    parse_network(p).unwrap()
}

fn class_specs(spec: &[(&str, &str)]) -> Vec<ClassSpec> {
    spec.iter()
        .map(|(n, b)| ClassSpec {
            name: n.to_string(),
            buses: parse_bus_ranges(b).unwrap(),
        })
        .collect()
}

const CLASSES: [(&str, &str); 5] = [
    ("R", "2-10"),
    ("C", "11-18"),
    ("LI", "19-25"),
    ("MI", "26-28"),
    ("A", "29-33"),
];

#[test]
fn ieee33_totals() {
    let net = ieee33();
    assert_eq!(net.n_buses(), 33);
    assert_eq!(net.lines.len(), 32);
    let (p, q) = net.total_load();
    assert!((p - 3715.0).abs() < 1e-9);
    assert!((q - 2300.0).abs() < 1e-9);
}

#[test]
fn class_demands() {
    let net = assign_classes(&ieee33(), &class_specs(&CLASSES)).unwrap();
    for (name, kw) in [("R", 950.0), ("LI", 1290.0), ("MI", 180.0), ("C", 555.0), ("A", 740.0)] {
        assert!((net.class_load(name) - kw).abs() < 1e-9, "{name}");
    }
    assert!(net.buses.iter().skip(1).all(|b| b.class.is_some()));
}

#[test]
fn empty_mapping_leaves_no_flexible_demand() {
    let net = assign_classes(&ieee33(), &[]).unwrap();
    assert!(net.buses.iter().all(|b| b.class.is_none()));
    let profile = LoadProfileSet::flat(2);
    let fr = sample_flexibility(&profile, 33, 3).unwrap();
    let loads = build_loads(&net, &profile, &fr).unwrap();
    assert!(loads.iter().all(|l| l.flex_p.iter().all(|&x| x == 0.0)));
}

#[test]
fn unknown_or_overlapping_buses_are_rejected() {
    let net = ieee33();
    let bad = class_specs(&[("R", "2-10"), ("X", "99")]);
    assert!(matches!(assign_classes(&net, &bad), Err(Error::Config(_))));
    let overlap = class_specs(&[("R", "2-10"), ("C", "10-12")]);
    assert!(matches!(assign_classes(&net, &overlap), Err(Error::Config(_))));
}

/// Mean of N(μ, σ) truncated to [a, b] by composite Simpson integration.
fn truncated_mean(mu: f64, sigma: f64, a: f64, b: f64) -> f64 {
    let pdf = |x: f64| (-0.5 * ((x - mu) / sigma).powi(2)).exp();
    let n = 20_000;
    let h = (b - a) / n as f64;
    let (mut m0, mut m1) = (0.0, 0.0);
    for i in 0..=n {
        let x = a + h * i as f64;
        let w = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        m0 += w * pdf(x);
        m1 += w * x * pdf(x);
    }
    m1 / m0
}

#[test]
fn flexibility_mean_matches_integration() {
    let mut profile = LoadProfileSet::flat(100);
    profile.flex = FlexDistribution {
        mu: 0.15,
        sigma: 0.05,
        min: 0.0,
        max: 0.30,
    };
    let f = sample_flexibility(&profile, 1000, 2024).unwrap();
    let all: Vec<f64> = f.into_iter().flatten().collect();
    assert_eq!(all.len(), 100_000);
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let oracle = truncated_mean(0.15, 0.05, 0.0, 0.30);
    assert!((mean - oracle).abs() < 0.005, "{mean} vs {oracle}");
    assert!(all.iter().all(|&x| (0.0..=0.30).contains(&x)));

    // A skewed law, where truncation moves the mean.
    profile.flex = FlexDistribution {
        mu: 0.05,
        sigma: 0.1,
        min: 0.0,
        max: 0.30,
    };
    let f = sample_flexibility(&profile, 1000, 5).unwrap();
    let mean = f.iter().flatten().sum::<f64>() / 100_000.0;
    let oracle = truncated_mean(0.05, 0.1, 0.0, 0.30);
    assert!((mean - oracle).abs() < 0.005, "{mean} vs {oracle}");
}

#[test]
fn sampling_is_deterministic() {
    let profile = LoadProfileSet::flat(24);
    let a = sample_flexibility(&profile, 33, 11).unwrap();
    let b = sample_flexibility(&profile, 33, 11).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, sample_flexibility(&profile, 33, 12).unwrap());
}

#[test]
fn flex_bounds_above_limit_are_rejected() {
    let mut profile = LoadProfileSet::flat(2);
    profile.flex.max = 0.4;
    assert!(matches!(sample_flexibility(&profile, 2, 1), Err(Error::Parameter(_))));
}

proptest! {
    #[test]
    fn loads_split_into_flexible_and_rest(seed in 0u64..1000, t in 0usize..24) {
        let net = assign_classes(&ieee33(), &class_specs(&CLASSES)).unwrap();
        let profile = LoadProfileSet::flat(24);
        let fr = sample_flexibility(&profile, 33, seed).unwrap();
        let loads = build_loads(&net, &profile, &fr).unwrap();
        let l = &loads[t];
        for i in 0..33 {
            prop_assert_eq!(l.inflexible_p(i) + l.flex_p[i], l.p[i]);
            prop_assert_eq!(l.inflexible_q(i) + l.flex_q[i], l.q[i]);
            prop_assert!(l.flex_p[i] <= 0.30 * l.p[i] + 1e-12);
        }
    }

    #[test]
    fn curtailment_keeps_power_factor(share in 0.0f64..1.0, seed in 0u64..100) {
        let net = assign_classes(&ieee33(), &class_specs(&CLASSES)).unwrap();
        let profile = LoadProfileSet::flat(1);
        let fr = sample_flexibility(&profile, 33, seed).unwrap();
        let l = &build_loads(&net, &profile, &fr).unwrap()[0];
        let c: Vec<f64> = l.flex_p.iter().map(|f| share * f).collect();
        let after = l.curtailed(&c);
        for i in 1..33 {
            let before = l.p[i] / l.q[i];
            let now = after.p[i] / after.q[i];
            prop_assert!((before - now).abs() <= 1e-9 * before.abs());
        }
    }

    #[test]
    fn per_unit_round_trip(kw in 0.0f64..1e6, mva in 0.1f64..100.0) {
        let net = parse_network_str(
            "bus,from,to,r_ohm,x_ohm,p_kw,q_kvar,vmin_pu,vmax_pu,smax_kva\n1,,,,,0,0,1,1,\n2,1,2,0.1,0.1,1,1,,,\n",
            "rt",
            &NetworkOptions { base_mva: mva, ..Default::default() },
        ).unwrap();
        let back = net.from_pu(net.to_pu(kw));
        prop_assert!((back - kw).abs() <= 1e-9 * kw.max(1.0));
    }

    #[test]
    fn quantile_stays_in_bounds(u in 0.0f64..1.0, mu in -0.5f64..0.8, sigma in 0.001f64..1.0, a in 0.0f64..0.3, w in 0.0f64..0.3) {
        let b = (a + w).min(0.30);
        let d = FlexDistribution { mu, sigma, min: a, max: b };
        let x = d.quantile(u);
        prop_assert!(x >= a && x <= b);
    }
}
