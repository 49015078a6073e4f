use std::collections::BTreeMap;

use approx::assert_abs_diff_eq;
use drpe_core::tariff::{class_rate, flat_rate_from_rtp, BoundMode, TariffSchedule};
use proptest::prelude::*;

fn kappas() -> BTreeMap<String, f64> {
    [("R", -0.2), ("LI", 0.0), ("MI", 0.2), ("C", 1.0), ("A", -0.5)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}

const CLASSES: [&str; 5] = ["R", "LI", "MI", "C", "A"];

#[test]
fn pinned_flat_rate_scales_by_class() {
    let s = TariffSchedule::new(vec![4.0; 24], Some(5.64), kappas()).unwrap();
    let want = [4.512, 5.64, 6.768, 11.28, 2.82];
    for (c, w) in CLASSES.iter().zip(want) {
        assert_abs_diff_eq!(s.class_flat(Some(c)), w, epsilon = 1e-12);
        // RTP below every class floor: the interval is a single point.
        let (lo, hi) = s.incentive_bounds(Some(c), 3);
        assert_eq!(lo, hi);
    }
    assert_eq!(s.class_flat(None), 5.64);
    assert_eq!(s.class_flat(Some("unknown")), 5.64);
}

#[test]
fn highest_price_hour_gives_the_widest_interval() {
    let rtp = vec![3.1, 3.0, 4.2, 6.5, 9.8, 7.7, 5.0, 4.4];
    let peak = 4;
    let s = TariffSchedule::new(rtp.clone(), None, kappas()).unwrap();
    for c in CLASSES {
        let widths: Vec<f64> = (0..rtp.len())
            .map(|t| {
                let (lo, hi) = s.incentive_bounds(Some(c), t);
                hi - lo
            })
            .collect();
        let widest = widths.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(widths[peak], widest, "class {c}");
        assert!(widest > 0.0);
    }
}

#[test]
fn bound_modes() {
    let rtp = vec![3.0, 9.0];
    let mut s = TariffSchedule::new(rtp, Some(5.0), kappas()).unwrap();
    s.mode = BoundMode::UpperOnly;
    assert_eq!(s.incentive_bounds(Some("LI"), 0), (0.0, 5.0));
    assert_eq!(s.incentive_bounds(Some("LI"), 1), (0.0, 9.0));
    s.mode = BoundMode::Unconstrained;
    assert_eq!(s.incentive_bounds(Some("LI"), 0), (0.0, 18.0));
    assert_eq!("upper_only".parse::<BoundMode>().unwrap(), BoundMode::UpperOnly);
    assert!("tou".parse::<BoundMode>().is_err());
}

#[test]
fn nonpositive_class_factor_is_rejected() {
    let mut k = kappas();
    k.insert("X".into(), -1.0);
    assert!(TariffSchedule::new(vec![4.0], None, k).is_err());
    assert!(TariffSchedule::new(vec![4.0, -1.0], None, kappas()).is_err());
}

proptest! {
    #[test]
    fn floor_is_the_class_flat_rate(
        rtp in prop::collection::vec(0.5f64..20.0, 1..30),
        kappa in -0.9f64..2.0,
        t_frac in 0.0f64..1.0,
    ) {
        let k: BTreeMap<String, f64> = [("X".to_string(), kappa)].into_iter().collect();
        let s = TariffSchedule::new(rtp.clone(), None, k).unwrap();
        let t = ((rtp.len() - 1) as f64 * t_frac).round() as usize;
        let (lo, hi) = s.incentive_bounds(Some("X"), t);
        prop_assert!(lo >= s.class_flat(Some("X")));
        prop_assert!(hi >= lo);
        prop_assert!((hi - lo.max(rtp[t] * (1.0 + kappa))).abs() <= 1e-12 * hi);
    }

    #[test]
    fn class_rate_is_linear_and_monotone(
        base in 0.1f64..50.0,
        scale in 0.1f64..10.0,
        k1 in -0.9f64..2.0,
        k2 in -0.9f64..2.0,
    ) {
        let a = class_rate(base, k1).unwrap();
        let b = class_rate(scale * base, k1).unwrap();
        prop_assert!((b - scale * a).abs() <= 1e-12 * b.abs().max(1.0));
        let c = class_rate(base, k2).unwrap();
        prop_assert_eq!(k1 < k2, a < c);
    }

    #[test]
    fn class_flat_ratios_follow_factors(
        rtp in prop::collection::vec(0.5f64..20.0, 1..30),
    ) {
        let s = TariffSchedule::new(rtp.clone(), None, kappas()).unwrap();
        let fr = flat_rate_from_rtp(&rtp).unwrap();
        prop_assert!((s.flat_rate - fr).abs() <= 1e-12 * fr);
        let k = kappas();
        for a in CLASSES {
            for b in CLASSES {
                let lhs = s.class_flat(Some(a)) / s.class_flat(Some(b));
                let rhs = (1.0 + k[a]) / (1.0 + k[b]);
                prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs);
            }
        }
    }
}
