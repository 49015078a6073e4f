use drpe_core::follower::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn drp(id: &str, theta: f64, p_hi: f64, w1: f64) -> Follower {
    Follower {
        id: id.into(),
        w1,
        w2: 1.0 - w1,
        theta,
        gamma: 0.1,
        alpha: 1.0,
        chi: 1.0,
        p_lo: 0.0,
        p_hi,
        p_base: p_hi,
        flat_rate: 5.64,
        incentive_lo: 5.64,
        incentive_hi: 9.0,
    }
}

/// Each DRP's objective depends only on its own curtailment, so the
/// equilibrium with a shared cap minimizes the summed objectives over the
/// shared feasible set. Enumerate that set on a 0.01 kW lattice.
fn lattice_equilibrium(rho: &[f64], fs: &[Follower], p_max: f64) -> Vec<f64> {
    let step = 0.01;
    let tables: Vec<Vec<f64>> = fs
        .iter()
        .zip(rho)
        .map(|(f, &r)| {
            let k = (f.p_hi / step).round() as usize;
            (0..=k).map(|i| drp_objective(i as f64 * step, r, f)).collect()
        })
        .collect();
    let mut best = (f64::INFINITY, vec![0usize; 3]);
    for (i, a) in tables[0].iter().enumerate() {
        for (j, b) in tables[1].iter().enumerate() {
            let used = (i + j) as f64 * step;
            if used > p_max + 1e-12 {
                break;
            }
            let room = ((p_max - used) / step + 1e-9).floor() as usize;
            for (k, c) in tables[2].iter().enumerate().take(room + 1) {
                let v = a + b + c;
                if v < best.0 {
                    best = (v, vec![i, j, k]);
                }
            }
        }
    }
    best.1.iter().map(|&i| i as f64 * step).collect()
}

#[test]
fn three_drps_match_lattice_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..6 {
        let fs: Vec<Follower> = (0..3)
            .map(|d| drp(&format!("d{d}"), rng.gen_range(4.0..10.0), rng.gen_range(1.0..3.0), 0.5))
            .collect();
        let rho: Vec<f64> = (0..3).map(|_| rng.gen_range(5.64..9.0)).collect();
        let free: f64 = fs
            .iter()
            .zip(&rho)
            .map(|(f, &r)| {
                let s = f.stationarity(ResponseMode::Optimal);
                (s.drive(r) / s.a).clamp(f.p_lo, f.p_hi)
            })
            .sum();
        // Half the cases bind the cap.
        let p_max = if case % 2 == 0 { 0.7 * free } else { 2.0 * free };
        let sol = solve_ve(&rho, &fs, p_max, ResponseMode::Optimal).unwrap();
        let oracle = lattice_equilibrium(&rho, &fs, p_max);
        for (a, b) in sol.p.iter().zip(&oracle) {
            assert!((a - b).abs() <= 0.02, "case {case}: {:?} vs {oracle:?}", sol.p);
        }
        assert!(sol.kkt_residual <= 1e-9);
    }
}

#[test]
fn gse_margin_is_bounded_by_best_response() {
    let fs = vec![drp("a", 0.2, 60.0, 0.5), drp("b", 0.3, 60.0, 0.5)];
    let rho = [6.0, 6.5];
    let sol = solve_ve(&rho, &fs, 1e6, ResponseMode::Optimal).unwrap();
    let mut bad = sol.p.clone();
    bad[0] += 1.0;
    let rep = check_gse(&rho, &bad, &fs, 1e6, ResponseMode::Optimal, None, 4000, 9).unwrap();
    // Best deviation for DRP a by a dense scan of its box.
    let f = &fs[0];
    let base = drp_objective(bad[0], rho[0], f);
    let best = (0..=60_000)
        .map(|k| drp_objective(k as f64 * 0.001, rho[0], f))
        .fold(f64::INFINITY, f64::min);
    let scale = base.abs().max(f.w1 * f.p_base * f.flat_rate).max(1.0);
    let oracle = (base - best) / scale;
    assert!(rep.follower_improvement <= oracle + 1e-12);
    assert!(
        rep.follower_improvement >= 0.9 * oracle,
        "{} vs {oracle}",
        rep.follower_improvement
    );
    assert_eq!(rep.worst.as_deref(), Some("follower a"));
}

#[test]
fn weighted_sum_endpoints() {
    let fs = vec![drp("a", 0.05, 40.0, 1e-9), drp("b", 0.08, 30.0, 1e-9)];
    let sol = solve_ve(&[7.0, 7.0], &fs, 1e6, ResponseMode::Optimal).unwrap();
    assert!(sol.p.iter().all(|&p| p == 0.0), "{:?}", sol.p);
    let fs = vec![drp("a", 0.05, 40.0, 1.0), drp("b", 0.08, 30.0, 1.0)];
    let sol = solve_ve(&[7.0, 7.0], &fs, 1e6, ResponseMode::Optimal).unwrap();
    assert_eq!(sol.p, vec![40.0, 30.0]);
}

#[test]
fn linear_mode_follows_response_curve() {
    let fs = vec![drp("a", 0.05, 40.0, 0.5), drp("b", 0.08, 30.0, 0.5)];
    let rho = [7.0, 8.2];
    let sol = solve_ve(&rho, &fs, 1e6, ResponseMode::Linear).unwrap();
    for (f, (&p, &r)) in fs.iter().zip(sol.p.iter().zip(&rho)) {
        assert!((p - induced_demand(r, f)).abs() < 1e-9);
    }
}

fn random_game() -> impl Strategy<Value = (Vec<Follower>, Vec<f64>, f64)> {
    (2usize..5)
        .prop_flat_map(|n| {
            (
                prop::collection::vec((0.01f64..1.0, 5.0f64..80.0, 0.1f64..0.9), n),
                prop::collection::vec(5.64f64..9.0, n),
                0.05f64..1.5,
            )
        })
        .prop_map(|(params, rho, frac)| {
            let fs: Vec<Follower> = params
                .iter()
                .enumerate()
                .map(|(i, &(t, hi, w1))| drp(&format!("d{i}"), t, hi, w1))
                .collect();
            let p_max = frac * fs.iter().map(|f| f.p_hi).sum::<f64>();
            (fs, rho, p_max)
        })
}

proptest! {
    #[test]
    fn common_multiplier_and_slackness((fs, rho, p_max) in random_game()) {
        let sol = solve_ve(&rho, &fs, p_max, ResponseMode::Optimal).unwrap();
        prop_assert!(sol.kkt_residual <= 1e-9);
        let slack = p_max - sol.p.iter().sum::<f64>();
        prop_assert!((sol.lambda * slack).abs() <= 1e-9 * (1.0 + p_max));
        for d in 0..fs.len() {
            let (lo, hi) = coupling_multiplier_range(d, &sol.p, &rho, &fs, p_max, ResponseMode::Optimal, 1e-9);
            prop_assert!(sol.lambda >= lo - 1e-9 && sol.lambda <= hi + 1e-9, "d {} λ {} not in [{}, {}]", d, sol.lambda, lo, hi);
        }
    }

    #[test]
    fn multiplier_start_does_not_matter((fs, rho, p_max) in random_game(), start in 0.0f64..50.0) {
        let a = solve_ve(&rho, &fs, p_max, ResponseMode::Optimal).unwrap();
        let b = solve_ve_from(&rho, &fs, p_max, ResponseMode::Optimal, start).unwrap();
        prop_assert!(check_uniqueness(&fs, ResponseMode::Optimal).positive_definite);
        for (x, y) in a.p.iter().zip(&b.p) {
            prop_assert!((x - y).abs() <= 1e-8);
        }
    }

    #[test]
    fn response_grows_with_own_offer((fs, rho, _p) in random_game(), d in 0usize..2, bump in 0.0f64..2.0) {
        let a = solve_ve(&rho, &fs, 1e9, ResponseMode::Optimal).unwrap();
        let mut up = rho.clone();
        up[d] += bump;
        let b = solve_ve(&up, &fs, 1e9, ResponseMode::Optimal).unwrap();
        prop_assert!(b.p[d] >= a.p[d] - 1e-12);
    }

    #[test]
    fn relabeling_permutes_the_solution((fs, rho, p_max) in random_game()) {
        let a = solve_ve(&rho, &fs, p_max, ResponseMode::Optimal).unwrap();
        let fr: Vec<Follower> = fs.iter().rev().cloned().collect();
        let rr: Vec<f64> = rho.iter().rev().copied().collect();
        let b = solve_ve(&rr, &fr, p_max, ResponseMode::Optimal).unwrap();
        for (x, y) in a.p.iter().zip(b.p.iter().rev()) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
        }
        prop_assert!((a.lambda - b.lambda).abs() <= 1e-9 * (1.0 + a.lambda));
    }

    #[test]
    fn disutility_is_convex(t in 0.001f64..5.0, g in 0.001f64..5.0, p1 in 0.0f64..100.0, p2 in 0.0f64..100.0) {
        let mid = disutility(0.5 * (p1 + p2), t, g);
        prop_assert!(mid <= 0.5 * (disutility(p1, t, g) + disutility(p2, t, g)) + 1e-9);
    }
}
