use std::collections::VecDeque;
use std::path::PathBuf;

use drpe_core::netmodel::{parse_network, parse_network_str, Network, NetworkOptions, PeriodLoads};
use drpe_core::powerflow::*;
use drpe_core::Error;
use nalgebra::Complex;

fn ieee33() -> Network {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../cases/ieee33/network.csv");
    parse_network(p).unwrap()
}

fn nominal_loads(net: &Network) -> PeriodLoads {
    let mut l = PeriodLoads::zeros(net.n_buses());
    for (i, b) in net.buses.iter().enumerate() {
        l.p[i] = b.p_kw;
        l.q[i] = b.q_kvar;
    }
    l
}

/// Two buses joined by a 0.05 + j0.1 pu line, with a load of `kw` + j`kvar`.
fn two_bus(kw: f64, kvar: f64) -> (Network, PeriodLoads) {
    let zb = 12.66f64 * 12.66;
    let text = format!(
        "bus,from,to,r_ohm,x_ohm,p_kw,q_kvar,vmin_pu,vmax_pu,smax_kva\n1,,,,,0,0,1.0,1.0,\n2,1,2,{},{},{kw},{kvar},0.5,1.1,\n",
        0.05 * zb,
        0.1 * zb
    );
    let net = parse_network_str(&text, "two", &NetworkOptions::default()).unwrap();
    let loads = nominal_loads(&net);
    (net, loads)
}

/// Backward/forward sweep on a radial feeder: bus voltages in pu.
fn sweep_oracle(net: &Network, loads: &PeriodLoads) -> Vec<Complex<f64>> {
    let n = net.n_buses();
    let idx = net.line_indices();
    let mut children = vec![Vec::new(); n];
    let mut parent = vec![None; n];
    let mut order = Vec::new();
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([net.slack]);
    seen[net.slack] = true;
    while let Some(u) = queue.pop_front() {
        order.push(u);
        for (l, &(i, j)) in idx.iter().enumerate() {
            let w = if i == u {
                j
            } else if j == u {
                i
            } else {
                continue;
            };
            if !seen[w] {
                seen[w] = true;
                parent[w] = Some((u, l));
                children[u].push(w);
                queue.push_back(w);
            }
        }
    }
    let s: Vec<Complex<f64>> = (0..n)
        .map(|i| Complex::new(loads.p[i], loads.q[i]) / net.base_kva())
        .collect();
    let mut v = vec![Complex::new(net.slack_voltage, 0.0); n];
    for _ in 0..500 {
        let mut cur: Vec<Complex<f64>> = (0..n).map(|i| (s[i] / v[i]).conj()).collect();
        for &u in order.iter().rev() {
            for &c in &children[u] {
                let add = cur[c];
                cur[u] += add;
            }
        }
        let mut delta: f64 = 0.0;
        for &u in &order {
            if let Some((p, l)) = parent[u] {
                let z = Complex::new(net.lines[l].r_pu, net.lines[l].x_pu);
                let nv = v[p] - z * cur[u];
                delta = delta.max((nv - v[u]).norm());
                v[u] = nv;
            }
        }
        if delta < 1e-14 {
            break;
        }
    }
    v
}

#[test]
fn zero_load_is_flat() {
    let (net, loads) = two_bus(0.0, 0.0);
    let sol = solve_pf(&net, &loads, &[0.0, 0.0]).unwrap();
    assert_eq!(sol.voltage.e, vec![1.0, 1.0]);
    assert_eq!(sol.voltage.f, vec![0.0, 0.0]);
    assert_eq!(losses(&sol), (0.0, 0.0));
    assert!(check_limits(&net, &sol).is_empty());

    let net = ieee33();
    let sol = solve_pf(&net, &PeriodLoads::zeros(33), &[0.0; 33]).unwrap();
    assert!(sol.voltage.e.iter().all(|&e| e == 1.0));
    assert!(sol.voltage.f.iter().all(|&f| f == 0.0));
}

#[test]
fn two_bus_matches_gauss_seidel() {
    let (net, loads) = two_bus(1000.0, 500.0);
    let sol = solve_pf(&net, &loads, &[0.0, 0.0]).unwrap();
    // V2 = V1 − z·conj(S/V2), iterated to a fixed point.
    let z = Complex::new(0.05, 0.1);
    let s = Complex::new(1.0, 0.5);
    let mut v2 = Complex::new(1.0, 0.0);
    for _ in 0..500 {
        v2 = Complex::new(1.0, 0.0) - z * (s / v2).conj();
    }
    assert!((sol.voltage.magnitude(1) - v2.norm()).abs() < 1e-6);
    let i = (s / v2).conj();
    let loss_kw = i.norm_sqr() * 0.05 * 1000.0;
    assert!((sol.p_loss - loss_kw).abs() < 1e-6 * 1000.0);
    assert!((branch_losses(&net, &sol).0 - loss_kw).abs() < 1e-6 * 1000.0);
}

#[test]
fn ieee33_nominal_flow() {
    let net = ieee33();
    let loads = nominal_loads(&net);
    let sol = solve_pf(&net, &loads, &[0.0; 33]).unwrap();
    assert!(sol.residual_norm <= 1e-8);
    // Energy balance and the two loss computations.
    assert!((sol.p_gen - (3715.0 + sol.p_loss)).abs() <= 1e-6 * sol.p_gen);
    let (bp, bq) = branch_losses(&net, &sol);
    assert!((bp - sol.p_loss).abs() <= 1e-8 * sol.p_loss);
    assert!((bq - sol.q_loss).abs() <= 1e-8 * sol.q_loss);
    // Independent radial sweep.
    let v = sweep_oracle(&net, &loads);
    for i in 0..33 {
        assert!((sol.voltage.magnitude(i) - v[i].norm()).abs() < 1e-8, "bus {}", i + 1);
    }
    // Widely published figures for this feeder.
    assert!((sol.p_loss - 202.67).abs() < 0.05, "{}", sol.p_loss);
    let vmin = (0..33).map(|i| sol.voltage.magnitude(i)).fold(f64::INFINITY, f64::min);
    assert!((vmin - 0.9131).abs() < 1e-4, "{vmin}");
}

#[test]
fn converged_point_is_a_newton_fixed_point() {
    let net = ieee33();
    let loads = nominal_loads(&net);
    let sol = solve_pf(&net, &loads, &[0.0; 33]).unwrap();
    let forms = NetworkForms::new(&net, FlowMeasure::SendingEnd);
    let mut v = sol.voltage.stacked();
    let p: Vec<f64> = loads.p.iter().map(|x| net.to_pu(*x)).collect();
    let q: Vec<f64> = loads.q.iter().map(|x| net.to_pu(*x)).collect();
    let step = newton_step(&net, &forms, &mut v, &p, &q).unwrap();
    assert!(step < 1e-10, "{step}");
}

#[test]
fn mismatch_jacobian_matches_finite_differences() {
    let net = ieee33();
    let loads = nominal_loads(&net);
    let sol = solve_pf(&net, &loads, &[0.0; 33]).unwrap();
    let forms = NetworkForms::new(&net, FlowMeasure::SendingEnd);
    let mut v = sol.voltage.stacked();
    for (k, x) in v.iter_mut().enumerate() {
        if k % 33 != net.slack {
            *x += 0.01 * ((k * 37 % 11) as f64 / 11.0 - 0.5);
        }
    }
    let jac = mismatch_jacobian(&net, &forms, &v);
    let pq: Vec<usize> = (0..33).filter(|&i| i != net.slack).collect();
    let m = pq.len();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (c, &b) in pq.iter().enumerate() {
        for (col, idx) in [(c, b), (m + c, 33 + b)] {
            let mut vp = v.clone();
            let mut vm = v.clone();
            vp[idx] += h;
            vm[idx] -= h;
            for (r, &k) in pq.iter().enumerate() {
                let dp = (forms.p_inj[k].eval(&vp) - forms.p_inj[k].eval(&vm)) / (2.0 * h);
                let dq = (forms.q_inj[k].eval(&vp) - forms.q_inj[k].eval(&vm)) / (2.0 * h);
                let scale = |a: f64| a.abs().max(1.0);
                worst = worst.max((jac[(r, col)] - dp).abs() / scale(dp));
                worst = worst.max((jac[(m + r, col)] - dq).abs() / scale(dq));
            }
        }
    }
    assert!(worst <= 1e-5, "{worst}");
}

#[test]
fn curtailment_equals_reduced_load() {
    let net = ieee33();
    let loads = nominal_loads(&net);
    let curt: Vec<f64> = (0..33).map(|i| 0.2 * loads.p[i]).collect();
    let a = solve_pf(&net, &loads, &curt).unwrap();
    let b = solve_pf(&net, &loads.curtailed(&curt), &[0.0; 33]).unwrap();
    for i in 0..33 {
        assert!((a.voltage.e[i] - b.voltage.e[i]).abs() < 1e-10);
        assert!((a.voltage.f[i] - b.voltage.f[i]).abs() < 1e-10);
    }
    // Less load, less loss.
    let full = solve_pf(&net, &loads, &[0.0; 33]).unwrap();
    assert!(a.p_loss < full.p_loss);
}

#[test]
fn limit_violations_report_margins() {
    let (net, loads) = two_bus(0.0, 0.0);
    let mut net = net;
    net.buses[1].v_min = 0.95;
    net.lines[0].flow_limit = 1.0;
    let mut sol = solve_pf(&net, &loads, &[0.0, 0.0]).unwrap();
    sol.voltage.e[1] = 0.8f64.sqrt();
    sol.line_flows[0] = 1.2;
    let v = check_limits(&net, &sol);
    assert_eq!(v.len(), 2, "{v:?}");
    assert_eq!(v[0].kind, LimitKind::VoltageLow { bus: 2 });
    assert!((v[0].margin - (0.80 - 0.9025)).abs() < 1e-12);
    assert_eq!(v[1].kind, LimitKind::Flow { line: 0 });
}

#[test]
fn impossible_load_does_not_converge() {
    let (net, loads) = two_bus(50_000.0, 20_000.0);
    let err = solve_pf(&net, &loads, &[0.0, 0.0]).unwrap_err();
    assert!(
        matches!(err, Error::NonConvergence { .. } | Error::Numerical(_)),
        "{err}"
    );
}
