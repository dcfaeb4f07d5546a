use bpmm_core::changepoint::*;
use bpmm_core::lasso::fused_dp;
use bpmm_core::rng::stream_rng;
use bpmm_core::ClusterAssignment;
use ndarray::{Array2, Array3, ArrayView2};
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};

fn noise(t: usize, e: usize, sd: f64, seed: u64) -> Array2<f64> {
    let mut rng = stream_rng(seed, 0);
    Array2::from_shape_fn((t, e), |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        sd * z
    })
}

/// Best objective over fits with at most one breakpoint. For a fixed split
/// the two levels are the segment means with their difference soft-shrunk
/// in norm: with harmonic size `h = n1 n2 / n` and difference of means `d`,
/// the optimal level gap is `d · max(0, 1 − c / (2 h ‖d‖))`, `c = λ/E`.
fn one_break_oracle(y: ArrayView2<'_, f64>, lambda: f64) -> f64 {
    let (t, e) = y.dim();
    let c = lambda / e as f64;
    let mean = |a: usize, b: usize| -> Vec<f64> {
        (0..e).map(|k| (a..b).map(|s| y[[s, k]]).sum::<f64>() / (b - a) as f64).collect()
    };
    let sse = |a: usize, b: usize, m: &[f64]| -> f64 {
        (a..b).map(|s| (0..e).map(|k| (y[[s, k]] - m[k]).powi(2)).sum::<f64>()).sum()
    };
    let all = mean(0, t);
    let mut best = sse(0, t, &all);
    for tau in 1..t {
        let (m1, m2) = (mean(0, tau), mean(tau, t));
        let (n1, n2) = (tau as f64, (t - tau) as f64);
        let h = n1 * n2 / (n1 + n2);
        let d: Vec<f64> = m2.iter().zip(&m1).map(|(b, a)| b - a).collect();
        let dn = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        let shrink = if dn > 0.0 { (1.0 - c / (2.0 * h * dn)).max(0.0) } else { 0.0 };
        let gap = dn * shrink;
        let obj = sse(0, tau, &m1) + sse(tau, t, &m2) + h * (dn - gap).powi(2) + c * gap;
        best = best.min(obj);
    }
    best
}

#[test]
fn matches_single_breakpoint_oracle() {
    let mut compared = 0;
    for seed in 0..60 {
        let t = 6 + (seed as usize % 15);
        let e = 1 + (seed as usize % 3);
        let mut y = noise(t, e, 0.5, seed);
        for s in t / 2..t {
            for k in 0..e {
                y[[s, k]] += 1.5;
            }
        }
        let lambda = 4.0 + 2.0 * (seed % 5) as f64;
        let fit = tv_segment(y.view(), lambda);
        let oracle = one_break_oracle(y.view(), lambda);
        // the global optimum cannot be worse than the best restricted fit
        assert!(fit.objective <= oracle + 1e-6, "seed {seed}: {} > {oracle}", fit.objective);
        if fit.changepoints.len() <= 1 {
            assert!((fit.objective - oracle).abs() < 1e-6, "seed {seed}: {} vs {oracle}", fit.objective);
            compared += 1;
        }
    }
    assert!(compared >= 20, "only {compared} single-break fits");
}

#[test]
fn pure_noise_rarely_splits() {
    let quiet = (0..100)
        .filter(|&seed| {
            let y = noise(150, 10, 0.3, 1000 + seed);
            let sel = select_lambda_u(y.view(), &default_grid(y.view())).unwrap();
            sel.fit.changepoints.len() <= 1
        })
        .count();
    assert!(quiet >= 95, "{quiet} of 100");
}

#[test]
fn recovers_three_jumps() {
    for seed in 0..10 {
        let mut y = noise(150, 10, 0.3, 500 + seed);
        for (start, shift) in [(40, 1.0), (80, -1.0), (120, 1.0)] {
            for s in start..150 {
                for k in 0..10 {
                    y[[s, k]] += if k % 2 == 0 { shift } else { -shift };
                }
            }
        }
        let sel = select_lambda_u(y.view(), &default_grid(y.view())).unwrap();
        let cps = &sel.fit.changepoints;
        for truth in [40, 80, 120] {
            assert!(cps.iter().any(|c| c.abs_diff(truth) <= 2), "seed {seed}: {cps:?}");
        }
        // the lasso may leave a short staircase next to a sharp jump
        assert!(cps.len() <= 6, "seed {seed}: {cps:?}");
    }
}

#[test]
fn single_edge_matches_exact_scalar_solver() {
    for seed in 0..20 {
        let y = noise(40, 1, 1.0, 40 + seed);
        let lambda = 0.5 + seed as f64 * 0.3;
        let fit = tv_segment(y.view(), lambda);
        let col: Vec<f64> = y.column(0).to_vec();
        // Σ(y−u)² + λΣ|Δu| is twice ½Σ(y−u)² + (λ/2)Σ|Δu|
        let exact = fused_dp(&vec![1.0; 40], &col, lambda / 2.0);
        for (a, b) in fit.levels.column(0).iter().zip(&exact) {
            assert!((a - b).abs() < 1e-6, "seed {seed}: {a} vs {b}");
        }
    }
}

#[test]
fn single_edge_path_is_monotone() {
    for seed in 0..20 {
        let y = noise(80, 1, 1.0, 80 + seed);
        let sel = select_lambda_u(y.view(), &default_grid(y.view())).unwrap();
        assert!(sel.monotone, "{:?}", sel.path);
    }
}

#[test]
fn monotone_flag_reflects_path() {
    for seed in 0..10 {
        let y = noise(60, 5, 1.0, 200 + seed);
        let sel = select_lambda_u(y.view(), &default_grid(y.view())).unwrap();
        let ok = sel.path.windows(2).all(|w| w[1].2 <= w[0].2);
        assert_eq!(sel.monotone, ok);
        assert!(sel.path.iter().any(|p| p.0 == sel.fit.lambda_u));
    }
}

#[test]
fn rejects_bad_grid() {
    let y = noise(10, 2, 1.0, 1);
    assert!(select_lambda_u(y.view(), &[]).is_err());
    assert!(select_lambda_u(y.view(), &[2.0, 1.0]).is_err());
}

#[test]
fn cluster_pooling_respects_threshold() {
    let per = vec![vec![30], vec![31], vec![90], vec![60], vec![]];
    let a = ClusterAssignment::new(vec![0, 0, 0, 1, 1], 2).unwrap();
    let c = cluster_changepoints(&per, &a, 0.5, 2).unwrap();
    assert_eq!(c[&0], vec![30]);
    assert_eq!(c[&1], vec![60]);
    assert!(cluster_changepoints(&per, &a, 0.0, 2).is_err());
}

#[test]
fn detect_reports_shapes() {
    let mut traj = Array3::zeros((3, 50, 4));
    let mut rng = stream_rng(3, 0);
    for x in traj.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *x = 0.1 * z;
    }
    let a = ClusterAssignment::new(vec![0, 0, 1], 2).unwrap();
    let opts = ChangePointOptions {
        edge_level: true,
        ..ChangePointOptions::default()
    };
    let rep = detect_changepoints(&traj, &a, &opts).unwrap();
    assert_eq!(rep.per_subject.len(), 3);
    assert_eq!(rep.lambda_u_used.len(), 3);
    assert_eq!(rep.piecewise.dim(), (3, 50, 4));
    let edges = rep.per_edge.unwrap();
    assert_eq!(edges.len(), 4);
    assert!(edges.iter().all(|e| e.len() == 3));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn scaling_is_equivariant(seed in 0u64..1000, scale in 0.1f64..10.0, lambda in 0.1f64..5.0) {
        let y = noise(30, 3, 1.0, seed);
        let a = tv_segment(y.view(), lambda);
        let ys = y.mapv(|x| x * scale);
        let b = tv_segment(ys.view(), lambda * scale);
        for (u, w) in a.levels.iter().zip(b.levels.iter()) {
            prop_assert!((u * scale - w).abs() < 1e-6 * scale.max(1.0));
        }
    }

    #[test]
    fn change_points_lie_inside(seed in 0u64..1000, lambda in 0.01f64..20.0) {
        let y = noise(25, 2, 1.0, seed);
        let fit = tv_segment(y.view(), lambda);
        prop_assert!(fit.changepoints.iter().all(|&c| (1..25).contains(&c)));
        prop_assert!(fit.changepoints.windows(2).all(|w| w[0] < w[1]));
        // never worse than the constant fit
        let mean = y.mean_axis(ndarray::Axis(0)).unwrap();
        let flat = Array2::from_shape_fn((25, 2), |(_, k)| mean[k]);
        prop_assert!(fit.objective <= tv_objective(y.view(), flat.view(), lambda) + 1e-8);
    }
}
