use bpmm_core::lasso::{solve_fused, solve_fused_path, solve_lasso, LassoProblem};
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn fused_objective(w: &[f64], y: &[f64], a: &[f64], lambda: f64) -> f64 {
    let fit: f64 = (0..w.len()).map(|t| w[t] * (y[t] - a[t]).powi(2)).sum();
    let tv: f64 = (1..a.len()).map(|t| (a[t] - a[t - 1]).abs()).sum();
    fit + lambda * tv
}

/// Exhaustive oracle: for every segmentation and every sign pattern of the
/// jumps, the stationary segment levels have a closed form. Each candidate is
/// a feasible point and the true optimum is among them, so the minimum over
/// all candidates is the optimal objective.
fn enumerate_optimum(w: &[f64], y: &[f64], lambda: f64) -> f64 {
    let t = w.len();
    let h = lambda / 2.0;
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << (t - 1)) {
        let bps: Vec<usize> = (1..t).filter(|&j| mask & (1 << (j - 1)) != 0).collect();
        let m = bps.len();
        for signs in 0u32..(1 << m) {
            let s: Vec<f64> = (0..m)
                .map(|k| if signs & (1 << k) != 0 { 1.0 } else { -1.0 })
                .collect();
            let mut starts = vec![0];
            starts.extend(&bps);
            let mut a = vec![0.0; t];
            let mut ok = true;
            for k in 0..starts.len() {
                let (lo, hi) = (starts[k], *starts.get(k + 1).unwrap_or(&t));
                let sw: f64 = w[lo..hi].iter().sum();
                if sw <= 0.0 {
                    ok = false;
                    break;
                }
                let swy: f64 = (lo..hi).map(|i| w[i] * y[i]).sum();
                let sl = if k == 0 { 0.0 } else { s[k - 1] };
                let sr = if k < m { s[k] } else { 0.0 };
                let c = (swy - h * (sl - sr)) / sw;
                a[lo..hi].fill(c);
            }
            if ok {
                best = best.min(fused_objective(w, y, &a, lambda));
            }
        }
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dense_lasso_meets_kkt(
        n in 3usize..9,
        p in 1usize..6,
        seed in proptest::collection::vec(-2.0f64..2.0, 9 * 6 + 9),
        lambda in 0.0f64..2.0,
    ) {
        let x = Array2::from_shape_fn((n, p), |(i, j)| seed[i * 6 + j]);
        let y = Array1::from_iter((0..n).map(|i| seed[54 + i]));
        let prob = LassoProblem { design: x, response: y, penalty: lambda, penalize: vec![true; p] };
        if let Ok(beta) = solve_lasso(&prob) {
            prop_assert!(prob.kkt_residual(&beta) <= 1e-8);
        }
    }

    #[test]
    fn fused_matches_exhaustive_oracle(
        t in 2usize..10,
        w in proptest::collection::vec(0.1f64..3.0, 10),
        y in proptest::collection::vec(-2.0f64..2.0, 10),
        l0 in 0.01f64..0.5,
    ) {
        let (w, y) = (&w[..t], &y[..t]);
        for lambda in [l0, 4.0 * l0, 16.0 * l0] {
            let fit = solve_fused(w, y, lambda, None);
            prop_assert!(fit.converged);
            let got = fused_objective(w, y, fit.levels.column(0).as_slice().unwrap(), lambda);
            let oracle = enumerate_optimum(w, y, lambda);
            prop_assert!((got - oracle).abs() <= 1e-6 * oracle.max(1.0), "{} vs {}", got, oracle);
        }
    }

    #[test]
    fn path_selects_from_grid(
        t in 3usize..40,
        y in proptest::collection::vec(-1.0f64..1.0, 40),
        w in proptest::collection::vec(0.0f64..2.0, 40),
    ) {
        let mut w = w[..t].to_vec();
        w[0] = 1.0;
        let grid = [0.05, 0.2, 0.8, 3.2];
        let fit = solve_fused_path(&w, &y[..t], &grid).unwrap();
        prop_assert!(grid.contains(&fit.lambda));
        let jumps = (1..t).filter(|&j| fit.atoms[j] != fit.atoms[j - 1]).count();
        prop_assert_eq!(jumps, fit.n_active);
        prop_assert!(fit.atoms.iter().all(|a| a.is_finite()));
    }
}
