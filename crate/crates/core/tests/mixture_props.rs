use bpmm_core::mixture::{
    e_step_responsibilities, m_step_beta, m_step_sigma2, mixture_weights, MixtureState, VarianceRule,
};
use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, Array3, Array4};
use proptest::prelude::*;

fn state(h: usize, t: usize, d: usize, q: usize, vals: &[f64]) -> MixtureState {
    let mut it = vals.iter().cycle();
    let atoms = Array4::from_shape_fn((h, 1, t, d), |_| *it.next().unwrap());
    let sigma2 = Array1::from_shape_fn(h, |_| 0.1 + it.next().unwrap().abs());
    let beta = Array3::from_shape_fn((t, h - 1, q), |_| *it.next().unwrap());
    MixtureState {
        atoms,
        sigma2,
        beta,
        responsibilities: Array3::zeros((1, h, t)),
        units_per_subject: 1,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn responsibilities_sum_to_one(
        h in 1usize..5, t in 1usize..4, d in 1usize..4, n in 1usize..6,
        vals in proptest::collection::vec(-3.0f64..3.0, 64),
    ) {
        let st = state(h, t, d, 2, &vals);
        let obs = Array3::from_shape_fn((n, t, d), |(a, b, c)| vals[(a * 7 + b * 3 + c) % 64] * 2.0);
        let x = Array2::from_shape_fn((n, 2), |(a, b)| vals[(a + 5 * b) % 64]);
        let r = e_step_responsibilities(obs.view(), &st, x.view());
        for u in 0..n {
            for s in 0..t {
                let total: f64 = (0..h).map(|k| r[[u, k, s]]).sum();
                prop_assert!((total - 1.0).abs() <= 1e-10);
                prop_assert!((0..h).all(|k| r[[u, k, s]] >= 0.0));
            }
        }
    }

    #[test]
    fn e_step_invariant_to_common_shift(
        vals in proptest::collection::vec(-3.0f64..3.0, 64),
        shift in -50.0f64..50.0,
    ) {
        // shifting every atom and the observation by the same amount adds the
        // same constant to every log-density
        let st = state(3, 2, 1, 1, &vals);
        let obs = Array3::from_shape_fn((4, 2, 1), |(a, b, _)| vals[a * 2 + b]);
        let x = Array2::from_shape_fn((4, 1), |(a, _)| vals[10 + a]);
        let r1 = e_step_responsibilities(obs.view(), &st, x.view());
        let mut st2 = st.clone();
        st2.atoms.mapv_inplace(|a| a + shift);
        let obs2 = obs.mapv(|o| o + shift);
        let r2 = e_step_responsibilities(obs2.view(), &st2, x.view());
        for (a, b) in r1.iter().zip(r2.iter()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn sigma2_positive_and_decreasing_in_residuals(
        res in proptest::collection::vec(-2.0f64..2.0, 12),
        shrink in 0.0f64..0.99,
    ) {
        let obs = Array3::from_shape_fn((12, 1, 1), |(u, _, _)| res[u]);
        let mut st = state(1, 1, 1, 0, &[0.0]);
        st.atoms.fill(0.0);
        st.responsibilities = Array3::ones((12, 1, 1));
        let prev = Array1::from(vec![1.0]);
        for rule in [VarianceRule::Pairwise, VarianceRule::Precision] {
            let a = m_step_sigma2(st.responsibilities.view(), obs.view(), &st, 0.1, 1.0, rule, &prev);
            let small = obs.mapv(|o| o * shrink);
            let b = m_step_sigma2(st.responsibilities.view(), small.view(), &st, 0.1, 1.0, rule, &prev);
            prop_assert!(a[0] > 0.0 && b[0] > 0.0);
            prop_assert!(b[0] <= a[0]);
        }
    }

    #[test]
    fn beta_prior_dominance(
        vals in proptest::collection::vec(-2.0f64..2.0, 40),
    ) {
        let x = Array2::from_shape_fn((10, 2), |(i, j)| vals[i * 2 + j]);
        let psi = Array2::from_shape_fn((10, 3), |(i, k)| if (i + k) % 3 == 0 { 1.0 } else { 0.0 });
        let prev = Array2::from_shape_fn((2, 2), |(a, b)| vals[30 + a * 2 + b]);
        let out = m_step_beta(psi.view(), x.view(), prev.view(), 1, 1e-12);
        prop_assert!(out.iter().all(|b| b.abs() < 1e-8));
    }
}

/// Independent Newton step for each non-reference component's block of the
/// multinomial log-likelihood, others held fixed.
fn newton_block_step(psi: &Array2<f64>, x: &Array2<f64>, beta: &Array2<f64>) -> Array2<f64> {
    let (n, q) = x.dim();
    let h = psi.ncols();
    let mut out = beta.clone();
    for k in 0..h - 1 {
        let mut grad = DVector::zeros(q);
        let mut hess = DMatrix::zeros(q, q);
        for i in 0..n {
            let eta: Vec<f64> = (0..h - 1).map(|r| (0..q).map(|a| beta[[r, a]] * x[[i, a]]).sum()).collect();
            let denom = 1.0 + eta.iter().map(|e| e.exp()).sum::<f64>();
            let p = eta[k].exp() / denom;
            let xi = DVector::from_iterator(q, x.row(i).iter().copied());
            grad += &xi * (psi[[i, k]] - p);
            hess += &xi * xi.transpose() * (p * (1.0 - p));
        }
        let step = hess.lu().solve(&grad).unwrap();
        for a in 0..q {
            out[[k, a]] += step[a];
        }
    }
    out
}

#[test]
fn beta_matches_independent_irls_step() {
    let n = 20;
    let x = Array2::from_shape_fn((n, 2), |(i, j)| {
        if j == 0 { 1.0 } else { (i as f64 - 9.5) / 5.0 }
    });
    let psi = Array2::from_shape_fn((n, 3), |(i, k)| {
        let raw = [0.2 + 0.03 * i as f64, 0.5, 0.3 + 0.01 * (i % 4) as f64];
        raw[k] / raw.iter().sum::<f64>()
    });
    let prev = ndarray::array![[0.1, -0.3], [0.4, 0.2]];
    let ours = m_step_beta(psi.view(), x.view(), prev.view(), 1, 1e12);
    let oracle = newton_block_step(&psi, &x, &prev);
    for (a, b) in ours.iter().zip(oracle.iter()) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
    // sanity: weights still form a distribution
    let w = mixture_weights(x.row(3), ours.view());
    assert!((w.sum() - 1.0).abs() < 1e-12);
}
