use bpmm_core::idpac::*;
use bpmm_core::mixture::log_mixture_weights;
use bpmm_core::rng::stream_rng;
use bpmm_core::{HyperParams, PanelDataset};
use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn bivariate(rho: f64, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let a: f64 = StandardNormal.sample(rng);
    let b: f64 = StandardNormal.sample(rng);
    (a, rho * a + (1.0 - rho * rho).sqrt() * b)
}

/// `(N, T)` pair series whose correlation is `rho(i, t)`.
fn pair_series(n: usize, t: usize, seed: u64, rho: impl Fn(usize, usize) -> f64) -> (Array2<f64>, Array2<f64>) {
    let mut rng = stream_rng(seed, 1);
    let mut yj = Array2::zeros((n, t));
    let mut yl = Array2::zeros((n, t));
    for i in 0..n {
        for s in 0..t {
            let (a, b) = bivariate(rho(i, s), &mut rng);
            yj[[i, s]] = a;
            yl[[i, s]] = b;
        }
    }
    (yj, yl)
}

fn hp(h: usize, iters: usize) -> HyperParams {
    HyperParams {
        n_components: h,
        max_em_iters: iters,
        ..HyperParams::default()
    }
}

#[test]
fn newton_derivatives_match_finite_differences() {
    let mut rng = stream_rng(2, 0);
    let psi = Array1::from(vec![0.3, 0.7]);
    let atoms = Array1::from(vec![-0.4, 0.5]);
    let s2 = Array1::from(vec![0.2, 0.05]);
    let prior = PriorTerms {
        psi: psi.view(),
        atoms: atoms.view(),
        sigma2: s2.view(),
    };
    for _ in 0..20 {
        let o = PairObs {
            yj: rng.random_range(-2.0..2.0),
            yl: rng.random_range(-2.0..2.0),
            sigma_y2: rng.random_range(0.5..2.0),
        };
        let g: f64 = rng.random_range(-1.5..1.5);
        let (d1, d2) = gamma_derivatives(g, o, prior);
        let h = 1e-5;
        let f = |x: f64| gamma_objective(x, o, prior);
        let fd1 = (f(g + h) - f(g - h)) / (2.0 * h);
        let fd2 = (f(g + h) - 2.0 * f(g) + f(g - h)) / (h * h);
        assert!((d1 - fd1).abs() / d1.abs().max(1.0) < 1e-4, "a1 {d1} vs {fd1}");
        assert!((d2 - fd2).abs() / d2.abs().max(1.0) < 1e-3, "a2 {d2} vs {fd2}");
    }
}

#[test]
fn pair_likelihood_matches_bivariate_density() {
    // full bivariate normal log-density minus its γ-free constant
    let o = PairObs {
        yj: 0.7,
        yl: -1.2,
        sigma_y2: 1.3,
    };
    let dens = |g: f64| {
        let r = g.tanh();
        let q = (o.yj * o.yj - 2.0 * r * o.yj * o.yl + o.yl * o.yl) / (o.sigma_y2 * (1.0 - r * r));
        -0.5 * (1.0 - r * r).ln() - 0.5 * q
    };
    for g in [-1.0, -0.2, 0.0, 0.4, 1.3] {
        let diff = pair_log_likelihood(g, o) - dens(g);
        let base = pair_log_likelihood(0.0, o) - dens(0.0);
        assert!((diff - base).abs() < 1e-12);
    }
}

#[test]
fn em_trace_is_non_decreasing_on_random_edges() {
    for edge in 0..20u64 {
        let (yj, yl) = pair_series(6, 40, 100 + edge, |i, t| {
            let base = if i < 3 { 0.6 } else { -0.3 };
            if t < 20 { base } else { -base }
        });
        let x = Array2::from_shape_fn((6, 1), |(i, _)| (i / 3) as f64);
        let data = EdgeData {
            yj: yj.view(),
            yl: yl.view(),
            x: x.view(),
            sigma_y2: 1.0,
        };
        let fit = fit_edge(data, &hp(2, 15), edge).unwrap();
        for w in fit.log_posterior_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-6, "edge {edge}: {} -> {}", w[0], w[1]);
        }
    }
}

/// Independent evaluation of the expected complete-data log-posterior.
fn augmented_oracle(data: &EdgeData<'_>, fit: &EdgeFit, hp: &HyperParams) -> f64 {
    let st = &fit.state;
    let (n, t) = fit.gamma.dim();
    let h = st.sigma2.len();
    let mut total = 0.0;
    for s in 0..t {
        for i in 0..n {
            let g = fit.gamma[[i, s]];
            let r = g.tanh();
            let (a, b) = (data.yj[[i, s]], data.yl[[i, s]]);
            total += -0.5 * (1.0 - r * r).ln() - (a * a - 2.0 * r * a * b + b * b) / (2.0 * data.sigma_y2 * (1.0 - r * r));
            let lw = log_mixture_weights(data.x.row(i), st.beta.index_axis(Axis(0), s));
            for k in 0..h {
                let p = st.responsibilities[[i, k, s]];
                let s2 = st.sigma2[k];
                let atom = st.atoms[[k, 0, s, 0]];
                total += p * (lw[k] - 0.5 * s2.ln() - 0.5 * (g - atom).powi(2) / s2);
            }
        }
    }
    let tau = hp.sigma_beta_diag;
    total -= 0.5 * st.beta.iter().map(|b| b * b).sum::<f64>() / tau + 0.5 * st.beta.len() as f64 * tau.ln();
    for k in 0..h {
        let tv: f64 = (1..t).map(|s| (st.atoms[[k, 0, s, 0]] - st.atoms[[k, 0, s - 1, 0]]).abs()).sum();
        total -= fit.lambdas[k] * tv;
        total -= (hp.a_sigma + 1.0) * st.sigma2[k].ln() + hp.b_sigma / st.sigma2[k];
    }
    total
}

#[test]
fn augmented_log_posterior_matches_oracle() {
    let (yj, yl) = pair_series(5, 30, 9, |i, _| if i % 2 == 0 { 0.5 } else { -0.2 });
    let x = Array2::from_shape_fn((5, 2), |(i, k)| ((i + k) % 3) as f64);
    let data = EdgeData {
        yj: yj.view(),
        yl: yl.view(),
        x: x.view(),
        sigma_y2: 1.1,
    };
    let p = hp(3, 6);
    let fit = fit_edge(data, &p, 4).unwrap();
    // the oracle drops constants that are independent of γ; compare through a
    // shifted copy to confirm the difference is a constant
    let a = augmented_log_posterior(&data, &fit, &p);
    let b = augmented_oracle(&data, &fit, &p);
    let mut moved = fit.clone();
    moved.gamma.mapv_inplace(|g| 0.9 * g);
    let a2 = augmented_log_posterior(&data, &moved, &p);
    let b2 = augmented_oracle(&data, &moved, &p);
    assert!(((a - b) - (a2 - b2)).abs() < 1e-8 * a.abs().max(1.0));
}

#[test]
fn two_groups_separate_sharply() {
    let (yj, yl) = pair_series(10, 60, 3, |i, _| if i < 5 { 0.8 } else { -0.8 });
    let x = Array2::from_shape_fn((10, 1), |(i, _)| (i / 5) as f64);
    let data = EdgeData {
        yj: yj.view(),
        yl: yl.view(),
        x: x.view(),
        sigma_y2: 1.0,
    };
    let fit = fit_edge(data, &hp(2, 30), 1).unwrap();
    let lab = fit.state.hard_labels();
    let first = lab[[0, 0]];
    let mut own = 0.0;
    for i in 0..10 {
        let k = if i < 5 { first } else { 1 - first };
        own += fit.state.responsibilities.slice(s![i, k, ..]).mean().unwrap();
    }
    assert!(own / 10.0 > 0.99, "mean own-component responsibility {}", own / 10.0);
    // Fisher-z estimates have the right signs
    assert!(fit.gamma.slice(s![..5, ..]).mean().unwrap() > 0.5);
    assert!(fit.gamma.slice(s![5.., ..]).mean().unwrap() < -0.5);
}

#[test]
fn single_component_with_huge_penalty_is_constant_in_time() {
    let (yj, yl) = pair_series(4, 40, 5, |_, t| if t < 20 { 0.5 } else { -0.5 });
    let x = Array2::zeros((4, 1));
    let data = EdgeData {
        yj: yj.view(),
        yl: yl.view(),
        x: x.view(),
        sigma_y2: 1.0,
    };
    let p = HyperParams {
        lambda_grid: vec![1e8],
        ..hp(1, 10)
    };
    let fit = fit_edge(data, &p, 2).unwrap();
    let atoms: Vec<f64> = fit.state.atoms.slice(s![0, 0, .., 0]).to_vec();
    let spread = atoms.iter().fold(0.0f64, |m, a| m.max((a - atoms[0]).abs()));
    assert!(spread < 1e-6, "atom spread {spread}");
}

#[test]
fn noise_covariates_leave_weights_near_uniform() {
    let (yj, yl) = pair_series(12, 40, 8, |_, _| 0.3);
    let mut rng = stream_rng(8, 2);
    let x = Array2::from_shape_fn((12, 2), |_| StandardNormal.sample(&mut rng));
    let data = EdgeData {
        yj: yj.view(),
        yl: yl.view(),
        x: x.view(),
        sigma_y2: 1.0,
    };
    let fit = fit_edge(data, &hp(2, 15), 3).unwrap();
    let gap = weight_uniformity_gap(&fit, x.view());
    assert!(gap < 0.35, "gap {gap}");
}

fn panel_from(data: Array3<f64>, q: usize) -> PanelDataset {
    let n = data.dim().0;
    let x = Array2::from_shape_fn((n, q), |(i, k)| ((i + k) % 2) as f64);
    PanelDataset::new(data, x, None, (0..n).map(|i| format!("s{i}")).collect()).unwrap()
}

#[test]
fn two_node_panel_has_one_edge() {
    let (yj, yl) = pair_series(4, 25, 6, |_, _| 0.4);
    let mut data = Array3::zeros((4, 2, 25));
    data.slice_mut(s![.., 0, ..]).assign(&yj);
    data.slice_mut(s![.., 1, ..]).assign(&yl);
    let fit = fit_all_edges(&panel_from(data, 1), &hp(2, 5), 1).unwrap();
    assert_eq!(fit.networks.to_pairwise_fisher_z().unwrap().dim(), (4, 25, 1));
    assert_eq!(fit.hard_labels().dim(), (4, 25, 1));
    assert_eq!(fit.diagnostics.len(), 1);
}

#[test]
fn swapping_the_nodes_of_an_edge_changes_nothing() {
    let (yj, yl) = pair_series(4, 30, 7, |i, _| if i < 2 { 0.6 } else { 0.0 });
    let x = Array2::from_shape_fn((4, 1), |(i, _)| (i / 2) as f64);
    let p = hp(2, 8);
    let a = fit_edge(
        EdgeData {
            yj: yj.view(),
            yl: yl.view(),
            x: x.view(),
            sigma_y2: 1.0,
        },
        &p,
        5,
    )
    .unwrap();
    let b = fit_edge(
        EdgeData {
            yj: yl.view(),
            yl: yj.view(),
            x: x.view(),
            sigma_y2: 1.0,
        },
        &p,
        5,
    )
    .unwrap();
    assert_eq!(a.gamma, b.gamma);
    assert_eq!(a.log_posterior_trace, b.log_posterior_trace);
}

#[test]
fn relabelling_nodes_permutes_edges() {
    let mut rng = stream_rng(4, 4);
    let data = Array3::from_shape_fn((4, 3, 30), |_| StandardNormal.sample(&mut rng));
    let mut swapped = data.clone();
    // swap nodes 0 and 2: edge (0,1) <-> (1,2), edge (0,2) stays
    swapped.slice_mut(s![.., 0, ..]).assign(&data.slice(s![.., 2, ..]));
    swapped.slice_mut(s![.., 2, ..]).assign(&data.slice(s![.., 0, ..]));
    let p = hp(2, 4);
    let a = fit_all_edges(&panel_from(data, 1), &p, 3).unwrap();
    let b = fit_all_edges(&panel_from(swapped, 1), &p, 3).unwrap();
    let za = a.networks.to_pairwise_fisher_z().unwrap();
    let zb = b.networks.to_pairwise_fisher_z().unwrap();
    // seeds follow the edge index, so compare the edge that keeps its index
    let d = (&za.index_axis(Axis(2), 1) - &zb.index_axis(Axis(2), 1)).mapv(f64::abs).fold(0.0f64, |m, &x| m.max(x));
    // the pooled residual variance is summed in a different node order
    assert!(d < 1e-10, "max difference {d}");
}
