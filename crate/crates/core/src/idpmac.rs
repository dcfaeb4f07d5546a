//! Node-wise EM for dynamic precision matrices.
//!
//! Each scan `y_it ~ N(0, Ω_it⁻¹)`. Column `v` of `Ω_it` (its off-diagonal
//! part, length `V − 1`) follows a mixture of Gaussians whose node-specific
//! atoms are piecewise constant in time and whose weights depend on subject
//! covariates; diagonals carry an exponential prior with rate `α/2`. The
//! E-step for `Ω` is Monte Carlo: block Gibbs sweeps that redraw one column
//! and its diagonal at a time, which keeps every draw positive definite.

use nalgebra::{DMatrix, DVector};
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;

use crate::data::{n_edges, DynamicNetworkSet, HyperParams, PanelDataset};
use crate::error::{Error, Result};
use crate::lasso::{solve_fused, solve_fused_path};
use crate::mixture::{
    e_step_responsibilities, initialize_from_partition, log_mixture_weights, m_step_beta, weight_log_objective,
    MixtureState, EMPTY_MASS,
};
use crate::kmeans::kmeans;
use crate::rng::{derive_seed, stream_rng};

/// Scans in the moving window of the initial ridge precision estimates.
pub const INIT_WINDOW: usize = 15;
/// Ridge added to the window covariance, relative to its mean diagonal.
pub const INIT_RIDGE: f64 = 0.25;
const JITTER: f64 = 1e-8;
const INIT_RESTARTS: usize = 20;
const SIGMA2_FLOOR: f64 = 1e-8;
/// Fraction of `(subject, scan)` matrices audited for positive definiteness
/// after each iteration.
const AUDIT_FRACTION: f64 = 0.05;
/// Consecutive decreases of the log-posterior that abort the fit.
const MAX_DECREASES: usize = 5;

fn to_dmatrix(a: ArrayView2<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn to_array(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Off-diagonal entries of column `v`, in node order.
pub fn column_offdiag(omega: ArrayView2<'_, f64>, v: usize) -> Array1<f64> {
    (0..omega.nrows()).filter(|&k| k != v).map(|k| omega[[k, v]]).collect()
}

/// Mixture prior on one column: `c = Σ_h ψ_h/σ²_h` and `m = Σ_h ψ_h ω*_h/σ²_h`.
#[derive(Debug, Clone)]
pub struct ColumnPrior {
    pub precision: f64,
    pub shift: DVector<f64>,
}

impl ColumnPrior {
    /// Prior built from responsibilities `psi` (length `H`), atoms
    /// `(H, V−1)` and variances.
    pub fn from_mixture(psi: ArrayView1<'_, f64>, atoms: ArrayView2<'_, f64>, sigma2: ArrayView1<'_, f64>) -> Self {
        let d = atoms.ncols();
        let mut c = 0.0;
        let mut m = DVector::zeros(d);
        for h in 0..psi.len() {
            let w = psi[h] / sigma2[h];
            c += w;
            for k in 0..d {
                m[k] += w * atoms[[h, k]];
            }
        }
        Self { precision: c, shift: m }
    }
}

/// Sampler state for one `(subject, scan)`: the current draw and its inverse.
#[derive(Debug, Clone)]
pub struct GibbsState {
    pub omega: DMatrix<f64>,
    sigma: DMatrix<f64>,
    pub jitters: usize,
}

impl GibbsState {
    pub fn new(omega: DMatrix<f64>) -> Result<Self> {
        let sigma = omega
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("initial sampler state".into()))?
            .inverse();
        Ok(Self {
            omega,
            sigma,
            jitters: 0,
        })
    }

    fn refresh_inverse(&mut self) {
        match self.omega.clone().cholesky() {
            Some(c) => self.sigma = c.inverse(),
            None => {
                let v = self.omega.nrows();
                self.omega += DMatrix::identity(v, v) * JITTER;
                self.jitters += 1;
                if let Some(c) = self.omega.clone().cholesky() {
                    self.sigma = c.inverse();
                }
            }
        }
    }
}

/// Moments of the conditional draw of column `v`: precision matrix
/// `A = (s_vv + α) Ω₋ᵥ⁻¹ + c I` and mean `A⁻¹ (m − s_v)`, together with
/// `Ω₋ᵥ⁻¹`.
pub fn column_conditional(
    state: &GibbsState,
    s: &DMatrix<f64>,
    v: usize,
    prior: &ColumnPrior,
    alpha: f64,
) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let n = s.nrows();
    let idx: Vec<usize> = (0..n).filter(|&k| k != v).collect();
    let d = idx.len();
    let sig = &state.sigma;
    let s22 = sig[(v, v)];
    // inverse of the (V−1)×(V−1) block of Ω from the full inverse
    let b = DMatrix::from_fn(d, d, |r, c| sig[(idx[r], idx[c])] - sig[(idx[r], v)] * sig[(idx[c], v)] / s22);
    let rate = s[(v, v)] + alpha;
    let a = &b * rate + DMatrix::identity(d, d) * prior.precision;
    let rhs = DVector::from_fn(d, |r, _| prior.shift[r] - s[(idx[r], v)]);
    let mean = a
        .clone()
        .cholesky()
        .map(|c| c.solve(&rhs))
        .unwrap_or_else(|| a.clone().lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(d)));
    (a, mean, b)
}

/// Diagonal gap `κ = ω_vv − ω_12ᵀ Ω₋ᵥ⁻¹ ω_12 ~ Gamma(3/2, rate (s_vv + α)/2)`.
pub fn sample_kappa(s_vv: f64, alpha: f64, rng: &mut ChaCha8Rng) -> f64 {
    let rate = 0.5 * (s_vv + alpha);
    Gamma::new(1.5, 1.0 / rate).expect("valid gamma").sample(rng)
}

/// One sweep over all columns. Returns the number of jitter corrections.
pub fn gibbs_sweep(
    state: &mut GibbsState,
    s: &DMatrix<f64>,
    priors: &[ColumnPrior],
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> usize {
    let n = s.nrows();
    let before = state.jitters;
    state.refresh_inverse();
    for v in 0..n {
        let idx: Vec<usize> = (0..n).filter(|&k| k != v).collect();
        let d = idx.len();
        let (mut a, mean, b) = column_conditional(state, s, v, &priors[v], alpha);
        let chol = loop {
            if let Some(c) = a.clone().cholesky() {
                break c;
            }
            a += DMatrix::identity(d, d) * JITTER.max(1e-8 * a.diagonal().amax());
            state.jitters += 1;
        };
        // ω = mean + L⁻ᵀ z has covariance A⁻¹
        let z = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
        let noise = chol
            .l()
            .transpose()
            .solve_upper_triangular(&z)
            .expect("non-singular factor");
        let w = mean + noise;
        let kappa = sample_kappa(s[(v, v)], alpha, rng);
        let bw = &b * &w;
        let quad = w.dot(&bw);
        for (r, &k) in idx.iter().enumerate() {
            state.omega[(k, v)] = w[r];
            state.omega[(v, k)] = w[r];
        }
        state.omega[(v, v)] = kappa + quad;
        // inverse after the block update
        for (r, &k) in idx.iter().enumerate() {
            for (c, &l) in idx.iter().enumerate() {
                state.sigma[(k, l)] = b[(r, c)] + bw[r] * bw[c] / kappa;
            }
            state.sigma[(k, v)] = -bw[r] / kappa;
            state.sigma[(v, k)] = -bw[r] / kappa;
        }
        state.sigma[(v, v)] = 1.0 / kappa;
    }
    state.jitters - before
}

/// Monte Carlo summary of one `(subject, scan)`.
#[derive(Debug, Clone)]
pub struct GibbsSummary {
    pub mean: DMatrix<f64>,
    /// `E‖ω_v‖²` over draws, per column.
    pub column_sq: Vec<f64>,
    pub jitters: usize,
}

/// Burn-in then `n_samples` averaged sweeps, continuing from `state`.
pub fn gibbs_sample_precision(
    state: &mut GibbsState,
    s: &DMatrix<f64>,
    priors: &[ColumnPrior],
    alpha: f64,
    n_samples: usize,
    burn_in: usize,
    rng: &mut ChaCha8Rng,
) -> GibbsSummary {
    let n = s.nrows();
    let mut jitters = 0;
    for _ in 0..burn_in {
        jitters += gibbs_sweep(state, s, priors, alpha, rng);
    }
    let mut mean = DMatrix::zeros(n, n);
    let mut column_sq = vec![0.0; n];
    let k = n_samples.max(1);
    for _ in 0..k {
        jitters += gibbs_sweep(state, s, priors, alpha, rng);
        mean += &state.omega;
        for (v, sq) in column_sq.iter_mut().enumerate() {
            *sq += (0..n).filter(|&r| r != v).map(|r| state.omega[(r, v)].powi(2)).sum::<f64>();
        }
    }
    mean /= k as f64;
    for sq in column_sq.iter_mut() {
        *sq /= k as f64;
    }
    GibbsSummary {
        mean,
        column_sq,
        jitters,
    }
}

/// `−ω_kl / √(ω_kk ω_ll)` off the diagonal, 1 on it.
pub fn partial_correlation_matrix(omega: ArrayView2<'_, f64>) -> Array2<f64> {
    let v = omega.nrows();
    Array2::from_shape_fn((v, v), |(k, l)| {
        if k == l {
            1.0
        } else {
            -omega[[k, l]] / (omega[[k, k]] * omega[[l, l]]).sqrt()
        }
    })
}

fn is_positive_definite(m: ArrayView2<'_, f64>) -> bool {
    to_dmatrix(m).cholesky().is_some()
}

/// Centered-window covariance plus a ridge, inverted.
pub fn initial_precisions(subject: ArrayView2<'_, f64>) -> Vec<DMatrix<f64>> {
    let (v, t_len) = subject.dim();
    let w = INIT_WINDOW.min(t_len);
    (0..t_len)
        .map(|t| {
            let start = t.saturating_sub(w / 2).min(t_len - w);
            let block = subject.slice(s![.., start..start + w]);
            let mut cov = DMatrix::zeros(v, v);
            for k in 0..v {
                for l in k..v {
                    let c = block.row(k).dot(&block.row(l)) / w as f64;
                    cov[(k, l)] = c;
                    cov[(l, k)] = c;
                }
            }
            let ridge = INIT_RIDGE * cov.trace() / v as f64 + JITTER;
            cov += DMatrix::identity(v, v) * ridge;
            cov.cholesky().expect("ridge covariance is positive definite").inverse()
        })
        .collect()
}

/// K-means of subjects on the upper triangle of their whole-series ridge
/// partial correlations; at most `h` groups.
pub fn subject_partition(data: ArrayView3<'_, f64>, h: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let (n, v, t_len) = data.dim();
    let e = n_edges(v);
    let mut feats = Array2::zeros((n, e));
    for i in 0..n {
        let y = data.slice(s![i, .., ..]);
        let mut cov = DMatrix::from_fn(v, v, |k, l| y.row(k).dot(&y.row(l)) / t_len as f64);
        let ridge = INIT_RIDGE * cov.trace() / v as f64 + JITTER;
        cov += DMatrix::identity(v, v) * ridge;
        let om = cov.cholesky().expect("ridge covariance is positive definite").inverse();
        let pc = partial_correlation_matrix(to_array(&om).view());
        let mut c = 0;
        for k in 0..v {
            for l in (k + 1)..v {
                feats[[i, c]] = pc[[k, l]];
                c += 1;
            }
        }
    }
    kmeans(feats.view(), h.min(n), INIT_RESTARTS, rng).labels
}

#[derive(Debug, Clone)]
pub struct PrecisionFit {
    /// Posterior-mean precision matrices, `(N, T, V, V)`.
    pub omega: Array4<f64>,
    pub state: MixtureState,
    /// Selected fused-lasso penalties, `(H, V, V − 1)`.
    pub lambdas: Array3<f64>,
    pub log_posterior_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub lasso_warnings: usize,
    pub beta_rejections: usize,
    pub jitters: usize,
    /// `(iteration, matrices audited)`; every audit passed.
    pub pd_audits: Vec<(usize, usize)>,
    /// Whether successive log-posterior changes ever exceeded ten times the
    /// tolerance in alternating directions.
    pub oscillating: bool,
}

impl PrecisionFit {
    pub fn networks(&self) -> DynamicNetworkSet {
        DynamicNetworkSet::Precision(self.omega.clone())
    }

    /// Argmax labels, `(N, T, V)`.
    pub fn hard_labels(&self) -> Array3<usize> {
        let v = self.state.units_per_subject;
        let lab = self.state.hard_labels();
        let (units, t) = lab.dim();
        let n = units / v;
        Array3::from_shape_fn((n, t, v), |(i, s, k)| lab[[i * v + k, s]])
    }
}

/// Partial-correlation tensor `(N, T, E)` of a fit.
pub fn partial_correlations(fit: &PrecisionFit) -> Array3<f64> {
    precision_to_partials(&fit.omega)
}

/// Edge-ordered partial correlations of an `(N, T, V, V)` precision tensor.
pub fn precision_to_partials(omega: &Array4<f64>) -> Array3<f64> {
    let (n, t, v, _) = omega.dim();
    let mut out = Array3::zeros((n, t, n_edges(v)));
    for i in 0..n {
        for s in 0..t {
            let pc = partial_correlation_matrix(omega.slice(s![i, s, .., ..]));
            let mut e = 0;
            for k in 0..v {
                for l in (k + 1)..v {
                    out[[i, s, e]] = pc[[k, l]];
                    e += 1;
                }
            }
        }
    }
    out
}

fn total_variation(a: ArrayView1<'_, f64>) -> f64 {
    a.windows(2).into_iter().map(|w| (w[1] - w[0]).abs()).sum()
}

fn fused_objective(w: &[f64], g: &[f64], a: ArrayView1<'_, f64>, lambda: f64) -> f64 {
    let fit: f64 = (0..w.len()).map(|t| w[t] * (g[t] - a[t]).powi(2)).sum();
    fit + lambda * total_variation(a)
}

/// Observed-data log-posterior with Ω fixed at its posterior means:
/// Gaussian log-likelihood of every scan, diagonal priors, the mixture
/// marginal of every column, and the priors of β, the atoms and σ².
pub fn observed_log_posterior(
    data: ArrayView3<'_, f64>,
    omega: &Array4<f64>,
    obs: ArrayView3<'_, f64>,
    state: &MixtureState,
    x: ArrayView2<'_, f64>,
    lambdas: &Array3<f64>,
    hp: &HyperParams,
) -> f64 {
    let (n, v, t_len) = data.dim();
    let h = state.n_components();
    let d = v - 1;
    let mut total = 0.0;
    for i in 0..n {
        for t in 0..t_len {
            let om = omega.slice(s![i, t, .., ..]);
            let logdet = to_dmatrix(om)
                .cholesky()
                .map(|c| 2.0 * c.l().diagonal().iter().map(|x| x.ln()).sum::<f64>())
                .unwrap_or(f64::NEG_INFINITY);
            let y = data.slice(s![i, .., t]);
            let quad = y.dot(&om.dot(&y));
            let diag: f64 = (0..v).map(|k| om[[k, k]]).sum();
            total += 0.5 * logdet - 0.5 * quad - 0.5 * hp.alpha * diag;
        }
    }
    let mut scores = vec![0.0; h];
    for t in 0..t_len {
        let beta_t = state.beta.index_axis(Axis(0), t);
        for i in 0..n {
            let lw = log_mixture_weights(x.row(i), beta_t);
            for k in 0..v {
                let u = i * v + k;
                let o = obs.slice(s![u, t, ..]);
                for c in 0..h {
                    let s2 = state.sigma2[c];
                    let r2: f64 = o.iter().zip(state.atom(c, u, t)).map(|(a, b)| (a - b).powi(2)).sum();
                    scores[c] = lw[c] - 0.5 * d as f64 * s2.ln() - 0.5 * r2 / s2;
                }
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                total += m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
            }
        }
    }
    let tau = hp.sigma_beta_diag;
    total -= 0.5 * state.beta.iter().map(|b| b * b).sum::<f64>() / tau;
    for c in 0..h {
        for g in 0..v {
            for k in 0..d {
                total -= lambdas[[c, g, k]] * total_variation(state.atoms.slice(s![c, g, .., k]));
            }
        }
        let s2 = state.sigma2[c];
        total -= (hp.a_sigma + 1.0) * s2.ln() + hp.b_sigma / s2;
    }
    total
}

struct MStepInputs<'a> {
    obs: ArrayView3<'a, f64>,
    col_sq: ArrayView2<'a, f64>,
    x: ArrayView2<'a, f64>,
    n: usize,
    v: usize,
}

struct MStepOutcome {
    state: MixtureState,
    lambdas: Array3<f64>,
    selected: Array3<bool>,
    lasso_warnings: usize,
    beta_rejections: usize,
}

/// Atom, variance and weight M-steps from the current Monte Carlo summaries.
/// Atoms solve one weighted fused problem per component, node and
/// coordinate on the posterior-mean columns, weights `Σψ/(2σ²)`.
fn precision_m_steps(
    inp: &MStepInputs<'_>,
    state0: &MixtureState,
    lambdas0: &Array3<f64>,
    selected0: &Array3<bool>,
    hp: &HyperParams,
) -> Result<MStepOutcome> {
    let (n, v) = (inp.n, inp.v);
    let obs = inp.obs;
    let col_sq = inp.col_sq;
    let x = inp.x;
    let (n_units, t_len, d) = obs.dim();
    let h = state0.n_components();
    let q = x.ncols();
    let mut state = state0.clone();
    let mut lambdas = lambdas0.clone();
    let mut selected = selected0.clone();
    let mut counts = (0usize, 0usize);
    // atoms: one fused problem per component, node and coordinate
    for c in 0..h {
        let mass: f64 = state.responsibilities.slice(s![.., c, ..]).sum();
        if mass < EMPTY_MASS {
            continue;
        }
        for g in 0..v {
            let sp: Vec<f64> = (0..t_len)
                .map(|t| (0..n).map(|i| state.responsibilities[[i * v + g, c, t]]).sum())
                .collect();
            if sp.iter().sum::<f64>() < EMPTY_MASS {
                continue;
            }
            for k in 0..d {
                let mut w = vec![0.0; t_len];
                let mut gbar = vec![0.0; t_len];
                for t in 0..t_len {
                    let (mut sw, mut swg) = (0.0, 0.0);
                    for i in 0..n {
                        let u = i * v + g;
                        let p = state.responsibilities[[u, c, t]];
                        if p == 0.0 {
                            continue;
                        }
                        let wt = p / (2.0 * state.sigma2[c]);
                        sw += wt;
                        swg += wt * obs[[u, t, k]];
                    }
                    w[t] = sw;
                    gbar[t] = if sw > 0.0 { swg / sw } else { 0.0 };
                }
                let grid = if hp.freeze_lambda && selected[[c, g, k]] {
                    vec![lambdas[[c, g, k]]]
                } else {
                    hp.lambda_grid.clone()
                };
                let path = solve_fused_path(&w, &gbar, &grid)?;
                if !path.converged {
                    counts.0 += 1;
                }
                let (mut lam, mut atoms) = (path.lambda, path.atoms);
                if selected[[c, g, k]] && lam != lambdas[[c, g, k]] {
                    let prev = state.atoms.slice(s![c, g, .., k]).to_owned();
                    let old = fused_objective(&w, &gbar, prev.view(), lambdas[[c, g, k]]);
                    if fused_objective(&w, &gbar, atoms.view(), lam) > old {
                        let refit = solve_fused(&w, &gbar, lambdas[[c, g, k]], None);
                        counts.0 += usize::from(!refit.converged);
                        lam = lambdas[[c, g, k]];
                        atoms = refit.levels.column(0).to_owned();
                    }
                }
                state.atoms.slice_mut(s![c, g, .., k]).assign(&atoms);
                lambdas[[c, g, k]] = lam;
                selected[[c, g, k]] = true;
            }
        }
    }

    // variances from Monte Carlo second moments: E‖ω − ω*‖²
    for c in 0..h {
        let mut mass = 0.0;
        let mut ss = 0.0;
        for u in 0..n_units {
            for t in 0..t_len {
                let p = state.responsibilities[[u, c, t]];
                if p == 0.0 {
                    continue;
                }
                let a = state.atom(c, u, t);
                let o = obs.slice(s![u, t, ..]);
                let cross: f64 = a.iter().zip(o.iter()).map(|(x, y)| x * y).sum();
                let aa: f64 = a.iter().map(|x| x * x).sum();
                ss += p * (col_sq[[u, t]] - 2.0 * cross + aa).max(0.0);
                mass += p;
            }
        }
        if mass < EMPTY_MASS {
            continue;
        }
        let denom = hp.a_sigma + 1.0 + 0.5 * d as f64 * mass;
        state.sigma2[c] = ((hp.b_sigma + 0.5 * ss) / denom).max(SIGMA2_FLOOR);
    }

    if !hp.covariate_naive && q > 0 && h > 1 {
        for t in 0..t_len {
            let psi_t = state.responsibilities.slice(s![.., .., t]);
            let old = state.beta.index_axis(Axis(0), t).to_owned();
            let new = m_step_beta(psi_t, x.view(), old.view(), v, hp.sigma_beta_diag);
            let f_old = weight_log_objective(psi_t, x.view(), old.view(), v, hp.sigma_beta_diag);
            let f_new = weight_log_objective(psi_t, x.view(), new.view(), v, hp.sigma_beta_diag);
            if f_new >= f_old {
                state.beta.index_axis_mut(Axis(0), t).assign(&new);
            } else {
                counts.1 += 1;
            }
        }
    }

    Ok(MStepOutcome {
        state,
        lambdas,
        selected,
        lasso_warnings: counts.0,
        beta_rejections: counts.1,
    })
}

/// Fits the precision model. Node series are standardised and covariates
/// standardised according to `hp`.
pub fn fit_idpmac(panel: &PanelDataset, hp: &HyperParams, seed: u64) -> Result<PrecisionFit> {
    hp.validate()?;
    let (n, v, t_len) = panel.data().dim();
    if v < 3 {
        return Err(Error::InvalidParameter(format!("precision model needs V >= 3, got {v}")));
    }
    let prepared = if hp.standardize_nodes {
        panel.standardized_nodes()
    } else {
        panel.clone()
    };
    let x = if hp.standardize_covariates {
        panel.standardized_covariates()
    } else {
        panel.covariates().clone()
    };
    let data = prepared.data();
    let h = hp.n_components;
    let d = v - 1;
    let q = x.ncols();
    let n_units = n * v;

    // sampler states and scatter matrices per (i, t)
    let mut samplers: Vec<GibbsState> = Vec::with_capacity(n * t_len);
    let mut scatter: Vec<DMatrix<f64>> = Vec::with_capacity(n * t_len);
    for i in 0..n {
        for (t, om) in initial_precisions(data.slice(s![i, .., ..])).into_iter().enumerate() {
            samplers.push(GibbsState::new(om)?);
            let y = DVector::from_fn(v, |k, _| data[[i, k, t]]);
            scatter.push(&y * y.transpose());
        }
    }
    let mut obs = Array3::zeros((n_units, t_len, d));
    let mut col_sq = Array2::zeros((n_units, t_len));
    for i in 0..n {
        for t in 0..t_len {
            let om = &samplers[i * t_len + t].omega;
            for k in 0..v {
                let col = column_offdiag(to_array(om).view(), k);
                col_sq[[i * v + k, t]] = col.dot(&col);
                obs.slice_mut(s![i * v + k, t, ..]).assign(&col);
            }
        }
    }
    let mut init_rng = stream_rng(seed, 0);
    let groups = subject_partition(data.view(), h, &mut init_rng);
    let mut state = initialize_from_partition(obs.view(), &groups, h, v, v, q);
    let mut omega_mean = Array4::zeros((n, t_len, v, v));
    let mut lambdas = Array3::from_elem((h, v, d), hp.lambda_grid[0]);
    let mut selected = Array3::from_elem((h, v, d), false);
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut lasso_warnings = 0;
    let mut beta_rejections = 0;
    let mut jitters = 0;
    let mut pd_audits = Vec::new();
    let mut decreases = 0;
    let mut oscillating = false;

    for iter in 0..hp.max_em_iters {
        iterations = iter + 1;
        // the first pass keeps the partition responsibilities
        if iter > 0 {
            state.responsibilities = e_step_responsibilities(obs.view(), &state, x.view());
        }

        // Monte Carlo E-step over (subject, scan)
        let summaries: Vec<GibbsSummary> = samplers
            .par_iter_mut()
            .enumerate()
            .map(|(idx, sampler)| {
                let (i, t) = (idx / t_len, idx % t_len);
                let priors: Vec<ColumnPrior> = (0..v)
                    .map(|k| {
                        let u = i * v + k;
                        ColumnPrior::from_mixture(
                            state.responsibilities.slice(s![u, .., t]),
                            state.atoms.slice(s![.., k, t, ..]),
                            state.sigma2.view(),
                        )
                    })
                    .collect();
                let mut rng = stream_rng(derive_seed(seed, iter as u64 + 1), idx as u64);
                gibbs_sample_precision(
                    sampler,
                    &scatter[idx],
                    &priors,
                    hp.alpha,
                    hp.mc_samples,
                    hp.mc_burn_in,
                    &mut rng,
                )
            })
            .collect();
        for (idx, sm) in summaries.iter().enumerate() {
            let (i, t) = (idx / t_len, idx % t_len);
            jitters += sm.jitters;
            let mean = to_array(&sm.mean);
            omega_mean.slice_mut(s![i, t, .., ..]).assign(&mean);
            for k in 0..v {
                obs.slice_mut(s![i * v + k, t, ..]).assign(&column_offdiag(mean.view(), k));
                col_sq[[i * v + k, t]] = sm.column_sq[k];
            }
        }

        let inputs = MStepInputs {
            obs: obs.view(),
            col_sq: col_sq.view(),
            x: x.view(),
            n,
            v,
        };
        let m = precision_m_steps(&inputs, &state, &lambdas, &selected, hp)?;
        lasso_warnings += m.lasso_warnings;
        beta_rejections += m.beta_rejections;
        state = m.state;
        lambdas = m.lambdas;
        selected = m.selected;

        // positive-definiteness audit on a deterministic sample
        let mut audit_rng = stream_rng(derive_seed(seed, 0xA0D1), iter as u64);
        let mut audited = 0;
        for i in 0..n {
            for t in 0..t_len {
                if audit_rng.random::<f64>() < AUDIT_FRACTION {
                    audited += 1;
                    if !is_positive_definite(omega_mean.slice(s![i, t, .., ..])) {
                        return Err(Error::NotPositiveDefinite(format!(
                            "subject {i}, scan {t} after iteration {iterations}"
                        )));
                    }
                }
            }
        }
        pd_audits.push((iterations, audited));

        let lp = observed_log_posterior(data.view(), &omega_mean, obs.view(), &state, x.view(), &lambdas, hp);
        if !lp.is_finite() {
            return Err(Error::NonFiniteLogPosterior { iteration: iterations });
        }
        if let Some(&prev) = trace.last() {
            let delta = lp - prev;
            if delta < 0.0 {
                decreases += 1;
                if decreases >= MAX_DECREASES {
                    return Err(Error::NonMonotone(iterations));
                }
            } else {
                decreases = 0;
            }
            if trace.len() >= 2 {
                let before = prev - trace[trace.len() - 2];
                if delta.abs() > 10.0 * hp.em_tol && before.abs() > 10.0 * hp.em_tol && delta * before < 0.0 {
                    if !oscillating {
                        log::warn!("log-posterior oscillates beyond 10x tolerance; consider more Monte Carlo samples");
                    }
                    oscillating = true;
                }
            }
            trace.push(lp);
            if delta.abs() < hp.em_tol {
                converged = true;
                break;
            }
        } else {
            trace.push(lp);
        }
    }

    for i in 0..n {
        for t in 0..t_len {
            if !is_positive_definite(omega_mean.slice(s![i, t, .., ..])) {
                return Err(Error::NotPositiveDefinite(format!("subject {i}, scan {t} in final audit")));
            }
        }
    }
    pd_audits.push((iterations, n * t_len));

    Ok(PrecisionFit {
        omega: omega_mean,
        state,
        lambdas,
        log_posterior_trace: trace,
        converged,
        iterations,
        lasso_warnings,
        beta_rejections,
        jitters,
        pd_audits,
        oscillating,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn two_by_two_partial() {
        let pc = partial_correlation_matrix(array![[2.0, 1.0], [1.0, 2.0]].view());
        assert_eq!(pc[[0, 1]], -0.5);
        assert_eq!(pc[[1, 1]], 1.0);
    }

    #[test]
    fn sweep_keeps_symmetry_and_inverse() {
        let mut rng = stream_rng(3, 0);
        let v = 5;
        let mut st = GibbsState::new(DMatrix::identity(v, v)).unwrap();
        let y = DVector::from_fn(v, |k, _| k as f64 * 0.3 - 0.5);
        let s = &y * y.transpose();
        let priors = vec![
            ColumnPrior {
                precision: 2.0,
                shift: DVector::from_element(v - 1, 0.1),
            };
            v
        ];
        for _ in 0..20 {
            gibbs_sweep(&mut st, &s, &priors, 1.0, &mut rng);
            assert_eq!(st.omega, st.omega.transpose());
            let prod = &st.omega * &st.sigma;
            assert!((prod - DMatrix::<f64>::identity(v, v)).amax() < 1e-8);
        }
    }
}
