//! Mixture machinery shared by both estimators: covariate-dependent mixture
//! weights, the responsibility E-step, and the closed-form M-steps for the
//! component variances and the weight-regression coefficients.
//!
//! A *unit* is one observation stream that receives its own responsibility:
//! a subject for the pairwise model (one unit per subject per edge) and a
//! (subject, node) pair for the precision model (`V` units per subject).
//! Units of one subject are stored contiguously, so the subject of unit `u`
//! is `u / units_per_subject`.

use nalgebra::{DMatrix, DVector};
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView3, Axis};
use rand_chacha::ChaCha8Rng;

use crate::assignment::min_cost_assignment;
use crate::kmeans::kmeans;

/// Σψ below this marks a component as empty; its atoms and variance are frozen.
pub const EMPTY_MASS: f64 = 1e-6;
const SIGMA2_FLOOR: f64 = 1e-8;
const WEIGHT_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureState {
    /// Atoms, shape `(H, G, T, D)`: `G` atom groups (1 for the pairwise model,
    /// `V` node-specific groups for the precision model), dimension `D`.
    pub atoms: Array4<f64>,
    /// Component variances, length `H`.
    pub sigma2: Array1<f64>,
    /// Weight-regression coefficients, shape `(T, H − 1, q)`; the last
    /// component is the reference and has implicit zero coefficients.
    pub beta: Array3<f64>,
    /// Responsibilities, shape `(units, H, T)`.
    pub responsibilities: Array3<f64>,
    pub units_per_subject: usize,
}

impl MixtureState {
    pub fn n_components(&self) -> usize {
        self.atoms.dim().0
    }

    pub fn n_groups(&self) -> usize {
        self.atoms.dim().1
    }

    pub fn n_scans(&self) -> usize {
        self.atoms.dim().2
    }

    pub fn dim(&self) -> usize {
        self.atoms.dim().3
    }

    pub fn n_units(&self) -> usize {
        self.responsibilities.dim().0
    }

    pub fn subject_of(&self, unit: usize) -> usize {
        unit / self.units_per_subject
    }

    /// Atom group used by `unit`.
    pub fn group_of(&self, unit: usize) -> usize {
        if self.n_groups() == 1 {
            0
        } else {
            unit % self.units_per_subject
        }
    }

    pub fn atom(&self, h: usize, unit: usize, t: usize) -> ArrayView1<'_, f64> {
        self.atoms.slice(s![h, self.group_of(unit), t, ..])
    }

    /// Argmax component per (unit, scan); ties go to the lower index.
    pub fn hard_labels(&self) -> Array2<usize> {
        let (n, h, t) = self.responsibilities.dim();
        Array2::from_shape_fn((n, t), |(u, s)| {
            let mut best = 0;
            for k in 1..h {
                if self.responsibilities[[u, k, s]] > self.responsibilities[[u, best, s]] {
                    best = k;
                }
            }
            best
        })
    }

    /// Total responsibility mass per component.
    pub fn component_mass(&self) -> Array1<f64> {
        self.responsibilities.sum_axis(Axis(2)).sum_axis(Axis(0))
    }

    /// Mixture weights for subject covariates `x` at scan `t`.
    pub fn weights(&self, x: ArrayView1<'_, f64>, t: usize) -> Array1<f64> {
        mixture_weights(x, self.beta.index_axis(Axis(0), t))
    }
}

/// Log mixture weights under the multinomial logistic link with the last
/// component as reference. Stable for large linear predictors.
pub fn log_mixture_weights(x: ArrayView1<'_, f64>, beta_t: ArrayView2<'_, f64>) -> Array1<f64> {
    let h = beta_t.nrows() + 1;
    let mut eta = Array1::zeros(h);
    for k in 0..h - 1 {
        eta[k] = beta_t.row(k).dot(&x);
    }
    let m = eta.fold(f64::NEG_INFINITY, |a: f64, &b| a.max(b));
    let lse = m + eta.iter().map(|e| (e - m).exp()).sum::<f64>().ln();
    eta.mapv(|e| e - lse)
}

pub fn mixture_weights(x: ArrayView1<'_, f64>, beta_t: ArrayView2<'_, f64>) -> Array1<f64> {
    log_mixture_weights(x, beta_t).mapv(f64::exp)
}

/// `log N(obs | atom, s2·I)`.
pub fn gaussian_log_density(obs: ArrayView1<'_, f64>, atom: ArrayView1<'_, f64>, s2: f64) -> f64 {
    let d = obs.len() as f64;
    let q: f64 = obs.iter().zip(atom.iter()).map(|(o, a)| (o - a) * (o - a)).sum();
    -0.5 * d * (2.0 * std::f64::consts::PI * s2).ln() - 0.5 * q / s2
}

/// Normalises log-scores in place into probabilities.
pub fn softmax_in_place(scores: &mut [f64]) {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in scores.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    for v in scores.iter_mut() {
        *v /= total;
    }
}

/// Responsibilities `ψ_h ∝ ξ_h(x)·N(obs | atom_h, σ²_h I)`, computed in log
/// space. `obs` has shape `(units, T, D)` and `x` shape `(N, q)`.
pub fn e_step_responsibilities(
    obs: ArrayView3<'_, f64>,
    state: &MixtureState,
    x: ArrayView2<'_, f64>,
) -> Array3<f64> {
    let (n_units, t_len, _) = obs.dim();
    let h = state.n_components();
    let mut out = Array3::zeros((n_units, h, t_len));
    let mut scores = vec![0.0; h];
    for t in 0..t_len {
        let beta_t = state.beta.index_axis(Axis(0), t);
        let mut cached: Option<(usize, Array1<f64>)> = None;
        for u in 0..n_units {
            let i = state.subject_of(u);
            if cached.as_ref().is_none_or(|c| c.0 != i) {
                cached = Some((i, log_mixture_weights(x.row(i), beta_t)));
            }
            let logw = &cached.as_ref().unwrap().1;
            let o = obs.slice(s![u, t, ..]);
            for k in 0..h {
                scores[k] = logw[k] + gaussian_log_density(o, state.atom(k, u, t), state.sigma2[k]);
            }
            softmax_in_place(&mut scores);
            for k in 0..h {
                out[[u, k, t]] = scores[k];
            }
        }
    }
    out
}

/// Which closed-form variance update applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceRule {
    /// `(b + ½Σψr²) / (a + ½Σψ − 1)` for scalar observations.
    Pairwise,
    /// `(b + ½Σψ‖r‖²) / (a + 1 + ½·D·Σψ)` for `D`-dimensional observations,
    /// with Σψ summed over all units (subject × node) and scans.
    Precision,
}

/// Variance M-step. Components with (near) zero mass keep `prev`; so does any
/// component whose pairwise-rule denominator is not positive (a warning is
/// logged). Results are floored at `1e-8`.
pub fn m_step_sigma2(
    resp: ArrayView3<'_, f64>,
    obs: ArrayView3<'_, f64>,
    state: &MixtureState,
    a_sigma: f64,
    b_sigma: f64,
    rule: VarianceRule,
    prev: &Array1<f64>,
) -> Array1<f64> {
    let (n_units, h, t_len) = resp.dim();
    let d = obs.dim().2 as f64;
    let mut out = prev.clone();
    for k in 0..h {
        let mut mass = 0.0;
        let mut ss = 0.0;
        for u in 0..n_units {
            for t in 0..t_len {
                let p = resp[[u, k, t]];
                if p == 0.0 {
                    continue;
                }
                let a = state.atom(k, u, t);
                let r2: f64 = obs
                    .slice(s![u, t, ..])
                    .iter()
                    .zip(a.iter())
                    .map(|(o, a)| (o - a) * (o - a))
                    .sum();
                mass += p;
                ss += p * r2;
            }
        }
        if mass < EMPTY_MASS {
            continue;
        }
        let denom = match rule {
            VarianceRule::Pairwise => a_sigma + 0.5 * mass - 1.0,
            VarianceRule::Precision => a_sigma + 1.0 + 0.5 * d * mass,
        };
        if denom <= 0.0 {
            log::warn!("component {k}: variance denominator {denom:.3e} <= 0; keeping previous value");
            continue;
        }
        out[k] = ((b_sigma + 0.5 * ss) / denom).max(SIGMA2_FLOOR);
    }
    out
}

/// Quadratic-approximation (one penalised IRLS step) update of the weight
/// coefficients at one scan.
///
/// `psi_t` has shape `(units, H)`. For each non-reference component the
/// working weights `w = p̃(1 − p̃)` (floored at `1e-10`) and responses
/// `z = x'β̃ + (ψ − p̃)/w` are built from the previous coefficients, and
/// `β̂ = (Σ_β⁻¹ + Σ w x x')⁻¹ Σ w z x` with the sums running over all units.
pub fn m_step_beta(
    psi_t: ArrayView2<'_, f64>,
    x: ArrayView2<'_, f64>,
    beta_prev: ArrayView2<'_, f64>,
    units_per_subject: usize,
    sigma_beta_diag: f64,
) -> Array2<f64> {
    let (n_units, h) = psi_t.dim();
    let q = x.ncols();
    let mut out = Array2::zeros((h - 1, q));
    if q == 0 {
        return out;
    }
    let probs: Vec<Array1<f64>> = (0..x.nrows())
        .map(|i| mixture_weights(x.row(i), beta_prev))
        .collect();
    for k in 0..h - 1 {
        let mut lhs = DMatrix::<f64>::identity(q, q) / sigma_beta_diag;
        let mut rhs = DVector::<f64>::zeros(q);
        for u in 0..n_units {
            let i = u / units_per_subject;
            let xi = x.row(i);
            let p = probs[i][k];
            let w = (p * (1.0 - p)).max(WEIGHT_FLOOR);
            let z = beta_prev.row(k).dot(&xi) + (psi_t[[u, k]] - p) / w;
            for a in 0..q {
                rhs[a] += w * z * xi[a];
                for b in 0..q {
                    lhs[(a, b)] += w * xi[a] * xi[b];
                }
            }
        }
        let sol = lhs
            .clone()
            .cholesky()
            .map(|c| c.solve(&rhs))
            .or_else(|| lhs.lu().solve(&rhs))
            .unwrap_or_else(|| DVector::zeros(q));
        for a in 0..q {
            out[[k, a]] = sol[a];
        }
    }
    out
}

/// The weight part of the augmented log-posterior at one scan:
/// `Σ_units Σ_h ψ log ξ_h(x) − ½ β'Σ_β⁻¹β − ½ log det Σ_β` summed over
/// non-reference components.
pub fn weight_log_objective(
    psi_t: ArrayView2<'_, f64>,
    x: ArrayView2<'_, f64>,
    beta_t: ArrayView2<'_, f64>,
    units_per_subject: usize,
    sigma_beta_diag: f64,
) -> f64 {
    let (n_units, h) = psi_t.dim();
    let q = x.ncols();
    let mut total = 0.0;
    let mut cached: Option<(usize, Array1<f64>)> = None;
    for u in 0..n_units {
        let i = u / units_per_subject;
        if cached.as_ref().is_none_or(|c| c.0 != i) {
            cached = Some((i, log_mixture_weights(x.row(i), beta_t)));
        }
        let lw = &cached.as_ref().unwrap().1;
        for k in 0..h {
            let p = psi_t[[u, k]];
            if p > 0.0 {
                total += p * lw[k];
            }
        }
    }
    let quad: f64 = beta_t.iter().map(|b| b * b).sum::<f64>() / sigma_beta_diag;
    total - 0.5 * quad - 0.5 * (h - 1) as f64 * q as f64 * sigma_beta_diag.ln()
}

/// Initial state: per-scan K-means of the unit observations within each atom
/// group, components aligned across scans to the previous scan's centers by
/// optimal assignment, hard initial responsibilities, pooled within-cluster
/// variances and zero coefficients.
pub fn initialize_state(
    obs: ArrayView3<'_, f64>,
    n_components: usize,
    units_per_subject: usize,
    n_groups: usize,
    n_covariates: usize,
    rng: &mut ChaCha8Rng,
) -> MixtureState {
    let (n_units, t_len, d) = obs.dim();
    let h = n_components;
    let mut atoms = Array4::zeros((h, n_groups, t_len, d));
    let mut resp = Array3::zeros((n_units, h, t_len));
    let mut ss = vec![0.0; h];
    let mut counts = vec![0usize; h];
    for g in 0..n_groups {
        let units: Vec<usize> = (0..n_units)
            .filter(|&u| n_groups == 1 || u % units_per_subject == g)
            .collect();
        let mut prev: Option<Array2<f64>> = None;
        for t in 0..t_len {
            let pts = Array2::from_shape_fn((units.len(), d), |(r, c)| obs[[units[r], t, c]]);
            let k = h.min(units.len());
            let fit = kmeans(pts.view(), k, 3, rng);
            let mut centers = Array2::zeros((h, d));
            centers.slice_mut(s![..k, ..]).assign(&fit.centers);
            for extra in k..h {
                // fewer units than components: duplicate with a small offset
                let mut row = fit.centers.row(extra % k).to_owned();
                row.mapv_inplace(|v| v + 1e-3 * (extra + 1) as f64);
                centers.row_mut(extra).assign(&row);
            }
            // order[c] = component that receives center c
            let order: Vec<usize> = match &prev {
                None => {
                    let mut idx: Vec<usize> = (0..h).collect();
                    idx.sort_by(|&a, &b| centers[[a, 0]].total_cmp(&centers[[b, 0]]));
                    let mut order = vec![0; h];
                    for (comp, &c) in idx.iter().enumerate() {
                        order[c] = comp;
                    }
                    order
                }
                Some(p) => {
                    let cost = Array2::from_shape_fn((h, h), |(c, comp)| {
                        centers
                            .row(c)
                            .iter()
                            .zip(p.row(comp).iter())
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                    });
                    min_cost_assignment(&cost)
                }
            };
            let mut aligned = Array2::zeros((h, d));
            for c in 0..h {
                aligned.row_mut(order[c]).assign(&centers.row(c));
            }
            for (r, &u) in units.iter().enumerate() {
                let comp = order[fit.labels[r]];
                resp[[u, comp, t]] = 1.0;
                ss[comp] += pts
                    .row(r)
                    .iter()
                    .zip(aligned.row(comp).iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
                counts[comp] += d;
            }
            atoms.slice_mut(s![.., g, t, ..]).assign(&aligned);
            prev = Some(aligned);
        }
    }
    let total_var = {
        let mean = obs.mean().unwrap_or(0.0);
        obs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / obs.len().max(1) as f64
    };
    let sigma2 = Array1::from_iter((0..h).map(|k| {
        let v = if counts[k] > 0 {
            ss[k] / counts[k] as f64
        } else {
            total_var
        };
        v.max(1e-4)
    }));
    MixtureState {
        atoms,
        sigma2,
        beta: Array3::zeros((t_len, h.saturating_sub(1), n_covariates)),
        responsibilities: resp,
        units_per_subject,
    }
}

/// Initial state from a partition of the subjects: every unit of a subject
/// starts in its subject's component, atoms are the per-scan component means
/// and each variance is the pooled within-component spread. Components
/// without members copy the overall mean.
pub fn initialize_from_partition(
    obs: ArrayView3<'_, f64>,
    subject_labels: &[usize],
    n_components: usize,
    units_per_subject: usize,
    n_groups: usize,
    n_covariates: usize,
) -> MixtureState {
    let (n_units, t_len, d) = obs.dim();
    let h = n_components;
    let group_of = |u: usize| if n_groups == 1 { 0 } else { u % units_per_subject };
    let comp_of = |u: usize| subject_labels[u / units_per_subject];
    let mut resp = Array3::zeros((n_units, h, t_len));
    let mut atoms = Array4::zeros((h, n_groups, t_len, d));
    let mut counts = Array3::<f64>::zeros((h, n_groups, t_len));
    let mut overall = Array3::<f64>::zeros((n_groups, t_len, d));
    for u in 0..n_units {
        let (c, g) = (comp_of(u), group_of(u));
        for t in 0..t_len {
            resp[[u, c, t]] = 1.0;
            counts[[c, g, t]] += 1.0;
            for k in 0..d {
                atoms[[c, g, t, k]] += obs[[u, t, k]];
                overall[[g, t, k]] += obs[[u, t, k]];
            }
        }
    }
    let per_group = (n_units / n_groups.max(1)).max(1) as f64;
    for c in 0..h {
        for g in 0..n_groups {
            for t in 0..t_len {
                let m = counts[[c, g, t]];
                for k in 0..d {
                    atoms[[c, g, t, k]] = if m > 0.0 {
                        atoms[[c, g, t, k]] / m
                    } else {
                        overall[[g, t, k]] / per_group
                    };
                }
            }
        }
    }
    let mut ss = vec![0.0; h];
    let mut n_ss = vec![0usize; h];
    for u in 0..n_units {
        let (c, g) = (comp_of(u), group_of(u));
        for t in 0..t_len {
            for k in 0..d {
                ss[c] += (obs[[u, t, k]] - atoms[[c, g, t, k]]).powi(2);
            }
            n_ss[c] += d;
        }
    }
    let pooled = ss.iter().sum::<f64>() / n_ss.iter().sum::<usize>().max(1) as f64;
    let sigma2 = Array1::from_iter((0..h).map(|c| {
        let v = if n_ss[c] > 0 { ss[c] / n_ss[c] as f64 } else { pooled };
        v.max(1e-4)
    }));
    MixtureState {
        atoms,
        sigma2,
        beta: Array3::zeros((t_len, h.saturating_sub(1), n_covariates)),
        responsibilities: resp,
        units_per_subject,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn state_1d(atoms: &[f64], sigma2: &[f64], q: usize) -> MixtureState {
        let h = atoms.len();
        let mut a = Array4::zeros((h, 1, 1, 1));
        for k in 0..h {
            a[[k, 0, 0, 0]] = atoms[k];
        }
        MixtureState {
            atoms: a,
            sigma2: Array1::from(sigma2.to_vec()),
            beta: Array3::zeros((1, h - 1, q)),
            responsibilities: Array3::zeros((1, h, 1)),
            units_per_subject: 1,
        }
    }

    #[test]
    fn weights_examples() {
        let w = mixture_weights(array![0.7, -1.0].view(), Array2::zeros((2, 2)).view());
        for v in w.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let w = mixture_weights(array![1.0].view(), array![[0.0]].view());
        assert_eq!(w.to_vec(), vec![0.5, 0.5]);
        let w = mixture_weights(array![1.0].view(), array![[3f64.ln()]].view());
        assert!((w[0] - 0.75).abs() < 1e-15 && (w[1] - 0.25).abs() < 1e-15);
        let w = mixture_weights(array![1.0].view(), array![[700.0], [-700.0]].view());
        assert!(w.iter().all(|v| v.is_finite()));
        assert!((w.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn e_step_examples() {
        let obs = Array3::zeros((1, 1, 1));
        let x = Array2::zeros((1, 1));
        let st = state_1d(&[0.0, 0.0], &[1.0, 1.0], 1);
        let r = e_step_responsibilities(obs.view(), &st, x.view());
        assert!((r[[0, 0, 0]] - 0.5).abs() < 1e-15);

        let st = state_1d(&[0.0, 1.0], &[1.0, 1.0], 1);
        let r = e_step_responsibilities(obs.view(), &st, x.view());
        let oracle = 1.0 / (1.0 + (-0.5f64).exp());
        assert!((r[[0, 0, 0]] - oracle).abs() < 1e-12);
        assert!((oracle - 0.622_459_331_201_854_6).abs() < 1e-12);

        // degenerate prior: all weight on component 0
        let mut st = state_1d(&[5.0, 0.0], &[1.0, 1.0], 1);
        st.beta[[0, 0, 0]] = 800.0;
        let x1 = Array2::ones((1, 1));
        let r = e_step_responsibilities(obs.view(), &st, x1.view());
        assert!((r[[0, 0, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sigma2_examples() {
        // pairwise: residuals zero, mass 2 -> 1 / (0.1 + 1 - 1) = 10
        let obs = Array3::zeros((2, 1, 1));
        let mut st = state_1d(&[0.0], &[1.0], 0);
        st.responsibilities = Array3::ones((2, 1, 1));
        let out = m_step_sigma2(
            st.responsibilities.view(),
            obs.view(),
            &st,
            0.1,
            1.0,
            VarianceRule::Pairwise,
            &st.sigma2,
        );
        assert!((out[0] - 10.0).abs() < 1e-12);

        // precision: V = 3 (D = 2), one subject-scan with all three node units
        // in the component, total squared residual 4 -> (1 + 2) / (0.1 + 1 + 3)
        let mut obs = Array3::zeros((3, 1, 2));
        obs[[0, 0, 0]] = 2.0;
        let st = MixtureState {
            atoms: Array4::zeros((1, 3, 1, 2)),
            sigma2: array![1.0],
            beta: Array3::zeros((1, 0, 0)),
            responsibilities: Array3::ones((3, 1, 1)),
            units_per_subject: 3,
        };
        let out = m_step_sigma2(
            st.responsibilities.view(),
            obs.view(),
            &st,
            0.1,
            1.0,
            VarianceRule::Precision,
            &st.sigma2,
        );
        assert!((out[0] - 3.0 / 4.1).abs() < 1e-12);
    }

    #[test]
    fn sigma2_nonpositive_denominator_keeps_previous() {
        let obs = Array3::zeros((1, 1, 1));
        let mut st = state_1d(&[0.0], &[0.37], 0);
        st.responsibilities = Array3::ones((1, 1, 1));
        let out = m_step_sigma2(
            st.responsibilities.view(),
            obs.view(),
            &st,
            0.1,
            1.0,
            VarianceRule::Pairwise,
            &st.sigma2,
        );
        assert_eq!(out[0], 0.37);
    }

    #[test]
    fn beta_scalar_oracle() {
        // one subject, x = 1, ψ equal to the current prediction: z = β_prev,
        // w = p(1-p), β̂ = w β_prev / (1 + w)
        let bp = 0.8f64;
        let p = bp.exp() / (1.0 + bp.exp());
        let psi = array![[p, 1.0 - p]];
        let out = m_step_beta(psi.view(), array![[1.0]].view(), array![[bp]].view(), 1, 1.0);
        let w = p * (1.0 - p);
        assert!((out[[0, 0]] - w * bp / (1.0 + w)).abs() < 1e-14);
    }

    #[test]
    fn beta_zero_covariates() {
        let psi = array![[0.9, 0.1], [0.2, 0.8]];
        let out = m_step_beta(psi.view(), Array2::zeros((2, 3)).view(), Array2::zeros((1, 3)).view(), 1, 1.0);
        assert!(out.iter().all(|&b| b == 0.0));
    }
}
