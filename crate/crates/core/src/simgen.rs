//! Synthetic panels: covariate-keyed subject clusters whose members share
//! piecewise-constant sparse network supports and edge weights, with
//! subject-specific change-point locations. Also AR prewhitening and the
//! sliding-window correlation baseline.

use crate::data::{fisher_transform, n_edges, PanelDataset};
use crate::error::{Error, Result};
use crate::graphs::{barabasi_albert, erdos_renyi, watts_strogatz, EdgeSet};
use crate::rng::stream_rng;
use crate::window::pearson;
use crate::DynamicNetworkSet;
use nalgebra::DMatrix;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Topology {
    /// `p = None` gives mean degree 4.
    ErdosRenyi { p: Option<f64> },
    SmallWorld { k: usize, rewire_p: f64 },
    ScaleFree { m: usize },
}

impl Default for Topology {
    fn default() -> Self {
        Topology::ErdosRenyi { p: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum ObsModel {
    Ggm,
    /// `y_t = ar_coeff * y_{t-1} + e_t`.
    Var { ar_coeff: f64 },
}

/// Who shares the Uniform[−1,1] edge weights of a phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSharing {
    /// One weight draw per cluster and phase.
    #[default]
    Cluster,
    /// Fresh weights for every subject on the cluster's support.
    Subject,
}

impl Default for ObsModel {
    fn default() -> Self {
        ObsModel::Ggm
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_subjects: usize,
    pub n_nodes: usize,
    pub n_scans: usize,
    pub cluster_sizes: Vec<usize>,
    pub cps_per_cluster: Vec<usize>,
    pub topology: Topology,
    pub obs_model: ObsModel,
    pub n_spurious: usize,
    pub edge_weights: WeightSharing,
    pub seed: u64,
    /// Per-subject change-point displacement from the cluster anchor, ± scans.
    pub cp_jitter: usize,
    pub min_segment: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_subjects: 40,
            n_nodes: 40,
            n_scans: 300,
            cluster_sizes: vec![10; 4],
            cps_per_cluster: vec![3, 3, 4, 4],
            topology: Topology::default(),
            obs_model: ObsModel::default(),
            n_spurious: 0,
            edge_weights: WeightSharing::Cluster,
            seed: 1,
            cp_jitter: 3,
            min_segment: 20,
        }
    }
}

impl SimConfig {
    /// Reduced setting used for routine validation: 4 clusters of 5 subjects,
    /// 15 nodes, 150 scans.
    pub fn scaled(seed: u64) -> Self {
        Self {
            n_subjects: 20,
            n_nodes: 15,
            n_scans: 150,
            cluster_sizes: vec![5; 4],
            seed,
            ..Self::default()
        }
    }

    pub fn n_clusters(&self) -> usize {
        self.cluster_sizes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.n_nodes < 2 || self.n_scans < 2 {
            return bad(format!("need V >= 2 and T >= 2, got V={}, T={}", self.n_nodes, self.n_scans));
        }
        if self.cluster_sizes.is_empty() || self.cluster_sizes.len() > 4 {
            return bad(format!(
                "between 1 and 4 clusters are supported (two binary covariates), got {}",
                self.cluster_sizes.len()
            ));
        }
        if self.cluster_sizes.iter().any(|&c| c == 0) {
            return bad("cluster sizes must be positive".into());
        }
        let total: usize = self.cluster_sizes.iter().sum();
        if total != self.n_subjects {
            return bad(format!("cluster sizes sum to {total} but N = {}", self.n_subjects));
        }
        if self.cps_per_cluster.len() != self.cluster_sizes.len() {
            return bad(format!(
                "{} change-point counts for {} clusters",
                self.cps_per_cluster.len(),
                self.cluster_sizes.len()
            ));
        }
        if self.n_spurious > 8 {
            return bad(format!("at most 8 spurious covariates, got {}", self.n_spurious));
        }
        for &k in &self.cps_per_cluster {
            if 4 * k >= self.n_scans {
                return bad(format!("{k} change points is not below T/4 for T = {}", self.n_scans));
            }
            if (k + 1) * self.min_segment + 2 * k * self.cp_jitter > self.n_scans {
                return bad(format!(
                    "{k} change points with minimum segment {} and jitter {} do not fit in T = {}",
                    self.min_segment, self.cp_jitter, self.n_scans
                ));
            }
        }
        match &self.topology {
            Topology::ErdosRenyi { p: Some(p) } if !(0.0..=1.0).contains(p) => {
                return bad(format!("edge probability {p} outside [0, 1]"))
            }
            Topology::SmallWorld { k, rewire_p } if *k == 0 || !(0.0..=1.0).contains(rewire_p) => {
                return bad(format!("small-world parameters k={k}, rewire_p={rewire_p} invalid"))
            }
            Topology::ScaleFree { m } if *m == 0 || *m >= self.n_nodes => {
                return bad(format!("scale-free attachment m={m} must be in 1..V"))
            }
            _ => {}
        }
        if let ObsModel::Var { ar_coeff } = self.obs_model {
            if !(ar_coeff.abs() < 1.0) {
                return bad(format!("VAR coefficient {ar_coeff} is not stable"));
            }
        }
        Ok(())
    }
}

/// Ground truth of one simulated panel.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimTruth {
    /// Per subject, sorted first scans of each new phase (0-based).
    pub true_cps: Vec<Vec<usize>>,
    /// Per cluster, the anchor locations the members are jittered around.
    pub cluster_cps: Vec<Vec<usize>>,
    /// Per subject, one precision matrix per phase.
    pub phase_precisions: Vec<Vec<Array2<f64>>>,
    pub true_labels: Vec<usize>,
    pub covariates: Array2<f64>,
    /// Per cluster, per phase edge supports.
    pub supports: Vec<Vec<Vec<(usize, usize)>>>,
    pub n_scans: usize,
}

impl SimTruth {
    pub fn n_subjects(&self) -> usize {
        self.true_labels.len()
    }

    pub fn phase_at(&self, subject: usize, t: usize) -> usize {
        self.true_cps[subject].iter().filter(|&&c| c <= t).count()
    }

    pub fn precision(&self, subject: usize, t: usize) -> &Array2<f64> {
        &self.phase_precisions[subject][self.phase_at(subject, t)]
    }

    /// Dense `(N, T, V, V)` precision tensor.
    pub fn precision_tensor(&self) -> Array4<f64> {
        let n = self.n_subjects();
        let v = self.phase_precisions[0][0].nrows();
        let mut out = Array4::zeros((n, self.n_scans, v, v));
        for i in 0..n {
            for t in 0..self.n_scans {
                out.slice_mut(s![i, t, .., ..]).assign(self.precision(i, t));
            }
        }
        out
    }

    pub fn precision_networks(&self) -> DynamicNetworkSet {
        DynamicNetworkSet::Precision(self.precision_tensor())
    }

    /// Fisher-z of the implied marginal correlations, `(N, T, E)`.
    pub fn pairwise_fisher_z(&self) -> Array3<f64> {
        let n = self.n_subjects();
        let v = self.phase_precisions[0][0].nrows();
        let mut out = Array3::zeros((n, self.n_scans, n_edges(v)));
        for i in 0..n {
            let phase_z: Vec<Array1<f64>> = self.phase_precisions[i]
                .iter()
                .map(|omega| marginal_fisher_z(omega))
                .collect();
            for t in 0..self.n_scans {
                out.slice_mut(s![i, t, ..]).assign(&phase_z[self.phase_at(i, t)]);
            }
        }
        out
    }

    /// Partial correlations `-w_jl / sqrt(w_jj w_ll)`, `(N, T, E)`.
    pub fn partial_correlations(&self) -> Array3<f64> {
        let n = self.n_subjects();
        let v = self.phase_precisions[0][0].nrows();
        let mut out = Array3::zeros((n, self.n_scans, n_edges(v)));
        for i in 0..n {
            let phase_pc: Vec<Array1<f64>> =
                self.phase_precisions[i].iter().map(|o| partial_from_precision(o)).collect();
            for t in 0..self.n_scans {
                out.slice_mut(s![i, t, ..]).assign(&phase_pc[self.phase_at(i, t)]);
            }
        }
        out
    }
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    let (r, c) = a.dim();
    DMatrix::from_fn(r, c, |i, j| a[[i, j]])
}

fn marginal_fisher_z(omega: &Array2<f64>) -> Array1<f64> {
    let v = omega.nrows();
    let sigma = to_dmatrix(omega)
        .cholesky()
        .expect("simulated precision is positive definite")
        .inverse();
    let mut out = Array1::zeros(n_edges(v));
    let mut e = 0;
    for j in 0..v {
        for l in (j + 1)..v {
            out[e] = fisher_transform(sigma[(j, l)] / (sigma[(j, j)] * sigma[(l, l)]).sqrt());
            e += 1;
        }
    }
    out
}

/// Upper-triangle partial correlations of a precision matrix, edge order.
pub fn partial_from_precision(omega: &Array2<f64>) -> Array1<f64> {
    let v = omega.nrows();
    let mut out = Array1::zeros(n_edges(v));
    let mut e = 0;
    for j in 0..v {
        for l in (j + 1)..v {
            out[e] = -omega[[j, l]] / (omega[[j, j]] * omega[[l, l]]).sqrt();
            e += 1;
        }
    }
    out
}

/// Precision matrix with the given off-diagonal weights and diagonal equal to
/// one plus the row's absolute off-diagonal sum (strictly diagonally dominant).
pub fn precision_from_weights(v: usize, weights: &[((usize, usize), f64)]) -> Array2<f64> {
    let mut omega = Array2::zeros((v, v));
    for &((j, l), w) in weights {
        omega[[j, l]] = w;
        omega[[l, j]] = w;
    }
    for j in 0..v {
        let off: f64 = omega.row(j).iter().map(|x: &f64| x.abs()).sum();
        omega[[j, j]] = off + 1.0;
    }
    omega
}

fn draw_support(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> EdgeSet {
    let v = cfg.n_nodes;
    let raw = match &cfg.topology {
        Topology::ErdosRenyi { p } => {
            let p = p.unwrap_or_else(|| (4.0 / (v as f64 - 1.0)).min(1.0));
            erdos_renyi(v, p, rng)
        }
        Topology::SmallWorld { k, rewire_p } => watts_strogatz(v, *k, *rewire_p, rng),
        Topology::ScaleFree { m } => barabasi_albert(v, *m, rng),
    };
    // random node relabelling so structured generators do not always put the
    // same nodes in the same roles
    let mut perm: Vec<usize> = (0..v).collect();
    perm.shuffle(rng);
    raw.into_iter()
        .map(|(a, b)| {
            let (x, y) = (perm[a], perm[b]);
            (x.min(y), x.max(y))
        })
        .collect()
}

const MAX_REDRAWS: usize = 1000;

/// Per cluster, per phase supports: consecutive phases differ and, at every
/// phase index, no two clusters share a support.
fn draw_supports(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<EdgeSet>> {
    let mut out: Vec<Vec<EdgeSet>> = Vec::new();
    for c in 0..cfg.n_clusters() {
        let mut phases: Vec<EdgeSet> = Vec::new();
        for p in 0..=cfg.cps_per_cluster[c] {
            let mut g = draw_support(cfg, rng);
            for _ in 0..MAX_REDRAWS {
                let clash_prev = phases.last().is_some_and(|prev| *prev == g);
                let clash_other = out.iter().any(|o| o.get(p).is_some_and(|x| *x == g));
                if !clash_prev && !clash_other {
                    break;
                }
                g = draw_support(cfg, rng);
            }
            phases.push(g);
        }
        out.push(phases);
    }
    out
}

/// Sorted anchors with enough room that any ±jitter displacement keeps every
/// segment at least `min_segment` long.
fn draw_anchors(k: usize, cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if k == 0 {
        return Vec::new();
    }
    let (t, j, m) = (cfg.n_scans, cfg.cp_jitter, cfg.min_segment);
    let lo = m + j;
    let hi = t - m - j; // inclusive upper bound for an anchor
    let gap = m + 2 * j;
    for _ in 0..10_000 {
        let mut a: Vec<usize> = (0..k).map(|_| rng.random_range(lo..=hi)).collect();
        a.sort_unstable();
        if a.windows(2).all(|w| w[1] - w[0] >= gap) {
            return a;
        }
    }
    // feasible by validation; evenly spaced fallback
    (1..=k).map(|i| i * t / (k + 1)).collect()
}

fn jitter_cps(anchors: &[usize], cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let j = cfg.cp_jitter as i64;
    anchors
        .iter()
        .map(|&a| (a as i64 + rng.random_range(-j..=j)) as usize)
        .collect()
}

fn cholesky_factor(omega: &Array2<f64>) -> DMatrix<f64> {
    to_dmatrix(omega)
        .cholesky()
        .expect("diagonally dominant precision is positive definite")
        .l()
}

/// Draw from N(0, Ω⁻¹) given the lower Cholesky factor `L` of Ω: solve `Lᵀ y = z`.
fn draw_gaussian(l: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> nalgebra::DVector<f64> {
    let v = l.nrows();
    let z = nalgebra::DVector::from_fn(v, |_, _| StandardNormal.sample(rng));
    l.transpose()
        .solve_upper_triangular(&z)
        .expect("non-singular triangular factor")
}

const VAR_BURN_IN: usize = 50;

struct SubjectDraw {
    cps: Vec<usize>,
    precisions: Vec<Array2<f64>>,
    series: Array2<f64>,
}

type PhaseWeights = Vec<((usize, usize), f64)>;

fn draw_weights(supports: &[EdgeSet], rng: &mut ChaCha8Rng) -> Vec<PhaseWeights> {
    supports
        .iter()
        .map(|sup| sup.iter().map(|&e| (e, rng.random_range(-1.0..=1.0))).collect())
        .collect()
}

fn simulate_subject(
    cfg: &SimConfig,
    anchors: &[usize],
    supports: &[EdgeSet],
    shared: Option<&[PhaseWeights]>,
    rng: &mut ChaCha8Rng,
) -> SubjectDraw {
    let (v, t) = (cfg.n_nodes, cfg.n_scans);
    let cps = jitter_cps(anchors, cfg, rng);
    let weights = match shared {
        Some(w) => w.to_vec(),
        None => draw_weights(supports, rng),
    };
    let precisions: Vec<Array2<f64>> = weights.iter().map(|w| precision_from_weights(v, w)).collect();
    let factors: Vec<DMatrix<f64>> = precisions.iter().map(cholesky_factor).collect();
    let mut series = Array2::zeros((v, t));
    let mut phase = 0;
    match cfg.obs_model {
        ObsModel::Ggm => {
            for s in 0..t {
                while phase < cps.len() && cps[phase] <= s {
                    phase += 1;
                }
                let y = draw_gaussian(&factors[phase], rng);
                for node in 0..v {
                    series[[node, s]] = y[node];
                }
            }
        }
        ObsModel::Var { ar_coeff } => {
            let mut prev = nalgebra::DVector::zeros(v);
            for _ in 0..VAR_BURN_IN {
                prev = prev * ar_coeff + draw_gaussian(&factors[0], rng);
            }
            for s in 0..t {
                while phase < cps.len() && cps[phase] <= s {
                    phase += 1;
                }
                prev = prev * ar_coeff + draw_gaussian(&factors[phase], rng);
                for node in 0..v {
                    series[[node, s]] = prev[node];
                }
            }
        }
    }
    SubjectDraw {
        cps,
        precisions,
        series,
    }
}

/// Two binary cell columns then `n_spurious` columns alternating
/// Uniform[0,1] and standard normal.
fn draw_covariates(cfg: &SimConfig, labels: &[usize], rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = labels.len();
    let mut x = Array2::zeros((n, 2 + cfg.n_spurious));
    for (i, &c) in labels.iter().enumerate() {
        x[[i, 0]] = ((c >> 1) & 1) as f64;
        x[[i, 1]] = (c & 1) as f64;
    }
    for k in 0..cfg.n_spurious {
        for i in 0..n {
            x[[i, 2 + k]] = if k % 2 == 0 {
                rng.random::<f64>()
            } else {
                StandardNormal.sample(rng)
            };
        }
    }
    x
}

// stream ids for derived seeds
const STREAM_SUPPORTS: u64 = 0;
const STREAM_COVARIATES: u64 = 1;
const STREAM_ANCHORS: u64 = 2;
const STREAM_WEIGHTS: u64 = 3;
const STREAM_SUBJECT0: u64 = 1_000;

/// Simulates a panel and its ground truth. Subjects are ordered by cluster.
pub fn generate(cfg: &SimConfig) -> Result<(PanelDataset, SimTruth)> {
    cfg.validate()?;
    let (n, v, t) = (cfg.n_subjects, cfg.n_nodes, cfg.n_scans);
    let supports = draw_supports(cfg, &mut stream_rng(cfg.seed, STREAM_SUPPORTS));
    let mut anchor_rng = stream_rng(cfg.seed, STREAM_ANCHORS);
    let anchors: Vec<Vec<usize>> = cfg
        .cps_per_cluster
        .iter()
        .map(|&k| draw_anchors(k, cfg, &mut anchor_rng))
        .collect();
    let mut weight_rng = stream_rng(cfg.seed, STREAM_WEIGHTS);
    let cluster_weights: Vec<Vec<PhaseWeights>> = supports
        .iter()
        .map(|sup| draw_weights(sup, &mut weight_rng))
        .collect();
    let labels: Vec<usize> = cfg
        .cluster_sizes
        .iter()
        .enumerate()
        .flat_map(|(c, &size)| std::iter::repeat_n(c, size))
        .collect();
    let draws: Vec<SubjectDraw> = labels
        .par_iter()
        .enumerate()
        .map(|(i, &c)| {
            let mut rng = stream_rng(cfg.seed, STREAM_SUBJECT0 + i as u64);
            let shared = match cfg.edge_weights {
                WeightSharing::Cluster => Some(cluster_weights[c].as_slice()),
                WeightSharing::Subject => None,
            };
            simulate_subject(cfg, &anchors[c], &supports[c], shared, &mut rng)
        })
        .collect();
    let covariates = draw_covariates(cfg, &labels, &mut stream_rng(cfg.seed, STREAM_COVARIATES));

    let mut data = Array3::zeros((n, v, t));
    for (i, d) in draws.iter().enumerate() {
        data.slice_mut(s![i, .., ..]).assign(&d.series);
    }
    let ids: Vec<String> = (0..n).map(|i| format!("sub{:04}", i + 1)).collect();
    let names: Vec<String> = (0..v).map(|k| format!("node{:03}", k + 1)).collect();
    let panel = PanelDataset::new(data, covariates.clone(), Some(names), ids)?;
    let truth = SimTruth {
        true_cps: draws.iter().map(|d| d.cps.clone()).collect(),
        cluster_cps: anchors,
        phase_precisions: draws.into_iter().map(|d| d.precisions).collect(),
        true_labels: labels,
        covariates,
        supports: supports
            .into_iter()
            .map(|ph| ph.into_iter().map(|g| g.into_iter().collect()).collect())
            .collect(),
        n_scans: t,
    };
    Ok((panel, truth))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderCriterion {
    Aic,
    Bic,
}

/// Outcome of prewhitening one panel.
#[derive(Debug, Clone)]
pub struct Prewhitened {
    pub panel: PanelDataset,
    /// `(N, V)` selected AR orders.
    pub orders: Array2<usize>,
    /// `(N, V)` series that were differenced instead of AR-filtered.
    pub differenced: Array2<bool>,
}

/// Yule–Walker AR fit by Levinson–Durbin: returns, for each order
/// `0..=max_p`, the coefficients, innovation variance and the largest
/// absolute reflection coefficient seen so far.
fn levinson(x: ArrayView1<'_, f64>, max_p: usize) -> Vec<(Vec<f64>, f64, f64)> {
    let n = x.len();
    let mean = x.mean().unwrap_or(0.0);
    let acov: Vec<f64> = (0..=max_p)
        .map(|k| (k..n).map(|t| (x[t] - mean) * (x[t - k] - mean)).sum::<f64>() / n as f64)
        .collect();
    let mut out = vec![(Vec::new(), acov[0], 0.0)];
    let mut phi: Vec<f64> = Vec::new();
    let mut err = acov[0];
    let mut max_refl: f64 = 0.0;
    for p in 1..=max_p {
        if err <= 0.0 {
            break;
        }
        let acc: f64 = (1..p).map(|j| phi[j - 1] * acov[p - j]).sum();
        let kappa = (acov[p] - acc) / err;
        let mut next = vec![0.0; p];
        for j in 1..p {
            next[j - 1] = phi[j - 1] - kappa * phi[p - j - 1];
        }
        next[p - 1] = kappa;
        phi = next;
        err *= 1.0 - kappa * kappa;
        max_refl = max_refl.max(kappa.abs());
        out.push((phi.clone(), err, max_refl));
    }
    out
}

const UNIT_ROOT_TOL: f64 = 1e-3;

/// Whitens one series; returns residuals, chosen order and whether the
/// differencing fallback fired.
pub fn prewhiten_series(
    x: ArrayView1<'_, f64>,
    max_p: usize,
    criterion: OrderCriterion,
) -> (Array1<f64>, usize, bool) {
    let n = x.len();
    let fits = levinson(x, max_p);
    let nf = n as f64;
    let score = |p: usize, err: f64| {
        let pen = match criterion {
            OrderCriterion::Aic => 2.0 * p as f64,
            OrderCriterion::Bic => p as f64 * nf.ln(),
        };
        nf * err.max(1e-300).ln() + pen
    };
    let (p, (phi, _, refl)) = fits
        .iter()
        .enumerate()
        .min_by(|(pa, a), (pb, b)| score(*pa, a.1).total_cmp(&score(*pb, b.1)))
        .expect("order 0 always present");
    if *refl >= 1.0 - UNIT_ROOT_TOL {
        let mut d = Array1::zeros(n);
        for t in 1..n {
            d[t] = x[t] - x[t - 1];
        }
        return (d, 1, true);
    }
    let mean = x.mean().unwrap_or(0.0);
    let mut r = Array1::zeros(n);
    for t in p..n {
        let pred: f64 = (1..=p).map(|k| phi[k - 1] * (x[t - k] - mean)).sum();
        r[t] = x[t] - mean - pred;
    }
    (r, p, false)
}

/// AR(p) prewhitening of every node series, order chosen by `criterion` in
/// `0..=max_ar_order`. The first `p` residuals are set to 0.
pub fn prewhiten_with(panel: &PanelDataset, max_ar_order: usize, criterion: OrderCriterion) -> Result<Prewhitened> {
    let (n, v, t) = panel.data().dim();
    if t <= 3 * max_ar_order {
        return Err(Error::InvalidParameter(format!(
            "prewhitening needs T > 3 * max order ({t} <= {})",
            3 * max_ar_order
        )));
    }
    let results: Vec<(Array1<f64>, usize, bool)> = (0..n * v)
        .into_par_iter()
        .map(|u| prewhiten_series(panel.series(u / v, u % v), max_ar_order, criterion))
        .collect();
    let mut data = Array3::zeros((n, v, t));
    let mut orders = Array2::zeros((n, v));
    let mut differenced = Array2::from_elem((n, v), false);
    for (u, (r, p, d)) in results.into_iter().enumerate() {
        let (i, k) = (u / v, u % v);
        if d {
            log::warn!("subject {i} node {k}: AR fit near unit root, differenced instead");
        }
        data.slice_mut(s![i, k, ..]).assign(&r);
        orders[[i, k]] = p;
        differenced[[i, k]] = d;
    }
    Ok(Prewhitened {
        panel: panel.with_data(data)?,
        orders,
        differenced,
    })
}

/// [`prewhiten_with`] using BIC order selection.
pub fn prewhiten(panel: &PanelDataset, max_ar_order: usize) -> Result<PanelDataset> {
    Ok(prewhiten_with(panel, max_ar_order, OrderCriterion::Bic)?.panel)
}

/// Moving-window Pearson correlations, Fisher-transformed. The window at scan
/// `t` covers `t ± (window-1)/2`, truncated at the series ends.
pub fn sliding_window_baseline(panel: &PanelDataset, window: usize) -> Result<DynamicNetworkSet> {
    let (n, v, t) = panel.data().dim();
    if window % 2 == 0 || window < 3 || window > t {
        return Err(Error::InvalidParameter(format!(
            "window must be odd with 3 <= window <= T = {t}, got {window}"
        )));
    }
    let half = window / 2;
    let e_total = n_edges(v);
    let rows: Vec<Array2<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let series: Vec<Vec<f64>> = (0..v).map(|k| panel.series(i, k).to_vec()).collect();
            let mut out = Array2::zeros((t, e_total));
            let mut e = 0;
            for j in 0..v {
                for l in (j + 1)..v {
                    for s in 0..t {
                        let lo = s.saturating_sub(half);
                        let hi = (s + half + 1).min(t);
                        out[[s, e]] = fisher_transform(pearson(&series[j][lo..hi], &series[l][lo..hi]));
                    }
                    e += 1;
                }
            }
            out
        })
        .collect();
    let mut z = Array3::zeros((n, t, e_total));
    for (i, r) in rows.into_iter().enumerate() {
        z.slice_mut(s![i, .., ..]).assign(&r);
    }
    Ok(DynamicNetworkSet::PairwiseFisherZ(z))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        SimConfig::default().validate().unwrap();
        SimConfig::scaled(3).validate().unwrap();
    }

    #[test]
    fn rejects_bad_sizes() {
        let cfg = SimConfig {
            cluster_sizes: vec![5, 5],
            cps_per_cluster: vec![3, 3],
            ..SimConfig::scaled(1)
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn precision_rule() {
        let om = precision_from_weights(3, &[((0, 1), 0.5), ((1, 2), -0.25)]);
        assert_eq!(om[[0, 0]], 1.5);
        assert_eq!(om[[1, 1]], 1.75);
        assert_eq!(om[[2, 2]], 1.25);
        assert_eq!(om[[2, 1]], -0.25);
    }

    #[test]
    fn levinson_recovers_ar1() {
        let mut rng = stream_rng(9, 0);
        let mut x = Array1::zeros(5000);
        for t in 1..5000 {
            let z: f64 = StandardNormal.sample(&mut rng);
            x[t] = 0.6 * x[t - 1] + z;
        }
        let fits = levinson(x.view(), 2);
        assert!((fits[1].0[0] - 0.6).abs() < 0.05);
        assert!(fits[2].0[1].abs() < 0.05);
    }
}
