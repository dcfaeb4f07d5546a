//! Domain types shared by the estimators, post-processing and evaluation code.
//!
//! Index conventions are zero-based throughout: subjects `0..N`, nodes `0..V`,
//! scans `0..T`, edges `0..V(V-1)/2` in row-major upper-triangle order.

use ndarray::{Array2, Array3, Array4, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Correlations are clipped to `±(1 - CLIP_EPS)` before the Fisher transform.
pub const CLIP_EPS: f64 = 1e-6;

/// Fisher z-transform `arctanh(rho)` with clipping away from ±1.
pub fn fisher_transform(rho: f64) -> f64 {
    // evaluated on |rho| so the transform is exactly odd
    rho.signum() * rho.abs().min(1.0 - CLIP_EPS).atanh()
}

/// Inverse Fisher transform, `tanh(z)`.
pub fn inverse_fisher(z: f64) -> f64 {
    z.tanh()
}

/// Number of undirected edges among `v` nodes.
pub fn n_edges(v: usize) -> usize {
    v * v.saturating_sub(1) / 2
}

/// Ordinal of edge `(j, l)`, `j < l`, in row-major upper-triangle order.
pub fn edge_index(j: usize, l: usize, v: usize) -> Result<usize> {
    if j >= l || l >= v {
        return Err(Error::InvalidEdge { j, l, v });
    }
    Ok(j * (2 * v - j - 1) / 2 + (l - j - 1))
}

/// Inverse of [`edge_index`].
pub fn edge_pair(e: usize, v: usize) -> (usize, usize) {
    assert!(e < n_edges(v), "edge ordinal {e} out of range for {v} nodes");
    let mut j = 0;
    let mut start = 0;
    loop {
        let row = v - j - 1;
        if e < start + row {
            return (j, j + 1 + (e - start));
        }
        start += row;
        j += 1;
    }
}

/// Multi-subject time series with subject-level covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    /// Shape `(N, V, T)`.
    data: Array3<f64>,
    /// Shape `(N, q)`.
    covariates: Array2<f64>,
    node_names: Option<Vec<String>>,
    subject_ids: Vec<String>,
}

impl PanelDataset {
    /// Validates and builds a dataset.
    pub fn new(
        data: Array3<f64>,
        covariates: Array2<f64>,
        node_names: Option<Vec<String>>,
        subject_ids: Vec<String>,
    ) -> Result<Self> {
        let (n, v, t) = data.dim();
        if n == 0 || v == 0 || t < 2 {
            return Err(Error::DimensionMismatch(format!(
                "need at least one subject, one node and two scans, got N={n}, V={v}, T={t}"
            )));
        }
        if covariates.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "covariate matrix has {} rows but data has {n} subjects",
                covariates.nrows()
            )));
        }
        if subject_ids.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} subject ids for {n} subjects",
                subject_ids.len()
            )));
        }
        if let Some(names) = &node_names {
            if names.len() != v {
                return Err(Error::DimensionMismatch(format!(
                    "{} node names for {v} nodes",
                    names.len()
                )));
            }
        }
        for ((i, node, s), x) in data.indexed_iter() {
            if !x.is_finite() {
                return Err(Error::NonFinite {
                    subject: i,
                    node,
                    scan: s,
                });
            }
        }
        for ((i, j), x) in covariates.indexed_iter() {
            if !x.is_finite() {
                return Err(Error::NonNumeric {
                    value: x.to_string(),
                    location: format!("covariate row {i}, column {j}"),
                });
            }
        }
        for i in 0..n {
            for node in 0..v {
                if series_variance(data.slice(ndarray::s![i, node, ..])) <= 0.0 {
                    return Err(Error::ZeroVariance { subject: i, node });
                }
            }
        }
        Ok(Self {
            data,
            covariates,
            node_names,
            subject_ids,
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.data.dim().0
    }

    pub fn n_nodes(&self) -> usize {
        self.data.dim().1
    }

    pub fn n_scans(&self) -> usize {
        self.data.dim().2
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.ncols()
    }

    /// Time series tensor, shape `(N, V, T)`.
    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn covariates(&self) -> &Array2<f64> {
        &self.covariates
    }

    pub fn node_names(&self) -> Option<&[String]> {
        self.node_names.as_deref()
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    /// Series of subject `i` at node `v`.
    pub fn series(&self, i: usize, v: usize) -> ArrayView1<'_, f64> {
        self.data.slice(ndarray::s![i, v, ..])
    }

    /// All nodes of subject `i`, shape `(V, T)`.
    pub fn subject(&self, i: usize) -> ArrayView2<'_, f64> {
        self.data.index_axis(Axis(0), i)
    }

    /// Subtracts the per-subject, per-node mean.
    pub fn demeaned(&self) -> Self {
        let mut out = self.clone();
        for mut row in out.data.lanes_mut(Axis(2)) {
            let mean = row.mean().unwrap_or(0.0);
            row.mapv_inplace(|x| x - mean);
        }
        out
    }

    /// Scales each subject/node series to unit sample variance (after centering).
    pub fn standardized_nodes(&self) -> Self {
        let mut out = self.demeaned();
        for mut row in out.data.lanes_mut(Axis(2)) {
            let sd = series_variance(row.view()).sqrt();
            row.mapv_inplace(|x| x / sd);
        }
        out
    }

    /// Covariates centered to zero mean and scaled to unit variance per column.
    /// Constant columns are centered only.
    pub fn standardized_covariates(&self) -> Array2<f64> {
        standardize_columns(&self.covariates)
    }

    /// Mean over subjects and nodes of the per-series sample variance.
    pub fn mean_series_variance(&self) -> f64 {
        let lanes = self.data.lanes(Axis(2));
        let count = lanes.clone().into_iter().count() as f64;
        lanes.into_iter().map(series_variance).sum::<f64>() / count
    }

    /// Replaces the covariate matrix, keeping everything else.
    pub fn with_covariates(&self, covariates: Array2<f64>) -> Result<Self> {
        Self::new(
            self.data.clone(),
            covariates,
            self.node_names.clone(),
            self.subject_ids.clone(),
        )
    }

    /// Replaces the time series tensor (same shape), keeping everything else.
    pub fn with_data(&self, data: Array3<f64>) -> Result<Self> {
        if data.dim() != self.data.dim() {
            return Err(Error::DimensionMismatch(format!(
                "replacement data shape {:?} differs from {:?}",
                data.dim(),
                self.data.dim()
            )));
        }
        Self::new(
            data,
            self.covariates.clone(),
            self.node_names.clone(),
            self.subject_ids.clone(),
        )
    }

    /// Keeps the subjects at `order`, in that order.
    pub fn select_subjects(&self, order: &[usize]) -> Result<Self> {
        let data = self.data.select(Axis(0), order);
        let covariates = self.covariates.select(Axis(0), order);
        let ids = order.iter().map(|&i| self.subject_ids[i].clone()).collect();
        Self::new(data, covariates, self.node_names.clone(), ids)
    }
}

/// Unbiased sample variance; zero for series shorter than two.
pub(crate) fn series_variance(x: ArrayView1<'_, f64>) -> f64 {
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let mean = x.sum() / n as f64;
    x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64
}

pub(crate) fn standardize_columns(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut col in out.columns_mut() {
        let mean = col.mean().unwrap_or(0.0);
        col.mapv_inplace(|v| v - mean);
        let var = col.iter().map(|v| v * v).sum::<f64>() / col.len().max(1) as f64;
        if var > 1e-12 {
            let sd = var.sqrt();
            col.mapv_inplace(|v| v / sd);
        }
    }
    out
}

/// Which quantity a [`DynamicNetworkSet`] stores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NetworkKind {
    PairwiseFisherZ,
    Precision,
}

/// Subject-level, scan-level network estimates.
#[derive(Debug, Clone, PartialEq)]
pub enum DynamicNetworkSet {
    /// Fisher-z pairwise correlations, shape `(N, T, E)`.
    PairwiseFisherZ(Array3<f64>),
    /// Symmetric positive definite precision matrices, shape `(N, T, V, V)`.
    Precision(Array4<f64>),
}

impl DynamicNetworkSet {
    pub fn kind(&self) -> NetworkKind {
        match self {
            Self::PairwiseFisherZ(_) => NetworkKind::PairwiseFisherZ,
            Self::Precision(_) => NetworkKind::Precision,
        }
    }

    pub fn n_subjects(&self) -> usize {
        match self {
            Self::PairwiseFisherZ(a) => a.dim().0,
            Self::Precision(a) => a.dim().0,
        }
    }

    pub fn n_scans(&self) -> usize {
        match self {
            Self::PairwiseFisherZ(a) => a.dim().1,
            Self::Precision(a) => a.dim().1,
        }
    }

    /// Edge-level Fisher-z pairwise correlations, shape `(N, T, E)`.
    ///
    /// Precision matrices are inverted and the implied marginal correlations
    /// transformed.
    pub fn to_pairwise_fisher_z(&self) -> Result<Array3<f64>> {
        match self {
            Self::PairwiseFisherZ(a) => Ok(a.clone()),
            Self::Precision(a) => {
                let (n, t, v, _) = a.dim();
                let e = n_edges(v);
                let mut out = Array3::zeros((n, t, e));
                for i in 0..n {
                    for s in 0..t {
                        let omega = nalgebra::DMatrix::from_fn(v, v, |r, c| a[[i, s, r, c]]);
                        let cov = omega.try_inverse().ok_or_else(|| {
                            Error::NotPositiveDefinite(format!("subject {i}, scan {s}"))
                        })?;
                        for j in 0..v {
                            for l in (j + 1)..v {
                                let rho = cov[(j, l)] / (cov[(j, j)] * cov[(l, l)]).sqrt();
                                out[[i, s, edge_index(j, l, v)?]] = fisher_transform(rho);
                            }
                        }
                    }
                }
                Ok(out)
            }
        }
    }

    /// Edge-level correlations on the correlation scale, shape `(N, T, E)`.
    pub fn to_pairwise_correlations(&self) -> Result<Array3<f64>> {
        Ok(self.to_pairwise_fisher_z()?.mapv(inverse_fisher))
    }
}

/// Tuning and prior hyper-parameters for both mixture models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    /// Number of mixture components `H`.
    pub n_components: usize,
    /// Candidate fused-lasso penalties, strictly increasing.
    pub lambda_grid: Vec<f64>,
    pub a_sigma: f64,
    pub b_sigma: f64,
    /// Residual variance of the pairwise likelihood; `None` uses the mean
    /// per-series sample variance of the (preprocessed) panel.
    pub sigma_y2: Option<f64>,
    /// Diagonal precision prior scale.
    pub alpha: f64,
    /// Diagonal entry of the covariate-effect prior covariance.
    pub sigma_beta_diag: f64,
    /// Retained Gibbs sweeps per Monte Carlo E-step.
    pub mc_samples: usize,
    /// Discarded Gibbs sweeps per Monte Carlo E-step.
    pub mc_burn_in: usize,
    pub max_em_iters: usize,
    pub em_tol: f64,
    /// Select the fused-lasso penalty in the first EM iteration only.
    pub freeze_lambda: bool,
    /// Hold covariate effects at zero (covariate-naive mixture weights).
    pub covariate_naive: bool,
    pub standardize_covariates: bool,
    /// Scale every subject/node series to unit variance before fitting.
    pub standardize_nodes: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            n_components: 4,
            lambda_grid: (0..9).map(|k| 10f64.powf(0.5 * k as f64)).collect(),
            a_sigma: 0.1,
            b_sigma: 1.0,
            sigma_y2: None,
            alpha: 1.0,
            sigma_beta_diag: 1.0,
            mc_samples: 20,
            mc_burn_in: 10,
            max_em_iters: 50,
            em_tol: 1e-4,
            freeze_lambda: false,
            covariate_naive: false,
            standardize_covariates: true,
            standardize_nodes: true,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidParameter(msg.to_string()));
        if self.n_components == 0 {
            return bad("n_components must be positive");
        }
        if self.lambda_grid.is_empty() {
            return bad("lambda_grid must be non-empty");
        }
        if self.lambda_grid.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return bad("lambda_grid values must be positive and finite");
        }
        if self.lambda_grid.windows(2).any(|w| w[1] <= w[0]) {
            return bad("lambda_grid must be strictly increasing");
        }
        for (name, value) in [
            ("a_sigma", self.a_sigma),
            ("b_sigma", self.b_sigma),
            ("alpha", self.alpha),
            ("sigma_beta_diag", self.sigma_beta_diag),
            ("em_tol", self.em_tol),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be positive")));
            }
        }
        if let Some(s) = self.sigma_y2 {
            if !(s > 0.0 && s.is_finite()) {
                return bad("sigma_y2 must be positive");
            }
        }
        if self.mc_samples == 0 {
            return bad("mc_samples must be positive");
        }
        if self.max_em_iters == 0 {
            return bad("max_em_iters must be positive");
        }
        Ok(())
    }
}

/// Hard assignment of subjects to `k` subgroups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    labels: Vec<usize>,
    k: usize,
}

impl ClusterAssignment {
    /// Labels must lie in `0..k` and `k` may not exceed the number of subjects.
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self> {
        if k == 0 || k > labels.len() {
            return Err(Error::InvalidParameter(format!(
                "cluster count {k} invalid for {} subjects",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidParameter(format!(
                "label {bad} out of range 0..{k}"
            )));
        }
        Ok(Self { labels, k })
    }

    /// Builds an assignment from arbitrary labels, compacting them to `0..k`
    /// in order of first appearance.
    pub fn from_labels(raw: &[usize]) -> Self {
        let mut map = std::collections::HashMap::new();
        let labels = raw
            .iter()
            .map(|l| {
                let next = map.len();
                *map.entry(*l).or_insert(next)
            })
            .collect();
        let k = map.len().max(1);
        Self { labels, k }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Member indices of cluster `c`.
    pub fn members(&self, c: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == c)
            .map(|(i, _)| i)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn fisher_values() {
        assert_eq!(fisher_transform(0.0), 0.0);
        // 0.5 * ln(1.9 / 0.1) = 0.5 * ln 19
        let oracle = 0.5 * (19.0f64).ln();
        assert!((fisher_transform(0.9) - oracle).abs() < 1e-14);
        assert!((oracle - 1.472_219_489_583_220_2).abs() < 1e-12);
        for r in [0.1, 0.37, 0.99] {
            assert_eq!(fisher_transform(-r), -fisher_transform(r));
        }
    }

    #[test]
    fn fisher_clips_at_boundary() {
        assert!(fisher_transform(1.0).is_finite());
        assert!(fisher_transform(-1.0).is_finite());
        assert_eq!(fisher_transform(1.0), fisher_transform(1.0 - CLIP_EPS));
    }

    #[test]
    fn edge_index_examples() {
        // first edge, last edge and (2,3) of V=4 in one-based node labels
        assert_eq!(edge_index(0, 1, 4).unwrap(), 0);
        assert_eq!(edge_index(2, 3, 4).unwrap(), 5);
        assert_eq!(edge_index(1, 2, 4).unwrap(), 3);
        assert!(edge_index(2, 2, 4).is_err());
        assert!(edge_index(3, 1, 4).is_err());
    }

    #[test]
    fn edge_index_matches_enumeration() {
        for v in 2..=50 {
            let mut ord = 0;
            for j in 0..v {
                for l in (j + 1)..v {
                    assert_eq!(edge_index(j, l, v).unwrap(), ord);
                    assert_eq!(edge_pair(ord, v), (j, l));
                    ord += 1;
                }
            }
            assert_eq!(ord, n_edges(v));
        }
    }

    fn toy(n: usize, v: usize, t: usize) -> Array3<f64> {
        Array::from_shape_fn((n, v, t), |(i, j, s)| {
            ((i * 31 + j * 7 + s * s) % 11) as f64 - 5.0
        })
    }

    #[test]
    fn panel_rejects_bad_inputs() {
        let ids = vec!["a".to_string(), "b".to_string()];
        let cov3 = Array2::zeros((3, 1));
        assert!(matches!(
            PanelDataset::new(toy(2, 3, 4), cov3, None, ids.clone()),
            Err(Error::DimensionMismatch(_))
        ));
        let mut data = toy(2, 3, 4);
        data[[1, 2, 3]] = f64::NAN;
        assert!(matches!(
            PanelDataset::new(data, Array2::zeros((2, 1)), None, ids.clone()),
            Err(Error::NonFinite {
                subject: 1,
                node: 2,
                scan: 3
            })
        ));
        let mut data = toy(2, 3, 4);
        data.slice_mut(ndarray::s![0, 1, ..]).fill(2.0);
        assert!(matches!(
            PanelDataset::new(data, Array2::zeros((2, 1)), None, ids),
            Err(Error::ZeroVariance {
                subject: 0,
                node: 1
            })
        ));
    }

    #[test]
    fn standardization() {
        let ids = vec!["a".to_string(), "b".to_string()];
        let cov = ndarray::array![[1.0, 5.0], [3.0, 5.0]];
        let p = PanelDataset::new(toy(2, 3, 9), cov, None, ids).unwrap();
        let s = p.standardized_nodes();
        for lane in s.data().lanes(Axis(2)) {
            assert!(lane.mean().unwrap().abs() < 1e-12);
            assert!((series_variance(lane) - 1.0).abs() < 1e-12);
        }
        let c = p.standardized_covariates();
        assert_eq!(c.column(0).to_vec(), vec![-1.0, 1.0]);
        assert_eq!(c.column(1).to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn cluster_assignment_validation() {
        assert!(ClusterAssignment::new(vec![0, 1, 1], 2).is_ok());
        assert!(ClusterAssignment::new(vec![0, 2], 2).is_err());
        assert!(ClusterAssignment::new(vec![0], 2).is_err());
        let a = ClusterAssignment::from_labels(&[7, 7, 3, 9]);
        assert_eq!(a.labels(), &[0, 0, 1, 2]);
        assert_eq!(a.k(), 3);
        assert_eq!(a.members(0), vec![0, 1]);
    }

    #[test]
    fn precision_to_pairwise() {
        // Omega = [[2,1],[1,2]] -> Sigma = [[2,-1],[-1,2]]/3 -> rho = -0.5
        let mut a = Array4::zeros((1, 1, 2, 2));
        a[[0, 0, 0, 0]] = 2.0;
        a[[0, 0, 1, 1]] = 2.0;
        a[[0, 0, 0, 1]] = 1.0;
        a[[0, 0, 1, 0]] = 1.0;
        let set = DynamicNetworkSet::Precision(a);
        let rho = set.to_pairwise_correlations().unwrap();
        assert!((rho[[0, 0, 0]] + 0.5).abs() < 1e-12);
    }
}
