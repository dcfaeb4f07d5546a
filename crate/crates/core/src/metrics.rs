//! Evaluation metrics: clustering error, variation of information, edge F1,
//! correlation MSE and change-point matching.

use crate::assignment::min_cost_assignment;
use crate::data::ClusterAssignment;
use crate::error::{Error, Result};
use crate::DynamicNetworkSet;
use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

pub const F1_THRESHOLD: f64 = 0.05;
pub const CP_TOLERANCE: usize = 2;

fn contingency(a: &ClusterAssignment, b: &ClusterAssignment) -> Result<Array2<f64>> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "clusterings cover {} and {} subjects",
            a.len(),
            b.len()
        )));
    }
    let mut c = Array2::zeros((a.k(), b.k()));
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        c[[x, y]] += 1.0;
    }
    Ok(c)
}

/// Maximum-overlap one-to-one matching of labels. Entry `c` is the
/// estimated label paired with true label `c`, if any.
pub fn best_label_matching(est: &ClusterAssignment, truth: &ClusterAssignment) -> Result<Vec<Option<usize>>> {
    Ok(matching(&contingency(est, truth)?).1)
}

/// Returns the matched agreement count and the truth → estimate map.
fn matching(c: &Array2<f64>) -> (f64, Vec<Option<usize>>) {
    // square-pad so every label of the larger side can be matched
    let k = c.nrows().max(c.ncols());
    let mut cost = Array2::zeros((k, k));
    for ((i, j), &x) in c.indexed_iter() {
        cost[[i, j]] = -x;
    }
    let perm = min_cost_assignment(&cost);
    let agree: f64 = perm.iter().enumerate().map(|(i, &j)| -cost[[i, j]]).sum();
    let mut map = vec![None; c.ncols()];
    for (i, &j) in perm.iter().enumerate() {
        if i < c.nrows() && j < c.ncols() {
            map[j] = Some(i);
        }
    }
    (agree, map)
}

/// `1 - (best one-to-one label matching agreement) / N`.
pub fn clustering_error(est: &ClusterAssignment, truth: &ClusterAssignment) -> Result<f64> {
    let c = contingency(est, truth)?;
    let n = est.len();
    if n == 0 {
        return Ok(0.0);
    }
    Ok(1.0 - matching(&c).0 / n as f64)
}

fn entropy(counts: impl Iterator<Item = f64>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0.0)
        .map(|c| {
            let p = c / n;
            -p * p.ln()
        })
        .sum()
}

/// `H(est) + H(truth) - 2 I(est; truth)` in nats.
pub fn variation_of_information(est: &ClusterAssignment, truth: &ClusterAssignment) -> Result<f64> {
    let c = contingency(est, truth)?;
    let n = est.len() as f64;
    if n == 0.0 {
        return Ok(0.0);
    }
    let ha = entropy(c.rows().into_iter().map(|r| r.sum()), n);
    let hb = entropy(c.columns().into_iter().map(|r| r.sum()), n);
    let hab = entropy(c.iter().copied(), n);
    // VI = 2 H(A,B) - H(A) - H(B)
    Ok((2.0 * hab - ha - hb).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EdgeCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl EdgeCounts {
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    /// F1 as `2TP / (2TP + FP + FN)` (the harmonic mean of precision and
    /// recall, computed from counts); 1 when there is nothing to find and
    /// nothing was found.
    pub fn f1(&self) -> f64 {
        if self.tp + self.fp + self.fn_ == 0 {
            return 1.0;
        }
        (2 * self.tp) as f64 / (2 * self.tp + self.fp + self.fn_) as f64
    }
}

/// Counts over edge vectors: estimated edge iff `|est| > threshold`.
pub fn edge_counts(est: ArrayView1<'_, f64>, truth: &[bool], threshold: f64) -> EdgeCounts {
    let mut c = EdgeCounts::default();
    for (&x, &t) in est.iter().zip(truth) {
        match (x.abs() > threshold, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            _ => {}
        }
    }
    c
}

/// F1 of a `V×V` estimated partial-correlation matrix against a binary
/// adjacency, off-diagonal upper triangle.
pub fn f1_score(est: &Array2<f64>, truth: &Array2<bool>, threshold: f64) -> Result<f64> {
    let v = est.nrows();
    if est.dim() != (v, v) || truth.dim() != (v, v) {
        return Err(Error::DimensionMismatch(format!(
            "estimate {:?} vs truth {:?}",
            est.dim(),
            truth.dim()
        )));
    }
    let mut c = EdgeCounts::default();
    for j in 0..v {
        for l in (j + 1)..v {
            match (est[[j, l]].abs() > threshold, truth[[j, l]]) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                _ => {}
            }
        }
    }
    Ok(c.f1())
}

/// Per-scan F1 averaged over subjects. `est` and `truth` are `(N, T, E)`
/// partial correlations; the truth support is its nonzero pattern.
pub fn f1_over_time(est: &ndarray::Array3<f64>, truth: &ndarray::Array3<f64>, threshold: f64) -> Result<Vec<f64>> {
    if est.dim() != truth.dim() {
        return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", est.dim(), truth.dim())));
    }
    let (n, t, _) = est.dim();
    Ok((0..t)
        .map(|s| {
            (0..n)
                .map(|i| {
                    let supp: Vec<bool> = truth.slice(ndarray::s![i, s, ..]).iter().map(|&x| x != 0.0).collect();
                    edge_counts(est.slice(ndarray::s![i, s, ..]), &supp, threshold).f1()
                })
                .sum::<f64>()
                / n as f64
        })
        .collect())
}

/// Greedy in-order one-to-one matching within `±tolerance`. Returns
/// `(matched true / total true, unmatched estimates)`; sensitivity is 0 when
/// there are no true change points.
pub fn cp_match_score(est: &[usize], truth: &[usize], tolerance: usize) -> (f64, usize) {
    let mut used = vec![false; est.len()];
    let mut matched = 0;
    for &c in truth {
        if let Some(k) = (0..est.len()).find(|&k| !used[k] && est[k].abs_diff(c) <= tolerance) {
            used[k] = true;
            matched += 1;
        }
    }
    let sens = if truth.is_empty() {
        0.0
    } else {
        matched as f64 / truth.len() as f64
    };
    (sens, used.iter().filter(|u| !**u).count())
}

/// Per true cluster `(sensitivity, false positives)` of the cluster-level
/// change points of its matched estimated subgroup. An unmatched true cluster
/// scores `(0, 0)`.
pub fn cluster_cp_scores(
    est_cluster_cps: &std::collections::BTreeMap<usize, Vec<usize>>,
    est: &ClusterAssignment,
    truth: &ClusterAssignment,
    true_cluster_cps: &[Vec<usize>],
    tolerance: usize,
) -> Result<Vec<(f64, usize)>> {
    if true_cluster_cps.len() != truth.k() {
        return Err(Error::DimensionMismatch(format!(
            "{} change-point lists for {} true clusters",
            true_cluster_cps.len(),
            truth.k()
        )));
    }
    let map = best_label_matching(est, truth)?;
    Ok(true_cluster_cps
        .iter()
        .zip(&map)
        .map(|(cps, m)| match m {
            Some(g) => cp_match_score(est_cluster_cps.get(g).map_or(&[][..], |v| v), cps, tolerance),
            None => (0.0, 0),
        })
        .collect())
}

/// Partial correlations `(N, T, E)` of any network set. Pairwise
/// correlations are assembled into matrices, eigenvalue-clipped to be
/// positive definite, and inverted.
pub fn network_partials(net: &DynamicNetworkSet) -> Result<ndarray::Array3<f64>> {
    match net {
        DynamicNetworkSet::Precision(p) => Ok(crate::idpmac::precision_to_partials(p)),
        DynamicNetworkSet::PairwiseFisherZ(z) => {
            let (n, t, e) = z.dim();
            let v = nodes_for_edges(e)?;
            let mut out = ndarray::Array3::zeros((n, t, e));
            for i in 0..n {
                for s in 0..t {
                    let mut r = nalgebra::DMatrix::identity(v, v);
                    for k in 0..e {
                        let (j, l) = crate::data::edge_pair(k, v);
                        let rho = crate::data::inverse_fisher(z[[i, s, k]]);
                        r[(j, l)] = rho;
                        r[(l, j)] = rho;
                    }
                    let mut eig = r.symmetric_eigen();
                    eig.eigenvalues.apply(|x| *x = x.max(PARTIAL_EIG_FLOOR));
                    let omega = eig.eigenvectors.clone()
                        * nalgebra::DMatrix::from_diagonal(&eig.eigenvalues.map(|x| 1.0 / x))
                        * eig.eigenvectors.transpose();
                    for k in 0..e {
                        let (j, l) = crate::data::edge_pair(k, v);
                        out[[i, s, k]] = -omega[(j, l)] / (omega[(j, j)] * omega[(l, l)]).sqrt();
                    }
                }
            }
            Ok(out)
        }
    }
}

const PARTIAL_EIG_FLOOR: f64 = 1e-6;

fn nodes_for_edges(e: usize) -> Result<usize> {
    let v = ((1.0 + (1.0 + 8.0 * e as f64).sqrt()) / 2.0).round() as usize;
    if crate::data::n_edges(v) != e {
        return Err(Error::DimensionMismatch(format!("{e} is not a triangular edge count")));
    }
    Ok(v)
}

/// Mean squared difference of pairwise correlations over `(subject, scan,
/// edge)`; precision-kind inputs are inverted first.
pub fn mse_correlations(est: &DynamicNetworkSet, truth: &DynamicNetworkSet) -> Result<f64> {
    let a = est.to_pairwise_correlations()?;
    let b = truth.to_pairwise_correlations()?;
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    let n = a.len();
    if n == 0 {
        return Ok(0.0);
    }
    Ok(a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64)
}

/// Summary of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ce: f64,
    pub vi: f64,
    pub f1: f64,
    pub mse: f64,
    pub cp_sensitivity: f64,
    pub cp_false_positives: f64,
}

impl MetricReport {
    /// `key=value` lines with fixed formatting.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("ce", self.ce),
            ("vi", self.vi),
            ("f1", self.f1),
            ("mse", self.mse),
            ("cp_sensitivity", self.cp_sensitivity),
            ("cp_false_positives", self.cp_false_positives),
        ] {
            let _ = writeln!(s, "{k}={v:.6}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ca(l: &[usize]) -> ClusterAssignment {
        ClusterAssignment::from_labels(l)
    }

    #[test]
    fn ce_example() {
        let ce = clustering_error(&ca(&[1, 1, 2, 2, 2, 1]), &ca(&[1, 1, 1, 2, 2, 2])).unwrap();
        assert!((ce - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn vi_example() {
        let vi = variation_of_information(&ca(&[1, 2, 1, 2]), &ca(&[1, 1, 2, 2])).unwrap();
        assert!((vi - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn f1_counts() {
        let c = EdgeCounts { tp: 8, fp: 2, fn_: 2 };
        assert!((c.f1() - 0.8).abs() < 1e-15);
        assert_eq!(EdgeCounts::default().f1(), 1.0);
    }

    #[test]
    fn cp_example() {
        assert_eq!(cp_match_score(&[52, 99, 150], &[50, 100], 2), (1.0, 1));
        assert_eq!(cp_match_score(&[], &[50], 2), (0.0, 0));
    }
}
