//! Subject subgroups from the agreement of component labels.

use crate::data::ClusterAssignment;
use crate::error::{Error, Result};
use crate::kmeans::kmeans;
use crate::rng::stream_rng;
use ndarray::{Array2, Array3};
use rayon::prelude::*;

pub const SUBGROUP_RESTARTS: usize = 50;

/// Symmetric `N×N` matrix in `[0,1]` with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix(Array2<f64>);

impl SimilarityMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let n = values.nrows();
        if values.ncols() != n {
            return Err(Error::DimensionMismatch(format!("similarity matrix is {:?}", values.dim())));
        }
        for i in 0..n {
            if values[[i, i]] != 1.0 {
                return Err(Error::InvalidParameter(format!("diagonal entry {i} is not 1")));
            }
            for j in 0..n {
                let x = values[[i, j]];
                if !(0.0..=1.0).contains(&x) || x != values[[j, i]] {
                    return Err(Error::InvalidParameter(format!(
                        "entry ({i},{j}) = {x} breaks symmetry or [0,1] range"
                    )));
                }
            }
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Entry `(i, i')` is the fraction of `(scan, edge-or-node)` cells at which
/// the two subjects carry the same label. `labels` has shape `(N, T, M)`.
pub fn build_similarity(labels: &Array3<usize>) -> SimilarityMatrix {
    let (n, t, m) = labels.dim();
    let cells = (t * m) as f64;
    let flat: Vec<Vec<usize>> = (0..n)
        .map(|i| labels.index_axis(ndarray::Axis(0), i).iter().copied().collect())
        .collect();
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            ((i + 1)..n)
                .map(|j| {
                    let agree = flat[i].iter().zip(&flat[j]).filter(|(a, b)| a == b).count();
                    agree as f64 / cells
                })
                .collect()
        })
        .collect();
    let mut s = Array2::from_elem((n, n), 1.0);
    for i in 0..n {
        for (off, &x) in upper[i].iter().enumerate() {
            let j = i + 1 + off;
            s[[i, j]] = x;
            s[[j, i]] = x;
        }
    }
    SimilarityMatrix(s)
}

/// K-means on similarity rows. With `k = None` the number of subgroups is the
/// point of maximum curvature (largest second difference) of the WCSS curve
/// over `1..=max_k`, where `max_k` is capped at `N-1`.
pub fn kmeans_subgroups(
    sim: &SimilarityMatrix,
    k: Option<usize>,
    max_k: usize,
    seed: u64,
) -> Result<ClusterAssignment> {
    let n = sim.len();
    let rows = sim.values().view();
    if n == 0 {
        return Err(Error::DimensionMismatch("empty similarity matrix".into()));
    }
    let first = rows.row(0);
    if rows.rows().into_iter().all(|r| r == first) {
        log::warn!("all similarity rows identical; returning a single subgroup");
        return ClusterAssignment::new(vec![0; n], 1);
    }
    let fit_k = |kk: usize| kmeans(rows, kk, SUBGROUP_RESTARTS, &mut stream_rng(seed, kk as u64));
    let chosen = match k {
        Some(kk) => {
            if kk == 0 || kk > n {
                return Err(Error::InvalidParameter(format!("need 1 <= K <= N = {n}, got {kk}")));
            }
            kk
        }
        None => {
            let kmax = max_k.min(n.saturating_sub(1)).max(1);
            if kmax < 2 {
                1
            } else {
                // WCSS one step past kmax so the curvature at kmax is defined
                let wcss: Vec<f64> = (1..=(kmax + 1).min(n)).map(|kk| fit_k(kk).wcss).collect();
                let at = |kk: usize| wcss.get(kk - 1).copied().unwrap_or(0.0);
                (2..=kmax)
                    .map(|kk| (kk, at(kk - 1) - 2.0 * at(kk) + at(kk + 1)))
                    .fold((1, f64::NEG_INFINITY), |best, (kk, c)| if c > best.1 { (kk, c) } else { best })
                    .0
            }
        }
    };
    let fit = fit_k(chosen);
    Ok(ClusterAssignment::from_labels(&fit.labels))
}
