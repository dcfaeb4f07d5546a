//! Lloyd's K-means with k-means++ seeding and restarts.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const MAX_ITERS: usize = 200;

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub labels: Vec<usize>,
    pub centers: Array2<f64>,
    /// Within-cluster sum of squared distances.
    pub wcss: f64,
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn plus_plus(points: ArrayView2<'_, f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = points.nrows();
    let mut centers = Array2::zeros((k, points.ncols()));
    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&points.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    chosen = i;
                    break;
                }
                u -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).assign(&points.row(pick));
        for i in 0..n {
            d2[i] = d2[i].min(sq_dist(points.row(i), centers.row(c)));
        }
    }
    centers
}

fn lloyd(points: ArrayView2<'_, f64>, mut centers: Array2<f64>) -> KMeansFit {
    let (n, d) = points.dim();
    let k = centers.nrows();
    let mut labels = vec![usize::MAX; n];
    for _ in 0..MAX_ITERS {
        let mut changed = false;
        for i in 0..n {
            let mut best = (f64::INFINITY, 0);
            for c in 0..k {
                let dist = sq_dist(points.row(i), centers.row(c));
                if dist < best.0 {
                    best = (dist, c);
                }
            }
            if labels[i] != best.1 {
                labels[i] = best.1;
                changed = true;
            }
        }
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            let mut row = sums.row_mut(labels[i]);
            row += &points.row(i);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            } else {
                // re-seed an empty cluster at the point farthest from its center
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(points.row(a), centers.row(labels[a]));
                        let db = sq_dist(points.row(b), centers.row(labels[b]));
                        da.total_cmp(&db)
                    })
                    .unwrap();
                centers.row_mut(c).assign(&points.row(far));
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let wcss = (0..n)
        .map(|i| sq_dist(points.row(i), centers.row(labels[i])))
        .sum();
    KMeansFit {
        labels,
        centers,
        wcss,
    }
}

/// Best of `restarts` k-means++ initialised Lloyd runs (smallest WCSS; the
/// earliest run wins ties).
pub fn kmeans(points: ArrayView2<'_, f64>, k: usize, restarts: usize, rng: &mut ChaCha8Rng) -> KMeansFit {
    let n = points.nrows();
    assert!(k >= 1 && k <= n, "need 1 <= k <= n (k={k}, n={n})");
    let mut best: Option<KMeansFit> = None;
    for _ in 0..restarts.max(1) {
        let fit = lloyd(points, plus_plus(points, k, rng));
        if best.as_ref().is_none_or(|b| fit.wcss < b.wcss - 1e-12) {
            best = Some(fit);
        }
    }
    best.unwrap()
}

/// One-dimensional convenience wrapper.
pub fn kmeans_1d(values: &[f64], k: usize, restarts: usize, rng: &mut ChaCha8Rng) -> KMeansFit {
    let pts = Array2::from_shape_vec((values.len(), 1), values.to_vec()).expect("column");
    kmeans(pts.view(), k, restarts, rng)
}

/// Per-cluster member counts.
pub fn cluster_sizes(labels: &[usize], k: usize) -> Array1<usize> {
    let mut out = Array1::zeros(k);
    for &l in labels {
        out[l] += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn separates_two_blobs() {
        let pts = ndarray::array![[0.0, 0.1], [0.1, 0.0], [5.0, 5.1], [5.1, 5.0], [0.05, 0.05]];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fit = kmeans(pts.view(), 2, 5, &mut rng);
        assert_eq!(fit.labels[0], fit.labels[1]);
        assert_eq!(fit.labels[0], fit.labels[4]);
        assert_eq!(fit.labels[2], fit.labels[3]);
        assert_ne!(fit.labels[0], fit.labels[2]);
    }

    #[test]
    fn k_equals_n_has_zero_wcss() {
        let pts = ndarray::array![[0.0], [1.0], [3.0], [7.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fit = kmeans(pts.view(), 4, 10, &mut rng);
        assert_eq!(fit.wcss, 0.0);
        let mut l = fit.labels.clone();
        l.sort();
        l.dedup();
        assert_eq!(l.len(), 4);
    }
}
