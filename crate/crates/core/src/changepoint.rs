//! Total-variation segmentation of estimated connectivity trajectories and
//! aggregation of change points over subject subgroups.
//!
//! Network-level objective per subject:
//! `Σ_t ‖r_t − u_t‖² + (λ_u / E) Σ_t ‖u_{t+1} − u_t‖₂`,
//! solved as the chain problem of [`crate::lasso::solve_chain`] with unit
//! weights and penalty `λ_u / (2E)`. A change point at scan `t` means
//! `u_t ≠ u_{t−1}`, so indices lie in `1..T`.

use crate::data::ClusterAssignment;
use crate::error::{Error, Result};
use crate::lasso::solve_chain;
use ndarray::{s, Array2, Array3, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const JUMP_TOL: f64 = 1e-8;
pub const GRID_MULTIPLIERS: [f64; 6] = [0.5, 1.0, 2.0, 4.0, 8.0, 16.0];

#[derive(Debug, Clone)]
pub struct TvFit {
    /// Piecewise-constant approximation, `(T, E)`.
    pub levels: Array2<f64>,
    pub changepoints: Vec<usize>,
    pub objective: f64,
    pub lambda_u: f64,
}

/// Value of the segmentation objective at `u`.
pub fn tv_objective(series: ArrayView2<'_, f64>, u: ArrayView2<'_, f64>, lambda_u: f64) -> f64 {
    let (t, e) = series.dim();
    let fid: f64 = series.iter().zip(u.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    let tv: f64 = (1..t)
        .map(|j| {
            (0..e)
                .map(|k| (u[[j, k]] - u[[j - 1, k]]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    fid + lambda_u / e as f64 * tv
}

/// Group fused lasso segmentation of a `T×E` series.
pub fn tv_segment(series: ArrayView2<'_, f64>, lambda_u: f64) -> TvFit {
    tv_segment_from(series, lambda_u, None).0
}

/// Same, warm-started from jump coefficients of a nearby penalty; also
/// returns this fit's coefficients for the next grid point.
fn tv_segment_from(series: ArrayView2<'_, f64>, lambda_u: f64, warm: Option<&Array2<f64>>) -> (TvFit, Array2<f64>) {
    let (t, e) = series.dim();
    let weights = vec![1.0; t];
    let fit = solve_chain(&weights, series, lambda_u / (2.0 * e as f64), warm);
    let changepoints = fit.jumps(JUMP_TOL);
    let objective = tv_objective(series, fit.levels.view(), lambda_u);
    (
        TvFit {
            levels: fit.levels,
            changepoints,
            objective,
            lambda_u,
        },
        fit.diffs,
    )
}

/// Noise scale: median successive-difference norm over √2. Piecewise-constant
/// input (most differences exactly zero) falls back to the root mean square
/// of the differences.
pub fn noise_scale(series: ArrayView2<'_, f64>) -> f64 {
    let t = series.nrows();
    if t < 2 {
        return 0.0;
    }
    let mut d: Vec<f64> = (1..t)
        .map(|j| {
            series
                .row(j)
                .iter()
                .zip(series.row(j - 1))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let med = if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    };
    let med = if med > 0.0 {
        med
    } else {
        (d.iter().map(|x| x * x).sum::<f64>() / m as f64).sqrt()
    };
    med / std::f64::consts::SQRT_2
}

/// Default grid `c · E · σ̂ · √T` for `c` in [`GRID_MULTIPLIERS`]. The factor
/// `E` offsets the `1/E` scaling of the penalty so the effective threshold is
/// comparable to the noise in the partial sums. Falls back to `c · E · √T`
/// when the series is constant.
pub fn default_grid(series: ArrayView2<'_, f64>) -> Vec<f64> {
    scaled_grid(series, &GRID_MULTIPLIERS)
}

/// [`default_grid`] with custom multipliers.
pub fn scaled_grid(series: ArrayView2<'_, f64>, multipliers: &[f64]) -> Vec<f64> {
    let (t, e) = series.dim();
    let sigma = noise_scale(series);
    let base = if sigma > 0.0 { sigma } else { 1.0 } * e as f64 * (t as f64).sqrt();
    multipliers.iter().map(|c| c * base).collect()
}

/// Penalty multiplier on the change-point count: 1 for a single edge,
/// `ln E + 1` for a network of `E` edges.
pub fn effective_dim(e: usize) -> f64 {
    if e <= 1 {
        1.0
    } else {
        (e as f64).ln() + 1.0
    }
}

/// `T ln(RSS/T) + #cp · ln T · E_eff`.
pub fn modified_bic(series: ArrayView2<'_, f64>, fit: &TvFit) -> f64 {
    let (t, e) = series.dim();
    let rss: f64 = series
        .iter()
        .zip(fit.levels.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let tf = t as f64;
    tf * (rss / tf).max(1e-300).ln() + fit.changepoints.len() as f64 * tf.ln() * effective_dim(e)
}

#[derive(Debug, Clone)]
pub struct LambdaSelection {
    pub fit: TvFit,
    /// `(λ_u, modified BIC, #change points)` per grid value, ascending λ_u.
    pub path: Vec<(f64, f64, usize)>,
    /// Whether the change-point count is non-increasing along the grid.
    pub monotone: bool,
}

/// Fits every grid value and keeps the smallest modified BIC; ties go to the
/// larger penalty.
pub fn select_lambda_u(series: ArrayView2<'_, f64>, grid: &[f64]) -> Result<LambdaSelection> {
    if grid.is_empty() || grid.windows(2).any(|w| w[1] <= w[0]) || grid[0] < 0.0 {
        return Err(Error::InvalidParameter(
            "penalty grid must be non-empty, non-negative and strictly increasing".into(),
        ));
    }
    let mut fits: Vec<(TvFit, f64)> = Vec::with_capacity(grid.len());
    let mut warm: Option<Array2<f64>> = None;
    // largest penalty first: each solution seeds the next, sparser-to-denser
    for &lam in grid.iter().rev() {
        let (fit, diffs) = tv_segment_from(series, lam, warm.as_ref());
        warm = Some(diffs);
        let bic = modified_bic(series, &fit);
        fits.push((fit, bic));
    }
    fits.reverse();
    let path: Vec<(f64, f64, usize)> = fits
        .iter()
        .map(|(f, b)| (f.lambda_u, *b, f.changepoints.len()))
        .collect();
    let monotone = path.windows(2).all(|w| w[1].2 <= w[0].2);
    if !monotone {
        log::warn!("change-point count not monotone along the penalty grid: {path:?}");
    }
    let mut best = grid.len() - 1;
    for k in (0..grid.len()).rev() {
        if fits[k].1 < fits[best].1 {
            best = k;
        }
    }
    let fit = fits.swap_remove(best).0;
    Ok(LambdaSelection { fit, path, monotone })
}

/// Pools member change points, chains sorted points whose gaps are at most
/// `window`, and keeps each chain's lower median when at least
/// `freq_threshold` of the cluster's members contribute to it.
pub fn cluster_changepoints(
    per_subject: &[Vec<usize>],
    assignment: &ClusterAssignment,
    freq_threshold: f64,
    window: usize,
) -> Result<BTreeMap<usize, Vec<usize>>> {
    if !(freq_threshold > 0.0 && freq_threshold <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "frequency threshold {freq_threshold} outside (0, 1]"
        )));
    }
    if per_subject.len() != assignment.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} change-point lists for {} subjects",
            per_subject.len(),
            assignment.len()
        )));
    }
    let mut out = BTreeMap::new();
    for c in 0..assignment.k() {
        let members = assignment.members(c);
        let mut pooled: Vec<(usize, usize)> = members
            .iter()
            .flat_map(|&i| per_subject[i].iter().map(move |&t| (t, i)))
            .collect();
        pooled.sort_unstable();
        let mut kept = Vec::new();
        let mut start = 0;
        while start < pooled.len() {
            let mut end = start + 1;
            while end < pooled.len() && pooled[end].0 - pooled[end - 1].0 <= window {
                end += 1;
            }
            let group = &pooled[start..end];
            let mut who: Vec<usize> = group.iter().map(|p| p.1).collect();
            who.sort_unstable();
            who.dedup();
            if !members.is_empty() && who.len() as f64 / members.len() as f64 >= freq_threshold {
                kept.push(group[(group.len() - 1) / 2].0);
            }
            start = end;
        }
        out.insert(c, kept);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChangePointOptions {
    /// Penalty grid as multiples of `E · σ̂ · √T`, strictly increasing.
    pub grid_multipliers: Vec<f64>,
    pub freq_threshold: f64,
    pub window: usize,
    /// Also segment every edge on its own.
    pub edge_level: bool,
}

impl Default for ChangePointOptions {
    fn default() -> Self {
        Self {
            grid_multipliers: GRID_MULTIPLIERS.to_vec(),
            freq_threshold: 0.5,
            window: 2,
            edge_level: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChangePointReport {
    pub schema_version: u32,
    /// Network-level change points per subject.
    pub per_subject: Vec<Vec<usize>>,
    /// `per_edge[e][i]`: edge-level change points.
    pub per_edge: Option<Vec<Vec<Vec<usize>>>>,
    pub cluster_level: BTreeMap<usize, Vec<usize>>,
    /// `(N, T, E)` piecewise-constant approximations.
    #[serde(skip)]
    pub piecewise: Array3<f64>,
    /// Selected penalty per subject.
    pub lambda_u_used: Vec<f64>,
    pub path_monotone: bool,
}

/// Network-level (and optionally edge-level) segmentation of `(N, T, E)`
/// trajectories with per-subject penalty selection, then cluster pooling.
pub fn detect_changepoints(
    trajectories: &Array3<f64>,
    assignment: &ClusterAssignment,
    opts: &ChangePointOptions,
) -> Result<ChangePointReport> {
    let (n, t, e) = trajectories.dim();
    let per: Vec<Result<LambdaSelection>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let series = trajectories.slice(s![i, .., ..]);
            select_lambda_u(series, &scaled_grid(series, &opts.grid_multipliers))
        })
        .collect();
    let mut piecewise = Array3::zeros((n, t, e));
    let mut per_subject = Vec::with_capacity(n);
    let mut lambdas = Vec::with_capacity(n);
    let mut monotone = true;
    for (i, sel) in per.into_iter().enumerate() {
        let sel = sel?;
        monotone &= sel.monotone;
        piecewise.slice_mut(s![i, .., ..]).assign(&sel.fit.levels);
        per_subject.push(sel.fit.changepoints);
        lambdas.push(sel.fit.lambda_u);
    }
    let per_edge = if opts.edge_level {
        let edges: Vec<Result<Vec<Vec<usize>>>> = (0..e)
            .into_par_iter()
            .map(|k| {
                (0..n)
                    .map(|i| {
                        let col = trajectories.slice(s![i, .., k..k + 1]);
                        Ok(select_lambda_u(col, &scaled_grid(col, &opts.grid_multipliers))?.fit.changepoints)
                    })
                    .collect()
            })
            .collect();
        Some(edges.into_iter().collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    let cluster_level = cluster_changepoints(&per_subject, assignment, opts.freq_threshold, opts.window)?;
    Ok(ChangePointReport {
        schema_version: 1,
        per_subject,
        per_edge,
        cluster_level,
        piecewise,
        lambda_u_used: lambdas,
        path_monotone: monotone,
    })
}
