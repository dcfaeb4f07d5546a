//! Optimal one-to-one assignment on small real-valued cost matrices.

use ndarray::Array2;
use pathfinding::kuhn_munkres::kuhn_munkres_min;
use pathfinding::matrix::Matrix;

/// Returns `perm` with `perm[r]` the column assigned to row `r`, minimising the
/// total cost. Requires `rows <= cols`.
///
/// Costs are quantised to integers at a resolution of `1e-9` of the largest
/// magnitude, which is exact for the integer-valued contingency counts used by
/// the clustering metrics.
pub fn min_cost_assignment(cost: &Array2<f64>) -> Vec<usize> {
    let (r, c) = cost.dim();
    assert!(r <= c, "assignment needs rows <= cols ({r} > {c})");
    if r == 0 {
        return Vec::new();
    }
    let max = cost.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let integral = cost.iter().all(|v| v.fract() == 0.0 && v.abs() < 1e15);
    let scale = if integral || max == 0.0 { 1.0 } else { 1e9 / max };
    let weights: Vec<i64> = cost.iter().map(|v| (v * scale).round() as i64).collect();
    let m = Matrix::from_vec(r, c, weights).expect("shape");
    kuhn_munkres_min(&m).1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_the_anti_diagonal() {
        let cost = ndarray::array![[5.0, 1.0], [1.0, 5.0]];
        assert_eq!(min_cost_assignment(&cost), vec![1, 0]);
    }

    #[test]
    fn fractional_costs() {
        let cost = ndarray::array![[0.3, 0.2, 0.9], [0.1, 0.25, 0.8], [0.5, 0.5, 0.01]];
        assert_eq!(min_cost_assignment(&cost), vec![1, 0, 2]);
    }
}
