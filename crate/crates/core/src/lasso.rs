//! Lasso kernels.
//!
//! [`solve_lasso`] is a plain dense coordinate-descent lasso. The chain solver
//! handles the special structure that arises when a piecewise-constant
//! sequence is reparameterised by its first value and successive differences:
//! the design is lower-triangular with a repeated `sqrt(w_t)` in every row, so
//! the gradient of every coordinate is a suffix sum and a full sweep costs
//! `O(T)` instead of `O(T^2)`. The same routine with vector-valued differences
//! and a group penalty is the total-variation segmenter used for change points.

use ndarray::{Array1, Array2, ArrayView2};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const MAX_SWEEPS: usize = 10_000;
pub const CHANGE_TOL: f64 = 1e-10;
pub const KKT_TOL: f64 = 1e-8;
/// Coordinate sweeps between Newton refinements of the multivariate chain.
const NEWTON_EVERY: usize = 3;
const NEWTON_MAX_ITERS: usize = 50;
const NEWTON_MAX_SEGMENTS: usize = 400;

fn soft(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// `min ½‖y − Xβ‖² + penalty·Σ_{j masked} |β_j|`.
#[derive(Debug, Clone)]
pub struct LassoProblem {
    pub design: Array2<f64>,
    pub response: Array1<f64>,
    pub penalty: f64,
    pub penalize: Vec<bool>,
}

impl LassoProblem {
    /// All coordinates penalized except the first.
    pub fn new(design: Array2<f64>, response: Array1<f64>, penalty: f64) -> Self {
        let p = design.ncols();
        let penalize = (0..p).map(|j| j > 0).collect();
        Self {
            design,
            response,
            penalty,
            penalize,
        }
    }

    pub fn objective(&self, beta: &Array1<f64>) -> f64 {
        let r = &self.response - &self.design.dot(beta);
        let l1: f64 = beta
            .iter()
            .zip(&self.penalize)
            .filter(|(_, &m)| m)
            .map(|(b, _)| b.abs())
            .sum();
        0.5 * r.dot(&r) + self.penalty * l1
    }

    /// Largest violation of the optimality conditions at `beta`.
    pub fn kkt_residual(&self, beta: &Array1<f64>) -> f64 {
        let r = &self.response - &self.design.dot(beta);
        let g = self.design.t().dot(&r);
        g.iter()
            .zip(beta.iter())
            .zip(&self.penalize)
            .map(|((&gj, &bj), &pen)| {
                if !pen {
                    gj.abs()
                } else if bj == 0.0 {
                    (gj.abs() - self.penalty).max(0.0)
                } else {
                    (gj - self.penalty * bj.signum()).abs()
                }
            })
            .fold(0.0, f64::max)
    }

    fn validate(&self) -> Result<()> {
        let (n, p) = self.design.dim();
        if n == 0 || p == 0 {
            return Err(Error::InvalidParameter("empty lasso design".into()));
        }
        if self.response.len() != n || self.penalize.len() != p {
            return Err(Error::DimensionMismatch(format!(
                "design {n}x{p}, response {}, mask {}",
                self.response.len(),
                self.penalize.len()
            )));
        }
        if !(self.penalty >= 0.0 && self.penalty.is_finite()) {
            return Err(Error::InvalidParameter("penalty must be finite and >= 0".into()));
        }
        if self.design.iter().chain(self.response.iter()).any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("non-finite lasso input".into()));
        }
        Ok(())
    }
}

/// Cyclic coordinate descent. Converges when the KKT residual is at most
/// `1e-8` (or `1e-14` relative to `X'y` for badly scaled problems).
pub fn solve_lasso(problem: &LassoProblem) -> Result<Array1<f64>> {
    problem.validate()?;
    let x = &problem.design;
    let p = x.ncols();
    let lam = problem.penalty;
    let norms: Vec<f64> = x.columns().into_iter().map(|c| c.dot(&c)).collect();
    let scale = problem
        .design
        .t()
        .dot(&problem.response)
        .iter()
        .fold(1.0f64, |m, v| m.max(v.abs()));
    let tol = KKT_TOL.max(1e-14 * scale);

    let mut beta = Array1::<f64>::zeros(p);
    let mut r = problem.response.clone();
    let mut obj = problem.objective(&beta);
    let mut kkt = problem.kkt_residual(&beta);
    if kkt <= tol {
        return Ok(beta);
    }
    for _ in 0..MAX_SWEEPS {
        for j in 0..p {
            if norms[j] == 0.0 {
                continue;
            }
            let col = x.column(j);
            let rho = col.dot(&r) + norms[j] * beta[j];
            let new = if problem.penalize[j] {
                soft(rho, lam) / norms[j]
            } else {
                rho / norms[j]
            };
            let delta = new - beta[j];
            if delta != 0.0 {
                r.scaled_add(-delta, &col);
                beta[j] = new;
            }
        }
        let next = problem.objective(&beta);
        debug_assert!(
            next <= obj + 1e-10 * obj.abs().max(1.0),
            "coordinate sweep increased the objective: {obj} -> {next}"
        );
        obj = next;
        kkt = problem.kkt_residual(&beta);
        if kkt <= tol {
            return Ok(beta);
        }
    }
    Err(Error::LassoNotConverged {
        sweeps: MAX_SWEEPS,
        kkt_residual: kkt,
    })
}

/// Dense difference-coordinate design: row `t` holds `sqrt(w_t)` in columns
/// `0..=t`.
pub fn chain_design(weights: &[f64]) -> Array2<f64> {
    let t = weights.len();
    Array2::from_shape_fn((t, t), |(r, c)| if c <= r { weights[r].sqrt() } else { 0.0 })
}

/// Solution of the chain problem
/// `½ Σ_t w_t ‖y_t − u_t‖² + pen · Σ_{t≥1} ‖u_t − u_{t−1}‖₂`.
#[derive(Debug, Clone)]
pub struct ChainFit {
    /// Fitted sequence `u`, shape `(T, E)`.
    pub levels: Array2<f64>,
    /// Row 0 is `u_0`; row `j ≥ 1` is `u_j − u_{j−1}`.
    pub diffs: Array2<f64>,
    pub sweeps: usize,
    pub kkt_residual: f64,
    pub converged: bool,
}

impl ChainFit {
    /// Indices `j ≥ 1` with a nonzero jump between `j − 1` and `j`.
    pub fn jumps(&self, threshold: f64) -> Vec<usize> {
        (1..self.diffs.nrows())
            .filter(|&j| norm(self.diffs.row(j).iter().copied()) > threshold)
            .collect()
    }
}

fn norm(it: impl Iterator<Item = f64>) -> f64 {
    it.map(|x| x * x).sum::<f64>().sqrt()
}

/// Structured block coordinate descent for the chain problem.
///
/// Uses an active-set strategy: coordinates enter by forward selection on the
/// largest gradient norm among violators, and block coordinate descent sweeps
/// (in decreasing index order, `O(T·E)` each) refine all coordinates. For
/// `E = 1` every sweep also tries the exact solution for the current support
/// and signs, which terminates the iteration once the support is right; for
/// `E > 1` a Newton step over the segment levels plays the same role.
pub fn solve_chain(
    weights: &[f64],
    targets: ArrayView2<'_, f64>,
    pen: f64,
    warm: Option<&Array2<f64>>,
) -> ChainFit {
    let (t_len, e) = targets.dim();
    assert_eq!(weights.len(), t_len, "weights and targets disagree on T");
    let mut c = vec![0.0; t_len + 1];
    let mut s = Array2::<f64>::zeros((t_len + 1, e));
    for t in (0..t_len).rev() {
        c[t] = c[t + 1] + weights[t];
        for k in 0..e {
            s[[t, k]] = s[[t + 1, k]] + weights[t] * targets[[t, k]];
        }
    }
    let scale = (0..t_len)
        .map(|j| norm(s.row(j).iter().copied()))
        .fold(1.0f64, f64::max);
    let tol = KKT_TOL * scale;

    let mut beta = match warm {
        Some(b) if b.dim() == (t_len, e) => b.clone(),
        _ => {
            let mut b = Array2::zeros((t_len, e));
            if c[0] > 0.0 {
                for k in 0..e {
                    b[[0, k]] = s[[0, k]] / c[0];
                }
            }
            b
        }
    };
    for j in 0..t_len {
        if c[j] == 0.0 {
            beta.row_mut(j).fill(0.0);
        }
    }

    if e == 1 && warm.is_none() {
        let y: Vec<f64> = targets.column(0).to_vec();
        let u = fused_dp(weights, &y, pen);
        let mut diffs = Array2::zeros((t_len, 1));
        for t in 0..t_len {
            diffs[[t, 0]] = if t == 0 { u[0] } else { u[t] - u[t - 1] };
        }
        let state = ChainState {
            w: weights,
            y: targets,
            c: &c,
            s: &s,
            pen,
            e,
        };
        let kkt = state.kkt(&diffs).0;
        if kkt <= tol {
            return ChainFit {
                levels: Array2::from_shape_vec((t_len, 1), u).expect("column"),
                diffs,
                sweeps: 0,
                kkt_residual: kkt,
                converged: true,
            };
        }
        // round-off left a KKT violation; refine with coordinate descent
        return solve_chain(weights, targets, pen, Some(&diffs));
    }

    let state = ChainState {
        w: weights,
        y: targets,
        c: &c,
        s: &s,
        pen,
        e,
    };
    let mut active: Vec<bool> = (0..t_len)
        .map(|j| j == 0 || beta.row(j).iter().any(|&v| v != 0.0))
        .collect();
    let mut obj = state.objective(&beta);
    let mut sweeps = 0;
    let mut kkt = f64::INFINITY;
    while sweeps < MAX_SWEEPS {
        // inner block coordinate descent on the active set
        loop {
            let change = state.sweep(&mut beta, &active);
            sweeps += 1;
            let next = state.objective(&beta);
            debug_assert!(
                next <= obj + 1e-9 * obj.abs().max(1.0),
                "chain sweep increased the objective: {obj} -> {next}"
            );
            obj = next;
            if e == 1 {
                if let Some(exact) = state.polish(&beta) {
                    let k = state.kkt(&exact).0;
                    if k <= tol {
                        beta = exact;
                        obj = state.objective(&beta);
                        break;
                    }
                }
            } else if sweeps % NEWTON_EVERY == 0 {
                if let Some(cand) = state.newton_polish(&beta, tol) {
                    let cand_obj = state.objective(&cand);
                    if cand_obj <= obj {
                        beta = cand;
                        obj = cand_obj;
                        if state.kkt(&beta).0 <= tol {
                            break;
                        }
                    }
                }
            }
            let inner = state.kkt_on(&beta, &active);
            if inner <= tol || change < CHANGE_TOL || sweeps >= MAX_SWEEPS {
                break;
            }
        }
        for j in 1..t_len {
            if beta.row(j).iter().all(|&v| v == 0.0) {
                active[j] = false;
            }
        }
        let (k, worst) = state.kkt(&beta);
        kkt = k;
        if kkt <= tol {
            break;
        }
        // forward selection: bring in the worst violator among inactive coordinates
        match worst {
            Some(j) if !active[j] => active[j] = true,
            _ => {
                if active.iter().all(|&a| a) {
                    // every coordinate is already in play; keep sweeping
                } else {
                    for a in active.iter_mut() {
                        *a = true;
                    }
                }
            }
        }
    }
    let levels = state.levels(&beta);
    ChainFit {
        levels,
        diffs: beta,
        sweeps,
        kkt_residual: kkt,
        converged: kkt <= tol,
    }
}

/// Exact scalar solution of `½ Σ w_t (y_t − u_t)² + pen Σ |u_t − u_{t−1}|`
/// by dynamic programming over the piecewise-linear derivative of the
/// cost-to-come, `O(T)` amortised. Scans with zero weight carry the level of
/// the preceding weighted scan (the following one for a leading run).
pub fn fused_dp(weights: &[f64], y: &[f64], pen: f64) -> Vec<f64> {
    let t_len = y.len();
    let idx: Vec<usize> = (0..t_len).filter(|&t| weights[t] > 0.0).collect();
    let mut out = vec![0.0; t_len];
    if idx.is_empty() {
        return out;
    }
    let m = idx.len();
    // knots: (position, slope change, intercept change) crossing left to right
    let mut knots: std::collections::VecDeque<(f64, f64, f64)> = std::collections::VecDeque::new();
    let (w0, y0) = (weights[idx[0]], y[idx[0]]);
    let (mut al, mut bl, mut ar, mut br) = (w0, -w0 * y0, w0, -w0 * y0);
    let mut lo = vec![0.0; m];
    let mut hi = vec![0.0; m];
    for k in 0..m - 1 {
        // clip the derivative to [-pen, pen]
        let (mut a, mut b) = (al, bl);
        while let Some(&(x, da, db)) = knots.front() {
            if a * x + b >= -pen {
                break;
            }
            knots.pop_front();
            a += da;
            b += db;
        }
        let left = (-pen - b) / a;
        knots.push_front((left, a, b + pen));
        (al, bl) = (0.0, -pen);
        let (mut a, mut b) = (ar, br);
        while let Some(&(x, da, db)) = knots.back() {
            if a * x + b <= pen {
                break;
            }
            knots.pop_back();
            a -= da;
            b -= db;
        }
        let right = (pen - b) / a;
        knots.push_back((right, -a, pen - b));
        (ar, br) = (0.0, pen);
        lo[k] = left;
        hi[k] = right;
        let (w, yy) = (weights[idx[k + 1]], y[idx[k + 1]]);
        al += w;
        bl -= w * yy;
        ar += w;
        br -= w * yy;
    }
    // root of the final derivative
    let (mut a, mut b) = (al, bl);
    while let Some(&(x, da, db)) = knots.front() {
        if a * x + b >= 0.0 {
            break;
        }
        knots.pop_front();
        a += da;
        b += db;
    }
    let mut u = vec![0.0; m];
    u[m - 1] = -b / a;
    for k in (0..m - 1).rev() {
        u[k] = u[k + 1].clamp(lo[k], hi[k]);
    }
    let mut next = 0;
    for t in 0..t_len {
        if next < m && idx[next] == t {
            out[t] = u[next];
            next += 1;
        } else {
            out[t] = if next == 0 { u[0] } else { u[next - 1] };
        }
    }
    out
}

struct ChainState<'a> {
    w: &'a [f64],
    y: ArrayView2<'a, f64>,
    c: &'a [f64],
    s: &'a Array2<f64>,
    pen: f64,
    e: usize,
}

impl ChainState<'_> {
    fn levels(&self, beta: &Array2<f64>) -> Array2<f64> {
        let mut u = beta.clone();
        for t in 1..u.nrows() {
            for k in 0..self.e {
                u[[t, k]] += u[[t - 1, k]];
            }
        }
        u
    }

    fn objective(&self, beta: &Array2<f64>) -> f64 {
        let u = self.levels(beta);
        let mut fit = 0.0;
        for t in 0..u.nrows() {
            let d: f64 = (0..self.e).map(|k| (self.y[[t, k]] - u[[t, k]]).powi(2)).sum();
            fit += self.w[t] * d;
        }
        let tv: f64 = (1..beta.nrows()).map(|j| norm(beta.row(j).iter().copied())).sum();
        0.5 * fit + self.pen * tv
    }

    /// Gradients `g_j = Σ_{t≥j} w_t (y_t − u_t)` for all `j`.
    fn gradients(&self, beta: &Array2<f64>) -> Array2<f64> {
        let u = self.levels(beta);
        let t_len = u.nrows();
        let mut g = Array2::zeros((t_len + 1, self.e));
        for t in (0..t_len).rev() {
            for k in 0..self.e {
                g[[t, k]] = g[[t + 1, k]] + self.w[t] * (self.y[[t, k]] - u[[t, k]]);
            }
        }
        g
    }

    fn violation(&self, g: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>, j: usize) -> f64 {
        let gn = norm(g.iter().copied());
        if j == 0 {
            return gn;
        }
        if self.c[j] == 0.0 {
            return 0.0;
        }
        let bn = norm(b.iter().copied());
        if bn == 0.0 {
            (gn - self.pen).max(0.0)
        } else {
            norm(g.iter().zip(b.iter()).map(|(gi, bi)| gi - self.pen * bi / bn))
        }
    }

    /// Largest KKT violation and the inactive coordinate with the largest one.
    fn kkt(&self, beta: &Array2<f64>) -> (f64, Option<usize>) {
        let g = self.gradients(beta);
        let mut worst = 0.0;
        let mut worst_j = None;
        for j in 0..beta.nrows() {
            let v = self.violation(g.row(j), beta.row(j), j);
            if v > worst {
                worst = v;
                worst_j = Some(j);
            }
        }
        (worst, worst_j)
    }

    fn kkt_on(&self, beta: &Array2<f64>, active: &[bool]) -> f64 {
        let g = self.gradients(beta);
        (0..beta.nrows())
            .filter(|&j| active[j])
            .map(|j| self.violation(g.row(j), beta.row(j), j))
            .fold(0.0, f64::max)
    }

    /// One decreasing-order sweep over active coordinates; returns the largest
    /// coordinate change.
    fn sweep(&self, beta: &mut Array2<f64>, active: &[bool]) -> f64 {
        let t_len = beta.nrows();
        let e = self.e;
        // prefix sums at sweep start: entry j is unaffected by updates to
        // coordinates > j, which are the only ones visited before j
        let u = self.levels(beta);
        let mut tail = vec![0.0; e];
        let mut a = vec![0.0; e];
        let mut rho = vec![0.0; e];
        let mut max_change = 0.0f64;
        for j in (0..t_len).rev() {
            for k in 0..e {
                a[k] = self.w[j] * u[[j, k]] + tail[k];
            }
            let cj = self.c[j];
            if active[j] && cj > 0.0 {
                for k in 0..e {
                    rho[k] = self.s[[j, k]] - a[k] + cj * beta[[j, k]];
                }
                let factor = if j == 0 {
                    1.0
                } else {
                    let rn = norm(rho.iter().copied());
                    if rn > self.pen {
                        1.0 - self.pen / rn
                    } else {
                        0.0
                    }
                };
                for k in 0..e {
                    let new = factor * rho[k] / cj;
                    let delta = new - beta[[j, k]];
                    if delta != 0.0 {
                        beta[[j, k]] = new;
                        a[k] += delta * cj;
                        max_change = max_change.max(delta.abs());
                    }
                }
            }
            tail.copy_from_slice(&a);
        }
        max_change
    }

    /// Newton refinement over segment levels with the jump set of `beta` held
    /// fixed. The Hessian is a tridiagonal matrix (⊗ I) minus one rank-one
    /// term per jump, inverted with the Woodbury identity in `O(K²E)`.
    /// `None` when a segment is empty or a jump collapses.
    fn newton_polish(&self, beta: &Array2<f64>, tol: f64) -> Option<Array2<f64>> {
        let t_len = beta.nrows();
        let e = self.e;
        let mut starts = vec![0usize];
        starts.extend((1..t_len).filter(|&j| beta.row(j).iter().any(|&v| v != 0.0)));
        let nseg = starts.len();
        let nj = nseg - 1;
        if nj == 0 || nseg > NEWTON_MAX_SEGMENTS {
            return None;
        }
        let mut wseg = vec![0.0; nseg];
        let mut sseg = Array2::<f64>::zeros((nseg, e));
        for q in 0..nseg {
            let (a, b) = (starts[q], starts.get(q + 1).copied().unwrap_or(t_len));
            wseg[q] = self.c[a] - self.c[b];
            if wseg[q] <= 0.0 {
                return None;
            }
            for k in 0..e {
                sseg[[q, k]] = self.s[[a, k]] - self.s[[b, k]];
            }
        }
        let mut m = Array2::<f64>::zeros((nseg, e));
        let u = self.levels(beta);
        for q in 0..nseg {
            m.row_mut(q).assign(&u.row(starts[q]));
        }
        let f = |m: &Array2<f64>| -> f64 {
            let mut v = 0.0;
            for q in 0..nseg {
                for k in 0..e {
                    v += 0.5 * wseg[q] * m[[q, k]] * m[[q, k]] - sseg[[q, k]] * m[[q, k]];
                }
            }
            for q in 0..nj {
                v += self.pen * norm((0..e).map(|k| m[[q + 1, k]] - m[[q, k]]));
            }
            v
        };
        let mut fm = f(&m);
        for _ in 0..NEWTON_MAX_ITERS {
            let mut g = Array2::<f64>::zeros((nj, e));
            let mut len = vec![0.0; nj];
            for q in 0..nj {
                let n = norm((0..e).map(|k| m[[q + 1, k]] - m[[q, k]]));
                if n == 0.0 {
                    return None;
                }
                len[q] = n;
                for k in 0..e {
                    g[[q, k]] = (m[[q + 1, k]] - m[[q, k]]) / n;
                }
            }
            let mut grad = Array2::<f64>::zeros((nseg, e));
            for q in 0..nseg {
                for k in 0..e {
                    let mut v = wseg[q] * m[[q, k]] - sseg[[q, k]];
                    if q < nj {
                        v -= self.pen * g[[q, k]];
                    }
                    if q > 0 {
                        v += self.pen * g[[q - 1, k]];
                    }
                    grad[[q, k]] = v;
                }
            }
            if grad.iter().fold(0.0f64, |a, &v| a.max(v.abs())) <= 0.01 * tol {
                break;
            }
            // scalar tridiagonal part and its dense inverse
            let mut tri = DMatrix::<f64>::zeros(nseg, nseg);
            for q in 0..nseg {
                tri[(q, q)] = wseg[q];
            }
            for q in 0..nj {
                let c = self.pen / len[q];
                tri[(q, q)] += c;
                tri[(q + 1, q + 1)] += c;
                tri[(q, q + 1)] -= c;
                tri[(q + 1, q)] -= c;
            }
            let tinv = tri.cholesky()?.inverse();
            let apply_tinv = |r: &Array2<f64>| -> Array2<f64> {
                let mut out = Array2::<f64>::zeros((nseg, e));
                for a in 0..nseg {
                    for b in 0..nseg {
                        let t = tinv[(a, b)];
                        if t != 0.0 {
                            for k in 0..e {
                                out[[a, k]] += t * r[[b, k]];
                            }
                        }
                    }
                }
                out
            };
            // d(a, q) = T⁻¹[a, q] − T⁻¹[a, q+1]: T⁻¹ applied to e_q − e_{q+1}
            let d = |a: usize, q: usize| tinv[(a, q)] - tinv[(a, q + 1)];
            let mut cap = DMatrix::<f64>::zeros(nj, nj);
            for r in 0..nj {
                for q in 0..nj {
                    let dot: f64 = (0..e).map(|k| g[[r, k]] * g[[q, k]]).sum();
                    let coef = d(r, q) - d(r + 1, q);
                    cap[(r, q)] = -coef * dot;
                }
                cap[(r, r)] += len[r] / self.pen;
            }
            let neg: Array2<f64> = grad.mapv(|v| -v);
            let y = apply_tinv(&neg);
            let rhs = DVector::from_fn(nj, |q, _| (0..e).map(|k| (y[[q, k]] - y[[q + 1, k]]) * g[[q, k]]).sum());
            let w = cap.clone().lu().solve(&rhs)?;
            let mut step = y;
            for q in 0..nj {
                for a in 0..nseg {
                    let c = w[q] * d(a, q);
                    if c != 0.0 {
                        for k in 0..e {
                            step[[a, k]] += c * g[[q, k]];
                        }
                    }
                }
            }
            let slope: f64 = grad.iter().zip(step.iter()).map(|(a, b)| a * b).sum();
            if !(slope < 0.0) {
                break;
            }
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..12 {
                let trial = &m + &(&step * alpha);
                let ft = f(&trial);
                if ft <= fm + 1e-4 * alpha * slope {
                    let gain = fm - ft;
                    m = trial;
                    fm = ft;
                    accepted = gain > 1e-15 * fm.abs().max(1.0);
                    break;
                }
                alpha *= 0.5;
            }
            // a heavily damped step means a jump is collapsing; coordinate
            // descent removes it
            if !accepted || alpha < 1e-3 {
                break;
            }
        }
        let mut out = Array2::<f64>::zeros((t_len, e));
        out.row_mut(0).assign(&m.row(0));
        for q in 1..nseg {
            for k in 0..e {
                out[[starts[q], k]] = m[[q, k]] - m[[q - 1, k]];
            }
        }
        Some(out)
    }

    /// Exact minimiser for the support and jump signs of `beta` (scalar case).
    fn polish(&self, beta: &Array2<f64>) -> Option<Array2<f64>> {
        let t_len = beta.nrows();
        let mut bps: Vec<(usize, f64)> = (1..t_len)
            .filter(|&j| beta[[j, 0]] != 0.0)
            .map(|j| (j, beta[[j, 0]].signum()))
            .collect();
        bps.insert(0, (0, 0.0));
        let mut values = Vec::with_capacity(bps.len());
        for (k, &(start, s_left)) in bps.iter().enumerate() {
            let end = bps.get(k + 1).map_or(t_len, |b| b.0);
            let s_right = bps.get(k + 1).map_or(0.0, |b| b.1);
            let cw = self.c[start] - self.c[end];
            if cw <= 0.0 {
                return None;
            }
            let sw = self.s[[start, 0]] - self.s[[end, 0]];
            values.push((sw - self.pen * (s_left - s_right)) / cw);
        }
        let mut out = Array2::zeros((t_len, 1));
        out[[0, 0]] = values[0];
        for k in 1..bps.len() {
            let d = values[k] - values[k - 1];
            if d == 0.0 || d.signum() != bps[k].1 {
                return None;
            }
            out[[bps[k].0, 0]] = d;
        }
        Some(out)
    }
}

/// Weighted fused-lasso fit selected over a penalty grid.
#[derive(Debug, Clone)]
pub struct FusedPathFit {
    pub atoms: Array1<f64>,
    pub lambda: f64,
    pub bic: f64,
    /// Number of nonzero successive differences.
    pub n_active: usize,
    /// `(lambda, bic, n_active)` for every solved grid value.
    pub candidates: Vec<(f64, f64, usize)>,
    pub converged: bool,
}

/// Solves `Σ_t w_t (g_t − a_t)² + λ Σ_t |a_t − a_{t−1}|` for one `λ`.
pub fn solve_fused(weights: &[f64], targets: &[f64], lambda: f64, warm: Option<&Array2<f64>>) -> ChainFit {
    let y = ArrayView2::from_shape((targets.len(), 1), targets).expect("contiguous");
    // the objective without the ½ is twice the chain objective with penalty λ/2
    solve_chain(weights, y, 0.5 * lambda, warm)
}

/// Fused lasso over `grid`, returning the fit with the smallest
/// `n·ln(RSS/n) + k·ln(n)`; `n` counts scans with positive weight, `k` is one
/// plus the number of jumps and RSS is the weighted residual sum of squares.
///
/// Fits whose jump count exceeds half of `n` are saturated (the profile
/// likelihood diverges as RSS → 0) and are not eligible; solving runs from
/// the largest penalty down and stops once saturation is reached. Ties go to
/// the larger penalty.
pub fn solve_fused_path(weights: &[f64], targets: &[f64], grid: &[f64]) -> Result<FusedPathFit> {
    if weights.len() != targets.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {} targets",
            weights.len(),
            targets.len()
        )));
    }
    if grid.is_empty() || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter("penalty grid must be non-empty and strictly increasing".into()));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || targets.iter().any(|y| !y.is_finite()) {
        return Err(Error::InvalidParameter("weights must be finite and >= 0, targets finite".into()));
    }
    let n = weights.iter().filter(|&&w| w > 0.0).count();
    if n == 0 {
        return Err(Error::EmptyComponent);
    }
    let nf = n as f64;
    let mut best: Option<FusedPathFit> = None;
    let mut candidates = Vec::new();
    let mut all_converged = true;
    for &lambda in grid.iter().rev() {
        let fit = solve_fused(weights, targets, lambda, None);
        all_converged &= fit.converged;
        let atoms = fit.levels.column(0).to_owned();
        let n_active = fit.jumps(0.0).len();
        if 2 * n_active > n && !candidates.is_empty() {
            break;
        }
        let rss: f64 = weights
            .iter()
            .zip(targets)
            .zip(atoms.iter())
            .map(|((w, y), a)| w * (y - a) * (y - a))
            .sum();
        let k = (n_active + 1) as f64;
        let bic = nf * (rss / nf).max(1e-12).ln() + k * nf.ln();
        candidates.push((lambda, bic, n_active));
        if best.as_ref().is_none_or(|b| bic < b.bic) {
            best = Some(FusedPathFit {
                atoms,
                lambda,
                bic,
                n_active,
                candidates: Vec::new(),
                converged: fit.converged,
            });
        }
    }
    let mut best = best.expect("at least one grid value solved");
    candidates.reverse();
    best.candidates = candidates;
    best.converged = all_converged;
    Ok(best)
}
