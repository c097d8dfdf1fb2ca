//! Weighted soft-margin SVM dual solver (SMO with maximal-violating-pair
//! selection), RBF kernel, per-point penalty weights, prediction, and a dense
//! projected-gradient QP oracle used as an independent cross-check in tests.

use std::rc::Rc;

use rayon::prelude::*;

use crate::{Error, Result};

/// Gaussian kernel exp(-gamma * ||x - y||^2).
pub fn rbf_kernel(x: &[f64], y: &[f64], gamma: f64) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Solver(format!(
            "kernel dimension mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((-gamma * d2).exp())
}

/// How misclassification penalties are distributed over training points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum WeightScheme {
    /// Every point of a class gets the inverse of the class volume sum.
    PerClass,
    /// Class weight further split proportionally to each point's volume.
    PerPoint,
}

/// Per-point penalty weights W_i.
///
/// `PerClass`: W_i = 1 / sum of volumes in i's class.
/// `PerPoint`: W_i = W_class * v_i / sum of volumes in i's class, so the
/// weights of a class sum back to W_class.
pub fn class_weights(labels: &[i8], volumes: &[f64], scheme: WeightScheme) -> Vec<f64> {
    let mut vol_pos = 0.0;
    let mut vol_neg = 0.0;
    for (&y, &v) in labels.iter().zip(volumes) {
        if y > 0 {
            vol_pos += v;
        } else {
            vol_neg += v;
        }
    }
    labels
        .iter()
        .zip(volumes)
        .map(|(&y, &v)| {
            let class_vol = if y > 0 { vol_pos } else { vol_neg };
            match scheme {
                WeightScheme::PerClass => 1.0 / class_vol,
                WeightScheme::PerPoint => v / (class_vol * class_vol),
            }
        })
        .collect()
}

/// Class-level weights (W+, W-): inverses of the per-class volume sums.
pub fn class_level_weights(labels: &[i8], volumes: &[f64]) -> (f64, f64) {
    let mut vol_pos = 0.0;
    let mut vol_neg = 0.0;
    for (&y, &v) in labels.iter().zip(volumes) {
        if y > 0 {
            vol_pos += v;
        } else {
            vol_neg += v;
        }
    }
    (1.0 / vol_pos, 1.0 / vol_neg)
}

/// Solver knobs. `c` and `gamma` are the model-selection parameters; `tol`
/// is the KKT stopping tolerance; `cache_bytes` bounds the kernel row cache.
#[derive(Debug, Clone)]
pub struct SmoParams {
    pub c: f64,
    pub gamma: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub cache_bytes: usize,
}

impl Default for SmoParams {
    fn default() -> Self {
        SmoParams {
            c: 1.0,
            gamma: 1.0,
            tol: 1e-3,
            max_iter: 10_000_000,
            cache_bytes: 512 << 20,
        }
    }
}

/// Trained kernel classifier: support vectors with dual coefficients
/// alpha_i * y_i, a bias, and the parameters it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    pub support_vectors: Vec<Vec<f64>>,
    /// alpha_i * y_i per support vector.
    pub coefficients: Vec<f64>,
    pub bias: f64,
    pub gamma: f64,
    pub c: f64,
    /// Class-level weights the per-point W_i were derived from.
    pub w_pos: f64,
    pub w_neg: f64,
    /// Indices of the support vectors in the training input.
    pub sv_indices: Vec<usize>,
    /// Hierarchy level the model was trained at (finest = 0).
    pub level: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Final dual objective value.
    pub objective: f64,
    /// Final maximal KKT violation.
    pub kkt_violation: f64,
}

impl SvmModel {
    /// Decision value sum(alpha_i y_i K(sv_i, x)) + b.
    pub fn decision(&self, x: &[f64]) -> Result<f64> {
        if let Some(sv) = self.support_vectors.first() {
            if sv.len() != x.len() {
                return Err(Error::Solver(format!(
                    "point dimension {} does not match model dimension {}",
                    x.len(),
                    sv.len()
                )));
            }
        }
        let mut sum = self.bias;
        for (sv, &coef) in self.support_vectors.iter().zip(&self.coefficients) {
            let d2: f64 = sv.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            sum += coef * (-self.gamma * d2).exp();
        }
        Ok(sum)
    }

    /// (decision value, label); sign(0) resolves to +1.
    pub fn predict(&self, x: &[f64]) -> Result<(f64, i8)> {
        let d = self.decision(x)?;
        Ok((d, if d >= 0.0 { 1 } else { -1 }))
    }

    /// Decision values for a batch of points; parallel but order-stable.
    pub fn decision_values(&self, points: &[Vec<f64>]) -> Result<Vec<f64>> {
        points.par_iter().map(|p| self.decision(p)).collect()
    }
}

/// LRU cache of kernel matrix rows keyed by training index.
struct KernelCache<'a> {
    points: &'a [Vec<f64>],
    gamma: f64,
    sq_norms: Vec<f64>,
    rows: Vec<Option<Rc<[f64]>>>,
    last_used: Vec<u64>,
    clock: u64,
    cached_rows: usize,
    max_rows: usize,
}

impl<'a> KernelCache<'a> {
    fn new(points: &'a [Vec<f64>], gamma: f64, cache_bytes: usize) -> Self {
        let n = points.len();
        let row_bytes = n * std::mem::size_of::<f64>();
        let max_rows = (cache_bytes / row_bytes.max(1)).max(2);
        let sq_norms = points
            .iter()
            .map(|p| p.iter().map(|v| v * v).sum())
            .collect();
        KernelCache {
            points,
            gamma,
            sq_norms,
            rows: vec![None; n],
            last_used: vec![0; n],
            clock: 0,
            cached_rows: 0,
            max_rows,
        }
    }

    fn row(&mut self, i: usize) -> Rc<[f64]> {
        self.clock += 1;
        self.last_used[i] = self.clock;
        if let Some(row) = &self.rows[i] {
            return Rc::clone(row);
        }
        if self.cached_rows >= self.max_rows {
            let victim = self
                .rows
                .iter()
                .enumerate()
                .filter(|(_, r)| r.is_some())
                .min_by_key(|&(j, _)| self.last_used[j])
                .map(|(j, _)| j)
                .expect("cache is non-empty");
            self.rows[victim] = None;
            self.cached_rows -= 1;
        }
        let xi = &self.points[i];
        let ni = self.sq_norms[i];
        let row: Rc<[f64]> = self
            .points
            .iter()
            .zip(&self.sq_norms)
            .map(|(xj, &nj)| {
                let dot: f64 = xi.iter().zip(xj).map(|(a, b)| a * b).sum();
                (-self.gamma * (ni + nj - 2.0 * dot).max(0.0)).exp()
            })
            .collect();
        self.rows[i] = Some(Rc::clone(&row));
        self.cached_rows += 1;
        row
    }
}

/// Trains the weighted soft-margin dual by sequential minimal optimization
/// with maximal-violating-pair working sets. The effective box bound of
/// point i is `params.c * per_point_weights[i]`.
///
/// Returns the best iterate flagged `converged = false` if `max_iter` pair
/// updates did not reach the KKT tolerance.
pub fn smo_train(
    points: &[Vec<f64>],
    labels: &[i8],
    per_point_weights: &[f64],
    params: &SmoParams,
) -> Result<SvmModel> {
    let n = points.len();
    if n == 0 || labels.len() != n || per_point_weights.len() != n {
        return Err(Error::Solver(format!(
            "inconsistent training input sizes: {} points, {} labels, {} weights",
            n,
            labels.len(),
            per_point_weights.len()
        )));
    }
    if !labels.iter().any(|&y| y > 0) || !labels.iter().any(|&y| y < 0) {
        return Err(Error::Solver(
            "training set must contain both classes".into(),
        ));
    }
    let bounds: Vec<f64> = per_point_weights.iter().map(|w| params.c * w).collect();
    if bounds.iter().any(|b| !b.is_finite() || *b < 0.0) {
        return Err(Error::Solver("non-finite or negative box bound".into()));
    }

    let y: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
    let mut alpha = vec![0.0f64; n];
    let mut grad = vec![-1.0f64; n]; // gradient of 1/2 a'Qa - e'a at a = 0
    let mut cache = KernelCache::new(points, params.gamma, params.cache_bytes);

    let mut iterations = 0usize;
    let mut violation = f64::INFINITY;
    while iterations < params.max_iter {
        // Maximal violating pair over I_up / I_low.
        let mut up_val = f64::NEG_INFINITY;
        let mut up_idx = usize::MAX;
        let mut low_val = f64::INFINITY;
        let mut low_idx = usize::MAX;
        for t in 0..n {
            let v = -y[t] * grad[t];
            let in_up = (y[t] > 0.0 && alpha[t] < bounds[t]) || (y[t] < 0.0 && alpha[t] > 0.0);
            let in_low = (y[t] > 0.0 && alpha[t] > 0.0) || (y[t] < 0.0 && alpha[t] < bounds[t]);
            if in_up && v > up_val {
                up_val = v;
                up_idx = t;
            }
            if in_low && v < low_val {
                low_val = v;
                low_idx = t;
            }
        }
        violation = up_val - low_val;
        if !violation.is_finite() || violation <= params.tol {
            break;
        }
        let (i, j) = (up_idx, low_idx);
        let ki = cache.row(i);
        let kj = cache.row(j);
        let (old_ai, old_aj) = (alpha[i], alpha[j]);
        let quad = (ki[i] + kj[j] - 2.0 * ki[j]).max(1e-12);
        if y[i] != y[j] {
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > bounds[i] - bounds[j] {
                if alpha[i] > bounds[i] {
                    alpha[i] = bounds[i];
                    alpha[j] = bounds[i] - diff;
                }
            } else if alpha[j] > bounds[j] {
                alpha[j] = bounds[j];
                alpha[i] = bounds[j] + diff;
            }
        } else {
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > bounds[i] {
                if alpha[i] > bounds[i] {
                    alpha[i] = bounds[i];
                    alpha[j] = sum - bounds[i];
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > bounds[j] {
                if alpha[j] > bounds[j] {
                    alpha[j] = bounds[j];
                    alpha[i] = sum - bounds[j];
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let dai = alpha[i] - old_ai;
        let daj = alpha[j] - old_aj;
        if dai == 0.0 && daj == 0.0 {
            // Numerically stuck pair; stop at the current violation.
            break;
        }
        for t in 0..n {
            grad[t] += y[t] * (y[i] * dai * ki[t] + y[j] * daj * kj[t]);
        }
        iterations += 1;
    }
    let converged = violation <= params.tol;
    if !converged {
        log::warn!(
            "smo did not converge after {} iterations (violation {:.3e})",
            iterations,
            violation
        );
    }

    // Dual objective: sum(a) - 1/2 a'Qa = (sum(a) - a'grad) / 2.
    let sum_a: f64 = alpha.iter().sum();
    let dot_ag: f64 = alpha.iter().zip(&grad).map(|(a, g)| a * g).sum();
    let objective = 0.5 * (sum_a - dot_ag);

    let bias = compute_bias(&alpha, &grad, &y, &bounds);

    let mut support_vectors = Vec::new();
    let mut coefficients = Vec::new();
    let mut sv_indices = Vec::new();
    for t in 0..n {
        if alpha[t] > 0.0 {
            support_vectors.push(points[t].clone());
            coefficients.push(alpha[t] * y[t]);
            sv_indices.push(t);
        }
    }
    Ok(SvmModel {
        support_vectors,
        coefficients,
        bias,
        gamma: params.gamma,
        c: params.c,
        w_pos: 1.0,
        w_neg: 1.0,
        sv_indices,
        level: 0,
        iterations,
        converged,
        objective,
        kkt_violation: violation.max(0.0),
    })
}

/// Bias from the average over free support vectors, falling back to the
/// midpoint of the feasible interval when every alpha sits on a bound.
fn compute_bias(alpha: &[f64], grad: &[f64], y: &[f64], bounds: &[f64]) -> f64 {
    let mut free_sum = 0.0;
    let mut free_count = 0usize;
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for t in 0..alpha.len() {
        let v = -y[t] * grad[t];
        let free = alpha[t] > 0.0 && alpha[t] < bounds[t];
        if free {
            free_sum += v;
            free_count += 1;
            continue;
        }
        let in_up = (y[t] > 0.0 && alpha[t] < bounds[t]) || (y[t] < 0.0 && alpha[t] > 0.0);
        let in_low = (y[t] > 0.0 && alpha[t] > 0.0) || (y[t] < 0.0 && alpha[t] < bounds[t]);
        if in_up {
            lo = lo.max(v);
        }
        if in_low {
            hi = hi.min(v);
        }
    }
    if free_count > 0 {
        free_sum / free_count as f64
    } else if lo.is_finite() && hi.is_finite() {
        0.5 * (lo + hi)
    } else if lo.is_finite() {
        lo
    } else if hi.is_finite() {
        hi
    } else {
        0.0
    }
}

/// Oracle output: feasible dual variables and their objective value.
#[derive(Debug, Clone)]
pub struct QpSolution {
    pub alpha: Vec<f64>,
    pub objective: f64,
    pub eq_residual: f64,
}

/// Dense box-plus-hyperplane QP oracle for cross-checking the SMO solver on
/// tiny instances (n <= 50). Accelerated projected gradient with an exact
/// projection onto {0 <= a <= C, y'a = 0}; completely independent of the SMO
/// code path.
pub fn qp_oracle(
    points: &[Vec<f64>],
    labels: &[i8],
    bounds: &[f64],
    gamma: f64,
) -> Result<QpSolution> {
    let n = points.len();
    if n > 50 {
        return Err(Error::Solver(format!("oracle limited to n <= 50, got {n}")));
    }
    if labels.len() != n || bounds.len() != n {
        return Err(Error::Solver("inconsistent oracle input sizes".into()));
    }
    let y: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
    let mut q = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in 0..n {
            q[i][j] = y[i] * y[j] * rbf_kernel(&points[i], &points[j], gamma)?;
        }
    }
    // Lipschitz bound: max absolute row sum of Q.
    let lips = q
        .iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(1.0f64, f64::max);

    let objective = |a: &[f64]| -> f64 {
        let mut quad = 0.0;
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..n {
                s += q[i][j] * a[j];
            }
            quad += a[i] * s;
        }
        a.iter().sum::<f64>() - 0.5 * quad
    };

    let gradient = |a: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| {
                let mut s = 0.0;
                for j in 0..n {
                    s += q[i][j] * a[j];
                }
                1.0 - s
            })
            .collect()
    };

    let mut a = project_box_hyperplane(&vec![0.0; n], &y, bounds);
    let mut momentum = a.clone();
    let mut theta = 1.0f64;
    let mut best_obj = objective(&a);
    let mut obj_at_check = f64::NEG_INFINITY;
    let step = 1.0 / lips;
    for iter in 0..500_000usize {
        let g = gradient(&momentum);
        let trial: Vec<f64> = momentum
            .iter()
            .zip(&g)
            .map(|(m, gi)| m + step * gi)
            .collect();
        let next = project_box_hyperplane(&trial, &y, bounds);
        let next_obj = objective(&next);
        if next_obj < best_obj {
            // Acceleration overshot: restart the momentum sequence.
            momentum = a.clone();
            theta = 1.0;
        } else {
            let theta_next = (1.0 + (1.0 + 4.0 * theta * theta).sqrt()) / 2.0;
            let beta = (theta - 1.0) / theta_next;
            momentum = next
                .iter()
                .zip(&a)
                .map(|(nx, ax)| nx + beta * (nx - ax))
                .collect();
            theta = theta_next;
            a = next;
            best_obj = next_obj;
        }
        if iter % 32 == 0 {
            // On an objective plateau, try to finish exactly: pin the active
            // set suggested by the iterate, solve the reduced equality QP,
            // and accept the solution if its KKT conditions verify.
            let plateaued = best_obj - obj_at_check <= 1e-13 * best_obj.abs().max(1.0);
            obj_at_check = best_obj;
            if plateaued {
                if let Some(polished) = kkt_polish(&a, &q, &y, bounds) {
                    let polished_obj = objective(&polished);
                    if polished_obj >= best_obj - 1e-9 * best_obj.abs().max(1.0) {
                        a = polished;
                        break;
                    }
                }
            }
        }
    }
    let obj = objective(&a);
    let eq_residual: f64 = a.iter().zip(&y).map(|(ai, yi)| ai * yi).sum();
    Ok(QpSolution {
        alpha: a,
        objective: obj,
        eq_residual,
    })
}

/// Attempts to finish the QP exactly from a near-optimal iterate: variables
/// close to a bound are pinned there, the stationarity system for the free
/// variables plus the hyperplane multiplier is solved, and the candidate is
/// returned only if all KKT conditions check out.
fn kkt_polish(a: &[f64], q: &[Vec<f64>], y: &[f64], bounds: &[f64]) -> Option<Vec<f64>> {
    let n = a.len();
    let mut fixed = vec![0.0f64; n];
    let mut free: Vec<usize> = Vec::new();
    for i in 0..n {
        let eps = 1e-7 * bounds[i].max(1.0);
        if a[i] <= eps {
            fixed[i] = 0.0;
        } else if a[i] >= bounds[i] - eps {
            fixed[i] = bounds[i];
        } else {
            free.push(i);
        }
    }
    let nf = free.len();
    // Unknowns: free alphas then the hyperplane multiplier nu.
    // Stationarity for free i: sum_j Q_ij a_j + nu y_i = 1.
    // Constraint: sum_i y_i a_i = 0.
    let dim = nf + 1;
    let mut mat = vec![vec![0.0f64; dim]; dim];
    let mut rhs = vec![0.0f64; dim];
    for (r, &i) in free.iter().enumerate() {
        for (cidx, &j) in free.iter().enumerate() {
            mat[r][cidx] = q[i][j];
        }
        mat[r][nf] = y[i];
        let mut b = 1.0;
        for j in 0..n {
            if !free.contains(&j) {
                b -= q[i][j] * fixed[j];
            }
        }
        rhs[r] = b;
    }
    for (cidx, &j) in free.iter().enumerate() {
        mat[nf][cidx] = y[j];
    }
    let mut fixed_sum = 0.0;
    for j in 0..n {
        if !free.contains(&j) {
            fixed_sum += y[j] * fixed[j];
        }
    }
    rhs[nf] = -fixed_sum;

    let sol = solve_dense(mat, rhs)?;
    let nu = sol[nf];
    let mut candidate = fixed;
    for (r, &i) in free.iter().enumerate() {
        candidate[i] = sol[r];
        if candidate[i] < -1e-10 || candidate[i] > bounds[i] + 1e-10 {
            return None;
        }
        candidate[i] = candidate[i].clamp(0.0, bounds[i]);
    }
    // KKT sign conditions for the pinned variables.
    let slack = 1e-9;
    for i in 0..n {
        if free.contains(&i) {
            continue;
        }
        let mut qa = 0.0;
        for j in 0..n {
            qa += q[i][j] * candidate[j];
        }
        let reduced = 1.0 - qa - nu * y[i];
        if candidate[i] == 0.0 {
            if reduced > slack {
                return None;
            }
        } else if reduced < -slack {
            return None;
        }
    }
    let eq: f64 = candidate.iter().zip(y).map(|(ai, yi)| ai * yi).sum();
    if eq.abs() > 1e-10 {
        return None;
    }
    Some(candidate)
}

/// Gaussian elimination with partial pivoting; None on a singular system.
fn solve_dense(mut mat: Vec<Vec<f64>>, mut rhs: Vec<f64>) -> Option<Vec<f64>> {
    let n = rhs.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&r1, &r2| mat[r1][col].abs().total_cmp(&mat[r2][col].abs()))?;
        if mat[pivot][col].abs() < 1e-12 {
            return None;
        }
        mat.swap(col, pivot);
        rhs.swap(col, pivot);
        for r in (col + 1)..n {
            let f = mat[r][col] / mat[col][col];
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                mat[r][c] -= f * mat[col][c];
            }
            rhs[r] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0f64; n];
    for r in (0..n).rev() {
        let mut s = rhs[r];
        for c in (r + 1)..n {
            s -= mat[r][c] * x[c];
        }
        x[r] = s / mat[r][r];
    }
    Some(x)
}

/// Euclidean projection onto {0 <= a_i <= C_i} intersected with {y'a = 0},
/// by bisection on the hyperplane multiplier.
fn project_box_hyperplane(z: &[f64], y: &[f64], bounds: &[f64]) -> Vec<f64> {
    let alpha_of = |lambda: f64| -> Vec<f64> {
        z.iter()
            .zip(y)
            .zip(bounds)
            .map(|((&zi, &yi), &ci)| (zi - lambda * yi).clamp(0.0, ci))
            .collect()
    };
    let residual = |lambda: f64| -> f64 {
        alpha_of(lambda)
            .iter()
            .zip(y)
            .map(|(ai, yi)| ai * yi)
            .sum()
    };
    // residual is nonincreasing in lambda; bracket a sign change.
    let mut lo = -1.0;
    let mut hi = 1.0;
    for _ in 0..80 {
        if residual(lo) < 0.0 {
            lo *= 2.0;
        } else {
            break;
        }
    }
    for _ in 0..80 {
        if residual(hi) > 0.0 {
            hi *= 2.0;
        } else {
            break;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if residual(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < f64::EPSILON * lo.abs().max(hi.abs()).max(1.0) {
            break;
        }
    }
    alpha_of(0.5 * (lo + hi))
}
