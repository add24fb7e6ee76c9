//! Sparse coefficient recovery: active-set least squares, orthogonal
//! matching pursuit and its reweighted variant.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::Dictionary;
use crate::error::{Error, Result};

/// Largest accepted ratio between the extreme diagonal entries of the
/// pivoted R factor.
pub const MAX_CONDITION: f64 = 1e12;

/// Orthogonal factorization of an active-set submatrix, kept around because
/// the leave-one-out error needs its Q and R factors.
#[derive(Debug, Clone)]
pub struct ActiveFit {
    /// Coefficients in the order of the active set passed in.
    pub coefficients: Vec<f64>,
    /// Thin Q factor, `M x k`.
    pub q: DMatrix<f64>,
    /// Upper-triangular R factor, `k x k`, in pivoted column order.
    pub r: DMatrix<f64>,
    pub condition: f64,
}

impl ActiveFit {
    /// Leverages `h_i`, the diagonal of the projection onto the active columns.
    pub fn leverages(&self) -> Vec<f64> {
        self.q.row_iter().map(|row| row.norm_squared()).collect()
    }

    /// `tr((A^T A)^-1) = ||R^-1||_F^2`; column pivoting leaves the trace unchanged.
    pub fn trace_inverse_gram(&self) -> f64 {
        let k = self.r.nrows();
        let mut total = 0.0;
        // Solve R X = I column by column (back substitution).
        for col in 0..k {
            let mut x = vec![0.0; k];
            for i in (0..=col).rev() {
                let mut s = if i == col { 1.0 } else { 0.0 };
                for j in (i + 1)..=col {
                    s -= self.r[(i, j)] * x[j];
                }
                x[i] = s / self.r[(i, i)];
            }
            total += x.iter().map(|v| v * v).sum::<f64>();
        }
        total
    }
}

fn submatrix(phi: &DMatrix<f64>, set: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(phi.nrows(), set.len(), |i, j| phi[(i, set[j])])
}

/// Factor `Phi_A` with column-pivoted Householder QR and solve the
/// least-squares problem on the active set.
pub fn factor_active(phi: &DMatrix<f64>, y: &[f64], set: &[usize]) -> Result<ActiveFit> {
    let m = phi.nrows();
    if y.len() != m {
        return Err(Error::DimensionMismatch { expected: m, got: y.len() });
    }
    if let Some(&bad) = set.iter().find(|&&j| j >= phi.ncols()) {
        return Err(Error::invalid(format!("column {bad} out of range")));
    }
    let k = set.len();
    if k == 0 {
        return Ok(ActiveFit {
            coefficients: Vec::new(),
            q: DMatrix::zeros(m, 0),
            r: DMatrix::zeros(0, 0),
            condition: 1.0,
        });
    }
    if k > m {
        return Err(Error::SingularSystem { condition: f64::INFINITY });
    }
    let a = submatrix(phi, set);
    let qr = a.col_piv_qr();
    let r = qr.r();
    let q = qr.q();
    let diag: Vec<f64> = (0..k).map(|i| r[(i, i)].abs()).collect();
    let dmax = diag.iter().cloned().fold(0.0, f64::max);
    let dmin = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    let condition = if dmin > 0.0 { dmax / dmin } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::SingularSystem { condition });
    }
    let qty = q.transpose() * DVector::from_column_slice(y);
    let z = r
        .solve_upper_triangular(&qty)
        .ok_or(Error::SingularSystem { condition })?;
    // A P = Q R, so x = P z.
    let mut x = z;
    qr.p().inv_permute_rows(&mut x);
    Ok(ActiveFit {
        coefficients: x.iter().copied().collect(),
        q,
        r,
        condition,
    })
}

/// Minimize `||Phi_A c - y||_2` over the columns in `set`.
pub fn least_squares_on_set(dictionary: &Dictionary, y: &[f64], set: &[usize]) -> Result<Vec<f64>> {
    factor_active(dictionary.matrix(), y, set).map(|f| f.coefficients)
}

/// Stopping rule for greedy pursuit: stop after `max_sparsity` atoms or once
/// the residual norm drops below `residual_tol`, whichever comes first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StopRule {
    pub max_sparsity: Option<usize>,
    pub residual_tol: f64,
}

impl StopRule {
    pub fn sparsity(s: usize) -> Self {
        StopRule { max_sparsity: Some(s), residual_tol: 0.0 }
    }

    pub fn residual(tol: f64) -> Self {
        StopRule { max_sparsity: None, residual_tol: tol }
    }
}

impl Default for StopRule {
    fn default() -> Self {
        StopRule { max_sparsity: None, residual_tol: 1e-10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseSolution {
    /// Columns in the order they were selected.
    pub active_set: Vec<usize>,
    /// Full-length coefficient vector, zero off the active set.
    pub coefficients: Vec<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
    /// Whether the stopping rule was met (as opposed to running out of
    /// admissible columns).
    pub converged: bool,
    /// Residual norm after each iteration, starting with `||y||`.
    pub residual_history: Vec<f64>,
}

impl SparseSolution {
    fn zero(n: usize, y_norm: f64, converged: bool) -> Self {
        SparseSolution {
            active_set: Vec::new(),
            coefficients: vec![0.0; n],
            residual_norm: y_norm,
            iterations: 0,
            converged,
            residual_history: vec![y_norm],
        }
    }

    pub fn support(&self, threshold: f64) -> Vec<usize> {
        let mut s: Vec<usize> = self
            .coefficients
            .iter()
            .enumerate()
            .filter(|(_, c)| c.abs() > threshold)
            .map(|(i, _)| i)
            .collect();
        s.sort_unstable();
        s
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// OMP where the selection statistic of column `n` is multiplied by
/// `gain[n]`. Unit gains give plain OMP.
fn pursuit(dictionary: &Dictionary, y: &[f64], stop: StopRule, gain: Option<&[f64]>) -> Result<SparseSolution> {
    let phi = dictionary.matrix();
    let (m, n) = phi.shape();
    if y.len() != m {
        return Err(Error::DimensionMismatch { expected: m, got: y.len() });
    }
    if let Some(s) = stop.max_sparsity {
        if s > m {
            return Err(Error::invalid(format!("max_sparsity {s} exceeds the {m} measurements")));
        }
    }
    let col_norms: Vec<f64> = (0..n).map(|j| phi.column(j).norm()).collect();
    let limit = stop.max_sparsity.unwrap_or(m).min(m).min(n);
    let y_norm = norm(y);
    // Correlations below this level are rounding noise, not signal.
    let noise_floor = 1e-13 * y_norm.max(f64::MIN_POSITIVE);

    if y_norm < stop.residual_tol || y_norm == 0.0 {
        return Ok(SparseSolution::zero(n, y_norm, true));
    }
    if limit == 0 {
        return Ok(SparseSolution::zero(n, y_norm, stop.max_sparsity == Some(0)));
    }

    let mut active: Vec<usize> = Vec::with_capacity(limit);
    // Columns already chosen, or numerically inside the span of those chosen.
    let mut excluded = vec![false; n];
    // Orthonormal basis of the active columns, grown by Gram-Schmidt with
    // one reorthogonalization pass; the residual is y minus its projection.
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(limit);
    let mut residual = DVector::from_column_slice(y);
    let mut history = vec![y_norm];
    let mut converged = false;

    while active.len() < limit {
        let corr = phi.tr_mul(&residual);
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n {
            if excluded[j] || col_norms[j] == 0.0 {
                continue;
            }
            let raw = corr[j].abs() / col_norms[j];
            if raw <= noise_floor {
                continue;
            }
            let score = gain.map_or(raw, |g| g[j] * raw);
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((j, score));
            }
        }
        // Residual is orthogonal to every remaining column.
        let Some((j, _)) = best else { break };
        excluded[j] = true;
        let mut v = phi.column(j).into_owned();
        for _ in 0..2 {
            for q in &basis {
                let proj = q.dot(&v);
                v.axpy(-proj, q, 1.0);
            }
        }
        let v_norm = v.norm();
        if v_norm * MAX_CONDITION <= col_norms[j] {
            continue;
        }
        v /= v_norm;
        let proj = v.dot(&residual);
        residual.axpy(-proj, &v, 1.0);
        basis.push(v);
        active.push(j);
        let res_norm = residual.norm();
        history.push(res_norm);
        if res_norm < stop.residual_tol {
            converged = true;
            break;
        }
    }
    if stop.max_sparsity.is_some_and(|s| active.len() == s) {
        converged = true;
    }

    let fit = factor_active(phi, y, &active)?;
    let mut coefficients = vec![0.0; n];
    for (&j, &c) in active.iter().zip(&fit.coefficients) {
        coefficients[j] = c;
    }
    let residual_norm = residual_of(phi, y, &active, &fit.coefficients);
    Ok(SparseSolution {
        iterations: active.len(),
        active_set: active,
        coefficients,
        residual_norm,
        converged,
        residual_history: history,
    })
}

fn residual_of(phi: &DMatrix<f64>, y: &[f64], set: &[usize], coeffs: &[f64]) -> f64 {
    let mut r = DVector::from_column_slice(y);
    for (&j, &c) in set.iter().zip(coeffs) {
        r.axpy(-c, &phi.column(j), 1.0);
    }
    r.norm()
}

/// Orthogonal matching pursuit. Each iteration picks the column maximizing
/// `|Phi_n^T r| / ||Phi_n||` (lowest index on ties), refits on the active set
/// and updates the residual.
pub fn omp(dictionary: &Dictionary, y: &[f64], stop: StopRule) -> Result<SparseSolution> {
    pursuit(dictionary, y, stop, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReweightConfig {
    pub iterations: usize,
    pub eps_w: f64,
}

impl Default for ReweightConfig {
    fn default() -> Self {
        ReweightConfig { iterations: 4, eps_w: 1e-6 }
    }
}

/// Weighted-l0 pursuit: `iterations` successive OMP solves where pass `j`
/// uses weights `w_i = 1 / (|c_i| + eps_w)` from pass `j - 1` (unit weights
/// first). The weighted problem in `z = W c` is OMP on `Phi W^-1`; its
/// selection statistic is normalized by the unweighted column norms, so the
/// weights act as a prior on each column while the refit (scale-invariant)
/// returns `c` directly. Returns the pass with the smallest residual; passes
/// whose residuals both satisfy the stopping tolerance count as tied, and
/// ties go to the later pass.
pub fn womp(dictionary: &Dictionary, y: &[f64], stop: StopRule, reweight: ReweightConfig) -> Result<SparseSolution> {
    if reweight.iterations == 0 {
        return Err(Error::invalid("reweighting needs at least one pass"));
    }
    if !(reweight.eps_w > 0.0) {
        return Err(Error::invalid("eps_w must be positive"));
    }
    let n = dictionary.ncols();
    let mut gain = vec![1.0; n];
    let mut best: Option<SparseSolution> = None;
    for pass in 0..reweight.iterations {
        let sol = if pass == 0 {
            pursuit(dictionary, y, stop, None)?
        } else {
            pursuit(dictionary, y, stop, Some(&gain))?
        };
        for (g, c) in gain.iter_mut().zip(&sol.coefficients) {
            *g = c.abs() + reweight.eps_w;
        }
        let replace = match &best {
            None => true,
            Some(b) => {
                let both_within = sol.residual_norm < stop.residual_tol && b.residual_norm < stop.residual_tol;
                both_within || sol.residual_norm <= b.residual_norm
            }
        };
        if replace {
            best = Some(sol);
        }
    }
    Ok(best.expect("at least one pass"))
}
