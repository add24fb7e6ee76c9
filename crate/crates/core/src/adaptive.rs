//! Model selection for sparse PCE fits.
//!
//! The error of a candidate expansion is a corrected leave-one-out error
//! computed in closed form from the leverages of the active columns. The
//! adaptive loop walks the maximum order upward, reshaping the truncation set
//! with weights derived from total Sobol indices, and stops on a small error,
//! on two consecutive increases, or when the order budget runs out.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{Dictionary, MultiIndexSet};
use crate::doe::ExperimentalDesign;
use crate::error::{Error, Result};
use crate::solvers::{factor_active, omp, womp, ReweightConfig, SparseSolution, StopRule, MAX_CONDITION};
use crate::surrogate::PceModel;

/// A leverage this close to one makes the leave-one-out residual blow up.
const LEVERAGE_LIMIT: f64 = 1.0 - 1e-10;
/// Squared relative size below which a variance or residual is rounding noise.
const ROUNDING: f64 = 1e-24;

/// Model-complexity term in the numerator of the correction factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CtNumerator {
    /// Number of retained basis terms.
    #[default]
    ActiveSize,
    /// Maximum polynomial order of the truncation set.
    MaxOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    #[default]
    Omp,
    Womp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptiveConfig {
    pub p_min: u32,
    pub p_max: u32,
    pub q: f64,
    pub solver: SolverKind,
    pub stop: StopRule,
    /// Target corrected LOO error; the loop stops at the first order below it.
    pub tol: f64,
    pub ct_numerator: CtNumerator,
    pub reweight: ReweightConfig,
    /// Truncate each greedy path at the prefix with the smallest corrected
    /// LOO error instead of keeping every selected atom.
    pub path_selection: bool,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        AdaptiveConfig {
            p_min: 1,
            p_max: 5,
            q: 0.75,
            solver: SolverKind::Omp,
            stop: StopRule::default(),
            tol: 1e-8,
            ct_numerator: CtNumerator::ActiveSize,
            reweight: ReweightConfig::default(),
            path_selection: true,
        }
    }
}

impl AdaptiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p_min < 1 {
            return Err(Error::invalid("p_min must be at least 1"));
        }
        if self.p_max < self.p_min {
            return Err(Error::invalid(format!("p_max {} is below p_min {}", self.p_max, self.p_min)));
        }
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(Error::invalid(format!("q = {} is outside (0, 1]", self.q)));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::invalid("tol must be non-negative"));
        }
        if !(self.stop.residual_tol >= 0.0) {
            return Err(Error::invalid("residual tolerance must be non-negative"));
        }
        if self.solver == SolverKind::Womp {
            if self.reweight.iterations == 0 {
                return Err(Error::invalid("reweighting needs at least one pass"));
            }
            if !(self.reweight.eps_w > 0.0) {
                return Err(Error::invalid("eps_w must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    TolMet,
    Overfit,
    MaxOrder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderRecord {
    pub order: u32,
    /// `None` when the error is ill-posed at this order.
    pub loo_error: Option<f64>,
    pub active_size: usize,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub per_order: Vec<OrderRecord>,
    pub stop_reason: StopReason,
    pub chosen_order: u32,
    pub config: AdaptiveConfig,
}

impl FitDiagnostics {
    pub fn chosen(&self) -> &OrderRecord {
        self.per_order
            .iter()
            .find(|r| r.order == self.chosen_order)
            .expect("chosen order is recorded")
    }
}

fn variance_unbiased(y: &[f64]) -> f64 {
    let m = y.len() as f64;
    let mean = y.iter().sum::<f64>() / m;
    y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0)
}

fn ct_factor(numerator: f64, m: usize, trace: f64) -> Result<f64> {
    let denom = 1.0 - numerator / m as f64;
    if !(denom > 0.0) {
        return Err(Error::IllPosedLoo(format!(
            "correction denominator 1 - {numerator}/{m} is not positive"
        )));
    }
    Ok((1.0 + trace) / denom)
}

/// Relative LOO error from residuals and leverages:
/// `mean(((y - yhat) / (1 - h))^2) / var(y)`.
fn relative_loo(y: &[f64], residuals: &[f64], leverages: &[f64]) -> Result<f64> {
    let m = y.len();
    let mut sum = 0.0;
    for (i, (&r, &h)) in residuals.iter().zip(leverages).enumerate() {
        if h >= LEVERAGE_LIMIT {
            return Err(Error::IllPosedLoo(format!("leverage of sample {i} is {h}")));
        }
        let e = r / (1.0 - h);
        sum += e * e;
    }
    let mse = sum / m as f64;
    if mse == 0.0 {
        return Ok(0.0);
    }
    // Constant observations have no variance to normalize by; a fit exact
    // to rounding is then perfect, anything else is undefined.
    let scale = y.iter().map(|v| v * v).sum::<f64>() / m as f64;
    let var = variance_unbiased(y);
    if !(var > ROUNDING * scale) {
        return if mse <= ROUNDING * scale {
            Ok(0.0)
        } else {
            Err(Error::IllPosedLoo("observations have zero variance".into()))
        };
    }
    Ok(mse / var)
}

fn complexity(ct: CtNumerator, active_size: usize, order: u32) -> f64 {
    match ct {
        CtNumerator::ActiveSize => active_size as f64,
        CtNumerator::MaxOrder => order as f64,
    }
}

/// Corrected leave-one-out error `CT * L` of a sparse solution, where `L`
/// is the relative LOO error of the least-squares fit on the active columns
/// and `CT = (1 - k/M)^-1 (1 + tr((Phi_A^T Phi_A)^-1))`.
pub fn loo_error(dictionary: &Dictionary, y: &[f64], solution: &SparseSolution, order: u32, ct: CtNumerator) -> Result<f64> {
    let m = dictionary.nrows();
    if y.len() != m {
        return Err(Error::DimensionMismatch { expected: m, got: y.len() });
    }
    if m < 2 {
        return Err(Error::IllPosedLoo("needs at least two samples".into()));
    }
    let set = &solution.active_set;
    let k = set.len();
    if k >= m {
        return Err(Error::IllPosedLoo(format!("{k} active terms for {m} samples")));
    }
    let fit = factor_active(dictionary.matrix(), y, set)?;
    let phi = dictionary.matrix();
    let residuals: Vec<f64> = (0..m)
        .map(|i| y[i] - set.iter().zip(&fit.coefficients).map(|(&j, &c)| phi[(i, j)] * c).sum::<f64>())
        .collect();
    let l = relative_loo(y, &residuals, &fit.leverages())?;
    let factor = ct_factor(complexity(ct, k, order), m, fit.trace_inverse_gram())?;
    Ok(factor * l)
}

/// Corrected LOO error of every prefix `path[..k]`, `k = 1..=len`, from a
/// single unpivoted QR of the path columns. Entries are `None` where the
/// error is ill-posed or the prefix is numerically rank deficient.
pub fn loo_path(dictionary: &Dictionary, y: &[f64], path: &[usize], order: u32, ct: CtNumerator) -> Result<Vec<Option<f64>>> {
    let phi = dictionary.matrix();
    let m = phi.nrows();
    if y.len() != m {
        return Err(Error::DimensionMismatch { expected: m, got: y.len() });
    }
    let k_max = path.len().min(m);
    if k_max == 0 {
        return Ok(Vec::new());
    }
    let a = DMatrix::from_fn(m, k_max, |i, j| phi[(i, path[j])]);
    let qr = a.qr();
    let q = qr.q();
    let r = qr.r();
    let y_vec = DVector::from_column_slice(y);

    let mut out = Vec::with_capacity(path.len());
    let mut residual = y.to_vec();
    let mut leverages = vec![0.0; m];
    let mut trace = 0.0;
    let (mut dmax, mut dmin) = (0.0f64, f64::INFINITY);
    let mut deficient = false;
    for k in 0..k_max {
        let rkk = r[(k, k)].abs();
        dmax = dmax.max(rkk);
        dmin = dmin.min(rkk);
        if deficient || !(dmin > 0.0) || dmax / dmin > MAX_CONDITION {
            deficient = true;
            out.push(None);
            continue;
        }
        let qk = q.column(k);
        let coef = qk.dot(&y_vec);
        for i in 0..m {
            residual[i] -= coef * qk[i];
            leverages[i] += qk[i] * qk[i];
        }
        // Column k of R^-1 by back substitution against earlier columns.
        let mut col = vec![0.0; k + 1];
        col[k] = 1.0 / r[(k, k)];
        for i in (0..k).rev() {
            let s: f64 = ((i + 1)..=k).map(|j| r[(i, j)] * col[j]).sum();
            col[i] = -s / r[(i, i)];
        }
        trace += col.iter().map(|v| v * v).sum::<f64>();
        let value = relative_loo(y, &residual, &leverages)
            .and_then(|l| ct_factor(complexity(ct, k + 1, order), m, trace).map(|f| f * l));
        out.push(value.ok());
    }
    out.resize(path.len(), None);
    Ok(out)
}

fn solve(dictionary: &Dictionary, y: &[f64], config: &AdaptiveConfig) -> Result<SparseSolution> {
    match config.solver {
        SolverKind::Omp => omp(dictionary, y, config.stop),
        SolverKind::Womp => womp(dictionary, y, config.stop, config.reweight),
    }
}

fn truncate(dictionary: &Dictionary, y: &[f64], solution: &SparseSolution, k: usize) -> Result<SparseSolution> {
    let set = solution.active_set[..k].to_vec();
    let fit = factor_active(dictionary.matrix(), y, &set)?;
    let mut coefficients = vec![0.0; dictionary.ncols()];
    for (&j, &c) in set.iter().zip(&fit.coefficients) {
        coefficients[j] = c;
    }
    let phi = dictionary.matrix();
    let residual_norm = (0..y.len())
        .map(|i| {
            let f: f64 = set.iter().zip(&fit.coefficients).map(|(&j, &c)| phi[(i, j)] * c).sum();
            (y[i] - f).powi(2)
        })
        .sum::<f64>()
        .sqrt();
    Ok(SparseSolution {
        active_set: set,
        coefficients,
        residual_norm,
        iterations: k,
        converged: solution.converged,
        residual_history: solution.residual_history[..=k].to_vec(),
    })
}

struct Candidate {
    index_set: MultiIndexSet,
    coefficients: Vec<f64>,
}

/// Fit one order: solve, optionally truncate the greedy path, and score.
fn fit_order(design: &ExperimentalDesign, y: &[f64], order: u32, weights: &[f64], config: &AdaptiveConfig) -> Result<(Candidate, usize, f64)> {
    let set = MultiIndexSet::generate(design.design_box().dim(), order, config.q, weights)?;
    let dictionary = Dictionary::build(&set, design.points_std())?;
    let mut solution = solve(&dictionary, y, config)?;
    if config.path_selection && !solution.active_set.is_empty() {
        let errors = loo_path(&dictionary, y, &solution.active_set, order, config.ct_numerator)?;
        if let Some(k) = argmin_error(&errors) {
            if k + 1 < solution.active_set.len() {
                solution = truncate(&dictionary, y, &solution, k + 1)?;
            }
        }
    }
    let error = loo_error(&dictionary, y, &solution, order, config.ct_numerator)?;
    let active_size = solution.active_set.len();
    Ok((
        Candidate {
            index_set: set,
            coefficients: solution.coefficients,
        },
        active_size,
        error,
    ))
}

/// Unnormalized total-index masses `sum_{alpha_i > 0} c_alpha^2`.
fn sobol_mass(index_set: &MultiIndexSet, coefficients: &[f64]) -> Vec<f64> {
    let mut mass = vec![0.0; index_set.dim()];
    for (alpha, &c) in index_set.indices().iter().zip(coefficients) {
        for (i, &a) in alpha.degrees().iter().enumerate() {
            if a > 0 {
                mass[i] += c * c;
            }
        }
    }
    mass
}

/// `w_i = 1 + (S_max - S_i) / sum_j S_j`; unchanged when every index is zero.
pub fn updated_weights(total_sobol: &[f64], current: &[f64]) -> Vec<f64> {
    let sum: f64 = total_sobol.iter().sum();
    if !(sum > 0.0) {
        return current.to_vec();
    }
    let max = total_sobol.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    total_sobol.iter().map(|s| 1.0 + (max - s) / sum).collect()
}

/// Stop test after each order, given the errors recorded so far (`None` for
/// ill-posed orders). Returns the reason and the position of the model to
/// keep. Overfitting needs two strict increases over three real orders, so
/// it cannot fire before the third order.
pub fn early_stop(errors: &[Option<f64>], tol: f64) -> Option<(StopReason, usize)> {
    let at = errors.len().checked_sub(1)?;
    if errors[at].is_some_and(|e| e < tol) {
        return Some((StopReason::TolMet, at));
    }
    if at >= 2 {
        if let (Some(e0), Some(e1), Some(e2)) = (errors[at - 2], errors[at - 1], errors[at]) {
            if e2 > e1 && e1 > e0 {
                return Some((StopReason::Overfit, at - 2));
            }
        }
    }
    None
}

/// Position of the smallest recorded error; the earliest order wins ties.
pub fn argmin_error(errors: &[Option<f64>]) -> Option<usize> {
    errors
        .iter()
        .enumerate()
        .filter_map(|(i, e)| e.map(|e| (i, e)))
        .fold(None, |acc: Option<(usize, f64)>, (i, e)| match acc {
            Some((_, b)) if b <= e => acc,
            _ => Some((i, e)),
        })
        .map(|(i, _)| i)
}

/// Adaptive order/weight loop for one output channel.
pub fn fit_adaptive(design: &ExperimentalDesign, channel: usize, config: &AdaptiveConfig) -> Result<(PceModel, FitDiagnostics)> {
    config.validate()?;
    let y = design.channel_values(channel)?;
    let dim = design.design_box().dim();
    let mut weights = vec![1.0; dim];
    let mut records: Vec<OrderRecord> = Vec::new();
    let mut candidates: Vec<Option<Candidate>> = Vec::new();
    let mut stop: Option<(StopReason, usize)> = None;
    let mut failures: Vec<String> = Vec::new();

    for order in config.p_min..=config.p_max {
        let attempt = fit_order(design, &y, order, &weights, config);
        let (candidate, active_size, error) = match attempt {
            Ok((c, a, e)) => (Some(c), a, Some(e)),
            Err(e @ (Error::IllPosedLoo(_) | Error::SingularSystem { .. })) => {
                failures.push(format!("p={order}: {e}"));
                (None, 0, None)
            }
            Err(e) => return Err(e),
        };
        records.push(OrderRecord {
            order,
            loo_error: error,
            active_size,
            weights: weights.clone(),
        });
        candidates.push(candidate);
        let at = records.len() - 1;
        let errors: Vec<Option<f64>> = records.iter().map(|r| r.loo_error).collect();
        stop = early_stop(&errors, config.tol);
        if stop.is_some() {
            break;
        }
        if let Some(c) = &candidates[at] {
            weights = updated_weights(&sobol_mass(&c.index_set, &c.coefficients), &weights);
        }
    }

    let (stop_reason, chosen) = match stop {
        Some(s) => s,
        None => match argmin_error(&records.iter().map(|r| r.loo_error).collect::<Vec<_>>()) {
            Some(i) => (StopReason::MaxOrder, i),
            None => {
                return Err(Error::FitFailed {
                    channel,
                    detail: format!("every order was ill-posed ({})", failures.join("; ")),
                })
            }
        },
    };
    let candidate = candidates[chosen].take().expect("chosen order has a fit");
    let diagnostics = FitDiagnostics {
        chosen_order: records[chosen].order,
        per_order: records,
        stop_reason,
        config: config.clone(),
    };
    let label = design
        .channel_labels()
        .get(channel)
        .cloned()
        .unwrap_or_else(|| format!("channel_{channel}"));
    let mut model = PceModel::new(design.design_box().clone(), candidate.index_set, candidate.coefficients, label)?
        .with_diagnostics(diagnostics.clone());
    if let Some(seed) = design.seed() {
        model = model.with_seed(seed);
    }
    Ok((model, diagnostics))
}

/// Independent adaptive fits for every channel of a design, in channel
/// order. A failing channel does not stop the others.
pub fn fit_all_channels(design: &ExperimentalDesign, config: &AdaptiveConfig) -> Result<Vec<Result<PceModel>>> {
    config.validate()?;
    if !design.is_complete() {
        return Err(Error::invalid("design has missing observations"));
    }
    Ok((0..design.channels())
        .into_par_iter()
        .map(|ch| fit_adaptive(design, ch, config).map(|(m, _)| m))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::MultiIndex;
    use crate::doe::{sample_lhs, seeded_rng, DesignBox};
    use proptest::prelude::*;
    use rand::Rng;

    /// Leave each row out, refit by SVD least squares on the rest, and
    /// apply the correction factor with an explicitly inverted Gram matrix.
    fn brute_force_loo(a: &DMatrix<f64>, y: &[f64], complexity: f64) -> f64 {
        let (m, k) = a.shape();
        let mut sq = 0.0;
        for i in 0..m {
            let rows: Vec<usize> = (0..m).filter(|&r| r != i).collect();
            let sub = DMatrix::from_fn(m - 1, k, |r, c| a[(rows[r], c)]);
            let rhs = DVector::from_iterator(m - 1, rows.iter().map(|&r| y[r]));
            let c = sub.svd(true, true).solve(&rhs, 1e-14).unwrap();
            let pred: f64 = (0..k).map(|j| a[(i, j)] * c[j]).sum();
            sq += (y[i] - pred).powi(2);
        }
        let mean = y.iter().sum::<f64>() / m as f64;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
        let gram_inv = (a.transpose() * a).try_inverse().unwrap();
        let ct = (1.0 + gram_inv.trace()) / (1.0 - complexity / m as f64);
        ct * (sq / m as f64) / var
    }

    fn solution_on(set: Vec<usize>, n: usize) -> SparseSolution {
        SparseSolution {
            iterations: set.len(),
            active_set: set,
            coefficients: vec![0.0; n],
            residual_norm: 0.0,
            converged: true,
            residual_history: Vec::new(),
        }
    }

    fn random_instance(seed: u64) -> (Dictionary, Vec<f64>, Vec<usize>) {
        let mut rng = seeded_rng(seed);
        let m = rng.random_range(6..=12);
        let n = rng.random_range(4..=8);
        let k = rng.random_range(1..=4usize);
        let phi = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut cols: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = rng.random_range(i..n);
            cols.swap(i, j);
        }
        cols.truncate(k);
        (Dictionary::from_matrix(phi), y, cols)
    }

    #[test]
    fn closed_form_matches_brute_force() {
        for seed in 0..200 {
            let (dict, y, set) = random_instance(seed);
            let a = DMatrix::from_fn(dict.nrows(), set.len(), |i, j| dict.matrix()[(i, set[j])]);
            for (ct, cplx) in [(CtNumerator::ActiveSize, set.len() as f64), (CtNumerator::MaxOrder, 3.0)] {
                let closed = loo_error(&dict, &y, &solution_on(set.clone(), dict.ncols()), 3, ct).unwrap();
                let brute = brute_force_loo(&a, &y, cplx);
                assert!((closed - brute).abs() <= 1e-10 * brute, "seed {seed}: {closed} vs {brute}");
            }
        }
    }

    #[test]
    fn path_errors_match_closed_form_per_prefix() {
        for seed in 0..100 {
            let (dict, y, set) = random_instance(1000 + seed);
            let path = loo_path(&dict, &y, &set, 2, CtNumerator::ActiveSize).unwrap();
            for k in 1..=set.len() {
                let direct = loo_error(&dict, &y, &solution_on(set[..k].to_vec(), dict.ncols()), 2, CtNumerator::ActiveSize).unwrap();
                let p = path[k - 1].unwrap();
                assert!((p - direct).abs() <= 1e-10 * direct, "seed {seed} k {k}: {p} vs {direct}");
            }
        }
    }

    #[test]
    fn exact_fit_with_slack_has_zero_error() {
        let mut rng = seeded_rng(3);
        let phi = DMatrix::from_fn(8, 3, |_, _| rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..8).map(|i| 2.0 * phi[(i, 0)] - phi[(i, 2)]).collect();
        let dict = Dictionary::from_matrix(phi);
        let e = loo_error(&dict, &y, &solution_on(vec![0, 2], 3), 1, CtNumerator::ActiveSize).unwrap();
        assert!(e < 1e-25, "{e}");
    }

    #[test]
    fn constant_observations() {
        let mut rng = seeded_rng(5);
        let mut phi = DMatrix::from_fn(10, 3, |_, _| rng.random_range(-1.0..1.0));
        phi.column_mut(0).fill(1.0);
        let dict = Dictionary::from_matrix(phi);
        let y = vec![0.7; 10];
        let e = loo_error(&dict, &y, &solution_on(vec![0], 3), 1, CtNumerator::ActiveSize).unwrap();
        assert_eq!(e, 0.0);
        let r = loo_error(&dict, &y, &solution_on(vec![1], 3), 1, CtNumerator::ActiveSize);
        assert!(matches!(r, Err(Error::IllPosedLoo(_))));
    }

    #[test]
    fn saturated_set_is_ill_posed() {
        let mut rng = seeded_rng(4);
        let phi = DMatrix::from_fn(4, 6, |_, _| rng.random_range(-1.0..1.0));
        let y = vec![1.0, -0.5, 0.25, 2.0];
        let dict = Dictionary::from_matrix(phi);
        let r = loo_error(&dict, &y, &solution_on(vec![0, 1, 2, 3], 6), 1, CtNumerator::ActiveSize);
        assert!(matches!(r, Err(Error::IllPosedLoo(_))));
        let path = loo_path(&dict, &y, &[0, 1, 2, 3], 1, CtNumerator::ActiveSize).unwrap();
        assert!(path[3].is_none());
    }

    fn planted_design(dim: usize, m: usize, seed: u64, terms: &[(Vec<u32>, f64)]) -> ExperimentalDesign {
        let pts = sample_lhs(dim, m, seed).unwrap();
        let obs = pts
            .iter()
            .map(|p| {
                let v: f64 = terms
                    .iter()
                    .map(|(a, c)| c * crate::basis::multivariate(&MultiIndex::new(a.clone()), p).unwrap())
                    .sum();
                vec![Some(v)]
            })
            .collect();
        ExperimentalDesign::new(DesignBox::unit(dim), pts, obs, vec!["qoi".into()]).unwrap()
    }

    // The quadratic sits on the dominant variable: after the first order the
    // weight update gives that variable w = 1, which keeps its square inside
    // the order-2 set, while linear terms survive any weight in [1, 2].
    fn degree_two_terms() -> Vec<(Vec<u32>, f64)> {
        vec![
            (vec![0, 0, 0, 0], 1.5),
            (vec![1, 0, 0, 0], -0.8),
            (vec![2, 0, 0, 0], 0.6),
            (vec![0, 1, 0, 0], 0.4),
            (vec![0, 0, 0, 1], -0.3),
        ]
    }

    #[test]
    fn planted_degree_two_stops_at_two() {
        let design = planted_design(4, 40, 17, &degree_two_terms());
        let config = AdaptiveConfig { p_min: 1, p_max: 6, tol: 1e-8, ..Default::default() };
        let (model, diag) = fit_adaptive(&design, 0, &config).unwrap();
        assert_eq!(diag.stop_reason, StopReason::TolMet);
        assert_eq!(diag.chosen_order, 2);
        assert_eq!(diag.per_order.len(), 2);
        for (a, c) in degree_two_terms() {
            let pos = model.index_set().position(&MultiIndex::new(a)).unwrap();
            assert!((model.coefficients()[pos] - c).abs() < 1e-8);
        }
        let pts = crate::doe::sample_uniform(4, 100, 99).unwrap();
        for p in &pts {
            let truth: f64 = degree_two_terms()
                .iter()
                .map(|(a, c)| c * crate::basis::multivariate(&MultiIndex::new(a.clone()), p).unwrap())
                .sum();
            assert!((model.evaluate(p).unwrap() - truth).abs() < 1e-8);
        }
    }

    #[test]
    fn single_order_is_a_plain_fit() {
        let design = planted_design(3, 30, 5, &[(vec![0, 0, 0], 1.0), (vec![3, 0, 0], 0.5), (vec![1, 1, 1], 0.2), (vec![0, 0, 5], 0.1)]);
        let config = AdaptiveConfig { p_min: 3, p_max: 3, tol: 0.0, path_selection: false, ..Default::default() };
        let (model, diag) = fit_adaptive(&design, 0, &config).unwrap();
        assert_eq!(diag.per_order.len(), 1);
        assert_eq!(diag.chosen_order, 3);
        let set = MultiIndexSet::generate(3, 3, config.q, &[1.0; 3]).unwrap();
        let dict = Dictionary::build(&set, design.points_std()).unwrap();
        let y = design.channel_values(0).unwrap();
        let direct = omp(&dict, &y, config.stop).unwrap();
        assert_eq!(model.coefficients(), &direct.coefficients[..]);
    }

    #[test]
    fn stop_rule_decisions() {
        let e = |v: &[f64]| v.iter().map(|&x| Some(x)).collect::<Vec<_>>();
        // Increasing errors: nothing before the third order, then overfit back to the first.
        assert_eq!(early_stop(&e(&[0.1]), 1e-8), None);
        assert_eq!(early_stop(&e(&[0.1, 0.2]), 1e-8), None);
        assert_eq!(early_stop(&e(&[0.1, 0.2, 0.3]), 1e-8), Some((StopReason::Overfit, 0)));
        assert_eq!(early_stop(&e(&[0.5, 0.1, 0.2, 0.3]), 1e-8), Some((StopReason::Overfit, 1)));
        // Equal errors are not an increase.
        assert_eq!(early_stop(&e(&[0.1, 0.2, 0.2]), 1e-8), None);
        assert_eq!(early_stop(&e(&[0.1, 1e-9]), 1e-8), Some((StopReason::TolMet, 1)));
        assert_eq!(early_stop(&[Some(0.1), None, Some(0.3)], 1e-8), None);
        assert_eq!(argmin_error(&[Some(0.3), None, Some(0.1), Some(0.1)]), Some(2));
        assert_eq!(argmin_error(&[None, None]), None);
    }

    #[test]
    fn exhausted_loop_returns_argmin() {
        // A non-polynomial response never reaches a zero tolerance.
        let pts = sample_lhs(2, 40, 8).unwrap();
        let obs = pts.iter().map(|p| vec![Some((3.0 * p[0]).sin() * (1.0 + p[1]).ln_1p())]).collect();
        let design = ExperimentalDesign::new(DesignBox::unit(2), pts, obs, vec!["qoi".into()]).unwrap();
        let config = AdaptiveConfig { p_min: 1, p_max: 4, tol: 0.0, ..Default::default() };
        let (_, diag) = fit_adaptive(&design, 0, &config).unwrap();
        if diag.stop_reason == StopReason::MaxOrder {
            let errors: Vec<Option<f64>> = diag.per_order.iter().map(|r| r.loo_error).collect();
            assert_eq!(diag.per_order[argmin_error(&errors).unwrap()].order, diag.chosen_order);
        } else {
            assert_eq!(diag.stop_reason, StopReason::Overfit);
            let n = diag.per_order.len();
            assert!(diag.per_order[n - 1].loo_error > diag.per_order[n - 2].loo_error);
        }
        assert!(diag.per_order.iter().any(|r| r.order == diag.chosen_order));
        for r in &diag.per_order {
            assert!(r.weights.iter().all(|&w| (1.0..=2.0).contains(&w)));
        }
    }

    #[test]
    fn deterministic_and_channel_independent() {
        let pts = sample_lhs(3, 30, 21).unwrap();
        let f = |p: &[f64]| (p[0] + 0.5 * p[1] * p[1]).exp() - p[2];
        let obs: Vec<Vec<Option<f64>>> = pts.iter().map(|p| vec![Some(f(p)), Some(f(p))]).collect();
        let design = ExperimentalDesign::new(DesignBox::unit(3), pts, obs, vec!["a".into(), "b".into()]).unwrap();
        let config = AdaptiveConfig { p_max: 4, ..Default::default() };
        let models: Vec<PceModel> = fit_all_channels(&design, &config).unwrap().into_iter().map(|m| m.unwrap()).collect();
        assert_eq!(models.len(), 2);
        assert_eq!(models[0].coefficients(), models[1].coefficients());
        assert_eq!(models[1].channel_label(), "b");
        let (again, _) = fit_adaptive(&design, 0, &config).unwrap();
        assert_eq!(again, models[0]);
    }

    #[test]
    fn rejects_bad_config() {
        let design = planted_design(2, 10, 1, &[(vec![0, 0], 1.0), (vec![1, 0], 1.0)]);
        for bad in [
            AdaptiveConfig { p_min: 0, ..Default::default() },
            AdaptiveConfig { p_min: 3, p_max: 2, ..Default::default() },
            AdaptiveConfig { q: 1.5, ..Default::default() },
        ] {
            assert!(matches!(fit_adaptive(&design, 0, &bad), Err(Error::InvalidParameter(_))));
        }
        let missing = ExperimentalDesign::unobserved(DesignBox::unit(2), sample_lhs(2, 5, 1).unwrap(), vec!["g".into()]).unwrap();
        assert!(fit_adaptive(&missing, 0, &AdaptiveConfig::default()).is_err());
    }

    proptest! {
        #[test]
        fn weight_update_range(s in prop::collection::vec(0.0f64..1.0, 1..10)) {
            prop_assume!(s.iter().sum::<f64>() > 0.0);
            let w = updated_weights(&s, &vec![1.0; s.len()]);
            let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for (wi, si) in w.iter().zip(&s) {
                prop_assert!((1.0..=2.0).contains(wi));
                if *si == max {
                    prop_assert_eq!(*wi, 1.0);
                }
            }
        }

        #[test]
        fn loo_oracle_property(seed in 0u64..100_000) {
            let (dict, y, set) = random_instance(seed);
            let a = DMatrix::from_fn(dict.nrows(), set.len(), |i, j| dict.matrix()[(i, set[j])]);
            let closed = loo_error(&dict, &y, &solution_on(set.clone(), dict.ncols()), 1, CtNumerator::ActiveSize).unwrap();
            let brute = brute_force_loo(&a, &y, set.len() as f64);
            prop_assert!((closed - brute).abs() <= 1e-10 * brute);
        }
    }
}
