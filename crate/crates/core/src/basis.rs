//! Truncated multi-index sets and the orthonormal Legendre basis.
//!
//! Univariate polynomials are normalized so that `E[psi_n(X)^2] = 1` for
//! `X ~ U(-1, 1)`, i.e. `psi_n(x) = sqrt(2n + 1) P_n(x)`. Under that convention
//! the variance of an expansion is the sum of its squared non-constant
//! coefficients.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack used when testing the truncation inequality, so that boundary
/// indices such as `(p, 0, ..)` are not lost to rounding in `x^q^(1/q)`.
const TRUNCATION_SLACK: f64 = 1e-10;

const DOMAIN_SLACK: f64 = 1e-12;

/// Degree vector of one multivariate basis function.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MultiIndex(Vec<u32>);

impl MultiIndex {
    pub fn new(degrees: Vec<u32>) -> Self {
        MultiIndex(degrees)
    }

    pub fn zeros(dim: usize) -> Self {
        MultiIndex(vec![0; dim])
    }

    pub fn degrees(&self) -> &[u32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn total_degree(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn is_constant(&self) -> bool {
        self.0.iter().all(|&a| a == 0)
    }

    /// Weighted q-quasi-norm `(sum_i (w_i a_i)^q)^(1/q)`.
    pub fn weighted_norm(&self, norm_q: f64, weights: &[f64]) -> f64 {
        let s: f64 = self
            .0
            .iter()
            .zip(weights)
            .filter(|(&a, _)| a > 0)
            .map(|(&a, &w)| (w * a as f64).powf(norm_q))
            .sum();
        s.powf(1.0 / norm_q)
    }
}

impl From<Vec<u32>> for MultiIndex {
    fn from(v: Vec<u32>) -> Self {
        MultiIndex(v)
    }
}

/// Anisotropic-hyperbolic truncation set, stored in graded order: total
/// degree ascending, ties broken by descending lexicographic order (so
/// `(1,0)` precedes `(0,1)`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiIndexSet {
    dim: usize,
    max_order: u32,
    norm_q: f64,
    weights: Vec<f64>,
    indices: Vec<MultiIndex>,
}

impl MultiIndexSet {
    pub fn generate(dim: usize, max_order: u32, norm_q: f64, weights: &[f64]) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dimension must be at least 1"));
        }
        if !(norm_q > 0.0 && norm_q <= 1.0) {
            return Err(Error::invalid(format!("norm_q = {norm_q} is outside (0, 1]")));
        }
        if weights.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: weights.len(),
            });
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::invalid(format!("weight {w} is not a positive finite number")));
        }

        let p = max_order as f64;
        let bounds: Vec<u32> = weights
            .iter()
            .map(|w| (p / w * (1.0 + TRUNCATION_SLACK)).floor() as u32)
            .collect();
        let limit = p.powf(norm_q) * (1.0 + TRUNCATION_SLACK);

        let mut indices = Vec::new();
        let mut current = vec![0u32; dim];
        enumerate(0, 0.0, limit, norm_q, weights, &bounds, &mut current, &mut indices);

        indices.sort_by(|a: &MultiIndex, b: &MultiIndex| {
            a.total_degree()
                .cmp(&b.total_degree())
                .then_with(|| b.0.cmp(&a.0))
        });

        Ok(MultiIndexSet {
            dim,
            max_order,
            norm_q,
            weights: weights.to_vec(),
            indices,
        })
    }

    /// Hyperbolic set with unit weights.
    pub fn hyperbolic(dim: usize, max_order: u32, norm_q: f64) -> Result<Self> {
        Self::generate(dim, max_order, norm_q, &vec![1.0; dim])
    }

    /// Build a set from an explicit list of indices (used when loading a
    /// stored model). The list is validated but not re-truncated.
    pub fn from_parts(
        dim: usize,
        max_order: u32,
        norm_q: f64,
        weights: Vec<f64>,
        indices: Vec<MultiIndex>,
    ) -> Result<Self> {
        if weights.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: weights.len(),
            });
        }
        if let Some(bad) = indices.iter().find(|a| a.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: bad.dim(),
            });
        }
        if indices.first().is_none_or(|a| !a.is_constant()) {
            return Err(Error::invalid("the first index must be the constant term"));
        }
        Ok(MultiIndexSet {
            dim,
            max_order,
            norm_q,
            weights,
            indices,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_order(&self) -> u32 {
        self.max_order
    }

    pub fn norm_q(&self) -> f64 {
        self.norm_q
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn indices(&self) -> &[MultiIndex] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, index: &MultiIndex) -> bool {
        self.indices.iter().any(|a| a == index)
    }

    pub fn position(&self, index: &MultiIndex) -> Option<usize> {
        self.indices.iter().position(|a| a == index)
    }

    /// Highest degree used in each coordinate.
    pub fn max_degree_per_dim(&self) -> Vec<u32> {
        let mut out = vec![0; self.dim];
        for a in &self.indices {
            for (m, &d) in out.iter_mut().zip(a.degrees()) {
                *m = (*m).max(d);
            }
        }
        out
    }
}

#[allow(clippy::too_many_arguments)]
fn enumerate(
    coord: usize,
    partial: f64,
    limit: f64,
    norm_q: f64,
    weights: &[f64],
    bounds: &[u32],
    current: &mut Vec<u32>,
    out: &mut Vec<MultiIndex>,
) {
    if coord == current.len() {
        out.push(MultiIndex(current.clone()));
        return;
    }
    for a in 0..=bounds[coord] {
        let term = if a == 0 {
            0.0
        } else {
            (weights[coord] * a as f64).powf(norm_q)
        };
        let s = partial + term;
        if s > limit {
            break;
        }
        current[coord] = a;
        enumerate(coord + 1, s, limit, norm_q, weights, bounds, current, out);
    }
    current[coord] = 0;
}

fn check_domain(x: f64) -> Result<()> {
    if x.is_nan() || x.abs() > 1.0 + DOMAIN_SLACK {
        return Err(Error::Domain { value: x });
    }
    Ok(())
}

/// Orthonormal Legendre polynomial `sqrt(2n+1) P_n(x)`.
pub fn legendre(order: u32, x: f64) -> Result<f64> {
    check_domain(x)?;
    let mut prev = 1.0;
    if order == 0 {
        return Ok(1.0);
    }
    let mut cur = x;
    for n in 1..order {
        let nf = n as f64;
        let next = ((2.0 * nf + 1.0) * x * cur - nf * prev) / (nf + 1.0);
        prev = cur;
        cur = next;
    }
    Ok((2.0 * order as f64 + 1.0).sqrt() * cur)
}

/// Orthonormal Legendre values `psi_0(x) ..= psi_max(x)`, without domain check.
pub(crate) fn legendre_table_unchecked(max_order: u32, x: f64, out: &mut Vec<f64>) {
    out.clear();
    out.push(1.0);
    if max_order == 0 {
        return;
    }
    let mut prev = 1.0;
    let mut cur = x;
    out.push(3f64.sqrt() * cur);
    for n in 1..max_order {
        let nf = n as f64;
        let next = ((2.0 * nf + 1.0) * x * cur - nf * prev) / (nf + 1.0);
        prev = cur;
        cur = next;
        out.push((2.0 * (nf + 1.0) + 1.0).sqrt() * cur);
    }
}

pub fn legendre_table(max_order: u32, x: f64) -> Result<Vec<f64>> {
    check_domain(x)?;
    let mut out = Vec::with_capacity(max_order as usize + 1);
    legendre_table_unchecked(max_order, x, &mut out);
    Ok(out)
}

/// `Psi_alpha(xi) = prod_i psi_{alpha_i}(xi_i)`.
pub fn multivariate(index: &MultiIndex, point: &[f64]) -> Result<f64> {
    if index.dim() != point.len() {
        return Err(Error::DimensionMismatch {
            expected: index.dim(),
            got: point.len(),
        });
    }
    let mut v = 1.0;
    for (&a, &x) in index.degrees().iter().zip(point) {
        v *= legendre(a, x)?;
    }
    Ok(v)
}

/// Per-coordinate tables of univariate values at one point, reused across
/// all columns of a dictionary row.
pub(crate) struct PointTables {
    tables: Vec<Vec<f64>>,
}

impl PointTables {
    pub(crate) fn new(point: &[f64], max_degrees: &[u32]) -> Self {
        let tables = point
            .iter()
            .zip(max_degrees)
            .map(|(&x, &m)| {
                let mut t = Vec::with_capacity(m as usize + 1);
                legendre_table_unchecked(m, x, &mut t);
                t
            })
            .collect();
        PointTables { tables }
    }

    #[inline]
    pub(crate) fn eval(&self, index: &MultiIndex) -> f64 {
        index
            .degrees()
            .iter()
            .zip(&self.tables)
            .fold(1.0, |acc, (&a, t)| acc * t[a as usize])
    }
}

pub(crate) fn check_point(point: &[f64], dim: usize) -> Result<()> {
    if point.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: point.len(),
        });
    }
    point.iter().try_for_each(|&x| check_domain(x))
}

/// Measurement matrix `[Phi]_{m,n} = Psi_{alpha_n}(xi^(m))`.
#[derive(Debug, Clone)]
pub struct Dictionary {
    matrix: DMatrix<f64>,
    points: Vec<Vec<f64>>,
    index_set: MultiIndexSet,
}

impl Dictionary {
    pub fn build(index_set: &MultiIndexSet, points: &[Vec<f64>]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyDesign);
        }
        for p in points {
            check_point(p, index_set.dim())?;
        }
        let max_deg = index_set.max_degree_per_dim();
        let n = index_set.len();
        let rows: Vec<Vec<f64>> = points
            .par_iter()
            .map(|p| {
                let t = PointTables::new(p, &max_deg);
                index_set.indices().iter().map(|a| t.eval(a)).collect()
            })
            .collect();
        let matrix = DMatrix::from_fn(points.len(), n, |i, j| rows[i][j]);
        Ok(Dictionary {
            matrix,
            points: points.to_vec(),
            index_set: index_set.clone(),
        })
    }

    /// Wrap an arbitrary matrix as a dictionary (used by solver tests and
    /// sparse-recovery experiments that do not come from a PCE basis).
    pub fn from_matrix(matrix: DMatrix<f64>) -> Self {
        let n = matrix.ncols();
        let indices = (0..n)
            .map(|j| MultiIndex(vec![j as u32]))
            .collect::<Vec<_>>();
        let index_set = MultiIndexSet {
            dim: 1,
            max_order: n.saturating_sub(1) as u32,
            norm_q: 1.0,
            weights: vec![1.0],
            indices,
        };
        Dictionary {
            matrix,
            points: Vec::new(),
            index_set,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn index_set(&self) -> &MultiIndexSet {
        &self.index_set
    }

    pub fn nrows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.matrix.ncols()
    }
}
