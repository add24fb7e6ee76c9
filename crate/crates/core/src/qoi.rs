//! Quantity-of-interest oracles: analytic benchmarks with closed-form
//! statistics, a synthetic flat-top pattern proxy, and ingestion of sample
//! tables computed elsewhere.

use std::f64::consts::PI;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{check_point, multivariate, MultiIndex};
use crate::doe::{DesignBox, ExperimentalDesign};
use crate::error::{Error, Result};

/// Reference horn geometry in mm, `[a0, a1, w1, a2, w2, a3, w3, w4, a4]`.
pub const HORN_REFERENCE: [f64; 9] = [1.2, 1.5, 1.5, 2.3, 1.8, 4.55, 1.6, 1.35, 6.85];
pub const HORN_NAMES: [&str; 9] = ["a0", "a1", "w1", "a2", "w2", "a3", "w3", "w4", "a4"];
/// Milling tolerance: 0.2 mm for dimensions of 6 mm and above, else 0.1 mm.
pub const HORN_TOLERANCE: [f64; 9] = [0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.2];

pub const PROXY_NOTE: &str = "synthetic flat-top proxy pattern (not an electromagnetic model)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTerm {
    pub index: Vec<u32>,
    pub coefficient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleSpec {
    /// Planted Legendre expansion `sum_k c_k Psi_{alpha_k}`.
    SparsePoly { dim: usize, terms: Vec<PlantedTerm> },
    Ishigami {
        #[serde(default = "ishigami_a")]
        a: f64,
        #[serde(default = "ishigami_b")]
        b: f64,
    },
    SobolG {
        dim: usize,
        /// Defaults to `(0, 1, 4.5, 9, 99, 99, ...)`.
        #[serde(default)]
        a: Option<Vec<f64>>,
    },
    /// 361-angle pattern over the 9 horn variables. The box is the milling
    /// tolerance around the reference geometry, or a relative variation.
    FlattopProxy {
        #[serde(default)]
        relative_variation: Option<f64>,
    },
    ExternalTable { path: String },
}

fn ishigami_a() -> f64 {
    7.0
}

fn ishigami_b() -> f64 {
    0.1
}

pub fn sobol_g_default(dim: usize) -> Vec<f64> {
    const HEAD: [f64; 4] = [0.0, 1.0, 4.5, 9.0];
    (0..dim).map(|i| HEAD.get(i).copied().unwrap_or(99.0)).collect()
}

/// Integer angles from -180 to 180 degrees.
pub fn angle_grid() -> Vec<f64> {
    (-180..=180).map(f64::from).collect()
}

pub fn angle_label(theta: f64) -> String {
    format!("theta_{theta}")
}

/// Analytic mean, variance and total Sobol indices of the Ishigami function
/// with `x_i` uniform on `[-pi, pi]`.
pub fn ishigami_statistics(a: f64, b: f64) -> (f64, f64, [f64; 3]) {
    let pi4 = PI.powi(4);
    let pi8 = pi4 * pi4;
    let v1 = 0.5 * (1.0 + b * pi4 / 5.0).powi(2);
    let v2 = a * a / 8.0;
    let v13 = b * b * pi8 * (1.0 / 18.0 - 1.0 / 50.0);
    let v = v1 + v2 + v13;
    (a / 2.0, v, [(v1 + v13) / v, v2 / v, v13 / v])
}

/// Analytic mean, variance and total Sobol indices of the Sobol g-function
/// with inputs uniform on `[0, 1]`.
pub fn sobol_g_statistics(a: &[f64]) -> (f64, f64, Vec<f64>) {
    let vi: Vec<f64> = a.iter().map(|ai| 1.0 / (3.0 * (1.0 + ai).powi(2))).collect();
    let prod: f64 = vi.iter().map(|v| 1.0 + v).product();
    let var = prod - 1.0;
    let total = vi.iter().map(|v| v * (prod / (1.0 + v)) / var).collect();
    (1.0, var, total)
}

/// A validated oracle ready for evaluation.
#[derive(Debug, Clone)]
pub struct Oracle {
    spec: OracleSpec,
    design_box: DesignBox,
    labels: Vec<String>,
    planted: Vec<(MultiIndex, f64)>,
}

impl Oracle {
    pub fn new(spec: OracleSpec) -> Result<Self> {
        let scalar = || vec!["qoi".to_string()];
        let mut planted = Vec::new();
        let (design_box, labels) = match &spec {
            OracleSpec::SparsePoly { dim, terms } => {
                if *dim == 0 {
                    return Err(Error::invalid("sparse_poly needs dim >= 1"));
                }
                for t in terms {
                    if t.index.len() != *dim {
                        return Err(Error::DimensionMismatch { expected: *dim, got: t.index.len() });
                    }
                    if !t.coefficient.is_finite() {
                        return Err(Error::invalid("sparse_poly coefficients must be finite"));
                    }
                    planted.push((MultiIndex::new(t.index.clone()), t.coefficient));
                }
                (DesignBox::unit(*dim), scalar())
            }
            OracleSpec::Ishigami { a, b } => {
                if !a.is_finite() || !b.is_finite() {
                    return Err(Error::invalid("ishigami parameters must be finite"));
                }
                (DesignBox::unit(3), scalar())
            }
            OracleSpec::SobolG { dim, a } => {
                if *dim == 0 {
                    return Err(Error::invalid("sobol_g needs dim >= 1"));
                }
                if let Some(a) = a {
                    if a.len() != *dim {
                        return Err(Error::DimensionMismatch { expected: *dim, got: a.len() });
                    }
                    if a.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                        return Err(Error::invalid("sobol_g parameters must be finite and non-negative"));
                    }
                }
                (DesignBox::unit(*dim), scalar())
            }
            OracleSpec::FlattopProxy { relative_variation } => {
                let names: Vec<String> = HORN_NAMES.iter().map(|s| s.to_string()).collect();
                let b = match relative_variation {
                    None => DesignBox::new(names, HORN_REFERENCE.to_vec(), HORN_TOLERANCE.to_vec())?,
                    Some(f) if *f > 0.0 && *f < 1.0 => DesignBox::relative(names, HORN_REFERENCE.to_vec(), *f)?,
                    Some(f) => return Err(Error::invalid(format!("relative variation {f} is outside (0, 1)"))),
                };
                (b, angle_grid().into_iter().map(angle_label).collect())
            }
            OracleSpec::ExternalTable { .. } => {
                return Err(Error::invalid(
                    "an external table has no evaluator; ingest it as a design instead",
                ))
            }
        };
        Ok(Oracle {
            spec,
            design_box,
            labels,
            planted,
        })
    }

    pub fn spec(&self) -> &OracleSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.design_box.dim()
    }

    pub fn design_box(&self) -> &DesignBox {
        &self.design_box
    }

    pub fn channel_labels(&self) -> &[String] {
        &self.labels
    }

    /// One-line description recorded with designs built from this oracle.
    pub fn describe(&self) -> String {
        match &self.spec {
            OracleSpec::SparsePoly { dim, terms } => format!("oracle=sparse_poly dim={dim} terms={}", terms.len()),
            OracleSpec::Ishigami { a, b } => format!("oracle=ishigami a={a} b={b}"),
            OracleSpec::SobolG { dim, .. } => format!("oracle=sobol_g dim={dim}"),
            OracleSpec::FlattopProxy { relative_variation } => match relative_variation {
                Some(f) => format!("oracle=flattop_proxy variation={f}; {PROXY_NOTE}"),
                None => format!("oracle=flattop_proxy variation=tolerance; {PROXY_NOTE}"),
            },
            OracleSpec::ExternalTable { path } => format!("table={path}"),
        }
    }

    /// Evaluate at a standardized point; returns one value per channel.
    pub fn evaluate(&self, point_std: &[f64]) -> Result<Vec<f64>> {
        check_point(point_std, self.dim())?;
        Ok(match &self.spec {
            OracleSpec::SparsePoly { .. } => {
                let mut v = 0.0;
                for (alpha, c) in &self.planted {
                    v += c * multivariate(alpha, point_std)?;
                }
                vec![v]
            }
            OracleSpec::Ishigami { a, b } => {
                let x: Vec<f64> = point_std.iter().map(|v| PI * v).collect();
                vec![x[0].sin() + a * x[1].sin().powi(2) + b * x[2].powi(4) * x[0].sin()]
            }
            OracleSpec::SobolG { dim, a } => {
                let a = a.clone().unwrap_or_else(|| sobol_g_default(*dim));
                let v = point_std
                    .iter()
                    .zip(&a)
                    .map(|(xi, ai)| {
                        let u = 0.5 * (xi + 1.0);
                        ((4.0 * u - 2.0).abs() + ai) / (1.0 + ai)
                    })
                    .product();
                vec![v]
            }
            OracleSpec::FlattopProxy { .. } => {
                let phys = self.design_box.to_physical(point_std)?;
                flattop_pattern(&phys)
            }
            OracleSpec::ExternalTable { .. } => unreachable!("rejected at construction"),
        })
    }
}

pub fn evaluate_oracle(spec: &OracleSpec, point_std: &[f64]) -> Result<Vec<f64>> {
    Oracle::new(spec.clone())?.evaluate(point_std)
}

/// Fill a design by evaluating the oracle at each standardized point.
pub fn run_design(oracle: &Oracle, points_std: Vec<Vec<f64>>) -> Result<ExperimentalDesign> {
    if points_std.is_empty() {
        return Err(Error::EmptyDesign);
    }
    let observations = points_std
        .par_iter()
        .enumerate()
        .map(|(row, p)| {
            oracle
                .evaluate(p)
                .map(|v| v.into_iter().map(Some).collect::<Vec<_>>())
                .map_err(|e| Error::Oracle { row, source: Box::new(e) })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentalDesign::new(oracle.design_box().clone(), points_std, observations, oracle.labels.clone())?.with_note(oracle.describe()))
}

/// Read externally computed samples (physical units) against a known box.
pub fn ingest_table(path: impl AsRef<Path>, design_box: &DesignBox) -> Result<ExperimentalDesign> {
    let path = path.as_ref();
    Ok(ExperimentalDesign::load_csv(path, design_box)?.with_note(format!("table={}", path.display())))
}

// Sensitivities of the proxy's shape parameters to relative deviations
// `delta_i = x_i / reference_i - 1` of the horn variables.
const LEVEL: [f64; 9] = [0.9, -0.5, 0.35, 0.6, -0.25, 0.4, -0.3, 0.2, -0.45];
const LEVEL_CURVATURE: f64 = 0.8;
const TILT: [f64; 9] = [0.3, 0.5, -0.4, 0.0, 0.25, -0.2, 0.1, -0.35, 0.15];
const RIPPLE: [f64; 9] = [3.0, 1.0, 2.0, 0.5, 1.0, 2.0, 0.5, 1.0, 1.5];
const SIDE: [f64; 9] = [1.0, -2.0, 0.5, 1.5, -0.5, 0.8, 1.2, -1.0, 0.6];

/// Lobe spacing and count: lobes sit at `k * LOBE_SPACING`, `|k| <= LOBES`.
const LOBE_SPACING: f64 = 10.0;
const LOBES: i32 = 8;
/// Lobe width over spacing at the reference geometry.
const WIDTH_RATIO: f64 = 0.55;
const EDGE: f64 = 50.5;
const EDGE_SOFTNESS: f64 = 0.1;
const FLOOR: f64 = 0.01;

/// Synthetic normalized gain pattern on the integer angle grid for a
/// physical horn geometry. Inside the window the pattern is a sum of
/// Gaussian lobes whose level, tilt and width (hence ripple) move smoothly
/// with the geometry; outside it is a low floor with shoulder lobes near
/// +-110 degrees. The reference geometry gives a flat top of unit level on
/// `|theta| <= 50`.
pub fn flattop_pattern(physical: &[f64]) -> Vec<f64> {
    let delta: Vec<f64> = physical.iter().zip(&HORN_REFERENCE).map(|(x, r)| x / r - 1.0).collect();
    let dot = |w: &[f64; 9]| delta.iter().zip(w).map(|(d, w)| d * w).sum::<f64>();
    let u = dot(&LEVEL);
    let level = 1.0 + u + LEVEL_CURVATURE * u * u;
    let tilt = dot(&TILT);
    let shrink: f64 = delta.iter().zip(&RIPPLE).map(|(d, r)| r * d * d).sum();
    let sigma = WIDTH_RATIO * LOBE_SPACING / (1.0 + shrink);
    let side = dot(&SIDE);
    let norm = LOBE_SPACING / (sigma * (2.0 * PI).sqrt());

    angle_grid()
        .into_iter()
        .map(|theta| {
            let lobes: f64 = (-LOBES..=LOBES)
                .map(|k| {
                    let z = (theta - f64::from(k) * LOBE_SPACING) / sigma;
                    (-0.5 * z * z).exp()
                })
                .sum::<f64>()
                * norm;
            let top = level * (1.0 + tilt * theta / 50.0) * lobes;
            let shoulder = (-0.5 * ((theta.abs() - 110.0) / 12.0).powi(2)).exp();
            let floor = FLOOR * (1.0 + side) + 0.03 * (1.0 + 2.0 * side) * shoulder;
            let window = 1.0 / (1.0 + ((theta.abs() - EDGE) / EDGE_SOFTNESS).exp());
            window * top + (1.0 - window) * floor
        })
        .collect()
}
