//! The fitted expansion as a model object: evaluation, moments, total Sobol
//! indices, sample generation, kernel density estimates and percentiles,
//! plus a checksummed JSON file format.

use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptive::FitDiagnostics;
use crate::basis::{check_point, MultiIndex, MultiIndexSet, PointTables};
use crate::doe::{seeded_rng, DesignBox};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct PceModel {
    design_box: DesignBox,
    index_set: MultiIndexSet,
    coefficients: Vec<f64>,
    channel_label: String,
    diagnostics: Option<FitDiagnostics>,
    seed: Option<u64>,
    /// Positions of nonzero coefficients, in index-set order.
    active: Vec<usize>,
    max_degrees: Vec<u32>,
}

impl PceModel {
    pub fn new(design_box: DesignBox, index_set: MultiIndexSet, coefficients: Vec<f64>, channel_label: impl Into<String>) -> Result<Self> {
        if coefficients.len() != index_set.len() {
            return Err(Error::DimensionMismatch {
                expected: index_set.len(),
                got: coefficients.len(),
            });
        }
        if design_box.dim() != index_set.dim() {
            return Err(Error::DimensionMismatch {
                expected: design_box.dim(),
                got: index_set.dim(),
            });
        }
        if index_set.indices().first().is_none_or(|a| !a.is_constant()) {
            return Err(Error::invalid("first multi-index must be all zeros"));
        }
        if coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("coefficients must be finite"));
        }
        let active: Vec<usize> = (0..coefficients.len()).filter(|&i| coefficients[i] != 0.0).collect();
        let mut max_degrees = vec![0u32; index_set.dim()];
        for &i in &active {
            for (m, &a) in max_degrees.iter_mut().zip(index_set.indices()[i].degrees()) {
                *m = (*m).max(a);
            }
        }
        Ok(PceModel {
            design_box,
            index_set,
            coefficients,
            channel_label: channel_label.into(),
            diagnostics: None,
            seed: None,
            active,
            max_degrees,
        })
    }

    pub fn with_diagnostics(mut self, diagnostics: FitDiagnostics) -> Self {
        self.diagnostics = Some(diagnostics);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn design_box(&self) -> &DesignBox {
        &self.design_box
    }

    pub fn index_set(&self) -> &MultiIndexSet {
        &self.index_set
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn channel_label(&self) -> &str {
        &self.channel_label
    }

    pub fn diagnostics(&self) -> Option<&FitDiagnostics> {
        self.diagnostics.as_ref()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.index_set.dim()
    }

    /// Number of nonzero coefficients.
    pub fn sparsity(&self) -> usize {
        self.active.len()
    }

    /// `sum_n c_n Psi_{alpha_n}(xi)`, accumulated in index-set order.
    pub fn evaluate(&self, point_std: &[f64]) -> Result<f64> {
        check_point(point_std, self.dim())?;
        Ok(self.eval_unchecked(point_std))
    }

    fn eval_unchecked(&self, point_std: &[f64]) -> f64 {
        let tables = PointTables::new(point_std, &self.max_degrees);
        let indices = self.index_set.indices();
        self.active
            .iter()
            .map(|&i| self.coefficients[i] * tables.eval(&indices[i]))
            .sum()
    }

    pub fn evaluate_many(&self, points_std: &[Vec<f64>]) -> Result<Vec<f64>> {
        for p in points_std {
            check_point(p, self.dim())?;
        }
        Ok(points_std.par_iter().map(|p| self.eval_unchecked(p)).collect())
    }

    /// Evaluate at a point given in physical units.
    pub fn evaluate_physical(&self, point: &[f64]) -> Result<f64> {
        let std = self.design_box.to_standard(point)?;
        Ok(self.eval_unchecked(&std))
    }

    pub fn mean(&self) -> f64 {
        self.coefficients[0]
    }

    pub fn variance(&self) -> f64 {
        self.coefficients[1..].iter().map(|c| c * c).sum()
    }

    pub fn std_dev(&self) -> f64 {
        self.variance().sqrt()
    }

    /// `S_i = sum_{alpha_i > 0} c_alpha^2 / sigma^2`.
    pub fn total_sobol(&self) -> Result<Vec<f64>> {
        let var = self.variance();
        if !(var > 0.0) {
            return Err(Error::UndefinedSensitivity);
        }
        let mut s = vec![0.0; self.dim()];
        for (alpha, &c) in self.index_set.indices().iter().zip(&self.coefficients) {
            for (si, &a) in s.iter_mut().zip(alpha.degrees()) {
                if a > 0 {
                    *si += c * c;
                }
            }
        }
        Ok(s.into_iter().map(|v| (v / var).min(1.0)).collect())
    }

    /// Evaluate at `count` i.i.d. uniform points of the standard cube.
    /// Points are drawn sequentially from one seeded stream, so the output
    /// does not depend on the thread count.
    pub fn generate_samples(&self, count: usize, seed: u64) -> Result<Vec<f64>> {
        if count == 0 {
            return Err(Error::invalid("sample count must be at least 1"));
        }
        const CHUNK: usize = 8192;
        let d = self.dim();
        let mut rng = seeded_rng(seed);
        let mut out = Vec::with_capacity(count);
        let mut buf = Vec::with_capacity(CHUNK.min(count));
        while out.len() < count {
            let n = CHUNK.min(count - out.len());
            buf.clear();
            buf.extend((0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect::<Vec<f64>>()));
            out.par_extend(buf.par_iter().map(|p| self.eval_unchecked(p)));
        }
        Ok(out)
    }

    fn document(&self) -> ModelBody {
        ModelBody {
            schema_version: SCHEMA_VERSION,
            channel_label: self.channel_label.clone(),
            design_box: BoxDoc {
                names: self.design_box.names().to_vec(),
                nominal: self.design_box.nominal().to_vec(),
                half_width: self.design_box.half_width().to_vec(),
            },
            index_set: IndexSetDoc {
                d: self.index_set.dim(),
                p: self.index_set.max_order(),
                q: self.index_set.norm_q(),
                w: self.index_set.weights().to_vec(),
                indices: self.index_set.indices().to_vec(),
            },
            coefficients: self.coefficients.clone(),
            diagnostics: self.diagnostics.clone(),
            seed: self.seed,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let body = self.document();
        let checksum = checksum(&body)?;
        let file = ModelFile { body, checksum };
        serde_json::to_string_pretty(&file).map_err(|e| Error::Malformed(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Malformed(e.to_string()))?;
        let version = value
            .get("schema_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Malformed("missing schema_version".into()))?;
        if version != SCHEMA_VERSION as u64 {
            return Err(Error::VersionMismatch {
                found: version.min(u32::MAX as u64) as u32,
                supported: SCHEMA_VERSION,
            });
        }
        let file: ModelFile = serde_json::from_value(value).map_err(|e| Error::Malformed(e.to_string()))?;
        let computed = checksum(&file.body)?;
        if computed != file.checksum {
            return Err(Error::Checksum {
                stored: file.checksum,
                computed,
            });
        }
        let b = file.body;
        let design_box = DesignBox::new(b.design_box.names, b.design_box.nominal, b.design_box.half_width)?;
        let set = MultiIndexSet::from_parts(b.index_set.d, b.index_set.p, b.index_set.q, b.index_set.w, b.index_set.indices)?;
        let mut model = PceModel::new(design_box, set, b.coefficients, b.channel_label)?;
        model.diagnostics = b.diagnostics;
        model.seed = b.seed;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Models for several channels over one box, evaluated together so the
/// univariate tables are built once per point.
#[derive(Debug, Clone)]
pub struct ChannelModels {
    models: Vec<PceModel>,
    max_degrees: Vec<u32>,
}

impl ChannelModels {
    pub fn new(models: Vec<PceModel>) -> Result<Self> {
        let first = models.first().ok_or_else(|| Error::invalid("no channel models"))?;
        let mut max_degrees = vec![0u32; first.dim()];
        for m in &models {
            if m.design_box != first.design_box {
                return Err(Error::invalid(format!("channel '{}' uses a different box", m.channel_label)));
            }
            for (a, &b) in max_degrees.iter_mut().zip(&m.max_degrees) {
                *a = (*a).max(b);
            }
        }
        Ok(ChannelModels { models, max_degrees })
    }

    pub fn models(&self) -> &[PceModel] {
        &self.models
    }

    pub fn design_box(&self) -> &DesignBox {
        &self.models[0].design_box
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn evaluate(&self, point_std: &[f64]) -> Result<Vec<f64>> {
        check_point(point_std, self.max_degrees.len())?;
        let tables = PointTables::new(point_std, &self.max_degrees);
        Ok(self
            .models
            .iter()
            .map(|m| {
                let indices = m.index_set.indices();
                m.active.iter().map(|&i| m.coefficients[i] * tables.eval(&indices[i])).sum()
            })
            .collect())
    }

    pub fn evaluate_physical(&self, point: &[f64]) -> Result<Vec<f64>> {
        self.evaluate(&self.design_box().to_standard(point)?)
    }

    /// Samples per channel at the points `PceModel::generate_samples` would
    /// draw for the same seed, so each row equals that channel's own output.
    pub fn generate_samples(&self, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        if count == 0 {
            return Err(Error::invalid("sample count must be at least 1"));
        }
        const CHUNK: usize = 8192;
        let d = self.max_degrees.len();
        let mut rng = seeded_rng(seed);
        let mut out = vec![Vec::with_capacity(count); self.models.len()];
        let mut buf = Vec::with_capacity(CHUNK.min(count));
        let mut done = 0;
        while done < count {
            let n = CHUNK.min(count - done);
            buf.clear();
            buf.extend((0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect::<Vec<f64>>()));
            let rows: Vec<Vec<f64>> = buf.par_iter().map(|p| self.evaluate(p).expect("drawn inside the cube")).collect();
            for row in rows {
                for (o, v) in out.iter_mut().zip(row) {
                    o.push(v);
                }
            }
            done += n;
        }
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
struct BoxDoc {
    names: Vec<String>,
    nominal: Vec<f64>,
    half_width: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct IndexSetDoc {
    d: usize,
    p: u32,
    q: f64,
    w: Vec<f64>,
    indices: Vec<MultiIndex>,
}

#[derive(Serialize, Deserialize)]
struct ModelBody {
    schema_version: u32,
    channel_label: String,
    #[serde(rename = "box")]
    design_box: BoxDoc,
    index_set: IndexSetDoc,
    coefficients: Vec<f64>,
    diagnostics: Option<FitDiagnostics>,
    seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    #[serde(flatten)]
    body: ModelBody,
    checksum: String,
}

fn checksum(body: &ModelBody) -> Result<String> {
    let text = serde_json::to_string(body).map_err(|e| Error::Malformed(e.to_string()))?;
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

/// Density grid: `points` equally spaced values covering
/// `[min - padding*h, max + padding*h]`, refined if needed so the spacing
/// never exceeds the bandwidth `h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub points: usize,
    pub padding: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { points: 512, padding: 4.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdfEstimate {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
    pub sample_count: usize,
}

impl PdfEstimate {
    /// Trapezoid rule over the grid.
    pub fn integral(&self) -> f64 {
        self.grid
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, f)| 0.5 * (x[1] - x[0]) * (f[0] + f[1]))
            .sum()
    }
}

/// Linear-interpolation sample quantile of sorted data (`q` in `[0, 1]`).
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `(2 / (3N))^(1/5) * min(sigma, iqr)`. The interquartile range falls back
/// to the standard deviation when it is zero.
pub fn kde_bandwidth(samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    // Identical samples: the mean carries rounding, so test equality rather
    // than a zero standard deviation.
    if sorted[0] == sorted[sorted.len() - 1] {
        return Err(Error::DegenerateDistribution);
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let sd = (samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt();
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr) } else { sd };
    Ok(bandwidth_from(samples.len(), spread))
}

fn bandwidth_from(count: usize, spread: f64) -> f64 {
    (2.0 / (3.0 * count as f64)).powf(0.2) * spread
}

/// Gaussian kernel density estimate on a uniform grid.
pub fn estimate_pdf(samples: &[f64], grid: GridSpec) -> Result<PdfEstimate> {
    if grid.points < 2 {
        return Err(Error::invalid("density grid needs at least two points"));
    }
    if !(grid.padding >= 0.0) {
        return Err(Error::invalid("grid padding must be non-negative"));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("samples must be finite"));
    }
    let h = kde_bandwidth(samples)?;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = sorted[0] - grid.padding * h;
    let hi = sorted[sorted.len() - 1] + grid.padding * h;
    // Keep the spacing below one bandwidth so the trapezoid rule stays exact
    // to well under 1e-3 whatever the spread of the data.
    let points = grid.points.max(((hi - lo) / h).ceil() as usize + 1);
    let step = (hi - lo) / (points - 1) as f64;
    let xs: Vec<f64> = (0..points).map(|i| lo + step * i as f64).collect();
    let norm = 1.0 / (sorted.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    // Kernels beyond 40 bandwidths underflow to zero; restrict each grid
    // point to the samples inside that window.
    let reach = 40.0 * h;
    let density = xs
        .par_iter()
        .map(|&x| {
            let start = sorted.partition_point(|&s| s < x - reach);
            let end = sorted.partition_point(|&s| s <= x + reach);
            sorted[start..end]
                .iter()
                .map(|&s| {
                    let u = (x - s) / h;
                    (-0.5 * u * u).exp()
                })
                .sum::<f64>()
                * norm
        })
        .collect();
    Ok(PdfEstimate {
        grid: xs,
        density,
        bandwidth: h,
        sample_count: samples.len(),
    })
}

/// Nearest-rank percentile: the sorted sample at rank `ceil(P N / 100)`.
pub fn percentile(samples: &[f64], p: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::invalid(format!("percentile {p} is outside (0, 100]")));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[nearest_rank(sorted.len(), p) - 1])
}

/// Several percentiles with a single sort.
pub fn percentiles(samples: &[f64], ps: &[f64]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    if let Some(p) = ps.iter().find(|&&p| !(p > 0.0 && p <= 100.0)) {
        return Err(Error::invalid(format!("percentile {p} is outside (0, 100]")));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(ps.iter().map(|&p| sorted[nearest_rank(sorted.len(), p) - 1]).collect())
}

fn nearest_rank(n: usize, p: f64) -> usize {
    // Guard against p*n/100 landing a hair above an integer.
    let raw = p * n as f64 / 100.0;
    let rounded = raw.round();
    let rank = if (raw - rounded).abs() <= 1e-9 * raw.max(1.0) { rounded } else { raw.ceil() };
    (rank as usize).clamp(1, n)
}
