//! Experimental designs over a physical tolerance box.
//!
//! Points are kept in the standardized cube `[-1, 1]^d`; the box maps them to
//! physical units as `nominal + half_width * xi`.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const CUBE_SLACK: f64 = 1e-12;

/// Seedable generator used everywhere randomness enters a computation.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignBox {
    names: Vec<String>,
    nominal: Vec<f64>,
    half_width: Vec<f64>,
}

impl DesignBox {
    pub fn new(names: Vec<String>, nominal: Vec<f64>, half_width: Vec<f64>) -> Result<Self> {
        let d = names.len();
        if d == 0 {
            return Err(Error::invalid("design box needs at least one variable"));
        }
        for len in [nominal.len(), half_width.len()] {
            if len != d {
                return Err(Error::DimensionMismatch { expected: d, got: len });
            }
        }
        if let Some(h) = half_width.iter().find(|h| !(h.is_finite() && **h > 0.0)) {
            return Err(Error::invalid(format!("half width {h} must be positive and finite")));
        }
        if nominal.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("nominal values must be finite"));
        }
        Ok(DesignBox {
            names,
            nominal,
            half_width,
        })
    }

    /// Box with `half_width = fraction * |nominal|` for every variable.
    pub fn relative(names: Vec<String>, nominal: Vec<f64>, fraction: f64) -> Result<Self> {
        let half = nominal.iter().map(|x| fraction * x.abs()).collect();
        Self::new(names, nominal, half)
    }

    /// Unit box `[-1, 1]^d` with generated names `x1..xd`.
    pub fn unit(dim: usize) -> Self {
        DesignBox {
            names: (1..=dim).map(|i| format!("x{i}")).collect(),
            nominal: vec![0.0; dim],
            half_width: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn nominal(&self) -> &[f64] {
        &self.nominal
    }

    pub fn half_width(&self) -> &[f64] {
        &self.half_width
    }

    pub fn lower(&self) -> Vec<f64> {
        self.nominal.iter().zip(&self.half_width).map(|(n, h)| n - h).collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.nominal.iter().zip(&self.half_width).map(|(n, h)| n + h).collect()
    }

    pub fn to_physical(&self, point_std: &[f64]) -> Result<Vec<f64>> {
        check_cube(point_std, self.dim())?;
        Ok(point_std
            .iter()
            .zip(self.nominal.iter().zip(&self.half_width))
            .map(|(xi, (n, h))| n + h * xi)
            .collect())
    }

    pub fn to_standard(&self, point: &[f64]) -> Result<Vec<f64>> {
        if point.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: point.len(),
            });
        }
        let xi: Vec<f64> = point
            .iter()
            .zip(self.nominal.iter().zip(&self.half_width))
            .map(|(x, (n, h))| (x - n) / h)
            .collect();
        check_cube(&xi, self.dim())?;
        Ok(xi.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect())
    }
}

pub(crate) fn check_cube(point: &[f64], dim: usize) -> Result<()> {
    if point.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: point.len(),
        });
    }
    match point.iter().find(|x| !(x.abs() <= 1.0 + CUBE_SLACK)) {
        Some(&value) => Err(Error::Domain { value }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMethod {
    Uniform,
    Lhs,
}

/// `count` i.i.d. points uniform on `[-1, 1]^dim`.
pub fn sample_uniform(dim: usize, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if count == 0 {
        return Err(Error::EmptyDesign);
    }
    let mut rng = seeded_rng(seed);
    Ok((0..count)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect())
        .collect())
}

/// Latin hypercube on `[-1, 1]^dim`: every coordinate places exactly one
/// point in each of `count` equal-width strata.
pub fn sample_lhs(dim: usize, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if count == 0 {
        return Err(Error::EmptyDesign);
    }
    let mut rng = seeded_rng(seed);
    let width = 2.0 / count as f64;
    let mut points = vec![vec![0.0; dim]; count];
    let mut perm: Vec<usize> = (0..count).collect();
    for j in 0..dim {
        perm.shuffle(&mut rng);
        for (i, &stratum) in perm.iter().enumerate() {
            let u: f64 = rng.random();
            points[i][j] = (-1.0 + width * (stratum as f64 + u)).min(1.0);
        }
    }
    Ok(points)
}

pub fn sample(method: SamplingMethod, dim: usize, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    match method {
        SamplingMethod::Uniform => sample_uniform(dim, count, seed),
        SamplingMethod::Lhs => sample_lhs(dim, count, seed),
    }
}

/// Input points (standardized) plus per-channel observations. Missing
/// observations are `None`, for designs that still await an external solver.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentalDesign {
    design_box: DesignBox,
    points_std: Vec<Vec<f64>>,
    observations: Vec<Vec<Option<f64>>>,
    channel_labels: Vec<String>,
    seed: Option<u64>,
    notes: Vec<String>,
}

impl ExperimentalDesign {
    pub fn new(
        design_box: DesignBox,
        points_std: Vec<Vec<f64>>,
        observations: Vec<Vec<Option<f64>>>,
        channel_labels: Vec<String>,
    ) -> Result<Self> {
        if points_std.is_empty() {
            return Err(Error::EmptyDesign);
        }
        for p in &points_std {
            check_cube(p, design_box.dim())?;
        }
        if observations.len() != points_std.len() {
            return Err(Error::DimensionMismatch {
                expected: points_std.len(),
                got: observations.len(),
            });
        }
        if let Some(row) = observations.iter().find(|r| r.len() != channel_labels.len()) {
            return Err(Error::DimensionMismatch {
                expected: channel_labels.len(),
                got: row.len(),
            });
        }
        Ok(ExperimentalDesign {
            design_box,
            points_std,
            observations,
            channel_labels,
            seed: None,
            notes: Vec::new(),
        })
    }

    /// Design with no observations yet.
    pub fn unobserved(
        design_box: DesignBox,
        points_std: Vec<Vec<f64>>,
        channel_labels: Vec<String>,
    ) -> Result<Self> {
        let obs = vec![vec![None; channel_labels.len()]; points_std.len()];
        Self::new(design_box, points_std, obs, channel_labels)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    /// Free-text provenance (e.g. the oracle that produced the observations),
    /// written as comment lines ahead of the CSV header.
    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.notes.push(note.into());
        self
    }

    pub fn notes(&self) -> &[String] {
        &self.notes
    }

    pub fn design_box(&self) -> &DesignBox {
        &self.design_box
    }

    pub fn points_std(&self) -> &[Vec<f64>] {
        &self.points_std
    }

    pub fn observations(&self) -> &[Vec<Option<f64>>] {
        &self.observations
    }

    pub fn channel_labels(&self) -> &[String] {
        &self.channel_labels
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.points_std.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points_std.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channel_labels.len()
    }

    pub fn is_complete(&self) -> bool {
        self.channels() > 0 && self.observations.iter().flatten().all(Option::is_some)
    }

    /// Observation column of one channel; fails if any entry is missing.
    pub fn channel_values(&self, channel: usize) -> Result<Vec<f64>> {
        if channel >= self.channels() {
            return Err(Error::invalid(format!(
                "channel {channel} out of range ({} channels)",
                self.channels()
            )));
        }
        self.observations
            .iter()
            .enumerate()
            .map(|(row, r)| {
                r[channel].ok_or_else(|| {
                    Error::invalid(format!(
                        "missing observation for channel '{}' at row {row}",
                        self.channel_labels[channel]
                    ))
                })
            })
            .collect()
    }

    /// Write the CSV schema: variable names then channel labels in the
    /// header, physical coordinates then observations per row. Lines in
    /// `comments` are emitted first, prefixed with `# `.
    pub fn write_csv<W: Write>(&self, mut out: W, comments: &[String]) -> Result<()> {
        for c in comments.iter().chain(&self.notes) {
            writeln!(out, "# {c}")?;
        }
        if let Some(seed) = self.seed {
            writeln!(out, "# seed={seed}")?;
        }
        let mut w = csv::Writer::from_writer(out);
        let header: Vec<&str> = self
            .design_box
            .names()
            .iter()
            .chain(&self.channel_labels)
            .map(String::as_str)
            .collect();
        w.write_record(&header)?;
        for (p, obs) in self.points_std.iter().zip(&self.observations) {
            let phys = self.design_box.to_physical(p)?;
            let mut rec: Vec<String> = phys.iter().map(|v| v.to_string()).collect();
            rec.extend(obs.iter().map(|o| o.map(|v| v.to_string()).unwrap_or_default()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>, comments: &[String]) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file), comments)
    }

    /// Parse the CSV schema against a known box. Coordinates are physical and
    /// must lie in the box; empty observation cells become `None`.
    pub fn read_csv<R: Read>(input: R, design_box: &DesignBox) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(input);
        let header = rdr.headers()?.clone();
        let d = design_box.dim();
        let header_line = rdr.position().line();
        if header.len() < d {
            return Err(Error::Table {
                line: header_line,
                message: format!("expected at least {d} columns, found {}", header.len()),
            });
        }
        for (i, name) in design_box.names().iter().enumerate() {
            if &header[i] != name {
                return Err(Error::Table {
                    line: header_line,
                    message: format!("column {i} is '{}', expected '{name}'", &header[i]),
                });
            }
        }
        let labels: Vec<String> = header.iter().skip(d).map(str::to_owned).collect();

        let mut points = Vec::new();
        let mut observations = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != header.len() {
                return Err(Error::Table {
                    line,
                    message: format!("expected {} cells, found {}", header.len(), rec.len()),
                });
            }
            let parse = |i: usize| -> Result<f64> {
                rec[i].parse::<f64>().map_err(|_| Error::Table {
                    line,
                    message: format!("cell {} ('{}') is not numeric", i + 1, &rec[i]),
                })
            };
            let phys = (0..d).map(parse).collect::<Result<Vec<_>>>()?;
            let xi = design_box.to_standard(&phys).map_err(|_| Error::Table {
                line,
                message: format!("point {phys:?} lies outside the design box"),
            })?;
            let obs = (d..rec.len())
                .map(|i| if rec[i].is_empty() { Ok(None) } else { parse(i).map(Some) })
                .collect::<Result<Vec<_>>>()?;
            points.push(xi);
            observations.push(obs);
        }
        if points.is_empty() {
            return Err(Error::EmptyDesign);
        }
        Self::new(design_box.clone(), points, observations, labels)
    }

    pub fn load_csv(path: impl AsRef<Path>, design_box: &DesignBox) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(file), design_box)
    }
}
