//! Particle swarm optimization over a box, and the flat-top pattern cost.

use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::doe::{seeded_rng, DesignBox};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwarmConfig {
    pub particles: usize,
    /// Fraction of the velocity applied to the position each step.
    pub learning_rate: f64,
    pub inertia: f64,
    pub cognitive: f64,
    pub social: f64,
    pub max_iters: usize,
    pub seed: u64,
    pub bounds: DesignBox,
    /// Draw the random factors per coordinate instead of per particle.
    pub stochastic_vector: bool,
}

impl SwarmConfig {
    /// Constricted-swarm defaults: 40 particles, inertia 0.72, cognitive and
    /// social weights 1.49, full learning rate, 200 iterations.
    pub fn new(bounds: DesignBox, seed: u64) -> Self {
        SwarmConfig {
            particles: 40,
            learning_rate: 1.0,
            inertia: 0.72,
            cognitive: 1.49,
            social: 1.49,
            max_iters: 200,
            seed,
            bounds,
            stochastic_vector: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.particles < 2 {
            return Err(Error::invalid("a swarm needs at least two particles"));
        }
        if self.max_iters < 1 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.learning_rate) {
            return Err(Error::invalid(format!("learning rate {} is outside [0, 1]", self.learning_rate)));
        }
        for (name, v) in [("inertia", self.inertia), ("cognitive", self.cognitive), ("social", self.social)] {
            if !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be finite")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SwarmState {
    pub positions: Vec<Vec<f64>>,
    pub velocities: Vec<Vec<f64>>,
    pub personal_best_pos: Vec<Vec<f64>>,
    pub personal_best_cost: Vec<f64>,
    pub global_best_pos: Vec<f64>,
    pub global_best_cost: f64,
    pub iteration: usize,
    rng: ChaCha8Rng,
}

fn evaluate_all<F>(positions: &[Vec<f64>], cost: &F) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    positions
        .par_iter()
        .enumerate()
        .map(|(particle, x)| match cost(x) {
            Ok(v) if v.is_nan() => Err(Error::Evaluator {
                particle,
                message: "cost is NaN".into(),
            }),
            Ok(v) => Ok(v),
            Err(e) => Err(Error::Evaluator {
                particle,
                message: e.to_string(),
            }),
        })
        .collect()
}

/// Lowest cost, lowest index on ties.
fn argmin(costs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &c) in costs.iter().enumerate() {
        if c < costs[best] {
            best = i;
        }
    }
    best
}

impl SwarmState {
    /// Uniform positions in the bounds, zero velocities, first evaluation.
    pub fn initialize<F>(config: &SwarmConfig, cost: &F) -> Result<Self>
    where
        F: Fn(&[f64]) -> Result<f64> + Sync,
    {
        config.validate()?;
        let mut rng = seeded_rng(config.seed);
        let lo = config.bounds.lower();
        let hi = config.bounds.upper();
        let positions: Vec<Vec<f64>> = (0..config.particles)
            .map(|_| lo.iter().zip(&hi).map(|(&l, &h)| rng.random_range(l..=h)).collect())
            .collect();
        Self::from_positions(positions, rng, cost)
    }

    fn from_positions<F>(positions: Vec<Vec<f64>>, rng: ChaCha8Rng, cost: &F) -> Result<Self>
    where
        F: Fn(&[f64]) -> Result<f64> + Sync,
    {
        let costs = evaluate_all(&positions, cost)?;
        let g = argmin(&costs);
        let d = positions[0].len();
        Ok(SwarmState {
            velocities: vec![vec![0.0; d]; positions.len()],
            personal_best_pos: positions.clone(),
            global_best_pos: positions[g].clone(),
            global_best_cost: costs[g],
            personal_best_cost: costs,
            positions,
            iteration: 1,
            rng,
        })
    }

    /// State with explicit positions and velocities (bests from a first
    /// evaluation), for experiments that need a particular starting swarm.
    pub fn with_start<F>(positions: Vec<Vec<f64>>, velocities: Vec<Vec<f64>>, seed: u64, cost: &F) -> Result<Self>
    where
        F: Fn(&[f64]) -> Result<f64> + Sync,
    {
        if positions.is_empty() || positions.len() != velocities.len() {
            return Err(Error::invalid("positions and velocities must be non-empty and equally long"));
        }
        let mut s = Self::from_positions(positions, seeded_rng(seed), cost)?;
        s.velocities = velocities;
        Ok(s)
    }

    /// One synchronous update: velocities and positions from the previous
    /// bests, clamping to the bounds, then evaluation and best updates.
    pub fn step<F>(&mut self, config: &SwarmConfig, cost: &F) -> Result<()>
    where
        F: Fn(&[f64]) -> Result<f64> + Sync,
    {
        let d = config.bounds.dim();
        if self.positions.iter().chain(&self.velocities).any(|v| v.len() != d) || self.positions.len() != self.velocities.len() {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: self.positions.first().map_or(0, Vec::len),
            });
        }
        let lo = config.bounds.lower();
        let hi = config.bounds.upper();
        for i in 0..self.positions.len() {
            let (mut r1, mut r2) = (self.rng.random::<f64>(), self.rng.random::<f64>());
            let x = &mut self.positions[i];
            let v = &mut self.velocities[i];
            let p = &self.personal_best_pos[i];
            for k in 0..d {
                if config.stochastic_vector && k > 0 {
                    r1 = self.rng.random::<f64>();
                    r2 = self.rng.random::<f64>();
                }
                v[k] = config.inertia * v[k]
                    + config.cognitive * r1 * (p[k] - x[k])
                    + config.social * r2 * (self.global_best_pos[k] - x[k]);
                x[k] += config.learning_rate * v[k];
                if x[k] < lo[k] {
                    x[k] = lo[k];
                    v[k] = 0.0;
                } else if x[k] > hi[k] {
                    x[k] = hi[k];
                    v[k] = 0.0;
                }
            }
        }
        let costs = evaluate_all(&self.positions, cost)?;
        for (i, &c) in costs.iter().enumerate() {
            if c < self.personal_best_cost[i] {
                self.personal_best_cost[i] = c;
                self.personal_best_pos[i] = self.positions[i].clone();
            }
        }
        let g = argmin(&self.personal_best_cost);
        if self.personal_best_cost[g] < self.global_best_cost {
            self.global_best_cost = self.personal_best_cost[g];
            self.global_best_pos = self.personal_best_pos[g].clone();
        }
        self.iteration += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwarmResult {
    pub best_point: Vec<f64>,
    pub best_cost: f64,
    /// Global best cost after each iteration; the first entry is the
    /// initial evaluation.
    pub history: Vec<f64>,
}

/// Run `max_iters` iterations, the first being the initial evaluation.
pub fn optimize<F>(config: &SwarmConfig, cost: F) -> Result<SwarmResult>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    let mut state = SwarmState::initialize(config, &cost)?;
    let mut history = vec![state.global_best_cost];
    while state.iteration < config.max_iters {
        state.step(config, &cost)?;
        history.push(state.global_best_cost);
    }
    Ok(SwarmResult {
        best_point: state.global_best_pos,
        best_cost: state.global_best_cost,
        history,
    })
}

pub fn write_history_csv<W: Write>(mut out: W, history: &[f64], comments: &[String]) -> Result<()> {
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iteration", "global_best_cost"])?;
    for (i, c) in history.iter().enumerate() {
        w.write_record([(i + 1).to_string(), c.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Regime boundaries in degrees: `[-180,-100) [-100,-20) [-20,20) [20,100) [100,180]`.
pub const REGIME_EDGES: [f64; 6] = [-180.0, -100.0, -20.0, 20.0, 100.0, 180.0];

/// Ideal gain per angle, with the angular regimes the cost sums over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternTarget {
    angles: Vec<f64>,
    ideal: Vec<f64>,
    regime_edges: Vec<f64>,
}

impl PatternTarget {
    pub fn new(angles: Vec<f64>, ideal: Vec<f64>) -> Result<Self> {
        if angles.is_empty() || angles.len() != ideal.len() {
            return Err(Error::invalid("target needs one ideal gain per angle"));
        }
        if angles.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid("target angles must be strictly increasing"));
        }
        if angles.iter().any(|a| !(-180.0..=180.0).contains(a)) {
            return Err(Error::invalid("target angles must lie in [-180, 180]"));
        }
        if ideal.iter().any(|g| !g.is_finite()) {
            return Err(Error::invalid("ideal gains must be finite"));
        }
        Ok(PatternTarget {
            angles,
            ideal,
            regime_edges: REGIME_EDGES.to_vec(),
        })
    }

    /// Unit gain on `|theta| <= 50` and 0.01 elsewhere.
    pub fn flat_top(angles: Vec<f64>) -> Result<Self> {
        let ideal = angles.iter().map(|a| if a.abs() <= 50.0 { 1.0 } else { 0.01 }).collect();
        Self::new(angles, ideal)
    }

    /// Two-column CSV `angle,gain` (header required, `#` comments allowed).
    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(input);
        let mut angles = Vec::new();
        let mut ideal = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != 2 {
                return Err(Error::Table {
                    line,
                    message: format!("expected 2 cells, found {}", rec.len()),
                });
            }
            let parse = |i: usize| {
                rec[i].parse::<f64>().map_err(|_| Error::Table {
                    line,
                    message: format!("'{}' is not numeric", &rec[i]),
                })
            };
            angles.push(parse(0)?);
            ideal.push(parse(1)?);
        }
        Self::new(angles, ideal)
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn ideal(&self) -> &[f64] {
        &self.ideal
    }

    pub fn regime_edges(&self) -> &[f64] {
        &self.regime_edges
    }

    /// Regime of an angle: 0-based, half-open except the last, which is closed.
    pub fn regime(&self, angle: f64) -> usize {
        let e = &self.regime_edges;
        (1..e.len() - 1).find(|&m| angle < e[m]).map_or(e.len() - 2, |m| m - 1)
    }
}

/// `sum_m sum_{theta in R_m} |G_I(theta) - G(theta)|^4` for a pattern given
/// on the target's angles.
pub fn pattern_cost(target: &PatternTarget, pattern: &[f64]) -> Result<f64> {
    if pattern.len() != target.angles.len() {
        return Err(Error::DimensionMismatch {
            expected: target.angles.len(),
            got: pattern.len(),
        });
    }
    let mut per_regime = vec![0.0; target.regime_edges.len() - 1];
    for ((&a, &gi), &g) in target.angles.iter().zip(&target.ideal).zip(pattern) {
        per_regime[target.regime(a)] += (gi - g).powi(4);
    }
    Ok(per_regime.iter().sum())
}

/// Flat-top cost of design `x` for an evaluator of the gain at one angle.
pub fn flattop_cost<F>(evaluator: F, target: &PatternTarget, x: &[f64]) -> Result<f64>
where
    F: Fn(&[f64], f64) -> Result<f64>,
{
    let pattern = target.angles.iter().map(|&a| evaluator(x, a)).collect::<Result<Vec<_>>>()?;
    pattern_cost(target, &pattern)
}
