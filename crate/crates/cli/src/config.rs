use std::fs;
use std::path::{Path, PathBuf};

use apce_core::adaptive::AdaptiveConfig;
use apce_core::doe::{DesignBox, SamplingMethod};
use apce_core::pso::{PatternTarget, SwarmConfig};
use apce_core::qoi::{Oracle, OracleSpec};
use apce_core::surrogate::GridSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

fn default_seed() -> u64 {
    1
}

/// The run document. Every output CSV carries the SHA-256 of this
/// structure, re-serialized after command-line overrides and with the
/// output directory left out, so identical runs in different directories
/// produce identical files.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub design_box: Option<BoxConfig>,
    pub oracle: OracleSpec,
    #[serde(default)]
    pub design: DesignConfig,
    #[serde(default)]
    pub fit: AdaptiveConfig,
    #[serde(default)]
    pub stats: StatsConfig,
    #[serde(default)]
    pub mc: McConfig,
    #[serde(default)]
    pub optimize: OptimizeConfig,
}

/// Physical box: either explicit half-widths or a relative variation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxConfig {
    pub names: Vec<String>,
    pub nominal: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub half_width: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relative: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignConfig {
    pub method: SamplingMethod,
    pub samples: usize,
    /// Evaluate the oracle at the design points. Off, the CSV has empty
    /// observation cells for an external solver to fill.
    pub observe: bool,
}

impl Default for DesignConfig {
    fn default() -> Self {
        DesignConfig {
            method: SamplingMethod::Lhs,
            samples: 50,
            observe: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    /// Generated samples per channel for densities and percentiles.
    pub samples: usize,
    pub grid_points: usize,
    pub padding: f64,
    pub percentiles: Vec<f64>,
    pub sobol: bool,
    /// Channel labels to write densities for; the first channel if unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pdf_channels: Option<Vec<String>>,
}

impl Default for StatsConfig {
    fn default() -> Self {
        let grid = GridSpec::default();
        StatsConfig {
            samples: 100_000,
            grid_points: grid.points,
            padding: grid.padding,
            percentiles: vec![5.0, 95.0],
            sobol: true,
            pdf_channels: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McConfig {
    pub samples: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig { samples: 1000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvaluatorKind {
    Surrogate,
    Oracle,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeConfig {
    pub evaluator: EvaluatorKind,
    pub particles: usize,
    pub learning_rate: f64,
    pub inertia: f64,
    pub cognitive: f64,
    pub social: f64,
    pub max_iters: usize,
    pub stochastic_vector: bool,
    /// `angle,gain` table; the built-in flat top when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<PathBuf>,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        let s = SwarmConfig::new(DesignBox::unit(1), 0);
        OptimizeConfig {
            evaluator: EvaluatorKind::Surrogate,
            particles: s.particles,
            learning_rate: s.learning_rate,
            inertia: s.inertia,
            cognitive: s.cognitive,
            social: s.social,
            max_iters: s.max_iters,
            stochastic_vector: s.stochastic_vector,
            target: None,
        }
    }
}

/// Seed offsets keep the streams of different stages apart.
pub const SAMPLE_STREAM: u64 = 1;
pub const MC_STREAM: u64 = 2;
pub const SWARM_STREAM: u64 = 3;

/// A validated configuration with everything derived from it.
#[derive(Debug)]
pub struct Run {
    pub config: RunConfig,
    pub checksum: String,
    pub out_dir: PathBuf,
    pub design_box: DesignBox,
    pub oracle: Option<Oracle>,
    pub table: Option<PathBuf>,
    pub target: Option<PatternTarget>,
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    /// Fallback output directory when neither the flag nor the file sets one.
    pub env_out_dir: Option<PathBuf>,
}

impl Run {
    pub fn load(path: &Path, overrides: Overrides) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_str(&text, &base, overrides)
    }

    pub fn from_str(text: &str, base: &Path, overrides: Overrides) -> Result<Self, CliError> {
        let mut config: RunConfig = toml::from_str(text).map_err(|e| invalid(format!("config: {e}")))?;
        if let Some(seed) = overrides.seed {
            config.seed = seed;
        }
        let out_dir = overrides
            .out_dir
            .or_else(|| config.out_dir.as_ref().map(|p| resolve(base, p)))
            .or(overrides.env_out_dir)
            .unwrap_or_else(|| PathBuf::from("apce-out"));

        let mut hashed = config.clone();
        hashed.out_dir = None;
        let canonical = toml::to_string(&hashed).map_err(|e| invalid(format!("config: {e}")))?;
        let checksum = hex::encode(Sha256::digest(canonical.as_bytes()));

        let (design_box, oracle, table) = match (&config.oracle, &config.design_box) {
            (OracleSpec::ExternalTable { path }, Some(b)) => {
                let table = resolve(base, Path::new(path));
                (build_box(b)?, None, Some(table))
            }
            (OracleSpec::ExternalTable { .. }, None) => {
                return Err(invalid("an external table needs a [box] section"));
            }
            (_, Some(_)) => return Err(invalid("[box] is implied by the oracle; remove it or use an external table")),
            (spec, None) => {
                let oracle = Oracle::new(spec.clone()).map_err(|e| invalid(e.to_string()))?;
                (oracle.design_box().clone(), Some(oracle), None)
            }
        };

        if config.design.samples == 0 {
            return Err(invalid("design.samples must be at least 1"));
        }
        config.fit.validate().map_err(|e| invalid(format!("fit: {e}")))?;
        let s = &config.stats;
        if s.samples < 2 {
            return Err(invalid("stats.samples must be at least 2"));
        }
        if s.grid_points < 2 || !(s.padding >= 0.0) {
            return Err(invalid("stats grid needs at least 2 points and non-negative padding"));
        }
        if let Some(p) = s.percentiles.iter().find(|p| !(**p > 0.0 && **p <= 100.0)) {
            return Err(invalid(format!("percentile {p} is outside (0, 100]")));
        }
        if config.mc.samples < 2 {
            return Err(invalid("mc.samples must be at least 2"));
        }
        let run_swarm = swarm_config(&config, design_box.clone());
        run_swarm.validate().map_err(|e| invalid(format!("optimize: {e}")))?;
        let target = match &config.optimize.target {
            Some(p) => {
                let p = resolve(base, p);
                let file = fs::File::open(&p).map_err(|e| invalid(format!("cannot read target {}: {e}", p.display())))?;
                Some(PatternTarget::read_csv(file).map_err(|e| invalid(format!("target {}: {e}", p.display())))?)
            }
            None => None,
        };

        Ok(Run {
            config,
            checksum,
            out_dir,
            design_box,
            oracle,
            table,
            target,
        })
    }

    pub fn swarm(&self) -> SwarmConfig {
        swarm_config(&self.config, self.design_box.clone())
    }

    pub fn stream(&self, offset: u64) -> u64 {
        self.config.seed.wrapping_add(offset)
    }

    pub fn checksum_line(&self) -> String {
        format!("config_sha256={}", self.checksum)
    }
}

fn swarm_config(config: &RunConfig, bounds: DesignBox) -> SwarmConfig {
    let o = &config.optimize;
    SwarmConfig {
        particles: o.particles,
        learning_rate: o.learning_rate,
        inertia: o.inertia,
        cognitive: o.cognitive,
        social: o.social,
        max_iters: o.max_iters,
        seed: config.seed.wrapping_add(SWARM_STREAM),
        bounds,
        stochastic_vector: o.stochastic_vector,
    }
}

fn build_box(b: &BoxConfig) -> Result<DesignBox, CliError> {
    let built = match (&b.half_width, b.relative) {
        (Some(h), None) => DesignBox::new(b.names.clone(), b.nominal.clone(), h.clone()),
        (None, Some(f)) if f > 0.0 => DesignBox::relative(b.names.clone(), b.nominal.clone(), f),
        (None, Some(f)) => return Err(invalid(format!("box.relative {f} must be positive"))),
        _ => return Err(invalid("box needs exactly one of half_width or relative")),
    };
    built.map_err(|e| invalid(format!("box: {e}")))
}
