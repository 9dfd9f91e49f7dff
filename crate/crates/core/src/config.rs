//! Run configuration: one TOML file, overridable from the command line.
//!
//! Every field has a default, so an empty file is a valid configuration.
//! Unknown keys are rejected. The resolved configuration is embedded in every
//! JSON artifact together with its SHA-256 hash.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::grid::{build_grid, Grid, GridError};
use crate::model::{ModelError, ModelParams};
use crate::sim::{default_horizon, Baseline, InitialState, PlantModel, SimConfig};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Parse {
        path: PathBuf,
        source: Box<toml::de::Error>,
    },
    #[error("config schema_version {0} is not supported (expected {CONFIG_SCHEMA_VERSION})")]
    Schema(u32),
    #[error("invalid value for {field}: {reason}")]
    Invalid { field: String, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        reason: reason.into(),
    }
}

/// Which grids `solve` works on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Folded,
    Symmetric,
    /// Folded and symmetric, enabling the evenness and fold checks.
    Both,
}

impl RunMode {
    pub fn solves_folded(self) -> bool {
        matches!(self, RunMode::Folded | RunMode::Both)
    }

    pub fn solves_symmetric(self) -> bool {
        matches!(self, RunMode::Symmetric | RunMode::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub a: f64,
    pub sigma2: f64,
    /// Drop probability shared by both channels unless overridden below.
    pub p: f64,
    pub p_uplink: Option<f64>,
    pub p_downlink: Option<f64>,
    pub beta: f64,
    pub battery_capacity: u32,
    /// Probabilities of harvesting 0, 1, ..., L units per step.
    pub harvest_probs: Vec<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelParams::default();
        ModelSection {
            a: d.a,
            sigma2: d.sigma2,
            p: d.p_uplink,
            p_uplink: None,
            p_downlink: None,
            beta: d.beta,
            battery_capacity: d.battery_capacity,
            harvest_probs: d.harvest_probs,
        }
    }
}

impl ModelSection {
    pub fn params(&self) -> ModelParams {
        let mut p = ModelParams::new(
            self.a,
            self.sigma2,
            self.p,
            self.beta,
            self.battery_capacity,
            self.harvest_probs.clone(),
        );
        p.p_uplink = self.p_uplink.unwrap_or(self.p);
        p.p_downlink = self.p_downlink.unwrap_or(self.p);
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    /// Nodes of the symmetric grid (odd); the folded grid keeps the
    /// non-negative half.
    pub n_nodes: usize,
    /// Half-width in units of the largest retained standard deviation.
    pub x_max_mult: f64,
    pub tau_max: u32,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            n_nodes: 201,
            x_max_mult: 5.0,
            tau_max: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub tol: f64,
    pub max_iter: usize,
    /// Tolerance of the structural checks run by `verify`.
    pub verify_tol: f64,
    /// Also write the discretized kernel as `kernel.json`.
    pub write_kernel: bool,
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection {
            tol: 1e-6,
            max_iter: 400,
            verify_tol: 1e-5,
            write_kernel: false,
        }
    }
}

/// Initial plant state: `"standard_normal"` or a number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum X0Setting {
    Fixed(f64),
    Named(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub n_rollouts: usize,
    pub seed: u64,
    /// Defaults to the smallest T with `beta^T <= 1e-6`.
    pub horizon: Option<usize>,
    pub x0: X0Setting,
    pub y0: u8,
    /// Defaults to a full battery.
    pub b0: Option<u32>,
    /// Rollouts written to `trace.csv` when tracing is on.
    pub trace_rollouts: usize,
    pub baselines: Vec<String>,
    /// `exact` or `independent_reset`.
    pub plant: PlantModel,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            n_rollouts: 100_000,
            seed: 42,
            horizon: None,
            x0: X0Setting::Named("standard_normal".into()),
            y0: 0,
            b0: None,
            trace_rollouts: 10,
            plant: PlantModel::Exact,
            baselines: [
                "never_act",
                "periodic:2",
                "greedy_uplink",
                "random_admissible",
            ]
            .map(String::from)
            .to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub output_dir: PathBuf,
    pub mode: RunMode,
    pub model: ModelSection,
    pub grid: GridSection,
    pub solver: SolverSection,
    pub sim: SimSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            output_dir: PathBuf::from("out"),
            mode: RunMode::Both,
            model: ModelSection::default(),
            grid: GridSection::default(),
            solver: SolverSection::default(),
            sim: SimSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, path: &Path) -> Result<RunConfig, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            source: Box::new(e),
        })?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(ConfigError::Schema(cfg.schema_version));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            source: e,
        })?;
        RunConfig::from_toml_str(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    pub fn params(&self) -> ModelParams {
        self.model.params()
    }

    /// Checks everything that can be checked without solving.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.params().validate()?;
        if self.grid.n_nodes.is_multiple_of(2) {
            return Err(invalid(
                "grid.n_nodes",
                "must be odd so that x = 0 is a node",
            ));
        }
        if !(self.solver.tol > 0.0) {
            return Err(invalid("solver.tol", "must be positive"));
        }
        if !(self.solver.verify_tol >= 0.0) {
            return Err(invalid("solver.verify_tol", "must be non-negative"));
        }
        self.grid(true)?;
        let sim = self.sim_config()?;
        sim.validate(&self.params())
            .map_err(|e| invalid("sim", e.to_string()))?;
        self.baselines()?;
        Ok(())
    }

    pub fn grid(&self, folded: bool) -> Result<Grid, ConfigError> {
        Ok(build_grid(
            &self.params(),
            self.grid.x_max_mult,
            self.grid.n_nodes,
            self.grid.tau_max,
            folded,
        )?)
    }

    pub fn sim_config(&self) -> Result<SimConfig, ConfigError> {
        let params = self.params();
        let x0 = match &self.sim.x0 {
            X0Setting::Fixed(x) => InitialState::Fixed(*x),
            X0Setting::Named(s) if s == "standard_normal" => InitialState::StandardNormal,
            X0Setting::Named(s) => {
                return Err(invalid(
                    "sim.x0",
                    format!("expected a number or \"standard_normal\", got \"{s}\""),
                ))
            }
        };
        Ok(SimConfig {
            horizon: self
                .sim
                .horizon
                .unwrap_or_else(|| default_horizon(params.beta)),
            n_rollouts: self.sim.n_rollouts,
            seed: self.sim.seed,
            x0,
            y0: self.sim.y0,
            b0: self.sim.b0.unwrap_or(params.battery_capacity),
            trace_rollouts: self.sim.trace_rollouts,
            plant: self.sim.plant,
        })
    }

    pub fn baselines(&self) -> Result<Vec<Baseline>, ConfigError> {
        parse_baselines(self.sim.baselines.iter().map(String::as_str))
    }

    /// Hex SHA-256 of the canonical JSON form, ignoring `output_dir`.
    pub fn hash(&self) -> String {
        let mut cfg = self.clone();
        cfg.output_dir = PathBuf::new();
        let json = serde_json::to_vec(&cfg).expect("config serializes to JSON");
        hex::encode(Sha256::digest(&json))
    }
}

pub fn parse_baselines<'a>(
    names: impl IntoIterator<Item = &'a str>,
) -> Result<Vec<Baseline>, ConfigError> {
    names
        .into_iter()
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.parse::<Baseline>().map_err(|e| invalid("baselines", e)))
        .collect()
}

/// Parameters a sweep can vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    #[serde(rename = "p")]
    P,
    #[serde(rename = "beta")]
    Beta,
    #[serde(rename = "B")]
    B,
    #[serde(rename = "a")]
    A,
    #[serde(rename = "sigma2")]
    Sigma2,
}

impl std::str::FromStr for SweepAxis {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "p" => Ok(SweepAxis::P),
            "beta" => Ok(SweepAxis::Beta),
            "B" => Ok(SweepAxis::B),
            "a" => Ok(SweepAxis::A),
            "sigma2" => Ok(SweepAxis::Sigma2),
            _ => Err(invalid(
                "axis",
                format!("'{s}' is not one of p, beta, B, a, sigma2"),
            )),
        }
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SweepAxis::P => "p",
            SweepAxis::Beta => "beta",
            SweepAxis::B => "B",
            SweepAxis::A => "a",
            SweepAxis::Sigma2 => "sigma2",
        };
        f.write_str(s)
    }
}

impl SweepAxis {
    /// Copy of `base` with the axis set to `value`. Setting `p` sets both
    /// channels.
    pub fn apply(self, base: &RunConfig, value: f64) -> Result<RunConfig, ConfigError> {
        let mut cfg = base.clone();
        let m = &mut cfg.model;
        match self {
            SweepAxis::P => {
                m.p = value;
                m.p_uplink = None;
                m.p_downlink = None;
            }
            SweepAxis::Beta => m.beta = value,
            SweepAxis::A => m.a = value,
            SweepAxis::Sigma2 => m.sigma2 = value,
            SweepAxis::B => {
                if value < 1.0 || value.fract() != 0.0 || value > u32::MAX as f64 {
                    return Err(invalid(
                        "B",
                        format!("battery capacity must be a positive integer, got {value}"),
                    ));
                }
                m.battery_capacity = value as u32;
                if cfg.sim.b0.is_some_and(|b0| b0 > value as u32) {
                    cfg.sim.b0 = Some(value as u32);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
