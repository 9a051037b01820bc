//! TOML experiment configuration.
//!
//! Every key has a default, so an empty file is a valid config. Unknown keys,
//! wrong types and out-of-range values are rejected with the dotted path of
//! the offending key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::fixtures::Family;
use super::HarnessError;
use crate::eval::DEFAULT_BUDGET_MBPS;
use crate::protocol::{ProtocolError, RoundConfig};
use crate::scene_sim::{SceneConfig, MAX_AGENTS};

/// Largest seed a TOML integer can hold.
pub const MAX_SEED: u64 = i64::MAX as u64;

/// Which scenes an experiment runs on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteSpec {
    pub families: Vec<Family>,
    pub scenes_per_family: usize,
    /// Generator settings of the `random` family.
    pub random: SceneConfig,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        Self {
            families: Family::NAMED.to_vec(),
            scenes_per_family: 50,
            random: SceneConfig::default(),
        }
    }
}

impl SuiteSpec {
    pub fn only(family: Family, scenes: usize) -> Self {
        Self {
            families: vec![family],
            scenes_per_family: scenes,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.families.len() * self.scenes_per_family
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Base seed every scene seed is derived from.
    pub seed: u64,
    /// Scenes processed concurrently; results do not depend on it.
    pub workers: usize,
    pub out_dir: PathBuf,
    pub budget_mbps: f64,
    pub eps_c_grid: Vec<f32>,
    pub latency_grid_ms: Vec<f64>,
    pub suite: SuiteSpec,
    /// The operating point.
    pub round: RoundConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            workers: 1,
            out_dir: PathBuf::from("out"),
            budget_mbps: DEFAULT_BUDGET_MBPS,
            eps_c_grid: vec![0.01, 0.02, 0.03, 0.05, 0.07],
            latency_grid_ms: vec![0.0, 50.0, 100.0, 200.0],
            suite: SuiteSpec::default(),
            round: RoundConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a TOML document.
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let table: toml::Table = toml::from_str(text).map_err(|e| HarnessError::Syntax(e.message().to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(toml::Value::Table(table))
            .map_err(|e| HarnessError::config(e.path().to_string(), e.inner().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        self.validate()?;
        toml::to_string(self).map_err(|e| HarnessError::Syntax(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.seed > MAX_SEED {
            return Err(HarnessError::config("seed", format!("{} exceeds the TOML integer range", self.seed)));
        }
        if self.workers == 0 {
            return Err(HarnessError::config("workers", "must be at least 1"));
        }
        if !(self.budget_mbps >= 0.0 && self.budget_mbps.is_finite()) {
            return Err(HarnessError::config("budget_mbps", format!("{} is not a non-negative rate", self.budget_mbps)));
        }
        if self.eps_c_grid.is_empty() {
            return Err(HarnessError::config("eps_c_grid", "must not be empty"));
        }
        for (i, &e) in self.eps_c_grid.iter().enumerate() {
            if !(0.0..=1.0).contains(&e) {
                return Err(HarnessError::config(format!("eps_c_grid[{i}]"), format!("{e} not in [0, 1]")));
            }
            if self.eps_c_grid[..i].contains(&e) {
                return Err(HarnessError::config(format!("eps_c_grid[{i}]"), format!("duplicate value {e}")));
            }
        }
        if self.latency_grid_ms.is_empty() {
            return Err(HarnessError::config("latency_grid_ms", "must not be empty"));
        }
        for (i, &l) in self.latency_grid_ms.iter().enumerate() {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(HarnessError::config(format!("latency_grid_ms[{i}]"), format!("{l} is not a non-negative latency")));
            }
        }
        self.validate_suite()?;
        self.round.validate().map_err(|e| match e {
            ProtocolError::Config(msg) => match msg.split_once(": ") {
                Some((key, why)) => HarnessError::config(format!("round.{key}"), why),
                None => HarnessError::config("round", msg),
            },
            other => HarnessError::config("round", other.to_string()),
        })
    }

    fn validate_suite(&self) -> Result<(), HarnessError> {
        let s = &self.suite;
        if s.families.is_empty() {
            return Err(HarnessError::config("suite.families", "must not be empty"));
        }
        for (i, f) in s.families.iter().enumerate() {
            if s.families[..i].contains(f) {
                return Err(HarnessError::config(format!("suite.families[{i}]"), format!("duplicate family {}", f.name())));
            }
        }
        if s.scenes_per_family == 0 {
            return Err(HarnessError::config("suite.scenes_per_family", "must be at least 1"));
        }
        let r = &s.random;
        if !(1..=MAX_AGENTS).contains(&r.num_agents) {
            return Err(HarnessError::config("suite.random.num_agents", format!("{} not in [1, {MAX_AGENTS}]", r.num_agents)));
        }
        let ranges = [
            ("world_x", r.world_x),
            ("world_y", r.world_y),
            ("object_length", r.object_length),
            ("object_width", r.object_width),
            ("occluder_length", r.occluder_length),
            ("occluder_width", r.occluder_width),
            ("speed", r.speed),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(HarnessError::config(format!("suite.random.{name}"), format!("[{lo}, {hi}] is not an interval")));
            }
        }
        if !(r.road_half_width > 0.0) {
            return Err(HarnessError::config("suite.random.road_half_width", "must be positive"));
        }
        if r.object_width.0 <= 0.0 || r.occluder_width.0 <= 0.0 {
            return Err(HarnessError::config("suite.random.object_width", "sizes must be positive"));
        }
        if r.max_attempts == 0 {
            return Err(HarnessError::config("suite.random.max_attempts", "must be at least 1"));
        }
        Ok(())
    }

    /// The config with the operating point's `eps_c` replaced.
    pub fn with_eps_c(&self, eps_c: f32) -> Self {
        let mut c = self.clone();
        c.round.eps_c = eps_c;
        c
    }
}
