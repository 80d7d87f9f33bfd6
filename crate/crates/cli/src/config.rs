//! Config file schema and its translation into core types.
//!
//! The file is TOML with a fixed schema; unknown keys are rejected so a
//! typo cannot silently fall back to a default. Where a field has a
//! default it is the one documented on the field, and serialization
//! writes every field back out, so `parse(serialize(c)) == c`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use powertrack_core::{
    ChannelSchedule, Damping, DriftMode, ExperimentConfig, PlantParams, RegParams, SuccessKind,
    SuccessModel, SystemModel, TrackerConfig,
};

use crate::CliError;

/// One scalar control loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantEntry {
    /// Open-loop gain, in effect when the packet is dropped.
    pub a_open: f64,
    /// Closed-loop gain, in effect when the packet arrives.
    pub a_closed: f64,
    /// Process-noise variance W.
    pub noise_var: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuccessKindField {
    Negexp,
}

/// Packet-success model section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuccessSection {
    /// Decoding-probability family. Default: negexp.
    #[serde(default = "default_success_kind")]
    pub kind: SuccessKindField,
    /// Hard per-transmission power cap.
    pub p_max_per_agent: f64,
}

fn default_success_kind() -> SuccessKindField {
    SuccessKindField::Negexp
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriftModeField {
    Linear,
    Bounce,
}

/// Channel-mean schedule section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    /// Channel mean at epoch 0.
    pub mean_init: f64,
    /// Mean change per epoch. Default: 0 (stationary).
    #[serde(default)]
    pub drift_rate: f64,
    /// How the mean moves. Default: linear.
    #[serde(default = "default_drift_mode")]
    pub drift_mode: DriftModeField,
    /// [low, high] reflection walls; required for bounce, meaningless
    /// otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<[f64; 2]>,
}

fn default_drift_mode() -> DriftModeField {
    DriftModeField::Linear
}

/// Regularization section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegSection {
    /// Ridge weight (times v_hat). Default: 1.
    #[serde(default = "one")]
    pub alpha: f64,
    /// Barrier weight (times v_hat). Default: 1.
    #[serde(default = "one")]
    pub beta: f64,
    /// Barrier smoothing threshold. Default: 1e-3.
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Assumed statistical accuracy of the windowed loss. Default: 0.03.
    #[serde(default = "default_v_hat")]
    pub v_hat: f64,
}

fn one() -> f64 {
    1.0
}

fn default_eps() -> f64 {
    1e-3
}

fn default_v_hat() -> f64 {
    0.03
}

impl Default for RegSection {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0, eps: default_eps(), v_hat: default_v_hat() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DampingField {
    Damped,
    Pure,
}

/// Tracker section. `gamma` shrinks the window and `Gamma` grows the
/// batch when an epoch misses the exit test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackerSection {
    /// Samples drawn per epoch before any backtracking. Default: 200.
    #[serde(default = "default_n0")]
    pub n0: usize,
    /// Window length in batches. Default: 5.
    #[serde(default = "default_m0")]
    pub m0: usize,
    /// Window shrink factor per backtrack, in (0, 1). Default: 0.5.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Batch growth factor per backtrack, above 1. Default: 2.
    #[serde(default = "default_growth", rename = "Gamma")]
    pub growth: f64,
    /// Backtracking attempts per epoch before carrying the best iterate.
    /// Default: 10.
    #[serde(default = "default_max_backtracks")]
    pub max_backtracks: usize,
    /// Step policy. Default: damped.
    #[serde(default = "default_damping")]
    pub damping: DampingField,
}

fn default_n0() -> usize {
    200
}

fn default_m0() -> usize {
    5
}

fn default_gamma() -> f64 {
    0.5
}

fn default_growth() -> f64 {
    2.0
}

fn default_max_backtracks() -> usize {
    10
}

fn default_damping() -> DampingField {
    DampingField::Damped
}

impl Default for TrackerSection {
    fn default() -> Self {
        Self {
            n0: default_n0(),
            m0: default_m0(),
            gamma: default_gamma(),
            growth: default_growth(),
            max_backtracks: default_max_backtracks(),
            damping: default_damping(),
        }
    }
}

/// Experiment section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    /// Epochs to run. Default: 200.
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Control slots simulated per epoch. Default: 200.
    #[serde(default = "default_slots")]
    pub slots_per_epoch: usize,
    /// Root seed for every stream. Default: 1.
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Solve each epoch's window to reference accuracy. Default: true.
    #[serde(default = "default_oracle")]
    pub oracle: bool,
}

fn default_epochs() -> usize {
    200
}

fn default_slots() -> usize {
    200
}

fn default_seed() -> u64 {
    1
}

fn default_oracle() -> bool {
    true
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            slots_per_epoch: default_slots(),
            seed: default_seed(),
            oracle: default_oracle(),
        }
    }
}

/// Whole config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub plants: Vec<PlantEntry>,
    pub success: SuccessSection,
    pub schedule: ScheduleSection,
    /// Shared expected-power budget per slot.
    pub budget: f64,
    #[serde(default)]
    pub reg: RegSection,
    #[serde(default)]
    pub tracker: TrackerSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
}

impl Config {
    /// Parse from TOML text. Schema violations carry the key path in the
    /// message.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Validate and translate into core types. Core constructors own the
    /// invariants; this only pins their errors to a config key path.
    pub fn build(&self) -> Result<(SystemModel, TrackerConfig, ExperimentConfig), CliError> {
        let at = |path: &str| {
            let path = path.to_string();
            move |e: powertrack_core::Error| CliError::Config(format!("{path}: {e}"))
        };
        if self.plants.is_empty() {
            return Err(CliError::Config("plants: at least one plant is required".into()));
        }
        let mut plants = Vec::with_capacity(self.plants.len());
        for (i, p) in self.plants.iter().enumerate() {
            plants.push(
                PlantParams::new(p.a_open, p.a_closed, p.noise_var)
                    .map_err(at(&format!("plants[{i}]")))?,
            );
        }
        let kind = match self.success.kind {
            SuccessKindField::Negexp => SuccessKind::NegExp,
        };
        let success =
            SuccessModel::new(kind, self.success.p_max_per_agent).map_err(at("success"))?;
        let drift_mode = match (self.schedule.drift_mode, self.schedule.bounds) {
            (DriftModeField::Linear, None) => DriftMode::Linear,
            (DriftModeField::Linear, Some(_)) => {
                return Err(CliError::Config(
                    "schedule.bounds: only meaningful with drift_mode = \"bounce\"".into(),
                ));
            }
            (DriftModeField::Bounce, Some([min, max])) => DriftMode::Bounce { min, max },
            (DriftModeField::Bounce, None) => {
                return Err(CliError::Config(
                    "schedule.bounds: required with drift_mode = \"bounce\"".into(),
                ));
            }
        };
        let schedule = ChannelSchedule::new(
            self.plants.len(),
            self.schedule.mean_init,
            self.schedule.drift_rate,
            drift_mode,
        )
        .map_err(at("schedule"))?;
        let model = SystemModel::new(plants, success, schedule, self.budget)
            .map_err(at("plants/budget"))?;
        let reg = RegParams::new(self.reg.alpha, self.reg.beta, self.reg.eps, self.reg.v_hat)
            .map_err(at("reg"))?;
        if reg.alpha <= 0.0 {
            return Err(CliError::Config(
                "reg.alpha: must be positive for a unique tracked optimum".into(),
            ));
        }
        let damping = match self.tracker.damping {
            DampingField::Damped => Damping::Damped,
            DampingField::Pure => Damping::Pure,
        };
        let tracker = TrackerConfig::new(
            self.tracker.n0,
            self.tracker.m0,
            self.tracker.gamma,
            self.tracker.growth,
            reg,
            self.tracker.max_backtracks,
            damping,
        )
        .map_err(at("tracker"))?;
        let experiment = ExperimentConfig::new(
            self.experiment.epochs,
            self.experiment.slots_per_epoch,
            self.experiment.seed,
            self.experiment.oracle,
        )
        .map_err(at("experiment"))?;
        Ok((model, tracker, experiment))
    }
}

/// Read and validate a config file, returning the core types it denotes.
pub fn parse_config(
    path: &Path,
) -> Result<(SystemModel, TrackerConfig, ExperimentConfig), CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let cfg = Config::from_toml(&text)?;
    cfg.build()
}

/// Load just the schema layer, for commands that tweak it before
/// building.
pub fn load_config(path: &Path) -> Result<Config, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Config::from_toml(&text)
}
