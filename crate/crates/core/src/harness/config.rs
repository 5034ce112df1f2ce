//! Experiment configuration: TOML with strict keys, dotted-key overrides, and
//! construction of the configured system.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infocost::{DirectedInfoConfig, InfoVariant, TaskCostSpec, TaskKind};
use crate::linalg::{Psd, Vector};
use crate::planner::CemConfig;
use crate::systems::{
    DampedPendulum, DoubleIntegrator, MpcSettings, NoiseModel, PursuitEvasionLqr,
    PursuitEvasionMpc, SystemId, SystemModel,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Uniform random controls within bounds.
    Random,
    /// Planning with λ = 0.
    Passive,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfoVariantName {
    #[default]
    ClosedFormMi,
    DirectedInfoMc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub id: SystemId,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_true: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_limit: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mass: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gravity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mpc_horizon: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mpc_iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mpc_step_size: Option<f64>,
}

fn default_dt() -> f64 {
    0.1
}

/// A covariance given as a scalar variance (times identity) or a diagonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovarianceSpec {
    Isotropic(f64),
    Diagonal(Vec<f64>),
}

impl CovarianceSpec {
    pub fn to_psd(&self, n: usize, what: &str) -> Result<Psd> {
        match self {
            CovarianceSpec::Isotropic(v) if v.is_finite() && *v >= 0.0 => {
                Psd::scaled_identity(n, *v)
            }
            CovarianceSpec::Diagonal(d)
                if d.len() == n && d.iter().all(|v| v.is_finite() && *v >= 0.0) =>
            {
                Psd::from_diagonal(d)
            }
            _ => Err(Error::config(format!(
                "{what} noise must be a variance >= 0 or a diagonal of length {n}"
            ))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<CovarianceSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param: Option<CovarianceSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKindName {
    GoalDeviation,
    AngleTracking,
    EvaderDistance,
    None,
}

/// Flat form of the task cost as written in config files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKindName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
    #[serde(default)]
    pub control_effort_weight: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            kind: TaskKindName::None,
            goal: None,
            weights: None,
            reference: None,
            weight: None,
            index: None,
            control_effort_weight: 0.0,
        }
    }
}

impl TaskConfig {
    pub fn to_spec(&self, n_x: usize) -> Result<TaskCostSpec> {
        let kind = match self.kind {
            TaskKindName::GoalDeviation => TaskKind::GoalDeviation {
                goal: self.goal.clone().unwrap_or_else(|| vec![0.0; n_x]),
                weights: self.weights.clone().unwrap_or_else(|| vec![1.0; n_x]),
            },
            TaskKindName::AngleTracking => TaskKind::AngleTracking {
                reference: self.reference.unwrap_or(0.0),
                weight: self.weight.unwrap_or(1.0),
                index: self.index.unwrap_or(0),
            },
            TaskKindName::EvaderDistance => TaskKind::EvaderDistance {
                weight: self.weight.unwrap_or(1.0),
            },
            TaskKindName::None => TaskKind::None,
        };
        let spec = TaskCostSpec {
            kind,
            control_effort_weight: self.control_effort_weight,
        };
        spec.validate(n_x)?;
        Ok(spec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeldoutSpec {
    pub n_transitions: usize,
    pub n_trajectories: usize,
    pub traj_length: usize,
}

impl Default for HeldoutSpec {
    fn default() -> Self {
        Self {
            n_transitions: 500,
            n_trajectories: 20,
            traj_length: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: String,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub episode_length: usize,
    #[serde(default = "default_lambdas")]
    pub lambda_values: Vec<f64>,
    #[serde(default = "default_baselines")]
    pub baselines: Vec<Baseline>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_prior_std")]
    pub prior_std: f64,
    #[serde(default)]
    pub info_variant: InfoVariantName,
    /// Write measured wall time into metrics.csv; off by default so reruns
    /// are byte-identical.
    #[serde(default)]
    pub record_wall_time: bool,
    pub system: SystemConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default)]
    pub planner: CemConfig,
    #[serde(default)]
    pub heldout: HeldoutSpec,
    #[serde(default)]
    pub directed_info: DirectedInfoConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

fn default_lambdas() -> Vec<f64> {
    vec![0.0, 10.0, 50.0]
}

fn default_baselines() -> Vec<Baseline> {
    vec![Baseline::Random, Baseline::Passive]
}

fn default_prior_std() -> f64 {
    0.5
}

/// One arm of an experiment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Condition {
    Random,
    Lambda(f64),
}

impl Condition {
    pub fn lambda(&self) -> Option<f64> {
        match self {
            Condition::Random => None,
            Condition::Lambda(l) => Some(*l),
        }
    }

    pub fn name(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Random => f.write_str("random"),
            Condition::Lambda(l) => write!(f, "lambda={l}"),
        }
    }
}

impl std::str::FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "random" => Ok(Condition::Random),
            "passive" => Ok(Condition::Lambda(0.0)),
            other => {
                let value = other.strip_prefix("lambda=").unwrap_or(other);
                value
                    .parse::<f64>()
                    .ok()
                    .filter(|l| l.is_finite() && *l >= 0.0)
                    .map(Condition::Lambda)
                    .ok_or_else(|| Error::config(format!("unknown condition {s:?}")))
            }
        }
    }
}

/// Set `key` (dotted path) to `raw`, parsed as a TOML value when possible and
/// as a bare string otherwise. Intermediate tables are created as needed.
pub fn apply_override(doc: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').map(str::trim).collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("invalid override key {key:?}")));
    }
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let (last, path) = parts.split_last().expect("non-empty key");
    let mut table = doc;
    for part in path {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override {key:?}: {part:?} is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Split `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {s:?} must look like key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e| Error::config(format!("config: {e}")))?;
        for (k, v) in overrides {
            apply_override(&mut doc, k, v)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        if self.episode_length == 0 {
            return Err(Error::config("episode_length must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(Error::config("seeds must be distinct"));
        }
        if let Some(l) = self
            .lambda_values
            .iter()
            .find(|l| !(l.is_finite() && **l >= 0.0))
        {
            return Err(Error::config(format!(
                "lambda values must be finite and >= 0, got {l}"
            )));
        }
        if !(self.prior_std.is_finite() && self.prior_std >= 0.0) {
            return Err(Error::config("prior_std must be finite and >= 0"));
        }
        if self.heldout.n_transitions == 0 && self.heldout.n_trajectories == 0 {
            return Err(Error::config("heldout needs transitions or trajectories"));
        }
        if self.heldout.n_trajectories > 0 && self.heldout.traj_length == 0 {
            return Err(Error::config("heldout traj_length must be at least 1"));
        }
        if self.conditions().is_empty() {
            return Err(Error::config(
                "no conditions: give lambda_values or baselines",
            ));
        }
        self.planner.validate()?;
        if self.info_variant == InfoVariantName::DirectedInfoMc {
            self.directed_info.validate()?;
        }
        let sys = self.build_system()?;
        self.task.to_spec(sys.n_x())?;
        Ok(())
    }

    /// Baselines first (random, then passive), then λ > 0 ascending.
    pub fn conditions(&self) -> Vec<Condition> {
        let mut out = Vec::new();
        if self.baselines.contains(&Baseline::Random) {
            out.push(Condition::Random);
        }
        if self.baselines.contains(&Baseline::Passive) || self.lambda_values.contains(&0.0) {
            out.push(Condition::Lambda(0.0));
        }
        let mut active: Vec<f64> = self
            .lambda_values
            .iter()
            .copied()
            .filter(|l| *l > 0.0)
            .collect();
        active.sort_by(f64::total_cmp);
        active.dedup();
        out.extend(active.into_iter().map(Condition::Lambda));
        out
    }

    pub fn info_variant(&self) -> InfoVariant {
        match self.info_variant {
            InfoVariantName::ClosedFormMi => InfoVariant::ClosedFormMi,
            InfoVariantName::DirectedInfoMc => InfoVariant::DirectedInfoMc(self.directed_info),
        }
    }

    pub fn task_spec(&self, n_x: usize) -> Result<TaskCostSpec> {
        self.task.to_spec(n_x)
    }

    /// The configured system with overrides applied.
    pub fn build_system(&self) -> Result<Box<dyn SystemModel>> {
        let s = &self.system;
        let vec_of = |v: &Option<Vec<f64>>| v.as_ref().map(|v| Vector::from_vec(v.clone()));
        let noise = |n_x: usize, n_theta: usize, default_state: &Psd| -> Result<NoiseModel> {
            let state = match &self.noise.state {
                Some(spec) => spec.to_psd(n_x, "state")?,
                None => default_state.clone(),
            };
            let param = match &self.noise.param {
                Some(spec) => spec.to_psd(n_theta, "parameter")?,
                None => Psd::zeros(n_theta),
            };
            Ok(NoiseModel { state, param })
        };
        let only_for = |field: bool, name: &str, system: SystemId| -> Result<()> {
            if field {
                Err(Error::config(format!(
                    "system.{name} does not apply to {system}"
                )))
            } else {
                Ok(())
            }
        };
        if s.id != SystemId::DampedPendulum {
            only_for(
                s.mass.is_some() || s.gravity.is_some() || s.length.is_some(),
                "mass/gravity/length",
                s.id,
            )?;
        }
        if s.id != SystemId::PeMpc {
            only_for(
                s.mpc_horizon.is_some() || s.mpc_iterations.is_some() || s.mpc_step_size.is_some(),
                "mpc_*",
                s.id,
            )?;
        }

        macro_rules! finish {
            ($sys:expr) => {{
                let mut sys = $sys;
                let n = noise(sys.n_x(), sys.n_theta(), sys.state_noise())?;
                sys = sys.with_noise(n)?;
                if let Some(theta) = vec_of(&s.theta_true) {
                    sys = sys.with_theta(theta)?;
                }
                if let Some(x0) = vec_of(&s.x0) {
                    sys = sys.with_initial_state(x0)?;
                }
                if let Some(limit) = s.control_limit {
                    if !(limit.is_finite() && limit > 0.0) {
                        return Err(Error::config("control_limit must be positive"));
                    }
                    sys = sys.with_control_limit(limit);
                }
                Ok(Box::new(sys) as Box<dyn SystemModel>)
            }};
        }

        match s.id {
            SystemId::DoubleIntegrator => finish!(DoubleIntegrator::new(s.dt)?),
            SystemId::DampedPendulum => {
                let mut p = DampedPendulum::new(s.dt)?;
                if s.mass.is_some() || s.gravity.is_some() || s.length.is_some() {
                    p = p.with_physical(
                        s.mass.unwrap_or(1.0),
                        s.gravity.unwrap_or(9.81),
                        s.length.unwrap_or(1.0),
                    )?;
                }
                finish!(p)
            }
            SystemId::PeLqr => finish!(PursuitEvasionLqr::new(s.dt)?),
            SystemId::PeMpc => {
                let defaults = MpcSettings::default();
                let mpc = MpcSettings {
                    horizon: s.mpc_horizon.unwrap_or(defaults.horizon),
                    iterations: s.mpc_iterations.unwrap_or(defaults.iterations),
                    step_size: s.mpc_step_size.unwrap_or(defaults.step_size),
                    ..defaults
                };
                finish!(PursuitEvasionMpc::new(s.dt)?.with_mpc(mpc)?)
            }
        }
    }

    /// Effective configuration as JSON, for echoing into summaries.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
