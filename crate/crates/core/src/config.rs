//! Experiment configuration: TOML schema, named workload presets,
//! environment-variable overrides, validation, and resolution into the
//! engine-facing inputs.

use crate::pipeline::{BatchTriggerConfig, PipelineConfig, StreamerConfig};
use crate::workload::{
    build_placement_with, LatencyModel, PlacementPlan, Strategy, WorkloadSpec,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Prefix for environment-variable overrides: `RLPIPE_SECTION__FIELD=value`.
pub const ENV_PREFIX: &str = "RLPIPE_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config error: {path}: {message}")]
    Field { path: String, message: String },
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl ConfigError {
    pub fn field(path: &str, message: impl std::fmt::Display) -> Self {
        ConfigError::Field { path: path.to_string(), message: message.to_string() }
    }
}

fn default_schema_version() -> u32 {
    1
}
fn default_ratio() -> String {
    "1:1".into()
}
fn default_nodes() -> u32 {
    1
}
fn default_seeds() -> Vec<u64> {
    vec![42]
}
fn default_max_staleness() -> u64 {
    1
}
fn default_starvation_timeout() -> f64 {
    1e7
}
fn default_time_scale() -> f64 {
    0.1
}
fn default_n_arms() -> usize {
    4
}
fn default_learning_rate() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub name: String,
    pub workload: WorkloadSection,
    pub placement: PlacementSection,
    pub pipeline: PipelineSection,
    pub run: RunSection,
    #[serde(default)]
    pub engine: EngineSection,
    #[serde(default)]
    pub toyrl: ToyrlSection,
    #[serde(default)]
    pub output: OutputSection,
}

/// Latency calibration: named presets plus inline overrides. `env_preset`
/// supplies the env-step model; `model_preset` supplies inference/training
/// costs; any inline field wins over its preset value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env_preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env_step: Option<LatencyModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inference: Option<LatencyModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_microbatch: Option<LatencyModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_aggregate_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_sync_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comm_per_trajectory_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comm_scale_per_node: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub straggler: Option<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlacementSection {
    pub strategy: Strategy,
    /// Devices per node.
    pub n_devices: u32,
    /// `"rollout:actor"`, e.g. `"3:1"`; ignored for colocated plans.
    #[serde(default = "default_ratio")]
    pub ratio: String,
    #[serde(default)]
    pub allow_hybrid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSection {
    #[serde(default)]
    pub train_async: bool,
    #[serde(default)]
    pub rollout_async: bool,
    #[serde(default)]
    pub streamer: bool,
    pub micro_batch: usize,
    /// Training samples per node per update round.
    pub global_batch: usize,
    pub b_max: usize,
    pub t_max_ms: f64,
    #[serde(default = "default_max_staleness")]
    pub max_staleness: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queue_capacity: Option<usize>,
    #[serde(default)]
    pub mid_episode_adoption: bool,
    #[serde(default)]
    pub context_switch_ms: f64,
    #[serde(default = "default_starvation_timeout")]
    pub starvation_timeout_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub n_rollout_epochs: u32,
    /// Env instances per node; overridden by `envs_per_rollout_device`.
    pub n_env: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub envs_per_rollout_device: Option<usize>,
    pub n_es: u32,
    pub chunk_size: u32,
    #[serde(default = "default_nodes")]
    pub nodes: u32,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineKind {
    Virtual,
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineSection {
    pub kind: EngineKind,
    /// Real milliseconds slept per virtual millisecond in live mode.
    #[serde(default = "default_time_scale")]
    pub time_scale: f64,
}

impl Default for EngineSection {
    fn default() -> Self {
        EngineSection { kind: EngineKind::Virtual, time_scale: default_time_scale() }
    }
}

/// Live-mode learner parameters (one-hot bandit).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyrlSection {
    #[serde(default = "default_n_arms")]
    pub n_arms: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
}

impl Default for ToyrlSection {
    fn default() -> Self {
        ToyrlSection { n_arms: default_n_arms(), learning_rate: default_learning_rate() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

// ---------------------------------------------------------------------
// Named presets (shipped in presets/env and presets/model, embedded here)
// ---------------------------------------------------------------------

const ENV_PRESETS: &[(&str, &str)] = &[
    (
        "libero-cpu-longtail",
        include_str!("../../../presets/env/libero-cpu-longtail.toml"),
    ),
    (
        "maniskill-gpu-batched",
        include_str!("../../../presets/env/maniskill-gpu-batched.toml"),
    ),
    ("toy-fast", include_str!("../../../presets/env/toy-fast.toml")),
];

const MODEL_PRESETS: &[(&str, &str)] = &[
    ("pi05-like", include_str!("../../../presets/model/pi05-like.toml")),
    ("pi0-like", include_str!("../../../presets/model/pi0-like.toml")),
    (
        "maniskill-pi0-like",
        include_str!("../../../presets/model/maniskill-pi0-like.toml"),
    ),
    ("toy-live", include_str!("../../../presets/model/toy-live.toml")),
];

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelPresetFile {
    grad_aggregate_ms: f64,
    weight_sync_ms: f64,
    inference: LatencyModel,
    train_microbatch: LatencyModel,
}

pub fn env_preset_names() -> Vec<&'static str> {
    ENV_PRESETS.iter().map(|(n, _)| *n).collect()
}

pub fn model_preset_names() -> Vec<&'static str> {
    MODEL_PRESETS.iter().map(|(n, _)| *n).collect()
}

fn lookup_preset(
    table: &[(&str, &str)],
    name: &str,
    base_dir: &Path,
    field: &str,
) -> Result<String, ConfigError> {
    if let Some((_, body)) = table.iter().find(|(n, _)| *n == name) {
        return Ok(body.to_string());
    }
    if name.ends_with(".toml") {
        let path = base_dir.join(name);
        return std::fs::read_to_string(&path).map_err(|source| ConfigError::Io { path, source });
    }
    Err(ConfigError::field(
        field,
        format!("unknown preset '{name}'; known: {:?}", {
            let mut names: Vec<&str> = table.iter().map(|(n, _)| *n).collect();
            names.sort_unstable();
            names
        }),
    ))
}

// ---------------------------------------------------------------------
// Resolution
// ---------------------------------------------------------------------

/// Fully resolved inputs for one experiment: effective totals across nodes,
/// a concrete placement, and a validated workload.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedExperiment {
    pub name: String,
    pub pipeline: PipelineConfig,
    pub placement: PlacementPlan,
    pub workload: WorkloadSpec,
    pub engine: EngineKind,
    pub time_scale: f64,
    pub seeds: Vec<u64>,
    pub toyrl: ToyrlSection,
    pub strategy_label: String,
    pub ratio_label: String,
    pub fingerprint: String,
    pub output_dir: Option<PathBuf>,
}

fn parse_ratio(s: &str) -> Result<(u32, u32), ConfigError> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 2 {
        return Err(ConfigError::field("placement.ratio", format!("expected 'R:A', got '{s}'")));
    }
    let r = parts[0].trim().parse::<u32>();
    let a = parts[1].trim().parse::<u32>();
    match (r, a) {
        (Ok(r), Ok(a)) if r > 0 && a > 0 => Ok((r, a)),
        _ => Err(ConfigError::field("placement.ratio", format!("invalid ratio '{s}'"))),
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let mut value: toml::Value = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        apply_env_overrides(&mut value, std::env::vars());
        value.try_into().map_err(|e: toml::de::Error| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml_str(&text, path)
    }

    /// Resolves presets and node scaling into engine inputs; every
    /// validation failure names the offending field.
    pub fn resolve(&self, base_dir: &Path) -> Result<ResolvedExperiment, ConfigError> {
        if self.schema_version != 1 {
            return Err(ConfigError::field(
                "schema_version",
                format!("unsupported version {}", self.schema_version),
            ));
        }
        let workload = self.resolve_workload(base_dir)?;
        workload
            .validate()
            .map_err(|e| ConfigError::field("workload", e))?;

        if self.run.nodes == 0 {
            return Err(ConfigError::field("run.nodes", "must be >= 1"));
        }
        let nodes = self.run.nodes;
        let n_devices_total = self.placement.n_devices * nodes;
        let (r, a) = if self.placement.strategy == Strategy::Colocated {
            (1, 1)
        } else {
            parse_ratio(&self.placement.ratio)?
        };
        let placement = build_placement_with(
            self.placement.strategy,
            n_devices_total,
            (r, a),
            self.placement.allow_hybrid,
        )
        .map_err(|e| {
            let field = match e {
                crate::workload::WorkloadError::IndivisibleRatio(..) => "placement.ratio",
                crate::workload::WorkloadError::UnsupportedStrategy => "placement.strategy",
                _ => "placement.n_devices",
            };
            ConfigError::field(field, e)
        })?;

        let n_env_total = match self.run.envs_per_rollout_device {
            Some(per) => {
                if per == 0 {
                    return Err(ConfigError::field("run.envs_per_rollout_device", "must be >= 1"));
                }
                per * placement.rollout_devices.len()
            }
            None => self.run.n_env * nodes as usize,
        };

        let pipeline = PipelineConfig {
            train_async: self.pipeline.train_async,
            rollout_async: self.pipeline.rollout_async,
            streamer: StreamerConfig {
                enabled: self.pipeline.streamer,
                micro_batch: self.pipeline.micro_batch,
                global_batch: self.pipeline.global_batch * nodes as usize,
            },
            trigger: BatchTriggerConfig {
                max_batch: self.pipeline.b_max,
                max_wait_ms: self.pipeline.t_max_ms,
            },
            max_staleness: self.pipeline.max_staleness,
            n_env: n_env_total,
            n_rollout_epochs: self.run.n_rollout_epochs,
            episode_steps: self.run.n_es,
            chunk_size: self.run.chunk_size,
            queue_capacity: self.pipeline.queue_capacity,
            mid_episode_adoption: self.pipeline.mid_episode_adoption,
            context_switch_ms: self.pipeline.context_switch_ms,
            starvation_timeout_ms: self.pipeline.starvation_timeout_ms,
            nodes,
        };
        pipeline
            .validate()
            .map_err(|e| ConfigError::field("pipeline", e))?;
        pipeline
            .validate_against_plan(&placement)
            .map_err(|e| ConfigError::field("pipeline.train_async", e))?;

        if self.run.seeds.is_empty() {
            return Err(ConfigError::field("run.seeds", "at least one seed required"));
        }
        if self.engine.time_scale <= 0.0 {
            return Err(ConfigError::field("engine.time_scale", "must be > 0"));
        }
        if self.toyrl.n_arms < 2 {
            return Err(ConfigError::field("toyrl.n_arms", "must be >= 2"));
        }
        if self.toyrl.learning_rate <= 0.0 {
            return Err(ConfigError::field("toyrl.learning_rate", "must be > 0"));
        }

        let strategy_label = match self.placement.strategy {
            Strategy::Colocated => "colocated",
            Strategy::Disaggregated => "disaggregated",
            Strategy::Hybrid => "hybrid",
        }
        .to_string();
        let ratio_label = if self.placement.strategy == Strategy::Colocated {
            "-".to_string()
        } else {
            format!("{r}:{a}")
        };

        let fingerprint = {
            let mut hasher = Sha256::new();
            hasher.update(serde_json::to_vec(&pipeline).unwrap());
            hasher.update(serde_json::to_vec(&placement).unwrap());
            hasher.update(serde_json::to_vec(&workload).unwrap());
            hasher.update([matches!(self.engine.kind, EngineKind::Live) as u8]);
            hasher.update(serde_json::to_vec(&self.toyrl).unwrap());
            let digest = hasher.finalize();
            digest.iter().take(16).map(|b| format!("{b:02x}")).collect::<String>()
        };

        Ok(ResolvedExperiment {
            name: self.name.clone(),
            pipeline,
            placement,
            workload,
            engine: self.engine.kind,
            time_scale: self.engine.time_scale,
            seeds: self.run.seeds.clone(),
            toyrl: self.toyrl.clone(),
            strategy_label,
            ratio_label,
            fingerprint,
            output_dir: self.output.dir.clone(),
        })
    }

    fn resolve_workload(&self, base_dir: &Path) -> Result<WorkloadSpec, ConfigError> {
        let w = &self.workload;
        let env_step = match (&w.env_step, &w.env_preset) {
            (Some(model), _) => model.clone(),
            (None, Some(name)) => {
                let body = lookup_preset(ENV_PRESETS, name, base_dir, "workload.env_preset")?;
                toml::from_str(&body).map_err(|e| {
                    ConfigError::field("workload.env_preset", format!("preset '{name}': {e}"))
                })?
            }
            (None, None) => {
                return Err(ConfigError::field(
                    "workload.env_step",
                    "set workload.env_preset or an inline workload.env_step model",
                ))
            }
        };
        let model: Option<ModelPresetFile> = match &w.model_preset {
            Some(name) => {
                let body = lookup_preset(MODEL_PRESETS, name, base_dir, "workload.model_preset")?;
                Some(toml::from_str(&body).map_err(|e| {
                    ConfigError::field("workload.model_preset", format!("preset '{name}': {e}"))
                })?)
            }
            None => None,
        };
        let inference = w
            .inference
            .clone()
            .or_else(|| model.as_ref().map(|m| m.inference.clone()))
            .ok_or_else(|| {
                ConfigError::field(
                    "workload.inference",
                    "set workload.model_preset or an inline workload.inference model",
                )
            })?;
        let train_microbatch = w
            .train_microbatch
            .clone()
            .or_else(|| model.as_ref().map(|m| m.train_microbatch.clone()))
            .ok_or_else(|| {
                ConfigError::field(
                    "workload.train_microbatch",
                    "set workload.model_preset or an inline workload.train_microbatch model",
                )
            })?;
        Ok(WorkloadSpec {
            env_step,
            inference,
            train_microbatch,
            grad_aggregate_ms: w
                .grad_aggregate_ms
                .or(model.as_ref().map(|m| m.grad_aggregate_ms))
                .unwrap_or(0.0),
            weight_sync_ms: w
                .weight_sync_ms
                .or(model.as_ref().map(|m| m.weight_sync_ms))
                .unwrap_or(0.0),
            comm_per_trajectory_ms: w.comm_per_trajectory_ms.unwrap_or(0.0),
            comm_scale_per_node: w.comm_scale_per_node.unwrap_or(0.0),
            straggler: w.straggler,
        })
    }
}

/// Applies `RLPIPE_SECTION__FIELD=value` overrides onto the parsed TOML
/// tree before deserialization. Values parse as TOML scalars when possible
/// and fall back to strings.
pub fn apply_env_overrides(
    value: &mut toml::Value,
    vars: impl Iterator<Item = (String, String)>,
) {
    for (key, raw) in vars {
        let Some(path) = key.strip_prefix(ENV_PREFIX) else { continue };
        let segments: Vec<String> = path.split("__").map(|s| s.to_lowercase()).collect();
        if segments.is_empty() || segments.iter().any(|s| s.is_empty()) {
            continue;
        }
        let parsed: toml::Value = toml::from_str::<toml::Value>(&format!("v = {raw}"))
            .ok()
            .and_then(|t| t.get("v").cloned())
            .unwrap_or_else(|| toml::Value::String(raw.clone()));
        let mut node = &mut *value;
        for segment in &segments[..segments.len() - 1] {
            let table = match node {
                toml::Value::Table(t) => t,
                _ => return,
            };
            node = table
                .entry(segment.clone())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
        if let toml::Value::Table(t) = node {
            t.insert(segments.last().unwrap().clone(), parsed);
        }
    }
}
