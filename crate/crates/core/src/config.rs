//! Run configuration, read from TOML. Unknown keys are rejected.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvError, Environment, Forage, Hallway};
use crate::gate::GateMode;
use crate::mixer::{Activation, StateSource};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("config error at `{field}`: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Tgcnet,
    TgcnetFc,
    TgcnetQmix,
    NoComm,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Tgcnet,
        Variant::TgcnetFc,
        Variant::TgcnetQmix,
        Variant::NoComm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Tgcnet => "tgcnet",
            Variant::TgcnetFc => "tgcnet_fc",
            Variant::TgcnetQmix => "tgcnet_qmix",
            Variant::NoComm => "no_comm",
        }
    }

    pub fn gate_mode(self) -> GateMode {
        match self {
            Variant::Tgcnet | Variant::TgcnetQmix => GateMode::Learned,
            Variant::TgcnetFc => GateMode::Open,
            Variant::NoComm => GateMode::Closed,
        }
    }

    /// Mixer conditioning; `graph_head` applies to the graph-based variants.
    pub fn state_source(self, graph_head: StateSource) -> StateSource {
        match self {
            Variant::Tgcnet | Variant::TgcnetFc => graph_head,
            Variant::TgcnetQmix | Variant::NoComm => StateSource::TrueState,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| ConfigError::new("variant", format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvName {
    Hallway,
    Forage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub name: EnvName,
    /// Hallway chain lengths, one per agent.
    #[serde(default = "default_lengths")]
    pub lengths: Vec<usize>,
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default = "default_agents")]
    pub agents: usize,
    #[serde(default = "default_food")]
    pub food: usize,
    #[serde(default = "default_max_level")]
    pub max_level: usize,
    /// Overrides the task's own step limit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episode_limit: Option<usize>,
}

fn default_lengths() -> Vec<usize> {
    vec![3, 5]
}
fn default_grid() -> usize {
    7
}
fn default_agents() -> usize {
    3
}
fn default_food() -> usize {
    2
}
fn default_max_level() -> usize {
    2
}

impl EnvConfig {
    pub fn build(&self) -> Result<Box<dyn Environment>, EnvError> {
        Ok(match self.name {
            EnvName::Hallway => Box::new(Hallway::new(&self.lengths)?),
            EnvName::Forage => Box::new(Forage::new(
                self.grid,
                self.agents,
                self.food,
                self.max_level,
            )?),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub heads: usize,
    pub blocks: usize,
    pub gate_dim: usize,
    pub keys: usize,
    pub query_from_self: bool,
    pub state_dim: usize,
    pub gcn_layers: usize,
    pub gcn_dim: usize,
    pub gcn_weights: bool,
    pub gcn_activation: Activation,
    pub readout_activation: Activation,
    pub mixing_embed: usize,
    pub hypernet_hidden: usize,
    /// Mixer state head for the graph-based variants.
    pub state_head: StateSource,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            heads: 2,
            blocks: 2,
            gate_dim: 16,
            keys: 4,
            query_from_self: false,
            state_dim: 32,
            gcn_layers: 3,
            gcn_dim: 32,
            gcn_weights: true,
            gcn_activation: Activation::Elu,
            readout_activation: Activation::Tanh,
            mixing_embed: 32,
            hypernet_hidden: 32,
            state_head: StateSource::Coarsened,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lr: f64,
    pub buffer_size: usize,
    pub batch_size: usize,
    /// Hard target sync every this many updates.
    pub target_interval: usize,
    pub total_steps: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_anneal_steps: usize,
    pub temperature_start: f64,
    pub temperature_end: f64,
    /// Defaults to half of `total_steps`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature_anneal_steps: Option<usize>,
    pub grad_clip: f64,
    /// Rollout workers per collection round.
    pub workers: usize,
    /// Episodes collected between updates.
    pub episodes_per_update: usize,
    /// Pick next actions with the online network and evaluate them with the
    /// target; `false` takes the target's own per-agent maximum.
    pub double_q: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lr: 5e-4,
            buffer_size: 2000,
            batch_size: 32,
            target_interval: 200,
            total_steps: 50_000,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_anneal_steps: 50_000,
            temperature_start: 1.0,
            temperature_end: 0.3,
            temperature_anneal_steps: None,
            grad_clip: 10.0,
            workers: 1,
            episodes_per_update: 1,
            double_q: true,
        }
    }
}

impl TrainConfig {
    fn linear(start: f64, end: f64, span: usize, step: usize) -> f64 {
        if span == 0 || step >= span {
            return end;
        }
        start + (end - start) * step as f64 / span as f64
    }

    pub fn epsilon(&self, step: usize) -> f64 {
        Self::linear(
            self.epsilon_start,
            self.epsilon_end,
            self.epsilon_anneal_steps,
            step,
        )
    }

    pub fn temperature(&self, step: usize) -> f64 {
        let span = self
            .temperature_anneal_steps
            .unwrap_or(self.total_steps / 2);
        Self::linear(self.temperature_start, self.temperature_end, span, step)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Environment steps between test phases; 0 disables them.
    pub interval: usize,
    pub episodes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            interval: 2_000,
            episodes: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: String,
    /// Environment steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_interval: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: "runs/default".into(),
            checkpoint_interval: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Variant,
    pub seed: u64,
    pub env: EnvConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl RunConfig {
    /// A runnable configuration with defaults everywhere.
    pub fn new(variant: Variant, seed: u64, env: EnvName) -> Self {
        Self {
            variant,
            seed,
            env: EnvConfig {
                name: env,
                lengths: default_lengths(),
                grid: default_grid(),
                agents: default_agents(),
                food: default_food(),
                max_level: default_max_level(),
                episode_limit: None,
            },
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            output: OutputConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            let field = field_from_message(&message).unwrap_or_else(|| "<document>".into());
            ConfigError::new(field, message)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("model.hidden", self.model.hidden),
            ("model.heads", self.model.heads),
            ("model.gate_dim", self.model.gate_dim),
            ("model.keys", self.model.keys),
            ("model.state_dim", self.model.state_dim),
            ("model.gcn_dim", self.model.gcn_dim),
            ("model.mixing_embed", self.model.mixing_embed),
            ("model.hypernet_hidden", self.model.hypernet_hidden),
            ("train.buffer_size", self.train.buffer_size),
            ("train.batch_size", self.train.batch_size),
            ("train.target_interval", self.train.target_interval),
            ("train.workers", self.train.workers),
            ("train.episodes_per_update", self.train.episodes_per_update),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(ConfigError::new(field, "must be positive"));
            }
        }
        if !self.model.hidden.is_multiple_of(self.model.heads) {
            return Err(ConfigError::new("model.heads", "must divide model.hidden"));
        }
        if !(0.0..1.0).contains(&self.train.gamma) {
            return Err(ConfigError::new("train.gamma", "must lie in [0, 1)"));
        }
        if self.train.lr.is_nan() || self.train.lr <= 0.0 {
            return Err(ConfigError::new("train.lr", "must be positive"));
        }
        if self.train.grad_clip.is_nan() || self.train.grad_clip <= 0.0 {
            return Err(ConfigError::new("train.grad_clip", "must be positive"));
        }
        for (field, v) in [
            ("train.epsilon_start", self.train.epsilon_start),
            ("train.epsilon_end", self.train.epsilon_end),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ConfigError::new(field, "must lie in [0, 1]"));
            }
        }
        for (field, v) in [
            ("train.temperature_start", self.train.temperature_start),
            ("train.temperature_end", self.train.temperature_end),
        ] {
            if v.is_nan() || v <= 0.0 {
                return Err(ConfigError::new(field, "must be positive"));
            }
        }
        if self.train.batch_size > self.train.buffer_size {
            return Err(ConfigError::new(
                "train.batch_size",
                "must not exceed train.buffer_size",
            ));
        }
        if self.env.episode_limit == Some(0) {
            return Err(ConfigError::new("env.episode_limit", "must be positive"));
        }
        if self.model.state_head == StateSource::TrueState {
            return Err(ConfigError::new(
                "model.state_head",
                "must be a graph head (coarsened or agg_overlap); use a variant for the true state",
            ));
        }
        self.env
            .build()
            .map_err(|e| ConfigError::new("env", e.to_string()))?;
        Ok(())
    }
}

fn field_from_message(message: &str) -> Option<String> {
    let start = message.find('`')? + 1;
    let len = message[start..].find('`')?;
    Some(message[start..start + len].to_string())
}
