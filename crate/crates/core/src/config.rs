//! Run configuration: a single JSON document with defaults for everything
//! except the client counts and the round budget.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::agent::AgentConfig;
use crate::data::PartitionScheme;
use crate::error::{Error, Result};
use crate::hardware::{self, Catalog, ClientSystemProfile};
use crate::scoring::{ScoreConfig, ScoreMode};

/// Keys that must appear in every config file.
pub const REQUIRED_KEYS: [(&str, &str); 3] = [
    ("num_clients", "N"),
    ("clients_per_round", "U"),
    ("total_rounds", "rounds"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Uniformly random `U` clients per round (the FedAvg baseline).
    Random,
    /// Every client, every round.
    #[serde(alias = "full")]
    FullParticipation,
    #[default]
    #[serde(alias = "flash-rl", alias = "flashrl")]
    FlashRl,
}

impl PolicyKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "random" | "fedavg" => Some(PolicyKind::Random),
            "full" | "full_participation" => Some(PolicyKind::FullParticipation),
            "flash_rl" | "flashrl" | "ddql" => Some(PolicyKind::FlashRl),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::Random => "random",
            PolicyKind::FullParticipation => "full_participation",
            PolicyKind::FlashRl => "flash_rl",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PerformanceMetric {
    #[default]
    Accuracy,
    MacroF1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic {
        num_classes: usize,
        input_dim: usize,
        samples_per_class: usize,
        spread: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic {
            num_classes: 10,
            input_dim: 16,
            samples_per_class: 200,
            spread: 1.0,
        }
    }
}

/// Per-client replacement of the round-robin device/link assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientOverride {
    pub client: usize,
    /// Index into the hardware catalog.
    #[serde(default)]
    pub hardware: Option<usize>,
    /// Index into the protocol catalog.
    #[serde(default)]
    pub protocol: Option<usize>,
    #[serde(default)]
    pub cycles_per_bit: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HardwareConfig {
    /// Replaces the built-in catalog when present.
    pub catalog: Option<Catalog>,
    pub cycles_per_bit: f64,
    pub freq_stdev_frac: f64,
    pub bw_stdev_frac: f64,
    pub overrides: Vec<ClientOverride>,
}

impl Default for HardwareConfig {
    fn default() -> Self {
        HardwareConfig {
            catalog: None,
            cycles_per_bit: hardware::DEFAULT_CYCLES_PER_BIT,
            freq_stdev_frac: hardware::DEFAULT_STDEV_FRAC,
            bw_stdev_frac: hardware::DEFAULT_STDEV_FRAC,
            overrides: Vec::new(),
        }
    }
}

impl HardwareConfig {
    pub fn catalog(&self) -> Catalog {
        self.catalog.clone().unwrap_or_default()
    }

    /// Round-robin assignment over the catalog, then overrides.
    pub fn profiles(&self, num_clients: usize) -> Result<Vec<ClientSystemProfile>> {
        let catalog = self.catalog();
        catalog.validate()?;
        let mut profiles = hardware::round_robin_profiles(&catalog, num_clients);
        for p in &mut profiles {
            p.cycles_per_bit = self.cycles_per_bit;
            p.freq_stdev_frac = self.freq_stdev_frac;
            p.bw_stdev_frac = self.bw_stdev_frac;
        }
        for o in &self.overrides {
            let p = profiles
                .get_mut(o.client)
                .ok_or(Error::UnknownClient(o.client))?;
            if let Some(h) = o.hardware {
                p.hardware = catalog
                    .hardware
                    .get(h)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("hardware index {h} out of range")))?;
            }
            if let Some(l) = o.protocol {
                p.protocol = catalog
                    .protocols
                    .get(l)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("protocol index {l} out of range")))?;
            }
            if let Some(g) = o.cycles_per_bit {
                p.cycles_per_bit = g;
            }
        }
        for p in &profiles {
            p.validate()?;
        }
        Ok(profiles)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub num_clients: usize,
    pub clients_per_round: usize,
    pub total_rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Zero trains softmax regression, otherwise a tanh MLP.
    pub hidden_dim: usize,
    pub bits_per_param: u64,
    pub dataset: DatasetConfig,
    pub validation_fraction: f64,
    pub partition: PartitionScheme,
    pub hardware: HardwareConfig,
    pub score: ScoreConfig,
    pub agent: AgentConfig,
    pub policy: PolicyKind,
    pub performance_metric: PerformanceMetric,
    pub seed: u64,
    /// Write a checkpoint every this many rounds; zero disables.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            num_clients: 100,
            clients_per_round: 10,
            total_rounds: 100,
            local_epochs: 5,
            batch_size: 50,
            learning_rate: 0.01,
            momentum: 0.9,
            hidden_dim: 0,
            bits_per_param: hardware::DEFAULT_BITS_PER_PARAM,
            dataset: DatasetConfig::default(),
            validation_fraction: 0.1,
            partition: PartitionScheme::HeteroDirichlet {
                alpha: 0.5,
                min_size: 10,
            },
            hardware: HardwareConfig::default(),
            score: ScoreConfig::default(),
            agent: AgentConfig::default(),
            policy: PolicyKind::FlashRl,
            performance_metric: PerformanceMetric::Accuracy,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

/// A parsed config together with the dotted paths of every field that
/// was filled from defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub defaulted: Vec<String>,
}

fn collect_defaulted(resolved: &Value, given: Option<&Value>, prefix: &str, out: &mut Vec<String>) {
    let Value::Object(map) = resolved else {
        return;
    };
    for (key, val) in map {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match given.and_then(|g| g.get(key)) {
            None => out.push(path),
            Some(g) if val.is_object() && g.is_object() => {
                collect_defaulted(val, Some(g), &path, out)
            }
            Some(_) => {}
        }
    }
}

impl RunConfig {
    /// Parse and validate, reporting every problem at once.
    pub fn from_json_str(text: &str) -> Result<LoadedConfig> {
        let raw: Value = serde_json::from_str(text)
            .map_err(|e| Error::Config(vec![format!("config is not valid JSON: {e}")]))?;
        Self::from_value(raw)
    }

    pub fn from_value(raw: Value) -> Result<LoadedConfig> {
        let mut problems = Vec::new();
        if !raw.is_object() {
            return Err(Error::Config(vec!["config must be a JSON object".into()]));
        }
        for (key, symbol) in REQUIRED_KEYS {
            if raw.get(key).is_none() {
                problems.push(format!("missing required field `{key}` ({symbol})"));
            }
        }
        let config: RunConfig = match serde_json::from_value(raw.clone()) {
            Ok(c) => c,
            Err(e) => {
                problems.push(format!("config does not match schema: {e}"));
                return Err(Error::Config(problems));
            }
        };
        problems.extend(config.problems());
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let mut defaulted = Vec::new();
        collect_defaulted(&serde_json::to_value(&config)?, Some(&raw), "", &mut defaulted);
        Ok(LoadedConfig { config, defaulted })
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.num_clients < 2 {
            p.push(format!("num_clients (N) must be >= 2, got {}", self.num_clients));
        }
        if self.clients_per_round < 1 {
            p.push("clients_per_round (U) must be >= 1".into());
        }
        if self.clients_per_round > self.num_clients {
            p.push(format!(
                "clients_per_round (U = {}) exceeds num_clients (N = {})",
                self.clients_per_round, self.num_clients
            ));
        }
        if self.local_epochs < 1 {
            p.push("local_epochs (E) must be >= 1".into());
        }
        if self.batch_size < 1 {
            p.push("batch_size (B) must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            p.push("learning_rate must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            p.push(format!("momentum {} not in [0,1)", self.momentum));
        }
        if self.bits_per_param == 0 {
            p.push("bits_per_param must be >= 1".into());
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            p.push(format!(
                "validation_fraction {} not in (0,1)",
                self.validation_fraction
            ));
        }
        match &self.dataset {
            DatasetConfig::Synthetic {
                num_classes,
                input_dim,
                samples_per_class,
                spread,
            } => {
                if *num_classes < 2 {
                    p.push("dataset.num_classes must be >= 2".into());
                }
                if *input_dim < 1 {
                    p.push("dataset.input_dim must be >= 1".into());
                }
                if *samples_per_class < 1 {
                    p.push("dataset.samples_per_class must be >= 1".into());
                }
                if !(*spread >= 0.0 && spread.is_finite()) {
                    p.push("dataset.spread must be >= 0".into());
                }
            }
            DatasetConfig::Idx { images, labels } => {
                if images.as_os_str().is_empty() || labels.as_os_str().is_empty() {
                    p.push("dataset.images and dataset.labels must be set".into());
                }
            }
        }
        match self.partition {
            PartitionScheme::HeteroDirichlet { alpha, .. } if !(alpha > 0.0) => {
                p.push(format!("partition alpha must be > 0, got {alpha}"))
            }
            PartitionScheme::Shards {
                shards_per_client: 0,
            } => p.push("partition shards_per_client must be >= 1".into()),
            PartitionScheme::NoniidLabel {
                labels_per_client,
                size_jitter,
            } => {
                if labels_per_client == 0 {
                    p.push("partition labels_per_client must be >= 1".into());
                }
                if !(0.0..1.0).contains(&size_jitter) {
                    p.push("partition size_jitter must be in [0,1)".into());
                }
            }
            PartitionScheme::LabelSkew {
                labels_per_client: 0,
            } => p.push("partition labels_per_client must be >= 1".into()),
            _ => {}
        }
        let hw = &self.hardware;
        if let Err(Error::Config(c)) = hw.catalog().validate() {
            p.extend(c.into_iter().map(|m| format!("hardware.catalog: {m}")));
        }
        if !(hw.cycles_per_bit > 0.0) {
            p.push("hardware.cycles_per_bit must be > 0".into());
        }
        for (name, v) in [
            ("freq_stdev_frac", hw.freq_stdev_frac),
            ("bw_stdev_frac", hw.bw_stdev_frac),
        ] {
            if !(0.0..=0.5).contains(&v) {
                p.push(format!("hardware.{name} {v} not in [0, 0.5]"));
            }
        }
        let catalog = hw.catalog();
        for o in &hw.overrides {
            if o.client >= self.num_clients {
                p.push(format!("hardware override for unknown client {}", o.client));
            }
            if o.hardware.is_some_and(|h| h >= catalog.hardware.len()) {
                p.push(format!("hardware override for client {}: hardware index out of range", o.client));
            }
            if o.protocol.is_some_and(|l| l >= catalog.protocols.len()) {
                p.push(format!("hardware override for client {}: protocol index out of range", o.client));
            }
            if o.cycles_per_bit.is_some_and(|g| !(g > 0.0)) {
                p.push(format!("hardware override for client {}: cycles_per_bit must be > 0", o.client));
            }
        }
        p.extend(self.score.problems());
        if self.policy == PolicyKind::FlashRl {
            p.extend(self.agent.problems());
        }
        if self.score.mode == ScoreMode::Accuracy && self.performance_metric != PerformanceMetric::Accuracy {
            p.push("score.mode = accuracy requires performance_metric = accuracy".into());
        }
        p
    }
}
