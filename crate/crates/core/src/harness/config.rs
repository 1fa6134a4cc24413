use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptive::AdaptiveConfig;
use crate::debias::FairnessConfig;
use crate::error::{Error, Result};
use crate::retrieval::RetrievalConfig;

/// Feature switches, one per ablation step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Flags {
    pub fusion: bool,
    pub retrieval: bool,
    pub debias: bool,
    pub explain: bool,
    pub adaptive: bool,
}

impl Flags {
    pub const NAMES: [&'static str; 5] = ["fusion", "retrieval", "debias", "explain", "adaptive"];

    pub fn all() -> Self {
        Flags {
            fusion: true,
            retrieval: true,
            debias: true,
            explain: true,
            adaptive: true,
        }
    }

    pub fn none() -> Self {
        Flags::default()
    }

    fn slot(&mut self, name: &str) -> Option<&mut bool> {
        match name {
            "fusion" => Some(&mut self.fusion),
            "retrieval" => Some(&mut self.retrieval),
            "debias" => Some(&mut self.debias),
            "explain" => Some(&mut self.explain),
            "adaptive" => Some(&mut self.adaptive),
            _ => None,
        }
    }

    pub fn with(mut self, name: &str) -> Result<Self> {
        *self
            .slot(name)
            .ok_or_else(|| Error::invalid(format!("unknown flag `{name}`")))? = true;
        Ok(self)
    }

    /// `all`, `none`, or a comma-separated list of flag names.
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "all" => Ok(Flags::all()),
            "none" | "" => Ok(Flags::none()),
            list => list.split(',').try_fold(Flags::none(), |f, name| f.with(name.trim())),
        }
    }

    pub fn label(&self) -> String {
        let on: Vec<&str> = Flags::NAMES
            .iter()
            .copied()
            .filter(|n| *Flags::clone(self).slot(n).expect("known flag"))
            .collect();
        if on.is_empty() {
            "none".into()
        } else {
            on.join(",")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Dataset directory; relative paths resolve against the data root.
    pub dir: Option<PathBuf>,
    pub train_fraction: f64,
    pub n_groups: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            train_fraction: 0.8,
            n_groups: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d: usize,
    pub dk: usize,
    pub blocks: usize,
    /// Text encoder length `L`.
    pub max_tokens: usize,
    /// Most recent history items fed to the decoder.
    pub max_history: usize,
    /// Recent item descriptions concatenated into the user's text.
    pub user_descriptions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 16,
            dk: 8,
            blocks: 2,
            max_tokens: 64,
            max_history: 20,
            user_descriptions: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Per-epoch multiplier on `lr`, restarted by every training phase.
    pub lr_decay: f64,
    pub momentum: f64,
    /// L2 coefficient added to every parameter gradient.
    pub weight_decay: f64,
    /// Global gradient-norm clip; zero disables clipping.
    pub clip: f64,
    /// Weight of the explicit-rating squared error next to the NLL.
    pub rating_weight: f64,
    pub adversary_lr: f64,
    pub preference_lr: f64,
    pub cutoffs: Vec<usize>,
    /// Length of every evaluated list (coverage reads the first 100).
    pub list_length: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 8,
            batch_size: 16,
            lr: 0.08,
            lr_decay: 0.8,
            momentum: 0.9,
            weight_decay: 1e-3,
            clip: 5.0,
            rating_weight: 0.1,
            adversary_lr: 0.5,
            preference_lr: 0.5,
            cutoffs: vec![5, 10],
            list_length: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DebiasConfig {
    /// Propensity clip floor `ε_p`.
    pub propensity_floor: f64,
    pub negatives: usize,
    pub propensity_epochs: usize,
    pub strata: usize,
    pub fairness: FairnessConfig,
}

impl Default for DebiasConfig {
    fn default() -> Self {
        DebiasConfig {
            propensity_floor: 0.01,
            negatives: 4,
            propensity_epochs: 200,
            strata: 4,
            fairness: FairnessConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainConfig {
    pub aspects: usize,
    /// Aspects multiplied in the preference explanation weight.
    pub top_aspects: usize,
    pub similar: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            aspects: 16,
            top_aspects: 2,
            similar: 3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub flags: Flags,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub retrieval: RetrievalConfig,
    pub debias: DebiasConfig,
    pub explain: ExplainConfig,
    pub adaptive: AdaptiveConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| Error::invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        ExperimentConfig::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.d == 0 || m.dk == 0 || m.max_tokens == 0 || m.max_history == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if !(1..=2).contains(&m.blocks) {
            return Err(Error::invalid("decoder takes one or two blocks"));
        }
        let t = &self.train;
        if t.batch_size == 0 || t.list_length == 0 {
            return Err(Error::invalid("batch size and list length must be positive"));
        }
        if !(t.lr > 0.0) || !(t.lr_decay > 0.0 && t.lr_decay <= 1.0) || !(0.0..1.0).contains(&t.momentum) || t.clip < 0.0 || t.weight_decay < 0.0 {
            return Err(Error::invalid("invalid optimizer settings"));
        }
        if t.cutoffs.is_empty() || t.cutoffs.contains(&0) {
            return Err(Error::invalid("cutoffs must be positive"));
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(Error::invalid("train fraction must lie in (0, 1)"));
        }
        if self.data.n_groups == 0 {
            return Err(Error::invalid("at least one group is required"));
        }
        let f = &self.debias.fairness;
        if f.lambda_fair < 0.0 || f.epsilon < 0.0 {
            return Err(Error::invalid("fairness weights must be nonnegative"));
        }
        if !(self.debias.propensity_floor > 0.0 && self.debias.propensity_floor <= 1.0) || self.debias.strata == 0 {
            return Err(Error::invalid("invalid debias settings"));
        }
        if self.explain.aspects < 2 {
            return Err(Error::invalid("at least two aspects are required"));
        }
        self.retrieval.validate()?;
        self.adaptive.validate()
    }

    /// Canonical JSON: object keys sorted, shortest round-trip floats.
    pub fn canonical_json(&self) -> Result<String> {
        let v = serde_json::to_value(self)?;
        Ok(serde_json::to_string(&v)?)
    }

    /// SHA-256 of the canonical JSON, first 16 hex digits.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.canonical_json()?.as_bytes());
        Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Context entries actually fed to the decoder.
    pub fn context_k(&self) -> usize {
        if self.flags.retrieval {
            self.retrieval.k
        } else {
            0
        }
    }

    pub fn lambda_fair(&self) -> f64 {
        if self.flags.debias {
            self.debias.fairness.lambda_fair
        } else {
            0.0
        }
    }
}
