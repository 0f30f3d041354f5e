//! Experiment configuration files (`dro-pref/config/v1`).
//!
//! One JSON document drives every CLI command. Trainer sections mirror the
//! trainer configs; a section without its own `seed` inherits the global one.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::divergence::DivergenceKind;
use crate::dpo::DpoTrainConfig;
use crate::env::EnvShape;
use crate::error::{Error, Result};
use crate::eval::PopulationSupport;
use crate::io::ModelKind;
use crate::policy::PolicyTrainConfig;
use crate::reward::RewardTrainConfig;

pub const CONFIG_SCHEMA: &str = "dro-pref/config/v1";

/// Environment shape plus dataset size for `gen` and `sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    pub num_prompts: usize,
    pub num_completions: usize,
    pub d_reward: usize,
    pub d_policy: usize,
    #[serde(default = "one")]
    pub reward_radius: f64,
    #[serde(default = "one")]
    pub policy_radius: f64,
    pub n_examples: usize,
    /// Dataset seed; defaults to the global seed (the dataset draws from
    /// its own stream, so sharing the seed is safe).
    #[serde(default)]
    pub dataset_seed: Option<u64>,
}

fn one() -> f64 {
    1.0
}

impl EnvSection {
    pub fn shape(&self) -> EnvShape {
        EnvShape {
            num_prompts: self.num_prompts,
            num_completions: self.num_completions,
            d_reward: self.d_reward,
            d_policy: self.d_policy,
            reward_radius: self.reward_radius,
            policy_radius: self.policy_radius,
        }
    }
}

/// Cross-product over ambiguity radii, one output directory per value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub rhos: Vec<f64>,
    /// Which trainer to run per cell; its section supplies everything but `rho`.
    #[serde(default = "default_target")]
    pub target: ModelKind,
    /// Divergence used when evaluating each cell (defaults to the trainer's).
    #[serde(default)]
    pub eval_divergence: Option<DivergenceKind>,
    #[serde(default)]
    pub support: PopulationSupport,
}

fn default_target() -> ModelKind {
    ModelKind::Reward
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub env: Option<EnvSection>,
    #[serde(default)]
    pub reward: Option<RewardTrainConfig>,
    #[serde(default)]
    pub policy: Option<PolicyTrainConfig>,
    #[serde(default)]
    pub dpo: Option<DpoTrainConfig>,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
}

impl ExperimentConfig {
    /// Parses and validates a config document.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut doc: Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        let obj = doc
            .as_object_mut()
            .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
        match obj.get("schema") {
            Some(Value::String(s)) if s == CONFIG_SCHEMA => {}
            Some(other) => {
                return Err(Error::Config(format!(
                    "unsupported config schema {other}, expected {CONFIG_SCHEMA:?}"
                )))
            }
            None => return Err(Error::Config(format!("missing \"schema\": {CONFIG_SCHEMA:?}"))),
        }
        let seed = obj.get("seed").cloned().unwrap_or(Value::from(0u64));
        for section in ["reward", "policy", "dpo"] {
            if let Some(Value::Object(s)) = obj.get_mut(section) {
                s.entry("seed").or_insert_with(|| seed.clone());
            }
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(s) = &cfg.sweep {
            if s.rhos.is_empty() {
                return Err(Error::Config("sweep.rhos must not be empty".into()));
            }
            if let Some(r) = s.rhos.iter().find(|r| !(**r >= 0.0) || !r.is_finite()) {
                return Err(Error::Config(format!("sweep rho {r} must be finite and non-negative")));
            }
        }
        Ok(cfg)
    }

    pub fn env_section(&self) -> Result<&EnvSection> {
        self.env.as_ref().ok_or_else(|| Error::Config("config has no \"env\" section".into()))
    }

    pub fn reward_section(&self) -> Result<&RewardTrainConfig> {
        self.reward.as_ref().ok_or_else(|| Error::Config("config has no \"reward\" section".into()))
    }

    pub fn policy_section(&self) -> Result<&PolicyTrainConfig> {
        self.policy.as_ref().ok_or_else(|| Error::Config("config has no \"policy\" section".into()))
    }

    pub fn dpo_section(&self) -> Result<&DpoTrainConfig> {
        self.dpo.as_ref().ok_or_else(|| Error::Config("config has no \"dpo\" section".into()))
    }

    pub fn sweep_section(&self) -> Result<&SweepSection> {
        self.sweep.as_ref().ok_or_else(|| Error::Config("config has no \"sweep\" section".into()))
    }
}
