//! Versioned JSON file formats for environments, datasets and models.
//!
//! Floats are written as `{:.16e}` (17 significant digits) so every value
//! round-trips bit-exactly; non-finite values are written as `null`.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::env::{EnvParts, FeatureEnv, PreferenceDataset, PreferenceExample};
use crate::error::{Error, Result};

pub const ENV_SCHEMA: &str = "dro-pref/env/v1";
pub const DATASET_SCHEMA: &str = "dro-pref/dataset/v1";
pub const MODEL_SCHEMA: &str = "dro-pref/model/v1";

/// Serde helpers writing floats with 17 significant digits.
pub mod float17 {
    use serde::de::Deserializer;
    use serde::ser::{Error as _, Serializer};
    use serde::{Deserialize, Serialize};
    use serde_json::value::RawValue;

    pub fn format(v: f64) -> String {
        if v.is_finite() {
            format!("{v:.16e}")
        } else {
            "null".to_string()
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        RawValue::from_string(format(*v))
            .map_err(S::Error::custom)?
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }

    pub mod vec {
        use super::*;

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            let body: Vec<String> = v.iter().map(|x| format(*x)).collect();
            RawValue::from_string(format!("[{}]", body.join(",")))
                .map_err(S::Error::custom)?
                .serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Ok(Vec::<Option<f64>>::deserialize(d)?
                .into_iter()
                .map(|x| x.unwrap_or(f64::NAN))
                .collect())
        }
    }

    pub mod map {
        use super::*;
        use std::collections::BTreeMap;

        pub fn serialize<S: Serializer>(m: &BTreeMap<String, f64>, s: S) -> Result<S::Ok, S::Error> {
            let body: Vec<String> = m
                .iter()
                .map(|(k, v)| {
                    let key = serde_json::to_string(k).expect("string keys serialize");
                    format!("{key}:{}", format(*v))
                })
                .collect();
            RawValue::from_string(format!("{{{}}}", body.join(",")))
                .map_err(S::Error::custom)?
                .serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<String, f64>, D::Error> {
            Ok(BTreeMap::<String, Option<f64>>::deserialize(d)?
                .into_iter()
                .map(|(k, v)| (k, v.unwrap_or(f64::NAN)))
                .collect())
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnvFile {
    schema: String,
    digest: String,
    num_prompts: usize,
    num_completions: usize,
    d_reward: usize,
    d_policy: usize,
    #[serde(with = "float17")]
    reward_radius: f64,
    #[serde(with = "float17")]
    policy_radius: f64,
    #[serde(with = "float17::vec")]
    reward_features: Vec<f64>,
    #[serde(with = "float17::vec")]
    policy_features: Vec<f64>,
    #[serde(with = "float17::vec")]
    true_reward_params: Vec<f64>,
    #[serde(with = "float17::vec")]
    source_dist: Vec<f64>,
    #[serde(with = "float17::vec")]
    ref_policy_params: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    schema: String,
    seed: u64,
    env_digest: String,
    examples: Vec<[usize; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Reward,
    Policy,
    Dpo,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Reward => "reward",
            ModelKind::Policy => "policy",
            ModelKind::Dpo => "dpo",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reward" => Ok(ModelKind::Reward),
            "policy" => Ok(ModelKind::Policy),
            "dpo" => Ok(ModelKind::Dpo),
            other => Err(Error::Config(format!(
                "unknown model kind {other:?} (expected reward, policy or dpo)"
            ))),
        }
    }
}

/// A trained parameter vector with enough metadata to evaluate it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub schema: String,
    pub kind: ModelKind,
    pub env_digest: String,
    #[serde(with = "float17::vec")]
    pub params: Vec<f64>,
    #[serde(with = "float17")]
    pub radius: f64,
    /// KL coefficient for policy and DPO models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    /// Digest of the training configuration.
    pub config_digest: String,
}

impl ModelFile {
    pub fn new(
        kind: ModelKind,
        env: &FeatureEnv,
        params: Vec<f64>,
        radius: f64,
        beta: Option<f64>,
        config_digest: String,
    ) -> Self {
        Self {
            schema: MODEL_SCHEMA.to_string(),
            kind,
            env_digest: env.digest(),
            params,
            radius,
            beta,
            config_digest,
        }
    }

    pub fn check_env(&self, env: &FeatureEnv) -> Result<()> {
        let expected = env.digest();
        if expected != self.env_digest {
            return Err(Error::DigestMismatch {
                expected,
                found: self.env_digest.clone(),
            });
        }
        let want = match self.kind {
            ModelKind::Reward => env.d_reward(),
            ModelKind::Policy | ModelKind::Dpo => env.d_policy(),
        };
        if self.params.len() != want {
            return Err(Error::InvalidDimension(format!(
                "{} model has {} parameters, environment expects {want}",
                self.kind.as_str(),
                self.params.len()
            )));
        }
        Ok(())
    }
}

fn check_schema(found: &str, want: &str) -> Result<()> {
    if found != want {
        return Err(Error::Parse(format!(
            "unsupported schema {found:?}, expected {want:?}"
        )));
    }
    Ok(())
}

pub fn env_to_json(env: &FeatureEnv) -> String {
    let p = env.parts().clone();
    let file = EnvFile {
        schema: ENV_SCHEMA.into(),
        digest: env.digest(),
        num_prompts: p.num_prompts,
        num_completions: p.num_completions,
        d_reward: p.d_reward,
        d_policy: p.d_policy,
        reward_radius: p.reward_radius,
        policy_radius: p.policy_radius,
        reward_features: p.reward_features,
        policy_features: p.policy_features,
        true_reward_params: p.true_reward_params,
        source_dist: p.source_dist,
        ref_policy_params: p.ref_policy_params,
    };
    to_json(&file)
}

pub fn env_from_json(text: &str) -> Result<FeatureEnv> {
    let f: EnvFile = from_json(text)?;
    check_schema(&f.schema, ENV_SCHEMA)?;
    let env = FeatureEnv::from_parts(EnvParts {
        num_prompts: f.num_prompts,
        num_completions: f.num_completions,
        d_reward: f.d_reward,
        d_policy: f.d_policy,
        reward_features: f.reward_features,
        policy_features: f.policy_features,
        true_reward_params: f.true_reward_params,
        source_dist: f.source_dist,
        ref_policy_params: f.ref_policy_params,
        reward_radius: f.reward_radius,
        policy_radius: f.policy_radius,
    })?;
    let actual = env.digest();
    if actual != f.digest {
        return Err(Error::DigestMismatch {
            expected: actual,
            found: f.digest,
        });
    }
    Ok(env)
}

pub fn dataset_to_json(data: &PreferenceDataset) -> String {
    let file = DatasetFile {
        schema: DATASET_SCHEMA.into(),
        seed: data.seed(),
        env_digest: data.env_digest().to_string(),
        examples: data
            .examples()
            .iter()
            .map(|e| [e.prompt, e.y_plus, e.y_minus])
            .collect(),
    };
    serde_json::to_string(&file).expect("dataset serializes")
}

/// Parses a dataset and checks it against `env`.
pub fn dataset_from_json(text: &str, env: &FeatureEnv) -> Result<PreferenceDataset> {
    let f: DatasetFile = from_json(text)?;
    check_schema(&f.schema, DATASET_SCHEMA)?;
    let examples = f
        .examples
        .into_iter()
        .map(|[prompt, y_plus, y_minus]| PreferenceExample {
            prompt,
            y_plus,
            y_minus,
        })
        .collect();
    let data = PreferenceDataset::new(examples, f.env_digest, f.seed)?;
    data.check_env(env)?;
    Ok(data)
}

pub fn model_to_json(model: &ModelFile) -> String {
    to_json(model)
}

pub fn model_from_json(text: &str) -> Result<ModelFile> {
    let m: ModelFile = from_json(text)?;
    check_schema(&m.schema, MODEL_SCHEMA)?;
    Ok(m)
}

/// Pretty JSON with 17-digit floats.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("in-memory serialization cannot fail");
    s.push('\n');
    s
}

pub fn from_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
}

pub fn read_text(path: impl AsRef<Path>) -> Result<String> {
    fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    if let Some(dir) = path.as_ref().parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path.as_ref(), text).map_err(|e| Error::io(path, e))
}

pub fn save_env(path: impl AsRef<Path>, env: &FeatureEnv) -> Result<()> {
    write_text(path, &env_to_json(env))
}

pub fn load_env(path: impl AsRef<Path>) -> Result<FeatureEnv> {
    env_from_json(&read_text(path)?)
}

pub fn save_dataset(path: impl AsRef<Path>, data: &PreferenceDataset) -> Result<()> {
    write_text(path, &dataset_to_json(data))
}

pub fn load_dataset(path: impl AsRef<Path>, env: &FeatureEnv) -> Result<PreferenceDataset> {
    dataset_from_json(&read_text(path)?, env)
}

pub fn save_model(path: impl AsRef<Path>, model: &ModelFile) -> Result<()> {
    write_text(path, &model_to_json(model))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelFile> {
    model_from_json(&read_text(path)?)
}
