//! Distributionally robust DPO.
//!
//! Same reweighted projected SGD as the reward trainer, applied to the DPO
//! loss of a log-linear policy against the environment's reference policy.
//! Starts at `θ_ref`, uses `η = 2/√T` unless overridden, and returns the
//! iterate average.

use serde::{Deserialize, Serialize};

use crate::divergence::{DivergenceKind, DivergenceSpec};
use crate::env::{FeatureEnv, PreferenceDataset};
use crate::error::{Error, Result};
use crate::losses::{dpo_loss_and_grad, KlConfig, PolicyParams};
use crate::report::TrainReport;
use crate::train::{
    check_common, check_radius, config_digest, default_true, robust_sgd, OutputMode, SgdRun, StepSize,
};
use crate::vecops::norm;

fn default_divergence() -> DivergenceKind {
    DivergenceKind::Tv
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpoTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// `"auto"` gives `η = 2/√T`.
    #[serde(default)]
    pub eta: StepSize,
    pub rho: f64,
    #[serde(default = "default_divergence")]
    pub divergence: DivergenceKind,
    pub beta: f64,
    /// Projection radius `B`; defaults to the environment's policy radius.
    #[serde(default)]
    pub radius: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub q_floor: f64,
    #[serde(default)]
    pub output: OutputMode,
    #[serde(default = "default_true")]
    pub with_replacement: bool,
}

impl DpoTrainConfig {
    pub fn new(iterations: usize, batch_size: usize, rho: f64, beta: f64, seed: u64) -> Self {
        Self {
            iterations,
            batch_size,
            eta: StepSize::Auto,
            rho,
            divergence: DivergenceKind::Tv,
            beta,
            radius: None,
            seed,
            q_floor: 0.0,
            output: OutputMode::Average,
            with_replacement: true,
        }
    }

    pub fn resolved_radius(&self, env: &FeatureEnv) -> f64 {
        self.radius.unwrap_or(env.policy_radius())
    }

    pub fn resolved_eta(&self) -> Result<f64> {
        let t = self.iterations as f64;
        self.eta.resolve(|| 2.0 / t.sqrt())
    }

    pub fn validate(&self, env: &FeatureEnv) -> Result<()> {
        check_common(self.iterations, self.batch_size, self.rho, self.q_floor)?;
        let b = self.resolved_radius(env);
        check_radius("radius", b)?;
        KlConfig::new(self.beta).map_err(|e| Error::Config(e.to_string()))?;
        if norm(env.ref_policy_params()) > b * (1.0 + 1e-12) {
            return Err(Error::Config(format!(
                "reference parameters lie outside the policy ball of radius {b}"
            )));
        }
        self.resolved_eta().map(|_| ())
    }

    pub fn digest(&self) -> String {
        config_digest(self)
    }
}

pub fn train_robust_dpo(
    cfg: &DpoTrainConfig,
    env: &FeatureEnv,
    dataset: &PreferenceDataset,
) -> Result<(PolicyParams, TrainReport)> {
    cfg.validate(env)?;
    dataset.check_env(env)?;
    let kl = KlConfig { beta: cfg.beta };
    let radius = cfg.resolved_radius(env);
    let run = SgdRun {
        iterations: cfg.iterations,
        batch_size: cfg.batch_size,
        eta: cfg.resolved_eta()?,
        divergence: DivergenceSpec {
            kind: cfg.divergence,
            rho: cfg.rho,
        },
        q_floor: cfg.q_floor,
        with_replacement: cfg.with_replacement,
        output: cfg.output,
        seed: cfg.seed,
        radius,
        init: env.ref_policy_params().to_vec(),
        examples: dataset.examples(),
        config_digest: cfg.digest(),
    };
    let (theta, report) = robust_sgd(run, |t, ex| dpo_loss_and_grad(t, env, kl, ex))?;
    Ok((PolicyParams { theta, radius }, report))
}
