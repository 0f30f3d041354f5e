//! Distributionally robust reward estimation.
//!
//! Projected minibatch SGD on the Bradley–Terry loss where each minibatch is
//! reweighted by its worst case inside the divergence ball, starting from
//! `ω = 0` and returning the iterate average by default.

use serde::{Deserialize, Serialize};

use crate::divergence::{DivergenceKind, DivergenceSpec};
use crate::env::{FeatureEnv, PreferenceDataset};
use crate::error::{Error, Result};
use crate::losses::{reward_loss_and_grad, RewardParams};
use crate::report::TrainReport;
use crate::train::{
    check_common, check_radius, config_digest, default_true, robust_sgd, OutputMode, SgdRun, StepSize,
};

/// Bound on `‖∇ℓ‖` for unit-norm features, used by the automatic step size.
pub const REWARD_GRAD_BOUND: f64 = 2.0;

fn default_divergence() -> DivergenceKind {
    DivergenceKind::Tv
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// `"auto"` gives `η = R / (2√T)`.
    #[serde(default)]
    pub eta: StepSize,
    /// `R` in the automatic step size; defaults to the projection radius.
    #[serde(default)]
    pub step_radius: Option<f64>,
    pub rho: f64,
    #[serde(default = "default_divergence")]
    pub divergence: DivergenceKind,
    /// Projection radius `F`; defaults to the environment's reward radius.
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

impl RewardTrainConfig {
    pub fn new(iterations: usize, batch_size: usize, rho: f64, seed: u64) -> Self {
        Self {
            iterations,
            batch_size,
            eta: StepSize::Auto,
            step_radius: None,
            rho,
            divergence: DivergenceKind::Tv,
            radius: None,
            seed,
            q_floor: 0.0,
            output: OutputMode::Average,
            with_replacement: true,
        }
    }

    pub fn resolved_radius(&self, env: &FeatureEnv) -> f64 {
        self.radius.unwrap_or(env.reward_radius())
    }

    /// Step size actually used.
    pub fn resolved_eta(&self, env: &FeatureEnv) -> Result<f64> {
        let f = self.resolved_radius(env);
        let r = self.step_radius.unwrap_or(f);
        let t = self.iterations as f64;
        self.eta.resolve(|| r / (REWARD_GRAD_BOUND * t.sqrt()))
    }

    pub fn validate(&self, env: &FeatureEnv) -> Result<()> {
        check_common(self.iterations, self.batch_size, self.rho, self.q_floor)?;
        check_radius("radius", self.resolved_radius(env))?;
        if let Some(r) = self.step_radius {
            check_radius("step_radius", r)?;
        }
        self.resolved_eta(env).map(|_| ())
    }

    pub fn digest(&self) -> String {
        config_digest(self)
    }
}

/// Trains `ω̄` on `dataset`; see the module docs.
pub fn train_robust_reward(
    cfg: &RewardTrainConfig,
    env: &FeatureEnv,
    dataset: &PreferenceDataset,
) -> Result<(RewardParams, TrainReport)> {
    cfg.validate(env)?;
    dataset.check_env(env)?;
    let radius = cfg.resolved_radius(env);
    let run = SgdRun {
        iterations: cfg.iterations,
        batch_size: cfg.batch_size,
        eta: cfg.resolved_eta(env)?,
        divergence: DivergenceSpec {
            kind: cfg.divergence,
            rho: cfg.rho,
        },
        q_floor: cfg.q_floor,
        with_replacement: cfg.with_replacement,
        output: cfg.output,
        seed: cfg.seed,
        radius,
        init: vec![0.0; env.d_reward()],
        examples: dataset.examples(),
        config_digest: cfg.digest(),
    };
    let (omega, report) = robust_sgd(run, |w, ex| reward_loss_and_grad(w, env, ex))?;
    let params = RewardParams::new(omega, radius).map_err(|e| match e {
        Error::InvalidArgument(m) => Error::NumericalFailure {
            context: "reward training output",
            detail: m,
        },
        other => other,
    })?;
    Ok((params, report))
}
