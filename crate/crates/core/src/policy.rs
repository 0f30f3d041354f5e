//! Robust policy optimization by worst-case-weighted natural policy gradient.
//!
//! Each iteration samples prompts, scores them by their KL-regularized value,
//! finds the *minimizing* weights inside the divergence ball, and takes the
//! step `θ ← Π_B(θ + η G† g)` with `g = Σ q_i ∇v(θ; x_i)` and the weighted
//! Fisher matrix `G = Σ q_i F(θ|x_i)`. The final iterate is returned.

use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::divergence::{apply_floor, worst_case_weights, DivergenceKind, DivergenceSpec, Sense};
use crate::env::{FeatureEnv, PreferenceDataset};
use crate::error::{Error, Result};
use crate::linalg::{pinv_psd, positive_eigen_range, PINV_REL_TOL};
use crate::losses::{
    expected_score_times, pointwise_values, prompt_compatible_loss, prompt_fisher, KlConfig,
    PolicyParams, PromptPolicy, RewardParams,
};
use crate::report::{ReportRow, TrainReport};
use crate::rng::{phase_rng, Phase};
use crate::train::{check_common, check_radius, config_digest, default_true, elapsed_ms, sample_batch, StepSize};
use crate::vecops::{axpy, dot, norm, project_ball};

/// Upper cap of the automatic step size.
pub const AUTO_ETA_CAP: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyMode {
    /// Weights are computed from exact per-prompt values `v(θ; x)`.
    #[default]
    ExactExpectation,
    /// Weights are computed from one sampled completion per prompt.
    SampledCompletion,
}

fn default_divergence() -> DivergenceKind {
    DivergenceKind::Tv
}

fn default_pinv_tol() -> f64 {
    PINV_REL_TOL
}

fn default_warmup() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// `"auto"` gives `η = min{1 / (2β q̂_min), 0.1}` with `q̂_min` the smallest
    /// positive weight seen over `warmup_batches` minibatches at `θ_ref`.
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
    pub mode: PolicyMode,
    #[serde(default)]
    pub q_floor: f64,
    #[serde(default = "default_pinv_tol")]
    pub pinv_rel_tol: f64,
    /// Constant added to the learned reward; defaults to the reward radius `F`.
    #[serde(default)]
    pub reward_shift: Option<f64>,
    #[serde(default = "default_true")]
    pub with_replacement: bool,
    #[serde(default = "default_warmup")]
    pub warmup_batches: usize,
}

impl PolicyTrainConfig {
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
            mode: PolicyMode::ExactExpectation,
            q_floor: 0.0,
            pinv_rel_tol: PINV_REL_TOL,
            reward_shift: None,
            with_replacement: true,
            warmup_batches: default_warmup(),
        }
    }

    pub fn resolved_radius(&self, env: &FeatureEnv) -> f64 {
        self.radius.unwrap_or(env.policy_radius())
    }

    pub fn resolved_shift(&self, reward: &RewardParams) -> f64 {
        self.reward_shift.unwrap_or(reward.radius)
    }

    pub fn validate(&self, env: &FeatureEnv) -> Result<()> {
        check_common(self.iterations, self.batch_size, self.rho, self.q_floor)?;
        let b = self.resolved_radius(env);
        check_radius("radius", b)?;
        KlConfig::new(self.beta).map_err(|e| Error::Config(e.to_string()))?;
        if !(self.pinv_rel_tol > 0.0 && self.pinv_rel_tol < 1.0) {
            return Err(Error::Config(format!(
                "pinv_rel_tol must lie in (0, 1), got {}",
                self.pinv_rel_tol
            )));
        }
        if let Some(s) = self.reward_shift {
            if !s.is_finite() {
                return Err(Error::Config("reward_shift must be finite".into()));
            }
        }
        if let StepSize::Fixed(_) = self.eta {
            self.eta.resolve(|| 0.0)?;
        }
        if norm(env.ref_policy_params()) > b * (1.0 + 1e-12) {
            return Err(Error::Config(format!(
                "reference parameters lie outside the policy ball of radius {b}"
            )));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        config_digest(self)
    }
}

/// `Φ(π_θ) = Σ_x D_src(x) KL(π_opt(·|x) ‖ π_θ(·|x))`.
pub fn potential(theta: &[f64], opt: &[f64], env: &FeatureEnv) -> f64 {
    (0..env.num_prompts())
        .map(|x| {
            let lo = crate::losses::log_policy_all(opt, env, x);
            let lt = crate::losses::log_policy_all(theta, env, x);
            let kl: f64 = lo.iter().zip(&lt).map(|(a, b)| a.exp() * (a - b)).sum();
            env.source_dist()[x] * kl
        })
        .sum()
}

/// Everything one NPG step needs at the current iterate.
struct StepState {
    objective: f64,
    uniform: f64,
    mass_moved: f64,
    grad: Vec<f64>,
    direction: Vec<f64>,
    fisher_min_eig: f64,
    compatible_loss: f64,
}

fn check_prompts(env: &FeatureEnv, dataset: &PreferenceDataset) -> Result<()> {
    let expected = env.digest();
    if expected != dataset.env_digest() {
        return Err(Error::DigestMismatch {
            expected,
            found: dataset.env_digest().to_string(),
        });
    }
    if let Some(ex) = dataset.examples().iter().find(|e| e.prompt >= env.num_prompts()) {
        return Err(Error::InvalidArgument(format!(
            "example {ex:?} indexes outside the environment"
        )));
    }
    Ok(())
}

/// Trains a policy and returns the final iterate.
pub fn train_robust_policy(
    cfg: &PolicyTrainConfig,
    env: &FeatureEnv,
    dataset: &PreferenceDataset,
    reward: &RewardParams,
) -> Result<(PolicyParams, TrainReport)> {
    train_robust_policy_tracked(cfg, env, dataset, reward, None)
}

/// As [`train_robust_policy`], additionally reporting the potential `Φ`
/// against a known optimum at every iteration.
pub fn train_robust_policy_tracked(
    cfg: &PolicyTrainConfig,
    env: &FeatureEnv,
    dataset: &PreferenceDataset,
    reward: &RewardParams,
    optimum: Option<&PolicyParams>,
) -> Result<(PolicyParams, TrainReport)> {
    cfg.validate(env)?;
    check_prompts(env, dataset)?;
    if reward.omega.len() != env.d_reward() {
        return Err(Error::InvalidDimension(format!(
            "reward has {} parameters, environment expects {}",
            reward.omega.len(),
            env.d_reward()
        )));
    }
    if let Some(o) = optimum {
        if o.theta.len() != env.d_policy() {
            return Err(Error::InvalidDimension("optimum has the wrong dimension".into()));
        }
    }
    let start = Instant::now();
    let kl = KlConfig { beta: cfg.beta };
    let spec = DivergenceSpec {
        kind: cfg.divergence,
        rho: cfg.rho,
    };
    let radius = cfg.resolved_radius(env);
    let shift = cfg.resolved_shift(reward);
    let prompts: Vec<usize> = dataset.examples().iter().map(|e| e.prompt).collect();
    let eta = resolve_eta(cfg, env, &prompts, reward, kl, spec, shift)?;

    let mut theta = env.ref_policy_params().to_vec();
    let mut rng = phase_rng(cfg.seed, Phase::Minibatch);
    let mut completion_rng = phase_rng(cfg.seed, Phase::Completion);
    let mut report = TrainReport::new(cfg.digest());
    report.rows.reserve(cfg.iterations);

    for t in 1..=cfg.iterations {
        let idx = sample_batch(&mut rng, prompts.len(), cfg.batch_size, cfg.with_replacement)?;
        let batch: Vec<usize> = idx.iter().map(|&i| prompts[i]).collect();
        let pols: Vec<PromptPolicy> = batch.iter().map(|&x| PromptPolicy::new(&theta, env, x)).collect();
        let pointwise: Vec<Vec<f64>> = batch
            .iter()
            .zip(&pols)
            .map(|(&x, p)| pointwise_values(p, env, kl, &reward.omega, x))
            .collect();
        let values: Vec<f64> = match cfg.mode {
            PolicyMode::ExactExpectation => pols
                .iter()
                .zip(&pointwise)
                .map(|(p, v)| dot(&p.probs, v) + shift)
                .collect(),
            PolicyMode::SampledCompletion => {
                let mut out = Vec::with_capacity(batch.len());
                for (p, v) in pols.iter().zip(&pointwise) {
                    let y = WeightedIndex::new(&p.probs)
                        .map_err(|e| Error::NumericalFailure {
                            context: "completion sampling",
                            detail: e.to_string(),
                        })?
                        .sample(&mut completion_rng);
                    out.push(v[y] + shift);
                }
                out
            }
        };
        let state = npg_step(cfg, env, &pols, &pointwise, &values, spec, t)?;

        let mut row = ReportRow::new(t);
        row.robust_minibatch_loss = state.objective;
        row.uniform_minibatch_loss = state.uniform;
        row.grad_norm = norm(&state.grad);
        row.mass_moved = state.mass_moved;
        row.fisher_min_eig = state.fisher_min_eig;
        row.compatible_loss = state.compatible_loss;
        if let Some(o) = optimum {
            row.potential = potential(&theta, &o.theta, env);
        }
        row.wallclock_ms = elapsed_ms(start);
        report.rows.push(row);

        axpy(eta, &state.direction, &mut theta);
        project_ball(&mut theta, radius);
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure {
                context: "natural policy gradient",
                detail: format!("non-finite iterate at iteration {t}"),
            });
        }
        debug_assert!(norm(&theta) <= radius * (1.0 + 1e-12));
    }
    Ok((PolicyParams { theta, radius }, report))
}

fn npg_step(
    cfg: &PolicyTrainConfig,
    env: &FeatureEnv,
    pols: &[PromptPolicy],
    pointwise: &[Vec<f64>],
    values: &[f64],
    spec: DivergenceSpec,
    iteration: usize,
) -> Result<StepState> {
    let d = env.d_policy();
    let sol = worst_case_weights(values, spec, Sense::Min)?;
    let sol = apply_floor(sol, values, cfg.q_floor)?;
    let mut grad = vec![0.0; d];
    let mut fisher = nalgebra::DMatrix::zeros(d, d);
    for ((q, p), v) in sol.weights.iter().zip(pols).zip(pointwise) {
        if *q == 0.0 {
            continue;
        }
        axpy(*q, &expected_score_times(p, v), &mut grad);
        fisher += prompt_fisher(p, d) * *q;
    }
    let (lambda_max, min_pos) = positive_eigen_range(&fisher, cfg.pinv_rel_tol)?;
    let direction = if lambda_max <= 0.0 {
        // G = 0 forces g = 0 as well unless something is inconsistent.
        if norm(&grad) > 1e-12 {
            return Err(Error::DegenerateGeometry { iteration });
        }
        vec![0.0; d]
    } else {
        let pinv = pinv_psd(&fisher, cfg.pinv_rel_tol)?;
        (pinv * nalgebra::DVector::from_column_slice(&grad))
            .iter()
            .copied()
            .collect()
    };
    let compatible_loss = sol
        .weights
        .iter()
        .zip(pols)
        .zip(pointwise)
        .map(|((q, p), v)| q * prompt_compatible_loss(p, v, &direction))
        .sum();
    Ok(StepState {
        objective: sol.objective,
        uniform: values.iter().sum::<f64>() / values.len() as f64,
        mass_moved: sol.mass_moved,
        grad,
        direction,
        fisher_min_eig: if lambda_max > 0.0 { min_pos } else { 0.0 },
        compatible_loss,
    })
}

/// Automatic step size from a warmup pass at `θ_ref` on its own random stream.
fn resolve_eta(
    cfg: &PolicyTrainConfig,
    env: &FeatureEnv,
    prompts: &[usize],
    reward: &RewardParams,
    kl: KlConfig,
    spec: DivergenceSpec,
    shift: f64,
) -> Result<f64> {
    if let StepSize::Fixed(v) = cfg.eta {
        return StepSize::Fixed(v).resolve(|| v);
    }
    let theta = env.ref_policy_params();
    let mut rng = phase_rng(cfg.seed, Phase::Warmup);
    let mut q_min = f64::INFINITY;
    for _ in 0..cfg.warmup_batches.max(1) {
        let idx = sample_batch(&mut rng, prompts.len(), cfg.batch_size, cfg.with_replacement)?;
        let values: Vec<f64> = idx
            .iter()
            .map(|&i| crate::losses::kl_value(theta, env, kl, &reward.omega, prompts[i]) + shift)
            .collect();
        let sol = worst_case_weights(&values, spec, Sense::Min)?;
        let sol = apply_floor(sol, &values, cfg.q_floor)?;
        for &q in &sol.weights {
            if q > 0.0 {
                q_min = q_min.min(q);
            }
        }
    }
    StepSize::Auto.resolve(|| (1.0 / (2.0 * cfg.beta * q_min)).min(AUTO_ETA_CAP))
}
