//! Exact population-level evaluation.
//!
//! The population comparison distribution is the one [`crate::env::sample_dataset`]
//! draws from: `x ~ D_src`, a uniform unordered pair of distinct completions,
//! and a Bradley–Terry label. Two ambiguity supports are offered:
//!
//! * [`PopulationSupport::Prompt`] shifts the prompt marginal, scoring each
//!   prompt by its expected loss over pairs and labels;
//! * [`PopulationSupport::Joint`] shifts the full distribution over labelled
//!   comparisons `(x, y⁺, y⁻)`, the population analogue of the minibatch
//!   reweighting the trainers perform.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::divergence::{shift_distribution, worst_case_weights, DivergenceKind, DivergenceSpec, Sense};
use crate::env::{FeatureEnv, PreferenceExample};
use crate::error::{Error, Result};
use crate::io::float17;
use crate::linalg::{pinv_psd, positive_eigen_range, PINV_REL_TOL};
use crate::losses::{
    bt_preference_prob, dpo_loss_and_grad, expected_score_times, pointwise_values,
    prompt_compatible_loss, prompt_fisher, reward_loss_and_grad, reward_value, KlConfig,
    PromptPolicy, RewardParams,
};
use crate::rng::{phase_rng, Phase};
use crate::vecops::{axpy, dot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PopulationSupport {
    #[default]
    Prompt,
    Joint,
}

impl std::str::FromStr for PopulationSupport {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prompt" => Ok(PopulationSupport::Prompt),
            "joint" => Ok(PopulationSupport::Joint),
            other => Err(Error::Config(format!(
                "unknown population support {other:?} (expected prompt or joint)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(with = "float17")]
    pub standard_loss: f64,
    #[serde(with = "float17")]
    pub robust_loss: f64,
    /// Worst-case distribution over prompts or over labelled comparisons.
    #[serde(with = "float17::vec")]
    pub worst_dist: Vec<f64>,
    #[serde(with = "float17")]
    pub rho: f64,
    pub divergence: DivergenceKind,
    pub sense: Sense,
    pub support: PopulationSupport,
    #[serde(with = "float17::map")]
    pub extras: BTreeMap<String, f64>,
}

/// Robust objective over a finite support with reference `source_dist`.
pub fn robust_population_loss(
    loss_per_atom: &[f64],
    source_dist: &[f64],
    rho: f64,
    kind: DivergenceKind,
    sense: Sense,
) -> Result<EvalReport> {
    let (worst, robust) = shift_distribution(source_dist, loss_per_atom, rho, kind, sense)?;
    let standard = dot(source_dist, loss_per_atom);
    // ρ = 0 must report the standard value exactly.
    let robust = if rho == 0.0 { standard } else { robust };
    Ok(EvalReport {
        standard_loss: standard,
        robust_loss: robust,
        worst_dist: worst,
        rho,
        divergence: kind,
        sense,
        support: PopulationSupport::Prompt,
        extras: BTreeMap::new(),
    })
}

/// One labelled comparison and its population probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComparisonAtom {
    pub example: PreferenceExample,
    pub prob: f64,
}

/// Every labelled comparison `(x, y⁺, y⁻)` with its probability, ordered by
/// prompt, then by the unordered pair `a < b`, `(x, a, b)` before `(x, b, a)`.
pub fn comparison_atoms(env: &FeatureEnv) -> Vec<ComparisonAtom> {
    let ny = env.num_completions();
    let pairs = (ny * ny.saturating_sub(1) / 2) as f64;
    let mut out = Vec::new();
    for x in 0..env.num_prompts() {
        let px = env.source_dist()[x] / pairs;
        for a in 0..ny {
            for b in a + 1..ny {
                let s = bt_preference_prob(env.true_reward(x, a), env.true_reward(x, b));
                out.push(ComparisonAtom {
                    example: PreferenceExample { prompt: x, y_plus: a, y_minus: b },
                    prob: px * s,
                });
                out.push(ComparisonAtom {
                    example: PreferenceExample { prompt: x, y_plus: b, y_minus: a },
                    prob: px * (1.0 - s),
                });
            }
        }
    }
    out
}

/// Population loss and gradient of a per-comparison loss, robust over `support`.
fn robust_comparison_objective(
    env: &FeatureEnv,
    spec: DivergenceSpec,
    support: PopulationSupport,
    dim: usize,
    loss_and_grad: impl Fn(&PreferenceExample) -> (f64, Vec<f64>),
) -> Result<(EvalReport, Vec<f64>)> {
    if env.num_completions() < 2 {
        return Err(Error::InvalidDimension(
            "comparison losses need at least 2 completions".into(),
        ));
    }
    let atoms = comparison_atoms(env);
    let evals: Vec<(f64, Vec<f64>)> = atoms.iter().map(|a| loss_and_grad(&a.example)).collect();
    match support {
        PopulationSupport::Joint => {
            let probs: Vec<f64> = atoms.iter().map(|a| a.prob).collect();
            let losses: Vec<f64> = evals.iter().map(|e| e.0).collect();
            let mut rep = robust_population_loss(&losses, &probs, spec.rho, spec.kind, Sense::Max)?;
            rep.support = PopulationSupport::Joint;
            let mut grad = vec![0.0; dim];
            for (w, (_, g)) in rep.worst_dist.iter().zip(&evals) {
                axpy(*w, g, &mut grad);
            }
            Ok((rep, grad))
        }
        PopulationSupport::Prompt => {
            let nx = env.num_prompts();
            let mut losses = vec![0.0; nx];
            let mut grads = vec![vec![0.0; dim]; nx];
            for (a, (l, g)) in atoms.iter().zip(&evals) {
                let x = a.example.prompt;
                let w = a.prob / env.source_dist()[x];
                losses[x] += w * l;
                axpy(w, g, &mut grads[x]);
            }
            let rep = robust_population_loss(&losses, env.source_dist(), spec.rho, spec.kind, Sense::Max)?;
            let mut grad = vec![0.0; dim];
            for (w, g) in rep.worst_dist.iter().zip(&grads) {
                axpy(*w, g, &mut grad);
            }
            Ok((rep, grad))
        }
    }
}

/// Robust population Bradley–Terry loss of `ω` and a subgradient.
pub fn robust_reward_objective(
    omega: &[f64],
    env: &FeatureEnv,
    spec: DivergenceSpec,
    support: PopulationSupport,
) -> Result<(f64, Vec<f64>)> {
    check_dim("reward", omega.len(), env.d_reward())?;
    let (rep, g) = robust_comparison_objective(env, spec, support, env.d_reward(), |ex| {
        reward_loss_and_grad(omega, env, ex)
    })?;
    Ok((rep.robust_loss, g))
}

pub fn eval_reward(
    omega: &[f64],
    env: &FeatureEnv,
    spec: DivergenceSpec,
    support: PopulationSupport,
) -> Result<EvalReport> {
    check_dim("reward", omega.len(), env.d_reward())?;
    let (rep, _) = robust_comparison_objective(env, spec, support, env.d_reward(), |ex| {
        reward_loss_and_grad(omega, env, ex)
    })?;
    Ok(rep)
}

/// Robust population DPO loss of `θ` and a subgradient.
pub fn robust_dpo_objective(
    theta: &[f64],
    env: &FeatureEnv,
    kl: KlConfig,
    spec: DivergenceSpec,
    support: PopulationSupport,
) -> Result<(f64, Vec<f64>)> {
    check_dim("policy", theta.len(), env.d_policy())?;
    let (rep, g) = robust_comparison_objective(env, spec, support, env.d_policy(), |ex| {
        dpo_loss_and_grad(theta, env, kl, ex)
    })?;
    Ok((rep.robust_loss, g))
}

pub fn eval_dpo(
    theta: &[f64],
    env: &FeatureEnv,
    kl: KlConfig,
    spec: DivergenceSpec,
    support: PopulationSupport,
) -> Result<EvalReport> {
    check_dim("policy", theta.len(), env.d_policy())?;
    let (mut rep, _) = robust_comparison_objective(env, spec, support, env.d_policy(), |ex| {
        dpo_loss_and_grad(theta, env, kl, ex)
    })?;
    rep.extras.insert("J".into(), env.ref_log_ratio_bound());
    Ok(rep)
}

/// `v(θ; x) + shift` for every prompt.
pub fn prompt_values(theta: &[f64], env: &FeatureEnv, kl: KlConfig, omega: &[f64], shift: f64) -> Vec<f64> {
    (0..env.num_prompts())
        .map(|x| crate::losses::kl_value(theta, env, kl, omega, x) + shift)
        .collect()
}

/// Worst-case (minimizing) population value of a policy over shifts of the
/// prompt distribution. `robust_loss` holds the robust value.
pub fn eval_policy(
    theta: &[f64],
    env: &FeatureEnv,
    kl: KlConfig,
    omega: &[f64],
    shift: f64,
    spec: DivergenceSpec,
) -> Result<EvalReport> {
    check_dim("policy", theta.len(), env.d_policy())?;
    check_dim("reward", omega.len(), env.d_reward())?;
    let values = prompt_values(theta, env, kl, omega, shift);
    robust_population_loss(&values, env.source_dist(), spec.rho, spec.kind, Sense::Min)
}

pub fn robust_policy_value(
    theta: &[f64],
    env: &FeatureEnv,
    kl: KlConfig,
    omega: &[f64],
    shift: f64,
    spec: DivergenceSpec,
) -> Result<f64> {
    Ok(eval_policy(theta, env, kl, omega, shift, spec)?.robust_loss)
}

fn check_dim(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::InvalidDimension(format!(
            "{what} parameters have length {got}, environment expects {want}"
        )));
    }
    Ok(())
}

/// Outcome of a Monte-Carlo bias check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasCheck {
    #[serde(with = "float17")]
    pub population_robust: f64,
    #[serde(with = "float17")]
    pub minibatch_mean: f64,
    #[serde(with = "float17")]
    pub minibatch_se: f64,
    /// `population_robust − minibatch_mean`
    #[serde(with = "float17")]
    pub bias: f64,
    /// `12 F (1 + 2ρ) √((4 + ln n) / n)`
    #[serde(with = "float17")]
    pub bound: f64,
    pub n: usize,
    #[serde(with = "float17")]
    pub rho: f64,
    pub trials: usize,
    /// `bias ≥ −3 SE`
    pub lower_ok: bool,
    /// `bias ≤ bound`
    pub upper_ok: bool,
}

impl BiasCheck {
    pub fn holds(&self) -> bool {
        self.lower_ok && self.upper_ok
    }
}

/// Upper bound on the gap between the population robust loss and the
/// expected minibatch robust loss for losses bounded by `4F`.
pub fn bias_bound(reward_radius: f64, rho: f64, n: usize) -> f64 {
    let n = n as f64;
    12.0 * reward_radius * (1.0 + 2.0 * rho) * ((4.0 + n.ln()) / n).sqrt()
}

/// Compares the population robust reward loss (over labelled comparisons)
/// with the mean worst-case loss of `trials` i.i.d. minibatches of size `n`.
pub fn bias_check(
    reward: &RewardParams,
    env: &FeatureEnv,
    n: usize,
    spec: DivergenceSpec,
    trials: usize,
    seed: u64,
) -> Result<BiasCheck> {
    if n == 0 || trials < 2 {
        return Err(Error::InvalidArgument("bias check needs n ≥ 1 and trials ≥ 2".into()));
    }
    check_dim("reward", reward.omega.len(), env.d_reward())?;
    let atoms = comparison_atoms(env);
    let probs: Vec<f64> = atoms.iter().map(|a| a.prob).collect();
    let losses: Vec<f64> = atoms
        .iter()
        .map(|a| crate::losses::reward_loss(&reward.omega, env, &a.example))
        .collect();
    let (_, population_robust) = shift_distribution(&probs, &losses, spec.rho, spec.kind, Sense::Max)?;
    let sampler = WeightedIndex::new(&probs).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = phase_rng(seed, Phase::BiasCheck);
    // Welford running mean and variance.
    let (mut mean, mut m2) = (0.0, 0.0);
    let mut batch = vec![0.0; n];
    for k in 1..=trials {
        for slot in batch.iter_mut() {
            *slot = losses[sampler.sample(&mut rng)];
        }
        let v = worst_case_weights(&batch, spec, Sense::Max)?.objective;
        let delta = v - mean;
        mean += delta / k as f64;
        m2 += delta * (v - mean);
    }
    let var = m2 / (trials - 1) as f64;
    let se = (var / trials as f64).sqrt();
    let bias = population_robust - mean;
    let bound = bias_bound(reward.radius, spec.rho, n);
    Ok(BiasCheck {
        population_robust,
        minibatch_mean: mean,
        minibatch_se: se,
        bias,
        bound,
        n,
        rho: spec.rho,
        trials,
        lower_ok: bias >= -3.0 * se,
        upper_ok: bias <= bound,
    })
}

/// `2√2 (r_max + 3βB²) √((1 + 4ρ²/ν) Φ)`: bound on the robust-value gap of a
/// policy whose potential against the optimum is `Φ`.
pub fn suboptimality_bound(r_max: f64, beta: f64, radius: f64, rho: f64, nu: f64, phi: f64) -> f64 {
    2.0 * 2f64.sqrt()
        * (r_max + 3.0 * beta * radius * radius)
        * ((1.0 + 4.0 * rho * rho / nu) * phi.max(0.0)).sqrt()
}

/// Empirical analogues of the constants appearing in the policy analysis.
///
/// `prompt_weights` is a distribution over prompts (e.g. `D_src` or the
/// worst-case shift). Reported keys: `nu`, `r_min`, `r_max` (of the shifted
/// learned reward), `J`, `sigma_min` (smallest eigenvalue of the weighted
/// Fisher matrix), `q_min` (smallest positive weight), `eps_apx` (minimized
/// compatible loss) and, when `optimum` is given, `concentrability`
/// `Σ_x w(x) Σ_y π*(y|x)² / π(y|x)`.
#[allow(clippy::too_many_arguments)]
pub fn measure_constants(
    env: &FeatureEnv,
    theta: &[f64],
    kl: KlConfig,
    omega: &[f64],
    shift: f64,
    prompt_weights: &[f64],
    optimum: Option<&[f64]>,
) -> Result<BTreeMap<String, f64>> {
    check_dim("policy", theta.len(), env.d_policy())?;
    check_dim("reward", omega.len(), env.d_reward())?;
    check_dim("prompt weights", prompt_weights.len(), env.num_prompts())?;
    let d = env.d_policy();
    let mut m = BTreeMap::new();
    let (mut r_min, mut r_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for x in 0..env.num_prompts() {
        for y in 0..env.num_completions() {
            let r = reward_value(omega, env, x, y) + shift;
            r_min = r_min.min(r);
            r_max = r_max.max(r);
        }
    }
    let mut fisher = nalgebra::DMatrix::zeros(d, d);
    let mut grad = vec![0.0; d];
    let mut pols = Vec::new();
    let mut conc = 0.0;
    for x in 0..env.num_prompts() {
        let w = prompt_weights[x];
        let pol = PromptPolicy::new(theta, env, x);
        let v = pointwise_values(&pol, env, kl, omega, x);
        if w > 0.0 {
            fisher += prompt_fisher(&pol, d) * w;
            axpy(w, &expected_score_times(&pol, &v), &mut grad);
        }
        if let Some(opt) = optimum {
            let po = crate::losses::policy_probs(opt, env, x);
            conc += w * po.iter().zip(&pol.probs).map(|(a, b)| a * a / b).sum::<f64>();
        }
        pols.push((pol, v));
    }
    let (lmax, min_pos) = positive_eigen_range(&fisher, PINV_REL_TOL)?;
    let w_star: Vec<f64> = if lmax > 0.0 {
        (pinv_psd(&fisher, PINV_REL_TOL)? * nalgebra::DVector::from_column_slice(&grad))
            .iter()
            .copied()
            .collect()
    } else {
        vec![0.0; d]
    };
    let eps: f64 = prompt_weights
        .iter()
        .zip(&pols)
        .map(|(w, (p, v))| w * prompt_compatible_loss(p, v, &w_star))
        .sum();
    let q_min = prompt_weights
        .iter()
        .copied()
        .filter(|&w| w > 0.0)
        .fold(f64::INFINITY, f64::min);
    m.insert("nu".into(), env.min_source_prob());
    m.insert("r_min".into(), r_min);
    m.insert("r_max".into(), r_max);
    m.insert("J".into(), env.ref_log_ratio_bound());
    m.insert("sigma_min".into(), if lmax > 0.0 { min_pos } else { 0.0 });
    m.insert("q_min".into(), q_min);
    m.insert("eps_apx".into(), eps);
    if optimum.is_some() {
        m.insert("concentrability".into(), conc);
    }
    Ok(m)
}
