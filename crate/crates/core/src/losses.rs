//! Loss and value functions with exact gradients.
//!
//! Everything here is an exact expectation over the finite completion set;
//! sampling lives in the trainers. The reward model is linear,
//! `r_ω(x, y) = ⟨ω, φ(x, y)⟩`, and the policy is log-linear,
//! `π_θ(y|x) ∝ exp⟨θ, ψ(x, y)⟩`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::env::{log_softmax_policy, FeatureEnv, PreferenceExample, NORM_SLACK};
use crate::error::{Error, Result};
use crate::vecops::{axpy, dot, norm, sub};

/// `σ(z) = 1 / (1 + e^{−z})`, branching on sign for stability.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `−log σ(z) = softplus(−z)`.
pub fn neg_log_sigmoid(z: f64) -> f64 {
    softplus(-z)
}

/// Bradley–Terry probability that the first completion is preferred.
pub fn bt_preference_prob(r_plus: f64, r_minus: f64) -> f64 {
    sigmoid(r_plus - r_minus)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardParams {
    pub omega: Vec<f64>,
    pub radius: f64,
}

impl RewardParams {
    pub fn new(omega: Vec<f64>, radius: f64) -> Result<Self> {
        check_ball("reward parameters", &omega, radius)?;
        Ok(Self { omega, radius })
    }

    pub fn zeros(d: usize, radius: f64) -> Self {
        Self {
            omega: vec![0.0; d],
            radius,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub theta: Vec<f64>,
    pub radius: f64,
}

impl PolicyParams {
    pub fn new(theta: Vec<f64>, radius: f64) -> Result<Self> {
        check_ball("policy parameters", &theta, radius)?;
        Ok(Self { theta, radius })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlConfig {
    pub beta: f64,
}

impl KlConfig {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "beta must be a positive finite number, got {beta}"
            )));
        }
        Ok(Self { beta })
    }
}

fn check_ball(what: &str, v: &[f64], radius: f64) -> Result<()> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "{what}: radius must be positive, got {radius}"
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument(format!("{what}: non-finite entry")));
    }
    let n = norm(v);
    if n > radius + NORM_SLACK {
        return Err(Error::InvalidArgument(format!(
            "{what}: norm {n} exceeds radius {radius}"
        )));
    }
    Ok(())
}

fn reward_diff(env: &FeatureEnv, ex: &PreferenceExample) -> Vec<f64> {
    sub(
        env.reward_feature(ex.prompt, ex.y_plus),
        env.reward_feature(ex.prompt, ex.y_minus),
    )
}

fn policy_diff(env: &FeatureEnv, ex: &PreferenceExample) -> Vec<f64> {
    sub(
        env.policy_feature(ex.prompt, ex.y_plus),
        env.policy_feature(ex.prompt, ex.y_minus),
    )
}

/// `r̂(x, y) = ⟨ω, φ(x, y)⟩`.
pub fn reward_value(omega: &[f64], env: &FeatureEnv, x: usize, y: usize) -> f64 {
    dot(omega, env.reward_feature(x, y))
}

/// `−log σ(⟨ω, φ(x, y⁺) − φ(x, y⁻)⟩)`.
pub fn reward_loss(omega: &[f64], env: &FeatureEnv, ex: &PreferenceExample) -> f64 {
    let z = dot(omega, &reward_diff(env, ex));
    neg_log_sigmoid(z)
}

/// `−(1 − σ(z)) Δφ`.
pub fn reward_loss_grad(omega: &[f64], env: &FeatureEnv, ex: &PreferenceExample) -> Vec<f64> {
    let dphi = reward_diff(env, ex);
    let z = dot(omega, &dphi);
    let c = -sigmoid(-z);
    dphi.into_iter().map(|v| c * v).collect()
}

/// Loss and gradient in one pass.
pub fn reward_loss_and_grad(
    omega: &[f64],
    env: &FeatureEnv,
    ex: &PreferenceExample,
) -> (f64, Vec<f64>) {
    let dphi = reward_diff(env, ex);
    let z = dot(omega, &dphi);
    let c = -sigmoid(-z);
    (neg_log_sigmoid(z), dphi.into_iter().map(|v| c * v).collect())
}

/// DPO logit `z = β(θ − θ_ref)ᵀΔψ`. For a log-linear reference the
/// reference log-ratio term is exactly `−β θ_refᵀΔψ`.
pub fn dpo_logit(theta: &[f64], env: &FeatureEnv, kl: KlConfig, ex: &PreferenceExample) -> f64 {
    let dpsi = policy_diff(env, ex);
    kl.beta * (dot(theta, &dpsi) - dot(env.ref_policy_params(), &dpsi))
}

pub fn dpo_loss(theta: &[f64], env: &FeatureEnv, kl: KlConfig, ex: &PreferenceExample) -> f64 {
    neg_log_sigmoid(dpo_logit(theta, env, kl, ex))
}

/// `−(1 − σ(z)) β Δψ`.
pub fn dpo_loss_grad(theta: &[f64], env: &FeatureEnv, kl: KlConfig, ex: &PreferenceExample) -> Vec<f64> {
    dpo_loss_and_grad(theta, env, kl, ex).1
}

pub fn dpo_loss_and_grad(
    theta: &[f64],
    env: &FeatureEnv,
    kl: KlConfig,
    ex: &PreferenceExample,
) -> (f64, Vec<f64>) {
    let dpsi = policy_diff(env, ex);
    let z = kl.beta * (dot(theta, &dpsi) - dot(env.ref_policy_params(), &dpsi));
    let c = -sigmoid(-z) * kl.beta;
    (neg_log_sigmoid(z), dpsi.into_iter().map(|v| c * v).collect())
}

/// `log π_θ(y|x)` for a single completion.
pub fn log_policy(theta: &[f64], env: &FeatureEnv, x: usize, y: usize) -> f64 {
    log_softmax_policy(env, theta, x)[y]
}

/// `log π_θ(·|x)` for every completion.
pub fn log_policy_all(theta: &[f64], env: &FeatureEnv, x: usize) -> Vec<f64> {
    log_softmax_policy(env, theta, x)
}

pub fn policy_probs(theta: &[f64], env: &FeatureEnv, x: usize) -> Vec<f64> {
    log_softmax_policy(env, theta, x)
        .into_iter()
        .map(f64::exp)
        .collect()
}

/// Per-prompt policy quantities: log-probabilities, probabilities, scores.
#[derive(Debug, Clone)]
pub struct PromptPolicy {
    pub log_probs: Vec<f64>,
    pub probs: Vec<f64>,
    /// `∇_θ log π_θ(y|x) = ψ(x, y) − E_{π_θ}[ψ(x, ·)]`, one row per completion.
    pub scores: Vec<Vec<f64>>,
}

impl PromptPolicy {
    pub fn new(theta: &[f64], env: &FeatureEnv, x: usize) -> Self {
        let log_probs = log_softmax_policy(env, theta, x);
        let probs: Vec<f64> = log_probs.iter().map(|l| l.exp()).collect();
        let mut mean = vec![0.0; env.d_policy()];
        for (y, &p) in probs.iter().enumerate() {
            axpy(p, env.policy_feature(x, y), &mut mean);
        }
        let scores = (0..probs.len())
            .map(|y| sub(env.policy_feature(x, y), &mean))
            .collect();
        Self {
            log_probs,
            probs,
            scores,
        }
    }
}

pub fn policy_score(theta: &[f64], env: &FeatureEnv, x: usize, y: usize) -> Vec<f64> {
    PromptPolicy::new(theta, env, x).scores.swap_remove(y)
}

/// `v(θ; x, y) = r̂(x, y) − β log(π_θ(y|x) / π_ref(y|x))` for every `y`.
pub fn pointwise_values(
    pol: &PromptPolicy,
    env: &FeatureEnv,
    kl: KlConfig,
    omega: &[f64],
    x: usize,
) -> Vec<f64> {
    let ref_lp = env.ref_log_probs(x);
    (0..pol.probs.len())
        .map(|y| reward_value(omega, env, x, y) - kl.beta * (pol.log_probs[y] - ref_lp[y]))
        .collect()
}

/// `v(θ; x) = E_{y∼π_θ}[v(θ; x, y)]`.
pub fn kl_value(theta: &[f64], env: &FeatureEnv, kl: KlConfig, omega: &[f64], x: usize) -> f64 {
    let pol = PromptPolicy::new(theta, env, x);
    let v = pointwise_values(&pol, env, kl, omega, x);
    dot(&pol.probs, &v)
}

/// `KL(π_θ(·|x) ‖ π_ref(·|x))`.
pub fn kl_divergence(theta: &[f64], env: &FeatureEnv, x: usize) -> f64 {
    let lp = log_softmax_policy(env, theta, x);
    let ref_lp = env.ref_log_probs(x);
    lp.iter()
        .zip(&ref_lp)
        .map(|(l, r)| l.exp() * (l - r))
        .sum()
}

/// `E_{y∼π_θ}[∇log π_θ(y|x) · v(θ; x, y)]`.
pub fn kl_value_grad(
    theta: &[f64],
    env: &FeatureEnv,
    kl: KlConfig,
    omega: &[f64],
    x: usize,
) -> Vec<f64> {
    let pol = PromptPolicy::new(theta, env, x);
    let v = pointwise_values(&pol, env, kl, omega, x);
    expected_score_times(&pol, &v)
}

/// `E_{π}[s_y · v_y]` for a prepared prompt policy.
pub fn expected_score_times(pol: &PromptPolicy, v: &[f64]) -> Vec<f64> {
    let d = pol.scores.first().map_or(0, Vec::len);
    let mut g = vec![0.0; d];
    for ((p, s), vy) in pol.probs.iter().zip(&pol.scores).zip(v) {
        axpy(p * vy, s, &mut g);
    }
    g
}

/// `F(θ|x) = E_{π_θ}[s sᵀ]` for a prepared prompt policy.
pub fn prompt_fisher(pol: &PromptPolicy, d: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(d, d);
    for (p, s) in pol.probs.iter().zip(&pol.scores) {
        for i in 0..d {
            let a = p * s[i];
            for j in 0..d {
                m[(i, j)] += a * s[j];
            }
        }
    }
    m
}

pub fn fisher_matrix(theta: &[f64], env: &FeatureEnv, x: usize) -> DMatrix<f64> {
    prompt_fisher(&PromptPolicy::new(theta, env, x), env.d_policy())
}

/// `G = Σ_i q_i F(θ|x_i)`.
pub fn weighted_fisher(theta: &[f64], env: &FeatureEnv, prompts: &[usize], q: &[f64]) -> Result<DMatrix<f64>> {
    if prompts.len() != q.len() {
        return Err(Error::InvalidDimension(format!(
            "{} prompts but {} weights",
            prompts.len(),
            q.len()
        )));
    }
    let d = env.d_policy();
    let mut g = DMatrix::zeros(d, d);
    for (&x, &qi) in prompts.iter().zip(q) {
        if qi != 0.0 {
            g += fisher_matrix(theta, env, x) * qi;
        }
    }
    Ok(g)
}

/// `L(w) = Σ_i q_i E_{π_θ(·|x_i)}[(v(θ; x_i, y) − wᵀ∇log π_θ(y|x_i))²]`.
#[allow(clippy::too_many_arguments)]
pub fn compatible_loss(
    w: &[f64],
    theta: &[f64],
    env: &FeatureEnv,
    prompts: &[usize],
    q: &[f64],
    kl: KlConfig,
    omega: &[f64],
) -> Result<f64> {
    if prompts.len() != q.len() {
        return Err(Error::InvalidDimension(format!(
            "{} prompts but {} weights",
            prompts.len(),
            q.len()
        )));
    }
    let mut total = 0.0;
    for (&x, &qi) in prompts.iter().zip(q) {
        let pol = PromptPolicy::new(theta, env, x);
        let v = pointwise_values(&pol, env, kl, omega, x);
        total += qi * prompt_compatible_loss(&pol, &v, w);
    }
    Ok(total)
}

/// Per-prompt term of [`compatible_loss`].
pub fn prompt_compatible_loss(pol: &PromptPolicy, v: &[f64], w: &[f64]) -> f64 {
    pol.probs
        .iter()
        .zip(&pol.scores)
        .zip(v)
        .map(|((p, s), vy)| {
            let r = vy - dot(w, s);
            p * r * r
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_env, EnvShape};
    use crate::rng::{phase_rng, Phase};
    use rand::Rng as _;

    fn env() -> FeatureEnv {
        generate_env(
            11,
            EnvShape {
                num_prompts: 4,
                num_completions: 5,
                d_reward: 3,
                d_policy: 3,
                reward_radius: 2.0,
                policy_radius: 2.0,
            },
        )
        .unwrap()
    }

    fn ex() -> PreferenceExample {
        PreferenceExample {
            prompt: 1,
            y_plus: 0,
            y_minus: 3,
        }
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(1.0) - 0.731_058_578_630_004_9).abs() < 1e-15);
        for z in [0.1, 5.0, 50.0] {
            assert!((sigmoid(-z) - (1.0 - sigmoid(z))).abs() < 1e-15);
        }
        assert!(sigmoid(-700.0) > 0.0 && sigmoid(700.0) <= 1.0);
        assert!((bt_preference_prob(10.0, 0.0) - 0.999_954_602_131_297_6).abs() < 1e-15);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert!((neg_log_sigmoid(2.0) - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-15);
    }

    #[test]
    fn reward_loss_at_zero() {
        let e = env();
        let l = reward_loss(&[0.0; 3], &e, &ex());
        assert!((l - 2f64.ln()).abs() < 1e-15);
        let g = reward_loss_grad(&[0.0; 3], &e, &ex());
        let dphi = reward_diff(&e, &ex());
        for (a, b) in g.iter().zip(&dphi) {
            assert!((a + 0.5 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn policy_is_normalized_and_scores_are_centered() {
        let e = env();
        let theta = [0.7, -1.1, 0.4];
        for x in 0..e.num_prompts() {
            let pol = PromptPolicy::new(&theta, &e, x);
            let s: f64 = pol.probs.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            let m = expected_score_times(&pol, &vec![1.0; pol.probs.len()]);
            assert!(norm(&m) < 1e-10);
            for sc in &pol.scores {
                assert!(norm(sc) <= 2.0 + 1e-12);
            }
        }
    }

    #[test]
    fn kl_value_identity() {
        let e = env();
        let kl = KlConfig::new(0.3).unwrap();
        let theta = [0.2, 0.5, -0.9];
        let omega = [1.0, -0.3, 0.2];
        let x = 2;
        let v = kl_value(&theta, &e, kl, &omega, x);
        let probs = policy_probs(&theta, &e, x);
        let er: f64 = (0..5).map(|y| probs[y] * reward_value(&omega, &e, x, y)).sum();
        assert!((v + 0.3 * kl_divergence(&theta, &e, x) - er).abs() < 1e-12);
        // at the reference, KL vanishes
        let v0 = kl_value(&[0.0; 3], &e, kl, &omega, x);
        let er0: f64 = (0..5).map(|y| 0.2 * reward_value(&omega, &e, x, y)).sum();
        assert!((v0 - er0).abs() < 1e-12);
    }

    fn fd_check(f: &dyn Fn(&[f64]) -> f64, g: &[f64], at: &[f64]) {
        let h = 1e-5;
        for k in 0..at.len() {
            let mut a = at.to_vec();
            let mut b = at.to_vec();
            a[k] += h;
            b[k] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            let scale = g[k].abs().max(fd.abs()).max(1e-3);
            assert!(
                (fd - g[k]).abs() / scale < 1e-5,
                "component {k}: analytic {} vs fd {fd}",
                g[k]
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let e = env();
        let kl = KlConfig::new(0.5).unwrap();
        let mut rng = phase_rng(5, Phase::OracleStarts);
        for _ in 0..50 {
            let p: Vec<f64> = (0..3).map(|_| rng.random_range(-1.5..1.5)).collect();
            let omega: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = rng.random_range(0..4);
            let a = rng.random_range(0..5);
            let b = (a + 1 + rng.random_range(0..4)) % 5;
            let ex = PreferenceExample {
                prompt: x,
                y_plus: a,
                y_minus: b,
            };
            fd_check(&|w| reward_loss(w, &e, &ex), &reward_loss_grad(&p, &e, &ex), &p);
            fd_check(&|t| dpo_loss(t, &e, kl, &ex), &dpo_loss_grad(&p, &e, kl, &ex), &p);
            fd_check(
                &|t| kl_value(t, &e, kl, &omega, x),
                &kl_value_grad(&p, &e, kl, &omega, x),
                &p,
            );
        }
    }

    #[test]
    fn two_outcome_fisher_closed_form() {
        let e = generate_env(
            3,
            EnvShape {
                num_prompts: 1,
                num_completions: 2,
                d_reward: 2,
                d_policy: 2,
                reward_radius: 1.0,
                policy_radius: 1.0,
            },
        )
        .unwrap();
        let theta = [0.4, -0.8];
        let probs = policy_probs(&theta, &e, 0);
        let dpsi = sub(e.policy_feature(0, 0), e.policy_feature(0, 1));
        let f = fisher_matrix(&theta, &e, 0);
        let c = probs[0] * probs[1];
        for i in 0..2 {
            for j in 0..2 {
                assert!((f[(i, j)] - c * dpsi[i] * dpsi[j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn dpo_at_reference_is_ln2() {
        let e = env();
        let kl = KlConfig::new(0.7).unwrap();
        assert!((dpo_loss(&[0.0; 3], &e, kl, &ex()) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn params_validate_radius() {
        assert!(RewardParams::new(vec![3.0, 4.0], 5.0).is_ok());
        assert!(RewardParams::new(vec![3.0, 4.0], 4.9).is_err());
        assert!(PolicyParams::new(vec![f64::NAN], 1.0).is_err());
        assert!(KlConfig::new(0.0).is_err());
    }
}
