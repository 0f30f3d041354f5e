//! Finite synthetic preference environment.
//!
//! A [`FeatureEnv`] fixes a prompt set `X`, a completion set `Y`, unit-norm
//! reward and policy feature maps over `X × Y`, a ground-truth linear reward
//! `ω*`, a source prompt distribution and a log-linear reference policy.
//! [`sample_dataset`] draws Bradley–Terry labelled comparisons from it.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use rand_distr::{Exp1, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::bt_preference_prob;
use crate::rng::{phase_rng, Phase, Rng};
use crate::vecops::{dot, logsumexp, norm};

/// Slack allowed on the unit-norm feature bound and simplex sums.
pub const NORM_SLACK: f64 = 1e-12;

/// Each prompt probability is floored at `SOURCE_FLOOR / |X|` before
/// renormalizing, so that `min_x D_src(x)` stays bounded away from zero.
pub const SOURCE_FLOOR: f64 = 0.01;

/// Raw, unvalidated parts of an environment. Convert with
/// [`FeatureEnv::from_parts`].
#[derive(Debug, Clone, PartialEq)]
pub struct EnvParts {
    pub num_prompts: usize,
    pub num_completions: usize,
    pub d_reward: usize,
    pub d_policy: usize,
    /// Row-major `[x][y][k]`, length `num_prompts * num_completions * d_reward`.
    pub reward_features: Vec<f64>,
    /// Row-major `[x][y][k]`, length `num_prompts * num_completions * d_policy`.
    pub policy_features: Vec<f64>,
    pub true_reward_params: Vec<f64>,
    pub source_dist: Vec<f64>,
    pub ref_policy_params: Vec<f64>,
    /// Radius `F` of the reward parameter ball.
    pub reward_radius: f64,
    /// Radius `B` of the policy parameter ball.
    pub policy_radius: f64,
}

/// A validated finite prompt/completion environment.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureEnv {
    parts: EnvParts,
}

impl FeatureEnv {
    pub fn from_parts(parts: EnvParts) -> Result<Self> {
        validate(&parts)?;
        Ok(Self { parts })
    }

    pub fn parts(&self) -> &EnvParts {
        &self.parts
    }

    pub fn into_parts(self) -> EnvParts {
        self.parts
    }

    pub fn num_prompts(&self) -> usize {
        self.parts.num_prompts
    }

    pub fn num_completions(&self) -> usize {
        self.parts.num_completions
    }

    pub fn d_reward(&self) -> usize {
        self.parts.d_reward
    }

    pub fn d_policy(&self) -> usize {
        self.parts.d_policy
    }

    pub fn reward_radius(&self) -> f64 {
        self.parts.reward_radius
    }

    pub fn policy_radius(&self) -> f64 {
        self.parts.policy_radius
    }

    pub fn source_dist(&self) -> &[f64] {
        &self.parts.source_dist
    }

    pub fn true_reward_params(&self) -> &[f64] {
        &self.parts.true_reward_params
    }

    pub fn ref_policy_params(&self) -> &[f64] {
        &self.parts.ref_policy_params
    }

    pub fn reward_feature(&self, x: usize, y: usize) -> &[f64] {
        let d = self.parts.d_reward;
        let start = (x * self.parts.num_completions + y) * d;
        &self.parts.reward_features[start..start + d]
    }

    pub fn policy_feature(&self, x: usize, y: usize) -> &[f64] {
        let d = self.parts.d_policy;
        let start = (x * self.parts.num_completions + y) * d;
        &self.parts.policy_features[start..start + d]
    }

    /// Ground-truth reward `r*(x, y) = ⟨ω*, reward_features(x, y)⟩`.
    pub fn true_reward(&self, x: usize, y: usize) -> f64 {
        dot(&self.parts.true_reward_params, self.reward_feature(x, y))
    }

    /// `log π_ref(y|x)` for every completion of prompt `x`.
    pub fn ref_log_probs(&self, x: usize) -> Vec<f64> {
        log_softmax_policy(self, &self.parts.ref_policy_params, x)
    }

    /// `J = max_{x, y⁺, y⁻} |log π_ref(y⁺|x) / π_ref(y⁻|x)|`.
    pub fn ref_log_ratio_bound(&self) -> f64 {
        (0..self.num_prompts())
            .map(|x| {
                let lp = self.ref_log_probs(x);
                let hi = lp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lo = lp.iter().copied().fold(f64::INFINITY, f64::min);
                hi - lo
            })
            .fold(0.0, f64::max)
    }

    /// `ν = min_x D_src(x)`.
    pub fn min_source_prob(&self) -> f64 {
        self.parts
            .source_dist
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// Content hash over dimensions and every stored float, hex encoded.
    pub fn digest(&self) -> String {
        let p = &self.parts;
        let mut h = Sha256::new();
        h.update(b"dro-pref/env/v1");
        for dim in [p.num_prompts, p.num_completions, p.d_reward, p.d_policy] {
            h.update((dim as u64).to_le_bytes());
        }
        for block in [
            &p.reward_features,
            &p.policy_features,
            &p.true_reward_params,
            &p.source_dist,
            &p.ref_policy_params,
        ] {
            h.update((block.len() as u64).to_le_bytes());
            for v in block.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.update(p.reward_radius.to_bits().to_le_bytes());
        h.update(p.policy_radius.to_bits().to_le_bytes());
        hex::encode(h.finalize())
    }
}

pub(crate) fn log_softmax_policy(env: &FeatureEnv, theta: &[f64], x: usize) -> Vec<f64> {
    let logits: Vec<f64> = (0..env.num_completions())
        .map(|y| dot(theta, env.policy_feature(x, y)))
        .collect();
    let lse = logsumexp(&logits);
    logits.into_iter().map(|l| l - lse).collect()
}

fn validate(p: &EnvParts) -> Result<()> {
    for (name, v) in [
        ("num_prompts", p.num_prompts),
        ("num_completions", p.num_completions),
        ("d_reward", p.d_reward),
        ("d_policy", p.d_policy),
    ] {
        if v == 0 {
            return Err(Error::InvalidDimension(format!("{name} must be at least 1")));
        }
    }
    if !(p.reward_radius > 0.0 && p.reward_radius.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "reward radius F must be positive, got {}",
            p.reward_radius
        )));
    }
    if !(p.policy_radius > 0.0 && p.policy_radius.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "policy radius B must be positive, got {}",
            p.policy_radius
        )));
    }
    let cells = p.num_prompts * p.num_completions;
    check_len("reward_features", p.reward_features.len(), cells * p.d_reward)?;
    check_len("policy_features", p.policy_features.len(), cells * p.d_policy)?;
    check_len("true_reward_params", p.true_reward_params.len(), p.d_reward)?;
    check_len("ref_policy_params", p.ref_policy_params.len(), p.d_policy)?;
    check_len("source_dist", p.source_dist.len(), p.num_prompts)?;

    let all = p
        .reward_features
        .iter()
        .chain(&p.policy_features)
        .chain(&p.true_reward_params)
        .chain(&p.ref_policy_params)
        .chain(&p.source_dist);
    if all.into_iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("environment contains non-finite values".into()));
    }
    for (name, feats, d) in [
        ("reward", &p.reward_features, p.d_reward),
        ("policy", &p.policy_features, p.d_policy),
    ] {
        for (cell, f) in feats.chunks(d).enumerate() {
            let n = norm(f);
            if n > 1.0 + NORM_SLACK {
                return Err(Error::InvalidArgument(format!(
                    "{name} feature of cell {cell} has norm {n} > 1"
                )));
            }
        }
    }
    if p.source_dist.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidArgument("source_dist has negative entries".into()));
    }
    let total: f64 = p.source_dist.iter().sum();
    if (total - 1.0).abs() > NORM_SLACK {
        return Err(Error::InvalidArgument(format!("source_dist sums to {total}, not 1")));
    }
    if norm(&p.true_reward_params) > p.reward_radius + NORM_SLACK {
        return Err(Error::InvalidArgument("‖ω*‖ exceeds the reward radius F".into()));
    }
    if norm(&p.ref_policy_params) > p.policy_radius + NORM_SLACK {
        return Err(Error::InvalidArgument("‖θ_ref‖ exceeds the policy radius B".into()));
    }
    Ok(())
}

fn check_len(name: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::InvalidDimension(format!(
            "{name} has length {got}, expected {want}"
        )));
    }
    Ok(())
}

/// Sizes and radii for [`generate_env`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvShape {
    pub num_prompts: usize,
    pub num_completions: usize,
    pub d_reward: usize,
    pub d_policy: usize,
    pub reward_radius: f64,
    pub policy_radius: f64,
}

/// Draws a random environment. Features are i.i.d. standard normal vectors
/// rescaled to unit norm; `ω*` is uniform in the radius-`F` ball; `θ_ref = 0`;
/// the source distribution is a floored symmetric Dirichlet(1) draw.
pub fn generate_env(seed: u64, shape: EnvShape) -> Result<FeatureEnv> {
    if shape.num_completions < 2 {
        return Err(Error::InvalidDimension(
            "num_completions must be at least 2".into(),
        ));
    }
    for (name, v) in [
        ("num_prompts", shape.num_prompts),
        ("d_reward", shape.d_reward),
        ("d_policy", shape.d_policy),
    ] {
        if v == 0 {
            return Err(Error::InvalidDimension(format!("{name} must be at least 1")));
        }
    }
    if !(shape.reward_radius > 0.0) || !(shape.policy_radius > 0.0) {
        return Err(Error::InvalidArgument("radii F and B must be positive".into()));
    }

    let mut rng = phase_rng(seed, Phase::Environment);
    let cells = shape.num_prompts * shape.num_completions;
    let reward_features = unit_vectors(&mut rng, cells, shape.d_reward);
    let policy_features = unit_vectors(&mut rng, cells, shape.d_policy);

    let dir = unit_vectors(&mut rng, 1, shape.d_reward);
    let u: f64 = rng.random();
    let radius = shape.reward_radius * u.powf(1.0 / shape.d_reward as f64);
    let true_reward_params: Vec<f64> = dir.iter().map(|v| v * radius).collect();

    let raw: Vec<f64> = (0..shape.num_prompts)
        .map(|_| rng.sample::<f64, _>(Exp1))
        .collect();
    let source_dist = floor_and_normalize(&raw);

    FeatureEnv::from_parts(EnvParts {
        num_prompts: shape.num_prompts,
        num_completions: shape.num_completions,
        d_reward: shape.d_reward,
        d_policy: shape.d_policy,
        reward_features,
        policy_features,
        true_reward_params,
        source_dist,
        ref_policy_params: vec![0.0; shape.d_policy],
        reward_radius: shape.reward_radius,
        policy_radius: shape.policy_radius,
    })
}

fn unit_vectors(rng: &mut Rng, count: usize, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(count * d);
    let mut buf = vec![0.0; d];
    for _ in 0..count {
        loop {
            for b in buf.iter_mut() {
                *b = rng.sample(StandardNormal);
            }
            let n = norm(&buf);
            if n > 1e-12 {
                out.extend(buf.iter().map(|v| v / n));
                break;
            }
        }
    }
    out
}

fn floor_and_normalize(raw: &[f64]) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    let floor = SOURCE_FLOOR / raw.len() as f64;
    let floored: Vec<f64> = raw.iter().map(|v| (v / total).max(floor)).collect();
    let z: f64 = floored.iter().sum();
    floored.into_iter().map(|v| v / z).collect()
}

/// One labelled comparison `(x, y⁺, y⁻)` with `y⁺ ≻ y⁻`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PreferenceExample {
    pub prompt: usize,
    pub y_plus: usize,
    pub y_minus: usize,
}

impl PreferenceExample {
    pub fn check(&self, env: &FeatureEnv) -> Result<()> {
        if self.prompt >= env.num_prompts()
            || self.y_plus >= env.num_completions()
            || self.y_minus >= env.num_completions()
        {
            return Err(Error::InvalidArgument(format!(
                "example {self:?} indexes outside the environment"
            )));
        }
        if self.y_plus == self.y_minus {
            return Err(Error::InvalidArgument(format!(
                "example {self:?} compares a completion with itself"
            )));
        }
        Ok(())
    }
}

/// An ordered list of comparisons bound to the environment that generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceDataset {
    examples: Vec<PreferenceExample>,
    env_digest: String,
    seed: u64,
}

impl PreferenceDataset {
    pub fn new(examples: Vec<PreferenceExample>, env_digest: String, seed: u64) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::EmptyInput("preference dataset"));
        }
        Ok(Self {
            examples,
            env_digest,
            seed,
        })
    }

    /// Builds a dataset for `env`, checking every example against it.
    pub fn for_env(env: &FeatureEnv, examples: Vec<PreferenceExample>, seed: u64) -> Result<Self> {
        for ex in &examples {
            ex.check(env)?;
        }
        Self::new(examples, env.digest(), seed)
    }

    pub fn examples(&self) -> &[PreferenceExample] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn env_digest(&self) -> &str {
        &self.env_digest
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Fails with [`Error::DigestMismatch`] unless this dataset was built for `env`.
    pub fn check_env(&self, env: &FeatureEnv) -> Result<()> {
        let expected = env.digest();
        if expected != self.env_digest {
            return Err(Error::DigestMismatch {
                expected,
                found: self.env_digest.clone(),
            });
        }
        for ex in &self.examples {
            ex.check(env)?;
        }
        Ok(())
    }
}

/// Draws `n_examples` Bradley–Terry comparisons: `x ~ D_src`, an unordered
/// pair of distinct completions uniformly at random, and the label with
/// probability `σ(r*(x, y_a) − r*(x, y_b))`.
pub fn sample_dataset(env: &FeatureEnv, n_examples: usize, seed: u64) -> Result<PreferenceDataset> {
    if n_examples == 0 {
        return Err(Error::InvalidArgument("n_examples must be at least 1".into()));
    }
    let ny = env.num_completions();
    if ny < 2 {
        return Err(Error::InvalidDimension(
            "sampling comparisons needs at least 2 completions".into(),
        ));
    }
    let prompts = WeightedIndex::new(env.source_dist())
        .map_err(|e| Error::InvalidArgument(format!("source_dist: {e}")))?;
    let mut rng = phase_rng(seed, Phase::Dataset);
    let mut examples = Vec::with_capacity(n_examples);
    for _ in 0..n_examples {
        let x = prompts.sample(&mut rng);
        let a = rng.random_range(0..ny);
        let mut b = rng.random_range(0..ny - 1);
        if b >= a {
            b += 1;
        }
        let p_a = bt_preference_prob(env.true_reward(x, a), env.true_reward(x, b));
        let u: f64 = rng.random();
        let (y_plus, y_minus) = if u < p_a { (a, b) } else { (b, a) };
        examples.push(PreferenceExample {
            prompt: x,
            y_plus,
            y_minus,
        });
    }
    PreferenceDataset::new(examples, env.digest(), seed)
}
