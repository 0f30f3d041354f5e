//! Plain uniform-weight trainers, written independently of the library's
//! robust loops, used to check that `ρ = 0` reproduces them exactly.

use dro_pref::linalg::pinv_psd;
use dro_pref::losses::{expected_score_times, pointwise_values, prompt_fisher, PromptPolicy};
use dro_pref::rng::{phase_rng, Phase};
use dro_pref::vecops::project_ball;
use dro_pref::{FeatureEnv, KlConfig, PreferenceExample};
use nalgebra::{DMatrix, DVector};
use rand::Rng as _;

/// One recorded step of a reference run.
pub struct Step {
    /// Iterate before the update.
    pub x: Vec<f64>,
    /// Mean minibatch loss (or value) at `x`.
    pub mean: f64,
}

/// Minibatch SGD with equal weights `1/n`, sampling with replacement from
/// the same random stream the trainers use.
pub fn uniform_sgd(
    init: &[f64],
    examples: &[PreferenceExample],
    batch: usize,
    iterations: usize,
    eta: f64,
    radius: f64,
    seed: u64,
    loss_and_grad: impl Fn(&[f64], &PreferenceExample) -> (f64, Vec<f64>),
) -> (Vec<Step>, Vec<f64>) {
    let mut rng = phase_rng(seed, Phase::Minibatch);
    let mut x = init.to_vec();
    let mut steps = Vec::new();
    let w = 1.0 / batch as f64;
    for _ in 0..iterations {
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..examples.len())).collect();
        let mut g = vec![0.0; x.len()];
        let mut total = 0.0;
        for &i in &idx {
            let (l, gi) = loss_and_grad(&x, &examples[i]);
            total += l;
            for (a, b) in g.iter_mut().zip(&gi) {
                *a += w * b;
            }
        }
        steps.push(Step {
            x: x.clone(),
            mean: total / batch as f64,
        });
        for (a, b) in x.iter_mut().zip(&g) {
            *a -= eta * b;
        }
        project_ball(&mut x, radius);
    }
    (steps, x)
}

/// KL-regularized natural policy gradient with equal prompt weights.
#[allow(clippy::too_many_arguments)]
pub fn uniform_npg(
    env: &FeatureEnv,
    prompts: &[usize],
    omega: &[f64],
    kl: KlConfig,
    batch: usize,
    iterations: usize,
    eta: f64,
    radius: f64,
    seed: u64,
) -> (Vec<Step>, Vec<f64>) {
    let d = env.d_policy();
    let mut rng = phase_rng(seed, Phase::Minibatch);
    let mut theta = env.ref_policy_params().to_vec();
    let mut steps = Vec::new();
    let w = 1.0 / batch as f64;
    for _ in 0..iterations {
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..prompts.len())).collect();
        let mut g = vec![0.0; d];
        let mut fisher = DMatrix::<f64>::zeros(d, d);
        let mut total = 0.0;
        for &i in &idx {
            let x = prompts[i];
            let pol = PromptPolicy::new(&theta, env, x);
            let v = pointwise_values(&pol, env, kl, omega, x);
            total += pol.probs.iter().zip(&v).map(|(p, u)| p * u).sum::<f64>();
            for (a, b) in g.iter_mut().zip(expected_score_times(&pol, &v)) {
                *a += w * b;
            }
            fisher += prompt_fisher(&pol, d) * w;
        }
        steps.push(Step {
            x: theta.clone(),
            mean: total / batch as f64,
        });
        let dir = pinv_psd(&fisher, 1e-10).expect("symmetric") * DVector::from_column_slice(&g);
        for (a, b) in theta.iter_mut().zip(dir.iter()) {
            *a += eta * b;
        }
        project_ball(&mut theta, radius);
    }
    (steps, theta)
}
