//! Invariant checks shared by the property tests and the acceptance suite.
//!
//! Each check takes one randomly generated case and returns a
//! `TestCaseError` describing the first violated property.

#![allow(dead_code)]

use dro_pref::divergence::{divergence, oracle_weights, worst_case_weights};
use dro_pref::linalg::{min_eigenvalue, pinv_psd};
use dro_pref::losses::{fisher_matrix, PromptPolicy};
use dro_pref::vecops::{norm, project_ball};
use dro_pref::{generate_env, DivergenceKind, DivergenceSpec, EnvShape, FeatureEnv, Sense};
use nalgebra::DMatrix;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

pub mod reference;

pub type Check = std::result::Result<(), TestCaseError>;

/// Cases per invariant.
pub const CASES: u32 = 256;

pub fn config() -> Config {
    Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    }
}

/// Runs `check` on `CASES` inputs drawn from `strategy` with a fixed seed.
pub fn run_property<S: Strategy>(
    strategy: S,
    check: impl Fn(S::Value) -> Check,
) -> std::result::Result<(), String> {
    let mut runner = TestRunner::new_with_rng(config(), proptest::test_runner::TestRng::deterministic_rng(
        proptest::test_runner::RngAlgorithm::ChaCha,
    ));
    runner.run(&strategy, check).map_err(|e| e.to_string())
}

pub fn kind() -> impl Strategy<Value = DivergenceKind> {
    prop_oneof![Just(DivergenceKind::Tv), Just(DivergenceKind::ChiSq)]
}

pub fn sense() -> impl Strategy<Value = Sense> {
    prop_oneof![Just(Sense::Max), Just(Sense::Min)]
}

pub fn rho() -> impl Strategy<Value = f64> {
    prop_oneof![Just(0.0), 0.0..2.0f64, Just(1e-6), Just(50.0)]
}

pub fn losses(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0..10.0f64, 1..=max_len)
}

pub fn small_env() -> impl Strategy<Value = FeatureEnv> {
    (any::<u64>(), 1..4usize, 2..6usize, 1..4usize, 1..6usize).prop_map(|(seed, nx, ny, dr, dp)| {
        generate_env(
            seed,
            EnvShape {
                num_prompts: nx,
                num_completions: ny,
                d_reward: dr,
                d_policy: dp,
                reward_radius: 1.0,
                policy_radius: 1.0,
            },
        )
        .expect("valid shape")
    })
}

/// An environment together with a policy parameter of matching dimension.
pub fn env_and_theta(scale: f64) -> impl Strategy<Value = (FeatureEnv, Vec<f64>)> {
    small_env().prop_flat_map(move |env| {
        let d = env.d_policy();
        (Just(env), prop::collection::vec(-scale..scale, d))
    })
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

pub fn simplex_feasibility((l, rho, kind, sense): (Vec<f64>, f64, DivergenceKind, Sense)) -> Check {
    let sol = worst_case_weights(&l, DivergenceSpec { kind, rho }, sense).map_err(fail)?;
    let n = l.len();
    prop_assert_eq!(sol.weights.len(), n);
    prop_assert!(sol.weights.iter().all(|&q| q >= 0.0 && q.is_finite()), "negative weight {:?}", sol.weights);
    let s: f64 = sol.weights.iter().sum();
    prop_assert!((s - 1.0).abs() <= 1e-12, "weights sum to {s}");
    let p = vec![1.0 / n as f64; n];
    let d = divergence(kind, &sol.weights, &p);
    prop_assert!(d <= rho * (1.0 + 1e-9) + 1e-12, "divergence {d} exceeds rho {rho}");
    let obj: f64 = sol.weights.iter().zip(&l).map(|(q, v)| q * v).sum();
    prop_assert!(close(obj, sol.objective, 1e-12), "objective {} vs Σqℓ {obj}", sol.objective);
    Ok(())
}

pub fn rho_monotonicity((l, r1, r2, kind): (Vec<f64>, f64, f64, DivergenceKind)) -> Check {
    let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
    let scale = 1e-10 * (1.0 + l.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    let max_lo = worst_case_weights(&l, DivergenceSpec { kind, rho: lo }, Sense::Max).map_err(fail)?;
    let max_hi = worst_case_weights(&l, DivergenceSpec { kind, rho: hi }, Sense::Max).map_err(fail)?;
    prop_assert!(max_lo.objective <= max_hi.objective + scale, "max: {} at {lo} > {} at {hi}", max_lo.objective, max_hi.objective);
    let min_lo = worst_case_weights(&l, DivergenceSpec { kind, rho: lo }, Sense::Min).map_err(fail)?;
    let min_hi = worst_case_weights(&l, DivergenceSpec { kind, rho: hi }, Sense::Min).map_err(fail)?;
    prop_assert!(min_lo.objective + scale >= min_hi.objective, "min: {} at {lo} < {} at {hi}", min_lo.objective, min_hi.objective);
    let mean = l.iter().sum::<f64>() / l.len() as f64;
    prop_assert!(min_lo.objective <= mean + scale && mean <= max_lo.objective + scale);
    Ok(())
}

/// `q*(a ℓ + b) = q*(ℓ)` for `a > 0`, and `q*(Pℓ) = P q*(ℓ)`.
pub fn equivariance(
    (l, rho, kind, sense, a, b, perm_seed): (Vec<f64>, f64, DivergenceKind, Sense, f64, f64, u64),
) -> Check {
    let spec = DivergenceSpec { kind, rho };
    let base = worst_case_weights(&l, spec, sense).map_err(fail)?;
    let lmax = l.iter().fold(0.0f64, |m, v| m.max(v.abs()));

    let moved: Vec<f64> = l.iter().map(|v| a * v + b).collect();
    let sol = worst_case_weights(&moved, spec, sense).map_err(fail)?;
    for (u, v) in base.weights.iter().zip(&sol.weights) {
        prop_assert!((u - v).abs() <= 1e-6, "weights changed under affine map: {:?} vs {:?}", base.weights, sol.weights);
    }
    let want = a * base.objective + b;
    prop_assert!((sol.objective - want).abs() <= 1e-8 * (1.0 + a * lmax + b.abs()), "objective {} vs {want}", sol.objective);

    let mut perm: Vec<usize> = (0..l.len()).collect();
    let mut state = perm_seed | 1;
    for i in (1..perm.len()).rev() {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        perm.swap(i, (state % (i as u64 + 1)) as usize);
    }
    let permuted: Vec<f64> = perm.iter().map(|&i| l[i]).collect();
    let sol = worst_case_weights(&permuted, spec, sense).map_err(fail)?;
    for (k, &i) in perm.iter().enumerate() {
        prop_assert!((sol.weights[k] - base.weights[i]).abs() <= 1e-6, "permutation changed weights");
    }
    prop_assert!((sol.objective - base.objective).abs() <= 1e-9 * (1.0 + lmax));
    Ok(())
}

/// Grid resolution used by the oracle comparisons; `1/RES` is divisible by 2, 3 and 4.
pub const GRID_RES: f64 = 1.0 / 120.0;

/// Exact solver versus the simplex grid oracle.
pub fn matches_grid_oracle((l, rho, kind): (Vec<f64>, f64, DivergenceKind)) -> Check {
    let spec = DivergenceSpec { kind, rho };
    let n = l.len() as f64;
    let lmax = l.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for sense in [Sense::Max, Sense::Min] {
        let exact = worst_case_weights(&l, spec, sense).map_err(fail)?;
        let grid = oracle_weights(&l, spec, sense, GRID_RES).map_err(fail)?;
        let dominated = match sense {
            Sense::Max => exact.objective >= grid.objective - 1e-9,
            Sense::Min => exact.objective <= grid.objective + 1e-9,
        };
        prop_assert!(dominated, "{:?}: exact {} worse than grid {}", sense, exact.objective, grid.objective);
        let gap = (exact.objective - grid.objective).abs();
        prop_assert!(gap <= GRID_RES * lmax * n, "{:?}: gap {gap} exceeds grid bound", sense);
    }
    Ok(())
}

pub fn grid_case(kind: DivergenceKind) -> impl Strategy<Value = (Vec<f64>, f64, DivergenceKind)> {
    (
        prop::collection::vec(-5.0..5.0f64, 2..=4),
        prop_oneof![Just(0.0), Just(0.1), Just(0.5), Just(1.0)],
        Just(kind),
    )
}

pub fn fisher_psd((env, theta): (FeatureEnv, Vec<f64>)) -> Check {
    for x in 0..env.num_prompts() {
        let f = fisher_matrix(&theta, &env, x);
        let sym = (&f - f.transpose()).abs().max();
        prop_assert!(sym <= 1e-14, "Fisher matrix not symmetric ({sym})");
        let lmin = min_eigenvalue(&f).map_err(fail)?;
        prop_assert!(lmin >= -1e-12 * (1.0 + f.trace()), "Fisher min eigenvalue {lmin}");
    }
    Ok(())
}

pub fn psd_matrix() -> impl Strategy<Value = DMatrix<f64>> {
    (1..7usize)
        .prop_flat_map(|d| (Just(d), 0..=d))
        .prop_flat_map(|(d, r)| (Just(d), Just(r), prop::collection::vec(-1.0..1.0f64, d * r)))
        .prop_map(|(d, r, b)| {
            let b = DMatrix::from_vec(d, r, b);
            &b * b.transpose()
        })
}

/// Penrose identities for the symmetric pseudo-inverse.
pub fn pinv_identities(a: DMatrix<f64>) -> Check {
    let p = pinv_psd(&a, 1e-10).map_err(fail)?;
    let na = a.norm().max(1e-300);
    let np = p.norm().max(1e-300);
    let tol = 1e-6;
    prop_assert!((&a * &p * &a - &a).norm() <= tol * na, "A A⁺ A ≠ A");
    prop_assert!((&p * &a * &p - &p).norm() <= tol * np, "A⁺ A A⁺ ≠ A⁺");
    let ap = &a * &p;
    prop_assert!((&ap - ap.transpose()).norm() <= tol * (1.0 + ap.norm()), "A A⁺ not symmetric");
    prop_assert!((&p - p.transpose()).norm() <= 1e-12 * (1.0 + np), "A⁺ not symmetric");
    Ok(())
}

pub fn projection_bounds((v, r): (Vec<f64>, f64)) -> Check {
    let mut p = v.clone();
    project_ball(&mut p, r);
    let n = norm(&p);
    prop_assert!(n <= r * (1.0 + 1e-12), "‖Πv‖ = {n} > {r}");
    if norm(&v) <= r {
        prop_assert_eq!(&p, &v);
    } else {
        prop_assert!((n - r).abs() <= 1e-12 * r, "projection should land on the sphere");
        let s = n / norm(&v);
        for (a, b) in p.iter().zip(&v) {
            prop_assert!((a - s * b).abs() <= 1e-12 * (1.0 + b.abs()), "projection is not radial");
        }
    }
    let mut twice = p.clone();
    project_ball(&mut twice, r);
    for (a, b) in twice.iter().zip(&p) {
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "projection not idempotent");
    }
    Ok(())
}

pub fn projection_case() -> impl Strategy<Value = (Vec<f64>, f64)> {
    (prop::collection::vec(-10.0..10.0f64, 1..8), 0.01..5.0f64)
}

pub fn softmax_normalization((env, theta): (FeatureEnv, Vec<f64>)) -> Check {
    for x in 0..env.num_prompts() {
        let pol = PromptPolicy::new(&theta, &env, x);
        let s: f64 = pol.probs.iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-12, "probabilities sum to {s}");
        prop_assert!(pol.probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
        prop_assert!(pol.log_probs.iter().all(|&l| l <= 0.0 && l.is_finite()));
    }
    Ok(())
}

pub fn score_mean_zero((env, theta): (FeatureEnv, Vec<f64>)) -> Check {
    for x in 0..env.num_prompts() {
        let pol = PromptPolicy::new(&theta, &env, x);
        let mut m = vec![0.0; env.d_policy()];
        let mut smax = 0.0f64;
        for (p, s) in pol.probs.iter().zip(&pol.scores) {
            for (mi, si) in m.iter_mut().zip(s) {
                *mi += p * si;
                smax = smax.max(si.abs());
            }
        }
        prop_assert!(norm(&m) <= 1e-12 * (1.0 + smax), "E[score] = {:?}", m);
    }
    Ok(())
}

fn fail(e: dro_pref::Error) -> TestCaseError {
    TestCaseError::fail(e.to_string())
}
