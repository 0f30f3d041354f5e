//! Acceptance suite: one line per criterion, `PASS` or `FAIL`, followed by
//! the measured quantities. Runs as a plain binary (no libtest harness) so
//! the summary is always printed; exits non-zero if any criterion fails.
//!
//! Criteria run concurrently on scoped threads; each is deterministic.

mod common;

use std::time::{Duration, Instant};

use common::reference::{uniform_npg, uniform_sgd};
use common::*;
use dro_pref::divergence::{oracle_weights, worst_case_weights};
use dro_pref::eval::{
    bias_bound, bias_check, measure_constants, robust_dpo_objective, robust_policy_value, robust_reward_objective,
    suboptimality_bound,
};
use dro_pref::losses::{
    dpo_loss, dpo_loss_and_grad, dpo_loss_grad, kl_value, kl_value_grad, reward_loss, reward_loss_and_grad,
    reward_loss_grad,
};
use dro_pref::oracle::{oracle_optimum_dpo, oracle_optimum_policy, oracle_optimum_reward};
use dro_pref::rng::{phase_rng, Phase};
use dro_pref::vecops::{max_abs_diff, norm};
use dro_pref::*;
use rand::Rng as _;

struct Outcome {
    id: u32,
    title: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(id: u32, title: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { id, title, pass, detail }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

/// The d=8 instance shared by the rate and OOD checks.
fn d8_env(seed: u64) -> (FeatureEnv, PreferenceDataset) {
    let env = generate_env(
        seed,
        EnvShape {
            num_prompts: 20,
            num_completions: 4,
            d_reward: 8,
            d_policy: 8,
            reward_radius: 1.0,
            policy_radius: 1.0,
        },
    )
    .expect("valid shape");
    let data = sample_dataset(&env, 20_000, seed + 100).expect("dataset");
    (env, data)
}

const SEEDS: u64 = 10;
const D8_RHO: f64 = 0.2;
const D8_BATCH: usize = 64;
const D8_SUPPORT: PopulationSupport = PopulationSupport::Joint;

fn weight_solvers() -> Outcome {
    let start = Instant::now();
    let mut rng = phase_rng(2024, Phase::Minibatch);
    let rhos = [0.0, 0.1, 0.5, 1.0];
    let mut worst_gap: f64 = 0.0;
    let mut failures = Vec::new();
    let mut count = 0;
    for kind in [DivergenceKind::Tv, DivergenceKind::ChiSq] {
        for case in 0..100 {
            let n = rng.random_range(2..=4usize);
            let losses: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let rho = rhos[case % 4];
            let spec = DivergenceSpec { kind, rho };
            let lmax = losses.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let bound = GRID_RES * lmax * n as f64;
            for sense in [Sense::Max, Sense::Min] {
                count += 1;
                let (Ok(exact), Ok(grid)) = (worst_case_weights(&losses, spec, sense), oracle_weights(&losses, spec, sense, GRID_RES))
                else {
                    failures.push(format!("{kind:?} case {case}: solver error"));
                    continue;
                };
                let gap = (exact.objective - grid.objective).abs();
                let dominates = match sense {
                    Sense::Max => exact.objective >= grid.objective - 1e-9,
                    Sense::Min => exact.objective <= grid.objective + 1e-9,
                };
                worst_gap = worst_gap.max(gap / bound.max(f64::MIN_POSITIVE));
                if !dominates || gap > bound {
                    failures.push(format!("{kind:?} case {case} {sense:?}: gap {gap:.3e}, bound {bound:.3e}"));
                }
            }
        }
    }
    let t = start.elapsed();
    let pass = failures.is_empty() && within(t, 10.0);
    outcome(
        1,
        "weight solvers match the grid oracle",
        pass,
        format!(
            "{count} comparisons (100 TV + 100 chi2 instances, both senses), worst gap/bound {worst_gap:.3}, {} failures{}, {:.2}s (< 10s)",
            failures.len(),
            failures.first().map(|f| format!(" e.g. {f}")).unwrap_or_default(),
            t.as_secs_f64()
        ),
    )
}

/// Relative error of an analytic gradient against central differences.
fn fd_error(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> f64 {
    let h = 1e-5;
    let mut fd = vec![0.0; x.len()];
    for k in 0..x.len() {
        let mut p = x.to_vec();
        let mut m = x.to_vec();
        p[k] += h;
        m[k] -= h;
        fd[k] = (f(&p) - f(&m)) / (2.0 * h);
    }
    let diff: Vec<f64> = fd.iter().zip(analytic).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(analytic).max(1e-3)
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = phase_rng(77, Phase::Minibatch);
    let mut worst = [0.0f64; 3];
    for point in 0..50u64 {
        let env = generate_env(
            point,
            EnvShape {
                num_prompts: 3,
                num_completions: 4,
                d_reward: 5,
                d_policy: 4,
                reward_radius: 1.0,
                policy_radius: 1.0,
            },
        )
        .expect("env");
        let kl = KlConfig::new(rng.random_range(0.1..2.0)).expect("beta");
        let x = rng.random_range(0..3);
        let a = rng.random_range(0..4);
        let b = (a + rng.random_range(1..4)) % 4;
        let ex = PreferenceExample { prompt: x, y_plus: a, y_minus: b };
        let w: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let th: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        worst[0] = worst[0].max(fd_error(|v| reward_loss(v, &env, &ex), &w, &reward_loss_grad(&w, &env, &ex)));
        worst[1] = worst[1].max(fd_error(|v| dpo_loss(v, &env, kl, &ex), &th, &dpo_loss_grad(&th, &env, kl, &ex)));
        worst[2] = worst[2].max(fd_error(
            |v| kl_value(v, &env, kl, &w, x),
            &th,
            &kl_value_grad(&th, &env, kl, &w, x),
        ));
    }
    let t = start.elapsed();
    let pass = worst.iter().all(|&e| e < 1e-5) && within(t, 5.0);
    outcome(
        2,
        "analytic gradients match central differences",
        pass,
        format!(
            "50 points each, max relative error reward {:.2e}, DPO {:.2e}, KL value {:.2e} (< 1e-5), {:.2}s (< 5s)",
            worst[0],
            worst[1],
            worst[2],
            t.as_secs_f64()
        ),
    )
}

fn zero_radius_reduction() -> Outcome {
    const T: usize = 200;
    let env = generate_env(
        40,
        EnvShape {
            num_prompts: 5,
            num_completions: 4,
            d_reward: 3,
            d_policy: 3,
            reward_radius: 1.0,
            policy_radius: 1.0,
        },
    )
    .expect("env");
    let data = sample_dataset(&env, 300, 41).expect("data");
    let kl = KlConfig::new(0.5).expect("beta");
    let reward = RewardParams::new(env.true_reward_params().to_vec(), 1.0).expect("reward");
    let prompts: Vec<usize> = data.examples().iter().map(|e| e.prompt).collect();
    let mut dev = [0.0f64; 3];

    // Full trajectories: the trainer run for t steps must land on the
    // reference iterate after t steps, for every t ≤ T.
    let (steps, last) = uniform_sgd(&[0.0; 3], data.examples(), 16, T, 0.05, 1.0, 42, |w, e| {
        reward_loss_and_grad(w, &env, e)
    });
    for t in 1..=T {
        let mut cfg = RewardTrainConfig::new(t, 16, 0.0, 42);
        cfg.eta = StepSize::Fixed(0.05);
        cfg.output = OutputMode::Last;
        let (m, _) = train_robust_reward(&cfg, &env, &data).expect("reward training");
        let want = if t == T { &last } else { &steps[t].x };
        dev[0] = dev[0].max(max_abs_diff(&m.omega, want));
    }
    let (steps, last) = uniform_sgd(env.ref_policy_params(), data.examples(), 16, T, 0.1, 1.0, 43, |th, e| {
        dpo_loss_and_grad(th, &env, kl, e)
    });
    for t in 1..=T {
        let mut cfg = DpoTrainConfig::new(t, 16, 0.0, 0.5, 43);
        cfg.eta = StepSize::Fixed(0.1);
        cfg.output = OutputMode::Last;
        let (p, _) = train_robust_dpo(&cfg, &env, &data).expect("DPO training");
        let want = if t == T { &last } else { &steps[t].x };
        dev[1] = dev[1].max(max_abs_diff(&p.theta, want));
    }
    let (steps, last) = uniform_npg(&env, &prompts, &reward.omega, kl, 16, T, 0.1, 1.0, 44);
    for t in 1..=T {
        let mut cfg = PolicyTrainConfig::new(t, 16, 0.0, 0.5, 44);
        cfg.eta = StepSize::Fixed(0.1);
        cfg.reward_shift = Some(0.0);
        let (p, _) = train_robust_policy(&cfg, &env, &data, &reward).expect("policy training");
        let want = if t == T { &last } else { &steps[t].x };
        dev[2] = dev[2].max(max_abs_diff(&p.theta, want));
    }
    let pass = dev.iter().all(|&d| d <= 1e-14);
    outcome(
        3,
        "rho = 0 reproduces uniform-weight training",
        pass,
        format!(
            "T={T}, max per-coordinate deviation over all iterates: reward {:.1e}, DPO {:.1e}, NPG {:.1e} (<= 1e-14)",
            dev[0], dev[1], dev[2]
        ),
    )
}

fn bias_sandwich() -> Outcome {
    let start = Instant::now();
    let (env, _) = d8_env(3);
    let reward = RewardParams::new(env.true_reward_params().to_vec(), 1.0).expect("reward");
    let mut lines = Vec::new();
    let mut pass = true;
    // Independent evaluation of the bound formula at F=1, ρ=0.5, n=64.
    let formula = 12.0 * 1.0 * 2.0 * ((4.0 + 64f64.ln()) / 64.0).sqrt();
    pass &= (bias_bound(1.0, 0.5, 64) - formula).abs() < 1e-12 && (formula - 8.5691).abs() < 1e-3;
    for rho in [0.1, 0.5] {
        for n in [16, 64, 256] {
            match bias_check(&reward, &env, n, DivergenceSpec::tv(rho), 10_000, 9) {
                Ok(b) => {
                    pass &= b.holds();
                    lines.push(format!(
                        "rho={rho} n={n}: bias {:+.4} (-3SE {:.4}, bound {:.3}){}",
                        b.bias,
                        -3.0 * b.minibatch_se,
                        b.bound,
                        if b.holds() { "" } else { " VIOLATED" }
                    ));
                }
                Err(e) => {
                    pass = false;
                    lines.push(format!("rho={rho} n={n}: error {e}"));
                }
            }
        }
    }
    let t = start.elapsed();
    pass &= within(t, 120.0);
    outcome(
        4,
        "minibatch bias sandwich",
        pass,
        format!("F=1, 10^4 minibatches; {}; {:.1}s (< 120s)", lines.join("; "), t.as_secs_f64()),
    )
}

/// Mean robust excess loss at T=1000 and T=4000 over the seeds, and the time taken.
fn rate_ratio(
    oracle: impl Fn(&FeatureEnv) -> f64,
    excess_at: impl Fn(&FeatureEnv, &PreferenceDataset, usize, u64) -> f64,
) -> (f64, f64, Duration) {
    let start = Instant::now();
    let (mut e1, mut e4) = (0.0, 0.0);
    for seed in 0..SEEDS {
        let (env, data) = d8_env(seed);
        let opt = oracle(&env);
        e1 += excess_at(&env, &data, 1000, seed) - opt;
        e4 += excess_at(&env, &data, 4000, seed) - opt;
    }
    (e1 / SEEDS as f64, e4 / SEEDS as f64, start.elapsed())
}

fn rates() -> Outcome {
    let spec = DivergenceSpec::tv(D8_RHO);
    let kl = KlConfig::new(0.5).expect("beta");
    let (r1, r4, tr) = rate_ratio(
        |env| oracle_optimum_reward(env, spec, D8_SUPPORT).expect("reward oracle").objective,
        |env, data, t, seed| {
            let cfg = RewardTrainConfig::new(t, D8_BATCH, D8_RHO, seed);
            let (m, _) = train_robust_reward(&cfg, env, data).expect("reward training");
            robust_reward_objective(&m.omega, env, spec, D8_SUPPORT).expect("eval").0
        },
    );
    let (d1, d4, td) = rate_ratio(
        |env| oracle_optimum_dpo(env, kl, spec, D8_SUPPORT).expect("DPO oracle").objective,
        |env, data, t, seed| {
            let cfg = DpoTrainConfig::new(t, D8_BATCH, D8_RHO, 0.5, seed);
            let (p, _) = train_robust_dpo(&cfg, env, data).expect("DPO training");
            robust_dpo_objective(&p.theta, env, kl, spec, D8_SUPPORT).expect("eval").0
        },
    );
    let (rr, rd) = (r1 / r4, d1 / d4);
    let ok = |r: f64| (1.4..=3.0).contains(&r);
    let pass = ok(rr) && ok(rd) && within(tr, 300.0) && within(td, 300.0);
    outcome(
        5,
        "excess robust loss shrinks when T quadruples",
        pass,
        format!(
            "10 seeds, TV rho={D8_RHO}, n={D8_BATCH}, comparison-level population; reward {r1:.3e} -> {r4:.3e} ratio {rr:.3} ({:.1}s); DPO {d1:.3e} -> {d4:.3e} ratio {rd:.3} ({:.1}s); band [1.4, 3.0], < 300s each",
            tr.as_secs_f64(),
            td.as_secs_f64()
        ),
    )
}

/// The tiny NPG instance: the source distribution equals the dataset's
/// empirical prompt frequencies, so a full-batch step sees the exact
/// population objective.
fn tiny_instance(seed: u64) -> (FeatureEnv, PreferenceDataset) {
    const N: usize = 300;
    let base = generate_env(
        seed,
        EnvShape {
            num_prompts: 3,
            num_completions: 3,
            d_reward: 2,
            d_policy: 2,
            reward_radius: 1.0,
            policy_radius: 2.0,
        },
    )
    .expect("env");
    let sampled = sample_dataset(&base, N, seed + 100).expect("data");
    let mut parts = base.into_parts();
    parts.source_dist = vec![0.0; 3];
    for e in sampled.examples() {
        parts.source_dist[e.prompt] += 1.0 / N as f64;
    }
    let env = FeatureEnv::from_parts(parts).expect("env");
    let data = PreferenceDataset::for_env(&env, sampled.examples().to_vec(), sampled.seed()).expect("data");
    (env, data)
}

fn npg_convergence() -> Outcome {
    const T: usize = 300;
    const BURN_IN: usize = 10;
    // Φ is a difference of nearly equal logs near the optimum; changes
    // below this are rounding.
    const PHI_SLACK: f64 = 1e-12;
    // Robust values are sums of O(1) terms; differences below this are rounding.
    const VALUE_SLACK: f64 = 1e-12;
    let start = Instant::now();
    let (rho, beta) = (0.2, 0.5);
    let spec = DivergenceSpec::tv(rho);
    let kl = KlConfig::new(beta).expect("beta");
    let (mut within_tol, mut down, mut steps, mut lemma_ok) = (0, 0, 0, 0);
    let mut worst_gap: f64 = 0.0;
    let mut per_seed = Vec::new();
    for seed in 0..SEEDS {
        let (env, data) = tiny_instance(seed);
        let reward = RewardParams::new(env.true_reward_params().to_vec(), 1.0).expect("reward");
        let mut cfg = PolicyTrainConfig::new(T, data.len(), rho, beta, seed);
        cfg.with_replacement = false;
        let shift = cfg.resolved_shift(&reward);
        let orc = oracle_optimum_policy(&env, kl, &reward.omega, shift, spec, seed).expect("policy oracle");
        let opt = PolicyParams { theta: orc.params.clone(), radius: env.policy_radius() };
        let (p, rep) = train_robust_policy_tracked(&cfg, &env, &data, &reward, Some(&opt)).expect("NPG");
        let value = robust_policy_value(&p.theta, &env, kl, &reward.omega, shift, spec).expect("value");
        let gap = orc.objective - value;
        worst_gap = worst_gap.max(gap);
        if gap <= 1e-3 {
            within_tol += 1;
        }
        let mut phi = rep.column(|r| r.potential);
        let phi_t = potential(&p.theta, &opt.theta, &env);
        phi.push(phi_t);
        let post = &phi[BURN_IN..];
        let seed_down = post.windows(2).filter(|w| w[1] <= w[0] + PHI_SLACK).count();
        down += seed_down;
        steps += post.len() - 1;
        let c = measure_constants(&env, &p.theta, kl, &reward.omega, shift, env.source_dist(), None).expect("constants");
        let bound = suboptimality_bound(c["r_max"], beta, env.policy_radius(), rho, c["nu"], phi_t);
        if gap <= bound + VALUE_SLACK {
            lemma_ok += 1;
        }
        per_seed.push(format!(
            "{gap:.1e}<={bound:.1e}/{:.0}%",
            100.0 * seed_down as f64 / (post.len() - 1) as f64
        ));
    }
    let t = start.elapsed();
    let frac = down as f64 / steps as f64;
    let pass = within_tol == SEEDS && frac >= 0.95 && lemma_ok == SEEDS && within(t, 120.0);
    outcome(
        6,
        "NPG reaches the grid optimum with a shrinking potential",
        pass,
        format!(
            "|X|=|Y|=3, d=2, B=2, full batch, T={T}: {within_tol}/10 within 1e-3 (worst gap {worst_gap:.2e}); Phi nonincreasing in {:.1}% of {steps} post-burn-in steps (pooled, >= 95%); suboptimality inequality {lemma_ok}/10; per seed gap<=bound/monotone [{}]; {:.1}s (< 120s)",
            100.0 * frac,
            per_seed.join(", "),
            t.as_secs_f64()
        ),
    )
}

fn ood_direction() -> Outcome {
    let start = Instant::now();
    let spec = DivergenceSpec::tv(D8_RHO);
    let mut wins = 0;
    let mut margins = Vec::new();
    for seed in 0..SEEDS {
        let (env, data) = d8_env(seed);
        let loss_of = |rho: f64| {
            let cfg = RewardTrainConfig::new(2000, D8_BATCH, rho, seed);
            let (m, _) = train_robust_reward(&cfg, &env, &data).expect("reward training");
            robust_reward_objective(&m.omega, &env, spec, D8_SUPPORT).expect("eval").0
        };
        let (robust, plain) = (loss_of(D8_RHO), loss_of(0.0));
        if robust <= plain {
            wins += 1;
        }
        margins.push(format!("{:+.3}", plain - robust));
    }
    outcome(
        7,
        "robust reward model has lower worst-case loss than the rho=0 model",
        wins >= 8,
        format!(
            "d=8, T=2000, rho={D8_RHO}, comparison-level population: robust wins {wins}/10 (>= 8), margins [{}], {:.1}s",
            margins.join(", "),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn invariants() -> Outcome {
    let start = Instant::now();
    let results = [
        ("simplex feasibility", run_property((losses(12), rho(), kind(), sense()), simplex_feasibility)),
        ("monotone in rho", run_property((losses(12), 0.0..2.0f64, 0.0..2.0f64, kind()), rho_monotonicity)),
        (
            "shift/scale/permutation equivariance",
            run_property(
                (losses(10), rho(), kind(), sense(), 0.1..10.0f64, -5.0..5.0f64, proptest::prelude::any::<u64>()),
                equivariance,
            ),
        ),
        ("Fisher PSD", run_property(env_and_theta(5.0), fisher_psd)),
        ("pinv identities", run_property(psd_matrix(), pinv_identities)),
        ("projection bounds", run_property(projection_case(), projection_bounds)),
        ("softmax normalization", run_property(env_and_theta(30.0), softmax_normalization)),
        ("score mean zero", run_property(env_and_theta(5.0), score_mean_zero)),
    ];
    let t = start.elapsed();
    let failed: Vec<String> = results
        .iter()
        .filter_map(|(name, r)| r.as_ref().err().map(|e| format!("{name}: {e}")))
        .collect();
    outcome(
        8,
        "invariant properties",
        failed.is_empty() && within(t, 60.0),
        format!(
            "{} properties x {CASES} cases, {} failed{}; {:.2}s (< 60s)",
            results.len(),
            failed.len(),
            failed.first().map(|f| format!(" ({f})")).unwrap_or_default(),
            t.as_secs_f64()
        ),
    )
}

fn main() {
    let checks: [fn() -> Outcome; 8] = [
        weight_solvers,
        gradients,
        zero_radius_reduction,
        bias_sandwich,
        rates,
        npg_convergence,
        ood_direction,
        invariants,
    ];
    let mut outcomes: Vec<Outcome> = std::thread::scope(|s| {
        let handles: Vec<_> = checks.iter().map(|f| s.spawn(f)).collect();
        handles
            .into_iter()
            .zip(1u32..)
            .map(|(h, id)| {
                h.join().unwrap_or_else(|_| outcome(id, "check panicked", false, "see stderr".into()))
            })
            .collect()
    });
    outcomes.sort_by_key(|o| o.id);
    println!("\nacceptance summary");
    for o in &outcomes {
        println!(
            "criterion {}: {} - {}: {}",
            o.id,
            if o.pass { "PASS" } else { "FAIL" },
            o.title,
            o.detail
        );
    }
    let failed = outcomes.iter().filter(|o| !o.pass).count();
    println!("{} passed, {failed} failed\n", outcomes.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
