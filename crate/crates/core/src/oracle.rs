//! Brute-force optimizers used as ground truth.
//!
//! The robust reward and DPO objectives are convex in their parameters, so
//! they are minimized over the parameter ball with the ellipsoid method,
//! which certifies its own optimality gap. The robust policy value is not
//! concave in `θ`; it is maximized by a dense grid over the ball (`d ≤ 3`) or
//! multi-start pattern search (`d > 3`), polished by pattern search.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::divergence::DivergenceSpec;
use crate::env::FeatureEnv;
use crate::error::{Error, Result};
use crate::eval::{robust_dpo_objective, robust_policy_value, robust_reward_objective, PopulationSupport};
use crate::io::float17;
use crate::losses::KlConfig;
use crate::rng::{phase_rng, Phase};
use crate::vecops::{norm, project_ball};

/// Certified gap at which the ellipsoid method stops.
pub const ELLIPSOID_TOL: f64 = 1e-10;
pub const ELLIPSOID_MAX_ITER: usize = 200_000;
/// Grid step of the policy oracle.
pub const POLICY_GRID_STEP: f64 = 0.01;
pub const POLICY_STARTS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    #[serde(with = "float17::vec")]
    pub params: Vec<f64>,
    #[serde(with = "float17")]
    pub objective: f64,
    /// Certified optimality gap (`nan` when no certificate exists).
    #[serde(with = "float17")]
    pub gap: f64,
    pub method: String,
    pub evaluations: usize,
}

/// Minimizes a convex function over `{‖x‖ ≤ radius}` given value and
/// subgradient oracles. Stops once the certified gap is `≤ tol`.
pub fn ellipsoid_minimize(
    mut f: impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    dim: usize,
    radius: f64,
    tol: f64,
    max_iter: usize,
) -> Result<OracleResult> {
    if dim == 0 {
        return Err(Error::InvalidDimension("ellipsoid method needs dim ≥ 1".into()));
    }
    let n = dim as f64;
    let mut c = vec![0.0; dim];
    // Shape matrix P: the ellipsoid is {x : (x − c)ᵀ P⁻¹ (x − c) ≤ 1}.
    let mut p = nalgebra::DMatrix::<f64>::identity(dim, dim) * (radius * radius);
    let mut best_x = c.clone();
    let mut best = f64::INFINITY;
    let mut lower = f64::NEG_INFINITY;
    let mut evals = 0;
    for _ in 0..max_iter {
        let cn = norm(&c);
        let g = if cn > radius {
            // feasibility cut
            c.clone()
        } else {
            let (v, g) = f(&c)?;
            evals += 1;
            if !v.is_finite() || g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NumericalFailure {
                    context: "ellipsoid oracle",
                    detail: "objective or subgradient is not finite".into(),
                });
            }
            if v < best {
                best = v;
                best_x = c.clone();
            }
            let gv = nalgebra::DVector::from_column_slice(&g);
            let width = (gv.transpose() * &p * &gv)[(0, 0)].max(0.0).sqrt();
            lower = lower.max(v - width);
            if width == 0.0 {
                lower = lower.max(v.min(best));
            }
            g
        };
        if best - lower <= tol {
            break;
        }
        let gv = nalgebra::DVector::from_column_slice(&g);
        let gpg = (gv.transpose() * &p * &gv)[(0, 0)];
        if !(gpg > 0.0) {
            break;
        }
        let pg = (&p * &gv) / gpg.sqrt();
        if dim == 1 {
            c[0] -= pg[0] / 2.0;
            p *= 0.25;
        } else {
            for i in 0..dim {
                c[i] -= pg[i] / (n + 1.0);
            }
            p = (&p - (&pg * pg.transpose()) * (2.0 / (n + 1.0))) * (n * n / (n * n - 1.0));
            p = (&p + p.transpose()) * 0.5;
        }
    }
    Ok(OracleResult {
        params: best_x,
        objective: best,
        gap: (best - lower).max(0.0),
        method: "ellipsoid".into(),
        evaluations: evals,
    })
}

/// `argmin_ω` of the robust population reward loss over the `F`-ball.
pub fn oracle_optimum_reward(env: &FeatureEnv, spec: DivergenceSpec, support: PopulationSupport) -> Result<OracleResult> {
    ellipsoid_minimize(
        |w| robust_reward_objective(w, env, spec, support),
        env.d_reward(),
        env.reward_radius(),
        ELLIPSOID_TOL,
        ELLIPSOID_MAX_ITER,
    )
}

/// `argmin_θ` of the robust population DPO loss over the `B`-ball.
pub fn oracle_optimum_dpo(
    env: &FeatureEnv,
    kl: KlConfig,
    spec: DivergenceSpec,
    support: PopulationSupport,
) -> Result<OracleResult> {
    ellipsoid_minimize(
        |t| robust_dpo_objective(t, env, kl, spec, support),
        env.d_policy(),
        env.policy_radius(),
        ELLIPSOID_TOL,
        ELLIPSOID_MAX_ITER,
    )
}

/// Maximizes `f` over the lattice `step·ℤ^d` intersected with the ball
/// (`d ≤ 3`). Ties keep the first point in lexicographic order.
pub fn grid_search_ball(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    dim: usize,
    radius: f64,
    step: f64,
) -> Result<(Vec<f64>, f64, usize)> {
    if dim == 0 || dim > 3 {
        return Err(Error::DimensionTooLarge(format!("grid search supports 1 ≤ d ≤ 3, got {dim}")));
    }
    let k = (radius / step).floor() as i64;
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut count = 0;
    let mut idx = vec![-k; dim];
    loop {
        let x: Vec<f64> = idx.iter().map(|&i| i as f64 * step).collect();
        if norm(&x) <= radius {
            let v = f(&x)?;
            count += 1;
            if best.as_ref().map_or(true, |(_, b)| v > *b) {
                best = Some((x, v));
            }
        }
        // odometer increment
        let mut pos = dim;
        loop {
            if pos == 0 {
                let (x, v) = best.expect("the origin is always on the grid");
                return Ok((x, v, count));
            }
            pos -= 1;
            if idx[pos] < k {
                idx[pos] += 1;
                for j in idx.iter_mut().skip(pos + 1) {
                    *j = -k;
                }
                break;
            }
        }
    }
}

/// Compass/diagonal pattern search maximizing `f` over the ball, starting
/// from `x0` with step `step`, halving on failure until `min_step`.
pub fn pattern_search(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x0: &[f64],
    radius: f64,
    mut step: f64,
    min_step: f64,
) -> Result<(Vec<f64>, f64, usize)> {
    let dim = x0.len();
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for i in 0..dim {
        for s in [1.0, -1.0] {
            let mut d = vec![0.0; dim];
            d[i] = s;
            dirs.push(d);
        }
        for j in i + 1..dim {
            for (si, sj) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                let mut d = vec![0.0; dim];
                d[i] = si * std::f64::consts::FRAC_1_SQRT_2;
                d[j] = sj * std::f64::consts::FRAC_1_SQRT_2;
                dirs.push(d);
            }
        }
    }
    let mut x = x0.to_vec();
    project_ball(&mut x, radius);
    let mut fx = f(&x)?;
    let mut evals = 1;
    while step >= min_step {
        let mut improved = false;
        for d in &dirs {
            let mut y: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + step * b).collect();
            project_ball(&mut y, radius);
            let fy = f(&y)?;
            evals += 1;
            if fy > fx {
                x = y;
                fx = fy;
                improved = true;
                break;
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    Ok((x, fx, evals))
}

/// `argmax_θ` of the robust population value over the `B`-ball.
pub fn oracle_optimum_policy(
    env: &FeatureEnv,
    kl: KlConfig,
    omega: &[f64],
    shift: f64,
    spec: DivergenceSpec,
    seed: u64,
) -> Result<OracleResult> {
    let d = env.d_policy();
    let b = env.policy_radius();
    let value = |t: &[f64]| robust_policy_value(t, env, kl, omega, shift, spec);
    if d <= 3 {
        let (x, _, n1) = grid_search_ball(value, d, b, POLICY_GRID_STEP)?;
        let (x, v, n2) = pattern_search(value, &x, b, POLICY_GRID_STEP, 1e-12)?;
        return Ok(OracleResult {
            params: x,
            objective: v,
            gap: f64::NAN,
            method: "grid+pattern".into(),
            evaluations: n1 + n2,
        });
    }
    let mut rng = phase_rng(seed, Phase::OracleStarts);
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut evals = 0;
    for s in 0..POLICY_STARTS {
        let start: Vec<f64> = if s == 0 {
            env.ref_policy_params().to_vec()
        } else {
            let dir: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let r = b * rng.random::<f64>().powf(1.0 / d as f64) / norm(&dir).max(1e-300);
            dir.iter().map(|v| v * r).collect()
        };
        let (x, v, n) = pattern_search(value, &start, b, 0.1 * b, 1e-12)?;
        evals += n;
        if best.as_ref().map_or(true, |(_, bv)| v > *bv) {
            best = Some((x, v));
        }
    }
    let (x, v) = best.expect("at least one start");
    Ok(OracleResult {
        params: x,
        objective: v,
        gap: f64::NAN,
        method: "multistart-pattern".into(),
        evaluations: evals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ellipsoid_on_quadratic() {
        // min ‖x − a‖² over the unit ball with ‖a‖ = 2 ⇒ x* = a/2, f* = 1
        let a = [1.2, -1.6];
        let r = ellipsoid_minimize(
            |x| {
                let d: Vec<f64> = x.iter().zip(&a).map(|(u, v)| u - v).collect();
                Ok((d.iter().map(|v| v * v).sum(), d.iter().map(|v| 2.0 * v).collect()))
            },
            2,
            1.0,
            1e-10,
            100_000,
        )
        .unwrap();
        assert!((r.objective - 1.0).abs() < 1e-9);
        assert!((r.params[0] - 0.6).abs() < 1e-4 && (r.params[1] + 0.8).abs() < 1e-4);
        assert!(r.gap <= 1e-10);
    }

    #[test]
    fn ellipsoid_in_one_dimension() {
        let r = ellipsoid_minimize(|x| Ok(((x[0] - 0.3).abs(), vec![(x[0] - 0.3).signum()])), 1, 1.0, 1e-10, 10_000)
            .unwrap();
        assert!((r.params[0] - 0.3).abs() < 1e-9);
    }

    #[test]
    fn grid_and_pattern_find_smooth_max() {
        let f = |x: &[f64]| Ok(-(x[0] - 0.123).powi(2) - (x[1] + 0.456).powi(2));
        let (g, _, _) = grid_search_ball(f, 2, 1.0, 0.01).unwrap();
        assert!((g[0] - 0.12).abs() < 1e-12 && (g[1] + 0.46).abs() < 1e-12);
        let (p, v, _) = pattern_search(f, &g, 1.0, 0.01, 1e-12).unwrap();
        assert!((p[0] - 0.123).abs() < 1e-6 && (p[1] + 0.456).abs() < 1e-6);
        assert!(v > -1e-11);
    }
}
