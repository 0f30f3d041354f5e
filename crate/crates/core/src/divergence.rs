//! Worst-case reweighting inside a φ-divergence ball.
//!
//! Given per-atom losses `ℓ` and a reference distribution `p` (uniform `1/n`
//! for minibatches, `D_src` for population shifts), find
//!
//! ```text
//! q* = argmax (or argmin)  Σ q_i ℓ_i   s.t.  q ∈ Δⁿ,  d_φ(q, p) ≤ ρ
//! ```
//!
//! for total variation (`φ(t) = ½|t − 1|`) and χ² (`φ(t) = ½(t − 1)²`).
//!
//! TV is a linear program over a polytope and is solved exactly by moving the
//! budget `δ = min(ρ, 1 − p_recv)` of mass from the lowest-loss atoms onto the
//! highest-loss atom. χ² has the KKT form `q_i = p_i (ℓ_i − c)₊ / Σ_j p_j (ℓ_j − c)₊`
//! for a threshold `c`; the divergence is increasing in `c`, so `c` is found by
//! bisection and normalization is exact at every step.
//!
//! Ties are broken towards the lowest index so results are reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum bisection steps for the χ² threshold.
pub const CHI2_MAX_STEPS: usize = 200;
/// Absolute tolerance on the χ² constraint residual.
pub const CHI2_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DivergenceKind {
    #[serde(rename = "tv")]
    Tv,
    #[serde(rename = "chi2")]
    ChiSq,
}

impl DivergenceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DivergenceKind::Tv => "tv",
            DivergenceKind::ChiSq => "chi2",
        }
    }
}

impl std::str::FromStr for DivergenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tv" => Ok(DivergenceKind::Tv),
            "chi2" => Ok(DivergenceKind::ChiSq),
            other => Err(Error::Config(format!(
                "unknown divergence {other:?} (expected tv or chi2)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sense {
    Max,
    Min,
}

/// Ambiguity set: divergence kind and radius `ρ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceSpec {
    pub kind: DivergenceKind,
    pub rho: f64,
}

impl DivergenceSpec {
    pub fn new(kind: DivergenceKind, rho: f64) -> Result<Self> {
        check_rho(rho)?;
        Ok(Self { kind, rho })
    }

    pub fn tv(rho: f64) -> Self {
        Self {
            kind: DivergenceKind::Tv,
            rho,
        }
    }

    pub fn chi2(rho: f64) -> Self {
        Self {
            kind: DivergenceKind::ChiSq,
            rho,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSolution {
    pub weights: Vec<f64>,
    /// `Σ q_i ℓ_i`
    pub objective: f64,
    /// Half the L1 distance between `q` and the reference.
    pub mass_moved: f64,
    pub sense: Sense,
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho >= 0.0) || !rho.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "ambiguity radius must be a finite non-negative number, got {rho}"
        )));
    }
    Ok(())
}

fn check_values(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::EmptyInput("losses"));
    }
    if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFiniteLoss { index, value });
    }
    Ok(())
}

fn check_reference(p: &[f64], n: usize) -> Result<()> {
    if p.len() != n {
        return Err(Error::InvalidDimension(format!(
            "reference distribution has length {}, values have length {n}",
            p.len()
        )));
    }
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "reference distribution has negative or non-finite entries".into(),
        ));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "reference distribution sums to {s}"
        )));
    }
    Ok(())
}

pub fn weighted_sum(q: &[f64], values: &[f64]) -> f64 {
    q.iter().zip(values).map(|(a, b)| a * b).sum()
}

fn half_l1(q: &[f64], p: &[f64]) -> f64 {
    0.5 * q.iter().zip(p).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// `d_φ(q, p)` for the given divergence kind.
pub fn divergence(kind: DivergenceKind, q: &[f64], p: &[f64]) -> f64 {
    match kind {
        DivergenceKind::Tv => half_l1(q, p),
        DivergenceKind::ChiSq => {
            0.5 * q
                .iter()
                .zip(p)
                .map(|(&qi, &pi)| {
                    if pi > 0.0 {
                        (qi - pi) * (qi - pi) / pi
                    } else if qi > 0.0 {
                        f64::INFINITY
                    } else {
                        0.0
                    }
                })
                .sum::<f64>()
        }
    }
}

fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Exact TV worst case over minibatch weights around `1/n`.
pub fn worst_case_weights_tv(losses: &[f64], rho: f64, sense: Sense) -> Result<WeightSolution> {
    check_values(losses)?;
    check_rho(rho)?;
    let p = uniform(losses.len());
    let (weights, mass_moved) = greedy_tv(&p, losses, rho, sense);
    Ok(WeightSolution {
        objective: weighted_sum(&weights, losses),
        weights,
        mass_moved,
        sense,
    })
}

/// χ² worst case over minibatch weights around `1/n`.
pub fn worst_case_weights_chi2(losses: &[f64], rho: f64, sense: Sense) -> Result<WeightSolution> {
    check_values(losses)?;
    check_rho(rho)?;
    let p = uniform(losses.len());
    let weights = chi2_solve(&p, losses, rho, sense)?;
    Ok(WeightSolution {
        objective: weighted_sum(&weights, losses),
        mass_moved: half_l1(&weights, &p),
        weights,
        sense,
    })
}

pub fn worst_case_weights(losses: &[f64], spec: DivergenceSpec, sense: Sense) -> Result<WeightSolution> {
    match spec.kind {
        DivergenceKind::Tv => worst_case_weights_tv(losses, spec.rho, sense),
        DivergenceKind::ChiSq => worst_case_weights_chi2(losses, spec.rho, sense),
    }
}

/// Mixes the solution towards uniform: `q ← (1 − α) q + α / n`.
///
/// The ball is convex and contains the uniform vector, so feasibility is kept.
/// `α = 0` returns the solution bit-for-bit unchanged.
pub fn apply_floor(sol: WeightSolution, losses: &[f64], alpha: f64) -> Result<WeightSolution> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "q_floor must lie in [0, 1), got {alpha}"
        )));
    }
    if alpha == 0.0 {
        return Ok(sol);
    }
    let n = sol.weights.len() as f64;
    let weights: Vec<f64> = sol
        .weights
        .iter()
        .map(|q| (1.0 - alpha) * q + alpha / n)
        .collect();
    let p = uniform(weights.len());
    Ok(WeightSolution {
        objective: weighted_sum(&weights, losses),
        mass_moved: half_l1(&weights, &p),
        weights,
        sense: sol.sense,
    })
}

/// Worst-case distribution over a finite support around reference `p`.
/// Returns the shifted distribution and `Σ D_i values_i`.
pub fn shift_distribution(
    p: &[f64],
    values: &[f64],
    rho: f64,
    kind: DivergenceKind,
    sense: Sense,
) -> Result<(Vec<f64>, f64)> {
    check_values(values)?;
    check_rho(rho)?;
    check_reference(p, values.len())?;
    let d = match kind {
        DivergenceKind::Tv => greedy_tv(p, values, rho, sense).0,
        DivergenceKind::ChiSq => chi2_solve(p, values, rho, sense)?,
    };
    let obj = weighted_sum(&d, values);
    Ok((d, obj))
}

/// Index of the best value for `sense`, ties to the lowest index.
fn extreme_index(values: &[f64], sense: Sense) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        let better = match sense {
            Sense::Max => v > values[best],
            Sense::Min => v < values[best],
        };
        if better {
            best = i;
        }
    }
    best
}

fn greedy_tv(p: &[f64], values: &[f64], rho: f64, sense: Sense) -> (Vec<f64>, f64) {
    let recv = extreme_index(values, sense);
    let mut donors: Vec<usize> = (0..values.len()).filter(|&i| i != recv).collect();
    // Max sense drains the smallest losses first, Min the largest.
    donors.sort_by(|&a, &b| {
        let ord = values[a].total_cmp(&values[b]);
        let ord = match sense {
            Sense::Max => ord,
            Sense::Min => ord.reverse(),
        };
        ord.then(a.cmp(&b))
    });
    let cap = 1.0 - p[recv];
    let budget = rho.min(cap).max(0.0);
    let mut q = p.to_vec();
    if budget == 0.0 {
        return (q, 0.0);
    }
    if budget == cap {
        // Saturated: the whole ball edge is the point mass on the receiver.
        q.iter_mut().for_each(|v| *v = 0.0);
        q[recv] = 1.0;
        return (q, budget);
    }
    q[recv] += budget;
    let mut remaining = budget;
    for d in donors {
        if remaining <= 0.0 {
            break;
        }
        if p[d] <= remaining {
            remaining -= p[d];
            q[d] = 0.0;
        } else {
            q[d] = p[d] - remaining;
            remaining = 0.0;
        }
    }
    (q, budget)
}

fn chi2_solve(p: &[f64], values: &[f64], rho: f64, sense: Sense) -> Result<Vec<f64>> {
    match sense {
        Sense::Max => chi2_max(p, values, rho),
        Sense::Min => {
            let neg: Vec<f64> = values.iter().map(|v| -v).collect();
            chi2_max(p, &neg, rho)
        }
    }
}

/// Distribution `q_i ∝ p_i (v_i − c)₊` for threshold `c` below the top value.
fn tilt(p: &[f64], v: &[f64], c: f64) -> Vec<f64> {
    let raw: Vec<f64> = p
        .iter()
        .zip(v)
        .map(|(&pi, &vi)| if pi > 0.0 { pi * (vi - c).max(0.0) } else { 0.0 })
        .collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|r| r / z).collect()
}

fn chi2_max(p: &[f64], v: &[f64], rho: f64) -> Result<Vec<f64>> {
    let support: Vec<usize> = (0..p.len()).filter(|&i| p[i] > 0.0).collect();
    let vmax = support.iter().map(|&i| v[i]).fold(f64::NEG_INFINITY, f64::max);
    let vmin = support.iter().map(|&i| v[i]).fold(f64::INFINITY, f64::min);
    if rho == 0.0 || vmax == vmin {
        return Ok(p.to_vec());
    }

    // As c → vmax the tilt collapses onto the argmax set S; if even that is
    // inside the ball, it is optimal.
    let p_top: f64 = support.iter().filter(|&&i| v[i] == vmax).map(|&i| p[i]).sum();
    let limit = 0.5 * (1.0 - p_top) / p_top;
    // Relative slack so that e.g. ρ = (n − 1)/2 hits the point mass exactly.
    if rho >= limit * (1.0 - 1e-12) {
        let q: Vec<f64> = (0..p.len())
            .map(|i| if p[i] > 0.0 && v[i] == vmax { p[i] / p_top } else { 0.0 })
            .collect();
        return Ok(q);
    }

    // The tilt is invariant under affine maps of the values; solving on
    // [0, 1] keeps the threshold well resolved when the values are nearly
    // equal in absolute terms.
    let range = vmax - vmin;
    let v: Vec<f64> = v.iter().map(|x| (x - vmin) / range).collect();
    let v = v.as_slice();
    let (vmin, vmax) = (0.0, 1.0);

    // Unclipped regime: c ≤ vmin, closed form.
    let mean: f64 = support.iter().map(|&i| p[i] * v[i]).sum();
    let var: f64 = support.iter().map(|&i| p[i] * (v[i] - mean).powi(2)).sum();
    let c_free = mean - (var / (2.0 * rho)).sqrt();
    if c_free <= vmin {
        return Ok(tilt(p, v, c_free));
    }

    let chi2_at = |c: f64| divergence(DivergenceKind::ChiSq, &tilt(p, v, c), p);
    let (mut lo, mut hi) = (vmin, vmax);
    let mut residual = f64::INFINITY;
    for _ in 0..CHI2_MAX_STEPS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let f = chi2_at(mid);
        if f <= rho {
            lo = mid;
            residual = rho - f;
            if residual <= CHI2_TOL {
                break;
            }
        } else {
            hi = mid;
        }
    }
    // `lo` is always on the feasible side.
    let q = tilt(p, v, lo);
    let final_residual = (rho - divergence(DivergenceKind::ChiSq, &q, p)).abs();
    if final_residual > 1e-8 {
        return Err(Error::NumericalFailure {
            context: "chi2 threshold bisection",
            detail: format!(
                "residual {final_residual:e} after {CHI2_MAX_STEPS} steps (last feasible residual {residual:e}), bracket [{lo}, {hi}]"
            ),
        });
    }
    Ok(q)
}

/// Grid-search over the simplex at step `resolution` (test oracle, `n ≤ 4`).
///
/// Feasibility is checked in exact integer arithmetic on the grid counts, so
/// boundary points are not lost to rounding. `1/resolution` must be an integer
/// divisible by `n` when `ρ = 0` for a feasible point to exist.
pub fn oracle_weights(
    losses: &[f64],
    spec: DivergenceSpec,
    sense: Sense,
    resolution: f64,
) -> Result<WeightSolution> {
    check_values(losses)?;
    check_rho(spec.rho)?;
    let n = losses.len();
    if n > 4 {
        return Err(Error::DimensionTooLarge(format!(
            "grid oracle supports n ≤ 4, got {n}"
        )));
    }
    let k_total = (1.0 / resolution).round();
    if !(resolution > 0.0) || (k_total * resolution - 1.0).abs() > 1e-9 || k_total < 1.0 {
        return Err(Error::InvalidArgument(format!(
            "1/resolution must be a positive integer, got resolution {resolution}"
        )));
    }
    let k_total = k_total as i64;
    let nn = n as i64;
    let kf = k_total as f64;
    let slack = 1e-9;

    let feasible = |counts: &[i64]| -> bool {
        match spec.kind {
            DivergenceKind::Tv => {
                let dev: i64 = counts.iter().map(|&k| (nn * k - k_total).abs()).sum();
                dev as f64 <= 2.0 * nn as f64 * kf * spec.rho + slack
            }
            DivergenceKind::ChiSq => {
                let dev: i64 = counts.iter().map(|&k| (nn * k - k_total).pow(2)).sum();
                dev as f64 <= 2.0 * nn as f64 * kf * kf * spec.rho + slack
            }
        }
    };

    let mut best: Option<(f64, Vec<i64>)> = None;
    let mut counts = vec![0i64; n];
    enumerate_compositions(&mut counts, 0, k_total, &mut |c| {
        if !feasible(c) {
            return;
        }
        let obj: f64 = c.iter().zip(losses).map(|(&k, l)| k as f64 / kf * l).sum();
        let better = match &best {
            None => true,
            Some((b, _)) => match sense {
                Sense::Max => obj > *b,
                Sense::Min => obj < *b,
            },
        };
        if better {
            best = Some((obj, c.to_vec()));
        }
    });
    let (_, counts) = best.ok_or_else(|| {
        Error::InvalidArgument(format!(
            "no feasible grid point at resolution {resolution} for n = {n}, rho = {}",
            spec.rho
        ))
    })?;
    let weights: Vec<f64> = counts.iter().map(|&k| k as f64 / kf).collect();
    let p = uniform(n);
    Ok(WeightSolution {
        objective: weighted_sum(&weights, losses),
        mass_moved: half_l1(&weights, &p),
        weights,
        sense,
    })
}

fn enumerate_compositions(counts: &mut [i64], idx: usize, left: i64, f: &mut dyn FnMut(&[i64])) {
    if idx == counts.len() - 1 {
        counts[idx] = left;
        f(counts);
        return;
    }
    for k in 0..=left {
        counts[idx] = k;
        enumerate_compositions(counts, idx + 1, left - k, f);
    }
}
