//! Pieces shared by the trainers: step-size and output-mode options,
//! minibatch sampling, and the reweighted projected SGD loop used by the
//! reward and DPO trainers.

use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::divergence::{apply_floor, worst_case_weights, DivergenceSpec, Sense};
use crate::env::PreferenceExample;
use crate::error::{Error, Result};
use crate::report::{sha256_hex, ReportRow, TrainReport};
use crate::rng::{phase_rng, Phase, Rng};
use crate::vecops::{axpy, norm, project_ball};

/// Step size: a fixed positive number, or `"auto"` for the trainer's default rule.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum StepSize {
    #[default]
    Auto,
    Fixed(f64),
}

impl Serialize for StepSize {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            StepSize::Auto => s.serialize_str("auto"),
            StepSize::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for StepSize {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(StepSize::Fixed(v)),
            Raw::Text(s) if s == "auto" => Ok(StepSize::Auto),
            Raw::Text(s) => Err(serde::de::Error::custom(format!(
                "step size must be a number or \"auto\", got {s:?}"
            ))),
        }
    }
}

impl StepSize {
    pub(crate) fn resolve(self, auto: impl FnOnce() -> f64) -> Result<f64> {
        let eta = match self {
            StepSize::Auto => auto(),
            StepSize::Fixed(v) => v,
        };
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(Error::Config(format!("step size must be positive, got {eta}")));
        }
        Ok(eta)
    }
}

/// Which iterate the SGD trainers return.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputMode {
    /// `(1/T) Σ_{t=1}^T x_t`
    #[default]
    Average,
    Last,
    /// The iterate with the smallest worst-case minibatch loss.
    BestRobustMinibatch,
}

pub(crate) fn default_true() -> bool {
    true
}

pub(crate) fn config_digest<T: Serialize>(cfg: &T) -> String {
    sha256_hex(serde_json::to_string(cfg).expect("config serializes").as_bytes())
}

pub(crate) fn check_common(iterations: usize, batch_size: usize, rho: f64, q_floor: f64) -> Result<()> {
    if iterations == 0 {
        return Err(Error::Config("iterations must be at least 1".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if !(rho >= 0.0) || !rho.is_finite() {
        return Err(Error::Config(format!("rho must be non-negative, got {rho}")));
    }
    if !(0.0..1.0).contains(&q_floor) {
        return Err(Error::Config(format!("q_floor must lie in [0, 1), got {q_floor}")));
    }
    Ok(())
}

pub(crate) fn check_radius(name: &str, r: f64) -> Result<()> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::Config(format!("{name} must be positive, got {r}")));
    }
    Ok(())
}

/// Draws `n` indices into `0..len`.
pub(crate) fn sample_batch(rng: &mut Rng, len: usize, n: usize, with_replacement: bool) -> Result<Vec<usize>> {
    if with_replacement {
        Ok((0..n).map(|_| rng.random_range(0..len)).collect())
    } else {
        if len < n {
            return Err(Error::Config(format!(
                "dataset has {len} examples, fewer than batch_size {n}, and sampling without replacement was requested"
            )));
        }
        Ok(rand::seq::index::sample(rng, len, n).into_vec())
    }
}

pub(crate) fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Settings of one reweighted projected SGD run.
pub(crate) struct SgdRun<'a> {
    pub iterations: usize,
    pub batch_size: usize,
    pub eta: f64,
    pub divergence: DivergenceSpec,
    pub q_floor: f64,
    pub with_replacement: bool,
    pub output: OutputMode,
    pub seed: u64,
    pub radius: f64,
    pub init: Vec<f64>,
    pub examples: &'a [PreferenceExample],
    pub config_digest: String,
}

/// Minibatch SGD on the worst-case reweighted loss:
/// `q* = argmax_{d(q, 1/n) ≤ ρ} Σ q_i ℓ_i`, `g = Σ q*_i ∇ℓ_i`,
/// `x ← Π(x − η g)`. Per-example terms are reduced in batch order.
pub(crate) fn robust_sgd(
    run: SgdRun<'_>,
    loss_and_grad: impl Fn(&[f64], &PreferenceExample) -> (f64, Vec<f64>),
) -> Result<(Vec<f64>, TrainReport)> {
    let start = Instant::now();
    let mut rng = phase_rng(run.seed, Phase::Minibatch);
    let dim = run.init.len();
    let mut x = run.init.clone();
    // Running mean of x_1..x_t; exact when the iterates do not move.
    let mut mean = vec![0.0; dim];
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut report = TrainReport::new(run.config_digest.clone());
    report.rows.reserve(run.iterations);

    for t in 1..=run.iterations {
        let batch = sample_batch(&mut rng, run.examples.len(), run.batch_size, run.with_replacement)?;
        let mut losses = Vec::with_capacity(batch.len());
        let mut grads = Vec::with_capacity(batch.len());
        for &i in &batch {
            let (l, g) = loss_and_grad(&x, &run.examples[i]);
            losses.push(l);
            grads.push(g);
        }
        let sol = worst_case_weights(&losses, run.divergence, Sense::Max)?;
        let sol = apply_floor(sol, &losses, run.q_floor)?;
        let mut g = vec![0.0; dim];
        for (qi, gi) in sol.weights.iter().zip(&grads) {
            axpy(*qi, gi, &mut g);
        }

        for (m, xi) in mean.iter_mut().zip(&x) {
            *m += (xi - *m) / t as f64;
        }
        if run.output == OutputMode::BestRobustMinibatch
            && best.as_ref().map_or(true, |(b, _)| sol.objective < *b)
        {
            best = Some((sol.objective, x.clone()));
        }

        let mut row = ReportRow::new(t);
        row.robust_minibatch_loss = sol.objective;
        row.uniform_minibatch_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        row.grad_norm = norm(&g);
        row.mass_moved = sol.mass_moved;
        row.wallclock_ms = elapsed_ms(start);
        report.rows.push(row);

        axpy(-run.eta, &g, &mut x);
        project_ball(&mut x, run.radius);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure {
                context: "projected SGD",
                detail: format!("non-finite iterate at iteration {t}"),
            });
        }
        debug_assert!(norm(&x) <= run.radius * (1.0 + 1e-12));
    }

    let out = match run.output {
        OutputMode::Average => mean,
        OutputMode::Last => x,
        OutputMode::BestRobustMinibatch => best.map(|(_, b)| b).unwrap_or(x),
    };
    Ok((out, report))
}
