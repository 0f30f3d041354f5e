//! Command-line front end. Every command reads JSON inputs, writes JSON/CSV
//! outputs and reports failures as a JSON object on stderr with a distinct
//! exit code (see [`Error::exit_code`]).

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{ExperimentConfig, SweepSection};
use crate::divergence::{DivergenceKind, DivergenceSpec};
use crate::dpo::train_robust_dpo;
use crate::env::{generate_env, sample_dataset, FeatureEnv, PreferenceDataset};
use crate::error::{Error, Result};
use crate::eval::{bias_check, eval_dpo, eval_policy, eval_reward, measure_constants, EvalReport, PopulationSupport};
use crate::io::{self, ModelFile, ModelKind};
use crate::losses::{KlConfig, PolicyParams, RewardParams};
use crate::oracle::{oracle_optimum_dpo, oracle_optimum_policy, oracle_optimum_reward, OracleResult};
use crate::policy::train_robust_policy_tracked;
use crate::report::{build_id, sha256_hex, TrainReport};
use crate::reward::train_robust_reward;

/// Environment variable capping the number of sweep worker threads.
pub const THREADS_ENV: &str = "DRO_PREF_THREADS";
pub const MANIFEST_SCHEMA: &str = "dro-pref/manifest/v1";

#[derive(Debug, Parser)]
#[command(name = "dro-pref", version, about = "Distributionally robust preference optimization toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an environment and a preference dataset.
    Gen {
        #[arg(long)]
        config: PathBuf,
        /// Environment and dataset output paths.
        #[arg(long, num_args = 2, value_names = ["ENV", "DATA"])]
        out: Vec<PathBuf>,
    },
    /// Train a robust reward model.
    TrainReward(TrainArgs),
    /// Train a robust policy by natural policy gradient.
    TrainPolicy {
        #[command(flatten)]
        train: TrainArgs,
        /// Reward model (`train-reward` output) supplying r̂.
        #[arg(long)]
        reward: PathBuf,
        /// Oracle result whose parameters are tracked as π* for the potential column.
        #[arg(long)]
        optimum: Option<PathBuf>,
    },
    /// Train a policy with robust DPO.
    TrainDpo(TrainArgs),
    /// Standard and worst-case population loss of a model.
    Eval {
        #[arg(long)]
        env: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        rho: f64,
        #[arg(long, default_value = "tv")]
        divergence: DivergenceKind,
        /// Population support for reward/DPO models: `prompt` or `joint`.
        #[arg(long, default_value = "prompt")]
        support: PopulationSupport,
        /// Reward model, required for policy models.
        #[arg(long)]
        reward: Option<PathBuf>,
        /// Constant added to r̂ for policy models (defaults to the reward radius).
        #[arg(long)]
        reward_shift: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte-Carlo check of the minibatch bias of a reward model's robust loss.
    BiasCheck {
        #[arg(long)]
        env: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        rho: f64,
        #[arg(long)]
        trials: usize,
        #[arg(long, default_value = "tv")]
        divergence: DivergenceKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Brute-force optimum of a robust population objective.
    Oracle {
        #[arg(long)]
        target: ModelKind,
        #[arg(long)]
        env: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        rho: f64,
        #[arg(long, default_value = "tv")]
        divergence: DivergenceKind,
        #[arg(long, default_value = "prompt")]
        support: PopulationSupport,
        /// KL coefficient (policy and DPO targets).
        #[arg(long)]
        beta: Option<f64>,
        /// Reward model (policy target).
        #[arg(long)]
        reward: Option<PathBuf>,
        #[arg(long)]
        reward_shift: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate one cell per ρ value.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub env: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Model and report output paths.
    #[arg(long, num_args = 2, value_names = ["MODEL", "REPORT"])]
    pub out: Vec<PathBuf>,
}

/// Machine-readable error written to stderr.
#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub error: String,
    pub message: String,
    pub exit_code: i32,
}

impl ErrorReport {
    pub fn from_error(e: &Error) -> Self {
        Self {
            error: e.kind().into(),
            message: e.to_string(),
            exit_code: e.exit_code(),
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { config, out } => gen(&config, &out[0], &out[1]),
        Command::TrainReward(a) => {
            let cfg = load_config(&a.config)?.reward_section()?.clone();
            let (env, data) = load_inputs(&a)?;
            let (m, report) = train_robust_reward(&cfg, &env, &data)?;
            let model = ModelFile::new(ModelKind::Reward, &env, m.omega, m.radius, None, cfg.digest());
            write_outputs(&a.out, &model, &report)
        }
        Command::TrainDpo(a) => {
            let cfg = load_config(&a.config)?.dpo_section()?.clone();
            let (env, data) = load_inputs(&a)?;
            let (p, report) = train_robust_dpo(&cfg, &env, &data)?;
            let model = ModelFile::new(ModelKind::Dpo, &env, p.theta, p.radius, Some(cfg.beta), cfg.digest());
            write_outputs(&a.out, &model, &report)
        }
        Command::TrainPolicy { train, reward, optimum } => {
            let cfg = load_config(&train.config)?.policy_section()?.clone();
            let (env, data) = load_inputs(&train)?;
            let reward = load_reward(&reward, &env)?;
            let optimum = match optimum {
                Some(path) => {
                    let o: OracleResult = io::from_json(&io::read_text(&path)?)?;
                    Some(PolicyParams::new(o.params, cfg.resolved_radius(&env))?)
                }
                None => None,
            };
            let (p, report) = train_robust_policy_tracked(&cfg, &env, &data, &reward, optimum.as_ref())?;
            let model = ModelFile::new(ModelKind::Policy, &env, p.theta, p.radius, Some(cfg.beta), cfg.digest());
            write_outputs(&train.out, &model, &report)
        }
        Command::Eval { env, model, rho, divergence, support, reward, reward_shift, out } => {
            let env = io::load_env(&env)?;
            let model = io::load_model(&model)?;
            let reward = reward.map(|p| load_reward(&p, &env)).transpose()?;
            let spec = DivergenceSpec::new(divergence, rho)?;
            let report = evaluate(&env, &model, spec, support, reward.as_ref(), reward_shift)?;
            io::write_text(&out, &io::to_json(&report))
        }
        Command::BiasCheck { env, model, n, rho, trials, divergence, seed, out } => {
            let env = io::load_env(&env)?;
            let model = io::load_model(&model)?;
            model.check_env(&env)?;
            if model.kind != ModelKind::Reward {
                return Err(Error::Config("bias-check needs a reward model".into()));
            }
            let reward = RewardParams::new(model.params, model.radius)?;
            let check = bias_check(&reward, &env, n, DivergenceSpec::new(divergence, rho)?, trials, seed)?;
            io::write_text(&out, &io::to_json(&check))
        }
        Command::Oracle { target, env, rho, divergence, support, beta, reward, reward_shift, seed, out } => {
            let env = io::load_env(&env)?;
            let spec = DivergenceSpec::new(divergence, rho)?;
            let need_beta = || -> Result<KlConfig> {
                let b = beta.ok_or_else(|| Error::Config(format!("--beta is required for target {}", target.as_str())))?;
                KlConfig::new(b).map_err(|e| Error::Config(e.to_string()))
            };
            let result = match target {
                ModelKind::Reward => oracle_optimum_reward(&env, spec, support)?,
                ModelKind::Dpo => oracle_optimum_dpo(&env, need_beta()?, spec, support)?,
                ModelKind::Policy => {
                    let kl = need_beta()?;
                    let path = reward.ok_or_else(|| Error::Config("--reward is required for target policy".into()))?;
                    let r = load_reward(&path, &env)?;
                    let shift = reward_shift.unwrap_or(r.radius);
                    oracle_optimum_policy(&env, kl, &r.omega, shift, spec, seed)?
                }
            };
            io::write_text(&out, &io::to_json(&result))
        }
        Command::Sweep { config } => sweep(&load_config(&config)?),
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::from_json(&io::read_text(path)?)
}

fn load_inputs(a: &TrainArgs) -> Result<(FeatureEnv, PreferenceDataset)> {
    let env = io::load_env(&a.env)?;
    let data = io::load_dataset(&a.data, &env)?;
    Ok((env, data))
}

fn load_reward(path: &Path, env: &FeatureEnv) -> Result<RewardParams> {
    let model = io::load_model(path)?;
    if model.kind != ModelKind::Reward {
        return Err(Error::Config(format!(
            "{} is a {} model, expected a reward model",
            path.display(),
            model.kind.as_str()
        )));
    }
    model.check_env(env)?;
    RewardParams::new(model.params, model.radius)
}

fn write_outputs(out: &[PathBuf], model: &ModelFile, report: &TrainReport) -> Result<()> {
    io::save_model(&out[0], model)?;
    io::write_text(&out[1], &report.to_csv())
}

fn gen(config: &Path, env_out: &Path, data_out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let (env, data) = generate(&cfg)?;
    io::save_env(env_out, &env)?;
    io::save_dataset(data_out, &data)
}

fn generate(cfg: &ExperimentConfig) -> Result<(FeatureEnv, PreferenceDataset)> {
    let section = cfg.env_section()?;
    let env = generate_env(cfg.seed, section.shape())?;
    let data = sample_dataset(&env, section.n_examples, section.dataset_seed.unwrap_or(cfg.seed))?;
    Ok((env, data))
}

/// Population evaluation of any model kind. Policy models are evaluated
/// over prompt shifts (minimizing the value); the empirical constants of the
/// policy analysis are attached as extras.
pub fn evaluate(
    env: &FeatureEnv,
    model: &ModelFile,
    spec: DivergenceSpec,
    support: PopulationSupport,
    reward: Option<&RewardParams>,
    reward_shift: Option<f64>,
) -> Result<EvalReport> {
    model.check_env(env)?;
    let beta = || -> Result<KlConfig> {
        let b = model
            .beta
            .ok_or_else(|| Error::Config(format!("{} model has no beta", model.kind.as_str())))?;
        KlConfig::new(b).map_err(|e| Error::Config(e.to_string()))
    };
    match model.kind {
        ModelKind::Reward => eval_reward(&model.params, env, spec, support),
        ModelKind::Dpo => eval_dpo(&model.params, env, beta()?, spec, support),
        ModelKind::Policy => {
            let r = reward.ok_or_else(|| Error::Config("evaluating a policy needs --reward".into()))?;
            let kl = beta()?;
            let shift = reward_shift.unwrap_or(r.radius);
            let mut rep = eval_policy(&model.params, env, kl, &r.omega, shift, spec)?;
            let constants = measure_constants(env, &model.params, kl, &r.omega, shift, &rep.worst_dist, None)?;
            rep.extras.extend(constants);
            rep.extras.insert("reward_shift".into(), shift);
            Ok(rep)
        }
    }
}

/// Number of sweep workers: `DRO_PREF_THREADS` if set, else the core count.
pub fn thread_limit() -> Result<usize> {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var(THREADS_ENV) {
        Ok(v) => match usize::from_str(v.trim()) {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(cores),
    }
}

/// Directory name of a sweep cell.
pub fn cell_name(rho: f64) -> String {
    format!("rho-{rho}")
}

#[derive(Debug, Serialize)]
struct Manifest {
    schema: &'static str,
    build_id: String,
    /// `sha256(Σ "path sha256\n")` over the sorted file list.
    digest: String,
    files: std::collections::BTreeMap<String, String>,
}

fn sweep(cfg: &ExperimentConfig) -> Result<()> {
    let section = cfg.sweep_section()?;
    let out_dir = cfg
        .out_dir
        .clone()
        .ok_or_else(|| Error::Config("sweep needs \"out_dir\"".into()))?;
    let (env, data) = generate(cfg)?;
    // Validate the template section before spawning anything.
    match section.target {
        ModelKind::Reward => cfg.reward_section().map(|_| ())?,
        ModelKind::Dpo => cfg.dpo_section().map(|_| ())?,
        ModelKind::Policy => cfg.policy_section().map(|_| ())?,
    }
    let files = Mutex::new(std::collections::BTreeMap::new());
    let record = |rel: String, content: &str| files.lock().expect("no panics while locked").insert(rel, sha256_hex(content.as_bytes()));

    let env_text = io::env_to_json(&env);
    let data_text = io::dataset_to_json(&data);
    io::write_text(out_dir.join("env.json"), &env_text)?;
    io::write_text(out_dir.join("data.json"), &data_text)?;
    record("env.json".into(), &env_text);
    record("data.json".into(), &data_text);

    let next = AtomicUsize::new(0);
    let first_error: Mutex<Option<Error>> = Mutex::new(None);
    let workers = thread_limit()?.min(section.rhos.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&rho) = section.rhos.get(i) else { break };
                if first_error.lock().expect("no panics while locked").is_some() {
                    break;
                }
                match run_cell(cfg, section, &env, &data, rho) {
                    Ok(outputs) => {
                        let dir = cell_name(rho);
                        for (name, content, digest_content) in outputs {
                            let rel = format!("{dir}/{name}");
                            if let Err(e) = io::write_text(out_dir.join(&rel), &content) {
                                first_error.lock().expect("no panics while locked").get_or_insert(e);
                                return;
                            }
                            record(rel, &digest_content);
                        }
                    }
                    Err(e) => {
                        first_error.lock().expect("no panics while locked").get_or_insert(e);
                    }
                }
            });
        }
    });
    if let Some(e) = first_error.into_inner().expect("no panics while locked") {
        return Err(e);
    }

    let files = files.into_inner().expect("no panics while locked");
    let listing: String = files.iter().map(|(p, h)| format!("{p} {h}\n")).collect();
    let manifest = Manifest {
        schema: MANIFEST_SCHEMA,
        build_id: build_id(),
        digest: sha256_hex(listing.as_bytes()),
        files,
    };
    io::write_text(out_dir.join("manifest.json"), &io::to_json(&manifest))
}

/// Trains and evaluates one cell. Returns `(file name, content, content
/// used for the manifest digest)`; the report digest excludes wall-clock
/// time so that repeated runs produce the same manifest.
fn run_cell(
    cfg: &ExperimentConfig,
    section: &SweepSection,
    env: &FeatureEnv,
    data: &PreferenceDataset,
    rho: f64,
) -> Result<Vec<(&'static str, String, String)>> {
    let (model, report, divergence) = match section.target {
        ModelKind::Reward => {
            let mut c = cfg.reward_section()?.clone();
            c.rho = rho;
            let (m, report) = train_robust_reward(&c, env, data)?;
            (ModelFile::new(ModelKind::Reward, env, m.omega, m.radius, None, c.digest()), report, c.divergence)
        }
        ModelKind::Dpo => {
            let mut c = cfg.dpo_section()?.clone();
            c.rho = rho;
            let (p, report) = train_robust_dpo(&c, env, data)?;
            (ModelFile::new(ModelKind::Dpo, env, p.theta, p.radius, Some(c.beta), c.digest()), report, c.divergence)
        }
        ModelKind::Policy => {
            let mut c = cfg.policy_section()?.clone();
            c.rho = rho;
            let reward = true_reward(env)?;
            let (p, report) = train_robust_policy_tracked(&c, env, data, &reward, None)?;
            (ModelFile::new(ModelKind::Policy, env, p.theta, p.radius, Some(c.beta), c.digest()), report, c.divergence)
        }
    };
    let spec = DivergenceSpec::new(section.eval_divergence.unwrap_or(divergence), rho)?;
    let reward = true_reward(env)?;
    let shift = match section.target {
        ModelKind::Policy => Some(cfg.policy_section()?.resolved_shift(&reward)),
        _ => None,
    };
    let eval = evaluate(env, &model, spec, section.support, Some(&reward), shift)?;
    let model_text = io::model_to_json(&model);
    let eval_text = io::to_json(&eval);
    Ok(vec![
        ("model.json", model_text.clone(), model_text),
        ("report.csv", report.to_csv(), report.to_csv_with(false)),
        ("eval.json", eval_text.clone(), eval_text),
    ])
}

/// Policy sweeps optimize against the environment's true reward.
fn true_reward(env: &FeatureEnv) -> Result<RewardParams> {
    RewardParams::new(env.true_reward_params().to_vec(), env.reward_radius())
}
