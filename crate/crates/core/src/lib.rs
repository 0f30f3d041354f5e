//! Distributionally robust preference optimization on finite prompt and
//! completion spaces.
//!
//! The crate provides a synthetic linear environment, worst-case reweighting
//! inside TV and χ² balls, exact loss/value/gradient functions, three robust
//! trainers (reward estimation, natural policy gradient, DPO) and an
//! evaluation harness with brute-force oracles.

// `!(x >= 0.0)` is used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod divergence;
pub mod dpo;
pub mod env;
pub mod error;
pub mod eval;
pub mod io;
pub mod linalg;
pub mod losses;
pub mod oracle;
pub mod policy;
pub mod report;
pub mod reward;
pub mod rng;
pub mod train;
pub mod vecops;

pub use divergence::{DivergenceKind, DivergenceSpec, Sense, WeightSolution};
pub use env::{
    generate_env, sample_dataset, EnvParts, EnvShape, FeatureEnv, PreferenceDataset,
    PreferenceExample,
};
pub use error::{Error, Result};
pub use losses::{KlConfig, PolicyParams, RewardParams};
pub use dpo::{train_robust_dpo, DpoTrainConfig};
pub use policy::{potential, train_robust_policy, train_robust_policy_tracked, PolicyMode, PolicyTrainConfig};
pub use report::{ReportRow, TrainReport};
pub use reward::{train_robust_reward, RewardTrainConfig};
pub use train::{OutputMode, StepSize};
pub use eval::{EvalReport, PopulationSupport};
pub use io::ModelKind;
pub use config::ExperimentConfig;
