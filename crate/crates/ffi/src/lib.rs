//! C ABI for `dro-pref`.
//!
//! Objects cross the boundary as opaque handles (`DroEnv`, `DroDataset`,
//! `DroParams`) that the caller releases with the matching `*_free`. Every
//! entry point returns a [`DroStatus`]; on failure the message is available
//! from [`dro_last_error_message`] on the same thread. Panics are caught at
//! the boundary and reported as [`DroStatus::Panic`].
//!
//! Strings returned through `char **` outputs are owned by the caller and
//! must be released with [`dro_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use dro_pref::cli::evaluate;
use dro_pref::divergence::shift_distribution;
use dro_pref::io::{self, ModelFile};
use dro_pref::{
    generate_env, sample_dataset, train_robust_dpo, train_robust_policy, train_robust_reward,
    DivergenceKind, DivergenceSpec, DpoTrainConfig, EnvShape, Error, FeatureEnv, ModelKind,
    PolicyTrainConfig, PopulationSupport, PreferenceDataset, RewardParams, RewardTrainConfig,
    Sense,
};

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DroStatus {
    Ok = 0,
    /// Any failure not covered below (internal contract violations).
    Error = 1,
    /// Malformed configuration or document.
    Config = 2,
    /// Inputs were produced from a different environment.
    DigestMismatch = 3,
    /// A solver failed or produced a non-finite value.
    Numerical = 4,
    InvalidArgument = 5,
    Io = 6,
    /// A panic was caught at the boundary; handles passed in are still valid.
    Panic = 7,
    NullPointer = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DroDivergence {
    Tv = 0,
    Chi2 = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DroSense {
    /// Adversarial weights for a loss.
    Max = 0,
    /// Adversarial weights for a value.
    Min = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DroSupport {
    Prompt = 0,
    Joint = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DroModelKind {
    Reward = 0,
    Policy = 1,
    Dpo = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DroEnvShape {
    pub num_prompts: usize,
    pub num_completions: usize,
    pub d_reward: usize,
    pub d_policy: usize,
    pub reward_radius: f64,
    pub policy_radius: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DroEvalResult {
    pub standard_loss: f64,
    pub robust_loss: f64,
}

/// Opaque environment handle.
pub struct DroEnv(FeatureEnv);

/// Opaque dataset handle.
pub struct DroDataset(PreferenceDataset);

/// Opaque trained-parameter handle (parameters plus model metadata).
pub struct DroParams(ModelFile);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DroStatus {
    match e {
        Error::Config(_) | Error::Parse(_) => DroStatus::Config,
        Error::DigestMismatch { .. } => DroStatus::DigestMismatch,
        Error::NumericalFailure { .. } | Error::DegenerateGeometry { .. } | Error::NonFiniteLoss { .. } => {
            DroStatus::Numerical
        }
        Error::InvalidArgument(_)
        | Error::InvalidDimension(_)
        | Error::EmptyInput(_)
        | Error::DimensionTooLarge(_) => DroStatus::InvalidArgument,
        Error::Io { .. } => DroStatus::Io,
        Error::Contract(_) => DroStatus::Error,
    }
}

/// Internal failure carrying the status to report.
struct Fail(DroStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(DroStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(DroStatus::InvalidArgument, msg.into())
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DroStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            DroStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            DroStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn put<T>(out: *mut *mut T, value: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("string output"));
    }
    *out = CString::new(s).map_err(|_| Fail(DroStatus::Error, "string contains NUL".into()))?.into_raw();
    Ok(())
}

unsafe fn free_box<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

fn divergence(d: DroDivergence) -> DivergenceKind {
    match d {
        DroDivergence::Tv => DivergenceKind::Tv,
        DroDivergence::Chi2 => DivergenceKind::ChiSq,
    }
}

fn model_kind(k: ModelKind) -> DroModelKind {
    match k {
        ModelKind::Reward => DroModelKind::Reward,
        ModelKind::Policy => DroModelKind::Policy,
        ModelKind::Dpo => DroModelKind::Dpo,
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dro_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL after a
/// successful call. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn dro_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from a `char **` output of this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn dro_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Draws a random environment.
///
/// # Safety
/// `shape` must point to a valid shape; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dro_env_generate(seed: u64, shape: *const DroEnvShape, out: *mut *mut DroEnv) -> DroStatus {
    guard(|| {
        let s = as_ref(shape, "shape")?;
        let env = generate_env(
            seed,
            EnvShape {
                num_prompts: s.num_prompts,
                num_completions: s.num_completions,
                d_reward: s.d_reward,
                d_policy: s.d_policy,
                reward_radius: s.reward_radius,
                policy_radius: s.policy_radius,
            },
        )?;
        put(out, DroEnv(env), "out")
    })
}

/// Parses an environment document.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dro_env_from_json(json: *const c_char, out: *mut *mut DroEnv) -> DroStatus {
    guard(|| {
        let env = io::env_from_json(str_arg(json, "json")?)?;
        put(out, DroEnv(env), "out")
    })
}

/// Reads an environment file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dro_env_load(path: *const c_char, out: *mut *mut DroEnv) -> DroStatus {
    guard(|| {
        let env = io::load_env(str_arg(path, "path")?)?;
        put(out, DroEnv(env), "out")
    })
}

/// Serializes an environment to JSON.
///
/// # Safety
/// `env` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dro_env_to_json(env: *const DroEnv, out: *mut *mut c_char) -> DroStatus {
    guard(|| put_string(out, io::env_to_json(&as_ref(env, "env")?.0)))
}

/// Hex SHA-256 content digest of an environment.
///
/// # Safety
/// `env` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dro_env_digest(env: *const DroEnv, out: *mut *mut c_char) -> DroStatus {
    guard(|| put_string(out, as_ref(env, "env")?.0.digest()))
}

/// # Safety
/// `env` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dro_env_free(env: *mut DroEnv) {
    free_box(env);
}

/// Samples `n` labelled comparisons from `env`.
///
/// # Safety
/// `env` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dro_dataset_sample(
    env: *const DroEnv,
    n: usize,
    seed: u64,
    out: *mut *mut DroDataset,
) -> DroStatus {
    guard(|| {
        let data = sample_dataset(&as_ref(env, "env")?.0, n, seed)?;
        put(out, DroDataset(data), "out")
    })
}

/// Parses a dataset document and checks it belongs to `env`.
///
/// # Safety
/// `env` must be a live handle, `json` a NUL-terminated string, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dro_dataset_from_json(
    env: *const DroEnv,
    json: *const c_char,
    out: *mut *mut DroDataset,
) -> DroStatus {
    guard(|| {
        let data = io::dataset_from_json(str_arg(json, "json")?, &as_ref(env, "env")?.0)?;
        put(out, DroDataset(data), "out")
    })
}

/// Number of comparisons in a dataset (0 for NULL).
///
/// # Safety
/// `data` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dro_dataset_len(data: *const DroDataset) -> usize {
    data.as_ref().map_or(0, |d| d.0.len())
}

/// # Safety
/// `data` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dro_dataset_free(data: *mut DroDataset) {
    free_box(data);
}

unsafe fn train_inputs<'a>(
    env: *const DroEnv,
    data: *const DroDataset,
    config_json: *const c_char,
) -> Result<(&'a FeatureEnv, &'a PreferenceDataset, &'a str), Fail> {
    Ok((
        &as_ref(env, "env")?.0,
        &as_ref(data, "data")?.0,
        str_arg(config_json, "config_json")?,
    ))
}

unsafe fn finish_training(
    model: ModelFile,
    report: dro_pref::TrainReport,
    out: *mut *mut DroParams,
    report_csv: *mut *mut c_char,
) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    if !report_csv.is_null() {
        put_string(report_csv, report.to_csv())?;
    }
    put(out, DroParams(model), "out")
}

/// Trains a robust reward model. `config_json` is a reward trainer section,
/// e.g. `{"iterations": 1000, "batch_size": 64, "rho": 0.1}`. When
/// `report_csv` is non-NULL it receives the per-iteration report.
///
/// # Safety
/// Handles must be live, `config_json` NUL-terminated, `out` writable and
/// `report_csv` NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn dro_train_reward(
    env: *const DroEnv,
    data: *const DroDataset,
    config_json: *const c_char,
    out: *mut *mut DroParams,
    report_csv: *mut *mut c_char,
) -> DroStatus {
    guard(|| {
        let (env, data, cfg) = train_inputs(env, data, config_json)?;
        let cfg: RewardTrainConfig = io::from_json(cfg)?;
        let (m, report) = train_robust_reward(&cfg, env, data)?;
        let model = ModelFile::new(ModelKind::Reward, env, m.omega, m.radius, None, cfg.digest());
        finish_training(model, report, out, report_csv)
    })
}

/// Trains a policy with robust DPO; `config_json` is a DPO trainer section.
///
/// # Safety
/// As [`dro_train_reward`].
#[no_mangle]
pub unsafe extern "C" fn dro_train_dpo(
    env: *const DroEnv,
    data: *const DroDataset,
    config_json: *const c_char,
    out: *mut *mut DroParams,
    report_csv: *mut *mut c_char,
) -> DroStatus {
    guard(|| {
        let (env, data, cfg) = train_inputs(env, data, config_json)?;
        let cfg: DpoTrainConfig = io::from_json(cfg)?;
        let (p, report) = train_robust_dpo(&cfg, env, data)?;
        let model = ModelFile::new(ModelKind::Dpo, env, p.theta, p.radius, Some(cfg.beta), cfg.digest());
        finish_training(model, report, out, report_csv)
    })
}

/// Trains a robust policy by natural policy gradient against the reward
/// model `reward`; `config_json` is a policy trainer section.
///
/// # Safety
/// As [`dro_train_reward`]; `reward` must be a live reward-model handle.
#[no_mangle]
pub unsafe extern "C" fn dro_train_policy(
    env: *const DroEnv,
    data: *const DroDataset,
    reward: *const DroParams,
    config_json: *const c_char,
    out: *mut *mut DroParams,
    report_csv: *mut *mut c_char,
) -> DroStatus {
    guard(|| {
        let (env, data, cfg) = train_inputs(env, data, config_json)?;
        let reward = reward_params(reward, env)?;
        let cfg: PolicyTrainConfig = io::from_json(cfg)?;
        let (p, report) = train_robust_policy(&cfg, env, data, &reward)?;
        let model = ModelFile::new(ModelKind::Policy, env, p.theta, p.radius, Some(cfg.beta), cfg.digest());
        finish_training(model, report, out, report_csv)
    })
}

unsafe fn reward_params(p: *const DroParams, env: &FeatureEnv) -> Result<RewardParams, Fail> {
    let m = &as_ref(p, "reward")?.0;
    if m.kind != ModelKind::Reward {
        return Err(invalid(format!("expected a reward model, got {}", m.kind.as_str())));
    }
    m.check_env(env)?;
    Ok(RewardParams::new(m.params.clone(), m.radius)?)
}

/// Wraps raw parameters as a model for `env`. `beta` is required (> 0) for
/// policy and DPO models and ignored for reward models.
///
/// # Safety
/// `env` must be live, `values` must hold `len` doubles, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dro_params_new(
    env: *const DroEnv,
    kind: DroModelKind,
    values: *const f64,
    len: usize,
    radius: f64,
    beta: f64,
    out: *mut *mut DroParams,
) -> DroStatus {
    guard(|| {
        let env = &as_ref(env, "env")?.0;
        let values = slice_arg(values, len, "values")?.to_vec();
        let (kind, beta) = match kind {
            DroModelKind::Reward => (ModelKind::Reward, None),
            DroModelKind::Policy => (ModelKind::Policy, Some(beta)),
            DroModelKind::Dpo => (ModelKind::Dpo, Some(beta)),
        };
        if let Some(b) = beta {
            if !(b > 0.0) || !b.is_finite() {
                return Err(invalid(format!("beta must be positive, got {b}")));
            }
        }
        let model = ModelFile::new(kind, env, values, radius, beta, String::new());
        model.check_env(env)?;
        put(out, DroParams(model), "out")
    })
}

/// Number of parameters (0 for NULL).
///
/// # Safety
/// `params` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dro_params_dim(params: *const DroParams) -> usize {
    params.as_ref().map_or(0, |p| p.0.params.len())
}

/// Model kind of a parameter handle.
///
/// # Safety
/// `params` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dro_params_kind(params: *const DroParams, out: *mut DroModelKind) -> DroStatus {
    guard(|| {
        let kind = model_kind(as_ref(params, "params")?.0.kind);
        out.as_mut().map(|o| *o = kind).ok_or_else(|| null("out"))
    })
}

/// Copies the parameters into `buf`, which must hold at least
/// `dro_params_dim(params)` doubles.
///
/// # Safety
/// `params` must be live; `buf` must be writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn dro_params_copy(params: *const DroParams, buf: *mut f64, len: usize) -> DroStatus {
    guard(|| {
        let p = &as_ref(params, "params")?.0.params;
        if buf.is_null() {
            return Err(null("buf"));
        }
        if len < p.len() {
            return Err(invalid(format!("buffer holds {len} values, need {}", p.len())));
        }
        ptr::copy_nonoverlapping(p.as_ptr(), buf, p.len());
        Ok(())
    })
}

/// Serializes a parameter handle as a model document.
///
/// # Safety
/// `params` must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dro_params_to_json(params: *const DroParams, out: *mut *mut c_char) -> DroStatus {
    guard(|| put_string(out, io::model_to_json(&as_ref(params, "params")?.0)))
}

/// # Safety
/// `params` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dro_params_free(params: *mut DroParams) {
    free_box(params);
}

/// Standard and worst-case population loss of a model. Policy models need a
/// reward model in `reward` (NULL otherwise) and are evaluated over prompt
/// shifts with the default reward shift; `support` applies to reward and
/// DPO models.
///
/// # Safety
/// `env` and `params` must be live, `reward` NULL or live, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dro_eval(
    env: *const DroEnv,
    params: *const DroParams,
    reward: *const DroParams,
    rho: f64,
    divergence_kind: DroDivergence,
    support: DroSupport,
    out: *mut DroEvalResult,
) -> DroStatus {
    guard(|| {
        let env = &as_ref(env, "env")?.0;
        let model = &as_ref(params, "params")?.0;
        let reward = if reward.is_null() { None } else { Some(reward_params(reward, env)?) };
        let support = match support {
            DroSupport::Prompt => PopulationSupport::Prompt,
            DroSupport::Joint => PopulationSupport::Joint,
        };
        let spec = DivergenceSpec::new(divergence(divergence_kind), rho)?;
        let rep = evaluate(env, model, spec, support, reward.as_ref(), None)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = DroEvalResult {
            standard_loss: rep.standard_loss,
            robust_loss: rep.robust_loss,
        };
        Ok(())
    })
}

/// Worst-case distribution within radius `rho` of the reference `p` (uniform
/// when `p` is NULL) for the values in `losses`. Writes `len` weights to
/// `out_weights` and, when non-NULL, the reweighted objective to
/// `out_objective`.
///
/// # Safety
/// `losses` (and `p` if non-NULL) must hold `len` doubles; `out_weights`
/// must be writable for `len` doubles.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn dro_worst_case_weights(
    losses: *const f64,
    p: *const f64,
    len: usize,
    rho: f64,
    divergence_kind: DroDivergence,
    sense: DroSense,
    out_weights: *mut f64,
    out_objective: *mut f64,
) -> DroStatus {
    guard(|| {
        let losses = slice_arg(losses, len, "losses")?;
        let uniform;
        let p = if p.is_null() {
            if len == 0 {
                return Err(invalid("losses must not be empty"));
            }
            uniform = vec![1.0 / len as f64; len];
            uniform.as_slice()
        } else {
            slice_arg(p, len, "p")?
        };
        if out_weights.is_null() {
            return Err(null("out_weights"));
        }
        let sense = match sense {
            DroSense::Max => Sense::Max,
            DroSense::Min => Sense::Min,
        };
        let (q, objective) = shift_distribution(p, losses, rho, divergence(divergence_kind), sense)?;
        ptr::copy_nonoverlapping(q.as_ptr(), out_weights, len);
        if let Some(o) = out_objective.as_mut() {
            *o = objective;
        }
        Ok(())
    })
}
