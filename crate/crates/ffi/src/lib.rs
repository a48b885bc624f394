//! C ABI over `falcon-core`.
//!
//! Objects cross the boundary as opaque handles created by `*_new` / `*_build`
//! style functions and released by the matching `*_free`. Every fallible call
//! returns a [`FalconStatus`]; on failure, [`falcon_last_error`] describes it.
//! Panics never unwind into the caller.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use falcon::config::ExperimentConfig;
use falcon::fedtrain::Variant;
use falcon::metrics::{evaluate, ScoredLabels};
use falcon::pipeline::{build_world, eval_metrics, run_variant, World};
use falcon::Error;

/// Result of every fallible call. The first four match the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FalconStatus {
    Ok = 0,
    /// Invalid configuration, key, or variant name.
    Config = 2,
    /// Bad or inconsistent input data.
    Data = 3,
    /// Training produced non-finite values.
    Divergence = 4,
    NullArgument = 10,
    InvalidUtf8 = 11,
    /// The output buffer is shorter than the required length.
    BufferTooSmall = 12,
    Panic = 13,
}

/// An experiment configuration.
pub struct FalconConfig(ExperimentConfig);

/// A generated population with its epidemic outcome and label split.
pub struct FalconWorld(World);

/// Scores from one trained variant.
pub struct FalconRun {
    scores: Vec<f64>,
}

/// Ranking and threshold metrics over a set of scored users.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FalconMetrics {
    pub auc: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub bep: f64,
    pub dep: f64,
    pub r_m: f64,
}

impl From<falcon::metrics::Metrics> for FalconMetrics {
    fn from(m: falcon::metrics::Metrics) -> Self {
        Self {
            auc: m.auc,
            f1: m.f1,
            accuracy: m.accuracy,
            bep: m.bep,
            dep: m.dep,
            r_m: m.r_m,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Fail(FalconStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match e.exit_code() {
            2 => FalconStatus::Config,
            4 => FalconStatus::Divergence,
            _ => FalconStatus::Data,
        };
        Fail(status, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(FalconStatus::NullArgument, format!("`{what}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FalconStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            FalconStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal panic: {msg}"));
            FalconStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        Fail(
            FalconStatus::InvalidUtf8,
            format!("`{what}` is not valid UTF-8"),
        )
    })
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn falcon_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or an empty string.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn falcon_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Creates the default desk-scale configuration.
///
/// # Safety
/// `out` must be a valid pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn falcon_config_new(out: *mut *mut FalconConfig) -> FalconStatus {
    guard(|| put(out, FalconConfig(ExperimentConfig::default())))
}

/// Parses a TOML document; missing keys take their defaults.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn falcon_config_from_toml(
    toml: *const c_char,
    out: *mut *mut FalconConfig,
) -> FalconStatus {
    guard(|| {
        let text = str_arg(toml, "toml")?;
        put(
            out,
            FalconConfig(ExperimentConfig::from_sources(Some(text), &[])?),
        )
    })
}

/// Sets one dotted key, such as `model.epochs`, from its TOML literal text.
/// The configuration is unchanged on failure.
///
/// # Safety
/// `cfg` must be a live handle; `key` and `value` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn falcon_config_set(
    cfg: *mut FalconConfig,
    key: *const c_char,
    value: *const c_char,
) -> FalconStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null("cfg"))?;
        let key = str_arg(key, "key")?.to_string();
        let value = str_arg(value, "value")?.to_string();
        let text = cfg.0.to_toml();
        cfg.0 = ExperimentConfig::from_sources(Some(&text), &[(key, value)])?;
        Ok(())
    })
}

/// Serializes the configuration as TOML. Release with [`falcon_string_free`].
///
/// # Safety
/// `cfg` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn falcon_config_to_toml(
    cfg: *const FalconConfig,
    out: *mut *mut c_char,
) -> FalconStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = CString::new(cfg.0.to_toml())
            .expect("toml has no NUL")
            .into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library, or be null.
#[no_mangle]
pub unsafe extern "C" fn falcon_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `cfg` must come from this library, or be null.
#[no_mangle]
pub unsafe extern "C" fn falcon_config_free(cfg: *mut FalconConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Generates mobility, runs the epidemic and draws the label split.
///
/// # Safety
/// `cfg` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn falcon_world_build(
    cfg: *const FalconConfig,
    out: *mut *mut FalconWorld,
) -> FalconStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        put(out, FalconWorld(build_world(&cfg.0)?))
    })
}

/// Number of users, or 0 for a null handle.
///
/// # Safety
/// `world` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn falcon_world_n_users(world: *const FalconWorld) -> usize {
    world.as_ref().map_or(0, |w| w.0.labels.len())
}

/// # Safety
/// `world` must come from this library, or be null.
#[no_mangle]
pub unsafe extern "C" fn falcon_world_free(world: *mut FalconWorld) {
    if !world.is_null() {
        drop(Box::from_raw(world));
    }
}

/// Trains the named variant (`falcon`, `wo-macro`, `hgnn-central`, `dct`, ...).
///
/// # Safety
/// `cfg` and `world` must be live handles, `variant` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn falcon_train(
    cfg: *const FalconConfig,
    world: *const FalconWorld,
    variant: *const c_char,
    out: *mut *mut FalconRun,
) -> FalconStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        let world = ref_arg(world, "world")?;
        let name = str_arg(variant, "variant")?;
        let variant = Variant::parse(name)
            .ok_or_else(|| Fail(FalconStatus::Config, format!("unknown variant `{name}`")))?;
        let run = run_variant(&cfg.0, &world.0, variant, None, None)?;
        put(out, FalconRun { scores: run.scores })
    })
}

/// Copies per-user infection scores into `buf`. `*len` always receives the
/// number of users; a null or short `buf` yields `BufferTooSmall`.
///
/// # Safety
/// `run` must be a live handle, `len` writable, and `buf` valid for `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn falcon_run_scores(
    run: *const FalconRun,
    buf: *mut f64,
    capacity: usize,
    len: *mut usize,
) -> FalconStatus {
    guard(|| {
        let run = ref_arg(run, "run")?;
        if len.is_null() {
            return Err(null("len"));
        }
        *len = run.scores.len();
        if buf.is_null() || capacity < run.scores.len() {
            return Err(Fail(
                FalconStatus::BufferTooSmall,
                format!("need {} slots, got {capacity}", run.scores.len()),
            ));
        }
        std::ptr::copy_nonoverlapping(run.scores.as_ptr(), buf, run.scores.len());
        Ok(())
    })
}

/// Metrics over the held-out users of `world`.
///
/// # Safety
/// All handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn falcon_run_metrics(
    cfg: *const FalconConfig,
    world: *const FalconWorld,
    run: *const FalconRun,
    out: *mut FalconMetrics,
) -> FalconStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        let world = ref_arg(world, "world")?;
        let run = ref_arg(run, "run")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if run.scores.len() != world.0.labels.len() {
            return Err(Fail(
                FalconStatus::Data,
                "run and world disagree on user count".into(),
            ));
        }
        *out = eval_metrics(&cfg.0, &world.0, &run.scores)?.into();
        Ok(())
    })
}

/// # Safety
/// `run` must come from this library, or be null.
#[no_mangle]
pub unsafe extern "C" fn falcon_run_free(run: *mut FalconRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Metrics for arbitrary scores; `labels[i]` is nonzero for positives.
/// `r0` sets the reproduction number used by the DEP metric.
///
/// # Safety
/// `scores` and `labels` must be valid for `n` elements; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn falcon_metrics_from_scores(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    r0: f64,
    out: *mut FalconMetrics,
) -> FalconStatus {
    guard(|| {
        if scores.is_null() || labels.is_null() {
            return Err(null("scores/labels"));
        }
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let s = std::slice::from_raw_parts(scores, n).to_vec();
        let l = std::slice::from_raw_parts(labels, n)
            .iter()
            .map(|&b| b != 0)
            .collect();
        *out = evaluate(&ScoredLabels::new(s, l)?, r0)?.into();
        Ok(())
    })
}
