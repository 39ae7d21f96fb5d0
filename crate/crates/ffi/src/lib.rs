//! C interface to the simulator. Objects cross the boundary as opaque
//! handles; every fallible call returns a [`FedolfStatus`] and leaves a
//! message for [`fedolf_last_error`] on failure. Strings are UTF-8 and
//! NUL-terminated. Handles must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use fedolf::cli;
use fedolf::config::ExperimentConfig;
use fedolf::costmodel::{self, MemoryMode, ModelProfile};
use fedolf::data::PartitionedDataset;
use fedolf::diagnostics::{self, Regime};
use fedolf::federation::FederatedRun;
use fedolf::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FedolfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Runtime = 4,
    OutOfRange = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FedolfRegime {
    SmallStep = 0,
    LargeStep = 1,
    Invalid = 2,
}

/// A parsed, validated experiment configuration.
pub struct FedolfConfig {
    inner: ExperimentConfig,
}

/// A finished federated run.
pub struct FedolfRun {
    cfg: ExperimentConfig,
    run: FederatedRun,
    data: PartitionedDataset,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn fail(status: FedolfStatus, msg: impl Into<String>) -> FedolfStatus {
    set_error(msg);
    status
}

fn from_error(e: Error) -> FedolfStatus {
    let status = if e.is_config() { FedolfStatus::Config } else { FedolfStatus::Runtime };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> FedolfStatus) -> FedolfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(FedolfStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, FedolfStatus> {
    if p.is_null() {
        return Err(fail(FedolfStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(FedolfStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

/// Message describing the most recent failure on this thread. The pointer
/// stays valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn fedolf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, a static string.
#[no_mangle]
pub extern "C" fn fedolf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses a TOML configuration. On success `*out` owns a new handle.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fedolf_config_from_toml(toml: *const c_char, out: *mut *mut FedolfConfig) -> FedolfStatus {
    guard(|| {
        if out.is_null() {
            return fail(FedolfStatus::NullPointer, "out is null");
        }
        let text = match str_arg(toml, "toml") {
            Ok(t) => t,
            Err(s) => return s,
        };
        match ExperimentConfig::from_toml_str(text) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(FedolfConfig { inner }));
                FedolfStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Replaces the experiment seed.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn fedolf_config_set_seed(cfg: *mut FedolfConfig, seed: u64) -> FedolfStatus {
    match cfg.as_mut() {
        Some(c) => {
            c.inner.seed = seed;
            FedolfStatus::Ok
        }
        None => fail(FedolfStatus::NullPointer, "cfg is null"),
    }
}

/// # Safety
/// `cfg` must be null or a handle from `fedolf_config_from_toml`, freed once.
#[no_mangle]
pub unsafe extern "C" fn fedolf_config_free(cfg: *mut FedolfConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs the configured experiment. Relative data paths resolve against
/// `base_dir`, which may be null for the working directory.
///
/// # Safety
/// `cfg` must be a live handle, `base_dir` null or a NUL-terminated string,
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fedolf_run(
    cfg: *const FedolfConfig,
    base_dir: *const c_char,
    out: *mut *mut FedolfRun,
) -> FedolfStatus {
    guard(|| {
        let Some(cfg) = cfg.as_ref() else {
            return fail(FedolfStatus::NullPointer, "cfg is null");
        };
        if out.is_null() {
            return fail(FedolfStatus::NullPointer, "out is null");
        }
        let base = if base_dir.is_null() {
            PathBuf::new()
        } else {
            match str_arg(base_dir, "base_dir") {
                Ok(s) => PathBuf::from(s),
                Err(s) => return s,
            }
        };
        match cli::execute(&cfg.inner, &base) {
            Ok((run, data)) => {
                *out = Box::into_raw(Box::new(FedolfRun {
                    cfg: cfg.inner.clone(),
                    run,
                    data,
                }));
                FedolfStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Number of completed rounds; 0 for a null handle.
///
/// # Safety
/// `run` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fedolf_run_rounds(run: *const FedolfRun) -> usize {
    run.as_ref().map_or(0, |r| r.run.history.len())
}

/// Held-out accuracy of the global model after `round`.
///
/// # Safety
/// `run` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fedolf_run_accuracy(run: *const FedolfRun, round: usize, out: *mut f64) -> FedolfStatus {
    let (Some(r), false) = (run.as_ref(), out.is_null()) else {
        return fail(FedolfStatus::NullPointer, "run or out is null");
    };
    match r.run.history.rounds.get(round) {
        Some(rec) => {
            *out = rec.accuracy;
            FedolfStatus::Ok
        }
        None => fail(
            FedolfStatus::OutOfRange,
            format!("round {round} out of range for {} rounds", r.run.history.len()),
        ),
    }
}

/// Writes the same files as the `run` command into `dir` (created if needed).
///
/// # Safety
/// `run` must be a live handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fedolf_run_write_outputs(run: *const FedolfRun, dir: *const c_char) -> FedolfStatus {
    guard(|| {
        let Some(r) = run.as_ref() else {
            return fail(FedolfStatus::NullPointer, "run is null");
        };
        let dir = match str_arg(dir, "dir") {
            Ok(d) => Path::new(d),
            Err(s) => return s,
        };
        if let Err(e) = std::fs::create_dir_all(dir) {
            return fail(FedolfStatus::Runtime, format!("{}: {e}", dir.display()));
        }
        match cli::write_run_outputs(&r.cfg, &r.run, &r.data, dir) {
            Ok(()) => FedolfStatus::Ok,
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `run` must be null or a handle from `fedolf_run`, freed once.
#[no_mangle]
pub unsafe extern "C" fn fedolf_run_free(run: *mut FedolfRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Theoretical training memory of the configured model with `l_k` frozen
/// layers: ordered freezing, or the worst random placement when
/// `worst_case` is nonzero.
///
/// # Safety
/// `cfg` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fedolf_memory_bytes(
    cfg: *const FedolfConfig,
    l_k: usize,
    batch: usize,
    worst_case: i32,
    out: *mut u64,
) -> FedolfStatus {
    guard(|| {
        let (Some(c), false) = (cfg.as_ref(), out.is_null()) else {
            return fail(FedolfStatus::NullPointer, "cfg or out is null");
        };
        let profile = match c.inner.architecture().and_then(|a| ModelProfile::from_arch(&a)) {
            Ok(p) => p,
            Err(e) => return from_error(e),
        };
        if l_k >= profile.len() {
            return fail(
                FedolfStatus::OutOfRange,
                format!("l_k = {l_k} out of range for {} layers", profile.len()),
            );
        }
        let mode = if worst_case != 0 { MemoryMode::RandomWorstCase } else { MemoryMode::Ordered };
        match costmodel::theoretical_memory(&profile, l_k, batch, &mode) {
            Ok(m) => {
                *out = m;
                FedolfStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Error floor for step size `eta` given smoothness `l`, client variance
/// `gamma` and freezing divergence `d`. `*epsilon` is NaN when no bound
/// applies.
///
/// # Safety
/// `epsilon` and `regime` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn fedolf_epsilon(
    eta: f64,
    l: f64,
    gamma: f64,
    d: f64,
    epsilon: *mut f64,
    regime: *mut FedolfRegime,
) -> FedolfStatus {
    if epsilon.is_null() || regime.is_null() {
        return fail(FedolfStatus::NullPointer, "epsilon or regime is null");
    }
    let (e, r) = diagnostics::epsilon_bounds(eta, l, gamma, d);
    *epsilon = e.unwrap_or(f64::NAN);
    *regime = match r {
        Regime::SmallStep => FedolfRegime::SmallStep,
        Regime::LargeStep => FedolfRegime::LargeStep,
        Regime::Invalid => FedolfRegime::Invalid,
    };
    FedolfStatus::Ok
}
