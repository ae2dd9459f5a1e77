//! C interface to the simulator.
//!
//! Every fallible call returns a [`FedperStatus`]; on failure the message is
//! available from [`fedper_last_error_message`] on the same thread. Objects
//! are opaque handles released with their matching `*_free` function.
//! Strings returned through `char **` out-parameters belong to the caller and
//! are released with [`fedper_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fedper_core::config::ExperimentConfig;
use fedper_core::metrics::final_accuracy_stats;
use fedper_core::protocol::{self, RoundHistory, RunOptions};
use fedper_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FedperStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Bad argument or invalid request.
    Usage = 3,
    /// Configuration rejected.
    Config = 4,
    /// Malformed dataset file.
    Parse = 5,
    Protocol = 6,
    Io = 7,
    OutOfRange = 8,
    /// A panic was caught at the boundary.
    Internal = 9,
}

impl From<&Error> for FedperStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape { .. } | Error::Usage(_) | Error::EmptyDataset => FedperStatus::Usage,
            Error::Config(_) => FedperStatus::Config,
            Error::Parse { .. } | Error::Json(_) => FedperStatus::Parse,
            Error::Protocol(_) => FedperStatus::Protocol,
            Error::Io { .. } => FedperStatus::Io,
        }
    }
}

/// Experiment configuration handle.
pub struct FedperConfig {
    inner: ExperimentConfig,
}

/// Per-round, per-client metrics from a finished run.
pub struct FedperHistory {
    inner: RoundHistory,
}

struct Failure(FedperStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(FedperStatus::from(&e), e.to_string())
    }
}

type FfiResult<T> = Result<T, Failure>;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn guard<F: FnOnce() -> FfiResult<()>>(f: F) -> FedperStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FedperStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic".into());
            FedperStatus::Internal
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(FedperStatus::NullPointer, format!("{what} is null"))
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(FedperStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> FfiResult<()> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

fn to_c_string(s: String) -> FfiResult<*mut c_char> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure(FedperStatus::Internal, "string contains a NUL byte".into()))
}

unsafe fn config_ref<'a>(cfg: *const FedperConfig) -> FfiResult<&'a ExperimentConfig> {
    cfg.as_ref().map(|c| &c.inner).ok_or_else(|| null("config"))
}

unsafe fn history_ref<'a>(h: *const FedperHistory) -> FfiResult<&'a RoundHistory> {
    h.as_ref().map(|h| &h.inner).ok_or_else(|| null("history"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fedper_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or NULL. The pointer
/// stays valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn fedper_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `s` must be NULL or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn fedper_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses a JSON experiment configuration.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedper_config_from_json(json: *const c_char, out: *mut *mut FedperConfig) -> FedperStatus {
    guard(|| {
        let text = read_str(json, "json")?;
        let inner = ExperimentConfig::from_json(text)?;
        write_out(out, Box::into_raw(Box::new(FedperConfig { inner })), "out")
    })
}

/// Reads a JSON configuration file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedper_config_from_file(path: *const c_char, out: *mut *mut FedperConfig) -> FedperStatus {
    guard(|| {
        let path = read_str(path, "path")?;
        let inner = ExperimentConfig::from_path(Path::new(path))?;
        write_out(out, Box::into_raw(Box::new(FedperConfig { inner })), "out")
    })
}

/// Overrides one dotted key, e.g. `("partition.k", "2")`. On failure the
/// configuration is left unchanged.
///
/// # Safety
/// `cfg` must be a live handle; `key` and `value` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn fedper_config_set(
    cfg: *mut FedperConfig,
    key: *const c_char,
    value: *const c_char,
) -> FedperStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null("config"))?;
        let key = read_str(key, "key")?;
        let value = read_str(value, "value")?;
        let mut next = cfg.inner.clone();
        next.set(key, value)?;
        cfg.inner = next;
        Ok(())
    })
}

/// Serializes the configuration; free the result with `fedper_string_free`.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedper_config_to_json(cfg: *const FedperConfig, out: *mut *mut c_char) -> FedperStatus {
    guard(|| {
        let text = config_ref(cfg)?.to_json()?;
        write_out(out, to_c_string(text)?, "out")
    })
}

/// # Safety
/// `cfg` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fedper_config_free(cfg: *mut FedperConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Client → sample-index manifest as JSON, without training.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedper_partition_manifest_json(
    cfg: *const FedperConfig,
    out: *mut *mut c_char,
) -> FedperStatus {
    guard(|| {
        let manifest = config_ref(cfg)?.partition_manifest()?;
        let text = serde_json::to_string(&manifest).map_err(Error::from)?;
        write_out(out, to_c_string(text)?, "out")
    })
}

/// Trains the configured federation. `threads` of 0 or 1 runs serially;
/// results do not depend on it.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedper_run(
    cfg: *const FedperConfig,
    threads: usize,
    out: *mut *mut FedperHistory,
) -> FedperStatus {
    guard(|| {
        let cfg = config_ref(cfg)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let opts = RunOptions {
            threads,
            ..RunOptions::default()
        };
        let inner = cfg.execute(&opts)?.history;
        write_out(out, Box::into_raw(Box::new(FedperHistory { inner })), "out")
    })
}

/// Number of recorded rounds, 0 for a NULL handle.
///
/// # Safety
/// `h` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fedper_history_rounds(h: *const FedperHistory) -> usize {
    h.as_ref().map_or(0, |h| h.inner.rounds.len())
}

/// Number of clients per round, 0 for a NULL or empty history.
///
/// # Safety
/// `h` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fedper_history_num_clients(h: *const FedperHistory) -> usize {
    h.as_ref()
        .and_then(|h| h.inner.rounds.first())
        .map_or(0, |r| r.clients.len())
}

/// Test accuracy and training loss of `client` after round index `round`
/// (0-based). Either output pointer may be NULL.
///
/// # Safety
/// `h` must be a live handle; non-NULL outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedper_history_metric(
    h: *const FedperHistory,
    round: usize,
    client: usize,
    accuracy: *mut f64,
    loss: *mut f64,
) -> FedperStatus {
    guard(|| {
        let h = history_ref(h)?;
        let m = h
            .rounds
            .get(round)
            .and_then(|r| r.clients.get(client))
            .ok_or_else(|| Failure(FedperStatus::OutOfRange, format!("no entry for round {round} client {client}")))?;
        if !accuracy.is_null() {
            accuracy.write(m.test_accuracy);
        }
        if !loss.is_null() {
            loss.write(m.train_loss);
        }
        Ok(())
    })
}

/// Mean and population standard deviation of final-round test accuracy
/// across clients. Either output pointer may be NULL.
///
/// # Safety
/// `h` must be a live handle; non-NULL outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedper_history_final_stats(
    h: *const FedperHistory,
    mean: *mut f64,
    std: *mut f64,
) -> FedperStatus {
    guard(|| {
        let stats = final_accuracy_stats(history_ref(h)?)?;
        if !mean.is_null() {
            mean.write(stats.mean);
        }
        if !std.is_null() {
            std.write(stats.std);
        }
        Ok(())
    })
}

/// Full history as JSON; free the result with `fedper_string_free`.
///
/// # Safety
/// `h` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedper_history_to_json(h: *const FedperHistory, out: *mut *mut c_char) -> FedperStatus {
    guard(|| {
        let text = serde_json::to_string(history_ref(h)?).map_err(Error::from)?;
        write_out(out, to_c_string(text)?, "out")
    })
}

/// # Safety
/// `h` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fedper_history_free(h: *mut FedperHistory) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Weighted mean of `num_clients` parameter vectors of length `len`, written
/// to `out`. `gammas` must be positive and sum to 1.
///
/// # Safety
/// `updates` must point to `num_clients` pointers to `len` doubles each,
/// `gammas` to `num_clients` doubles and `out` to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn fedper_aggregate_flat(
    updates: *const *const f64,
    gammas: *const f64,
    num_clients: usize,
    len: usize,
    out: *mut f64,
) -> FedperStatus {
    guard(|| {
        if updates.is_null() || gammas.is_null() || (out.is_null() && len > 0) {
            return Err(null("argument"));
        }
        if num_clients == 0 {
            return Err(Failure(FedperStatus::Usage, "no updates to aggregate".into()));
        }
        let ptrs = std::slice::from_raw_parts(updates, num_clients);
        let mut parts = Vec::with_capacity(num_clients);
        for &p in ptrs {
            if p.is_null() && len > 0 {
                return Err(null("update"));
            }
            parts.push(if len == 0 { &[][..] } else { std::slice::from_raw_parts(p, len) });
        }
        let gammas = std::slice::from_raw_parts(gammas, num_clients);
        let mean = protocol::aggregate_flat(&parts, gammas)?;
        if len > 0 {
            std::slice::from_raw_parts_mut(out, len).copy_from_slice(&mean);
        }
        Ok(())
    })
}
