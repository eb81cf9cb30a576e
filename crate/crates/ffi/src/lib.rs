//! C ABI over `r1pool`.
//!
//! Every fallible call returns an `int` status (`R1_OK` on success) and
//! writes its result through an out-pointer. After a failure,
//! `r1_last_error` describes it until the next call on the same thread.
//! Handles are opaque and released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use r1pool::bench::{gen_tasks, metrics_report, AccuracyMatrix, TaskDataset};
use r1pool::cli::{train_to_dir, RunConfig};
use r1pool::trainer::run_sequence;
use r1pool::Error;

pub const R1_OK: i32 = 0;
/// Null pointer, bad UTF-8 or an index out of range.
pub const R1_ERR_ARGUMENT: i32 = 1;
/// Invalid configuration, input file or shape.
pub const R1_ERR_CONFIG: i32 = 2;
/// A loss or metric became NaN or infinite.
pub const R1_ERR_NUMERIC: i32 = 3;
pub const R1_ERR_IO: i32 = 4;
/// The library panicked; the handle arguments should be discarded.
pub const R1_ERR_PANIC: i32 = 5;

/// Run configuration.
pub struct R1Config {
    inner: RunConfig,
}

/// Generated task sequence.
pub struct R1Tasks {
    inner: Vec<TaskDataset>,
}

/// Accuracy matrix, `M[t][j]` in percent.
pub struct R1Matrix {
    inner: AccuracyMatrix,
}

/// Headline metrics. `transfer` is NaN when `has_transfer` is 0.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct R1Metrics {
    pub has_transfer: i32,
    pub transfer: f64,
    pub average: f64,
    pub last: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Fail(i32, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(e.exit_code(), e.to_string())
    }
}

fn arg(msg: &str) -> Fail {
    Fail(R1_ERR_ARGUMENT, msg.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> i32 {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => R1_OK,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            R1_ERR_PANIC
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(arg(&format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| arg(&format!("{name} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| arg(&format!("{name} is null")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(arg("out is null"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message for the last failed call on this thread, or null. Owned by the
/// library.
#[no_mangle]
pub extern "C" fn r1_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn r1_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Default configuration.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn r1_config_default(out: *mut *mut R1Config) -> i32 {
    guard(|| put(out, R1Config { inner: RunConfig::default() }))
}

/// Parses and validates a JSON configuration.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn r1_config_from_json(json: *const c_char, out: *mut *mut R1Config) -> i32 {
    guard(|| {
        let inner = RunConfig::from_json(str_arg(json, "json")?)?;
        put(out, R1Config { inner })
    })
}

/// Reads a JSON configuration file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn r1_config_load(path: *const c_char, out: *mut *mut R1Config) -> i32 {
    guard(|| {
        let inner = RunConfig::load(Path::new(str_arg(path, "path")?))?;
        put(out, R1Config { inner })
    })
}

/// Sets the training seed.
///
/// # Safety
/// `cfg` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn r1_config_set_seed(cfg: *mut R1Config, seed: u64) -> i32 {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| arg("cfg is null"))?;
        cfg.inner.seed = seed;
        Ok(())
    })
}

/// Sets the task generator seed.
///
/// # Safety
/// `cfg` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn r1_config_set_task_seed(cfg: *mut R1Config, seed: u64) -> i32 {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| arg("cfg is null"))?;
        cfg.inner.tasks.seed = seed;
        Ok(())
    })
}

/// Canonical JSON of the configuration. Free with `r1_string_free`.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn r1_config_to_json(cfg: *const R1Config, out: *mut *mut c_char) -> i32 {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        let text = serde_json::to_string(&cfg.inner).map_err(Error::from)?;
        put_string(out, text)
    })
}

/// # Safety
/// `cfg` must be a handle from this library or null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn r1_config_free(cfg: *mut R1Config) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Generates the task sequence described by `cfg`.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn r1_tasks_generate(cfg: *const R1Config, out: *mut *mut R1Tasks) -> i32 {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        let inner = gen_tasks(&cfg.inner.tasks)?;
        put(out, R1Tasks { inner })
    })
}

/// Number of tasks in the sequence, 0 for null.
///
/// # Safety
/// `tasks` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn r1_tasks_count(tasks: *const R1Tasks) -> usize {
    tasks.as_ref().map_or(0, |t| t.inner.len())
}

/// # Safety
/// `tasks` must be a handle from this library or null.
#[no_mangle]
pub unsafe extern "C" fn r1_tasks_free(tasks: *mut R1Tasks) {
    if !tasks.is_null() {
        drop(Box::from_raw(tasks));
    }
}

/// Trains on every task in order and returns the accuracy matrix. When
/// `out_dir` is non-null, checkpoints, `matrix.csv`, `metrics.json` and
/// `collision.csv` are written there as well.
///
/// # Safety
/// `cfg` and `tasks` must be live handles; `out_dir` is null or a
/// NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn r1_train(
    cfg: *const R1Config,
    tasks: *const R1Tasks,
    out_dir: *const c_char,
    out: *mut *mut R1Matrix,
) -> i32 {
    guard(|| {
        let cfg = &ref_arg(cfg, "cfg")?.inner;
        let tasks = &ref_arg(tasks, "tasks")?.inner;
        let output = if out_dir.is_null() {
            cfg.validate()?;
            run_sequence(tasks, &cfg.train_config(), &cfg.model)?
        } else {
            train_to_dir(cfg, tasks, Path::new(str_arg(out_dir, "out_dir")?))?
        };
        put(out, R1Matrix { inner: output.matrix })
    })
}

/// Builds a matrix from `tasks * tasks` row-major values.
///
/// # Safety
/// `data` must point to `tasks * tasks` doubles; `out` must be valid for
/// writes.
#[no_mangle]
pub unsafe extern "C" fn r1_matrix_new(data: *const f64, tasks: usize, out: *mut *mut R1Matrix) -> i32 {
    guard(|| {
        if data.is_null() {
            return Err(arg("data is null"));
        }
        let n = tasks.checked_mul(tasks).ok_or_else(|| arg("tasks too large"))?;
        let flat = std::slice::from_raw_parts(data, n);
        let rows = flat.chunks(tasks.max(1)).map(<[f64]>::to_vec).collect();
        let inner = AccuracyMatrix::new(rows)?;
        put(out, R1Matrix { inner })
    })
}

/// Reads a matrix CSV with a `task_1,...` header.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn r1_matrix_load(path: *const c_char, out: *mut *mut R1Matrix) -> i32 {
    guard(|| {
        let path = Path::new(str_arg(path, "path")?);
        let file = std::fs::File::open(path).map_err(|e| Fail(R1_ERR_IO, format!("{}: {e}", path.display())))?;
        let inner = AccuracyMatrix::read_csv(file)?;
        put(out, R1Matrix { inner })
    })
}

/// Number of tasks, 0 for null.
///
/// # Safety
/// `m` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn r1_matrix_tasks(m: *const R1Matrix) -> usize {
    m.as_ref().map_or(0, |m| m.inner.tasks())
}

/// Accuracy on task `j` after training through task `t` (both 0-based).
///
/// # Safety
/// `m` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn r1_matrix_get(m: *const R1Matrix, t: usize, j: usize, out: *mut f64) -> i32 {
    guard(|| {
        let m = &ref_arg(m, "m")?.inner;
        if t >= m.tasks() || j >= m.tasks() {
            return Err(arg(&format!("index ({t}, {j}) out of range for {} tasks", m.tasks())));
        }
        if out.is_null() {
            return Err(arg("out is null"));
        }
        *out = m.get(t, j);
        Ok(())
    })
}

/// Transfer, Average and Last over the matrix as given.
///
/// # Safety
/// `m` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn r1_matrix_metrics(m: *const R1Matrix, out: *mut R1Metrics) -> i32 {
    guard(|| {
        let report = metrics_report(&ref_arg(m, "m")?.inner);
        if out.is_null() {
            return Err(arg("out is null"));
        }
        *out = R1Metrics {
            has_transfer: report.transfer.is_some() as i32,
            transfer: report.transfer.map_or(f64::NAN, |t| t.overall),
            average: report.average.overall,
            last: report.last.overall,
        };
        Ok(())
    })
}

/// Full per-task report as pretty JSON, computed on the matrix rounded to
/// two decimals. Free with `r1_string_free`.
///
/// # Safety
/// `m` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn r1_matrix_report_json(m: *const R1Matrix, out: *mut *mut c_char) -> i32 {
    guard(|| {
        let report = metrics_report(&ref_arg(m, "m")?.inner.rounded());
        let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
        put_string(out, text)
    })
}

/// Matrix as CSV text. Free with `r1_string_free`.
///
/// # Safety
/// `m` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn r1_matrix_to_csv(m: *const R1Matrix, out: *mut *mut c_char) -> i32 {
    guard(|| put_string(out, ref_arg(m, "m")?.inner.to_csv_string()))
}

/// # Safety
/// `m` must be a handle from this library or null.
#[no_mangle]
pub unsafe extern "C" fn r1_matrix_free(m: *mut R1Matrix) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

unsafe fn put_string(out: *mut *mut c_char, text: String) -> Result<(), Fail> {
    if out.is_null() {
        return Err(arg("out is null"));
    }
    let c = CString::new(text).map_err(|_| arg("string contains NUL"))?;
    *out = c.into_raw();
    Ok(())
}

/// # Safety
/// `s` must be a string returned by this library or null.
#[no_mangle]
pub unsafe extern "C" fn r1_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
