//! C interface to the query-consolidation library.
//!
//! Every object crosses the boundary as an opaque pointer created by a
//! `qnerf_*_new`/`_load`/`_build` call and released by its `_free`. Calls
//! return a [`QnerfStatus`]; on failure the message is kept per thread and
//! can be read with [`qnerf_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use qnerf::geometry::Vec3;
use qnerf::pipeline::{build_schedule, run_pipeline, Event, IntervalSchedule, RunArtifacts, RunMode, Scenario};
use qnerf::qfield::FeatureField;
use qnerf::store::{self, parse_config_with, RunConfig};
use qnerf::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QnerfStatus {
    Ok = 0,
    NullArgument = 1,
    /// Invalid configuration or argument outside an operation's domain.
    Invalid = 2,
    Numeric = 3,
    Io = 4,
    Format = 5,
    /// Buffer too small; the required size was written where requested.
    BufferTooSmall = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QnerfEventKind {
    Guided = 0,
    Free = 1,
    Store = 2,
    Extract = 3,
    Train = 4,
    Rewind = 5,
    Finish = 6,
}

/// Resolved run configuration plus the overrides applied so far.
pub struct QnerfConfig {
    text: String,
    overrides: Vec<(String, String)>,
    resolved: RunConfig,
}

pub struct QnerfSchedule(IntervalSchedule);

pub struct QnerfField(FeatureField);

pub struct QnerfRun(RunArtifacts);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> QnerfStatus {
    match e.root() {
        Error::Config { .. } | Error::Domain(_) => QnerfStatus::Invalid,
        Error::Numeric(_) | Error::Training { .. } | Error::Evaluation(_) => QnerfStatus::Numeric,
        Error::Io { .. } => QnerfStatus::Io,
        Error::Format(_) => QnerfStatus::Format,
        Error::Interval { .. } => QnerfStatus::Invalid,
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), QnerfFailure>) -> QnerfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => QnerfStatus::Ok,
        Ok(Err(QnerfFailure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            QnerfStatus::Panic
        }
    }
}

struct QnerfFailure(QnerfStatus, String);

impl From<Error> for QnerfFailure {
    fn from(e: Error) -> Self {
        QnerfFailure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> QnerfFailure {
    QnerfFailure(QnerfStatus::NullArgument, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, QnerfFailure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| QnerfFailure(QnerfStatus::Invalid, format!("{what} is not UTF-8")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, QnerfFailure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, QnerfFailure> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn qnerf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread (empty if none). The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn qnerf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Parses a JSON configuration document. `json` may be null for `{}`.
///
/// # Safety
/// `json` must be null or a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn qnerf_config_parse(json: *const c_char, out: *mut *mut QnerfConfig) -> QnerfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let text = if json.is_null() { "{}" } else { str_arg(json, "json")? };
        let resolved = parse_config_with(text, &[])?;
        *out = Box::into_raw(Box::new(QnerfConfig {
            text: text.to_string(),
            overrides: Vec::new(),
            resolved,
        }));
        Ok(())
    })
}

/// Applies a dotted-key override and revalidates. On failure the
/// configuration is left unchanged.
///
/// # Safety
/// `config` must come from [`qnerf_config_parse`]; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn qnerf_config_set(
    config: *mut QnerfConfig,
    key: *const c_char,
    value: *const c_char,
) -> QnerfStatus {
    guard(|| {
        let cfg = out_ptr(config, "config")?;
        let pair = (str_arg(key, "key")?.to_string(), str_arg(value, "value")?.to_string());
        let mut overrides = cfg.overrides.clone();
        overrides.push(pair);
        cfg.resolved = parse_config_with(&cfg.text, &overrides)?;
        cfg.overrides = overrides;
        Ok(())
    })
}

/// Copies the resolved configuration as JSON into `buf` (NUL-terminated).
/// `needed` receives the size including the terminator.
///
/// # Safety
/// `buf` must hold `len` bytes (or be null with `len` 0); `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn qnerf_config_json(
    config: *const QnerfConfig,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> QnerfStatus {
    guard(|| {
        let cfg = handle(config, "config")?;
        copy_string(&cfg.resolved.to_json(), buf, len, needed)
    })
}

/// # Safety
/// `config` must be null or come from [`qnerf_config_parse`], freed once.
#[no_mangle]
pub unsafe extern "C" fn qnerf_config_free(config: *mut QnerfConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

unsafe fn copy_string(s: &str, buf: *mut c_char, len: usize, needed: *mut usize) -> Result<(), QnerfFailure> {
    let bytes = s.as_bytes();
    if let Some(n) = needed.as_mut() {
        *n = bytes.len() + 1;
    }
    if len < bytes.len() + 1 || buf.is_null() {
        return Err(QnerfFailure(
            QnerfStatus::BufferTooSmall,
            format!("need {} bytes, got {len}", bytes.len() + 1),
        ));
    }
    std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), bytes.len());
    *buf.add(bytes.len()) = 0;
    Ok(())
}

/// Builds the interval schedule for `steps` denoising steps and half-interval `tau`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn qnerf_schedule_build(steps: usize, tau: usize, out: *mut *mut QnerfSchedule) -> QnerfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = Box::into_raw(Box::new(QnerfSchedule(build_schedule(steps, tau)?)));
        Ok(())
    })
}

/// Number of events; 0 for a null handle.
///
/// # Safety
/// `schedule` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn qnerf_schedule_len(schedule: *const QnerfSchedule) -> usize {
    schedule.as_ref().map_or(0, |s| s.0.events().count())
}

/// Reads event `index` as a kind and its timestep (or training number).
///
/// # Safety
/// `schedule` must be a live handle; `kind` and `arg` writable.
#[no_mangle]
pub unsafe extern "C" fn qnerf_schedule_event(
    schedule: *const QnerfSchedule,
    index: usize,
    kind: *mut QnerfEventKind,
    arg: *mut usize,
) -> QnerfStatus {
    guard(|| {
        let s = handle(schedule, "schedule")?;
        let e = s.0.events().nth(index).ok_or_else(|| {
            QnerfFailure(QnerfStatus::Invalid, format!("event index {index} out of range"))
        })?;
        let (k, a) = match *e {
            Event::Guided(t) => (QnerfEventKind::Guided, t),
            Event::Free(t) => (QnerfEventKind::Free, t),
            Event::Store(t) => (QnerfEventKind::Store, t),
            Event::Extract(t) => (QnerfEventKind::Extract, t),
            Event::Train(k) => (QnerfEventKind::Train, k),
            Event::Rewind(t) => (QnerfEventKind::Rewind, t),
            Event::Finish(t) => (QnerfEventKind::Finish, t),
        };
        *out_ptr(kind, "kind")? = k;
        *out_ptr(arg, "arg")? = a;
        Ok(())
    })
}

/// # Safety
/// `schedule` must be null or a live handle, freed once.
#[no_mangle]
pub unsafe extern "C" fn qnerf_schedule_free(schedule: *mut QnerfSchedule) {
    if !schedule.is_null() {
        drop(Box::from_raw(schedule));
    }
}

/// Loads a field checkpoint.
///
/// # Safety
/// `path` NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn qnerf_field_load(path: *const c_char, out: *mut *mut QnerfField) -> QnerfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        *out = Box::into_raw(Box::new(QnerfField(store::load_checkpoint(&path)?)));
        Ok(())
    })
}

/// # Safety
/// `field` a live handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn qnerf_field_save(field: *const QnerfField, path: *const c_char) -> QnerfStatus {
    guard(|| {
        let f = handle(field, "field")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        store::save_checkpoint(&f.0, &path)?;
        Ok(())
    })
}

/// # Safety
/// `field` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn qnerf_field_layer_count(field: *const QnerfField) -> usize {
    field.as_ref().map_or(0, |f| f.0.layers.len())
}

/// Channels of layer `layer`, or 0 when out of range.
///
/// # Safety
/// `field` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn qnerf_field_channels(field: *const QnerfField, layer: usize) -> usize {
    field
        .as_ref()
        .and_then(|f| f.0.layers.get(layer))
        .map_or(0, |l| l.channels)
}

/// Density and the features of `layer` at point `xyz`. `features` must
/// hold at least the layer's channel count.
///
/// # Safety
/// `xyz` points to 3 doubles; `density` writable; `features` holds `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn qnerf_field_eval(
    field: *const QnerfField,
    xyz: *const f64,
    layer: usize,
    density: *mut f64,
    features: *mut f64,
    capacity: usize,
) -> QnerfStatus {
    guard(|| {
        let f = handle(field, "field")?;
        if xyz.is_null() {
            return Err(null("xyz"));
        }
        let p = std::slice::from_raw_parts(xyz, 3);
        let (d, feats) = f.0.eval(&Vec3::new(p[0], p[1], p[2]))?;
        let row = feats
            .get(layer)
            .ok_or_else(|| QnerfFailure(QnerfStatus::Invalid, format!("field has no layer {layer}")))?;
        if capacity < row.len() || features.is_null() {
            return Err(QnerfFailure(
                QnerfStatus::BufferTooSmall,
                format!("layer {layer} has {} channels", row.len()),
            ));
        }
        *out_ptr(density, "density")? = d;
        std::ptr::copy_nonoverlapping(row.as_ptr(), features, row.len());
        Ok(())
    })
}

/// # Safety
/// `field` must be null or a live handle, freed once.
#[no_mangle]
pub unsafe extern "C" fn qnerf_field_free(field: *mut QnerfField) {
    if !field.is_null() {
        drop(Box::from_raw(field));
    }
}

/// Runs the pipeline in `mode` ("full", "unguided_baseline",
/// "direct_injection", "non_progressive"; null uses the configured mode).
/// When `out_dir` is non-null all artifacts are written there.
///
/// # Safety
/// `config` live; strings null or NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn qnerf_run(
    config: *const QnerfConfig,
    mode: *const c_char,
    out_dir: *const c_char,
    out: *mut *mut QnerfRun,
) -> QnerfStatus {
    guard(|| {
        let cfg = &handle(config, "config")?.resolved;
        let out = out_ptr(out, "out")?;
        let mode = if mode.is_null() {
            cfg.mode
        } else {
            let name = str_arg(mode, "mode")?;
            RunMode::parse(name)
                .ok_or_else(|| QnerfFailure(QnerfStatus::Invalid, format!("unknown mode {name:?}")))?
        };
        let scn = Scenario::new(cfg)?;
        let mut log = Vec::new();
        let arts = run_pipeline(&scn, mode, &mut log)?;
        if !out_dir.is_null() {
            arts.write(cfg, &PathBuf::from(str_arg(out_dir, "out_dir")?))?;
        }
        *out = Box::into_raw(Box::new(QnerfRun(arts)));
        Ok(())
    })
}

/// Final-row cross-view inconsistency averaged over layers.
///
/// # Safety
/// `run` live; `value` writable.
#[no_mangle]
pub unsafe extern "C" fn qnerf_run_consistency(run: *const QnerfRun, value: *mut f64) -> QnerfStatus {
    guard(|| {
        let r = handle(run, "run")?;
        *out_ptr(value, "value")? = r.0.final_consistency();
        Ok(())
    })
}

/// Mean distance of the final latents from their per-view targets.
///
/// # Safety
/// `run` live; `value` writable.
#[no_mangle]
pub unsafe extern "C" fn qnerf_run_target_deviation(run: *const QnerfRun, value: *mut f64) -> QnerfStatus {
    guard(|| {
        let r = handle(run, "run")?;
        *out_ptr(value, "value")? = r.0.target_deviation();
        Ok(())
    })
}

/// Copies the run's `metrics.csv` text into `buf`.
///
/// # Safety
/// As [`qnerf_config_json`].
#[no_mangle]
pub unsafe extern "C" fn qnerf_run_metrics_csv(
    run: *const QnerfRun,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> QnerfStatus {
    guard(|| {
        let r = handle(run, "run")?;
        copy_string(&r.0.report.to_csv(), buf, len, needed)
    })
}

/// # Safety
/// `run` must be null or a live handle, freed once.
#[no_mangle]
pub unsafe extern "C" fn qnerf_run_free(run: *mut QnerfRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}
