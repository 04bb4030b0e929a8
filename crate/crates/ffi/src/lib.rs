//! C ABI for holoflow.
//!
//! Every entry point returns an [`HfStatus`]; results come back through out
//! pointers. Objects cross the boundary as opaque handles that the caller
//! releases with the matching `*_free` function. The message for the most
//! recent failure on the calling thread is available from [`hf_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use holoflow::cli::{cmd_verify, generate_point_set};
use holoflow::config::RunConfig;
use holoflow::data::DatasetSpec;
use holoflow::evalmetrics::{boundary_violation, energy_distance, wed};
use holoflow::propagator::kappa;
use holoflow::trainer::{arch_mismatch, Checkpoint, Trainer};
use holoflow::Error;

/// Status codes returned by every function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Domain = 3,
    Config = 4,
    Shape = 5,
    Numeric = 6,
    Decode = 7,
    Format = 8,
    Checkpoint = 9,
    Undefined = 10,
    Io = 11,
    BufferTooSmall = 12,
    Panic = 13,
}

/// Parsed run configuration.
pub struct HfConfig {
    inner: RunConfig,
}

/// Trained weights loaded from a checkpoint file.
pub struct HfModel {
    inner: Checkpoint,
}

/// A training session that advances one batch per call.
pub struct HfTrainer {
    inner: Trainer,
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(msg: &str) {
    LAST_ERROR.with(|e| {
        let mut e = e.borrow_mut();
        e.clear();
        e.extend(msg.bytes().filter(|&b| b != 0));
    });
}

fn status_of(err: &Error) -> HfStatus {
    match err {
        Error::Domain(_) => HfStatus::Domain,
        Error::Config(_) => HfStatus::Config,
        Error::Shape(_) => HfStatus::Shape,
        Error::Numeric(_) => HfStatus::Numeric,
        Error::Decode(_) => HfStatus::Decode,
        Error::Format(_) => HfStatus::Format,
        Error::Checkpoint(_) => HfStatus::Checkpoint,
        Error::Undefined(_) => HfStatus::Undefined,
        Error::Io(_) => HfStatus::Io,
    }
}

struct Fail(HfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(HfStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(HfStatus::InvalidArgument, msg.into())
}

fn guard<F: FnOnce() -> Result<(), Fail>>(f: F) -> HfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            HfStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(&msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            HfStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn as_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn as_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn points<'a>(xy: *const f64, n: usize, what: &str) -> Result<&'a [[f64; 2]], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if xy.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(xy as *const [f64; 2], n))
}

unsafe fn put<T>(out: *mut T, v: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(v);
    Ok(())
}

fn checkerboard(cfg: &RunConfig) -> Result<holoflow::evalmetrics::CheckerboardSpec, Fail> {
    match &cfg.train.dataset {
        DatasetSpec::Checkerboard(spec) => Ok(*spec),
        _ => Err(invalid("configuration does not describe a checkerboard dataset")),
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `cap`). Returns the full message length excluding the NUL.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn hf_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = e.len().min(cap - 1);
            ptr::copy_nonoverlapping(e.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        e.len()
    })
}

/// Default configuration (desk checkerboard run).
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn hf_config_default(out: *mut *mut HfConfig) -> HfStatus {
    guard(|| put(out, Box::into_raw(Box::new(HfConfig { inner: RunConfig::default() })), "out"))
}

/// Parses configuration text.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn hf_config_parse(text: *const c_char, out: *mut *mut HfConfig) -> HfStatus {
    guard(|| {
        let cfg = RunConfig::parse(as_str(text, "text")?)?;
        put(out, Box::into_raw(Box::new(HfConfig { inner: cfg })), "out")
    })
}

/// Loads a configuration file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn hf_config_load(path: *const c_char, out: *mut *mut HfConfig) -> HfStatus {
    guard(|| {
        let cfg = RunConfig::load(&PathBuf::from(as_str(path, "path")?))?;
        put(out, Box::into_raw(Box::new(HfConfig { inner: cfg })), "out")
    })
}

/// Overrides the run seed.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn hf_config_set_seed(cfg: *mut HfConfig, seed: u64) -> HfStatus {
    guard(|| {
        as_mut(cfg, "cfg")?.inner.train.seed = seed;
        Ok(())
    })
}

/// Releases a configuration. Null is ignored.
///
/// # Safety
/// `cfg` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hf_config_free(cfg: *mut HfConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs the propagator and path checks; `out_passed` receives 1 or 0.
///
/// # Safety
/// `cfg` must be a live handle; `out_passed` writable.
#[no_mangle]
pub unsafe extern "C" fn hf_verify(cfg: *const HfConfig, out_passed: *mut i32) -> HfStatus {
    guard(|| {
        let report = cmd_verify(&as_ref(cfg, "cfg")?.inner)?;
        put(out_passed, report.passed() as i32, "out_passed")
    })
}

/// Bulk-to-boundary mode propagator and its radial derivative at (|k|, r)
/// for the configured background.
///
/// # Safety
/// `cfg` must be a live handle; out pointers writable.
#[no_mangle]
pub unsafe extern "C" fn hf_kappa(
    cfg: *const HfConfig,
    knorm: f64,
    r: f64,
    out_kappa: *mut f64,
    out_dkappa_dr: *mut f64,
) -> HfStatus {
    guard(|| {
        let ev = kappa(&as_ref(cfg, "cfg")?.inner.train.background, knorm, r)?;
        put(out_kappa, ev.kappa, "out_kappa")?;
        put(out_dkappa_dr, ev.dkappa_dr, "out_dkappa_dr")
    })
}

/// Fraction of points outside the filled checkerboard cells.
///
/// # Safety
/// `xy` must hold `2 * n` doubles (x0, y0, x1, y1, ...).
#[no_mangle]
pub unsafe extern "C" fn hf_boundary_violation(
    cfg: *const HfConfig,
    xy: *const f64,
    n: usize,
    out: *mut f64,
) -> HfStatus {
    guard(|| {
        let spec = checkerboard(&as_ref(cfg, "cfg")?.inner)?;
        put(out, boundary_violation(points(xy, n, "xy")?, &spec)?, "out")
    })
}

/// Cell-averaged energy distance between model and reference points.
///
/// # Safety
/// `xy` must hold `2 * n` doubles and `ref_xy` `2 * m` doubles.
#[no_mangle]
pub unsafe extern "C" fn hf_wed(
    cfg: *const HfConfig,
    xy: *const f64,
    n: usize,
    ref_xy: *const f64,
    m: usize,
    out: *mut f64,
) -> HfStatus {
    guard(|| {
        let spec = checkerboard(&as_ref(cfg, "cfg")?.inner)?;
        let report = wed(points(xy, n, "xy")?, points(ref_xy, m, "ref_xy")?, &spec)?;
        put(out, report.value, "out")
    })
}

/// Energy distance between two 2-D point sets.
///
/// # Safety
/// `xy` must hold `2 * n` doubles and `ref_xy` `2 * m` doubles.
#[no_mangle]
pub unsafe extern "C" fn hf_energy_distance(
    xy: *const f64,
    n: usize,
    ref_xy: *const f64,
    m: usize,
    out: *mut f64,
) -> HfStatus {
    guard(|| {
        let d = energy_distance(points(xy, n, "xy")?, points(ref_xy, m, "ref_xy")?)?;
        put(out, d, "out")
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn hf_model_load(path: *const c_char, out: *mut *mut HfModel) -> HfStatus {
    guard(|| {
        let ckpt = Checkpoint::load(&PathBuf::from(as_str(path, "path")?))?;
        put(out, Box::into_raw(Box::new(HfModel { inner: ckpt })), "out")
    })
}

/// Number of trainable parameters in the model.
///
/// # Safety
/// `model` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hf_model_param_count(model: *const HfModel, out: *mut usize) -> HfStatus {
    guard(|| put(out, as_ref(model, "model")?.inner.params.param_count(), "out"))
}

/// Training epoch recorded in the checkpoint.
///
/// # Safety
/// `model` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hf_model_epoch(model: *const HfModel, out: *mut u64) -> HfStatus {
    guard(|| put(out, as_ref(model, "model")?.inner.progress.epoch as u64, "out"))
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hf_model_free(model: *mut HfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Samples `n` boundary points with the model into `out_xy` (`2 * n` doubles).
/// Output is a deterministic function of the configuration seed.
///
/// # Safety
/// Handles must be live; `out_xy` must have room for `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn hf_generate_points(
    cfg: *const HfConfig,
    model: *const HfModel,
    n: usize,
    out_xy: *mut f64,
    cap: usize,
) -> HfStatus {
    guard(|| {
        let cfg = &as_ref(cfg, "cfg")?.inner;
        let model = &as_ref(model, "model")?.inner;
        checkerboard(cfg)?;
        if let Some(field) = arch_mismatch(&model.params.arch, &cfg.train.arch) {
            return Err(Fail(HfStatus::Checkpoint, format!("architecture differs from config in `{field}`")));
        }
        if out_xy.is_null() {
            return Err(null("out_xy"));
        }
        if cap < 2 * n {
            return Err(Fail(HfStatus::BufferTooSmall, format!("need {} doubles, have {cap}", 2 * n)));
        }
        let pts = generate_point_set(cfg, &model.params, n)?;
        let out = std::slice::from_raw_parts_mut(out_xy, 2 * n);
        for (dst, p) in out.chunks_exact_mut(2).zip(&pts) {
            dst.copy_from_slice(p);
        }
        Ok(())
    })
}

/// Starts a fresh training session for the configuration.
///
/// # Safety
/// `cfg` must be a live handle; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn hf_trainer_new(cfg: *const HfConfig, out: *mut *mut HfTrainer) -> HfStatus {
    guard(|| {
        let tr = Trainer::new(as_ref(cfg, "cfg")?.inner.train.clone())?;
        put(out, Box::into_raw(Box::new(HfTrainer { inner: tr })), "out")
    })
}

/// Resumes a training session from a checkpoint file.
///
/// # Safety
/// `cfg` must be a live handle; `path` NUL-terminated; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn hf_trainer_resume(
    cfg: *const HfConfig,
    path: *const c_char,
    out: *mut *mut HfTrainer,
) -> HfStatus {
    guard(|| {
        let ckpt = Checkpoint::load(&PathBuf::from(as_str(path, "path")?))?;
        let tr = Trainer::from_checkpoint(as_ref(cfg, "cfg")?.inner.train.clone(), ckpt)?;
        put(out, Box::into_raw(Box::new(HfTrainer { inner: tr })), "out")
    })
}

/// Runs one optimizer step. When the step closes an epoch, `out_epoch`
/// receives its number and `out_loss` its mean loss; otherwise `out_epoch`
/// receives 0 and `out_loss` is left untouched.
///
/// # Safety
/// `trainer` must be a live handle; out pointers writable.
#[no_mangle]
pub unsafe extern "C" fn hf_trainer_step(trainer: *mut HfTrainer, out_epoch: *mut u64, out_loss: *mut f64) -> HfStatus {
    guard(|| {
        let tr = &mut as_mut(trainer, "trainer")?.inner;
        if out_epoch.is_null() {
            return Err(null("out_epoch"));
        }
        if tr.is_finished() {
            return Err(invalid("training already finished"));
        }
        match tr.step()? {
            Some(row) => {
                put(out_epoch, row.epoch as u64, "out_epoch")?;
                put(out_loss, row.loss, "out_loss")
            }
            None => put(out_epoch, 0, "out_epoch"),
        }
    })
}

/// `out` receives 1 once every configured epoch has run.
///
/// # Safety
/// `trainer` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hf_trainer_is_finished(trainer: *const HfTrainer, out: *mut i32) -> HfStatus {
    guard(|| put(out, as_ref(trainer, "trainer")?.inner.is_finished() as i32, "out"))
}

/// Writes a checkpoint of the current weights, optimizer moments and progress.
///
/// # Safety
/// `trainer` must be a live handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn hf_trainer_save(trainer: *const HfTrainer, path: *const c_char) -> HfStatus {
    guard(|| {
        let tr = &as_ref(trainer, "trainer")?.inner;
        tr.checkpoint().save(&PathBuf::from(as_str(path, "path")?))?;
        Ok(())
    })
}

/// Releases a trainer. Null is ignored.
///
/// # Safety
/// `trainer` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hf_trainer_free(trainer: *mut HfTrainer) {
    if !trainer.is_null() {
        drop(Box::from_raw(trainer));
    }
}
