//! C ABI over the `amflow` crate.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! functions and released with the matching `*_free`. Every fallible call
//! returns an [`AmflowStatus`]; on failure the message is available from
//! [`amflow_last_error`] on the same thread until the next failing call.
//! Panics are caught and reported as `AMFLOW_STATUS_INTERNAL`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use amflow::checks::{model_suite, op_suite};
use amflow::config::RunConfig;
use amflow::model::Model;
use amflow::rng::seeded_stream;
use amflow::run::load_model;
use amflow::synth::{direction_spec, load_clip, render_clip, save_clip, Clip, SynthConfig, DIRECTION_CLASSES};
use amflow::train::save_checkpoint;
use amflow::Error;

/// Result of every fallible call. The first four values equal the exit
/// codes of the command-line tool.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AmflowStatus {
    Ok = 0,
    Validation = 1,
    Io = 2,
    Numeric = 3,
    NullPointer = 4,
    BufferTooSmall = 5,
    Internal = 6,
}

/// Model handle.
pub struct AmflowModel {
    model: Model,
}

/// Clip handle.
pub struct AmflowClip {
    clip: Clip,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> AmflowStatus {
    match e.exit_code() {
        2 => AmflowStatus::Io,
        3 => AmflowStatus::Numeric,
        _ => AmflowStatus::Validation,
    }
}

fn fail(status: AmflowStatus, msg: impl Into<String>) -> AmflowStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), AmflowStatus>) -> AmflowStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AmflowStatus::Ok,
        Ok(Err(status)) => status,
        Err(_) => fail(AmflowStatus::Internal, "internal panic"),
    }
}

fn lift<T>(r: amflow::Result<T>) -> Result<T, AmflowStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, AmflowStatus> {
    if p.is_null() {
        return Err(fail(AmflowStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(AmflowStatus::Validation, format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, AmflowStatus> {
    p.as_ref().ok_or_else(|| fail(AmflowStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, AmflowStatus> {
    p.as_mut().ok_or_else(|| fail(AmflowStatus::NullPointer, format!("{what} is null")))
}

unsafe fn run_config(text: *const c_char) -> Result<RunConfig, AmflowStatus> {
    let mut run = RunConfig::default();
    if !text.is_null() {
        lift(run.apply_text(str_arg(text, "config")?, "config"))?;
    }
    Ok(run)
}

/// Message of the most recent failure on this thread, or NULL. The string
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn amflow_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Builds a model from flat `key = value` config text (NULL for all
/// defaults). Initialization uses the config's `seed`.
///
/// # Safety
/// `config` is NULL or a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn amflow_model_new(config: *const c_char, out: *mut *mut AmflowModel) -> AmflowStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let run = run_config(config)?;
        let model = lift(amflow::run::build_model(&run))?;
        *out = Box::into_raw(Box::new(AmflowModel { model }));
        Ok(())
    })
}

/// Builds a model from config text and loads every tensor from a
/// checkpoint file.
///
/// # Safety
/// `config` is NULL or NUL-terminated; `path` is NUL-terminated; `out` is
/// writable.
#[no_mangle]
pub unsafe extern "C" fn amflow_model_load(
    config: *const c_char,
    path: *const c_char,
    out: *mut *mut AmflowModel,
) -> AmflowStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let run = run_config(config)?;
        let path = PathBuf::from(str_arg(path, "path")?);
        let model = lift(load_model(&run, &path))?;
        *out = Box::into_raw(Box::new(AmflowModel { model }));
        Ok(())
    })
}

/// Writes every tensor of the model to a checkpoint file.
///
/// # Safety
/// `model` is a live handle; `path` is NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn amflow_model_save(model: *const AmflowModel, path: *const c_char) -> AmflowStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        lift(save_checkpoint(&path, &m.model))
    })
}

/// Number of classes the model predicts.
///
/// # Safety
/// `model` is a live handle or NULL (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn amflow_model_categories(model: *const AmflowModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.categories)
}

/// Scalar parameter counts of the model.
///
/// # Safety
/// `model` is a live handle; the output pointers are writable.
#[no_mangle]
pub unsafe extern "C" fn amflow_model_param_counts(
    model: *const AmflowModel,
    trainable: *mut usize,
    total: *mut usize,
) -> AmflowStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let trainable = out_arg(trainable, "trainable")?;
        let total = out_arg(total, "total")?;
        let counts = m.model.param_counts();
        *trainable = counts.trainable();
        *total = counts.total();
        Ok(())
    })
}

/// Fused class logits for a clip, written to `logits[0..len]`; `len` must
/// be at least the category count.
///
/// # Safety
/// `model` and `clip` are live handles; `logits` points to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn amflow_model_classify(
    model: *const AmflowModel,
    clip: *const AmflowClip,
    logits: *mut f64,
    len: usize,
) -> AmflowStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let c = ref_arg(clip, "clip")?;
        if logits.is_null() {
            return Err(fail(AmflowStatus::NullPointer, "logits is null"));
        }
        let k = m.model.config.categories;
        if len < k {
            return Err(fail(AmflowStatus::BufferTooSmall, format!("need {k} logits, buffer holds {len}")));
        }
        let out = lift(m.model.forward(&c.clip.frames))?;
        std::slice::from_raw_parts_mut(logits, k).copy_from_slice(out.logits.data());
        Ok(())
    })
}

/// Releases a model handle. NULL is ignored.
///
/// # Safety
/// `model` is NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn amflow_model_free(model: *mut AmflowModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Renders one direction clip (label 0 right, 1 left, 2 down, 3 up) with
/// the default synthesis settings.
///
/// # Safety
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn amflow_clip_direction(label: usize, seed: u64, out: *mut *mut AmflowClip) -> AmflowStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if label >= DIRECTION_CLASSES {
            return Err(fail(
                AmflowStatus::Validation,
                format!("label {label} out of range for {DIRECTION_CLASSES} directions"),
            ));
        }
        let mut rng = seeded_stream(seed, label as u64);
        let spec = direction_spec(&SynthConfig::default(), label, &mut rng);
        let (clip, _) = lift(render_clip(&spec, seed))?;
        *out = Box::into_raw(Box::new(AmflowClip { clip }));
        Ok(())
    })
}

/// Reads a clip file.
///
/// # Safety
/// `path` is NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn amflow_clip_load(path: *const c_char, out: *mut *mut AmflowClip) -> AmflowStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        let clip = lift(load_clip(&path))?;
        *out = Box::into_raw(Box::new(AmflowClip { clip }));
        Ok(())
    })
}

/// Writes a clip file.
///
/// # Safety
/// `clip` is a live handle; `path` is NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn amflow_clip_save(clip: *const AmflowClip, path: *const c_char) -> AmflowStatus {
    guard(|| {
        let c = ref_arg(clip, "clip")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        lift(save_clip(&path, &c.clip))
    })
}

/// Label stored with the clip.
///
/// # Safety
/// `clip` is a live handle; `label` is writable.
#[no_mangle]
pub unsafe extern "C" fn amflow_clip_label(clip: *const AmflowClip, label: *mut usize) -> AmflowStatus {
    guard(|| {
        *out_arg(label, "label")? = ref_arg(clip, "clip")?.clip.label;
        Ok(())
    })
}

/// Frame count of the clip.
///
/// # Safety
/// `clip` is a live handle or NULL (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn amflow_clip_frames(clip: *const AmflowClip) -> usize {
    clip.as_ref().map_or(0, |c| c.clip.frames.len())
}

/// Releases a clip handle. NULL is ignored.
///
/// # Safety
/// `clip` is NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn amflow_clip_free(clip: *mut AmflowClip) {
    if !clip.is_null() {
        drop(Box::from_raw(clip));
    }
}

/// Runs the operation and micro-model gradient checks. Writes the worst
/// relative error to `worst` (when non-NULL); returns
/// `AMFLOW_STATUS_NUMERIC` if any check exceeds tolerance.
///
/// # Safety
/// `worst` is NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn amflow_gradcheck(seed: u64, worst: *mut f64) -> AmflowStatus {
    guard(|| {
        let mut checks = lift(op_suite(seed))?;
        checks.extend(lift(model_suite(seed))?);
        let w = checks.iter().map(|c| c.report.max_rel_err()).fold(0.0, f64::max);
        if let Some(out) = worst.as_mut() {
            *out = w;
        }
        let failed: Vec<_> = checks.iter().filter(|c| !c.report.passed()).map(|c| c.name.as_str()).collect();
        if failed.is_empty() {
            Ok(())
        } else {
            Err(fail(AmflowStatus::Numeric, format!("gradient check failed for: {}", failed.join(", "))))
        }
    })
}
