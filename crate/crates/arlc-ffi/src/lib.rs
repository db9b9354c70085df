//! C ABI over trained checkpoints: open a checkpoint as an opaque model
//! handle, run per-iteration predictions, and evaluate against IDX datasets.
//!
//! Conventions: every fallible call returns an [`ArlcStatus`]; on failure a
//! thread-local message is readable via [`arlc_last_error_message`]. Handles
//! are created and released by matching `open`/`close` calls; all pointers
//! must outlive the call only.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use arlc::checkpoint::Checkpoint;
use arlc::config::RunConfig;
use arlc::error::Error;
use arlc::mnist::{load_dataset, Dataset, Split};
use arlc::models::{build_baseline, build_baseline_big, recurrent_model, Family};
use arlc::params::ParamStore;
use arlc::runner::{config_from_checkpoint, evaluate_checkpoint};
use arlc::tape::Tape;
use arlc::tensor::Tensor;

/// Status code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArlcStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Arguments violate the call's contract (sizes, ranges, geometry).
    InvalidArgument = 3,
    /// The underlying file could not be read or written.
    IoError = 4,
    /// The file exists but is not a valid checkpoint / IDX payload.
    FormatError = 5,
    /// A non-finite value surfaced during computation.
    NumericError = 6,
    /// An unexpected internal failure (a bug; details in the message).
    InternalError = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> ArlcStatus {
    match err {
        Error::Dimension { .. } | Error::Validation(_) | Error::Usage(_) => {
            ArlcStatus::InvalidArgument
        }
        Error::Numeric(_) => ArlcStatus::NumericError,
        Error::Format(_) => ArlcStatus::FormatError,
        Error::Io { .. } => ArlcStatus::IoError,
    }
}

fn fail(err: &Error) -> ArlcStatus {
    set_error(&err.to_string());
    status_of(err)
}

/// Wrap an FFI body so panics become `InternalError` instead of unwinding
/// across the C boundary.
fn guarded(body: impl FnOnce() -> ArlcStatus) -> ArlcStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            ArlcStatus::InternalError
        }
    }
}

unsafe fn cstr_arg(ptr: *const c_char, name: &str) -> Result<PathBuf, ArlcStatus> {
    if ptr.is_null() {
        set_error(&format!("{name} is null"));
        return Err(ArlcStatus::NullArgument);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => {
            set_error(&format!("{name} is not valid UTF-8"));
            Err(ArlcStatus::InvalidUtf8)
        }
    }
}

/// An opened checkpoint: parameters plus the run description needed to
/// rebuild the architecture.
pub struct ArlcModel {
    store: ParamStore,
    cfg: RunConfig,
}

/// A loaded image/label split.
pub struct ArlcDataset {
    data: Dataset,
}

/// Architecture and provenance summary of an open model.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct ArlcModelInfo {
    /// Training phase the checkpoint was written in (1 or 2).
    pub phase: u32,
    /// Recurrent iteration count (1 for phase-1 checkpoints).
    pub iterations: u32,
    /// Total scalar parameter count.
    pub param_count: u64,
    /// Weight-update step size.
    pub alpha: f64,
    /// Improvement-hinge weight used in training.
    pub lambda: f64,
    /// Seed the run was trained with.
    pub seed: u64,
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn arlc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message describing the most recent failure on this thread. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn arlc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Open a checkpoint file as a model handle. On success `*out` owns the
/// model; release it with [`arlc_model_close`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn arlc_model_open(
    path: *const c_char,
    out: *mut *mut ArlcModel,
) -> ArlcStatus {
    guarded(|| {
        if out.is_null() {
            set_error("out is null");
            return ArlcStatus::NullArgument;
        }
        let path = match cstr_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match open_model(&path) {
            Ok(model) => {
                *out = Box::into_raw(Box::new(model));
                ArlcStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

fn open_model(path: &Path) -> Result<ArlcModel, Error> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = config_from_checkpoint(&ckpt)?;
    Ok(ArlcModel {
        store: ckpt.store,
        cfg,
    })
}

/// Release a model handle. Null is a no-op.
///
/// # Safety
/// `model` must be null or a pointer from [`arlc_model_open`], not yet closed.
#[no_mangle]
pub unsafe extern "C" fn arlc_model_close(model: *mut ArlcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Fill `*out` with the model's architecture summary.
///
/// # Safety
/// Both pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn arlc_model_info(
    model: *const ArlcModel,
    out: *mut ArlcModelInfo,
) -> ArlcStatus {
    guarded(|| {
        if model.is_null() || out.is_null() {
            set_error("model or out is null");
            return ArlcStatus::NullArgument;
        }
        let m = &*model;
        *out = ArlcModelInfo {
            phase: m.cfg.phase as u32,
            iterations: if m.cfg.phase == 2 {
                m.cfg.iterations as u32
            } else {
                1
            },
            param_count: m.store.total_params() as u64,
            alpha: m.cfg.alpha,
            lambda: m.cfg.lambda,
            seed: m.cfg.seed,
        };
        ArlcStatus::Ok
    })
}

/// Per-iteration class scores for a batch of 28x28 grayscale images.
///
/// `pixels` holds `sample_count * 784` values in [0, 1], row-major per
/// sample. `out_logits` receives `sample_count * iterations * 10` values
/// laid out as [sample][iteration][class]; `out_capacity` is its length.
///
/// # Safety
/// All pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn arlc_model_predict(
    model: *const ArlcModel,
    pixels: *const f64,
    sample_count: usize,
    out_logits: *mut f64,
    out_capacity: usize,
) -> ArlcStatus {
    guarded(|| {
        if model.is_null() || pixels.is_null() || out_logits.is_null() {
            set_error("model, pixels, or out_logits is null");
            return ArlcStatus::NullArgument;
        }
        if sample_count == 0 {
            set_error("sample_count is zero");
            return ArlcStatus::InvalidArgument;
        }
        let m = &*model;
        let iterations = if m.cfg.phase == 2 { m.cfg.iterations } else { 1 };
        let needed = sample_count * iterations * 10;
        if out_capacity < needed {
            set_error(&format!(
                "out_capacity {out_capacity} < required {needed} (samples * iterations * 10)"
            ));
            return ArlcStatus::InvalidArgument;
        }
        let input = std::slice::from_raw_parts(pixels, sample_count * 784);
        let out = std::slice::from_raw_parts_mut(out_logits, needed);
        match predict(m, input, sample_count, iterations, out) {
            Ok(()) => ArlcStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

fn predict(
    m: &ArlcModel,
    pixels: &[f64],
    samples: usize,
    iterations: usize,
    out: &mut [f64],
) -> Result<(), Error> {
    let images = Tensor::new(vec![samples, 1, 28, 28], pixels.to_vec())?;
    let mut tape = Tape::new();
    let staged = m.store.stage(&mut tape);
    let x = tape.constant(images);
    let per_iter = if m.cfg.phase == 2 {
        let model = recurrent_model(m.cfg.iterations, m.cfg.alpha)?;
        model.forward_logits(&mut tape, &staged, x)?
    } else {
        let (model, _) = match m.cfg.family {
            Family::BaselineBig => build_baseline_big(0),
            _ => build_baseline(0),
        };
        vec![model.forward(&mut tape, &staged, x)?]
    };
    for (i, logits) in per_iter.iter().enumerate() {
        let data = tape.value(*logits).data();
        for s in 0..samples {
            let dst = (s * iterations + i) * 10;
            out[dst..dst + 10].copy_from_slice(&data[s * 10..(s + 1) * 10]);
        }
    }
    Ok(())
}

/// Open an IDX image/label pair (plain or gzip) as a dataset handle.
///
/// # Safety
/// `images_path` and `labels_path` must be NUL-terminated strings, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn arlc_dataset_open(
    images_path: *const c_char,
    labels_path: *const c_char,
    out: *mut *mut ArlcDataset,
) -> ArlcStatus {
    guarded(|| {
        if out.is_null() {
            set_error("out is null");
            return ArlcStatus::NullArgument;
        }
        let images = match cstr_arg(images_path, "images_path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let labels = match cstr_arg(labels_path, "labels_path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_dataset(&images, &labels, Split::Test) {
            Ok(data) => {
                *out = Box::into_raw(Box::new(ArlcDataset { data }));
                ArlcStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Release a dataset handle. Null is a no-op.
///
/// # Safety
/// `dataset` must be null or a pointer from [`arlc_dataset_open`].
#[no_mangle]
pub unsafe extern "C" fn arlc_dataset_close(dataset: *mut ArlcDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Number of samples in a dataset; zero for null.
///
/// # Safety
/// `dataset` must be null or a valid handle.
#[no_mangle]
pub unsafe extern "C" fn arlc_dataset_len(dataset: *const ArlcDataset) -> u64 {
    if dataset.is_null() {
        0
    } else {
        (*dataset).data.len() as u64
    }
}

/// Top-1 accuracy (percent) of the model on a dataset, one value per
/// iteration. `out_count` receives how many values were written.
///
/// # Safety
/// All pointers must be valid; `out_accuracies` must hold `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn arlc_model_evaluate(
    model: *const ArlcModel,
    dataset: *const ArlcDataset,
    out_accuracies: *mut f64,
    capacity: usize,
    out_count: *mut usize,
) -> ArlcStatus {
    guarded(|| {
        if model.is_null() || dataset.is_null() || out_accuracies.is_null() || out_count.is_null()
        {
            set_error("model, dataset, out_accuracies, or out_count is null");
            return ArlcStatus::NullArgument;
        }
        let m = &*model;
        let d = &*dataset;
        let iterations = if m.cfg.phase == 2 { m.cfg.iterations } else { 1 };
        if capacity < iterations {
            set_error(&format!("capacity {capacity} < iterations {iterations}"));
            return ArlcStatus::InvalidArgument;
        }
        match evaluate_checkpoint(&m.store, &m.cfg, &d.data, None) {
            Ok(accs) => {
                let out = std::slice::from_raw_parts_mut(out_accuracies, accs.len());
                out.copy_from_slice(&accs);
                *out_count = accs.len();
                ArlcStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}
