//! C ABI over `qnn-core`: load a checkpoint, run inference, free it.
//!
//! Every fallible function returns a [`QnnStatus`]; on failure the message is
//! available from [`qnn_last_error`] on the same thread until the next call.
//! Handles are opaque and must be released with [`qnn_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use qnn_core::{InputSpec, Inputs, QnnError};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QnnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Format = 5,
    Integrity = 6,
    Version = 7,
    Io = 8,
    Numeric = 9,
    Panic = 10,
}

impl From<&QnnError> for QnnStatus {
    fn from(e: &QnnError) -> Self {
        match e {
            QnnError::Dimension { .. } | QnnError::Argument(_) => QnnStatus::InvalidArgument,
            QnnError::Config(_) | QnnError::Json(_) => QnnStatus::Config,
            QnnError::Data(_) | QnnError::Schema(_) | QnnError::MetricUndefined(_) => QnnStatus::Data,
            QnnError::Format(_) => QnnStatus::Format,
            QnnError::Integrity(_) => QnnStatus::Integrity,
            QnnError::Version { .. } => QnnStatus::Version,
            QnnError::Io(_) => QnnStatus::Io,
            QnnError::Numeric(_) => QnnStatus::Numeric,
        }
    }
}

/// Opaque model handle.
pub struct QnnModel(qnn_core::QnnModel);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard<F: FnOnce() -> Result<(), (QnnStatus, String)>>(f: F) -> QnnStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => QnnStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            QnnStatus::Panic
        }
    }
}

fn fail(e: QnnError) -> (QnnStatus, String) {
    (QnnStatus::from(&e), e.to_string())
}

fn null(what: &str) -> (QnnStatus, String) {
    (QnnStatus::NullPointer, format!("{what} is null"))
}

/// Message of the last failed call on this thread, or null. Owned by the library.
#[no_mangle]
pub extern "C" fn qnn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn qnn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint written by `qnn train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn qnn_model_load(path: *const c_char, out: *mut *mut QnnModel) -> QnnStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| (QnnStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let model = qnn_core::QnnModel::load(Path::new(path)).map_err(fail)?;
        unsafe { *out = Box::into_raw(Box::new(QnnModel(model))) };
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must come from [`qnn_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn qnn_model_free(model: *mut QnnModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Number of categorical fields per row (0 for dense-input models).
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn qnn_model_num_fields(model: *const QnnModel) -> usize {
    match unsafe { model.as_ref() }.map(|m| &m.0.config().input) {
        Some(InputSpec::Embedding { fields, .. }) => fields.len(),
        _ => 0,
    }
}

/// Number of dense features per row (0 for embedding models).
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn qnn_model_num_features(model: *const QnnModel) -> usize {
    match unsafe { model.as_ref() }.map(|m| &m.0.config().input) {
        Some(InputSpec::Dense { features, .. }) => *features,
        _ => 0,
    }
}

/// Vocabulary size of field `field`, or 0 when out of range.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn qnn_model_vocab_size(model: *const QnnModel, field: usize) -> usize {
    match unsafe { model.as_ref() }.map(|m| &m.0.config().input) {
        Some(InputSpec::Embedding { fields, .. }) => fields.get(field).map_or(0, |f| f.vocab_size),
        _ => 0,
    }
}

unsafe fn predict_with(
    model: *const QnnModel,
    rows: usize,
    per_row: impl Fn(&qnn_core::QnnModel) -> usize,
    make: impl FnOnce(usize) -> Result<Inputs<'static>, (QnnStatus, String)>,
    out: *mut f64,
) -> QnnStatus {
    guard(|| {
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        if rows == 0 {
            return Err((QnnStatus::InvalidArgument, "rows must be >= 1".into()));
        }
        let width = per_row(&m.0);
        if width == 0 {
            return Err((QnnStatus::InvalidArgument, "input kind does not match the model".into()));
        }
        let inputs = make(rows * width)?;
        let p = m.0.predict(inputs).map_err(fail)?;
        unsafe { ptr::copy_nonoverlapping(p.as_ptr(), out, p.len()) };
        Ok(())
    })
}

/// Click probabilities for `rows` rows of vocabulary indices (`rows * fields`
/// values, row-major). Writes `rows` doubles to `out`.
///
/// # Safety
/// `indices` must hold `rows * qnn_model_num_fields(model)` values and `out`
/// room for `rows` doubles.
#[no_mangle]
pub unsafe extern "C" fn qnn_model_predict(
    model: *const QnnModel,
    indices: *const u32,
    rows: usize,
    out: *mut f64,
) -> QnnStatus {
    unsafe {
        predict_with(
            model,
            rows,
            |m| match &m.config().input {
                InputSpec::Embedding { fields, .. } => fields.len(),
                InputSpec::Dense { .. } => 0,
            },
            |n| {
                if indices.is_null() {
                    return Err(null("indices"));
                }
                Ok(Inputs::Categorical(std::slice::from_raw_parts(indices, n)))
            },
            out,
        )
    }
}

/// Click probabilities for `rows` dense rows (`rows * features` values).
///
/// # Safety
/// `x` must hold `rows * qnn_model_num_features(model)` values and `out` room
/// for `rows` doubles.
#[no_mangle]
pub unsafe extern "C" fn qnn_model_predict_dense(
    model: *const QnnModel,
    x: *const f64,
    rows: usize,
    out: *mut f64,
) -> QnnStatus {
    unsafe {
        predict_with(
            model,
            rows,
            |m| match &m.config().input {
                InputSpec::Dense { features, .. } => *features,
                InputSpec::Embedding { .. } => 0,
            },
            |n| {
                if x.is_null() {
                    return Err(null("x"));
                }
                Ok(Inputs::Dense(std::slice::from_raw_parts(x, n)))
            },
            out,
        )
    }
}
