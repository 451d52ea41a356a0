//! C interface to trained P300 decoders.
//!
//! Every function returns a [`TcfnetStatus`]; on failure a description is
//! kept per thread and can be read with [`tcfnet_last_error`]. Models are
//! opaque handles created by [`tcfnet_model_load`] or [`tcfnet_model_new`]
//! and released with [`tcfnet_model_free`]. Panics never cross the
//! boundary; they are reported as `TCFNET_STATUS_INTERNAL`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use tcfnet::arch::{Model, ModelConfig, Topology};
use tcfnet::{checkpoint, Error, Tensor};

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TcfnetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    Format = 5,
    UnknownTopology = 6,
    Internal = 7,
}

/// Opaque model handle.
pub struct TcfnetModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> TcfnetStatus {
    match e {
        Error::ShapeMismatch { .. } => TcfnetStatus::ShapeMismatch,
        Error::Io { .. } => TcfnetStatus::Io,
        Error::Format { .. } => TcfnetStatus::Format,
        Error::UnknownTopology { .. } => TcfnetStatus::UnknownTopology,
        _ => TcfnetStatus::InvalidArgument,
    }
}

struct Fail(TcfnetStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(TcfnetStatus::NullPointer, format!("`{what}` is NULL"))
}

/// Run `f`, translating errors and panics into a status plus last-error text.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TcfnetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TcfnetStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            TcfnetStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        Fail(
            TcfnetStatus::InvalidArgument,
            format!("`{what}` is not valid UTF-8"),
        )
    })
}

unsafe fn model_arg<'a>(p: *const TcfnetModel) -> Result<&'a Model, Fail> {
    p.as_ref().map(|m| &m.model).ok_or_else(|| null("model"))
}

/// Description of the last failure on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn tcfnet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Forget the last error of this thread.
#[no_mangle]
pub extern "C" fn tcfnet_clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tcfnet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a checkpoint written by `tcfnet train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn tcfnet_model_load(
    path: *const c_char,
    out: *mut *mut TcfnetModel,
) -> TcfnetStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        if out.is_null() {
            return Err(null("out"));
        }
        let model = checkpoint::load(&path)?;
        *out = Box::into_raw(Box::new(TcfnetModel { model }));
        Ok(())
    })
}

/// A freshly initialised (untrained) model of `topology` with default settings.
///
/// # Safety
/// `topology` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn tcfnet_model_new(
    topology: *const c_char,
    seed: u64,
    out: *mut *mut TcfnetModel,
) -> TcfnetStatus {
    guard(|| {
        let t: Topology = str_arg(topology, "topology")?.parse()?;
        if out.is_null() {
            return Err(null("out"));
        }
        let model = Model::new(ModelConfig::new(t), seed)?;
        *out = Box::into_raw(Box::new(TcfnetModel { model }));
        Ok(())
    })
}

/// Write `model` as a checkpoint.
///
/// # Safety
/// `model` must come from this library and `path` be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tcfnet_model_save(
    model: *const TcfnetModel,
    path: *const c_char,
) -> TcfnetStatus {
    guard(|| {
        let m = model_arg(model)?;
        let path = PathBuf::from(str_arg(path, "path")?);
        checkpoint::save(m, &path)?;
        Ok(())
    })
}

/// Release a model. NULL is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tcfnet_model_free(model: *mut TcfnetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Electrodes and samples per epoch expected by `model`.
///
/// # Safety
/// `model` must come from this library; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn tcfnet_model_input_shape(
    model: *const TcfnetModel,
    channels: *mut usize,
    samples: *mut usize,
) -> TcfnetStatus {
    guard(|| {
        let m = model_arg(model)?;
        if channels.is_null() || samples.is_null() {
            return Err(null("channels/samples"));
        }
        *channels = m.config.channels;
        *samples = m.config.samples;
        Ok(())
    })
}

/// Topology id of `model` (static string), or NULL for a NULL handle.
///
/// # Safety
/// `model` must be NULL or come from this library.
#[no_mangle]
pub unsafe extern "C" fn tcfnet_model_topology(model: *const TcfnetModel) -> *const c_char {
    let Some(m) = model.as_ref() else {
        set_error("`model` is NULL".into());
        return std::ptr::null();
    };
    match m.model.config.topology {
        Topology::LeNet => c"lenet".as_ptr(),
        Topology::LeNetFnb => c"lenet-fnb".as_ptr(),
        Topology::EegTcnet => c"eeg-tcnet".as_ptr(),
        Topology::EegTcnetFnb => c"eeg-tcnet-fnb".as_ptr(),
        Topology::EegTcnetLstm => c"eeg-tcnet-lstm".as_ptr(),
        Topology::EegTcfnet => c"eeg-tcfnet".as_ptr(),
    }
}

/// Number of trainable parameters.
///
/// # Safety
/// `model` must come from this library and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn tcfnet_model_parameter_count(
    model: *const TcfnetModel,
    out: *mut usize,
) -> TcfnetStatus {
    guard(|| {
        let m = model_arg(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.count_parameters();
        Ok(())
    })
}

/// Score `n_epochs` preprocessed epochs. `data` holds `n_epochs × channels ×
/// samples` values, each epoch channel-major (all samples of electrode 0
/// first). `confidence` receives P(target) per epoch; `probs`, if not NULL,
/// receives `n_epochs × 2` class probabilities (non-target, target).
///
/// # Safety
/// `data` must point to `data_len` readable values, `confidence` to
/// `n_epochs` writable values and `probs` (when given) to `2 × n_epochs`.
#[no_mangle]
pub unsafe extern "C" fn tcfnet_model_predict(
    model: *const TcfnetModel,
    data: *const f64,
    data_len: usize,
    n_epochs: usize,
    confidence: *mut f64,
    probs: *mut f64,
) -> TcfnetStatus {
    guard(|| {
        let m = model_arg(model)?;
        if data.is_null() || confidence.is_null() {
            return Err(null("data/confidence"));
        }
        let (c, s) = (m.config.channels, m.config.samples);
        if n_epochs == 0 {
            return Err(Fail(
                TcfnetStatus::InvalidArgument,
                "n_epochs must be at least 1".into(),
            ));
        }
        if data_len != n_epochs * c * s {
            return Err(Fail(
                TcfnetStatus::ShapeMismatch,
                format!(
                    "expected {n_epochs} epochs of ({c}, {s}) = {} values, got {data_len}",
                    n_epochs * c * s
                ),
            ));
        }
        let x = Tensor::new(
            [n_epochs, c, s, 1],
            std::slice::from_raw_parts(data, data_len).to_vec(),
        )?;
        let p = m.predict_proba(&x)?;
        let conf = std::slice::from_raw_parts_mut(confidence, n_epochs);
        for (i, out) in conf.iter_mut().enumerate() {
            *out = p.data()[2 * i + 1];
        }
        if !probs.is_null() {
            std::slice::from_raw_parts_mut(probs, 2 * n_epochs).copy_from_slice(p.data());
        }
        Ok(())
    })
}

/// Wolpaw bitrate in bits per minute for accuracy `p` (0–1) among `items`
/// choices at `seconds` per selection.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tcfnet_bitrate(
    p: f64,
    items: usize,
    seconds: f64,
    out: *mut f64,
) -> TcfnetStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = tcfnet::eval::bitrate(p, items, seconds)?;
        Ok(())
    })
}
