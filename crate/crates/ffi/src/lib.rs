//! C ABI over `afn-core`.
//!
//! Every function returns an [`AfnStatus`]; on failure the message is kept
//! per thread and can be read with [`afn_last_error`]. Handles are opaque
//! and must be released with their `_free` function. Tensors cross the
//! boundary as contiguous row-major `double` buffers in NCHW order.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use afn_core::afn::{AfnCache, AfnLayer};
use afn_core::experiment::{load_checkpoint, Model};
use afn_core::nn::{Gradients, Module};
use afn_core::norm::StatScope;
use afn_core::{Error, Mode, Prng, Tensor};

/// Result code of every exported function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AfnStatus {
    Ok = 0,
    NullPointer = 1,
    Shape = 2,
    InvalidInput = 3,
    Numeric = 4,
    Format = 5,
    Consistency = 6,
    Config = 7,
    Io = 8,
    /// Call made in the wrong order, e.g. backward before forward.
    State = 9,
    /// A grad check ran but exceeded its tolerance.
    CheckFailed = 10,
    Panic = 11,
}

/// Statistic scope of an AFN layer.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AfnScope {
    Batch = 0,
    Instance = 1,
}

/// Opaque AFN layer plus the cache of its last forward pass.
pub struct AfnLayerHandle {
    layer: AfnLayer,
    cache: Option<AfnCache>,
    shape: Vec<usize>,
    grads: Option<Gradients>,
}

/// Opaque trained model loaded from a checkpoint.
pub struct AfnModelHandle {
    model: Model,
    batch_size: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> AfnStatus {
    match e {
        Error::Shape(_) => AfnStatus::Shape,
        Error::Input(_) => AfnStatus::InvalidInput,
        Error::Numeric { .. } => AfnStatus::Numeric,
        Error::Format(_) => AfnStatus::Format,
        Error::Consistency(_) => AfnStatus::Consistency,
        Error::Config(_) | Error::Usage(_) => AfnStatus::Config,
        Error::Io { .. } => AfnStatus::Io,
    }
}

struct Fail(AfnStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn fail<T>(status: AfnStatus, msg: impl Into<String>) -> Result<T, Fail> {
    Err(Fail(status, msg.into()))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AfnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            AfnStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            AfnStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return fail(AfnStatus::NullPointer, format!("{what} is null"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return fail(AfnStatus::NullPointer, format!("{what} is null"));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *mut T) -> Result<&'a mut T, Fail> {
    p.as_mut().map_or_else(|| fail(AfnStatus::NullPointer, "handle is null"), Ok)
}

fn copy_out(src: &Tensor, dst: &mut [f64], what: &str) -> Result<(), Fail> {
    if dst.len() != src.len() {
        return fail(
            AfnStatus::Shape,
            format!("{what} buffer holds {} values, need {}", dst.len(), src.len()),
        );
    }
    dst.copy_from_slice(src.data());
    Ok(())
}

fn mode(train: bool) -> Mode {
    if train {
        Mode::Train
    } else {
        Mode::Eval
    }
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn afn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Creates an AFN layer over `channels` channels, initialized from `seed`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle pointer.
#[no_mangle]
pub unsafe extern "C" fn afn_layer_new(
    channels: usize,
    scope: AfnScope,
    seed: u64,
    out: *mut *mut AfnLayerHandle,
) -> AfnStatus {
    guard(|| {
        if out.is_null() {
            return fail(AfnStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let scope = match scope {
            AfnScope::Batch => StatScope::Batch,
            AfnScope::Instance => StatScope::Instance,
        };
        let layer = AfnLayer::new(channels, scope, &mut Prng::new(seed))?;
        *out = Box::into_raw(Box::new(AfnLayerHandle {
            layer,
            cache: None,
            shape: Vec::new(),
            grads: None,
        }));
        Ok(())
    })
}

/// # Safety
/// `h` must be null or a handle from [`afn_layer_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn afn_layer_free(h: *mut AfnLayerHandle) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Sets all four blend logits; a very negative value collapses the layer
/// to plain normalization.
///
/// # Safety
/// `h` must be a live layer handle.
#[no_mangle]
pub unsafe extern "C" fn afn_layer_set_lambda_logits(h: *mut AfnLayerHandle, logit: f64) -> AfnStatus {
    guard(|| {
        handle(h)?.layer.set_lambda_logits(logit);
        Ok(())
    })
}

/// Total number of trainable scalars.
///
/// # Safety
/// `h` must be a live layer handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn afn_layer_param_count(h: *mut AfnLayerHandle, out: *mut usize) -> AfnStatus {
    guard(|| {
        let hd = handle(h)?;
        let n = hd.layer.params().iter().map(|(_, t)| t.len()).sum();
        *slice_mut(out, 1, "out")?.first_mut().expect("len 1") = n;
        Ok(())
    })
}

/// Forward pass on an `(n, c, height, width)` input. `train != 0` uses
/// batch statistics and updates the running averages. The cache is kept
/// for [`afn_layer_backward`].
///
/// # Safety
/// `x` and `y` must each point to `n*c*height*width` doubles.
#[no_mangle]
pub unsafe extern "C" fn afn_layer_forward(
    h: *mut AfnLayerHandle,
    x: *const f64,
    n: usize,
    c: usize,
    height: usize,
    width: usize,
    train: i32,
    y: *mut f64,
) -> AfnStatus {
    guard(|| {
        let hd = handle(h)?;
        let len = n * c * height * width;
        let xt = Tensor::new(vec![n, c, height, width], slice(x, len, "x")?.to_vec())?;
        let y = slice_mut(y, len, "y")?;
        hd.cache = None;
        hd.grads = None;
        let (out, cache) = hd.layer.forward(&xt, mode(train != 0))?;
        copy_out(&out, y, "y")?;
        hd.cache = Some(cache);
        hd.shape = vec![n, c, height, width];
        Ok(())
    })
}

/// Backward pass against the last forward. Writes the input gradient to
/// `dx` and keeps the parameter gradients for [`afn_layer_param_grads`].
///
/// # Safety
/// `dy` and `dx` must each hold as many doubles as the last forward input.
#[no_mangle]
pub unsafe extern "C" fn afn_layer_backward(h: *mut AfnLayerHandle, dy: *const f64, len: usize, dx: *mut f64) -> AfnStatus {
    guard(|| {
        let hd = handle(h)?;
        let Some(cache) = hd.cache.as_ref() else {
            return fail(AfnStatus::State, "backward called before forward");
        };
        let dyt = Tensor::new(hd.shape.clone(), slice(dy, len, "dy")?.to_vec())?;
        let g = hd.layer.backward(cache, &dyt)?;
        copy_out(&g.dx, slice_mut(dx, len, "dx")?, "dx")?;
        hd.grads = Some(g);
        Ok(())
    })
}

/// Parameter gradients of the last backward, concatenated in parameter
/// order; `len` must equal [`afn_layer_param_count`].
///
/// # Safety
/// `out` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn afn_layer_param_grads(h: *mut AfnLayerHandle, out: *mut f64, len: usize) -> AfnStatus {
    guard(|| {
        let hd = handle(h)?;
        let Some(g) = hd.grads.as_ref() else {
            return fail(AfnStatus::State, "no backward pass yet");
        };
        let flat = Tensor::from_vec(g.params.iter().flat_map(|t| t.data().iter().copied()).collect());
        copy_out(&flat, slice_mut(out, len, "out")?, "gradient")
    })
}

/// Loads a trained model from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn afn_model_load(path: *const c_char, out: *mut *mut AfnModelHandle) -> AfnStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return fail(AfnStatus::NullPointer, "path or out is null");
        }
        *out = ptr::null_mut();
        let Ok(path) = CStr::from_ptr(path).to_str() else {
            return fail(AfnStatus::InvalidInput, "path is not UTF-8");
        };
        let ck = load_checkpoint(path)?;
        *out = Box::into_raw(Box::new(AfnModelHandle {
            model: ck.model,
            batch_size: ck.config.eval_batch_size,
        }));
        Ok(())
    })
}

/// # Safety
/// `h` must be null or a handle from [`afn_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn afn_model_free(h: *mut AfnModelHandle) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Writes `[channels, height, width]` to `dims` and the class count to
/// `classes`.
///
/// # Safety
/// `dims` must hold 3 values and `classes` one.
#[no_mangle]
pub unsafe extern "C" fn afn_model_info(h: *mut AfnModelHandle, dims: *mut usize, classes: *mut usize) -> AfnStatus {
    guard(|| {
        let hd = handle(h)?;
        slice_mut(dims, 3, "dims")?.copy_from_slice(&hd.model.input_dims());
        slice_mut(classes, 1, "classes")?[0] = hd.model.num_classes();
        Ok(())
    })
}

/// Predicted class of each of `n` images in evaluation mode.
///
/// # Safety
/// `images` must hold `n*C*H*W` doubles for the model's input dims and
/// `labels` must hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn afn_model_predict(
    h: *mut AfnModelHandle,
    images: *const f64,
    n: usize,
    labels: *mut usize,
) -> AfnStatus {
    guard(|| {
        let hd = handle(h)?;
        let [c, height, width] = hd.model.input_dims();
        let per = c * height * width;
        let x = slice(images, n * per, "images")?;
        let labels = slice_mut(labels, n, "labels")?;
        let step = hd.batch_size.max(1);
        for start in (0..n).step_by(step) {
            let end = (start + step).min(n);
            let batch = Tensor::new(vec![end - start, c, height, width], x[start * per..end * per].to_vec())?;
            labels[start..end].copy_from_slice(&hd.model.predict(&batch)?);
        }
        Ok(())
    })
}

/// Finite-difference check of a freshly built layer. `layer` is one of
/// batch, layer, instance, group, bin, asr, afn or conv. Writes the
/// largest relative error and returns `CheckFailed` above 1e-4.
///
/// # Safety
/// `layer` must be a NUL-terminated string and `max_error` writable.
#[no_mangle]
pub unsafe extern "C" fn afn_grad_check(
    layer: *const c_char,
    n: usize,
    c: usize,
    height: usize,
    width: usize,
    seed: u64,
    train: i32,
    max_error: *mut f64,
) -> AfnStatus {
    guard(|| {
        if layer.is_null() || max_error.is_null() {
            return fail(AfnStatus::NullPointer, "layer or max_error is null");
        }
        let Ok(name) = CStr::from_ptr(layer).to_str() else {
            return fail(AfnStatus::InvalidInput, "layer name is not UTF-8");
        };
        let report = afn_core::cli::gradcheck_layer(name, [n, c, height, width], seed, mode(train != 0), 1e-5)?;
        let max = report.max();
        *max_error = max;
        if max > afn_core::cli::GRADCHECK_TOLERANCE {
            return fail(AfnStatus::CheckFailed, format!("max relative error {max:e}"));
        }
        Ok(())
    })
}
