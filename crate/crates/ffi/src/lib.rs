//! C ABI over `modalign`.
//!
//! Every fallible function returns an [`MaStatus`] and writes results through
//! pointer arguments. Handles are opaque; release each with its `*_free`
//! function. After a failure the calling thread's last error message is
//! available through [`ma_last_error`]. Panics never cross the boundary; they
//! surface as [`MaStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use modalign::autodiff::Tensor;
use modalign::data::{selection_embedding, TokenSelection};
use modalign::detector::{Detector, MocaMode};
use modalign::eval::iou;
use modalign::mi_lab::{exact_infonce_loss, exact_mi, Critic, DiscreteJoint};
use modalign::queryrepa::load_model;
use modalign::tokens::{TokenProjection, TokenRegistry};
use modalign::train::{CHECKPOINT_STEM, TOKENS_FILE};
use modalign::Error;

/// Result codes shared by every function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    /// Rejected input: bad value, shape mismatch, unknown name.
    Validation = 3,
    Io = 4,
    Checkpoint = 5,
    Numerical = 6,
    /// An output buffer is shorter than required.
    BufferTooSmall = 7,
    Panic = 8,
}

/// Detector loaded from a training run directory, with its token
/// projection and registry.
pub struct MaModel {
    detector: Detector,
    projection: TokenProjection,
    registry: TokenRegistry,
}

pub struct MaRegistry {
    inner: TokenRegistry,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(MaStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => MaStatus::Io,
            Error::Checkpoint(_) => MaStatus::Checkpoint,
            Error::Numerical(_) | Error::Degenerate(_) => MaStatus::Numerical,
            _ => MaStatus::Validation,
        };
        Failure(status, e.to_string())
    }
}

fn fail<T>(status: MaStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MaStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MaStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return fail(MaStatus::NullArgument, format!("{name} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(MaStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return fail(MaStatus::NullArgument, format!("{name} is null"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, need: usize, name: &str) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return fail(MaStatus::NullArgument, format!("{name} is null"));
    }
    if len < need {
        return fail(MaStatus::BufferTooSmall, format!("{name} holds {len} values, {need} needed"));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

unsafe fn write<T>(p: *mut T, v: T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        return fail(MaStatus::NullArgument, format!("{name} is null"));
    }
    p.write(v);
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ma_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Bytes needed to hold the last error message, including the terminator.
#[no_mangle]
pub extern "C" fn ma_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().as_bytes_with_nul().len())
}

/// Copies the calling thread's last error message into `buf`. The message is
/// empty after a successful call.
///
/// # Safety
/// `buf` must be valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn ma_last_error(buf: *mut c_char, len: usize) -> MaStatus {
    if buf.is_null() {
        return MaStatus::NullArgument;
    }
    LAST_ERROR.with(|e| {
        let bytes = e.borrow();
        let bytes = bytes.as_bytes_with_nul();
        if bytes.len() > len {
            return MaStatus::BufferTooSmall;
        }
        std::ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, bytes.len());
        MaStatus::Ok
    })
}

/// Loads the checkpoint and token registry of a training run directory.
///
/// # Safety
/// `run_dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ma_model_load(run_dir: *const c_char, out: *mut *mut MaModel) -> MaStatus {
    guard(|| {
        let dir = Path::new(str_arg(run_dir, "run_dir")?);
        if out.is_null() {
            return fail(MaStatus::NullArgument, "out is null");
        }
        let (detector, projection, _) = load_model(dir, CHECKPOINT_STEM)?;
        let registry = TokenRegistry::load(dir.join(TOKENS_FILE))?;
        if registry.d_text() != projection.d_text() {
            return fail(MaStatus::Checkpoint, "token registry does not match the projection width");
        }
        let model = Box::new(MaModel {
            detector,
            projection,
            registry,
        });
        write(out, Box::into_raw(model), "out")
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`ma_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ma_model_free(model: *mut MaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn ma_model_dims(
    model: *const MaModel,
    num_queries: *mut usize,
    num_classes: *mut usize,
    d_model: *mut usize,
) -> MaStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return fail(MaStatus::NullArgument, "model is null");
        };
        let c = m.detector.config();
        write(num_queries, c.num_queries, "num_queries")?;
        write(num_classes, c.num_classes, "num_classes")?;
        write(d_model, c.d_model, "d_model")
    })
}

/// Final-layer class probabilities (`N × C`, row-major) and `cxcywh` boxes
/// (`N × 4`) for one row-major `height × width` image. With MoCA enabled,
/// `modality` names the image's modality and the token averages its classes;
/// it may be null otherwise.
///
/// # Safety
/// `image` must hold `height * width` values; `probs` and `boxes` must be
/// writable for `probs_len` and `boxes_len` values.
#[no_mangle]
pub unsafe extern "C" fn ma_model_predict(
    model: *const MaModel,
    image: *const f64,
    height: usize,
    width: usize,
    modality: *const c_char,
    probs: *mut f64,
    probs_len: usize,
    boxes: *mut f64,
    boxes_len: usize,
) -> MaStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return fail(MaStatus::NullArgument, "model is null");
        };
        let pixels = slice_arg(image, height * width, "image")?;
        let img = Tensor::matrix(height, width, pixels.to_vec())?;
        let mode = m.detector.default_mode();
        let token = if mode == MocaMode::Off {
            None
        } else {
            let name = str_arg(modality, "modality")?;
            let sel = TokenSelection {
                modality: name.to_string(),
                classes: m.registry.classes_of(name)?.into_iter().map(str::to_owned).collect(),
            };
            let e = selection_embedding(&m.registry, &sel)?;
            let (dm, dt) = (m.projection.d_model(), m.projection.d_text());
            let w = m.projection.weight.data();
            Some(Tensor::row(
                (0..dm).map(|i| (0..dt).map(|j| w[i * dt + j] * e[j]).sum()).collect(),
            ))
        };
        let (p, b) = m.detector.predict(&img, token.as_ref(), mode)?;
        out_slice(probs, probs_len, p.len(), "probs")?.copy_from_slice(p.data());
        out_slice(boxes, boxes_len, b.len(), "boxes")?.copy_from_slice(b.data());
        Ok(())
    })
}

/// Loads a token registry JSON file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ma_registry_load(path: *const c_char, out: *mut *mut MaRegistry) -> MaStatus {
    guard(|| {
        let p = str_arg(path, "path")?;
        if out.is_null() {
            return fail(MaStatus::NullArgument, "out is null");
        }
        let inner = TokenRegistry::load(p)?;
        write(out, Box::into_raw(Box::new(MaRegistry { inner })), "out")
    })
}

/// Releases a registry; null is ignored.
///
/// # Safety
/// `registry` must come from [`ma_registry_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ma_registry_free(registry: *mut MaRegistry) {
    if !registry.is_null() {
        drop(Box::from_raw(registry));
    }
}

/// # Safety
/// `registry` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn ma_registry_dims(registry: *const MaRegistry, d_text: *mut usize, len: *mut usize) -> MaStatus {
    guard(|| {
        let Some(r) = registry.as_ref() else {
            return fail(MaStatus::NullArgument, "registry is null");
        };
        write(d_text, r.inner.d_text(), "d_text")?;
        write(len, r.inner.len(), "len")
    })
}

/// Copies the raw vector of `(modality, class)` into `out`.
///
/// # Safety
/// Strings must be NUL-terminated; `out` must be writable for `len` values.
#[no_mangle]
pub unsafe extern "C" fn ma_registry_get(
    registry: *const MaRegistry,
    modality: *const c_char,
    class: *const c_char,
    out: *mut f64,
    len: usize,
) -> MaStatus {
    guard(|| {
        let Some(r) = registry.as_ref() else {
            return fail(MaStatus::NullArgument, "registry is null");
        };
        let e = r.inner.get(str_arg(modality, "modality")?, str_arg(class, "class")?)?;
        out_slice(out, len, e.vector.len(), "out")?.copy_from_slice(&e.vector);
        Ok(())
    })
}

/// IoU of two `xyxy` boxes.
///
/// # Safety
/// `a` and `b` must hold 4 values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ma_iou(a: *const f64, b: *const f64, out: *mut f64) -> MaStatus {
    guard(|| {
        let a = slice_arg(a, 4, "a")?;
        let b = slice_arg(b, 4, "b")?;
        let v = iou([a[0], a[1], a[2], a[3]], [b[0], b[1], b[2], b[3]])?;
        write(out, v, "out")
    })
}

unsafe fn joint_arg(p: *const f64, nu: usize, nv: usize) -> Result<DiscreteJoint, Failure> {
    let table = slice_arg(p, nu * nv, "p")?;
    Ok(DiscreteJoint::new(nu, nv, table.to_vec())?)
}

/// Mutual information (nats) of a row-major `nu × nv` joint table.
///
/// # Safety
/// `p` must hold `nu * nv` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ma_exact_mi(p: *const f64, nu: usize, nv: usize, out: *mut f64) -> MaStatus {
    guard(|| {
        let j = joint_arg(p, nu, nv)?;
        write(out, exact_mi(&j), "out")
    })
}

/// Exact InfoNCE bound `ln(1+K) − L` under the optimal critic, by
/// enumeration. Small tables and `K` only.
///
/// # Safety
/// `p` must hold `nu * nv` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ma_infonce_exact_bound(
    p: *const f64,
    nu: usize,
    nv: usize,
    k: usize,
    out: *mut f64,
) -> MaStatus {
    guard(|| {
        let j = joint_arg(p, nu, nv)?;
        let loss = exact_infonce_loss(&j, &Critic::Optimal, k)?;
        write(out, ((1 + k) as f64).ln() - loss, "out")
    })
}
