//! C ABI over `snr-core`: load a checkpoint, embed images, score retrieval.
//!
//! Every fallible function returns an [`SnrStatus`]. On failure the message
//! is available from [`snr_last_error`] on the same thread until the next
//! call. Handles are opaque and must be released with [`snr_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use snr_core::diffcore::{cosine_distance, Tensor};
use snr_core::evalkit::evaluate_retrieval;
use snr_core::harness::{load_checkpoint, lr_schedule, OptimConfig};
use snr_core::model::Model;
use snr_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SnrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Checkpoint = 5,
    Numeric = 6,
    Empty = 7,
    Panic = 8,
    Other = 9,
}

/// Opaque model handle.
pub struct SnrModel {
    model: Model,
}

/// Retrieval summary filled by [`snr_evaluate`].
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SnrRetrieval {
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub rank20: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> SnrStatus {
    match e {
        Error::Shape(_) | Error::EmptySpatial(_) => SnrStatus::Shape,
        Error::Io { .. } => SnrStatus::Io,
        Error::Checkpoint(_) | Error::Format(_) | Error::Json(_) => SnrStatus::Checkpoint,
        Error::NonFinite(_) | Error::ZeroNorm | Error::Divergence { .. } => SnrStatus::Numeric,
        Error::InvalidArgument(_) | Error::Config(_) | Error::Triplet { .. } => {
            SnrStatus::InvalidArgument
        }
        Error::Empty(_) => SnrStatus::Empty,
        _ => SnrStatus::Other,
    }
}

struct Fail(SnrStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SnrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SnrStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SnrStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail(SnrStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// Reads `len` values, or an empty slice when `len` is zero.
unsafe fn view<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(slice::from_raw_parts(p, len))
}

fn rows(data: &[f32], n: usize, dim: usize) -> Result<Tensor, Fail> {
    Ok(Tensor::new(
        &[n, dim],
        data.iter().map(|&v| v as f64).collect(),
    )?)
}

/// Message of the last failure on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn snr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads the checkpoint directory `dir` into `*out`.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn snr_model_load(dir: *const c_char, out: *mut *mut SnrModel) -> SnrStatus {
    guard(|| {
        non_null(dir, "dir")?;
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let path = CStr::from_ptr(dir)
            .to_str()
            .map_err(|_| Fail(SnrStatus::InvalidArgument, "dir is not UTF-8".into()))?;
        let (model, _) = load_checkpoint(Path::new(path))?;
        *out = Box::into_raw(Box::new(SnrModel { model }));
        Ok(())
    })
}

/// Releases a handle from [`snr_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must come from [`snr_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn snr_model_free(model: *mut SnrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes `[channels, height, width]` of the expected input to `out[0..3]`.
///
/// # Safety
/// `model` must be a live handle and `out` must hold 3 values.
#[no_mangle]
pub unsafe extern "C" fn snr_model_input_shape(
    model: *const SnrModel,
    out: *mut usize,
) -> SnrStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        let s = (*model).model.config().input;
        ptr::copy_nonoverlapping(s.as_ptr(), out, 3);
        Ok(())
    })
}

/// Width of the retrieval features returned by [`snr_model_embed`].
///
/// # Safety
/// `model` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn snr_model_embedding_dim(
    model: *const SnrModel,
    out: *mut usize,
) -> SnrStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        *out = (*model).model.config().embedding_dim;
        Ok(())
    })
}

/// Number of trainable scalars.
///
/// # Safety
/// `model` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn snr_model_parameter_count(
    model: *const SnrModel,
    out: *mut u64,
) -> SnrStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        *out = (*model).model.parameter_count() as u64;
        Ok(())
    })
}

/// Embeds `n` images stored row-major as `[n, c, h, w]` into `out`,
/// which must hold `n * embedding_dim` values (`out_len`).
///
/// # Safety
/// `images` must hold `n * c * h * w` values and `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn snr_model_embed(
    model: *const SnrModel,
    images: *const f32,
    n: usize,
    out: *mut f32,
    out_len: usize,
) -> SnrStatus {
    guard(|| {
        non_null(model, "model")?;
        let m = &(*model).model;
        let [c, h, w] = m.config().input;
        let dim = m.config().embedding_dim;
        if n == 0 {
            return Err(Fail(SnrStatus::Empty, "no images".into()));
        }
        if out_len != n * dim {
            return Err(Fail(
                SnrStatus::Shape,
                format!("output holds {out_len} values, need {}", n * dim),
            ));
        }
        let per = c * h * w;
        let data = view(images, n * per, "images")?;
        let imgs = data
            .chunks_exact(per)
            .map(|px| Tensor::new(&[c, h, w], px.iter().map(|&v| v as f64).collect()))
            .collect::<Result<Vec<_>, _>>()?;
        let feats = m.embed(&imgs)?;
        non_null(out, "out")?;
        let dst = slice::from_raw_parts_mut(out, out_len);
        for (d, &s) in dst.iter_mut().zip(feats.data()) {
            *d = s as f32;
        }
        Ok(())
    })
}

/// Learning rate at `epoch` under the default schedule.
#[no_mangle]
pub extern "C" fn snr_lr_schedule(epoch: u32) -> f64 {
    lr_schedule(epoch as usize, &OptimConfig::default())
}

/// Cosine distance `0.5 - a.b / (2 |a| |b|)` of two length-`len` vectors.
///
/// # Safety
/// `a` and `b` must hold `len` values and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn snr_cosine_distance(
    a: *const f64,
    b: *const f64,
    len: usize,
    out: *mut f64,
) -> SnrStatus {
    guard(|| {
        let (a, b) = (view(a, len, "a")?, view(b, len, "b")?);
        non_null(out, "out")?;
        *out = cosine_distance(a, b)?;
        Ok(())
    })
}

/// mAP and CMC of `nq` query rows against `ng` gallery rows (`dim` wide)
/// under cosine distance.
///
/// # Safety
/// Feature buffers must hold `nq * dim` and `ng * dim` values, label
/// buffers `nq` and `ng` values, and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn snr_evaluate(
    query: *const f32,
    query_labels: *const u64,
    nq: usize,
    gallery: *const f32,
    gallery_labels: *const u64,
    ng: usize,
    dim: usize,
    out: *mut SnrRetrieval,
) -> SnrStatus {
    guard(|| {
        non_null(out, "out")?;
        let q = rows(view(query, nq * dim, "query")?, nq, dim)?;
        let g = rows(view(gallery, ng * dim, "gallery")?, ng, dim)?;
        let label = |p, n, what| -> Result<Vec<usize>, Fail> {
            Ok(view(p, n, what)?.iter().map(|&l| l as usize).collect())
        };
        let (ql, gl) = (
            label(query_labels, nq, "query_labels")?,
            label(gallery_labels, ng, "gallery_labels")?,
        );
        let r = evaluate_retrieval(&q, &ql, &g, &gl, None, String::new())?;
        let at = |k| r.cmc.get(&k).copied().unwrap_or(f64::NAN);
        *out = SnrRetrieval {
            map: r.map,
            rank1: at(1),
            rank5: at(5),
            rank10: at(10),
            rank20: at(20),
        };
        Ok(())
    })
}
