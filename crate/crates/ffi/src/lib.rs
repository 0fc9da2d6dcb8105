//! C interface to the refquery pipeline.
//!
//! Every function returns an [`RqStatus`]. On failure a description is kept
//! per thread and can be read with [`rq_last_error`]. Clips and models are
//! opaque handles released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use refquery::config::RunConfig;
use refquery::data::{load_clip, BinaryMask, FeatureClip};
use refquery::evaluation::{contour_accuracy, default_tolerance, region_similarity};
use refquery::model::{hungarian, Model};
use refquery::training::Checkpoint;
use refquery::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RqStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Config = 4,
    Validation = 5,
    Load = 6,
    Checkpoint = 7,
    Numeric = 8,
    Io = 9,
    Panic = 10,
}

/// A loaded feature clip.
pub struct RqClip(FeatureClip);

/// A model with checkpoint weights.
pub struct RqModel {
    model: Model,
    threshold: f32,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> RqStatus {
    match e {
        Error::Config(_) => RqStatus::Config,
        Error::Shape { .. } | Error::Validation(_) | Error::Missing(_) => RqStatus::Validation,
        Error::Load { .. } | Error::Json { .. } => RqStatus::Load,
        Error::Checkpoint(_) => RqStatus::Checkpoint,
        Error::Numeric { .. } => RqStatus::Numeric,
        Error::Io { .. } => RqStatus::Io,
    }
}

struct Fail(RqStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(RqStatus::NullArgument, format!("{what} is null"))
}

/// Runs `f`, recording its error message and converting panics.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> RqStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            RqStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            RqStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(RqStatus::InvalidArgument, format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn mask_arg(bits: *const u8, h: usize, w: usize, what: &str) -> Result<BinaryMask, Fail> {
    if bits.is_null() {
        return Err(null(what));
    }
    let s = std::slice::from_raw_parts(bits, h * w);
    Ok(BinaryMask::from_fn(h, w, |r, c| s[r * w + c] != 0))
}

/// Message describing the last failed call on this thread; empty after a
/// successful call. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn rq_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Minimum-cost assignment for a row-major `n × n` cost matrix. Row `i` is
/// assigned column `out_perm[i]`.
///
/// # Safety
/// `cost` must point to `n * n` doubles and `out_perm` to `n` writable
/// `size_t`; `out_cost` may be null.
#[no_mangle]
pub unsafe extern "C" fn rq_hungarian(
    cost: *const f64,
    n: usize,
    out_perm: *mut usize,
    out_cost: *mut f64,
) -> RqStatus {
    guard(|| {
        if cost.is_null() || out_perm.is_null() {
            return Err(null("cost or out_perm"));
        }
        let a = hungarian(std::slice::from_raw_parts(cost, n * n), n)?;
        std::slice::from_raw_parts_mut(out_perm, n).copy_from_slice(&a.permutation);
        if !out_cost.is_null() {
            *out_cost = a.total_cost;
        }
        Ok(())
    })
}

/// Region similarity J of two `h × w` masks given as bytes (nonzero = on).
///
/// # Safety
/// `pred` and `gt` must point to `h * w` bytes, `out` to a writable double.
#[no_mangle]
pub unsafe extern "C" fn rq_region_similarity(
    pred: *const u8,
    gt: *const u8,
    h: usize,
    w: usize,
    out: *mut f64,
) -> RqStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (p, g) = (mask_arg(pred, h, w, "pred")?, mask_arg(gt, h, w, "gt")?);
        *out = region_similarity(&p, &g)?;
        Ok(())
    })
}

/// Contour accuracy F of two masks. A non-positive `tolerance` selects the
/// default radius for the mask size.
///
/// # Safety
/// As for [`rq_region_similarity`].
#[no_mangle]
pub unsafe extern "C" fn rq_contour_accuracy(
    pred: *const u8,
    gt: *const u8,
    h: usize,
    w: usize,
    tolerance: f64,
    out: *mut f64,
) -> RqStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (p, g) = (mask_arg(pred, h, w, "pred")?, mask_arg(gt, h, w, "gt")?);
        let tol = if tolerance > 0.0 { tolerance } else { default_tolerance(h, w) };
        *out = contour_accuracy(&p, &g, tol)?;
        Ok(())
    })
}

/// Loads a clip from its manifest.
///
/// # Safety
/// `manifest` must be a NUL-terminated path and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rq_clip_load(manifest: *const c_char, out: *mut *mut RqClip) -> RqStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let clip = load_clip(&path_arg(manifest, "manifest")?)?;
        *out = Box::into_raw(Box::new(RqClip(clip)));
        Ok(())
    })
}

/// Frame count and ground-truth mask size of a clip.
///
/// # Safety
/// `clip` must come from [`rq_clip_load`]; output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn rq_clip_info(
    clip: *const RqClip,
    frames: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> RqStatus {
    guard(|| {
        let c = &clip.as_ref().ok_or_else(|| null("clip"))?.0;
        for (p, v) in [(frames, c.frames), (height, c.mask_height), (width, c.mask_width)] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `clip` must come from [`rq_clip_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rq_clip_free(clip: *mut RqClip) {
    if !clip.is_null() {
        drop(Box::from_raw(clip));
    }
}

/// Builds a model from a checkpoint. With a null `config`, the architecture
/// and threshold come from the checkpoint's own setup; otherwise the TOML
/// file must describe the same architecture.
///
/// # Safety
/// Paths must be NUL-terminated (or null for `config`), `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rq_model_load(
    config: *const c_char,
    checkpoint: *const c_char,
    out: *mut *mut RqModel,
) -> RqStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ckpt = Checkpoint::load(&path_arg(checkpoint, "checkpoint")?)?;
        let cfg = if config.is_null() {
            RunConfig::from_setup(&ckpt.setup()?)
        } else {
            RunConfig::load(Some(&path_arg(config, "config")?), &[])?
        };
        cfg.validate()?;
        let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
        ckpt.load_params(&mut model)?;
        *out = Box::into_raw(Box::new(RqModel {
            model,
            threshold: cfg.eval.threshold,
        }));
        Ok(())
    })
}

/// Segments every frame of `clip` into `out`, frame-major, one byte per
/// pixel (1 = referred object). `capacity` is the size of `out` in bytes and
/// must be at least `frames * height * width`.
///
/// # Safety
/// `model` and `clip` must be live handles and `out` must hold `capacity`
/// writable bytes.
#[no_mangle]
pub unsafe extern "C" fn rq_model_segment(
    model: *const RqModel,
    clip: *const RqClip,
    out: *mut u8,
    capacity: usize,
) -> RqStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let c = &clip.as_ref().ok_or_else(|| null("clip"))?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        let need = c.frames * c.mask_height * c.mask_width;
        if capacity < need {
            return Err(Fail(
                RqStatus::BufferTooSmall,
                format!("output needs {need} bytes, got {capacity}"),
            ));
        }
        let masks = m.model.segment(c, m.threshold)?;
        let dst = std::slice::from_raw_parts_mut(out, need);
        for (d, &b) in dst.iter_mut().zip(masks.iter().flat_map(|k| k.bits())) {
            *d = b as u8;
        }
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`rq_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rq_model_free(model: *mut RqModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
