//! C ABI over `kernquant`.
//!
//! Every function returns a [`KqStatus`]. On failure the message is available
//! from [`kq_last_error_message`] on the same thread until the next call.
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use kernquant::eval::{compress_layer, container_errors, pooled_error, Method};
use kernquant::format::{load_kernels, CodebookContainer};
use kernquant::planner::{plan, ratio_f64};
use kernquant::{Error, KernelSet, LayerShape};

/// Status codes; the non-zero values match the command-line exit codes where they overlap.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KqStatus {
    Ok = 0,
    Io = 1,
    InvalidArgument = 2,
    Infeasible = 3,
    Corrupt = 4,
    ShapeMismatch = 5,
    NullPointer = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KqMethod {
    Vq = 0,
    Dl = 1,
}

/// Layer geometry: `kernels` M, `channels` N, `kernel_side` p, `input_side` m.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct KqShape {
    pub kernels: u32,
    pub channels: u32,
    pub kernel_side: u32,
    pub input_side: u32,
}

/// Planned parameters and multiplication counts for one target acceleration.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KqPlan {
    pub subspaces: u32,
    pub k_vq: u32,
    pub k_dl: u32,
    pub l_dl: u32,
    pub alpha: u32,
    pub t_original: u64,
    pub t_vq: u64,
    pub t_dl: u64,
    pub rho_vq: f64,
    pub rho_dl: f64,
}

/// Opaque kernel tensor.
pub struct KqKernels(KernelSet);

/// Opaque per-layer codebook container.
pub struct KqCodebook(CodebookContainer);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> KqStatus {
    match e {
        Error::InfeasibleSparsity { .. } | Error::DictionaryTooSmall(_) => KqStatus::Infeasible,
        Error::Corrupt(_) => KqStatus::Corrupt,
        Error::ShapeMismatch(_) => KqStatus::ShapeMismatch,
        Error::Io(_) | Error::Csv(_) => KqStatus::Io,
        _ => KqStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (KqStatus, String)>) -> KqStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => KqStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            KqStatus::Panic
        }
    }
}

fn lib(e: Error) -> (KqStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (KqStatus, String) {
    (KqStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, (KqStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| (KqStatus::InvalidArgument, "path is not UTF-8".into()))
}

fn shape_arg(s: KqShape) -> Result<LayerShape, (KqStatus, String)> {
    LayerShape::new(
        s.kernels as usize,
        s.channels as usize,
        s.kernel_side as usize,
        s.input_side as usize,
    )
    .map_err(lib)
}

/// Message for the last failed call on this thread, or null. Owned by the library.
#[no_mangle]
pub extern "C" fn kq_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a KQZ1 (or JSON) kernel file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kq_kernels_load(
    path: *const c_char,
    out: *mut *mut KqKernels,
) -> KqStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let k = load_kernels(&path_arg(path)?).map_err(lib)?;
        *out = Box::into_raw(Box::new(KqKernels(k)));
        Ok(())
    })
}

/// Copies `len` weights in `[kernel][channel][row][col]` order into a new handle.
///
/// # Safety
/// `data` must point to `len` floats and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn kq_kernels_from_buffer(
    shape: KqShape,
    data: *const f32,
    len: usize,
    out: *mut *mut KqKernels,
) -> KqStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if data.is_null() {
            return Err(null("data"));
        }
        let shape = shape_arg(shape)?;
        let weights = std::slice::from_raw_parts(data, len).to_vec();
        let k = KernelSet::new(shape, weights).map_err(lib)?;
        *out = Box::into_raw(Box::new(KqKernels(k)));
        Ok(())
    })
}

/// # Safety
/// `k` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kq_kernels_free(k: *mut KqKernels) {
    if !k.is_null() {
        drop(Box::from_raw(k));
    }
}

/// # Safety
/// `k` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn kq_kernels_shape(k: *const KqKernels, out: *mut KqShape) -> KqStatus {
    guard(|| {
        let (k, out) = (
            k.as_ref().ok_or_else(|| null("kernels"))?,
            out.as_mut().ok_or_else(|| null("out"))?,
        );
        let s = k.0.shape();
        *out = KqShape {
            kernels: s.kernels as u32,
            channels: s.channels as u32,
            kernel_side: s.kernel_side as u32,
            input_side: s.input_side as u32,
        };
        Ok(())
    })
}

/// Plans both methods for a target acceleration `rho`.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn kq_plan(
    shape: KqShape,
    nprime: u32,
    rho: f64,
    c: f64,
    alpha: u32,
    out: *mut KqPlan,
) -> KqStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let p = plan(&shape_arg(shape)?, nprime as usize, rho, c, alpha as usize).map_err(lib)?;
        *out = KqPlan {
            subspaces: p.subspaces as u32,
            k_vq: p.k_vq as u32,
            k_dl: p.k_dl as u32,
            l_dl: p.l_dl as u32,
            alpha: p.alpha as u32,
            t_original: p.cost.t_original,
            t_vq: p.cost.t_vq,
            t_dl: p.cost.t_dl,
            rho_vq: ratio_f64(p.cost.rho_vq),
            rho_dl: ratio_f64(p.cost.rho_dl),
        };
        Ok(())
    })
}

/// Plans and builds codebooks for every subspace of `kernels`.
///
/// # Safety
/// `kernels` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn kq_compress(
    kernels: *const KqKernels,
    method: KqMethod,
    nprime: u32,
    rho: f64,
    c: f64,
    alpha: u32,
    seed: u64,
    out: *mut *mut KqCodebook,
) -> KqStatus {
    guard(|| {
        let k = kernels.as_ref().ok_or_else(|| null("kernels"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let m = match method {
            KqMethod::Vq => Method::Vq,
            KqMethod::Dl => Method::Dl,
        };
        let done =
            compress_layer(&k.0, m, nprime as usize, rho, c, alpha as usize, seed).map_err(lib)?;
        *out = Box::into_raw(Box::new(KqCodebook(done.container)));
        Ok(())
    })
}

/// Writes a KQC1 container atomically.
///
/// # Safety
/// `cb` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn kq_codebook_save(cb: *const KqCodebook, path: *const c_char) -> KqStatus {
    guard(|| {
        let cb = cb.as_ref().ok_or_else(|| null("codebook"))?;
        cb.0.save(&path_arg(path)?).map_err(lib)
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn kq_codebook_load(
    path: *const c_char,
    out: *mut *mut KqCodebook,
) -> KqStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let c = CodebookContainer::load(&path_arg(path)?).map_err(lib)?;
        *out = Box::into_raw(Box::new(KqCodebook(c)));
        Ok(())
    })
}

/// # Safety
/// `cb` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kq_codebook_free(cb: *mut KqCodebook) {
    if !cb.is_null() {
        drop(Box::from_raw(cb));
    }
}

/// # Safety
/// `cb` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn kq_codebook_method(cb: *const KqCodebook, out: *mut KqMethod) -> KqStatus {
    guard(|| {
        let cb = cb.as_ref().ok_or_else(|| null("codebook"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = match cb.0.codebooks {
            kernquant::format::Codebooks::Vq(_) => KqMethod::Vq,
            kernquant::format::Codebooks::Dl(_) => KqMethod::Dl,
        };
        Ok(())
    })
}

/// Layer relative Frobenius error of `cb` against `kernels`.
///
/// # Safety
/// Both handles must be live and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn kq_codebook_rel_error(
    cb: *const KqCodebook,
    kernels: *const KqKernels,
    out: *mut f64,
) -> KqStatus {
    guard(|| {
        let cb = cb.as_ref().ok_or_else(|| null("codebook"))?;
        let k = kernels.as_ref().ok_or_else(|| null("kernels"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let reports = container_errors(&k.0, &cb.0).map_err(lib)?;
        *out = pooled_error(&reports).1.unwrap_or(0.0);
        Ok(())
    })
}
