//! C ABI over `fpq-core`.
//!
//! Objects cross the boundary as opaque handles that the caller releases with
//! the matching `*_free` function. Every fallible call returns an
//! [`FpqStatus`]; on failure the message is available from
//! [`fpq_last_error`] on the same thread until the next failing call.
//! Panics are caught at the boundary and reported as [`FpqStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use fpq_core::analysis::{summarize, ErrorReport};
use fpq_core::gptq::{build_hessian, gptq_quantize, CalibrationSet, HessianState};
use fpq_core::lorc::{apply_lorc, error_matrix, lorc_factorize, LorcFactors};
use fpq_core::scale_cast::cast_group_to_fp8;
use fpq_core::{tensor_io, Error, QuantSpec, QuantizedTensor, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FpqStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidSpec = 3,
    ShapeMismatch = 4,
    NonFinite = 5,
    /// Cholesky or SVD failure.
    Numerical = 6,
    Io = 7,
    /// Bad magic, unsupported version, checksum or header schema error.
    Format = 8,
    Panic = 9,
}

impl From<&Error> for FpqStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidFormat(_) | Error::InvalidSpec { .. } => FpqStatus::InvalidSpec,
            Error::NonFinite { .. } => FpqStatus::NonFinite,
            Error::ShapeMismatch(_) | Error::DimensionOverflow(_) => FpqStatus::ShapeMismatch,
            Error::InvalidArgument(_) | Error::Usage(_) => FpqStatus::InvalidArgument,
            Error::Factorization { .. } | Error::SvdNonConvergence => FpqStatus::Numerical,
            Error::Io { .. } => FpqStatus::Io,
            Error::BadMagic
            | Error::UnsupportedVersion(_)
            | Error::Checksum { .. }
            | Error::Schema(_)
            | Error::Corrupted(_) => FpqStatus::Format,
        }
    }
}

/// Dense row-major `f64` tensor.
pub struct FpqTensor(Tensor);

/// Packed codes with per-group scales.
pub struct FpqQuantized(QuantizedTensor);

/// Factorized calibration Hessian.
pub struct FpqHessian(HessianState);

/// Low-rank compensation factors.
pub struct FpqLorc(LorcFactors);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Runs `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), FpqFailure>) -> FpqStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FpqStatus::Ok,
        Ok(Err(FpqFailure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            FpqStatus::Panic
        }
    }
}

struct FpqFailure(FpqStatus, String);

impl From<Error> for FpqFailure {
    fn from(e: Error) -> Self {
        FpqFailure(FpqStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> FpqFailure {
    FpqFailure(FpqStatus::NullPointer, format!("`{what}` is NULL"))
}

unsafe fn get<'a, T>(p: *const T, what: &str) -> Result<&'a T, FpqFailure> {
    // SAFETY: caller passes a live handle produced by this library or NULL.
    unsafe { p.as_ref() }.ok_or_else(|| null(what))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, FpqFailure> {
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: caller passes a NUL-terminated string.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| FpqFailure(FpqStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

unsafe fn out_ptr<T>(out: *mut *mut T, value: T) -> Result<(), FpqFailure> {
    if out.is_null() {
        return Err(null("out"));
    }
    // SAFETY: `out` is a valid location for one pointer.
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

fn parse_spec(s: &str) -> Result<QuantSpec, FpqFailure> {
    s.parse::<QuantSpec>().map_err(FpqFailure::from)
}

fn json_string(v: &impl serde::Serialize) -> Result<CString, FpqFailure> {
    let s = serde_json::to_string(v).map_err(|e| FpqFailure(FpqStatus::InvalidArgument, e.to_string()))?;
    Ok(CString::new(s).expect("JSON has no NUL bytes"))
}

/// Message of the last failure on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fpq_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static, NUL-terminated library version.
#[no_mangle]
pub extern "C" fn fpq_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by one of the `*_json` functions.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn fpq_string_free(s: *mut c_char) {
    if !s.is_null() {
        // SAFETY: produced by CString::into_raw in this library.
        drop(unsafe { CString::from_raw(s) });
    }
}

// ---- tensors ----

/// Copies `len` values into a new tensor of the given shape.
///
/// # Safety
/// `shape` holds `ndim` entries and `data` holds `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fpq_tensor_new(
    shape: *const usize,
    ndim: usize,
    data: *const f64,
    len: usize,
    out: *mut *mut FpqTensor,
) -> FpqStatus {
    guard(|| {
        if (shape.is_null() && ndim > 0) || (data.is_null() && len > 0) {
            return Err(null("shape/data"));
        }
        // SAFETY: lengths supplied by the caller; empty slices need no pointer.
        let shape = if ndim == 0 {
            &[][..]
        } else {
            unsafe { slice::from_raw_parts(shape, ndim) }
        };
        let data = if len == 0 {
            &[][..]
        } else {
            unsafe { slice::from_raw_parts(data, len) }
        };
        let t = Tensor::new(shape.to_vec(), data.to_vec())?;
        unsafe { out_ptr(out, FpqTensor(t)) }
    })
}

/// # Safety
/// `t` is NULL or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn fpq_tensor_free(t: *mut FpqTensor) {
    if !t.is_null() {
        // SAFETY: handle produced by Box::into_raw in this library.
        drop(unsafe { Box::from_raw(t) });
    }
}

/// Number of elements, or 0 for NULL.
///
/// # Safety
/// `t` is NULL or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn fpq_tensor_len(t: *const FpqTensor) -> usize {
    unsafe { t.as_ref() }.map_or(0, |t| t.0.len())
}

/// Number of axes, or 0 for NULL.
///
/// # Safety
/// `t` is NULL or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn fpq_tensor_ndim(t: *const FpqTensor) -> usize {
    unsafe { t.as_ref() }.map_or(0, |t| t.0.ndim())
}

/// Copies the shape into `out`, which must hold `cap >= ndim` entries.
///
/// # Safety
/// `out` holds `cap` writable entries.
#[no_mangle]
pub unsafe extern "C" fn fpq_tensor_shape(t: *const FpqTensor, out: *mut usize, cap: usize) -> FpqStatus {
    guard(|| {
        let t = unsafe { get(t, "tensor") }?;
        copy_out(t.0.shape(), out, cap)
    })
}

/// Copies the elements into `out`, which must hold `cap >= len` doubles.
///
/// # Safety
/// `out` holds `cap` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn fpq_tensor_data(t: *const FpqTensor, out: *mut f64, cap: usize) -> FpqStatus {
    guard(|| {
        let t = unsafe { get(t, "tensor") }?;
        copy_out(t.0.data(), out, cap)
    })
}

fn copy_out<T: Copy>(src: &[T], out: *mut T, cap: usize) -> Result<(), FpqFailure> {
    if src.is_empty() {
        return Ok(());
    }
    if out.is_null() {
        return Err(null("out"));
    }
    if cap < src.len() {
        return Err(FpqFailure(
            FpqStatus::InvalidArgument,
            format!("buffer holds {cap} entries, {} needed", src.len()),
        ));
    }
    // SAFETY: `out` has room for `cap >= src.len()` entries.
    unsafe { ptr::copy_nonoverlapping(src.as_ptr(), out, src.len()) };
    Ok(())
}

/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fpq_tensor_read(path: *const c_char, out: *mut *mut FpqTensor) -> FpqStatus {
    guard(|| {
        let path = unsafe { c_str(path, "path") }?;
        let t = tensor_io::read_tensor(path)?;
        unsafe { out_ptr(out, FpqTensor(t)) }
    })
}

/// # Safety
/// `t` is a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fpq_tensor_write(t: *const FpqTensor, path: *const c_char) -> FpqStatus {
    guard(|| {
        let t = unsafe { get(t, "tensor") }?;
        let path = unsafe { c_str(path, "path") }?;
        Ok(tensor_io::write_tensor(path, &t.0)?)
    })
}

/// Distribution statistics as a JSON string; free with [`fpq_string_free`].
///
/// # Safety
/// `t` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fpq_tensor_summary_json(t: *const FpqTensor, out: *mut *mut c_char) -> FpqStatus {
    guard(|| {
        let t = unsafe { get(t, "tensor") }?;
        let s = json_string(&summarize(&t.0)?)?;
        if out.is_null() {
            return Err(null("out"));
        }
        unsafe { *out = s.into_raw() };
        Ok(())
    })
}

// ---- quantization ----

/// Round-to-nearest quantization under a recipe string such as
/// `"fp4:e2m1:group256:m2"`.
///
/// # Safety
/// `t` is a live handle, `spec` a NUL-terminated string, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fpq_quantize(
    t: *const FpqTensor,
    spec: *const c_char,
    out: *mut *mut FpqQuantized,
) -> FpqStatus {
    guard(|| {
        let t = unsafe { get(t, "tensor") }?;
        let spec = parse_spec(unsafe { c_str(spec, "spec") }?)?;
        let q = fpq_core::quantize(&t.0, &spec)?;
        unsafe { out_ptr(out, FpqQuantized(q)) }
    })
}

/// # Safety
/// `q` is NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fpq_quantized_free(q: *mut FpqQuantized) {
    if !q.is_null() {
        // SAFETY: handle produced by Box::into_raw in this library.
        drop(unsafe { Box::from_raw(q) });
    }
}

/// # Safety
/// `q` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fpq_dequantize(q: *const FpqQuantized, out: *mut *mut FpqTensor) -> FpqStatus {
    guard(|| {
        let q = unsafe { get(q, "quantized") }?;
        let t = q.0.dequantize()?;
        unsafe { out_ptr(out, FpqTensor(t)) }
    })
}

/// Number of codes, or 0 for NULL.
///
/// # Safety
/// `q` is NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fpq_quantized_len(q: *const FpqQuantized) -> usize {
    unsafe { q.as_ref() }.map_or(0, |q| q.0.len())
}

/// Number of scales, or 0 for NULL.
///
/// # Safety
/// `q` is NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fpq_quantized_scale_count(q: *const FpqQuantized) -> usize {
    unsafe { q.as_ref() }.map_or(0, |q| q.0.scales().len())
}

/// Copies the raw codes (one per byte, unpacked).
///
/// # Safety
/// `out` holds `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn fpq_quantized_codes(q: *const FpqQuantized, out: *mut u8, cap: usize) -> FpqStatus {
    guard(|| {
        let q = unsafe { get(q, "quantized") }?;
        copy_out(q.0.codes(), out, cap)
    })
}

/// # Safety
/// `out` holds `cap` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn fpq_quantized_scales(q: *const FpqQuantized, out: *mut f64, cap: usize) -> FpqStatus {
    guard(|| {
        let q = unsafe { get(q, "quantized") }?;
        copy_out(q.0.scales(), out, cap)
    })
}

/// Canonical recipe string; free with [`fpq_string_free`].
///
/// # Safety
/// `q` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fpq_quantized_spec(q: *const FpqQuantized, out: *mut *mut c_char) -> FpqStatus {
    guard(|| {
        let q = unsafe { get(q, "quantized") }?;
        if out.is_null() {
            return Err(null("out"));
        }
        let s = CString::new(q.0.spec().to_string()).expect("spec strings have no NUL");
        unsafe { *out = s.into_raw() };
        Ok(())
    })
}

/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fpq_quantized_read(path: *const c_char, out: *mut *mut FpqQuantized) -> FpqStatus {
    guard(|| {
        let path = unsafe { c_str(path, "path") }?;
        let q = tensor_io::read_quantized(path)?;
        unsafe { out_ptr(out, FpqQuantized(q)) }
    })
}

/// # Safety
/// `q` is a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fpq_quantized_write(q: *const FpqQuantized, path: *const c_char) -> FpqStatus {
    guard(|| {
        let q = unsafe { get(q, "quantized") }?;
        let path = unsafe { c_str(path, "path") }?;
        Ok(tensor_io::write_quantized(path, &q.0)?)
    })
}

/// Error metrics of `q` against `w` as JSON; `calib` may be NULL.
///
/// # Safety
/// Handles are live (or `calib` NULL); `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fpq_error_report_json(
    w: *const FpqTensor,
    q: *const FpqQuantized,
    calib: *const FpqTensor,
    out: *mut *mut c_char,
) -> FpqStatus {
    guard(|| {
        let w = unsafe { get(w, "weights") }?;
        let q = unsafe { get(q, "quantized") }?;
        let calib = match unsafe { calib.as_ref() } {
            Some(c) => Some(CalibrationSet::new(c.0.clone())?),
            None => None,
        };
        let s = json_string(&ErrorReport::of(&w.0, &q.0, calib.as_ref())?)?;
        if out.is_null() {
            return Err(null("out"));
        }
        unsafe { *out = s.into_raw() };
        Ok(())
    })
}

// ---- GPTQ ----

/// Builds and factorizes `2 X^T X` from `[samples x in]` calibration rows.
///
/// # Safety
/// `calib` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fpq_hessian_build(
    calib: *const FpqTensor,
    damping_fraction: f64,
    out: *mut *mut FpqHessian,
) -> FpqStatus {
    guard(|| {
        let calib = unsafe { get(calib, "calib") }?;
        let h = build_hessian(&CalibrationSet::new(calib.0.clone())?, damping_fraction)?;
        unsafe { out_ptr(out, FpqHessian(h)) }
    })
}

/// # Safety
/// `h` is NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fpq_hessian_free(h: *mut FpqHessian) {
    if !h.is_null() {
        // SAFETY: handle produced by Box::into_raw in this library.
        drop(unsafe { Box::from_raw(h) });
    }
}

/// # Safety
/// Handles are live, `spec` is NUL-terminated, `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fpq_gptq_quantize(
    w: *const FpqTensor,
    h: *const FpqHessian,
    spec: *const c_char,
    block_size: usize,
    out: *mut *mut FpqQuantized,
) -> FpqStatus {
    guard(|| {
        let w = unsafe { get(w, "weights") }?;
        let h = unsafe { get(h, "hessian") }?;
        let spec = parse_spec(unsafe { c_str(spec, "spec") }?)?;
        let q = gptq_quantize(&w.0, &h.0, &spec, block_size)?;
        unsafe { out_ptr(out, FpqQuantized(q)) }
    })
}

// ---- scale casting ----

/// Casts M1/M2-constrained FP4 codes to E5M2. `saturated` and `underflowed`
/// may be NULL.
///
/// # Safety
/// `q` is a live handle; non-NULL pointers are writable.
#[no_mangle]
pub unsafe extern "C" fn fpq_cast_to_fp8(
    q: *const FpqQuantized,
    out: *mut *mut FpqQuantized,
    saturated: *mut usize,
    underflowed: *mut usize,
) -> FpqStatus {
    guard(|| {
        let q = unsafe { get(q, "quantized") }?;
        let (q8, r) = cast_group_to_fp8(&q.0)?;
        unsafe {
            if let Some(s) = saturated.as_mut() {
                *s = r.saturated;
            }
            if let Some(u) = underflowed.as_mut() {
                *u = r.underflowed;
            }
            out_ptr(out, FpqQuantized(q8))
        }
    })
}

// ---- low-rank compensation ----

/// Rank-`rank` factors of `w - dequantize(q)`.
///
/// # Safety
/// Handles are live; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fpq_lorc_factorize(
    w: *const FpqTensor,
    q: *const FpqQuantized,
    rank: usize,
    out: *mut *mut FpqLorc,
) -> FpqStatus {
    guard(|| {
        let w = unsafe { get(w, "weights") }?;
        let q = unsafe { get(q, "quantized") }?;
        let f = lorc_factorize(&error_matrix(&w.0, &q.0)?, rank)?;
        unsafe { out_ptr(out, FpqLorc(f)) }
    })
}

/// # Safety
/// `f` is NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fpq_lorc_free(f: *mut FpqLorc) {
    if !f.is_null() {
        // SAFETY: handle produced by Box::into_raw in this library.
        drop(unsafe { Box::from_raw(f) });
    }
}

/// Rank of the factors, or 0 for NULL.
///
/// # Safety
/// `f` is NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fpq_lorc_rank(f: *const FpqLorc) -> usize {
    unsafe { f.as_ref() }.map_or(0, |f| f.0.rank())
}

/// Fraction of the error energy captured, or NaN for NULL.
///
/// # Safety
/// `f` is NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fpq_lorc_captured_energy(f: *const FpqLorc) -> f64 {
    unsafe { f.as_ref() }.map_or(f64::NAN, |f| f.0.captured_energy())
}

/// `dequantize(q) + left * right`.
///
/// # Safety
/// Handles are live; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fpq_lorc_apply(
    q: *const FpqQuantized,
    f: *const FpqLorc,
    out: *mut *mut FpqTensor,
) -> FpqStatus {
    guard(|| {
        let q = unsafe { get(q, "quantized") }?;
        let f = unsafe { get(f, "factors") }?;
        let t = apply_lorc(&q.0, &f.0)?;
        unsafe { out_ptr(out, FpqTensor(t)) }
    })
}

/// # Safety
/// `path` is NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fpq_lorc_read(path: *const c_char, out: *mut *mut FpqLorc) -> FpqStatus {
    guard(|| {
        let path = unsafe { c_str(path, "path") }?;
        let f = tensor_io::read_lorc(path)?;
        unsafe { out_ptr(out, FpqLorc(f)) }
    })
}

/// # Safety
/// `f` is a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fpq_lorc_write(f: *const FpqLorc, path: *const c_char) -> FpqStatus {
    guard(|| {
        let f = unsafe { get(f, "factors") }?;
        let path = unsafe { c_str(path, "path") }?;
        Ok(tensor_io::write_lorc(path, &f.0)?)
    })
}
