//! C interface to the depth fusion pipeline.
//!
//! Every function returns a [`MondiStatus`]. On failure a description is kept
//! per thread and can be read with [`mondi_last_error`]. Objects cross the
//! boundary as opaque handles which the caller releases with the matching
//! `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use mondi::ensemble::{distill_bundle, DistillationProduct, Weighting};
use mondi::grid::DepthGrid;
use mondi::io::{read_bundle, read_product, write_pfm, write_product, FloatMap, RunConfig};
use mondi::metrics::evaluate;
use mondi::scene::SceneBundle;
use mondi::solver::solve;
use mondi::synthetic::generate_bundle;
use mondi::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MondiStatus {
    Ok = 0,
    InvalidArgument = 1,
    DimensionMismatch = 2,
    FormatError = 3,
    ConfigError = 4,
    MissingFile = 5,
    IoError = 6,
    NumericError = 7,
    BufferTooSmall = 8,
    /// A Rust panic was caught at the boundary.
    Internal = 9,
}

/// A loaded or generated scene bundle.
pub struct MondiBundle {
    inner: SceneBundle,
}

/// Output of teacher distillation.
pub struct MondiProduct {
    inner: DistillationProduct,
}

/// A dense depth map in meters.
pub struct MondiDepth {
    inner: DepthGrid,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MondiMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub imae: f64,
    pub irmse: f64,
    pub valid_count: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> MondiStatus {
    match err {
        Error::InvalidInput(_) | Error::Generation(_) => MondiStatus::InvalidArgument,
        Error::DimensionMismatch { .. } => MondiStatus::DimensionMismatch,
        Error::Format { .. } => MondiStatus::FormatError,
        Error::Config { .. } => MondiStatus::ConfigError,
        Error::MissingFile(_) => MondiStatus::MissingFile,
        Error::Io { .. } => MondiStatus::IoError,
        Error::NonFiniteLoss { .. } => MondiStatus::NumericError,
    }
}

struct Failure(MondiStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn invalid(message: &str) -> Failure {
    Failure(MondiStatus::InvalidArgument, message.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MondiStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            MondiStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_last_error(&message);
            status
        }
        Err(_) => {
            set_last_error("internal error: panic caught at the C boundary");
            MondiStatus::Internal
        }
    }
}

unsafe fn path_arg(ptr: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if ptr.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    let s = CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| invalid(&format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// A null pointer selects the default configuration.
unsafe fn config_arg(ptr: *const c_char) -> Result<RunConfig, Failure> {
    if ptr.is_null() {
        return Ok(RunConfig::default());
    }
    let text = CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| invalid("config is not valid UTF-8"))?;
    Ok(RunConfig::parse(text)?)
}

unsafe fn handle<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, Failure> {
    ptr.as_ref().ok_or_else(|| invalid(&format!("{what} is null")))
}

unsafe fn out_ptr<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(invalid("output pointer is null"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn copy_out(values: &[f64], buffer: *mut f64, len: usize) -> Result<(), Failure> {
    if buffer.is_null() {
        return Err(invalid("buffer is null"));
    }
    if len < values.len() {
        return Err(Failure(
            MondiStatus::BufferTooSmall,
            format!("buffer holds {len} values, {} needed", values.len()),
        ));
    }
    std::ptr::copy_nonoverlapping(values.as_ptr(), buffer, values.len());
    Ok(())
}

/// Description of the last failure on this thread, or an empty string.
///
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn mondi_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Reads a bundle directory.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mondi_bundle_load(path: *const c_char, out: *mut *mut MondiBundle) -> MondiStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        out_ptr(out, MondiBundle { inner: read_bundle(&path)? })
    })
}

/// Renders a synthetic bundle using the `generate` section of `config`.
///
/// # Safety
/// `config` must be null or a NUL-terminated TOML string; `out` must be a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mondi_bundle_generate(
    seed: u64,
    config: *const c_char,
    out: *mut *mut MondiBundle,
) -> MondiStatus {
    guard(|| {
        let config = config_arg(config)?;
        out_ptr(out, MondiBundle { inner: generate_bundle(&config.generate, seed)? })
    })
}

/// # Safety
/// `bundle` must be a live handle; `height` and `width` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn mondi_bundle_dims(
    bundle: *const MondiBundle,
    height: *mut usize,
    width: *mut usize,
) -> MondiStatus {
    guard(|| {
        let b = handle(bundle, "bundle")?;
        if height.is_null() || width.is_null() {
            return Err(invalid("output pointer is null"));
        }
        (*height, *width) = b.inner.dims();
        Ok(())
    })
}

/// # Safety
/// `bundle` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mondi_bundle_free(bundle: *mut MondiBundle) {
    if !bundle.is_null() {
        drop(Box::from_raw(bundle));
    }
}

/// Scores and fuses the bundle's teachers.
///
/// # Safety
/// `bundle` must be a live handle, `config` null or a NUL-terminated TOML
/// string, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mondi_distill(
    bundle: *const MondiBundle,
    config: *const c_char,
    out: *mut *mut MondiProduct,
) -> MondiStatus {
    guard(|| {
        let b = handle(bundle, "bundle")?;
        let config = config_arg(config)?;
        let product = distill_bundle(&b.inner, &config.ensemble, Weighting::SparseDeviation)?;
        out_ptr(out, MondiProduct { inner: product })
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mondi_product_load(path: *const c_char, out: *mut *mut MondiProduct) -> MondiStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        out_ptr(out, MondiProduct { inner: read_product(&path)? })
    })
}

/// Writes the product directory; values are stored as 32-bit floats.
///
/// # Safety
/// `product` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mondi_product_save(product: *const MondiProduct, path: *const c_char) -> MondiStatus {
    guard(|| {
        let p = handle(product, "product")?;
        let path = path_arg(path, "path")?;
        Ok(write_product(&path, &p.inner)?)
    })
}

/// Copies the distilled depth, row-major, into `buffer`.
///
/// # Safety
/// `product` must be a live handle and `buffer` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn mondi_product_copy_distilled(
    product: *const MondiProduct,
    buffer: *mut f64,
    len: usize,
) -> MondiStatus {
    guard(|| copy_out(handle(product, "product")?.inner.distilled.data(), buffer, len))
}

/// Copies the per-pixel monitor confidence, row-major, into `buffer`.
///
/// # Safety
/// `product` must be a live handle and `buffer` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn mondi_product_copy_monitor(
    product: *const MondiProduct,
    buffer: *mut f64,
    len: usize,
) -> MondiStatus {
    guard(|| copy_out(&handle(product, "product")?.inner.monitor, buffer, len))
}

/// # Safety
/// `product` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mondi_product_free(product: *mut MondiProduct) {
    if !product.is_null() {
        drop(Box::from_raw(product));
    }
}

/// Optimizes a depth field supervised by `product`.
///
/// # Safety
/// Handles must be live, `config` null or a NUL-terminated TOML string,
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mondi_solve(
    bundle: *const MondiBundle,
    product: *const MondiProduct,
    config: *const c_char,
    out: *mut *mut MondiDepth,
) -> MondiStatus {
    guard(|| {
        let b = handle(bundle, "bundle")?;
        let p = handle(product, "product")?;
        let config = config_arg(config)?;
        let (depth, _) = solve(&b.inner, &p.inner, &config.loss, &config.solver)?;
        out_ptr(out, MondiDepth { inner: depth })
    })
}

/// # Safety
/// `depth` must be a live handle and `buffer` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn mondi_depth_copy(depth: *const MondiDepth, buffer: *mut f64, len: usize) -> MondiStatus {
    guard(|| copy_out(handle(depth, "depth")?.inner.data(), buffer, len))
}

/// Writes the depth map as a single-channel PFM file.
///
/// # Safety
/// `depth` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mondi_depth_save(depth: *const MondiDepth, path: *const c_char) -> MondiStatus {
    guard(|| {
        let d = handle(depth, "depth")?;
        let path = path_arg(path, "path")?;
        Ok(write_pfm(&path, &FloatMap::from_depth(&d.inner))?)
    })
}

/// # Safety
/// `depth` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mondi_depth_free(depth: *mut MondiDepth) {
    if !depth.is_null() {
        drop(Box::from_raw(depth));
    }
}

/// Scores `depth` against the bundle's ground truth inside the solver's
/// depth range.
///
/// # Safety
/// Handles must be live, `config` null or a NUL-terminated TOML string,
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mondi_evaluate(
    bundle: *const MondiBundle,
    depth: *const MondiDepth,
    config: *const c_char,
    out: *mut MondiMetrics,
) -> MondiStatus {
    guard(|| {
        let b = handle(bundle, "bundle")?;
        let d = handle(depth, "depth")?;
        let config = config_arg(config)?;
        if out.is_null() {
            return Err(invalid("output pointer is null"));
        }
        let gt = b
            .inner
            .ground_truth
            .as_ref()
            .ok_or_else(|| invalid("bundle has no ground truth"))?;
        let r = evaluate(&d.inner, gt, config.solver.depth_range())?;
        *out = MondiMetrics {
            mae: r.mae,
            rmse: r.rmse,
            imae: r.imae,
            irmse: r.irmse,
            valid_count: r.valid_count,
        };
        Ok(())
    })
}
