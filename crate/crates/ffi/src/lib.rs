//! C interface to `pgd-core`.
//!
//! Every function returns a [`PgdStatus`]; on anything but `PGD_STATUS_OK`
//! the message is available from [`pgd_last_error_message`] on the same
//! thread. Datasets are opaque handles owned by the caller and released with
//! [`pgd_dataset_free`]. Output arrays are caller-allocated with the length
//! stated on each function. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use pgd_core::linmodel::{Dataset, Loss};
use pgd_core::oracle::max_margin_direction;
use pgd_core::pgd::{run_pgd, PgdConfig};
use pgd_core::potential::{Potential, WeightVector};
use pgd_core::synthdata::{GeneratorKind, GeneratorSpec};
use pgd_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NotSeparable = 3,
    Timeout = 4,
    Diverged = 5,
    Internal = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgdLoss {
    Exponential = 0,
    Logistic = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgdGenerator {
    R2Anchored = 0,
    R100Sparse = 1,
    SymmetricPair = 2,
}

/// Opaque labelled dataset.
pub struct PgdDataset {
    inner: Dataset,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> PgdStatus {
    match e {
        Error::NotSeparable { .. } | Error::NotSeparating { .. } => PgdStatus::NotSeparable,
        Error::Timeout { .. } => PgdStatus::Timeout,
        Error::Divergence { .. } | Error::LossOverflow { .. } => PgdStatus::Diverged,
        Error::Io(_) | Error::Json(_) => PgdStatus::Internal,
        _ => PgdStatus::InvalidArgument,
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), PgdStatus>) -> PgdStatus {
    set_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PgdStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic");
            PgdStatus::Internal
        }
    }
}

fn fail(e: Error) -> PgdStatus {
    set_error(&e.to_string());
    status_of(&e)
}

fn null(what: &str) -> PgdStatus {
    set_error(&format!("{what} is null"));
    PgdStatus::NullPointer
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], PgdStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], PgdStatus> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn dataset<'a>(ds: *const PgdDataset) -> Result<&'a Dataset, PgdStatus> {
    ds.as_ref().map(|d| &d.inner).ok_or_else(|| null("dataset"))
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn pgd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Builds a dataset from `n` row-major points of dimension `dim` and `n`
/// labels in {-1, +1}.
///
/// # Safety
/// `x` must point to `n * dim` doubles, `y` to `n`, `out` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn pgd_dataset_new(
    dim: usize,
    n: usize,
    x: *const f64,
    y: *const f64,
    out: *mut *mut PgdDataset,
) -> PgdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let len = n.checked_mul(dim).ok_or_else(|| {
            set_error("n * dim overflows");
            PgdStatus::InvalidArgument
        })?;
        let xs = slice(x, len, "x")?;
        let ys = slice(y, n, "y")?;
        let rows = if dim == 0 { vec![Vec::new(); n] } else { xs.chunks(dim).map(<[f64]>::to_vec).collect() };
        let inner = Dataset::new(dim, rows, ys.to_vec()).map_err(fail)?;
        *out = Box::into_raw(Box::new(PgdDataset { inner }));
        Ok(())
    })
}

/// Builds one of the built-in fixtures.
///
/// # Safety
/// `out` must point to writable storage.
#[no_mangle]
pub unsafe extern "C" fn pgd_dataset_generate(kind: PgdGenerator, seed: u64, out: *mut *mut PgdDataset) -> PgdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let kind = match kind {
            PgdGenerator::R2Anchored => GeneratorKind::R2Anchored,
            PgdGenerator::R100Sparse => GeneratorKind::R100Sparse,
            PgdGenerator::SymmetricPair => GeneratorKind::SymmetricPair,
        };
        let inner = GeneratorSpec::new(kind, seed).generate().map_err(fail)?;
        *out = Box::into_raw(Box::new(PgdDataset { inner }));
        Ok(())
    })
}

/// Releases a dataset. Null is ignored.
///
/// # Safety
/// `ds` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pgd_dataset_free(ds: *mut PgdDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Dimension of the dataset, 0 for null.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pgd_dataset_dim(ds: *const PgdDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.dim())
}

/// Number of points, 0 for null.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pgd_dataset_len(ds: *const PgdDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.len())
}

/// Trains with p-GD from `w0` for `iterations` full-batch steps and writes
/// the final iterate to `w_out`. Both arrays hold `pgd_dataset_dim(ds)` doubles.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn pgd_train(
    ds: *const PgdDataset,
    p: f64,
    eta: f64,
    iterations: u64,
    loss: PgdLoss,
    w0: *const f64,
    w_out: *mut f64,
) -> PgdStatus {
    guard(|| {
        let data = dataset(ds)?;
        let start = slice(w0, data.dim(), "w0")?;
        let out = slice_mut(w_out, data.dim(), "w_out")?;
        let loss = match loss {
            PgdLoss::Exponential => Loss::Exponential,
            PgdLoss::Logistic => Loss::Logistic,
        };
        let cfg = PgdConfig::new(p, eta, iterations).map_err(fail)?;
        let w0 = WeightVector::new(start.to_vec()).map_err(fail)?;
        let (w, _) = run_pgd(&cfg, loss, data, &w0, None).map_err(fail)?;
        out.copy_from_slice(w.as_slice());
        Ok(())
    })
}

/// Unit lp-norm max-margin direction, written to `direction_out`
/// (`pgd_dataset_dim(ds)` doubles), and its margin.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn pgd_max_margin(
    ds: *const PgdDataset,
    p: f64,
    tol: f64,
    direction_out: *mut f64,
    margin_out: *mut f64,
) -> PgdStatus {
    guard(|| {
        let data = dataset(ds)?;
        let out = slice_mut(direction_out, data.dim(), "direction_out")?;
        if margin_out.is_null() {
            return Err(null("margin_out"));
        }
        let sol = max_margin_direction(data, p, tol).map_err(fail)?;
        out.copy_from_slice(sol.direction.as_slice());
        *margin_out = sol.margin;
        Ok(())
    })
}

/// Bregman divergence of `(1/p) ||.||_p^p` between `x` and `y`.
///
/// # Safety
/// `x` and `y` must hold `dim` doubles, `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pgd_bregman(p: f64, x: *const f64, y: *const f64, dim: usize, out: *mut f64) -> PgdStatus {
    guard(|| {
        let x = WeightVector::new(slice(x, dim, "x")?.to_vec()).map_err(fail)?;
        let y = WeightVector::new(slice(y, dim, "y")?.to_vec()).map_err(fail)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = Potential::new(p).and_then(|psi| psi.bregman(&x, &y)).map_err(fail)?;
        Ok(())
    })
}
