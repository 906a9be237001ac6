//! C ABI over the hypokernel library.
//!
//! Objects cross the boundary as opaque handles (`HkModel`, `HkDensity`)
//! created by `hk_*_new`/constructor calls and released with the matching
//! `*_free`. Every function returns an `HkStatus`; on failure the message is
//! available from `hk_last_error_message` on the same thread. Panics are
//! caught and reported as `HK_STATUS_PANIC`.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use hypokernel::fields::{builtin, Coefficients, VectorFieldSet};
use hypokernel::grid::{DensityGrid, TensorGrid};
use hypokernel::hoermander::{rank_recursion, Mode, DEFAULT_TOL};
use hypokernel::oracle::linear_kernel_for;
use hypokernel::parametrix::density_approx;
use hypokernel::splitting::{trotter_density, TrotterScheme};

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HkStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Runtime = 3,
    Panic = 4,
}

/// A model from the built-in registry.
pub struct HkModel {
    name: String,
    fields: Arc<VectorFieldSet>,
}

/// A density sampled on a tensor grid.
pub struct HkDensity {
    grid: DensityGrid,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

enum Fail {
    Null(&'static str),
    Invalid(String),
    Runtime(String),
}

impl From<hypokernel::Error> for Fail {
    fn from(e: hypokernel::Error) -> Self {
        match e {
            hypokernel::Error::Invalid(_) | hypokernel::Error::Parse(_) => Fail::Invalid(e.to_string()),
            _ => Fail::Runtime(e.to_string()),
        }
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> HkStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HkStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            HkStatus::NullPointer
        }
        Ok(Err(Fail::Invalid(m))) => {
            set_error(m);
            HkStatus::InvalidArgument
        }
        Ok(Err(Fail::Runtime(m))) => {
            set_error(m);
            HkStatus::Runtime
        }
        Err(p) => {
            let m = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {m}"));
            HkStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail::Invalid(format!("{what} is not UTF-8")))
}

unsafe fn point<'a>(p: *const f64, n: usize, what: &'static str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn model_ref<'a>(m: *const HkModel) -> Result<&'a HkModel, Fail> {
    m.as_ref().ok_or(Fail::Null("model"))
}

unsafe fn density_ref<'a>(d: *const HkDensity) -> Result<&'a HkDensity, Fail> {
    d.as_ref().ok_or(Fail::Null("density"))
}

fn check_dim(m: &HkModel, n: usize) -> Result<(), Fail> {
    if n != m.fields.dim() {
        return Err(Fail::Invalid(format!("point has {n} coordinates, model has {}", m.fields.dim())));
    }
    Ok(())
}

unsafe fn store<T>(out: *mut *mut T, v: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null("out"));
    }
    *out = Box::into_raw(Box::new(v));
    Ok(())
}

/// Copy the last error of this thread into `buf` (NUL terminated, truncated
/// to `len`). Returns the full message length in bytes, excluding the NUL.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn hk_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if !buf.is_null() && len > 0 {
            let k = e.len().min(len - 1);
            std::ptr::copy_nonoverlapping(e.as_ptr() as *const c_char, buf, k);
            *buf.add(k) = 0;
        }
        e.len()
    })
}

/// Build a registry model. `params` is "key=value,key=value" or empty/null.
///
/// # Safety
/// `name` and `params` must be null or NUL-terminated strings; `out` must be
/// valid for one write.
#[no_mangle]
pub unsafe extern "C" fn hk_model_new(name: *const c_char, params: *const c_char, out: *mut *mut HkModel) -> HkStatus {
    guard(|| {
        let name = text(name, "name")?;
        let mut p = BTreeMap::new();
        if !params.is_null() {
            for kv in text(params, "params")?.split(',').filter(|s| !s.trim().is_empty()) {
                let (k, v) = kv.split_once('=').ok_or_else(|| Fail::Invalid(format!("bad parameter '{kv}'")))?;
                let v: f64 = v.trim().parse().map_err(|_| Fail::Invalid(format!("bad value in '{kv}'")))?;
                p.insert(k.trim().to_string(), v);
            }
        }
        let m = builtin(name, &p)?;
        store(out, HkModel { name: name.to_string(), fields: Arc::new(m.fields) })
    })
}

/// # Safety
/// `model` must come from `hk_model_new` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn hk_model_free(model: *mut HkModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `dim` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn hk_model_dim(model: *const HkModel, dim: *mut usize) -> HkStatus {
    guard(|| {
        let m = model_ref(model)?;
        if dim.is_null() {
            return Err(Fail::Null("dim"));
        }
        *dim = m.fields.dim();
        Ok(())
    })
}

/// Depth at which the bracket span reaches full rank at `x` (classical mode,
/// default tolerance); -1 when the cap is reached first.
///
/// # Safety
/// `x` must hold `n` values; `depth` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn hk_rank_depth(
    model: *const HkModel,
    x: *const f64,
    n: usize,
    cap: usize,
    depth: *mut i32,
) -> HkStatus {
    guard(|| {
        let m = model_ref(model)?;
        check_dim(m, n)?;
        let x = point(x, n, "x")?;
        if depth.is_null() {
            return Err(Fail::Null("depth"));
        }
        let b = rank_recursion(&m.fields, x, Mode::Classical, cap, DEFAULT_TOL)?;
        *depth = b.full_rank_depth.map_or(-1, |d| d as i32);
        Ok(())
    })
}

/// Trotter splitting density from `y` at time `t` with `m` substeps on the
/// grid "lo:hi:n[,lo:hi:n...]". The frozen coordinates are those with a
/// nondegenerate diagonal diffusion at `y`.
///
/// # Safety
/// `y` must hold `n` values, `grid` be a NUL-terminated string and `out`
/// valid for one write.
#[no_mangle]
pub unsafe extern "C" fn hk_trotter_density(
    model: *const HkModel,
    y: *const f64,
    n: usize,
    t: f64,
    m: usize,
    grid: *const c_char,
    out: *mut *mut HkDensity,
) -> HkStatus {
    guard(|| {
        let md = model_ref(model)?;
        check_dim(md, n)?;
        let y = point(y, n, "y")?;
        let g = TensorGrid::parse(text(grid, "grid")?)?;
        let mut a = vec![0.0; n * n];
        md.fields.diffusion(y, &mut a);
        let amax = (0..n).map(|i| a[i * n + i]).fold(0.0, f64::max);
        let frozen: Vec<usize> = (0..n).filter(|&i| a[i * n + i] > 1e-10 * amax).collect();
        let s = TrotterScheme::new(md.fields.clone(), y, &frozen, g)?.with_substeps(m)?;
        store(out, HkDensity { grid: trotter_density(&s, &md.name, t)? })
    })
}

/// Parametrix density of the given series order.
///
/// # Safety
/// As for `hk_trotter_density`.
#[no_mangle]
pub unsafe extern "C" fn hk_parametrix_density(
    model: *const HkModel,
    y: *const f64,
    n: usize,
    t: f64,
    order: usize,
    grid: *const c_char,
    out: *mut *mut HkDensity,
) -> HkStatus {
    guard(|| {
        let md = model_ref(model)?;
        check_dim(md, n)?;
        let y = point(y, n, "y")?;
        let g = TensorGrid::parse(text(grid, "grid")?)?;
        let d = density_approx(md.fields.clone(), &md.name, y, t, order, &g, None, None)?;
        store(out, HkDensity { grid: d })
    })
}

/// Exact Gaussian kernel of a linear model.
///
/// # Safety
/// As for `hk_trotter_density`.
#[no_mangle]
pub unsafe extern "C" fn hk_exact_linear_density(
    model: *const HkModel,
    y: *const f64,
    n: usize,
    t: f64,
    grid: *const c_char,
    out: *mut *mut HkDensity,
) -> HkStatus {
    guard(|| {
        let md = model_ref(model)?;
        check_dim(md, n)?;
        let y = point(y, n, "y")?;
        let g = TensorGrid::parse(text(grid, "grid")?)?;
        let k = linear_kernel_for(md.fields.as_ref(), y, t)?;
        store(out, HkDensity { grid: k.on_grid(&g, &md.name, y)? })
    })
}

/// # Safety
/// `density` must come from a constructor above and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn hk_density_free(density: *mut HkDensity) {
    if !density.is_null() {
        drop(Box::from_raw(density));
    }
}

/// Number of grid nodes.
///
/// # Safety
/// `density` must be a live handle; `len` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn hk_density_len(density: *const HkDensity, len: *mut usize) -> HkStatus {
    guard(|| {
        let d = density_ref(density)?;
        if len.is_null() {
            return Err(Fail::Null("len"));
        }
        *len = d.grid.values.len();
        Ok(())
    })
}

/// Copy the values (row-major, last axis fastest) into `buf`, which must
/// hold exactly `hk_density_len` entries.
///
/// # Safety
/// `buf` must be valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn hk_density_values(density: *const HkDensity, buf: *mut f64, len: usize) -> HkStatus {
    guard(|| {
        let d = density_ref(density)?;
        if buf.is_null() {
            return Err(Fail::Null("buf"));
        }
        if len != d.grid.values.len() {
            return Err(Fail::Invalid(format!("buffer holds {len} values, density has {}", d.grid.values.len())));
        }
        std::ptr::copy_nonoverlapping(d.grid.values.as_ptr(), buf, len);
        Ok(())
    })
}

/// Trapezoid mass.
///
/// # Safety
/// `density` must be a live handle; `mass` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn hk_density_mass(density: *const HkDensity, mass: *mut f64) -> HkStatus {
    guard(|| {
        let d = density_ref(density)?;
        if mass.is_null() {
            return Err(Fail::Null("mass"));
        }
        *mass = d.grid.mass();
        Ok(())
    })
}

/// Total variation distance between two densities on the same grid.
///
/// # Safety
/// Both handles must be live; `tv` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn hk_density_tv(a: *const HkDensity, b: *const HkDensity, tv: *mut f64) -> HkStatus {
    guard(|| {
        let (a, b) = (density_ref(a)?, density_ref(b)?);
        if tv.is_null() {
            return Err(Fail::Null("tv"));
        }
        *tv = a.grid.tv_distance(&b.grid)?;
        Ok(())
    })
}
