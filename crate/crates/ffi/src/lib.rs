//! C interface to `cfscm`.
//!
//! Objects cross the boundary as opaque handles created by a `*_load`,
//! `*_generate` or `*_fit` call and released with the matching `*_free`.
//! Every fallible function returns a [`CfscmStatus`]; the message of the
//! most recent failure on the calling thread is available from
//! [`cfscm_last_error`]. Images are 256 doubles in row-major 16×16 order,
//! parents are the triple `(y, t, i)` with `y` a class index.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use cfscm::pipeline::{ModelKind, TrainedModel};
use cfscm::scm::{Intervention, Value};
use cfscm::synthpop::{self, Dataset, PIXELS};
use cfscm::vqglm::{self, GlmParams};
use cfscm::Error;

/// Result of every fallible call. Codes 2 to 4 match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CfscmStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Invalid configuration, intervention text or model variant.
    Config = 2,
    /// Missing files, malformed data, unknown names or mismatched shapes.
    Data = 3,
    /// Singular systems, non-finite values or divergence.
    Numeric = 4,
    /// An internal panic was caught at the boundary.
    Internal = 5,
}

/// Model kinds reported by [`cfscm_model_kind`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CfscmModelKind {
    Exogenous = 0,
    Mediator = 1,
    VqGlm = 2,
}

/// A trained model directory loaded into memory.
pub struct CfscmModel(TrainedModel);

/// Images, attributes and recorded noise of a synthetic dataset.
pub struct CfscmDataset(Dataset);

/// Closed-form GLM coefficients `B` (`m × k`).
pub struct CfscmGlm(GlmParams);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> CfscmStatus {
    match e.exit_code() {
        2 => CfscmStatus::Config,
        3 => CfscmStatus::Data,
        _ => CfscmStatus::Numeric,
    }
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CfscmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CfscmStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(&format!("null pointer for `{what}`"));
            CfscmStatus::NullArgument
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            CfscmStatus::Internal
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Lib(Error::Format(format!("`{what}` is not UTF-8"))))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &'static str) -> Result<&'a mut [f64], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

fn boxed<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

fn parent_row(p: &[f64]) -> Result<Vec<Value>, Failure> {
    let y = p[0];
    if !(y >= 0.0 && y.fract() == 0.0 && (y as usize) < synthpop::CLASSES.len()) {
        return Err(Error::OutOfRange(format!("class index {y}")).into());
    }
    Ok(vec![Value::Category(y as usize), Value::Scalar(p[1]), Value::Scalar(p[2])])
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cfscm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread into `buf` (truncated,
/// always NUL-terminated when `len > 0`). Returns the full message length.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn cfscm_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let bytes = e.borrow();
        let bytes = bytes.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Loads a model directory written by `cfscm train` or `cfscm finetune`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cfscm_model_load(path: *const c_char, out: *mut *mut CfscmModel) -> CfscmStatus {
    guard(|| {
        let path = text(path, "path")?;
        boxed(out, CfscmModel(TrainedModel::load(Path::new(path))?))
    })
}

/// # Safety
/// `model` must be null or a handle from [`cfscm_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cfscm_model_free(model: *mut CfscmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cfscm_model_kind(model: *const CfscmModel, out: *mut CfscmModelKind) -> CfscmStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        *out = match m.0.kind() {
            ModelKind::Exogenous => CfscmModelKind::Exogenous,
            ModelKind::Mediator => CfscmModelKind::Mediator,
            ModelKind::VqGlm => CfscmModelKind::VqGlm,
        };
        Ok(())
    })
}

/// Counterfactual image of one observation under the intervention text
/// `do_text` (`name=value[,name=value]`, empty for none). `parents_cf`, when
/// not null, receives the counterfactual `(y, t, i)`.
///
/// # Safety
/// `image` and `image_cf` point to 256 doubles, `parents` to 3 and
/// `parents_cf` to 3 or null; `do_text` is NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn cfscm_model_counterfactual(
    model: *const CfscmModel,
    image: *const f64,
    parents: *const f64,
    do_text: *const c_char,
    pi: f64,
    seed: u64,
    image_cf: *mut f64,
    parents_cf: *mut f64,
) -> CfscmStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let x = slice(image, PIXELS, "image")?;
        let row = parent_row(slice(parents, 3, "parents")?)?;
        let iv = Intervention::parse(text(do_text, "do_text")?, &m.scm.graph)?;
        let out = slice_mut(image_cf, PIXELS, "image_cf")?;
        let cf_row = m.counterfactual_parents(std::slice::from_ref(&row), &iv, seed)?.remove(0);
        let img = m.counterfactual_images(x, std::slice::from_ref(&row), std::slice::from_ref(&cf_row), pi, seed)?;
        out.copy_from_slice(&img);
        if !parents_cf.is_null() {
            let dst = slice_mut(parents_cf, 3, "parents_cf")?;
            for (d, v) in dst.iter_mut().zip(&cf_row) {
                *d = match v {
                    Value::Category(c) => *c as f64,
                    Value::Scalar(s) => *s,
                    Value::Tensor(_) => f64::NAN,
                };
            }
        }
        Ok(())
    })
}

/// Direct, indirect and total effects of a mediator model, each 256
/// doubles. `telescoping_error`, when not null, receives the identity residual.
///
/// # Safety
/// Image buffers hold 256 doubles, `parents` 3; `do_text` is NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn cfscm_model_effects(
    model: *const CfscmModel,
    image: *const f64,
    parents: *const f64,
    do_text: *const c_char,
    pi: f64,
    seed: u64,
    de: *mut f64,
    ie: *mut f64,
    te: *mut f64,
    telescoping_error: *mut f64,
) -> CfscmStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let ladder = match (&m.ladder, m.kind()) {
            (Some(l), ModelKind::Mediator) => l,
            _ => return Err(Error::Variant(format!("effects need a mediator model, got {}", m.kind())).into()),
        };
        let x = slice(image, PIXELS, "image")?;
        let row = parent_row(slice(parents, 3, "parents")?)?;
        let iv = Intervention::parse(text(do_text, "do_text")?, &m.scm.graph)?;
        let (de, ie, te) = (
            slice_mut(de, PIXELS, "de")?,
            slice_mut(ie, PIXELS, "ie")?,
            slice_mut(te, PIXELS, "te")?,
        );
        let cf_row = m.counterfactual_parents(std::slice::from_ref(&row), &iv, seed)?.remove(0);
        let pa = m.scm.encoder.encode(&row)?;
        let pa_cf = m.scm.encoder.encode(&cf_row)?;
        let r = ladder.effects(x, &pa, &pa_cf, pi, seed)?;
        de.copy_from_slice(&r.de);
        ie.copy_from_slice(&r.ie);
        te.copy_from_slice(&r.te);
        if let Some(t) = telescoping_error.as_mut() {
            *t = r.telescoping_error;
        }
        Ok(())
    })
}

/// Generates `n` synthetic samples from the ground-truth process.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cfscm_dataset_generate(seed: u64, n: usize, out: *mut *mut CfscmDataset) -> CfscmStatus {
    guard(|| boxed(out, CfscmDataset(synthpop::generate(seed, n).0)))
}

/// Loads a dataset directory written by `cfscm synth`.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cfscm_dataset_load(path: *const c_char, out: *mut *mut CfscmDataset) -> CfscmStatus {
    guard(|| {
        let path = text(path, "path")?;
        boxed(out, CfscmDataset(Dataset::load(Path::new(path))?))
    })
}

/// # Safety
/// `data` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn cfscm_dataset_free(data: *mut CfscmDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Number of samples; 0 for a null handle.
///
/// # Safety
/// `data` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn cfscm_dataset_len(data: *const CfscmDataset) -> usize {
    data.as_ref().map_or(0, |d| d.0.len())
}

/// Copies sample `index` into `image` (256 doubles) and `parents` (3 doubles).
///
/// # Safety
/// `image` must hold 256 doubles and `parents` 3, or be null to skip.
#[no_mangle]
pub unsafe extern "C" fn cfscm_dataset_sample(
    data: *const CfscmDataset,
    index: usize,
    image: *mut f64,
    parents: *mut f64,
) -> CfscmStatus {
    guard(|| {
        let d = &handle(data, "data")?.0;
        if index >= d.len() {
            return Err(Error::UnknownId(index).into());
        }
        if !image.is_null() {
            slice_mut(image, PIXELS, "image")?.copy_from_slice(d.image(index));
        }
        if !parents.is_null() {
            slice_mut(parents, 3, "parents")?.copy_from_slice(&[d.y[index] as f64, d.t[index], d.i[index]]);
        }
        Ok(())
    })
}

/// Fits `B` for latents `z` (`n × k`) on design `p` (`n × m`), both
/// row-major, with ridge jitter `jitter ≥ 0`.
///
/// # Safety
/// `z` holds `n·k` doubles, `p` holds `n·m`; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cfscm_glm_fit(
    z: *const f64,
    p: *const f64,
    n: usize,
    k: usize,
    m: usize,
    jitter: f64,
    out: *mut *mut CfscmGlm,
) -> CfscmStatus {
    guard(|| {
        let zm = vqglm::matrix(n, k, slice(z, n * k, "z")?)?;
        let pm = vqglm::matrix(n, m, slice(p, n * m, "p")?)?;
        boxed(out, CfscmGlm(vqglm::glm_fit(&zm, &pm, jitter)?))
    })
}

/// # Safety
/// `glm` must be null or a live handle from [`cfscm_glm_fit`].
#[no_mangle]
pub unsafe extern "C" fn cfscm_glm_free(glm: *mut CfscmGlm) {
    if !glm.is_null() {
        drop(Box::from_raw(glm));
    }
}

/// Writes the dimensions of `B` to `rows` and `cols`.
///
/// # Safety
/// `glm` must be a live handle; `rows` and `cols` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cfscm_glm_shape(glm: *const CfscmGlm, rows: *mut usize, cols: *mut usize) -> CfscmStatus {
    guard(|| {
        let b = &handle(glm, "glm")?.0.b;
        *rows.as_mut().ok_or(Failure::Null("rows"))? = b.nrows();
        *cols.as_mut().ok_or(Failure::Null("cols"))? = b.ncols();
        Ok(())
    })
}

/// Copies `B` row-major into `out`, which holds `len` doubles.
///
/// # Safety
/// `out` must be valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cfscm_glm_coefficients(glm: *const CfscmGlm, out: *mut f64, len: usize) -> CfscmStatus {
    guard(|| {
        let b = &handle(glm, "glm")?.0.b;
        if len != b.len() {
            return Err(Error::Shape(format!("buffer of {len} for {} coefficients", b.len())).into());
        }
        slice_mut(out, len, "out")?.copy_from_slice(&vqglm::row_major(b));
        Ok(())
    })
}

fn glm_step(
    glm: &GlmParams,
    input: &[f64],
    p: &[f64],
    n: usize,
    out: &mut [f64],
    step: fn(&GlmParams, &nalgebra::DMatrix<f64>, &nalgebra::DMatrix<f64>) -> cfscm::Result<nalgebra::DMatrix<f64>>,
) -> Result<(), Failure> {
    let (m, k) = (glm.b.nrows(), glm.b.ncols());
    let a = vqglm::matrix(n, k, input)?;
    let pm = vqglm::matrix(n, m, p)?;
    out.copy_from_slice(&vqglm::row_major(&step(glm, &a, &pm)?));
    Ok(())
}

/// `U = Z − P·B` for `n` rows.
///
/// # Safety
/// `z` and `u` hold `n·k` doubles and `p` holds `n·m`, with `B` of size `m × k`.
#[no_mangle]
pub unsafe extern "C" fn cfscm_glm_abduct(
    glm: *const CfscmGlm,
    z: *const f64,
    p: *const f64,
    n: usize,
    u: *mut f64,
) -> CfscmStatus {
    guard(|| {
        let g = &handle(glm, "glm")?.0;
        let (m, k) = (g.b.nrows(), g.b.ncols());
        glm_step(g, slice(z, n * k, "z")?, slice(p, n * m, "p")?, n, slice_mut(u, n * k, "u")?, vqglm::glm_abduct)
    })
}

/// `Z = U + P·B` for `n` rows.
///
/// # Safety
/// `u` and `z` hold `n·k` doubles and `p` holds `n·m`, with `B` of size `m × k`.
#[no_mangle]
pub unsafe extern "C" fn cfscm_glm_predict(
    glm: *const CfscmGlm,
    u: *const f64,
    p: *const f64,
    n: usize,
    z: *mut f64,
) -> CfscmStatus {
    guard(|| {
        let g = &handle(glm, "glm")?.0;
        let (m, k) = (g.b.nrows(), g.b.ncols());
        glm_step(g, slice(u, n * k, "u")?, slice(p, n * m, "p")?, n, slice_mut(z, n * k, "z")?, vqglm::glm_predict)
    })
}
