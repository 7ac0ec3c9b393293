//! C ABI over `ncc-core`.
//!
//! Every function returns an [`NccStatus`]; on failure a message is kept per
//! thread and can be read with [`ncc_last_error_message`]. Matrices are dense
//! row-major `double` buffers. Models are opaque handles that must be released
//! with [`ncc_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use ncc::collapse::{self, ClassifierSnapshot, EmbeddingSet};
use ncc::datakit::Split;
use ncc::diffcore::Tensor;
use ncc::netlib::{load_checkpoint, Model};
use ncc::oodeval::{self, ScoreSet};
use ncc::{etf, objective, Error};

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NccStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Domain = 4,
    NonFinite = 5,
    Parse = 6,
    Io = 7,
    Config = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// Collapse metrics of one embedding matrix. `nc2`–`nc4` are NaN when no
/// classifier was supplied.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NccNcReport {
    pub nc1: f64,
    pub nc2: f64,
    pub nc3: f64,
    pub nc4: f64,
    pub rankme: f64,
    pub entropy: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NccFprResult {
    pub threshold: f64,
    pub fpr: f64,
}

/// A trained model loaded from a checkpoint.
pub struct NccModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(NccStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape { .. } => NccStatus::Shape,
            Error::Domain(_) => NccStatus::Domain,
            Error::NonFinite(_) => NccStatus::NonFinite,
            Error::Parse { .. } | Error::Format(_) => NccStatus::Parse,
            Error::Io { .. } => NccStatus::Io,
            Error::Spec(_) | Error::Config(_) | Error::Usage(_) => NccStatus::Config,
        };
        Fail(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(NccStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> NccStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            NccStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            NccStatus::Panic
        }
    }
}

fn nonnull<T>(p: *const T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail(NccStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must point to `len` readable values unless `len` is 0.
unsafe fn read<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    nonnull(p, what)?;
    Ok(slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must point to at least `need` writable values.
unsafe fn write_out(p: *mut f64, cap: usize, values: &[f64], what: &str) -> Result<(), Fail> {
    nonnull(p, what)?;
    if cap < values.len() {
        return Err(Fail(
            NccStatus::BufferTooSmall,
            format!("{what} holds {cap} values, {} needed", values.len()),
        ));
    }
    slice::from_raw_parts_mut(p, values.len()).copy_from_slice(values);
    Ok(())
}

/// # Safety
/// `data` must point to `rows * cols` readable doubles.
unsafe fn matrix(data: *const f64, rows: usize, cols: usize, what: &str) -> Result<Tensor, Fail> {
    if rows == 0 || cols == 0 {
        return Err(invalid(format!("{what} must be non-empty")));
    }
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| invalid(format!("{what} is too large")))?;
    Ok(Tensor::matrix(rows, cols, read(data, n, what)?.to_vec()))
}

/// # Safety
/// `s` must be a nul-terminated string.
unsafe fn string<'a>(s: *const c_char, what: &str) -> Result<&'a str, Fail> {
    nonnull(s, what)?;
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not UTF-8")))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn ncc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ncc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Writes the `order × order` simplex ETF into `out`.
///
/// # Safety
/// `out` must point to `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ncc_simplex_etf(order: usize, out: *mut f64, out_len: usize) -> NccStatus {
    guard(|| {
        let m = etf::simplex_etf(order)?;
        write_out(out, out_len, m.matrix().data(), "out")
    })
}

/// Writes the `rows × cols` fixed-ETF weight block into `out`.
///
/// # Safety
/// `out` must point to `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ncc_etf_weight(rows: usize, cols: usize, out: *mut f64, out_len: usize) -> NccStatus {
    guard(|| {
        let w = etf::etf_weight(rows, cols)?;
        write_out(out, out_len, w.data(), "out")
    })
}

/// Collapse metrics of `z` (`n × d`) with labels in `[0, k)`. `weight`
/// (`k × d`) and `bias` (`k`) may both be NULL to skip `nc2`–`nc4`.
///
/// # Safety
/// Buffers must match the stated sizes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ncc_nc_report(
    z: *const f64,
    n: usize,
    d: usize,
    labels: *const usize,
    k: usize,
    weight: *const f64,
    bias: *const f64,
    out: *mut NccNcReport,
) -> NccStatus {
    guard(|| {
        nonnull(out, "out")?;
        let feats = matrix(z, n, d, "z")?;
        let labels = read(labels, n, "labels")?.to_vec();
        let e = EmbeddingSet::new(feats, labels, k, "ffi", Split::IdTest)?;
        let snap = match (weight.is_null(), bias.is_null()) {
            (true, true) => None,
            (false, false) => Some(ClassifierSnapshot::new(
                matrix(weight, k, d, "weight")?,
                read(bias, k, "bias")?.to_vec(),
            )?),
            _ => return Err(invalid("weight and bias must both be given or both be NULL")),
        };
        let r = collapse::nc_report(&e, snap.as_ref())?;
        *out = NccNcReport {
            nc1: r.nc1,
            nc2: r.nc2,
            nc3: r.nc3,
            nc4: r.nc4,
            rankme: r.rankme,
            entropy: r.entropy_est,
        };
        Ok(())
    })
}

/// Effective rank of `z` (`rows × cols`).
///
/// # Safety
/// `z` must hold `rows * cols` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ncc_rankme(z: *const f64, rows: usize, cols: usize, epsilon: f64, out: *mut f64) -> NccStatus {
    guard(|| {
        nonnull(out, "out")?;
        *out = collapse::rankme(&matrix(z, rows, cols, "z")?, epsilon)?;
        Ok(())
    })
}

/// Nearest-neighbor differential entropy estimate of the rows of `z`.
///
/// # Safety
/// `z` must hold `rows * cols` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ncc_knn_entropy(z: *const f64, rows: usize, cols: usize, out: *mut f64) -> NccStatus {
    guard(|| {
        nonnull(out, "out")?;
        *out = objective::knn_entropy_estimate(&matrix(z, rows, cols, "z")?)?;
        Ok(())
    })
}

/// Row-wise energy score `log Σ exp(logits)` into `out` (`rows` values).
///
/// # Safety
/// `logits` must hold `rows * cols` doubles; `out` must hold `out_len`.
#[no_mangle]
pub unsafe extern "C" fn ncc_energy_scores(
    logits: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
    out_len: usize,
) -> NccStatus {
    guard(|| {
        let scores = oodeval::energy_score(&matrix(logits, rows, cols, "logits")?);
        write_out(out, out_len, &scores, "out")
    })
}

/// False-positive rate at the given true-positive rate, treating higher
/// scores as in-distribution.
///
/// # Safety
/// Score buffers must hold the stated counts; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ncc_fpr_at_tpr(
    id_scores: *const f64,
    n_id: usize,
    ood_scores: *const f64,
    n_ood: usize,
    tpr: f64,
    out: *mut NccFprResult,
) -> NccStatus {
    guard(|| {
        nonnull(out, "out")?;
        let scores = ScoreSet {
            id_scores: read(id_scores, n_id, "id_scores")?.to_vec(),
            ood_scores: read(ood_scores, n_ood, "ood_scores")?.to_vec(),
        };
        let r = oodeval::fpr_at_tpr(&scores, tpr)?;
        *out = NccFprResult {
            threshold: r.threshold,
            fpr: r.fpr,
        };
        Ok(())
    })
}

/// Loads a checkpoint file into a new handle stored in `*out`.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ncc_model_load(path: *const c_char, out: *mut *mut NccModel) -> NccStatus {
    guard(|| {
        nonnull(out, "out")?;
        *out = ptr::null_mut();
        let ck = load_checkpoint(string(path, "path")?)?;
        *out = Box::into_raw(Box::new(NccModel { inner: ck.model }));
        Ok(())
    })
}

/// Releases a handle from [`ncc_model_load`]. NULL is ignored.
///
/// # Safety
/// `model` must be NULL or a live handle, and is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn ncc_model_free(model: *mut NccModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be NULL or a live handle.
unsafe fn model_ref<'a>(model: *const NccModel) -> Result<&'a Model, Fail> {
    nonnull(model, "model")?;
    Ok(&(*model).inner)
}

/// Input width of the model, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ncc_model_input_dim(model: *const NccModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.spec.input_dim)
}

/// Number of classes, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ncc_model_num_classes(model: *const NccModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.spec.num_classes)
}

/// Evaluation-mode logits for `rows` inputs into `out` (`rows × K`).
///
/// # Safety
/// `x` must hold `rows × input_dim` doubles; `out` must hold `out_len`.
#[no_mangle]
pub unsafe extern "C" fn ncc_model_forward(
    model: *const NccModel,
    x: *const f64,
    rows: usize,
    out: *mut f64,
    out_len: usize,
) -> NccStatus {
    guard(|| {
        let m = model_ref(model)?;
        let pass = m.forward_eval(&matrix(x, rows, m.spec.input_dim, "x")?)?;
        write_out(out, out_len, pass.graph.value(pass.logits()).data(), "out")
    })
}

/// Activations at `tap` (a layer name, `encoder_out`, `projector_out` or
/// `logits`). The tap width is stored in `*cols`; when `out` is NULL only the
/// width is reported.
///
/// # Safety
/// `x` must hold `rows × input_dim` doubles; `out`, when given, must hold
/// `out_len` doubles; `cols` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ncc_model_tap(
    model: *const NccModel,
    tap: *const c_char,
    x: *const f64,
    rows: usize,
    out: *mut f64,
    out_len: usize,
    cols: *mut usize,
) -> NccStatus {
    guard(|| {
        nonnull(cols, "cols")?;
        let m = model_ref(model)?;
        let name = string(tap, "tap")?;
        let trace = m.trace(&matrix(x, rows, m.spec.input_dim, "x")?)?;
        let t = trace
            .get(name)
            .ok_or_else(|| invalid(format!("unknown tap {name:?}")))?;
        *cols = t.cols();
        if out.is_null() {
            return Ok(());
        }
        write_out(out, out_len, t.data(), "out")
    })
}
