//! C ABI for the otseg engine.
//!
//! Every fallible call returns an [`OtsegStatus`]; on failure the message is
//! kept per thread and can be read with [`otseg_last_error_message`].
//! Matrices are dense row-major `double` arrays. Labels are `uint32_t`.
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use otseg::cluster::{self, CenterBank, CenterMeta, ClusterOutcome};
use otseg::losses::{self, PpcDenominator, PpcOptions};
use otseg::sinkhorn::{self, SolverSettings, TransportProblem};
use otseg::{metrics, Error, Matrix};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OtsegStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    DegenerateKernel = 4,
    Parse = 5,
    Format = 6,
    Io = 7,
    /// The output buffer length does not match the result.
    BufferSize = 8,
    Panic = 9,
}

impl From<&Error> for OtsegStatus {
    fn from(e: &Error) -> Self {
        match e.root() {
            Error::InvalidArgument(_) => OtsegStatus::InvalidArgument,
            Error::Config(_) => OtsegStatus::Config,
            Error::DegenerateKernel { .. } => OtsegStatus::DegenerateKernel,
            Error::Parse { .. } => OtsegStatus::Parse,
            Error::Format { .. } => OtsegStatus::Format,
            Error::Io { .. } => OtsegStatus::Io,
            _ => OtsegStatus::InvalidArgument,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(OtsegStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(OtsegStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(OtsegStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> OtsegStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => OtsegStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            OtsegStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be null or valid for `len` reads.
unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must be null or valid for `len` writes.
unsafe fn write_out(p: *mut f64, len: usize, data: &[f64], what: &str) -> Result<(), Failure> {
    if p.is_null() {
        return Ok(());
    }
    if len != data.len() {
        return Err(Failure(
            OtsegStatus::BufferSize,
            format!("{what}: buffer holds {len} values, result has {}", data.len()),
        ));
    }
    ptr::copy_nonoverlapping(data.as_ptr(), p, len);
    Ok(())
}

/// # Safety
/// `p` must be null or valid for `rows * cols` reads.
unsafe fn matrix(p: *const f64, rows: usize, cols: usize, what: &str) -> Result<Matrix, Failure> {
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| Failure(OtsegStatus::InvalidArgument, format!("{what}: size overflows")))?;
    let data = slice(p, len, what)?.to_vec();
    Ok(Matrix::from_vec(rows, cols, data)?)
}

/// # Safety
/// `p` must be null or valid for `len` reads.
unsafe fn labels(p: *const u32, len: usize, what: &str) -> Result<Vec<usize>, Failure> {
    Ok(slice(p, len, what)?.iter().map(|&l| l as usize).collect())
}

/// # Safety
/// `p` must be null or a valid NUL-terminated string.
unsafe fn to_path(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(OtsegStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

fn settings(lambda: f64, max_iters: usize, tolerance: f64) -> SolverSettings {
    SolverSettings {
        lambda,
        max_iters,
        tolerance,
    }
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn otseg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated, always
/// NUL-terminated when `len > 0`). Returns the full message length including
/// the terminator, or 0 if the last call succeeded.
///
/// # Safety
/// `buf` must be null or valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn otseg_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| match &*e.borrow() {
        None => 0,
        Some(msg) => {
            let bytes = msg.as_bytes_with_nul();
            if !buf.is_null() && len > 0 {
                let n = bytes.len().min(len);
                ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
                *buf.add(n - 1) = 0;
            }
            bytes.len()
        }
    })
}

/// Solves the entropic transport problem on the `m x n` similarity matrix.
/// `out_plan` (`m * n`) is required; `out_u` (`m`), `out_v` (`n`),
/// `out_iters` and `out_converged` may be null.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn otseg_sinkhorn_solve(
    similarity: *const f64,
    m: usize,
    n: usize,
    lambda: f64,
    max_iters: usize,
    tolerance: f64,
    out_plan: *mut f64,
    out_u: *mut f64,
    out_v: *mut f64,
    out_iters: *mut usize,
    out_converged: *mut bool,
) -> OtsegStatus {
    guard(|| {
        if out_plan.is_null() {
            return Err(null("out_plan"));
        }
        let s = matrix(similarity, m, n, "similarity")?;
        let a = sinkhorn::solve(&TransportProblem::new(s, settings(lambda, max_iters, tolerance)))?;
        write_out(out_plan, m * n, a.plan.as_slice(), "out_plan")?;
        write_out(out_u, m, &a.u, "out_u")?;
        write_out(out_v, n, &a.v, "out_v")?;
        if !out_iters.is_null() {
            *out_iters = a.iters_used;
        }
        if !out_converged.is_null() {
            *out_converged = a.converged;
        }
        Ok(())
    })
}

/// Unit-norm subclass centers, `classes * clusters_per_class` rows.
pub struct OtsegCenterBank {
    inner: CenterBank,
}

/// Result of one clustering pass.
pub struct OtsegClusterOutcome {
    inner: ClusterOutcome,
}

/// # Safety
/// `out` must be valid for one write.
unsafe fn emit<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// # Safety
/// `p` must be null or a live handle.
unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Seeded random centers.
///
/// # Safety
/// `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn otseg_center_bank_new(
    classes: usize,
    clusters_per_class: usize,
    dim: usize,
    seed: u64,
    out: *mut *mut OtsegCenterBank,
) -> OtsegStatus {
    guard(|| {
        let inner = CenterBank::init(classes, clusters_per_class, dim, seed)?;
        emit(out, OtsegCenterBank { inner })
    })
}

/// Wraps caller-provided centers (`classes * clusters_per_class` rows of
/// `dim`); rows are renormalized.
///
/// # Safety
/// `centers` must be valid for the stated size, `out` for one write.
#[no_mangle]
pub unsafe extern "C" fn otseg_center_bank_from_centers(
    classes: usize,
    clusters_per_class: usize,
    dim: usize,
    centers: *const f64,
    out: *mut *mut OtsegCenterBank,
) -> OtsegStatus {
    guard(|| {
        let m = matrix(centers, classes.saturating_mul(clusters_per_class), dim, "centers")?;
        let inner = CenterBank::from_centers(classes, clusters_per_class, m)?;
        emit(out, OtsegCenterBank { inner })
    })
}

/// # Safety
/// `path` must be a NUL-terminated string, `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn otseg_center_bank_load(path: *const c_char, out: *mut *mut OtsegCenterBank) -> OtsegStatus {
    guard(|| {
        let (inner, _) = CenterBank::load(&to_path(path)?)?;
        emit(out, OtsegCenterBank { inner })
    })
}

/// # Safety
/// `bank` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn otseg_center_bank_save(
    bank: *const OtsegCenterBank,
    path: *const c_char,
    seed: u64,
    step: u64,
) -> OtsegStatus {
    guard(|| {
        let bank = handle(bank, "bank")?;
        bank.inner.save(&to_path(path)?, &CenterMeta { seed, step })?;
        Ok(())
    })
}

/// # Safety
/// `bank` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn otseg_center_bank_free(bank: *mut OtsegCenterBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

/// Any of the outputs may be null.
///
/// # Safety
/// `bank` must be a live handle; outputs null or valid for one write.
#[no_mangle]
pub unsafe extern "C" fn otseg_center_bank_shape(
    bank: *const OtsegCenterBank,
    classes: *mut usize,
    clusters_per_class: *mut usize,
    dim: *mut usize,
) -> OtsegStatus {
    guard(|| {
        let b = &handle(bank, "bank")?.inner;
        for (p, v) in [(classes, b.class_count()), (clusters_per_class, b.clusters_per_class()), (dim, b.dim())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Copies every center, row-major, into `out` (`len` must equal rows * dim).
///
/// # Safety
/// `bank` must be a live handle, `out` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn otseg_center_bank_centers(bank: *const OtsegCenterBank, out: *mut f64, len: usize) -> OtsegStatus {
    guard(|| {
        let b = &handle(bank, "bank")?.inner;
        if out.is_null() {
            return Err(null("out"));
        }
        write_out(out, len, b.all_centers().as_slice(), "out")
    })
}

/// Clusters the points of every class against the bank. `embeddings` is
/// `n x dim` with unit-norm rows; `class_labels` has `n` entries.
///
/// # Safety
/// Pointers must be valid for the stated sizes; `out` for one write.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn otseg_center_bank_assign(
    bank: *const OtsegCenterBank,
    embeddings: *const f64,
    n: usize,
    dim: usize,
    class_labels: *const u32,
    lambda: f64,
    max_iters: usize,
    tolerance: f64,
    out: *mut *mut OtsegClusterOutcome,
) -> OtsegStatus {
    guard(|| {
        let b = &handle(bank, "bank")?.inner;
        let e = matrix(embeddings, n, dim, "embeddings")?;
        let labels = labels(class_labels, n, "class_labels")?;
        let inner = cluster::assign_subclass_labels(&e, &labels, b, settings(lambda, max_iters, tolerance), 1)?;
        emit(out, OtsegClusterOutcome { inner })
    })
}

/// Blends the outcome's batch means into the centers with momentum `mu`.
///
/// # Safety
/// Both handles must be live.
#[no_mangle]
pub unsafe extern "C" fn otseg_center_bank_momentum_update(
    bank: *mut OtsegCenterBank,
    outcome: *const OtsegClusterOutcome,
    mu: f64,
) -> OtsegStatus {
    guard(|| {
        let o = &handle(outcome, "outcome")?.inner;
        let b = bank.as_mut().ok_or_else(|| null("bank"))?;
        b.inner.momentum_update(o, mu)?;
        Ok(())
    })
}

/// Number of points in the outcome.
///
/// # Safety
/// `outcome` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn otseg_cluster_outcome_len(outcome: *const OtsegClusterOutcome) -> usize {
    outcome.as_ref().map_or(0, |o| o.inner.subclass_labels.len())
}

/// Copies the global subclass id (`class * M + cluster`) of each point.
///
/// # Safety
/// `outcome` must be a live handle and `out` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn otseg_cluster_outcome_labels(
    outcome: *const OtsegClusterOutcome,
    out: *mut u32,
    len: usize,
) -> OtsegStatus {
    guard(|| {
        let o = &handle(outcome, "outcome")?.inner;
        if out.is_null() {
            return Err(null("out"));
        }
        if len != o.subclass_labels.len() {
            return Err(Failure(
                OtsegStatus::BufferSize,
                format!("buffer holds {len} labels, outcome has {}", o.subclass_labels.len()),
            ));
        }
        for (i, &l) in o.subclass_labels.iter().enumerate() {
            *out.add(i) = l as u32;
        }
        Ok(())
    })
}

/// Number of per-class solves that hit the iteration cap.
///
/// # Safety
/// `outcome` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn otseg_cluster_outcome_unconverged(outcome: *const OtsegClusterOutcome) -> usize {
    outcome.as_ref().map_or(0, |o| o.inner.unconverged())
}

/// # Safety
/// `outcome` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn otseg_cluster_outcome_free(outcome: *mut OtsegClusterOutcome) {
    if !outcome.is_null() {
        drop(Box::from_raw(outcome));
    }
}

/// Mean softmax cross-entropy of `n x classes` logits. `out_grad` may be null.
///
/// # Safety
/// Pointers must be valid for the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn otseg_ce_loss(
    logits: *const f64,
    n: usize,
    classes: usize,
    labels_: *const u32,
    out_value: *mut f64,
    out_grad: *mut f64,
) -> OtsegStatus {
    guard(|| {
        if out_value.is_null() {
            return Err(null("out_value"));
        }
        let t = losses::ce_loss(&matrix(logits, n, classes, "logits")?, &labels(labels_, n, "labels")?)?;
        write_out(out_grad, n * classes, t.grad.as_slice(), "out_grad")?;
        *out_value = t.value;
        Ok(())
    })
}

/// Point-point contrast of `n` anchors against a pool of `p` rows.
/// `all_contrasts` puts every non-anchor pool entry in the denominator
/// instead of the positive plus the negatives. With `anchors_lead_pool` the
/// first `n` pool rows are the anchors themselves. Gradient outputs may be
/// null.
///
/// # Safety
/// Pointers must be valid for the stated sizes.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn otseg_ppc_loss(
    anchors: *const f64,
    n: usize,
    dim: usize,
    anchor_labels: *const u32,
    pool: *const f64,
    p: usize,
    pool_labels: *const u32,
    tau: f64,
    all_contrasts: bool,
    anchors_lead_pool: bool,
    out_value: *mut f64,
    out_grad_anchors: *mut f64,
    out_grad_pool: *mut f64,
) -> OtsegStatus {
    guard(|| {
        if out_value.is_null() {
            return Err(null("out_value"));
        }
        let opts = PpcOptions {
            tau,
            denominator: if all_contrasts {
                PpcDenominator::AllContrasts
            } else {
                PpcDenominator::PositivePlusNegatives
            },
            anchors_lead_pool,
        };
        let out = losses::ppc_loss(
            &matrix(anchors, n, dim, "anchors")?,
            &labels(anchor_labels, n, "anchor_labels")?,
            &matrix(pool, p, dim, "pool")?,
            &labels(pool_labels, p, "pool_labels")?,
            opts,
        )?;
        write_out(out_grad_anchors, n * dim, out.grad_anchors.as_slice(), "out_grad_anchors")?;
        write_out(out_grad_pool, p * dim, out.grad_pool.as_slice(), "out_grad_pool")?;
        *out_value = out.value;
        Ok(())
    })
}

/// Point-center contrast against `g` centers. `out_grad` may be null.
///
/// # Safety
/// Pointers must be valid for the stated sizes.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn otseg_pcc_loss(
    embeddings: *const f64,
    n: usize,
    dim: usize,
    subclass: *const u32,
    centers: *const f64,
    g: usize,
    tau: f64,
    out_value: *mut f64,
    out_grad: *mut f64,
) -> OtsegStatus {
    guard(|| {
        if out_value.is_null() {
            return Err(null("out_value"));
        }
        let t = losses::pcc_loss(
            &matrix(embeddings, n, dim, "embeddings")?,
            &labels(subclass, n, "subclass")?,
            &matrix(centers, g, dim, "centers")?,
            tau,
        )?;
        write_out(out_grad, n * dim, t.grad.as_slice(), "out_grad")?;
        *out_value = t.value;
        Ok(())
    })
}

/// Mean IoU over classes present in prediction or truth.
///
/// # Safety
/// `pred` and `truth` must be valid for `n` reads, `out` for one write.
#[no_mangle]
pub unsafe extern "C" fn otseg_miou(
    pred: *const u32,
    truth: *const u32,
    n: usize,
    classes: usize,
    out: *mut f64,
) -> OtsegStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let r = metrics::miou(&labels(pred, n, "pred")?, &labels(truth, n, "truth")?, classes)?;
        *out = r.miou;
        Ok(())
    })
}
