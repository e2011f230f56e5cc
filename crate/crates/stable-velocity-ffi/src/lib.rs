//! C ABI over the sampling toolkit: opaque handles, integer status codes,
//! and flat row-major `double` buffers.
//!
//! Conventions shared by every entry point:
//!
//! - Constructors write the new handle through an out-pointer and return
//!   [`sv_status::Ok`]; each handle is released with its matching
//!   `sv_*_free`, which tolerates null.
//! - Matrices are row-major `f64` buffers owned by the caller; lengths are
//!   documented per argument.
//! - Any status other than `Ok` leaves a human-readable explanation in
//!   [`sv_last_error_message`] for the calling thread.
//! - Randomness is supplied as a `u64` seed per call; identical seeds give
//!   bit-identical results on every platform.
//! - Panics never cross the boundary: they are caught and reported as
//!   [`sv_status::Panic`].

#![allow(non_camel_case_types)]
#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::slice;

use ndarray::Array2;
use stable_velocity::bank::MemoryBank;
use stable_velocity::error::Error;
use stable_velocity::gmm::GmmSpec;
use stable_velocity::rng::Stream;
use stable_velocity::schedules::{Schedule, ScheduleKind};
use stable_velocity::solvers::{
    sample, BaseKind, GridKind, OracleVelocity, SolverPlan, WtCoefficient,
};
use stable_velocity::targets::{stablevm_target, ReferenceBatch};

// ---------------------------------------------------------------------------
// Status codes and error reporting
// ---------------------------------------------------------------------------

/// Result of an FFI call. Everything except `Ok` sets the thread-local
/// message readable through `sv_last_error_message`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum sv_status {
    /// The call succeeded.
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// An argument was out of range or inconsistent.
    InvalidArgument = 2,
    /// An output buffer was shorter than the result; the required length
    /// was written to the size out-parameter when the signature has one.
    BufferTooSmall = 3,
    /// A schedule was built or queried outside its valid domain.
    ScheduleError = 4,
    /// A mixture specification failed validation.
    InvalidSpec = 5,
    /// Array dimensions disagree.
    ShapeMismatch = 6,
    /// A sampling plan or integration step was invalid.
    SolverError = 7,
    /// A computation produced a non-finite value.
    NonFinite = 8,
    /// A configuration value was inconsistent (for example, drawing from
    /// an empty queue).
    ConfigError = 9,
    /// A file violated its format contract.
    FormatError = 10,
    /// An operating-system I/O error.
    IoError = 11,
    /// A serialization error.
    JsonError = 12,
    /// An internal panic was caught at the boundary.
    Panic = 13,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).expect("nul bytes were replaced");
    });
}

fn fail(status: sv_status, msg: &str) -> sv_status {
    set_error(msg);
    status
}

fn fail_from(err: &Error) -> sv_status {
    set_error(&err.to_string());
    match err {
        Error::Schedule(_) => sv_status::ScheduleError,
        Error::Spec(_) => sv_status::InvalidSpec,
        Error::Shape(_) => sv_status::ShapeMismatch,
        Error::Solver(_) => sv_status::SolverError,
        Error::NonFinite(_) => sv_status::NonFinite,
        Error::Config(_) => sv_status::ConfigError,
        Error::Format { .. } => sv_status::FormatError,
        Error::Io(_) => sv_status::IoError,
        Error::Json(_) => sv_status::JsonError,
    }
}

fn guarded(f: impl FnOnce() -> sv_status) -> sv_status {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(sv_status::Panic, "internal panic caught at the FFI boundary"),
    }
}

/// Explanation of the most recent failure on the calling thread. Never
/// null; empty before the first failure. The pointer stays valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sv_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn sv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// ---------------------------------------------------------------------------
// Pointer helpers
// ---------------------------------------------------------------------------

unsafe fn want_ref<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, sv_status> {
    if ptr.is_null() {
        Err(fail(sv_status::NullPointer, &format!("{what} is null")))
    } else {
        Ok(&*ptr)
    }
}

unsafe fn want_mut<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, sv_status> {
    if ptr.is_null() {
        Err(fail(sv_status::NullPointer, &format!("{what} is null")))
    } else {
        Ok(&mut *ptr)
    }
}

unsafe fn want_in<'a>(ptr: *const f64, len: usize, what: &str) -> Result<&'a [f64], sv_status> {
    if ptr.is_null() {
        Err(fail(sv_status::NullPointer, &format!("{what} is null")))
    } else {
        Ok(slice::from_raw_parts(ptr, len))
    }
}

unsafe fn want_out<'a>(ptr: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], sv_status> {
    if ptr.is_null() {
        Err(fail(sv_status::NullPointer, &format!("{what} is null")))
    } else {
        Ok(slice::from_raw_parts_mut(ptr, len))
    }
}

fn checked_len(rows: usize, cols: usize, what: &str) -> Result<usize, sv_status> {
    rows.checked_mul(cols).ok_or_else(|| {
        fail(
            sv_status::InvalidArgument,
            &format!("{what}: {rows} x {cols} overflows"),
        )
    })
}

// ---------------------------------------------------------------------------
// Schedules
// ---------------------------------------------------------------------------

/// Interpolant schedule shape.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum sv_schedule_kind {
    /// `alpha = 1 - t`, `sigma = t`.
    Linear = 0,
    /// `alpha = cos(pi t / 2)`, `sigma = sin(pi t / 2)`.
    VpCosine = 1,
}

/// An interpolant schedule together with its evaluation window.
pub struct sv_schedule(Schedule);

/// Linear schedule with the default time clamps.
#[no_mangle]
pub extern "C" fn sv_schedule_linear() -> *mut sv_schedule {
    Box::into_raw(Box::new(sv_schedule(Schedule::linear())))
}

/// Variance-preserving cosine schedule with the default time clamps.
#[no_mangle]
pub extern "C" fn sv_schedule_vp_cosine() -> *mut sv_schedule {
    Box::into_raw(Box::new(sv_schedule(Schedule::vp_cosine())))
}

/// Schedule with explicit time clamps `0 < t_min < t_max < 1`.
#[no_mangle]
pub unsafe extern "C" fn sv_schedule_new(
    kind: sv_schedule_kind,
    t_min: f64,
    t_max: f64,
    out: *mut *mut sv_schedule,
) -> sv_status {
    guarded(|| {
        let out = match want_mut(out, "out") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let kind = match kind {
            sv_schedule_kind::Linear => ScheduleKind::Linear,
            sv_schedule_kind::VpCosine => ScheduleKind::VpCosine,
        };
        match Schedule::new(kind, t_min, t_max) {
            Ok(s) => {
                *out = Box::into_raw(Box::new(sv_schedule(s)));
                sv_status::Ok
            }
            Err(e) => fail_from(&e),
        }
    })
}

/// Coefficients at time `t` inside the clamp window. Each out-pointer is
/// optional; pass null to skip it.
#[no_mangle]
pub unsafe extern "C" fn sv_schedule_eval(
    schedule: *const sv_schedule,
    t: f64,
    out_alpha: *mut f64,
    out_sigma: *mut f64,
    out_alpha_dot: *mut f64,
    out_sigma_dot: *mut f64,
) -> sv_status {
    guarded(|| {
        let schedule = match want_ref(schedule, "schedule") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let ev = match schedule.0.eval(t) {
            Ok(ev) => ev,
            Err(e) => return fail_from(&e),
        };
        if !out_alpha.is_null() {
            *out_alpha = ev.alpha;
        }
        if !out_sigma.is_null() {
            *out_sigma = ev.sigma;
        }
        if !out_alpha_dot.is_null() {
            *out_alpha_dot = ev.alpha_dot;
        }
        if !out_sigma_dot.is_null() {
            *out_sigma_dot = ev.sigma_dot;
        }
        sv_status::Ok
    })
}

/// Clamp window of a schedule.
#[no_mangle]
pub unsafe extern "C" fn sv_schedule_clamp_range(
    schedule: *const sv_schedule,
    out_t_min: *mut f64,
    out_t_max: *mut f64,
) -> sv_status {
    guarded(|| {
        let schedule = match want_ref(schedule, "schedule") {
            Ok(v) => v,
            Err(s) => return s,
        };
        if !out_t_min.is_null() {
            *out_t_min = schedule.0.t_min;
        }
        if !out_t_max.is_null() {
            *out_t_max = schedule.0.t_max;
        }
        sv_status::Ok
    })
}

/// Releases a schedule. Accepts null.
#[no_mangle]
pub unsafe extern "C" fn sv_schedule_free(schedule: *mut sv_schedule) {
    if !schedule.is_null() {
        drop(Box::from_raw(schedule));
    }
}

// ---------------------------------------------------------------------------
// Gaussian mixtures
// ---------------------------------------------------------------------------

/// A Gaussian mixture with diagonal covariances, optionally labeled.
pub struct sv_gmm(GmmSpec);

/// Builds a mixture from flat buffers. `weights` has `modes` entries
/// summing to 1; `means` and `variances` are `modes x dim` row-major;
/// `labels` is either null (unlabeled mixture) or `modes` class ids.
#[no_mangle]
pub unsafe extern "C" fn sv_gmm_new(
    dim: usize,
    modes: usize,
    weights: *const f64,
    means: *const f64,
    variances: *const f64,
    labels: *const u32,
    out: *mut *mut sv_gmm,
) -> sv_status {
    guarded(|| {
        let out = match want_mut(out, "out") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let flat = match checked_len(modes, dim, "means/variances") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let weights = match want_in(weights, modes, "weights") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let means = match want_in(means, flat, "means") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let variances = match want_in(variances, flat, "variances") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let labels = if labels.is_null() {
            None
        } else {
            Some(slice::from_raw_parts(labels, modes).to_vec())
        };
        let rows = |flat: &[f64]| -> Vec<Vec<f64>> {
            flat.chunks_exact(dim).map(<[f64]>::to_vec).collect()
        };
        match GmmSpec::new(dim, weights.to_vec(), rows(means), rows(variances), labels) {
            Ok(spec) => {
                *out = Box::into_raw(Box::new(sv_gmm(spec)));
                sv_status::Ok
            }
            Err(e) => fail_from(&e),
        }
    })
}

/// Draws a random well-separated mixture: means uniform in `[-1, 1]`,
/// per-coordinate variances uniform in `[0.01, 0.1]`. Deterministic in
/// `seed`.
#[no_mangle]
pub unsafe extern "C" fn sv_gmm_random(
    dim: usize,
    modes: usize,
    seed: u64,
    out: *mut *mut sv_gmm,
) -> sv_status {
    guarded(|| {
        let out = match want_mut(out, "out") {
            Ok(v) => v,
            Err(s) => return s,
        };
        match GmmSpec::random_spec(dim, modes, Stream::new(seed)) {
            Ok(spec) => {
                *out = Box::into_raw(Box::new(sv_gmm(spec)));
                sv_status::Ok
            }
            Err(e) => fail_from(&e),
        }
    })
}

/// Dimension of a mixture; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn sv_gmm_dim(gmm: *const sv_gmm) -> usize {
    if gmm.is_null() {
        0
    } else {
        (*gmm).0.dim
    }
}

/// Number of mixture components; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn sv_gmm_modes(gmm: *const sv_gmm) -> usize {
    if gmm.is_null() {
        0
    } else {
        (*gmm).0.modes()
    }
}

/// Draws `count` points into `out_points` (`count x dim`, row-major).
/// For labeled mixtures, `out_labels` (length `count`) receives the class
/// of each point when non-null; it must be null for unlabeled mixtures.
#[no_mangle]
pub unsafe extern "C" fn sv_gmm_sample(
    gmm: *const sv_gmm,
    seed: u64,
    count: usize,
    out_points: *mut f64,
    out_labels: *mut u32,
) -> sv_status {
    guarded(|| {
        let gmm = match want_ref(gmm, "gmm") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let flat = match checked_len(count, gmm.0.dim, "out_points") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let out_points = match want_out(out_points, flat, "out_points") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let mut rng = Stream::new(seed).rng();
        let (points, labels) = gmm.0.sample(&mut rng, count);
        out_points.copy_from_slice(points.as_slice().expect("row-major"));
        if !out_labels.is_null() {
            match labels {
                Some(ls) => {
                    slice::from_raw_parts_mut(out_labels, count).copy_from_slice(&ls);
                }
                None => {
                    return fail(
                        sv_status::InvalidArgument,
                        "out_labels given but the mixture is unlabeled",
                    )
                }
            }
        }
        sv_status::Ok
    })
}

/// Exact velocity field of the mixture under `schedule` at `(xt, t)`.
/// `xt` and `out` both have length `dim`, which must match the mixture.
#[no_mangle]
pub unsafe extern "C" fn sv_gmm_exact_velocity(
    gmm: *const sv_gmm,
    schedule: *const sv_schedule,
    t: f64,
    xt: *const f64,
    dim: usize,
    out: *mut f64,
) -> sv_status {
    guarded(|| {
        let gmm = match want_ref(gmm, "gmm") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let schedule = match want_ref(schedule, "schedule") {
            Ok(v) => v,
            Err(s) => return s,
        };
        if dim != gmm.0.dim {
            return fail(
                sv_status::ShapeMismatch,
                &format!("xt has dim {dim}, mixture has dim {}", gmm.0.dim),
            );
        }
        let xt = match want_in(xt, dim, "xt") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let out = match want_out(out, dim, "out") {
            Ok(v) => v,
            Err(s) => return s,
        };
        match gmm.0.exact_velocity(&schedule.0, xt, t) {
            Ok(v) => {
                out.copy_from_slice(&v);
                sv_status::Ok
            }
            Err(e) => fail_from(&e),
        }
    })
}

/// Log-density of the corrupted marginal at `(xt, t)`.
#[no_mangle]
pub unsafe extern "C" fn sv_gmm_log_density(
    gmm: *const sv_gmm,
    schedule: *const sv_schedule,
    t: f64,
    xt: *const f64,
    dim: usize,
    out: *mut f64,
) -> sv_status {
    guarded(|| {
        let gmm = match want_ref(gmm, "gmm") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let schedule = match want_ref(schedule, "schedule") {
            Ok(v) => v,
            Err(s) => return s,
        };
        if dim != gmm.0.dim {
            return fail(
                sv_status::ShapeMismatch,
                &format!("xt has dim {dim}, mixture has dim {}", gmm.0.dim),
            );
        }
        let xt = match want_in(xt, dim, "xt") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let out = match want_mut(out, "out") {
            Ok(v) => v,
            Err(s) => return s,
        };
        match gmm.0.marginal_log_density(&schedule.0, xt, t) {
            Ok(v) => {
                *out = v;
                sv_status::Ok
            }
            Err(e) => fail_from(&e),
        }
    })
}

/// Releases a mixture. Accepts null.
#[no_mangle]
pub unsafe extern "C" fn sv_gmm_free(gmm: *mut sv_gmm) {
    if !gmm.is_null() {
        drop(Box::from_raw(gmm));
    }
}

// ---------------------------------------------------------------------------
// Weighted multi-reference target
// ---------------------------------------------------------------------------

/// Velocity regression target built from a batch of reference points:
/// each reference is weighted by its posterior probability of having
/// produced `xt`, and the weighted average of the per-reference
/// velocities is written to `out` (length `dim`). `refs` is
/// `n_refs x dim`, row-major, with `n_refs >= 1`.
#[no_mangle]
pub unsafe extern "C" fn sv_weighted_target(
    schedule: *const sv_schedule,
    refs: *const f64,
    n_refs: usize,
    dim: usize,
    xt: *const f64,
    t: f64,
    out: *mut f64,
) -> sv_status {
    guarded(|| {
        let schedule = match want_ref(schedule, "schedule") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let flat = match checked_len(n_refs, dim, "refs") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let refs = match want_in(refs, flat, "refs") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let xt = match want_in(xt, dim, "xt") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let out = match want_out(out, dim, "out") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let points = match Array2::from_shape_vec((n_refs, dim), refs.to_vec()) {
            Ok(p) => p,
            Err(e) => return fail(sv_status::ShapeMismatch, &e.to_string()),
        };
        let batch = match ReferenceBatch::new(points) {
            Ok(b) => b,
            Err(e) => return fail_from(&e),
        };
        match stablevm_target(&batch, &schedule.0, xt, t) {
            Ok(v) => {
                out.copy_from_slice(&v);
                sv_status::Ok
            }
            Err(e) => fail_from(&e),
        }
    })
}

// ---------------------------------------------------------------------------
// Reference memory bank
// ---------------------------------------------------------------------------

/// Per-class FIFO store of reference points with classifier-free-guidance
/// label dropout on draws.
pub struct sv_bank(MemoryBank);

/// Bank with `capacity` rows per queue, one queue per class plus an
/// unconditional queue under label `num_classes`, storing `dim`-vectors.
/// `p_cfg` is the probability that a conditional draw is redirected to
/// the unconditional queue.
#[no_mangle]
pub unsafe extern "C" fn sv_bank_new(
    capacity: usize,
    num_classes: u32,
    dim: usize,
    p_cfg: f64,
    out: *mut *mut sv_bank,
) -> sv_status {
    guarded(|| {
        let out = match want_mut(out, "out") {
            Ok(v) => v,
            Err(s) => return s,
        };
        match MemoryBank::new(capacity, num_classes, dim, p_cfg) {
            Ok(b) => {
                *out = Box::into_raw(Box::new(sv_bank(b)));
                sv_status::Ok
            }
            Err(e) => fail_from(&e),
        }
    })
}

/// Pushes one point (length `dim`) into the queue for `label` and into
/// the unconditional queue, evicting the oldest row at capacity.
#[no_mangle]
pub unsafe extern "C" fn sv_bank_push(
    bank: *mut sv_bank,
    x0: *const f64,
    dim: usize,
    label: u32,
) -> sv_status {
    guarded(|| {
        let bank = match want_mut(bank, "bank") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let x0 = match want_in(x0, dim, "x0") {
            Ok(v) => v,
            Err(s) => return s,
        };
        if dim != bank.0.dim() {
            return fail(
                sv_status::ShapeMismatch,
                &format!("x0 has dim {dim}, bank stores dim {}", bank.0.dim()),
            );
        }
        match bank.0.push(x0, label) {
            Ok(()) => sv_status::Ok,
            Err(e) => fail_from(&e),
        }
    })
}

/// Current number of rows queued under `label` (the unconditional queue
/// is label `num_classes`).
#[no_mangle]
pub unsafe extern "C" fn sv_bank_queue_len(
    bank: *const sv_bank,
    label: u32,
    out_len: *mut usize,
) -> sv_status {
    guarded(|| {
        let bank = match want_ref(bank, "bank") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let out_len = match want_mut(out_len, "out_len") {
            Ok(v) => v,
            Err(s) => return s,
        };
        if label > bank.0.num_classes() {
            return fail(
                sv_status::InvalidArgument,
                &format!(
                    "label {label} out of range for {} classes",
                    bank.0.num_classes()
                ),
            );
        }
        *out_len = bank.0.queue_len(label);
        sv_status::Ok
    })
}

/// Label of the unconditional queue (`num_classes`); 0 for null.
#[no_mangle]
pub unsafe extern "C" fn sv_bank_unconditional_label(bank: *const sv_bank) -> u32 {
    if bank.is_null() {
        0
    } else {
        (*bank).0.unconditional_label()
    }
}

/// Snapshot draw: resolves `label` through the guidance coin (a
/// conditional label is redirected to the unconditional queue with
/// probability `p_cfg`), then copies the resolved queue oldest-first into
/// `buf` (`buf_rows x dim`, row-major). Writes the resolved label to
/// `out_label` and the row count to `out_rows`. When `buf_rows` is too
/// small, returns `BufferTooSmall` with the required count in `out_rows`
/// and leaves `buf` untouched; `buf` may be null only in that probing
/// mode.
#[no_mangle]
pub unsafe extern "C" fn sv_bank_draw(
    bank: *const sv_bank,
    label: u32,
    seed: u64,
    buf: *mut f64,
    buf_rows: usize,
    out_label: *mut u32,
    out_rows: *mut usize,
) -> sv_status {
    guarded(|| {
        let bank = match want_ref(bank, "bank") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let out_label = match want_mut(out_label, "out_label") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let out_rows = match want_mut(out_rows, "out_rows") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let mut rng = Stream::new(seed).rng();
        let (effective, batch) = match bank.0.draw(label, &mut rng) {
            Ok(v) => v,
            Err(e) => return fail_from(&e),
        };
        *out_label = effective;
        *out_rows = batch.n();
        if batch.n() > buf_rows {
            return fail(
                sv_status::BufferTooSmall,
                &format!("draw needs {} rows, buffer holds {buf_rows}", batch.n()),
            );
        }
        let flat = match checked_len(batch.n(), bank.0.dim(), "buf") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let buf = match want_out(buf, flat, "buf") {
            Ok(v) => v,
            Err(s) => return s,
        };
        buf.copy_from_slice(batch.points().as_slice().expect("row-major"));
        sv_status::Ok
    })
}

/// Releases a bank. Accepts null.
#[no_mangle]
pub unsafe extern "C" fn sv_bank_free(bank: *mut sv_bank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

// ---------------------------------------------------------------------------
// Sampling plans and end-to-end generation
// ---------------------------------------------------------------------------

/// Integrator for the high-time segment.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum sv_base_kind {
    /// Deterministic probability-flow Euler steps.
    EulerOde = 0,
    /// Stochastic reverse-SDE Euler-Maruyama steps.
    EulerMaruyama = 1,
}

/// Diffusion-coefficient choice for stochastic base steps.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum sv_wt_coefficient {
    /// Coefficient equal to the schedule's noise scale.
    Sigma = 0,
    /// Zero coefficient; the stochastic step degenerates to the
    /// deterministic one.
    Zero = 1,
}

/// A two-regime sampling plan: a base solver from `t_max` down to `xi`,
/// then posterior-transport steps from `xi` down to `t_min`.
pub struct sv_plan(SolverPlan);

/// Plan with the library's default segmentation and integrators.
#[no_mangle]
pub unsafe extern "C" fn sv_plan_default(out: *mut *mut sv_plan) -> sv_status {
    guarded(|| {
        let out = match want_mut(out, "out") {
            Ok(v) => v,
            Err(s) => return s,
        };
        *out = Box::into_raw(Box::new(sv_plan(SolverPlan::default())));
        sv_status::Ok
    })
}

/// Fully specified plan. `xi` splits the two regimes and must lie inside
/// the schedule's clamp window at sampling time; `high_steps` counts base
/// steps on `[xi, t_max]`, `low_steps` transport steps on `[t_min, xi]`.
/// A base-only plan sets `low_steps` to 0 with `xi` equal to the
/// schedule's `t_min`, so the base segment covers the whole window.
/// `f_beta` in `[0, 1]` is the noise fraction of transport steps. Times
/// are spaced uniformly within each segment. Validation that depends on
/// the schedule happens when the plan is used.
#[no_mangle]
pub unsafe extern "C" fn sv_plan_new(
    xi: f64,
    high_steps: usize,
    low_steps: usize,
    base: sv_base_kind,
    f_beta: f64,
    w_t: sv_wt_coefficient,
    out: *mut *mut sv_plan,
) -> sv_status {
    guarded(|| {
        let out = match want_mut(out, "out") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let plan = SolverPlan {
            xi,
            high_steps,
            low_steps,
            base: match base {
                sv_base_kind::EulerOde => BaseKind::EulerOde,
                sv_base_kind::EulerMaruyama => BaseKind::EulerMaruyama,
            },
            f_beta,
            w_t: match w_t {
                sv_wt_coefficient::Sigma => WtCoefficient::Sigma,
                sv_wt_coefficient::Zero => WtCoefficient::Zero,
            },
            grid: GridKind::Uniform,
        };
        *out = Box::into_raw(Box::new(sv_plan(plan)));
        sv_status::Ok
    })
}

/// Releases a plan. Accepts null.
#[no_mangle]
pub unsafe extern "C" fn sv_plan_free(plan: *mut sv_plan) {
    if !plan.is_null() {
        drop(Box::from_raw(plan));
    }
}

/// Runs the plan end to end against the mixture's exact velocity field
/// and writes `count` generated points to `out_points` (`count x dim`,
/// row-major). Deterministic in `seed`: each generated row consumes its
/// own substream, so results are independent of thread scheduling.
#[no_mangle]
pub unsafe extern "C" fn sv_sample_oracle(
    gmm: *const sv_gmm,
    schedule: *const sv_schedule,
    plan: *const sv_plan,
    seed: u64,
    count: usize,
    out_points: *mut f64,
) -> sv_status {
    guarded(|| {
        let gmm = match want_ref(gmm, "gmm") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let schedule = match want_ref(schedule, "schedule") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let plan = match want_ref(plan, "plan") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let flat = match checked_len(count, gmm.0.dim, "out_points") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let out_points = match want_out(out_points, flat, "out_points") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let source = OracleVelocity::new(&gmm.0, schedule.0);
        match sample(&schedule.0, &plan.0, &source, Stream::new(seed), count) {
            Ok(points) => {
                out_points.copy_from_slice(points.as_slice().expect("row-major"));
                sv_status::Ok
            }
            Err(e) => fail_from(&e),
        }
    })
}
