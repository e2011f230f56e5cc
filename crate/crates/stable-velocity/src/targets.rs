//! Training targets and noisy-input construction.
//!
//! # Mathematical framework
//!
//! Conditional flow matching regresses the network on the conditional
//! velocity of a single clean point. With a reference batch
//! `{x0^1, ..., x0^n}` the multi-reference target replaces it with the
//! self-normalised importance-weighted average
//!
//! ```text
//!     v_hat(x_t) = sum_k softmax_k( log p_t(x_t | x0^k) ) v_t(x_t | x0^k),
//!     log p_t(x_t | x0^k) = -|x_t - alpha_t x0^k|^2 / (2 sigma_t^2),
//! ```
//!
//! the Gaussian normalising constant cancelling under self-normalisation.
//! The noisy input is drawn from the composite path: a uniformly chosen
//! reference is corrupted forward ([`sample_gmm_path`]). The baseline
//! variant ([`stf_target`]) applies the identical weighted average but
//! draws the noisy input from the conditional path of the first reference
//! only, which biases the input law; the two are distinguished by a
//! Kolmogorov-Smirnov test in this module's suite.
//!
//! The same weighted average over a large i.i.d. dataset instead of a
//! small batch is the streaming estimator [`snis_velocity`] for the
//! marginal velocity; its self-normalised delta-method standard error is
//! exposed for convergence tests.
//!
//! [`sample_posterior_refs`] draws reference batches from the exact
//! posterior construction (one latent row from `p_t(x0 | x_t)`, the rest
//! i.i.d. from the data distribution). Under that construction the
//! weighted target is an unbiased estimator of the marginal velocity at
//! fixed `x_t`, which is what the Monte Carlo suites verify.

use crate::error::{Error, Result};
use crate::gmm::{GmmSpec, Posterior};
use crate::schedules::{PathSample, Schedule, ScheduleEval};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Row chunk for the streaming dataset estimator; bounds workspace memory
/// independently of the dataset size.
pub const SNIS_CHUNK: usize = 8192;

/// A batch of reference points, one row per reference.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceBatch {
    points: Array2<f64>,
}

impl ReferenceBatch {
    /// Validates and wraps an `n x d` matrix of references.
    pub fn new(points: Array2<f64>) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(Error::Spec("reference batch must have n >= 1 rows".into()));
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::Spec("reference batch contains non-finite values".into()));
        }
        let points = to_standard_layout(points);
        Ok(ReferenceBatch { points })
    }

    pub fn n(&self) -> usize {
        self.points.nrows()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.points.as_slice().expect("standard layout")[i * d..(i + 1) * d]
    }
}

fn to_standard_layout(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        let dim = a.raw_dim();
        Array2::from_shape_vec(dim, a.iter().cloned().collect()).expect("shape preserved")
    }
}

/// Reusable scratch for repeated target evaluations.
#[derive(Debug, Default)]
pub struct TargetWorkspace {
    log_w: Vec<f64>,
}

impl TargetWorkspace {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Draws one noisy sample from the composite reference path: a uniform
/// reference index, then forward corruption of that reference. Returns
/// the path sample and the chosen index.
pub fn sample_gmm_path<R: Rng + ?Sized>(
    batch: &ReferenceBatch,
    schedule: &Schedule,
    t: f64,
    rng: &mut R,
) -> Result<(PathSample, usize)> {
    let ev = schedule.eval(t)?;
    let i = rng.random_range(0..batch.n());
    let x0 = batch.row(i);
    let eps: Vec<f64> = (0..batch.dim())
        .map(|_| StandardNormal.sample(rng))
        .collect();
    let mut xt = vec![0.0; batch.dim()];
    ev.corrupt_into(x0, &eps, &mut xt);
    Ok((
        PathSample {
            x0: x0.to_vec(),
            eps,
            t,
            xt,
        },
        i,
    ))
}

/// Log conditional densities `-|xt - alpha x0^k|^2 / (2 sigma^2)` up to
/// the shared constant, one entry per reference.
fn log_weights_into(batch: &ReferenceBatch, ev: &ScheduleEval, xt: &[f64], out: &mut Vec<f64>) {
    let n = batch.n();
    let d = batch.dim();
    let inv_two_var = 1.0 / (2.0 * ev.sigma * ev.sigma);
    let flat = batch.points.as_slice().expect("standard layout");
    out.clear();
    out.reserve(n);
    for k in 0..n {
        let row = &flat[k * d..(k + 1) * d];
        let mut sq = 0.0;
        for j in 0..d {
            let r = xt[j] - ev.alpha * row[j];
            sq += r * r;
        }
        out.push(-sq * inv_two_var);
    }
}

/// Max-shifted softmax in place.
fn softmax_in_place(w: &mut [f64]) {
    let max = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    debug_assert!(max.is_finite(), "all log-weights non-finite");
    let mut total = 0.0;
    for x in w.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in w.iter_mut() {
        *x /= total;
    }
}

/// Self-normalised softmax weights of the references at `xt`; exposed so
/// invariance properties can be asserted on the weights directly.
pub fn stablevm_weights(
    batch: &ReferenceBatch,
    schedule: &Schedule,
    xt: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    check_dim(batch, xt)?;
    let ev = schedule.eval(t)?;
    let mut w = Vec::new();
    log_weights_into(batch, &ev, xt, &mut w);
    softmax_in_place(&mut w);
    Ok(w)
}

/// Self-normalised importance-weighted velocity target over the batch.
pub fn stablevm_target(
    batch: &ReferenceBatch,
    schedule: &Schedule,
    xt: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    check_dim(batch, xt)?;
    let ev = schedule.eval(t)?;
    let mut ws = TargetWorkspace::new();
    let mut out = vec![0.0; batch.dim()];
    stablevm_target_with(batch, &ev, xt, &mut ws, &mut out);
    Ok(out)
}

/// Allocation-free form of [`stablevm_target`] for hot loops.
///
/// The weighted average of conditional velocities is computed as the
/// conditional velocity of the weighted average reference, which is
/// exact because the conditional velocity is affine in `x0`.
pub fn stablevm_target_with(
    batch: &ReferenceBatch,
    ev: &ScheduleEval,
    xt: &[f64],
    ws: &mut TargetWorkspace,
    out: &mut [f64],
) {
    let d = batch.dim();
    debug_assert_eq!(xt.len(), d);
    debug_assert_eq!(out.len(), d);
    log_weights_into(batch, ev, xt, &mut ws.log_w);
    softmax_in_place(&mut ws.log_w);
    let flat = batch.points.as_slice().expect("standard layout");
    out.fill(0.0);
    for (k, &w) in ws.log_w.iter().enumerate() {
        let row = &flat[k * d..(k + 1) * d];
        for j in 0..d {
            out[j] += w * row[j];
        }
    }
    let x0_bar = out.to_vec();
    ev.cond_velocity_into(xt, &x0_bar, out);
}

/// Baseline draw-and-target: the noisy input comes from the conditional
/// path of the FIRST reference (index 0), while the target applies the
/// same weighted average over all references. Returns `(xt, target)`.
pub fn stf_target<R: Rng + ?Sized>(
    batch: &ReferenceBatch,
    schedule: &Schedule,
    t: f64,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let ev = schedule.eval(t)?;
    let d = batch.dim();
    let x0 = batch.row(0);
    let eps: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let mut xt = vec![0.0; d];
    ev.corrupt_into(x0, &eps, &mut xt);
    let mut ws = TargetWorkspace::new();
    let mut target = vec![0.0; d];
    stablevm_target_with(batch, &ev, &xt, &mut ws, &mut target);
    Ok((xt, target))
}

/// Streaming self-normalised estimate of the marginal velocity over a
/// dataset, processed in chunks of [`SNIS_CHUNK`] rows with a running
/// maximum.
pub fn snis_velocity(
    points: &Array2<f64>,
    schedule: &Schedule,
    xt: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    snis_velocity_with_se(points, schedule, xt, t).map(|(v, _)| v)
}

/// [`snis_velocity`] together with its per-coordinate delta-method
/// standard error
/// `se_j = sqrt( sum_k w_k^2 (v_kj - v_hat_j)^2 )`
/// for self-normalised weights `w_k`.
pub fn snis_velocity_with_se(
    points: &Array2<f64>,
    schedule: &Schedule,
    xt: &[f64],
    t: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = points.nrows();
    let d = points.ncols();
    if n == 0 {
        return Err(Error::Spec("dataset must have N >= 1 rows".into()));
    }
    if xt.len() != d {
        return Err(Error::Shape(format!(
            "xt has dim {}, dataset has {d}",
            xt.len()
        )));
    }
    let ev = schedule.eval(t)?;
    let inv_two_var = 1.0 / (2.0 * ev.sigma * ev.sigma);

    // Running accumulators in units of exp(lw - max): total weight and
    // weighted reference mean. Rescaled whenever a chunk raises the max.
    let mut run_max = f64::NEG_INFINITY;
    let mut sum_w = 0.0;
    let mut sum_wx = vec![0.0; d];
    let mut chunk_lw = Vec::with_capacity(SNIS_CHUNK.min(n));

    let contiguous;
    let flat: &[f64] = match points.as_slice() {
        Some(s) => s,
        None => {
            contiguous = points.iter().cloned().collect::<Vec<f64>>();
            &contiguous
        }
    };

    let mut start = 0;
    while start < n {
        let stop = (start + SNIS_CHUNK).min(n);
        chunk_lw.clear();
        let mut chunk_max = f64::NEG_INFINITY;
        for k in start..stop {
            let row = &flat[k * d..(k + 1) * d];
            let mut sq = 0.0;
            for j in 0..d {
                let r = xt[j] - ev.alpha * row[j];
                sq += r * r;
            }
            let lw = -sq * inv_two_var;
            chunk_max = chunk_max.max(lw);
            chunk_lw.push(lw);
        }
        if chunk_max > run_max {
            let scale = if run_max == f64::NEG_INFINITY {
                0.0
            } else {
                (run_max - chunk_max).exp()
            };
            sum_w *= scale;
            for v in &mut sum_wx {
                *v *= scale;
            }
            run_max = chunk_max;
        }
        for (off, k) in (start..stop).enumerate() {
            let w = (chunk_lw[off] - run_max).exp();
            sum_w += w;
            let row = &flat[k * d..(k + 1) * d];
            for j in 0..d {
                sum_wx[j] += w * row[j];
            }
        }
        start = stop;
    }

    let x0_bar: Vec<f64> = sum_wx.iter().map(|&s| s / sum_w).collect();
    let mut v_hat = vec![0.0; d];
    ev.cond_velocity_into(xt, &x0_bar, &mut v_hat);

    // Second pass for the delta-method error of the weighted average;
    // the conditional velocity is affine in x0 with slope c_t, so the
    // SE of v_hat is |c_t| times the SE of x0_bar.
    let c_t = ev.x0_coeff().abs();
    let mut sum_w2_dev = vec![0.0; d];
    for k in 0..n {
        let row = &flat[k * d..(k + 1) * d];
        let mut sq = 0.0;
        for j in 0..d {
            let r = xt[j] - ev.alpha * row[j];
            sq += r * r;
        }
        let w = (-sq * inv_two_var - run_max).exp() / sum_w;
        for j in 0..d {
            let dev = row[j] - x0_bar[j];
            sum_w2_dev[j] += w * w * dev * dev;
        }
    }
    let se: Vec<f64> = sum_w2_dev.iter().map(|&s| c_t * s.sqrt()).collect();
    Ok((v_hat, se))
}

/// Draws a reference batch for unbiasedness experiments: a latent index
/// `I ~ Uniform[0, n)`, row `I` from the exact posterior `p_t(x0 | xt)`,
/// every other row i.i.d. from the data distribution. Returns the batch
/// and `I`.
pub fn sample_posterior_refs<R: Rng + ?Sized>(
    spec: &GmmSpec,
    schedule: &Schedule,
    xt: &[f64],
    t: f64,
    n: usize,
    rng: &mut R,
) -> Result<(ReferenceBatch, usize)> {
    if n == 0 {
        return Err(Error::Spec("n must be >= 1".into()));
    }
    let post = spec.posterior(schedule, xt, t)?;
    let mut points = Array2::zeros((n, spec.dim));
    let i = sample_posterior_refs_into(spec, &post, rng, &mut points);
    Ok((ReferenceBatch { points }, i))
}

/// Allocation-free form of [`sample_posterior_refs`] writing rows into a
/// preallocated `n x d` matrix, for Monte Carlo loops that fix `(xt, t)`
/// and reuse the posterior across batches.
pub fn sample_posterior_refs_into<R: Rng + ?Sized>(
    spec: &GmmSpec,
    posterior: &Posterior,
    rng: &mut R,
    points: &mut Array2<f64>,
) -> usize {
    let n = points.nrows();
    let d = points.ncols();
    debug_assert_eq!(d, spec.dim);
    let flat = points.as_slice_mut().expect("standard layout");
    let i = rng.random_range(0..n);
    for k in 0..n {
        let row = &mut flat[k * d..(k + 1) * d];
        if k == i {
            posterior.sample_x0_into(rng, row);
        } else {
            spec.sample_into(rng, row);
        }
    }
    i
}

/// Wraps a preallocated matrix as a batch without revalidating rows;
/// used by loops that refill the same buffer.
pub fn batch_from_filled(points: Array2<f64>) -> ReferenceBatch {
    ReferenceBatch {
        points: to_standard_layout(points),
    }
}

fn check_dim(batch: &ReferenceBatch, xt: &[f64]) -> Result<()> {
    if batch.dim() == xt.len() {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "xt has dim {}, batch has {}",
            xt.len(),
            batch.dim()
        )))
    }
}
