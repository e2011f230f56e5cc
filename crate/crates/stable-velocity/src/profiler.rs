//! Monte Carlo profiling of velocity-target variance.
//!
//! The central quantity is how far the per-sample regression target
//! sits from the marginal velocity field, `E ||v(xt|x0) - v(xt)||^2`,
//! as a function of time — estimated either against the exact mixture
//! field (oracle mode) or against a self-normalized weighted average
//! over a finite dataset (empirical mode). The weighted-average
//! variant replaces the conditional target with the posterior-weighted
//! mean over a reference batch drawn by the composite posterior
//! procedure, which is how its variance reduction is measured. Curves
//! over a time grid feed the split-point estimate used to pick the
//! crossover time for two-stage schedules, and [`second_moment_mse`]
//! scores any velocity field against the exact one.

use crate::error::{Error, Result};
use crate::gmm::GmmSpec;
use crate::rng::Stream;
use crate::schedules::Schedule;
use crate::solvers::VelocitySource;
use crate::targets::{
    sample_posterior_refs, stablevm_target_with, ReferenceBatch, TargetWorkspace,
};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Default probe count for conditional-target variance estimates.
pub const DEFAULT_CFM_PROBES: usize = 4096;
/// Default probe count for weighted-target variance estimates (each
/// probe redraws a full reference set, so they cost `n` times more).
pub const DEFAULT_STABLEVM_PROBES: usize = 1024;

/// Monte Carlo budget: `probes` outer draws of `xt`, and `inner`
/// repetitions per probe (fresh noise for the conditional estimator,
/// fresh reference sets for the weighted estimator).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct McBudget {
    pub probes: usize,
    #[serde(default = "default_inner")]
    pub inner: usize,
}

fn default_inner() -> usize {
    1
}

impl Default for McBudget {
    fn default() -> Self {
        McBudget {
            probes: DEFAULT_CFM_PROBES,
            inner: 1,
        }
    }
}

impl McBudget {
    pub fn new(probes: usize) -> Self {
        McBudget { probes, inner: 1 }
    }

    pub fn stablevm_default() -> Self {
        McBudget {
            probes: DEFAULT_STABLEVM_PROBES,
            inner: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.probes < 2 {
            return Err(Error::Config(
                "variance estimation needs at least 2 probes".into(),
            ));
        }
        if self.inner == 0 {
            return Err(Error::Config("inner draw count must be positive".into()));
        }
        Ok(())
    }
}

/// How curve values are scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Raw,
    /// Divide by the square root of the data dimension.
    SqrtD,
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalization::Raw => "raw",
            Normalization::SqrtD => "sqrt_d",
        })
    }
}

/// Which marginal-velocity reference the estimate is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// Self-normalized weighted average over a finite dataset.
    EmpiricalSnis,
    /// Exact mixture velocity.
    Oracle,
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimatorKind::EmpiricalSnis => "empirical_snis",
            EstimatorKind::Oracle => "oracle",
        })
    }
}

/// Data source for the conditional-target variance: either an exact
/// mixture (clean points sampled from it, marginal velocity in closed
/// form) or a finite dataset (clean points drawn from its rows,
/// marginal velocity via the self-normalized weighted average over
/// all rows).
#[derive(Debug, Clone, Copy)]
pub enum CfmSource<'a> {
    Oracle(&'a GmmSpec),
    Empirical(&'a ReferenceBatch),
}

impl CfmSource<'_> {
    pub fn dim(&self) -> usize {
        match self {
            CfmSource::Oracle(spec) => spec.dim,
            CfmSource::Empirical(batch) => batch.dim(),
        }
    }

    pub fn estimator(&self) -> EstimatorKind {
        match self {
            CfmSource::Oracle(_) => EstimatorKind::Oracle,
            CfmSource::Empirical(_) => EstimatorKind::EmpiricalSnis,
        }
    }
}

/// Per-probe squared distances between the conditional target and the
/// marginal velocity at `t`, one value per probe (inner draws already
/// averaged). The building block for the point and curve estimators.
fn cfm_probe_values(
    source: &CfmSource<'_>,
    schedule: &Schedule,
    t: f64,
    mc: &McBudget,
    stream: Stream,
) -> Result<Vec<f64>> {
    mc.validate()?;
    let ev = schedule.eval(t)?;
    let d = source.dim();
    (0..mc.probes)
        .into_par_iter()
        .map_init(
            || (TargetWorkspace::new(), vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]),
            |(ws, x0, eps, xt, v_cond, v_marg), p| -> Result<f64> {
                let mut rng = stream.at(p as u64).rng();
                match source {
                    CfmSource::Oracle(spec) => {
                        spec.sample_into(&mut rng, x0);
                    }
                    CfmSource::Empirical(batch) => {
                        let row = rng.random_range(0..batch.n());
                        x0.copy_from_slice(batch.row(row));
                    }
                }
                let mut acc = 0.0;
                for _ in 0..mc.inner {
                    for e in eps.iter_mut() {
                        *e = StandardNormal.sample(&mut rng);
                    }
                    ev.corrupt_into(x0, eps, xt);
                    ev.cond_velocity_into(xt, x0, v_cond);
                    match source {
                        CfmSource::Oracle(spec) => {
                            spec.exact_velocity_with(&ev, xt, v_marg);
                        }
                        CfmSource::Empirical(batch) => {
                            stablevm_target_with(batch, &ev, xt, ws, v_marg);
                        }
                    }
                    acc += v_cond
                        .iter()
                        .zip(v_marg.iter())
                        .map(|(&a, &b)| (a - b) * (a - b))
                        .sum::<f64>();
                }
                Ok(acc / mc.inner as f64)
            },
        )
        .collect()
}

/// Per-probe squared distances between the weighted-average target
/// over `n` posterior-composite references and the exact marginal
/// velocity at `t`.
fn stablevm_probe_values(
    spec: &GmmSpec,
    schedule: &Schedule,
    t: f64,
    n: usize,
    mc: &McBudget,
    stream: Stream,
) -> Result<Vec<f64>> {
    mc.validate()?;
    if n == 0 {
        return Err(Error::Spec("reference count must be at least 1".into()));
    }
    let ev = schedule.eval(t)?;
    let d = spec.dim;
    (0..mc.probes)
        .into_par_iter()
        .map_init(
            || (TargetWorkspace::new(), vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]),
            |(ws, x0, eps, xt, target, v_marg), p| -> Result<f64> {
                let mut rng = stream.at(p as u64).rng();
                spec.sample_into(&mut rng, x0);
                for e in eps.iter_mut() {
                    *e = StandardNormal.sample(&mut rng);
                }
                ev.corrupt_into(x0, eps, xt);
                spec.exact_velocity_with(&ev, xt, v_marg);
                let mut acc = 0.0;
                for _ in 0..mc.inner {
                    let (refs, _) = sample_posterior_refs(spec, schedule, xt, t, n, &mut rng)?;
                    stablevm_target_with(&refs, &ev, xt, ws, target);
                    acc += target
                        .iter()
                        .zip(v_marg.iter())
                        .map(|(&a, &b)| (a - b) * (a - b))
                        .sum::<f64>();
                }
                Ok(acc / mc.inner as f64)
            },
        )
        .collect()
}

fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let p = values.len() as f64;
    let mean = values.iter().sum::<f64>() / p;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (p - 1.0);
    (mean, (var / p).sqrt())
}

/// Variance of the conditional velocity target around the marginal
/// field at `t`: a Monte Carlo estimate of `E ||v(xt|x0) - v(xt)||^2`
/// with `(x0, xt)` drawn along the forward path, plus its standard
/// error.
pub fn variance_cfm(
    source: &CfmSource<'_>,
    schedule: &Schedule,
    t: f64,
    mc: &McBudget,
    stream: Stream,
) -> Result<(f64, f64)> {
    let values = cfm_probe_values(source, schedule, t, mc, stream)?;
    Ok(mean_and_stderr(&values))
}

/// Variance of the `n`-reference weighted-average target around the
/// exact marginal field at `t`, references drawn by the posterior
/// composite procedure, plus its standard error.
pub fn variance_stablevm(
    spec: &GmmSpec,
    schedule: &Schedule,
    t: f64,
    n: usize,
    mc: &McBudget,
    stream: Stream,
) -> Result<(f64, f64)> {
    let values = stablevm_probe_values(spec, schedule, t, n, mc, stream)?;
    Ok(mean_and_stderr(&values))
}

/// A variance profile over a time grid, with per-point Monte Carlo
/// standard errors and 15%/85% probe quantiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceCurve {
    pub t: Vec<f64>,
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
    pub q15: Vec<f64>,
    pub q85: Vec<f64>,
    pub normalization: Normalization,
    pub estimator: EstimatorKind,
    pub dim: usize,
    /// Reference count for weighted-target curves; `None` for
    /// conditional-target curves.
    pub n_refs: Option<usize>,
}

impl VarianceCurve {
    pub fn validate(&self) -> Result<()> {
        let len = self.t.len();
        if len == 0 {
            return Err(Error::Spec("curve has no grid points".into()));
        }
        if [
            self.values.len(),
            self.stderr.len(),
            self.q15.len(),
            self.q85.len(),
        ]
        .iter()
        .any(|&l| l != len)
        {
            return Err(Error::Shape("curve column lengths differ".into()));
        }
        if self.t.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Spec("curve grid must be strictly increasing".into()));
        }
        if self.values.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Spec("curve values must be nonnegative".into()));
        }
        if self.stderr.iter().any(|&s| !(s >= 0.0)) {
            return Err(Error::Spec("curve stderr must be nonnegative".into()));
        }
        Ok(())
    }

    /// CSV rows `(t, value, stderr, q15, q85, normalization,
    /// estimator, d, n)`; `n` is empty for conditional-target curves.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,value,stderr,q15,q85,normalization,estimator,d,n\n");
        let n_str = self.n_refs.map(|n| n.to_string()).unwrap_or_default();
        for i in 0..self.t.len() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                self.t[i],
                self.values[i],
                self.stderr[i],
                self.q15[i],
                self.q85[i],
                self.normalization,
                self.estimator,
                self.dim,
                n_str
            ));
        }
        out
    }
}

/// Linearly interpolated order statistic of already-sorted values
/// (the common "type 7" definition).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config("time grid is empty".into()));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("time grid must be strictly increasing".into()));
    }
    Ok(())
}

/// Inclusive uniform grid of `count` points from `start` to `stop`.
pub fn uniform_grid(start: f64, stop: f64, count: usize) -> Result<Vec<f64>> {
    if count < 2 || !(start < stop) {
        return Err(Error::Config(format!(
            "grid needs at least 2 points and start < stop (got {start}:{stop}:{count})"
        )));
    }
    Ok((0..count)
        .map(|i| {
            let u = i as f64 / (count - 1) as f64;
            start + (stop - start) * u
        })
        .collect())
}

fn curve_from_point_values(
    grid: &[f64],
    per_point: Vec<Vec<f64>>,
    normalization: Normalization,
    estimator: EstimatorKind,
    dim: usize,
    n_refs: Option<usize>,
) -> VarianceCurve {
    let scale = match normalization {
        Normalization::Raw => 1.0,
        Normalization::SqrtD => 1.0 / (dim as f64).sqrt(),
    };
    let mut values = Vec::with_capacity(grid.len());
    let mut stderr = Vec::with_capacity(grid.len());
    let mut q15 = Vec::with_capacity(grid.len());
    let mut q85 = Vec::with_capacity(grid.len());
    for mut probe_vals in per_point {
        let (mean, se) = mean_and_stderr(&probe_vals);
        probe_vals.sort_by(|a, b| a.partial_cmp(b).expect("finite probe values"));
        values.push(mean * scale);
        stderr.push(se * scale);
        q15.push(quantile_sorted(&probe_vals, 0.15) * scale);
        q85.push(quantile_sorted(&probe_vals, 0.85) * scale);
    }
    VarianceCurve {
        t: grid.to_vec(),
        values,
        stderr,
        q15,
        q85,
        normalization,
        estimator,
        dim,
        n_refs,
    }
}

/// Conditional-target variance profile over a time grid, one
/// [`variance_cfm`] estimate per point. Grid points parallelize, and
/// probes within a point parallelize, over deterministic substreams.
pub fn variance_curve(
    source: &CfmSource<'_>,
    schedule: &Schedule,
    grid: &[f64],
    mc: &McBudget,
    normalization: Normalization,
    stream: Stream,
) -> Result<VarianceCurve> {
    check_grid(grid)?;
    let per_point: Vec<Vec<f64>> = grid
        .par_iter()
        .enumerate()
        .map(|(gi, &t)| cfm_probe_values(source, schedule, t, mc, stream.at(gi as u64)))
        .collect::<Result<Vec<_>>>()?;
    let curve = curve_from_point_values(
        grid,
        per_point,
        normalization,
        source.estimator(),
        source.dim(),
        None,
    );
    curve.validate()?;
    Ok(curve)
}

/// Weighted-target variance profile over a time grid, one
/// [`variance_stablevm`] estimate per point at reference count `n`.
pub fn stablevm_curve(
    spec: &GmmSpec,
    schedule: &Schedule,
    grid: &[f64],
    n: usize,
    mc: &McBudget,
    normalization: Normalization,
    stream: Stream,
) -> Result<VarianceCurve> {
    check_grid(grid)?;
    let per_point: Vec<Vec<f64>> = grid
        .par_iter()
        .enumerate()
        .map(|(gi, &t)| stablevm_probe_values(spec, schedule, t, n, mc, stream.at(gi as u64)))
        .collect::<Result<Vec<_>>>()?;
    let curve = curve_from_point_values(
        grid,
        per_point,
        normalization,
        EstimatorKind::Oracle,
        spec.dim,
        Some(n),
    );
    curve.validate()?;
    Ok(curve)
}

/// Smallest time at which the curve reaches `fraction` of its maximum.
/// The crossing is linearly interpolated between the bracketing grid
/// points, except when the preceding value is exactly zero (the curve
/// switches on from an unmeasured-zero region, where interpolation
/// would invent variance): there the qualifying grid point itself is
/// returned.
pub fn split_point(curve: &VarianceCurve, fraction: f64) -> Result<f64> {
    curve.validate()?;
    if !(0.0..1.0).contains(&fraction) || fraction <= 0.0 {
        return Err(Error::Config(format!(
            "fraction {fraction} must lie strictly inside (0, 1)"
        )));
    }
    let max = curve.values.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(Error::Spec(
            "split point undefined: curve is identically zero".into(),
        ));
    }
    let threshold = fraction * max;
    let i = curve
        .values
        .iter()
        .position(|&v| v >= threshold)
        .expect("max reaches threshold");
    if i == 0 || curve.values[i - 1] <= 0.0 {
        return Ok(curve.t[i]);
    }
    let (t0, t1) = (curve.t[i - 1], curve.t[i]);
    let (v0, v1) = (curve.values[i - 1], curve.values[i]);
    Ok(t0 + (threshold - v0) / (v1 - v0) * (t1 - t0))
}

/// Half mean squared error of any velocity field against the exact
/// mixture velocity at `t`, over `probes` marginal draws `xt ~ p_t`:
/// `0.5 E ||v_source(xt, t) - v_exact(xt)||^2`.
pub fn second_moment_mse<S: VelocitySource + Sync>(
    source: &S,
    oracle: &GmmSpec,
    schedule: &Schedule,
    t: f64,
    probes: usize,
    stream: Stream,
) -> Result<f64> {
    if source.dim() != oracle.dim {
        return Err(Error::Shape(format!(
            "velocity source has dim {}, oracle has {}",
            source.dim(),
            oracle.dim
        )));
    }
    if probes == 0 {
        return Err(Error::Config("probe count must be positive".into()));
    }
    let ev = schedule.eval(t)?;
    let d = oracle.dim;
    let values: Vec<f64> = (0..probes)
        .into_par_iter()
        .map_init(
            || (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]),
            |(x0, eps, xt, v_src, v_exact), p| -> Result<f64> {
                let mut rng = stream.at(p as u64).rng();
                oracle.sample_into(&mut rng, x0);
                for e in eps.iter_mut() {
                    *e = StandardNormal.sample(&mut rng);
                }
                ev.corrupt_into(x0, eps, xt);
                source.velocity(xt, t, v_src)?;
                oracle.exact_velocity_with(&ev, xt, v_exact);
                Ok(v_src
                    .iter()
                    .zip(v_exact.iter())
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum::<f64>())
            },
        )
        .collect::<Result<Vec<_>>>()?;
    Ok(0.5 * values.iter().sum::<f64>() / probes as f64)
}
