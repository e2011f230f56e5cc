//! Sampling machinery: probability-flow Euler, reverse-SDE
//! Euler–Maruyama, posterior-transport steps that are exact on
//! conditional Gaussian paths, clean-point extraction, and the
//! two-regime orchestrator that switches solver at a split time.
//!
//! The transport steps exploit the affine structure of the interpolant:
//! any state decomposes as `xt = alpha_t x0 + sigma_t eps`, and for a
//! velocity field that is (locally) the conditional velocity of a single
//! clean point, the update
//!
//! ```text
//!     x_tau = sigma_tau * [ (1/sigma_t - (sigma'_t/sigma_t) Psi) xt + Psi v ]
//! ```
//!
//! with the integral factor `Psi` below reproduces
//! `alpha_tau x0 + sigma_tau eps` exactly for a step of any size. On
//! multi-modal data the posterior collapses onto one point as `t -> 0`,
//! so the step family stays accurate precisely where fixed-step Euler
//! needs many steps.

use crate::error::{Error, Result};
use crate::gmm::GmmSpec;
use crate::rng::Stream;
use crate::schedules::{Schedule, ScheduleEval, ScheduleKind};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;
use std::sync::OnceLock;

/// Base solver used on the high-noise segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseKind {
    EulerOde,
    EulerMaruyama,
}

/// Diffusion-coefficient choice for the reverse SDE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WtCoefficient {
    /// `w_t = sigma_t`.
    Sigma,
    /// `w_t = 0`; the reverse SDE degenerates to the probability-flow
    /// ODE step.
    Zero,
}

/// Time-grid shape. Uniform spacing within each segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridKind {
    Uniform,
}

/// Two-regime sampling plan: a base solver on `[xi, t_max]`, posterior
/// transport on `[t_min, xi]`, and a final clean-point extraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverPlan {
    /// Split point between the two regimes.
    #[serde(default = "default_xi")]
    pub xi: f64,
    /// Steps on `[xi, t_max]`.
    #[serde(default = "default_high_steps")]
    pub high_steps: usize,
    /// Transport steps on `[t_min, xi]`.
    #[serde(default = "default_low_steps")]
    pub low_steps: usize,
    #[serde(default = "default_base", rename = "base")]
    pub base: BaseKind,
    /// Noise fraction of the transport steps; `0` makes them
    /// deterministic.
    #[serde(default)]
    pub f_beta: f64,
    #[serde(default = "default_w_t", rename = "w_t")]
    pub w_t: WtCoefficient,
    #[serde(default = "default_grid")]
    pub grid: GridKind,
}

fn default_xi() -> f64 {
    0.85
}

fn default_high_steps() -> usize {
    19
}

fn default_low_steps() -> usize {
    9
}

fn default_base() -> BaseKind {
    BaseKind::EulerOde
}

fn default_w_t() -> WtCoefficient {
    WtCoefficient::Sigma
}

fn default_grid() -> GridKind {
    GridKind::Uniform
}

impl Default for SolverPlan {
    fn default() -> Self {
        SolverPlan {
            xi: default_xi(),
            high_steps: default_high_steps(),
            low_steps: default_low_steps(),
            base: default_base(),
            f_beta: 0.0,
            w_t: default_w_t(),
            grid: default_grid(),
        }
    }
}

impl SolverPlan {
    /// Checks the plan against a schedule's integration range.
    pub fn validate(&self, schedule: &Schedule) -> Result<()> {
        schedule.validate()?;
        if !(self.xi >= schedule.t_min && self.xi <= schedule.t_max) {
            return Err(Error::Config(format!(
                "split point xi={} must lie in [{}, {}]",
                self.xi, schedule.t_min, schedule.t_max
            )));
        }
        if self.xi < schedule.t_max && self.high_steps == 0 {
            return Err(Error::Config(format!(
                "high_steps=0 leaves [{}, {}] uncovered",
                self.xi, schedule.t_max
            )));
        }
        if self.xi >= schedule.t_max && self.high_steps > 0 {
            return Err(Error::Config(
                "high_steps > 0 but xi = t_max leaves them no interval".into(),
            ));
        }
        if self.xi > schedule.t_min && self.low_steps == 0 {
            return Err(Error::Config(format!(
                "low_steps=0 leaves [{}, {}] uncovered",
                schedule.t_min, self.xi
            )));
        }
        if self.xi <= schedule.t_min && self.low_steps > 0 {
            return Err(Error::Config(
                "low_steps > 0 but xi = t_min leaves them no interval".into(),
            ));
        }
        if !(self.f_beta >= 0.0 && self.f_beta <= 1.0) {
            return Err(Error::Config(format!(
                "f_beta={} must lie in [0, 1]",
                self.f_beta
            )));
        }
        Ok(())
    }

    /// Strictly decreasing times from `t_max` to `t_min` with `xi` on a
    /// grid boundary; `high_steps + low_steps + 1` points.
    pub fn time_grid(&self, schedule: &Schedule) -> Result<Vec<f64>> {
        self.validate(schedule)?;
        let mut ts = Vec::with_capacity(self.high_steps + self.low_steps + 1);
        for j in 0..=self.high_steps {
            ts.push(lerp(schedule.t_max, self.xi, j, self.high_steps));
        }
        if self.high_steps == 0 && self.xi < schedule.t_max {
            unreachable!("validate rejects this plan");
        }
        for j in 1..=self.low_steps {
            ts.push(lerp(self.xi, schedule.t_min, j, self.low_steps));
        }
        for w in ts.windows(2) {
            if !(w[1] < w[0]) {
                return Err(Error::Solver(format!(
                    "time grid not strictly decreasing at {} -> {}",
                    w[0], w[1]
                )));
            }
        }
        Ok(ts)
    }
}

/// Endpoint-exact linear interpolation from `a` (j=0) to `b` (j=n).
fn lerp(a: f64, b: f64, j: usize, n: usize) -> f64 {
    if j == 0 {
        a
    } else if j == n {
        b
    } else {
        a + (b - a) * (j as f64) / (n as f64)
    }
}

fn check_order(t: f64, tau: f64) -> Result<()> {
    if tau >= t {
        return Err(Error::Solver(format!(
            "time must decrease: step from t={t} to tau={tau}"
        )));
    }
    Ok(())
}

fn check_step_dims(xt: &[f64], v: &[f64]) -> Result<()> {
    if xt.len() != v.len() {
        return Err(Error::Shape(format!(
            "state has dim {}, velocity has dim {}",
            xt.len(),
            v.len()
        )));
    }
    Ok(())
}

/// One probability-flow Euler step: `xt + (tau - t) v`.
pub fn euler_step(schedule: &Schedule, v: &[f64], xt: &[f64], t: f64, tau: f64) -> Result<Vec<f64>> {
    check_order(t, tau)?;
    check_step_dims(xt, v)?;
    schedule.eval(t)?;
    schedule.eval(tau)?;
    let dt = tau - t;
    Ok(xt.iter().zip(v).map(|(&x, &vi)| x + dt * vi).collect())
}

/// One reverse-SDE Euler–Maruyama step, integrating in decreasing time:
/// `xt + dt (v - w_t/2 * score) + sqrt(w_t |dt|) xi` with the score
/// recovered from the velocity.
pub fn euler_maruyama_step<R: Rng>(
    schedule: &Schedule,
    v: &[f64],
    xt: &[f64],
    t: f64,
    tau: f64,
    w_t: WtCoefficient,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_order(t, tau)?;
    check_step_dims(xt, v)?;
    let ev = schedule.eval(t)?;
    schedule.eval(tau)?;
    let dt = tau - t;
    let w = wt_value(&ev, w_t);
    let den = ev.score_denominator(t)?;
    let noise = (w * dt.abs()).sqrt();
    Ok(xt
        .iter()
        .zip(v)
        .map(|(&x, &vi)| {
            let score = (ev.alpha * vi - ev.alpha_dot * x) / (ev.sigma * den);
            let xi: f64 = StandardNormal.sample(rng);
            x + dt * (vi - 0.5 * w * score) + noise * xi
        })
        .collect())
}

fn wt_value(ev: &ScheduleEval, w_t: WtCoefficient) -> f64 {
    match w_t {
        WtCoefficient::Sigma => ev.sigma,
        WtCoefficient::Zero => 0.0,
    }
}

/// Integral factor of the posterior-transport step:
/// `Psi = (1/C_t) * integral_t^tau C(s)/sigma_s ds` with
/// `C(s) = alpha'_s - alpha_s sigma'_s / sigma_s`.
///
/// `C(s)/sigma_s` is the derivative of `alpha_s/sigma_s`, so the
/// integral telescopes; per-schedule closed forms below. Negative for
/// `tau < t`.
pub fn psi_factor(schedule: &Schedule, t: f64, tau: f64) -> Result<f64> {
    check_order(t, tau)?;
    schedule.eval(t)?;
    schedule.eval(tau)?;
    Ok(match schedule.kind {
        // alpha/sigma = 1/t - 1 and C_t = -1/t.
        ScheduleKind::Linear => 1.0 - t / tau,
        // alpha/sigma = cot(pi t / 2) and C_t = -(pi/2)/sin(pi t / 2);
        // the difference of cotangents collapses to a single sine.
        ScheduleKind::VpCosine => {
            (FRAC_PI_2 * (tau - t)).sin() / (FRAC_PI_2 * tau).sin() / FRAC_PI_2
        }
    })
}

/// [`psi_factor`] computed by adaptive 64-node Gauss–Legendre
/// quadrature of `C(s)/sigma_s`. Schedule-agnostic; the closed forms
/// are cross-checked against it.
pub fn psi_factor_quadrature(schedule: &Schedule, t: f64, tau: f64) -> Result<f64> {
    check_order(t, tau)?;
    let ev_t = schedule.eval(t)?;
    schedule.eval(tau)?;
    let f = |s: f64| {
        let ev = schedule.eval_raw(s);
        ev.x0_coeff() / ev.sigma
    };
    // Integrate over [tau, t] (ascending) and negate.
    let whole = gl64_panel(&f, tau, t);
    let integral = -adaptive_gl64(&f, tau, t, whole, 1e-13, 0);
    Ok(integral / ev_t.x0_coeff())
}

fn gl64_nodes() -> &'static [(f64, f64)] {
    static NODES: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    NODES.get_or_init(|| {
        // Nodes and weights on [-1, 1] by Newton iteration on the
        // degree-64 Legendre polynomial.
        let n = 64usize;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            for _ in 0..100 {
                let (p, dp) = legendre_with_derivative(n, x);
                let dx = p / dp;
                x -= dx;
                if dx.abs() < 1e-15 {
                    break;
                }
            }
            let (_, dp) = legendre_with_derivative(n, x);
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            out.push((x, w));
        }
        out
    })
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let dp = (n as f64) * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

fn gl64_panel(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    gl64_nodes()
        .iter()
        .map(|&(x, w)| w * f(mid + half * x))
        .sum::<f64>()
        * half
}

fn adaptive_gl64(f: &impl Fn(f64) -> f64, a: f64, b: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let mid = 0.5 * (a + b);
    let left = gl64_panel(f, a, mid);
    let right = gl64_panel(f, mid, b);
    let refined = left + right;
    if depth >= 48 || (refined - whole).abs() <= tol * refined.abs().max(1.0) {
        refined
    } else {
        adaptive_gl64(f, a, mid, left, tol, depth + 1)
            + adaptive_gl64(f, mid, b, right, tol, depth + 1)
    }
}

/// One posterior-transport ODE step:
/// `sigma_tau [ (1/sigma_t - (sigma'_t/sigma_t) Psi) xt + Psi v ]`.
///
/// Exact for a step of any size when `v` is the conditional velocity of
/// a single clean point; coincides with [`euler_step`] on the linear
/// schedule.
pub fn stablevs_ode_step(
    schedule: &Schedule,
    v: &[f64],
    xt: &[f64],
    t: f64,
    tau: f64,
) -> Result<Vec<f64>> {
    check_step_dims(xt, v)?;
    let (cx, cv) = stablevs_ode_coeffs(schedule, t, tau)?;
    Ok(xt.iter().zip(v).map(|(&x, &vi)| cx * x + cv * vi).collect())
}

fn stablevs_ode_coeffs(schedule: &Schedule, t: f64, tau: f64) -> Result<(f64, f64)> {
    let ev_t = schedule.eval(t)?;
    let ev_tau = schedule.eval(tau)?;
    let psi = psi_factor(schedule, t, tau)?;
    let cx = ev_tau.sigma * (1.0 / ev_t.sigma - ev_t.drift_ratio() * psi);
    let cv = ev_tau.sigma * psi;
    Ok((cx, cv))
}

/// Coefficients of one posterior-transport SDE step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdeCoeffs {
    /// Fraction of the current noise carried through.
    pub rho: f64,
    /// Coefficient on the velocity.
    pub lambda: f64,
    /// Fresh-noise scale `f_beta * sigma_tau`.
    pub beta: f64,
    /// Coefficient on the state: `rho - lambda sigma'_t/sigma_t`.
    pub state_coeff: f64,
}

/// Coefficients for [`stablevs_sde_step`]; exposed so coefficient-level
/// identities (noise-free mean, bounds on `rho`) can be checked
/// directly.
pub fn stablevs_sde_coeffs(
    schedule: &Schedule,
    t: f64,
    tau: f64,
    f_beta: f64,
) -> Result<SdeCoeffs> {
    check_order(t, tau)?;
    if !(0.0..=1.0).contains(&f_beta) {
        return Err(Error::Solver(format!(
            "f_beta={f_beta} must lie in [0, 1]"
        )));
    }
    let ev_t = schedule.eval(t)?;
    let ev_tau = schedule.eval(tau)?;
    let beta = f_beta * ev_tau.sigma;
    let rho = ((ev_tau.sigma * ev_tau.sigma - beta * beta) / (ev_t.sigma * ev_t.sigma)).sqrt();
    let lambda = (ev_tau.alpha - ev_t.alpha * rho) / ev_t.x0_coeff();
    Ok(SdeCoeffs {
        rho,
        lambda,
        beta,
        state_coeff: rho - lambda * ev_t.drift_ratio(),
    })
}

/// One posterior-transport SDE step: splits the target noise level
/// `sigma_tau` between carried-through noise (`rho`) and a fresh
/// Gaussian draw (`beta`), keeping the conditional marginal
/// `N(alpha_tau x0, sigma_tau^2 I)` exact for any step size. `f_beta=0`
/// reduces to [`stablevs_ode_step`]; `f_beta=1` resamples the noise
/// entirely around the extracted clean point.
pub fn stablevs_sde_step<R: Rng>(
    schedule: &Schedule,
    v: &[f64],
    xt: &[f64],
    t: f64,
    tau: f64,
    f_beta: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_step_dims(xt, v)?;
    let c = stablevs_sde_coeffs(schedule, t, tau, f_beta)?;
    Ok(xt
        .iter()
        .zip(v)
        .map(|(&x, &vi)| {
            let xi: f64 = StandardNormal.sample(rng);
            c.state_coeff * x + c.lambda * vi + c.beta * xi
        })
        .collect())
}

/// Clean point implied by a velocity reading:
/// `(v - (sigma'_t/sigma_t) xt) / C_t`. Inverts the conditional
/// velocity; with an exact velocity field it returns the posterior mean
/// `E[x0 | xt]`.
pub fn extract_x0(schedule: &Schedule, v: &[f64], xt: &[f64], t: f64) -> Result<Vec<f64>> {
    check_step_dims(xt, v)?;
    let ev = schedule.eval(t)?;
    let c = ev.x0_coeff();
    if c == 0.0 || !c.is_finite() {
        return Err(Error::Solver(format!(
            "clean-point extraction is singular at t={t} (coefficient {c})"
        )));
    }
    let r = ev.drift_ratio();
    Ok(xt.iter().zip(v).map(|(&x, &vi)| (vi - r * x) / c).collect())
}

/// Anything that can evaluate a velocity field at `(xt, t)`.
pub trait VelocitySource {
    fn dim(&self) -> usize;
    fn velocity(&self, xt: &[f64], t: f64, out: &mut [f64]) -> Result<()>;
}

/// Exact mixture velocity; the reference source for solver checks.
#[derive(Debug, Clone)]
pub struct OracleVelocity<'a> {
    spec: &'a GmmSpec,
    schedule: Schedule,
}

impl<'a> OracleVelocity<'a> {
    pub fn new(spec: &'a GmmSpec, schedule: Schedule) -> Self {
        OracleVelocity { spec, schedule }
    }
}

impl VelocitySource for OracleVelocity<'_> {
    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn velocity(&self, xt: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        let ev = self.schedule.eval(t)?;
        self.spec.exact_velocity_with(&ev, xt, out);
        Ok(())
    }
}

/// Conditional velocity toward one fixed clean point; the exact field
/// for single-point data.
#[derive(Debug, Clone)]
pub struct PointVelocity {
    x0: Vec<f64>,
    schedule: Schedule,
}

impl PointVelocity {
    pub fn new(x0: Vec<f64>, schedule: Schedule) -> Self {
        PointVelocity { x0, schedule }
    }
}

impl VelocitySource for PointVelocity {
    fn dim(&self) -> usize {
        self.x0.len()
    }

    fn velocity(&self, xt: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        let ev = self.schedule.eval(t)?;
        ev.cond_velocity_into(xt, &self.x0, out);
        Ok(())
    }
}

/// Velocity field defined by a closure; handy for tests and adapters.
pub struct FnVelocity<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64], f64, &mut [f64]) -> Result<()>> FnVelocity<F> {
    pub fn new(dim: usize, f: F) -> Self {
        FnVelocity { dim, f }
    }
}

impl<F: Fn(&[f64], f64, &mut [f64]) -> Result<()>> VelocitySource for FnVelocity<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, xt: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        (self.f)(xt, t, out)
    }
}

/// Per-step update, with coefficients precomputed once per grid edge
/// (they depend on times only, not on the state).
enum StepOp {
    Euler {
        dt: f64,
    },
    EulerMaruyama {
        dt: f64,
        w: f64,
        noise: f64,
        alpha: f64,
        alpha_dot: f64,
        sigma_den: f64,
    },
    Transport {
        cx: f64,
        cv: f64,
    },
    TransportNoisy {
        cx: f64,
        cv: f64,
        beta: f64,
    },
}

impl StepOp {
    fn apply<R: Rng>(&self, x: &mut [f64], v: &[f64], rng: &mut R) {
        match *self {
            StepOp::Euler { dt } => {
                for (xi, &vi) in x.iter_mut().zip(v) {
                    *xi += dt * vi;
                }
            }
            StepOp::EulerMaruyama {
                dt,
                w,
                noise,
                alpha,
                alpha_dot,
                sigma_den,
            } => {
                for (xi, &vi) in x.iter_mut().zip(v) {
                    let score = (alpha * vi - alpha_dot * *xi) / sigma_den;
                    let z: f64 = StandardNormal.sample(rng);
                    *xi += dt * (vi - 0.5 * w * score) + noise * z;
                }
            }
            StepOp::Transport { cx, cv } => {
                for (xi, &vi) in x.iter_mut().zip(v) {
                    *xi = cx * *xi + cv * vi;
                }
            }
            StepOp::TransportNoisy { cx, cv, beta } => {
                for (xi, &vi) in x.iter_mut().zip(v) {
                    let z: f64 = StandardNormal.sample(rng);
                    *xi = cx * *xi + cv * vi + beta * z;
                }
            }
        }
    }
}

/// Draws `count` endpoints by running the plan end to end: prior
/// `sigma_{t_max} * N(0, I)` at `t_max`, the base solver down to `xi`,
/// posterior transport down to `t_min`, and clean-point extraction at
/// `t_min`.
///
/// Deterministic given the stream: path `p` uses substream
/// `stream.at(p)`, drawing its `d` prior normals first and then any
/// per-step noise in grid order (stochastic steps only; `f_beta = 0`
/// transport steps and Euler steps draw nothing).
pub fn sample<S: VelocitySource + Sync>(
    schedule: &Schedule,
    plan: &SolverPlan,
    source: &S,
    stream: Stream,
    count: usize,
) -> Result<Array2<f64>> {
    let grid = plan.time_grid(schedule)?;
    let d = source.dim();
    if d == 0 || count == 0 {
        return Err(Error::Shape(format!(
            "sampling needs positive dimension and count, got dim {d}, count {count}"
        )));
    }
    let ops = build_ops(schedule, plan, &grid)?;
    let t_end = *grid.last().expect("grid is nonempty");
    let sigma_start = schedule.eval(grid[0])?.sigma;
    let ev_end = schedule.eval(t_end)?;
    let c_end = ev_end.x0_coeff();
    if c_end == 0.0 || !c_end.is_finite() {
        return Err(Error::Solver(format!(
            "clean-point extraction is singular at t={t_end} (coefficient {c_end})"
        )));
    }
    let r_end = ev_end.drift_ratio();

    let mut out = Array2::zeros((count, d));
    out.as_slice_mut()
        .expect("freshly allocated array is standard layout")
        .par_chunks_mut(d)
        .enumerate()
        .try_for_each(|(p, row)| -> Result<()> {
            let mut rng = stream.at(p as u64).rng();
            let mut x = vec![0.0; d];
            for xi in x.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *xi = sigma_start * z;
            }
            let mut v = vec![0.0; d];
            for (j, op) in ops.iter().enumerate() {
                source.velocity(&x, grid[j], &mut v).map_err(|e| {
                    Error::Solver(format!("velocity source failed at step {j} (t={}): {e}", grid[j]))
                })?;
                op.apply(&mut x, &v, &mut rng);
            }
            source.velocity(&x, t_end, &mut v).map_err(|e| {
                Error::Solver(format!(
                    "velocity source failed at final extraction (t={t_end}): {e}"
                ))
            })?;
            for (ri, (&xi, &vi)) in row.iter_mut().zip(x.iter().zip(&v)) {
                *ri = (vi - r_end * xi) / c_end;
            }
            Ok(())
        })?;
    Ok(out)
}

fn build_ops(schedule: &Schedule, plan: &SolverPlan, grid: &[f64]) -> Result<Vec<StepOp>> {
    let mut ops = Vec::with_capacity(grid.len() - 1);
    for (j, w) in grid.windows(2).enumerate() {
        let (t, tau) = (w[0], w[1]);
        if j < plan.high_steps {
            match plan.base {
                BaseKind::EulerOde => ops.push(StepOp::Euler { dt: tau - t }),
                BaseKind::EulerMaruyama => {
                    let ev = schedule.eval(t)?;
                    let dt = tau - t;
                    let wv = wt_value(&ev, plan.w_t);
                    let den = ev.score_denominator(t)?;
                    ops.push(StepOp::EulerMaruyama {
                        dt,
                        w: wv,
                        noise: (wv * dt.abs()).sqrt(),
                        alpha: ev.alpha,
                        alpha_dot: ev.alpha_dot,
                        sigma_den: ev.sigma * den,
                    });
                }
            }
        } else if plan.f_beta == 0.0 {
            let (cx, cv) = stablevs_ode_coeffs(schedule, t, tau)?;
            ops.push(StepOp::Transport { cx, cv });
        } else {
            let c = stablevs_sde_coeffs(schedule, t, tau, plan.f_beta)?;
            ops.push(StepOp::TransportNoisy {
                cx: c.state_coeff,
                cv: c.lambda,
                beta: c.beta,
            });
        }
    }
    Ok(ops)
}
