//! Interpolant coefficient schedules and pointwise velocity/score algebra.
//!
//! # Mathematical framework
//!
//! A schedule assigns to every time `t` in `[0, 1]` a pair of coefficients
//! `(alpha_t, sigma_t)` defining the corruption
//!
//! ```text
//!     x_t = alpha_t * x_0 + sigma_t * eps,      eps ~ N(0, I),
//! ```
//!
//! with `alpha_0 = 1, sigma_0 = 0` (clean data) and `alpha_1 = 0,
//! sigma_1 = 1` (pure noise). Two schedules are supported:
//!
//! * `linear`:    `alpha_t = 1 - t`,        `sigma_t = t`
//! * `vp-cosine`: `alpha_t = cos(pi t / 2)`, `sigma_t = sin(pi t / 2)`
//!
//! Conditioned on the clean point `x_0`, the corrupted sample moves with
//! the conditional velocity
//!
//! ```text
//!     v_t(x_t | x_0) = (sigma'_t / sigma_t) (x_t - alpha_t x_0) + alpha'_t x_0,
//! ```
//!
//! which is affine in `x_0` with coefficient
//! `c_t = alpha'_t - alpha_t sigma'_t / sigma_t` (the quantity
//! [`ScheduleEval::x0_coeff`]). Velocity and score of the corrupted
//! marginal are affinely related at every fixed `(x_t, t)`:
//!
//! ```text
//!     score = (alpha v - alpha' x_t) / (sigma (alpha' sigma - alpha sigma')),
//! ```
//!
//! and the denominator is constant in `t` for both kinds (`-1` for linear,
//! `-pi/2` for vp-cosine), so the conversion never degenerates on the open
//! interval.
//!
//! Evaluation is restricted to `[t_min, t_max]` with `t_min > 0` and
//! `t_max < 1`; at the exact endpoints `sigma_t = 0` or `alpha_t = 0`
//! make the expressions above singular. [`Schedule::eval_raw`] bypasses
//! the range check for boundary inspection.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Default lower time clamp.
pub const DEFAULT_T_MIN: f64 = 1e-3;
/// Default upper time clamp.
pub const DEFAULT_T_MAX: f64 = 1.0 - 1e-3;

/// The two supported coefficient schedules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleKind {
    #[serde(rename = "linear")]
    Linear,
    #[serde(rename = "vp-cosine")]
    VpCosine,
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScheduleKind::Linear => write!(f, "linear"),
            ScheduleKind::VpCosine => write!(f, "vp-cosine"),
        }
    }
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "vp-cosine" => Ok(ScheduleKind::VpCosine),
            other => Err(Error::Config(format!(
                "unknown schedule kind {other:?}; expected \"linear\" or \"vp-cosine\""
            ))),
        }
    }
}

/// An interpolant schedule with its evaluation window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    #[serde(default = "default_t_min")]
    pub t_min: f64,
    #[serde(default = "default_t_max")]
    pub t_max: f64,
}

fn default_t_min() -> f64 {
    DEFAULT_T_MIN
}

fn default_t_max() -> f64 {
    DEFAULT_T_MAX
}

/// Schedule coefficients and derivatives at a fixed time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleEval {
    pub alpha: f64,
    pub sigma: f64,
    pub alpha_dot: f64,
    pub sigma_dot: f64,
    /// Signal-to-noise ratio `alpha^2 / sigma^2`.
    pub snr: f64,
}

/// One corrupted sample together with the ingredients that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub x0: Vec<f64>,
    pub eps: Vec<f64>,
    pub t: f64,
    pub xt: Vec<f64>,
}

impl Schedule {
    /// Builds a schedule after validating the clamp window.
    pub fn new(kind: ScheduleKind, t_min: f64, t_max: f64) -> Result<Self> {
        let s = Schedule { kind, t_min, t_max };
        s.validate()?;
        Ok(s)
    }

    /// Linear schedule with default clamps.
    pub fn linear() -> Self {
        Schedule {
            kind: ScheduleKind::Linear,
            t_min: DEFAULT_T_MIN,
            t_max: DEFAULT_T_MAX,
        }
    }

    /// Variance-preserving cosine schedule with default clamps.
    pub fn vp_cosine() -> Self {
        Schedule {
            kind: ScheduleKind::VpCosine,
            t_min: DEFAULT_T_MIN,
            t_max: DEFAULT_T_MAX,
        }
    }

    /// Checks the clamp window; deserialized values pass through here.
    pub fn validate(&self) -> Result<()> {
        if !(self.t_min > 0.0 && self.t_min < 0.5) {
            return Err(Error::Schedule(format!(
                "t_min={} must lie in (0, 0.5)",
                self.t_min
            )));
        }
        if !(self.t_max > 0.5 && self.t_max < 1.0) {
            return Err(Error::Schedule(format!(
                "t_max={} must lie in (0.5, 1)",
                self.t_max
            )));
        }
        Ok(())
    }

    fn check_range(&self, t: f64) -> Result<()> {
        if t.is_finite() && t >= self.t_min && t <= self.t_max {
            Ok(())
        } else {
            Err(Error::Schedule(format!(
                "t={t} outside the evaluation window [{}, {}]",
                self.t_min, self.t_max
            )))
        }
    }

    /// Coefficients at `t`, requiring `t` inside `[t_min, t_max]`.
    pub fn eval(&self, t: f64) -> Result<ScheduleEval> {
        self.check_range(t)?;
        Ok(self.eval_raw(t))
    }

    /// Coefficients at `t` without the range check.
    ///
    /// Intended for boundary inspection; at the exact endpoints the SNR
    /// may be infinite and downstream velocity formulas degenerate.
    pub fn eval_raw(&self, t: f64) -> ScheduleEval {
        let (alpha, sigma, alpha_dot, sigma_dot) = match self.kind {
            ScheduleKind::Linear => (1.0 - t, t, -1.0, 1.0),
            ScheduleKind::VpCosine => {
                let h = std::f64::consts::FRAC_PI_2;
                let (s, c) = (h * t).sin_cos();
                (c, s, -h * s, h * c)
            }
        };
        ScheduleEval {
            alpha,
            sigma,
            alpha_dot,
            sigma_dot,
            snr: (alpha * alpha) / (sigma * sigma),
        }
    }

    /// Conditional velocity `(sigma'/sigma)(xt - alpha x0) + alpha' x0`.
    pub fn cond_velocity(&self, xt: &[f64], x0: &[f64], t: f64) -> Result<Vec<f64>> {
        check_dims(xt.len(), x0.len())?;
        let ev = self.eval(t)?;
        let mut out = vec![0.0; xt.len()];
        ev.cond_velocity_into(xt, x0, &mut out);
        Ok(out)
    }

    /// Score of the corrupted marginal recovered from its velocity.
    pub fn score_from_velocity(&self, xt: &[f64], v: &[f64], t: f64) -> Result<Vec<f64>> {
        check_dims(xt.len(), v.len())?;
        let ev = self.eval(t)?;
        let den = ev.score_denominator(t)?;
        Ok(xt
            .iter()
            .zip(v)
            .map(|(&x, &vi)| (ev.alpha * vi - ev.alpha_dot * x) / (ev.sigma * den))
            .collect())
    }

    /// Velocity recovered from the score; inverse of
    /// [`Schedule::score_from_velocity`] at fixed `(xt, t)`.
    pub fn velocity_from_score(&self, xt: &[f64], score: &[f64], t: f64) -> Result<Vec<f64>> {
        check_dims(xt.len(), score.len())?;
        let ev = self.eval(t)?;
        let den = ev.score_denominator(t)?;
        Ok(xt
            .iter()
            .zip(score)
            .map(|(&x, &s)| (s * ev.sigma * den + ev.alpha_dot * x) / ev.alpha)
            .collect())
    }

    /// Corrupts `x0` with noise `eps` at time `t`.
    pub fn corrupt(&self, x0: &[f64], eps: &[f64], t: f64) -> Result<PathSample> {
        check_dims(x0.len(), eps.len())?;
        let ev = self.eval(t)?;
        let mut xt = vec![0.0; x0.len()];
        ev.corrupt_into(x0, eps, &mut xt);
        Ok(PathSample {
            x0: x0.to_vec(),
            eps: eps.to_vec(),
            t,
            xt,
        })
    }
}

impl ScheduleEval {
    /// Coefficient of `x0` in the conditional velocity:
    /// `alpha' - alpha sigma' / sigma`. Strictly negative on the open
    /// interval for both kinds.
    pub fn x0_coeff(&self) -> f64 {
        self.alpha_dot - self.alpha * self.sigma_dot / self.sigma
    }

    /// Coefficient of `xt` in the conditional velocity: `sigma'/sigma`.
    pub fn drift_ratio(&self) -> f64 {
        self.sigma_dot / self.sigma
    }

    /// `alpha' sigma - alpha sigma'`; the score/velocity conversion
    /// denominator, checked against exact zero.
    pub fn score_denominator(&self, t: f64) -> Result<f64> {
        let den = self.alpha_dot * self.sigma - self.alpha * self.sigma_dot;
        if den == 0.0 {
            Err(Error::Schedule(format!(
                "score/velocity conversion degenerate at t={t}"
            )))
        } else {
            Ok(den)
        }
    }

    /// Writes the conditional velocity into `out`.
    pub fn cond_velocity_into(&self, xt: &[f64], x0: &[f64], out: &mut [f64]) {
        let r = self.drift_ratio();
        for ((o, &x), &x0i) in out.iter_mut().zip(xt).zip(x0) {
            *o = r * (x - self.alpha * x0i) + self.alpha_dot * x0i;
        }
    }

    /// Writes `alpha x0 + sigma eps` into `out`.
    pub fn corrupt_into(&self, x0: &[f64], eps: &[f64], out: &mut [f64]) {
        for ((o, &x0i), &ei) in out.iter_mut().zip(x0).zip(eps) {
            *o = self.alpha * x0i + self.sigma * ei;
        }
    }
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Shape(format!("vector lengths differ: {a} vs {b}")))
    }
}
