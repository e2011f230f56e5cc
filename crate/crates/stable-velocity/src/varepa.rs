//! Variance-aware auxiliary-loss weighting.
//!
//! An auxiliary per-sample loss (here a cosine alignment against a fixed
//! random teacher projection) is folded into the main objective with a
//! time-dependent weight `w(t)` and per-batch normalisation:
//!
//! ```text
//!     L = mean(main) + lambda_ra * (sum_i w_i aux_i) / (sum_i w_i),
//! ```
//!
//! the auxiliary term defined as 0 when no sample has weight. Three
//! weightings are provided, all anchored so that `w(xi) = 1/2` for the
//! smooth kinds and switching off above the split point `xi`:
//!
//! * `hard`:    `1` for `t < xi`, else `0`
//! * `sigmoid`: `logistic(k (xi - t))` with sharpness `k`
//! * `snr`:     `SNR(t) / (SNR(t) + SNR(xi))`
//!
//! SNR is schedule-dependent and strictly decreasing in `t`, so every
//! kind is nonincreasing: auxiliary supervision concentrates where the
//! regression targets are least noisy (small `t`), fading out toward the
//! noise end.

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::schedules::Schedule;
use ndarray::{Array2, ArrayView2};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Default split point.
pub const DEFAULT_XI: f64 = 0.7;
/// Default sigmoid sharpness.
pub const DEFAULT_SHARPNESS: f64 = 20.0;
/// Default auxiliary-loss coefficient.
pub const DEFAULT_LAMBDA_RA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightingKind {
    Hard,
    Sigmoid,
    Snr,
}

/// A time-dependent auxiliary weighting function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightingFn {
    pub kind: WeightingKind,
    #[serde(default = "default_xi")]
    pub xi: f64,
    /// Sharpness; only the sigmoid kind reads it.
    #[serde(default = "default_sharpness")]
    pub k: f64,
}

fn default_xi() -> f64 {
    DEFAULT_XI
}

fn default_sharpness() -> f64 {
    DEFAULT_SHARPNESS
}

impl WeightingFn {
    pub fn new(kind: WeightingKind, xi: f64, k: f64) -> Result<Self> {
        let f = WeightingFn { kind, xi, k };
        f.validate()?;
        Ok(f)
    }

    pub fn hard(xi: f64) -> Self {
        WeightingFn {
            kind: WeightingKind::Hard,
            xi,
            k: DEFAULT_SHARPNESS,
        }
    }

    pub fn sigmoid(xi: f64, k: f64) -> Self {
        WeightingFn {
            kind: WeightingKind::Sigmoid,
            xi,
            k,
        }
    }

    pub fn snr(xi: f64) -> Self {
        WeightingFn {
            kind: WeightingKind::Snr,
            xi,
            k: DEFAULT_SHARPNESS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.xi > 0.0 && self.xi < 1.0) {
            return Err(Error::Config(format!("xi={} must lie in (0, 1)", self.xi)));
        }
        if !(self.k > 0.0) {
            return Err(Error::Config(format!("sharpness k={} must be > 0", self.k)));
        }
        Ok(())
    }

    /// Weight at time `t`; in `[0, 1]` and nonincreasing in `t`.
    pub fn weight(&self, schedule: &Schedule, t: f64) -> Result<f64> {
        Ok(match self.kind {
            WeightingKind::Hard => {
                schedule.eval(t)?;
                if t < self.xi {
                    1.0
                } else {
                    0.0
                }
            }
            WeightingKind::Sigmoid => {
                schedule.eval(t)?;
                1.0 / (1.0 + (-self.k * (self.xi - t)).exp())
            }
            WeightingKind::Snr => {
                let snr_t = schedule.eval(t)?.snr;
                let snr_xi = schedule.eval(self.xi)?.snr;
                snr_t / (snr_t + snr_xi)
            }
        })
    }
}

/// Combined objective: `mean(main) + lambda_ra * (Σ w_i aux_i) / (Σ w_i)`,
/// with the auxiliary term 0 when `Σ w_i = 0`.
pub fn combined_loss(main: &[f64], aux: &[f64], w: &[f64], lambda_ra: f64) -> Result<f64> {
    if main.is_empty() || main.len() != aux.len() || main.len() != w.len() {
        return Err(Error::Shape(format!(
            "combined_loss lengths: main {}, aux {}, w {}",
            main.len(),
            aux.len(),
            w.len()
        )));
    }
    let mean_main: f64 = main.iter().sum::<f64>() / main.len() as f64;
    let w_sum: f64 = w.iter().sum();
    if w_sum == 0.0 {
        return Ok(mean_main);
    }
    let weighted: f64 = aux.iter().zip(w).map(|(&a, &wi)| wi * a).sum();
    Ok(mean_main + lambda_ra * weighted / w_sum)
}

/// Fixed random linear projection from data space to feature space;
/// the alignment "teacher".
#[derive(Debug, Clone)]
pub struct Teacher {
    /// `feature_dim x d`, standard-normal entries.
    weights: Array2<f64>,
}

impl Teacher {
    pub fn new(data_dim: usize, feature_dim: usize, stream: Stream) -> Self {
        let mut rng = stream.rng();
        let mut weights = Array2::zeros((feature_dim, data_dim));
        for v in weights.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        Teacher { weights }
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn data_dim(&self) -> usize {
        self.weights.ncols()
    }

    /// Projects one clean point into feature space.
    pub fn project(&self, x0: &[f64]) -> Vec<f64> {
        self.weights
            .rows()
            .into_iter()
            .map(|row| row.iter().zip(x0).map(|(&w, &x)| w * x).sum())
            .collect()
    }
}

/// Per-sample alignment losses plus bookkeeping for degenerate samples.
#[derive(Debug, Clone)]
pub struct AlignmentLosses {
    pub losses: Vec<f64>,
    /// Samples where a zero-norm vector forced the orthogonal
    /// convention (loss 1); callers log when nonzero.
    pub zero_norm_count: usize,
}

/// Per-sample `1 - cos(hidden_i, teacher(x0_i))`; in `[0, 2]`.
pub fn toy_alignment_loss(
    hidden: ArrayView2<'_, f64>,
    x0: ArrayView2<'_, f64>,
    teacher: &Teacher,
) -> Result<AlignmentLosses> {
    if hidden.nrows() != x0.nrows() {
        return Err(Error::Shape(format!(
            "hidden has {} rows, x0 has {}",
            hidden.nrows(),
            x0.nrows()
        )));
    }
    if hidden.ncols() != teacher.feature_dim() || x0.ncols() != teacher.data_dim() {
        return Err(Error::Shape(format!(
            "teacher maps dim {} -> {}, got x0 dim {} and hidden dim {}",
            teacher.data_dim(),
            teacher.feature_dim(),
            x0.ncols(),
            hidden.ncols()
        )));
    }
    let mut losses = Vec::with_capacity(hidden.nrows());
    let mut zero_norm_count = 0;
    let mut grad_scratch = vec![0.0; teacher.feature_dim()];
    for (h, x) in hidden.rows().into_iter().zip(x0.rows()) {
        let target = teacher.project(x.as_slice().expect("row-major"));
        let (loss, degenerate) = cosine_alignment_grad(
            h.as_slice().expect("row-major"),
            &target,
            &mut grad_scratch,
        );
        if degenerate {
            zero_norm_count += 1;
        }
        losses.push(loss);
    }
    Ok(AlignmentLosses {
        losses,
        zero_norm_count,
    })
}

/// Loss `1 - cos(u, z)` and its gradient with respect to `u`, written to
/// `grad`. Returns `(loss, degenerate)`; a zero-norm `u` or `z` yields
/// loss 1 with zero gradient (orthogonal convention).
pub fn cosine_alignment_grad(u: &[f64], z: &[f64], grad: &mut [f64]) -> (f64, bool) {
    debug_assert_eq!(u.len(), z.len());
    debug_assert_eq!(u.len(), grad.len());
    let nu = u.iter().map(|&x| x * x).sum::<f64>().sqrt();
    let nz = z.iter().map(|&x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nz == 0.0 {
        grad.fill(0.0);
        return (1.0, true);
    }
    let dot: f64 = u.iter().zip(z).map(|(&a, &b)| a * b).sum();
    let cos = dot / (nu * nz);
    // d(1 - cos)/du = cos * u / |u|^2 - z / (|u| |z|).
    for j in 0..u.len() {
        grad[j] = cos * u[j] / (nu * nu) - z[j] / (nu * nz);
    }
    (1.0 - cos, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn sigmoid_and_snr_anchor_half_at_xi() {
        let s = Schedule::linear();
        for xi in [0.3, 0.5, 0.7, 0.85] {
            let sig = WeightingFn::sigmoid(xi, 20.0).weight(&s, xi).unwrap();
            assert_eq!(sig, 0.5, "logistic(0) must be exactly one half");
            let snr = WeightingFn::snr(xi).weight(&s, xi).unwrap();
            assert_eq!(snr, 0.5, "snr anchor must be exactly one half");
        }
        let c = Schedule::vp_cosine();
        assert_eq!(WeightingFn::snr(0.7).weight(&c, 0.7).unwrap(), 0.5);
    }

    #[test]
    fn snr_weight_worked_example() {
        // Linear, xi=0.7, t=0.3: w = 2401/2482.
        let w = WeightingFn::snr(0.7).weight(&Schedule::linear(), 0.3).unwrap();
        assert_abs_diff_eq!(w, 2401.0 / 2482.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w, 0.967_365, epsilon = 1e-6);
    }

    #[test]
    fn hard_weight_switches_at_xi() {
        let s = Schedule::linear();
        let f = WeightingFn::hard(0.7);
        assert_eq!(f.weight(&s, 0.699).unwrap(), 1.0);
        assert_eq!(f.weight(&s, 0.7).unwrap(), 0.0);
        assert_eq!(f.weight(&s, 0.701).unwrap(), 0.0);
    }

    #[test]
    fn weights_bounded_and_nonincreasing_on_grid() {
        for sched in [Schedule::linear(), Schedule::vp_cosine()] {
            for f in [
                WeightingFn::hard(0.7),
                WeightingFn::sigmoid(0.7, 20.0),
                WeightingFn::snr(0.7),
            ] {
                let mut prev = f64::INFINITY;
                for i in 0..1000 {
                    let t = sched.t_min
                        + (sched.t_max - sched.t_min) * (i as f64) / 999.0;
                    let w = f.weight(&sched, t).unwrap();
                    assert!((0.0..=1.0).contains(&w), "{f:?} at t={t}: {w}");
                    assert!(w <= prev + 1e-15, "{f:?} not nonincreasing at t={t}");
                    prev = w;
                }
            }
        }
    }

    #[test]
    fn sharp_sigmoid_approaches_hard() {
        let s = Schedule::linear();
        let hard = WeightingFn::hard(0.7);
        let sharp = WeightingFn::sigmoid(0.7, 1e4);
        for i in 0..1000 {
            let t = s.t_min + (s.t_max - s.t_min) * (i as f64) / 999.0;
            if (t - 0.7).abs() > 1e-3 {
                let diff = (sharp.weight(&s, t).unwrap() - hard.weight(&s, t).unwrap()).abs();
                assert!(diff < 1e-3, "t={t}: {diff}");
            }
        }
    }

    #[test]
    fn combined_loss_uniform_and_empty_weightings() {
        let main = [1.0, 2.0, 3.0];
        let aux = [0.5, 0.6, 0.7];
        let ones = [1.0; 3];
        let zeros = [0.0; 3];
        let got = combined_loss(&main, &aux, &ones, 0.5).unwrap();
        assert_abs_diff_eq!(got, 2.0 + 0.5 * 0.6, epsilon = 1e-15);
        let got = combined_loss(&main, &aux, &zeros, 0.5).unwrap();
        assert_abs_diff_eq!(got, 2.0, epsilon = 1e-15);
    }

    #[test]
    fn combined_loss_scale_invariant_in_weights() {
        let mut rng = Stream::new(5).child("scale").rng();
        for _ in 0..50 {
            let n = rng.random_range(1..10);
            let main: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let aux: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let scaled: Vec<f64> = w.iter().map(|&x| 2.0 * x).collect();
            let a = combined_loss(&main, &aux, &w, 0.5).unwrap();
            let b = combined_loss(&main, &aux, &scaled, 0.5).unwrap();
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn combined_loss_gates_aux_above_split() {
        // Hard weighting with every sample above xi: the auxiliary values
        // cannot influence the loss at all.
        let s = Schedule::linear();
        let f = WeightingFn::hard(0.7);
        let ts = [0.75, 0.8, 0.95];
        let w: Vec<f64> = ts.iter().map(|&t| f.weight(&s, t).unwrap()).collect();
        let main = [1.0, 1.0, 1.0];
        let a = combined_loss(&main, &[0.1, 0.2, 0.3], &w, 0.5).unwrap();
        let b = combined_loss(&main, &[9.0, 9.0, 9.0], &w, 0.5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, 1.0);
    }

    #[test]
    fn combined_loss_rejects_mismatched_lengths() {
        assert!(combined_loss(&[1.0], &[1.0, 2.0], &[1.0], 0.5).is_err());
        assert!(combined_loss(&[], &[], &[], 0.5).is_err());
    }

    #[test]
    fn alignment_loss_extremes() {
        let teacher = Teacher::new(2, 3, Stream::new(1).child("teacher"));
        let x0 = array![[0.5, -1.0]];
        let target = teacher.project(&[0.5, -1.0]);
        let hidden = Array2::from_shape_vec((1, 3), target.clone()).unwrap();
        let r = toy_alignment_loss(hidden.view(), x0.view(), &teacher).unwrap();
        assert_abs_diff_eq!(r.losses[0], 0.0, epsilon = 1e-12);

        let anti = Array2::from_shape_vec((1, 3), target.iter().map(|&x| -x).collect()).unwrap();
        let r = toy_alignment_loss(anti.view(), x0.view(), &teacher).unwrap();
        assert_abs_diff_eq!(r.losses[0], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn alignment_loss_zero_norm_convention() {
        let teacher = Teacher::new(2, 3, Stream::new(1).child("teacher"));
        let hidden = Array2::zeros((1, 3));
        let x0 = array![[0.5, -1.0]];
        let r = toy_alignment_loss(hidden.view(), x0.view(), &teacher).unwrap();
        assert_eq!(r.losses[0], 1.0);
        assert_eq!(r.zero_norm_count, 1);
    }

    #[test]
    fn independent_vectors_average_unit_loss() {
        let d = 64;
        let teacher = Teacher::new(d, d, Stream::new(2).child("teacher"));
        let n = 10_000;
        let mut rng = Stream::new(2).child("data").rng();
        let mut hidden = Array2::zeros((n, d));
        let mut x0 = Array2::zeros((n, d));
        for v in hidden.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        for v in x0.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let r = toy_alignment_loss(hidden.view(), x0.view(), &teacher).unwrap();
        let mean = r.losses.iter().sum::<f64>() / n as f64;
        // Cosine of independent isotropic vectors has SD ~ 1/sqrt(d).
        let se = (1.0 / d as f64 / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn cosine_gradient_matches_finite_differences() {
        let mut rng = Stream::new(3).child("fd").rng();
        let d = 5;
        for _ in 0..20 {
            let u: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let z: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut grad = vec![0.0; d];
            let (_, degenerate) = cosine_alignment_grad(&u, &z, &mut grad);
            assert!(!degenerate);
            let h = 1e-6;
            for j in 0..d {
                let mut up = u.clone();
                let mut dn = u.clone();
                up[j] += h;
                dn[j] -= h;
                let mut scratch = vec![0.0; d];
                let (lu, _) = cosine_alignment_grad(&up, &z, &mut scratch);
                let (ld, _) = cosine_alignment_grad(&dn, &z, &mut scratch);
                let num = (lu - ld) / (2.0 * h);
                assert!(
                    (num - grad[j]).abs() < 1e-6,
                    "coord {j}: fd {num} vs {}",
                    grad[j]
                );
            }
        }
    }

    #[test]
    fn weighting_fn_serialization() {
        let f = WeightingFn::sigmoid(0.7, 20.0);
        let json = serde_json::to_string(&f).unwrap();
        assert_eq!(json, r#"{"kind":"sigmoid","xi":0.7,"k":20.0}"#);
        let back: WeightingFn = serde_json::from_str(r#"{"kind":"snr"}"#).unwrap();
        assert_eq!(back.xi, DEFAULT_XI);
        assert_eq!(back.k, DEFAULT_SHARPNESS);
        assert_eq!(back.kind, WeightingKind::Snr);
    }
}
