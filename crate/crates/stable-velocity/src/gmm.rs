//! Diagonal-covariance Gaussian mixtures with closed-form corruption.
//!
//! # Mathematical framework
//!
//! The data distribution is `q(x0) = sum_k w_k N(x0; mu_k, diag(s_k^2))`.
//! Corrupting with `x_t = alpha x0 + sigma eps` keeps every component
//! Gaussian, so the corrupted marginal is again a diagonal mixture:
//!
//! ```text
//!     p_t(x) = sum_k w_k N(x; alpha mu_k, diag(alpha^2 s_k^2 + sigma^2)).
//! ```
//!
//! Everything downstream follows from exact Bayes algebra on that mixture:
//!
//! * responsibilities `r_k(x) ∝ w_k N(x; alpha mu_k, c_k)` with
//!   `c_k = alpha^2 s_k^2 + sigma^2` per coordinate,
//! * within-component posterior over the clean point,
//!   `x0 | x, k ~ N(m_k, V_k)` with
//!   `m_k = (sigma^2 mu_k + alpha s_k^2 x) / c_k` and
//!   `V_k = s_k^2 sigma^2 / c_k`,
//! * posterior mean `x0_bar = sum_k r_k m_k`, which plugged into the
//!   conditional velocity gives the exact marginal velocity (the
//!   conditional velocity is affine in `x0`),
//! * score `sum_k r_k (alpha mu_k - x) / c_k`.
//!
//! These closed forms are the oracle that every Monte Carlo estimator in
//! the crate is validated against. All responsibility arithmetic runs in
//! log space through a log-sum-exp.

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::schedules::{Schedule, ScheduleEval};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// A diagonal-covariance Gaussian mixture specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmSpec {
    pub dim: usize,
    /// Component probabilities; sum to 1.
    pub weights: Vec<f64>,
    /// `K x d` component means.
    pub means: Vec<Vec<f64>>,
    /// `K x d` per-coordinate variances, all positive.
    pub variances: Vec<Vec<f64>>,
    /// Optional class id per component; class ids form a gap-free range
    /// `[0, C)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u32>>,
}

impl GmmSpec {
    /// Builds and validates a spec.
    pub fn new(
        dim: usize,
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        variances: Vec<Vec<f64>>,
        labels: Option<Vec<u32>>,
    ) -> Result<Self> {
        let spec = GmmSpec {
            dim,
            weights,
            means,
            variances,
            labels,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Number of mixture components.
    pub fn modes(&self) -> usize {
        self.weights.len()
    }

    /// Number of classes if the spec is labelled.
    pub fn n_classes(&self) -> Option<u32> {
        self.labels
            .as_ref()
            .map(|ls| ls.iter().copied().max().map_or(0, |m| m + 1))
    }

    /// Checks all structural invariants.
    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if self.dim == 0 {
            return Err(Error::Spec("dim must be >= 1".into()));
        }
        if k == 0 {
            return Err(Error::Spec("at least one component required".into()));
        }
        if self.means.len() != k || self.variances.len() != k {
            return Err(Error::Spec(format!(
                "weights/means/variances count mismatch: {k}/{}/{}",
                self.means.len(),
                self.variances.len()
            )));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Spec(format!("weights sum to {sum}, expected 1")));
        }
        if self.weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::Spec("all weights must be positive".into()));
        }
        for (j, (m, v)) in self.means.iter().zip(&self.variances).enumerate() {
            if m.len() != self.dim || v.len() != self.dim {
                return Err(Error::Spec(format!(
                    "component {j} has wrong dimension: mean {} var {} expected {}",
                    m.len(),
                    v.len(),
                    self.dim
                )));
            }
            if v.iter().any(|&x| !(x > 0.0)) {
                return Err(Error::Spec(format!("component {j} has nonpositive variance")));
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != k {
                return Err(Error::Spec(format!(
                    "labels count {} does not match components {k}",
                    labels.len()
                )));
            }
            let c = labels.iter().copied().max().unwrap() + 1;
            for class in 0..c {
                if !labels.contains(&class) {
                    return Err(Error::Spec(format!(
                        "class {class} has no component (ids must cover [0, {c}))"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Mixture restricted to one class with renormalised weights.
    ///
    /// The result represents `q(x0 | y = class)` and carries no labels.
    pub fn conditional(&self, class: u32) -> Result<GmmSpec> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::Spec("spec carries no labels".into()))?;
        let keep: Vec<usize> = (0..self.modes()).filter(|&k| labels[k] == class).collect();
        if keep.is_empty() {
            return Err(Error::Spec(format!("class {class} has no component")));
        }
        let total: f64 = keep.iter().map(|&k| self.weights[k]).sum();
        GmmSpec::new(
            self.dim,
            keep.iter().map(|&k| self.weights[k] / total).collect(),
            keep.iter().map(|&k| self.means[k].clone()).collect(),
            keep.iter().map(|&k| self.variances[k].clone()).collect(),
            None,
        )
    }

    /// Random spec: means uniform on `[-1, 1]`, per-coordinate variances
    /// uniform on `[1e-2, 1e-1]`, weights uniform on `(0.1, 1)` then
    /// normalised. Identical streams give bit-identical specs.
    pub fn random_spec(dim: usize, modes: usize, stream: Stream) -> Result<GmmSpec> {
        Self::random_spec_with(dim, modes, (1e-2, 1e-1), stream)
    }

    /// [`GmmSpec::random_spec`] with an explicit variance range; the
    /// tight-component solver benchmarks shrink it.
    pub fn random_spec_with(
        dim: usize,
        modes: usize,
        var_range: (f64, f64),
        stream: Stream,
    ) -> Result<GmmSpec> {
        if dim == 0 || modes == 0 {
            return Err(Error::Spec("dim and modes must be >= 1".into()));
        }
        let (var_lo, var_hi) = var_range;
        if !(var_lo > 0.0 && var_hi >= var_lo) {
            return Err(Error::Spec(format!(
                "invalid variance range [{var_lo}, {var_hi}]"
            )));
        }
        let mut rng = stream.rng();
        let raw: Vec<f64> = (0..modes).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let weights = raw.iter().map(|w| w / total).collect();
        let mut means = Vec::with_capacity(modes);
        let mut variances = Vec::with_capacity(modes);
        for _ in 0..modes {
            means.push((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect());
            variances.push((0..dim).map(|_| rng.random_range(var_lo..var_hi)).collect());
        }
        GmmSpec::new(dim, weights, means, variances, None)
    }

    /// Cumulative weights for categorical draws.
    fn weight_cdf(&self) -> Vec<f64> {
        let mut cdf = Vec::with_capacity(self.modes());
        let mut acc = 0.0;
        for &w in &self.weights {
            acc += w;
            cdf.push(acc);
        }
        cdf
    }

    /// Draws one clean point into `out`; returns the component index.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) -> usize {
        debug_assert_eq!(out.len(), self.dim);
        let u: f64 = rng.random();
        let k = categorical_from_cdf(&self.weight_cdf(), u);
        self.sample_component_into(k, rng, out);
        k
    }

    /// Draws one clean point from a fixed component.
    pub fn sample_component_into<R: Rng + ?Sized>(&self, k: usize, rng: &mut R, out: &mut [f64]) {
        for j in 0..self.dim {
            let e: f64 = StandardNormal.sample(rng);
            out[j] = self.means[k][j] + self.variances[k][j].sqrt() * e;
        }
    }

    /// Draws `count` points; returns them row-major together with class
    /// labels when the spec is labelled.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        count: usize,
    ) -> (Array2<f64>, Option<Vec<u32>>) {
        let cdf = self.weight_cdf();
        let mut points = Array2::zeros((count, self.dim));
        let mut labels = self.labels.as_ref().map(|_| Vec::with_capacity(count));
        for mut row in points.rows_mut() {
            let u: f64 = rng.random();
            let k = categorical_from_cdf(&cdf, u);
            self.sample_component_into(k, rng, row.as_slice_mut().expect("row-major"));
            if let (Some(out), Some(ls)) = (labels.as_mut(), self.labels.as_ref()) {
                out.push(ls[k]);
            }
        }
        (points, labels)
    }

    /// Log-density of the corrupted marginal `p_t` at `xt`.
    pub fn marginal_log_density(&self, schedule: &Schedule, xt: &[f64], t: f64) -> Result<f64> {
        self.check_point(xt)?;
        let ev = schedule.eval(t)?;
        let mut acc = LogSumExp::new();
        for k in 0..self.modes() {
            acc.push(self.weights[k].ln() + self.component_log_density(k, &ev, xt));
        }
        Ok(acc.finish())
    }

    /// Full log-density of corrupted component `k` at `xt`, constants
    /// included.
    fn component_log_density(&self, k: usize, ev: &ScheduleEval, xt: &[f64]) -> f64 {
        let a2 = ev.alpha * ev.alpha;
        let s2 = ev.sigma * ev.sigma;
        let mut lp = 0.0;
        for j in 0..self.dim {
            let c = a2 * self.variances[k][j] + s2;
            let dx = xt[j] - ev.alpha * self.means[k][j];
            lp -= 0.5 * (dx * dx / c + c.ln() + LN_2PI);
        }
        lp
    }

    /// Exact Bayes posterior over the clean point at `(xt, t)`.
    pub fn posterior(&self, schedule: &Schedule, xt: &[f64], t: f64) -> Result<Posterior> {
        self.check_point(xt)?;
        let ev = schedule.eval(t)?;
        Ok(self.posterior_with(&ev, xt))
    }

    /// [`GmmSpec::posterior`] with a pre-evaluated schedule.
    pub fn posterior_with(&self, ev: &ScheduleEval, xt: &[f64]) -> Posterior {
        let k_n = self.modes();
        let a2 = ev.alpha * ev.alpha;
        let s2 = ev.sigma * ev.sigma;
        // Log responsibilities; the shared -(d/2) log 2pi cancels.
        let mut logr = Vec::with_capacity(k_n);
        for k in 0..k_n {
            let mut lp = self.weights[k].ln();
            for j in 0..self.dim {
                let c = a2 * self.variances[k][j] + s2;
                let dx = xt[j] - ev.alpha * self.means[k][j];
                lp -= 0.5 * (dx * dx / c + c.ln());
            }
            logr.push(lp);
        }
        let max = logr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut resp: Vec<f64> = logr.iter().map(|&l| (l - max).exp()).collect();
        let total: f64 = resp.iter().sum();
        for r in &mut resp {
            *r /= total;
        }

        // Per-component posterior moments, flattened K x d.
        let mut post_mean = vec![0.0; k_n * self.dim];
        let mut post_sd = vec![0.0; k_n * self.dim];
        for k in 0..k_n {
            for j in 0..self.dim {
                let s_kj = self.variances[k][j];
                let c = a2 * s_kj + s2;
                post_mean[k * self.dim + j] =
                    (s2 * self.means[k][j] + ev.alpha * s_kj * xt[j]) / c;
                post_sd[k * self.dim + j] = (s_kj * s2 / c).sqrt();
            }
        }
        let mut cdf = Vec::with_capacity(k_n);
        let mut acc = 0.0;
        for &r in &resp {
            acc += r;
            cdf.push(acc);
        }
        Posterior {
            dim: self.dim,
            resp,
            cdf,
            post_mean,
            post_sd,
        }
    }

    /// Exact marginal velocity: the conditional velocity evaluated at the
    /// posterior mean of the clean point.
    pub fn exact_velocity(&self, schedule: &Schedule, xt: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_point(xt)?;
        let ev = schedule.eval(t)?;
        let mut out = vec![0.0; self.dim];
        self.exact_velocity_with(&ev, xt, &mut out);
        Ok(out)
    }

    /// [`GmmSpec::exact_velocity`] with a pre-evaluated schedule, writing
    /// into `out`.
    pub fn exact_velocity_with(&self, ev: &ScheduleEval, xt: &[f64], out: &mut [f64]) {
        let post = self.posterior_with(ev, xt);
        let x0_bar = post.mean_x0();
        ev.cond_velocity_into(xt, &x0_bar, out);
    }

    /// Exact score of the corrupted marginal at `(xt, t)`.
    pub fn exact_score(&self, schedule: &Schedule, xt: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_point(xt)?;
        let ev = schedule.eval(t)?;
        let post = self.posterior_with(&ev, xt);
        let a2 = ev.alpha * ev.alpha;
        let s2 = ev.sigma * ev.sigma;
        let mut out = vec![0.0; self.dim];
        for k in 0..self.modes() {
            let r = post.resp[k];
            for j in 0..self.dim {
                let c = a2 * self.variances[k][j] + s2;
                out[j] += r * (ev.alpha * self.means[k][j] - xt[j]) / c;
            }
        }
        Ok(out)
    }

    /// Average log-likelihood of dataset rows under the clean mixture.
    pub fn mean_log_likelihood(&self, points: &Array2<f64>) -> Result<f64> {
        if points.ncols() != self.dim {
            return Err(Error::Shape(format!(
                "points have dim {}, spec has {}",
                points.ncols(),
                self.dim
            )));
        }
        let mut total = 0.0;
        for row in points.rows() {
            let x = row.as_slice().expect("row-major");
            let mut acc = LogSumExp::new();
            for k in 0..self.modes() {
                let mut lp = self.weights[k].ln();
                for j in 0..self.dim {
                    let v = self.variances[k][j];
                    let dx = x[j] - self.means[k][j];
                    lp -= 0.5 * (dx * dx / v + v.ln() + LN_2PI);
                }
                acc.push(lp);
            }
            total += acc.finish();
        }
        Ok(total / points.nrows() as f64)
    }

    pub fn to_json_file(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<GmmSpec> {
        let text = std::fs::read_to_string(path)?;
        let spec: GmmSpec = serde_json::from_str(&text)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() == self.dim {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "point has dim {}, spec has {}",
                x.len(),
                self.dim
            )))
        }
    }
}

/// Exact posterior `p_t(x0 | xt)`: a mixture of diagonal Gaussians with
/// component responsibilities and per-component moments precomputed.
#[derive(Debug, Clone)]
pub struct Posterior {
    dim: usize,
    resp: Vec<f64>,
    cdf: Vec<f64>,
    /// `K x d` posterior means, flattened row-major.
    post_mean: Vec<f64>,
    /// `K x d` posterior standard deviations, flattened row-major.
    post_sd: Vec<f64>,
}

impl Posterior {
    /// Component responsibilities at the conditioning point.
    pub fn responsibilities(&self) -> &[f64] {
        &self.resp
    }

    /// Posterior mean of the clean point.
    pub fn mean_x0(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (k, &r) in self.resp.iter().enumerate() {
            let row = &self.post_mean[k * self.dim..(k + 1) * self.dim];
            for j in 0..self.dim {
                out[j] += r * row[j];
            }
        }
        out
    }

    /// Draws one clean point from the posterior mixture into `out`.
    pub fn sample_x0_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        let u: f64 = rng.random();
        let k = categorical_from_cdf(&self.cdf, u);
        let mean = &self.post_mean[k * self.dim..(k + 1) * self.dim];
        let sd = &self.post_sd[k * self.dim..(k + 1) * self.dim];
        for j in 0..self.dim {
            let e: f64 = StandardNormal.sample(rng);
            out[j] = mean[j] + sd[j] * e;
        }
    }
}

/// First index whose cumulative weight exceeds `u`, clamped to the last
/// component so `u` values at the rounding edge stay in range.
fn categorical_from_cdf(cdf: &[f64], u: f64) -> usize {
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

/// Streaming log-sum-exp with a running maximum.
#[derive(Debug, Clone, Copy)]
pub struct LogSumExp {
    max: f64,
    sum: f64,
}

impl LogSumExp {
    pub fn new() -> Self {
        LogSumExp {
            max: f64::NEG_INFINITY,
            sum: 0.0,
        }
    }

    pub fn push(&mut self, l: f64) {
        if l == f64::NEG_INFINITY {
            return;
        }
        if l > self.max {
            self.sum = self.sum * (self.max - l).exp() + 1.0;
            self.max = l;
        } else {
            self.sum += (l - self.max).exp();
        }
    }

    pub fn finish(&self) -> f64 {
        self.max + self.sum.ln()
    }
}

impl Default for LogSumExp {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use approx::assert_abs_diff_eq;

    fn single_standard(dim: usize) -> GmmSpec {
        GmmSpec::new(
            dim,
            vec![1.0],
            vec![vec![0.0; dim]],
            vec![vec![1.0; dim]],
            None,
        )
        .unwrap()
    }

    fn two_mode_1d() -> GmmSpec {
        GmmSpec::new(
            1,
            vec![0.5, 0.5],
            vec![vec![-1.0], vec![1.0]],
            vec![vec![0.04], vec![0.04]],
            None,
        )
        .unwrap()
    }

    #[test]
    fn random_spec_obeys_recipe_ranges() {
        let spec = GmmSpec::random_spec(10, 100, Stream::new(11).child("spec")).unwrap();
        assert_eq!(spec.dim, 10);
        assert_eq!(spec.modes(), 100);
        assert_abs_diff_eq!(spec.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        for k in 0..100 {
            assert!(spec.weights[k] > 0.0);
            for j in 0..10 {
                assert!((-1.0..1.0).contains(&spec.means[k][j]));
                assert!((1e-2..1e-1).contains(&spec.variances[k][j]));
            }
        }
        // Weights from U(0.1, 1) normalised over 100 modes cannot be too
        // far from uniform.
        for &w in &spec.weights {
            assert!(w < 0.1 && w > 1e-4);
        }
    }

    #[test]
    fn random_spec_is_deterministic() {
        let a = GmmSpec::random_spec(3, 7, Stream::new(5).child("spec")).unwrap();
        let b = GmmSpec::random_spec(3, 7, Stream::new(5).child("spec")).unwrap();
        assert_eq!(a, b);
        let c = GmmSpec::random_spec(3, 7, Stream::new(6).child("spec")).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn degenerate_single_mode_spec() {
        let spec = GmmSpec::random_spec(1, 1, Stream::new(0)).unwrap();
        assert_eq!(spec.weights, vec![1.0]);
    }

    #[test]
    fn sample_mean_of_single_gaussian() {
        // N(0, 0.04): sample mean within 3 * 0.2/sqrt(n) of 0 per coordinate.
        let spec = GmmSpec::new(2, vec![1.0], vec![vec![0.0; 2]], vec![vec![0.04; 2]], None).unwrap();
        let n = 100_000;
        let mut rng = Stream::new(42).child("sample").rng();
        let (pts, labels) = spec.sample(&mut rng, n);
        assert!(labels.is_none());
        let bound = 3.0 * 0.2 / (n as f64).sqrt();
        for j in 0..2 {
            let mean = pts.column(j).mean().unwrap();
            assert!(mean.abs() < bound, "coordinate {j} mean {mean} vs {bound}");
        }
    }

    #[test]
    fn near_delta_components_concentrate() {
        let spec = GmmSpec::new(1, vec![1.0], vec![vec![0.7]], vec![vec![1e-10]], None).unwrap();
        let mut rng = Stream::new(1).rng();
        let (pts, _) = spec.sample(&mut rng, 1000);
        for &x in pts.iter() {
            assert!((x - 0.7).abs() < 1e-4);
        }
    }

    #[test]
    fn component_counts_are_binomial() {
        let spec = GmmSpec::new(
            1,
            vec![0.5, 0.5],
            vec![vec![-1.0], vec![1.0]],
            vec![vec![1e-4], vec![1e-4]],
            None,
        )
        .unwrap();
        let mut rng = Stream::new(9).rng();
        let (pts, _) = spec.sample(&mut rng, 10_000);
        let negatives = pts.iter().filter(|&&x| x < 0.0).count() as f64;
        let slack = 3.0 * (10_000.0_f64 * 0.25).sqrt();
        assert!((negatives - 5000.0).abs() < slack);
    }

    #[test]
    fn labelled_sampling_reports_classes() {
        let spec = GmmSpec::new(
            1,
            vec![0.5, 0.5],
            vec![vec![-1.0], vec![1.0]],
            vec![vec![1e-6], vec![1e-6]],
            Some(vec![0, 1]),
        )
        .unwrap();
        assert_eq!(spec.n_classes(), Some(2));
        let mut rng = Stream::new(3).rng();
        let (pts, labels) = spec.sample(&mut rng, 500);
        let labels = labels.unwrap();
        for (i, &l) in labels.iter().enumerate() {
            let x = pts[(i, 0)];
            assert_eq!(l, if x < 0.0 { 0 } else { 1 });
        }
    }

    #[test]
    fn conditional_restricts_and_renormalises() {
        let spec = GmmSpec::new(
            1,
            vec![0.2, 0.3, 0.5],
            vec![vec![-1.0], vec![0.0], vec![1.0]],
            vec![vec![0.01]; 3],
            Some(vec![0, 1, 0]),
        )
        .unwrap();
        let c0 = spec.conditional(0).unwrap();
        assert_eq!(c0.modes(), 2);
        assert_abs_diff_eq!(c0.weights[0], 0.2 / 0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(c0.weights[1], 0.5 / 0.7, epsilon = 1e-15);
        assert!(spec.conditional(2).is_err());
    }

    #[test]
    fn marginal_log_density_of_standard_gaussian() {
        let spec = single_standard(2);
        let sched = Schedule::linear();
        for t in [0.2, 0.5, 0.8] {
            let ev = sched.eval(t).unwrap();
            let c = ev.alpha * ev.alpha + ev.sigma * ev.sigma;
            let xt = [0.3, -0.9];
            let expect: f64 = xt
                .iter()
                .map(|&x| -0.5 * (x * x / c + c.ln() + LN_2PI))
                .sum();
            let got = spec.marginal_log_density(&sched, &xt, t).unwrap();
            assert_abs_diff_eq!(got, expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn marginal_at_t_max_is_standard_normal() {
        // alpha(t_max) ~ 1e-3 shrinks every component onto N(0, sigma^2 I).
        let spec = GmmSpec::random_spec(2, 5, Stream::new(4)).unwrap();
        let sched = Schedule::linear();
        let t = sched.t_max;
        for xt in [[0.0, 0.0], [1.0, -2.0], [2.0, 2.0]] {
            let got = spec.marginal_log_density(&sched, &xt, t).unwrap();
            let std_normal: f64 = xt.iter().map(|&x| -0.5 * (x * x + LN_2PI)).sum();
            assert!((got - std_normal).abs() < 0.02, "xt={xt:?}: {got} vs {std_normal}");
        }
    }

    #[test]
    fn symmetric_two_mode_density_at_origin() {
        let spec = two_mode_1d();
        let sched = Schedule::linear();
        let t = 0.4;
        let ev = sched.eval(t).unwrap();
        let c = ev.alpha * ev.alpha * 0.04 + ev.sigma * ev.sigma;
        // Both components contribute the same density at xt = 0.
        let one = -0.5 * ((ev.alpha * 1.0) * (ev.alpha * 1.0) / c + c.ln() + LN_2PI);
        let got = spec.marginal_log_density(&sched, &[0.0], t).unwrap();
        assert_abs_diff_eq!(got, one, epsilon = 1e-12);
    }

    #[test]
    fn exact_velocity_collapses_for_delta_data() {
        let spec = GmmSpec::new(2, vec![1.0], vec![vec![0.5, -0.25]], vec![vec![1e-12; 2]], None)
            .unwrap();
        let sched = Schedule::vp_cosine();
        let t = 0.6;
        let xt = [0.9, 0.1];
        let v = spec.exact_velocity(&sched, &xt, t).unwrap();
        let cond = sched.cond_velocity(&xt, &spec.means[0], t).unwrap();
        for j in 0..2 {
            assert!((v[j] - cond[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn exact_velocity_of_standard_gaussian_closed_form() {
        // v = (c_dot / 2c) x with c = (1-t)^2 + t^2 under the linear schedule.
        let spec = single_standard(1);
        let sched = Schedule::linear();
        let v_mid = spec.exact_velocity(&sched, &[1.3], 0.5).unwrap();
        assert_abs_diff_eq!(v_mid[0], 0.0, epsilon = 1e-12);
        let v_quarter = spec.exact_velocity(&sched, &[1.0], 0.25).unwrap();
        assert_abs_diff_eq!(v_quarter[0], -0.8, epsilon = 1e-12);
    }

    #[test]
    fn exact_score_of_standard_gaussian() {
        let spec = single_standard(3);
        for sched in [Schedule::linear(), Schedule::vp_cosine()] {
            let t = 0.35;
            let ev = sched.eval(t).unwrap();
            let c = ev.alpha * ev.alpha + ev.sigma * ev.sigma;
            let xt = [0.2, -1.0, 2.5];
            let s = spec.exact_score(&sched, &xt, t).unwrap();
            for j in 0..3 {
                assert_abs_diff_eq!(s[j], -xt[j] / c, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn exact_score_vanishes_at_symmetry_point() {
        let spec = two_mode_1d();
        let s = spec.exact_score(&Schedule::linear(), &[0.0], 0.5).unwrap();
        assert_abs_diff_eq!(s[0], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn oracle_consistency_score_from_velocity() {
        // 100 random probes: the velocity-to-score conversion must agree
        // with the direct score to 1e-9 relative.
        let root = Stream::new(77).child("consistency");
        for i in 0..100u64 {
            let probe = root.at(i);
            let mut rng = probe.rng();
            let dim = 1 + (i % 4) as usize;
            let spec = GmmSpec::random_spec(dim, 5, probe.child("spec")).unwrap();
            let sched = if i % 2 == 0 {
                Schedule::linear()
            } else {
                Schedule::vp_cosine()
            };
            let t = rng.random_range(0.05..0.95);
            let xt: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            let v = spec.exact_velocity(&sched, &xt, t).unwrap();
            let via_v = sched.score_from_velocity(&xt, &v, t).unwrap();
            let direct = spec.exact_score(&sched, &xt, t).unwrap();
            for j in 0..dim {
                let scale = direct[j].abs().max(via_v[j].abs()).max(1.0);
                assert!(
                    (via_v[j] - direct[j]).abs() <= 1e-9 * scale,
                    "probe {i} dim {j}: {} vs {}",
                    via_v[j],
                    direct[j]
                );
            }
        }
    }

    #[test]
    fn exact_score_matches_finite_differences() {
        let root = Stream::new(13).child("fd-score");
        let h = 1e-5;
        for i in 0..20u64 {
            let probe = root.at(i);
            let mut rng = probe.rng();
            let dim = 1 + (i % 3) as usize;
            let spec = GmmSpec::random_spec(dim, 4, probe.child("spec")).unwrap();
            let sched = if i % 2 == 0 {
                Schedule::linear()
            } else {
                Schedule::vp_cosine()
            };
            let t = rng.random_range(0.1..0.9);
            let xt: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect();
            let score = spec.exact_score(&sched, &xt, t).unwrap();
            for j in 0..dim {
                let mut up = xt.clone();
                let mut dn = xt.clone();
                up[j] += h;
                dn[j] -= h;
                let num = (spec.marginal_log_density(&sched, &up, t).unwrap()
                    - spec.marginal_log_density(&sched, &dn, t).unwrap())
                    / (2.0 * h);
                assert!(
                    (num - score[j]).abs() < 1e-5,
                    "probe {i} coord {j}: fd {num} vs {}",
                    score[j]
                );
            }
        }
    }

    #[test]
    fn corrupted_density_normalises_in_1d() {
        // Importance sampling from N(0, 4) against the corrupted mixture.
        let spec = GmmSpec::random_spec(1, 6, Stream::new(21)).unwrap();
        let sched = Schedule::linear();
        let t = 0.45;
        let mut rng = Stream::new(22).child("is").rng();
        let n = 200_000;
        let (prop_sd, prop_var) = (2.0, 4.0);
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let e: f64 = StandardNormal.sample(&mut rng);
            let x = prop_sd * e;
            let log_q = -0.5 * (x * x / prop_var + prop_var.ln() + LN_2PI);
            let w = (spec.marginal_log_density(&sched, &[x], t).unwrap() - log_q).exp();
            sum += w;
            sumsq += w * w;
        }
        let mean = sum / n as f64;
        let se = ((sumsq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * se, "mass {mean} +- {se}");
        assert!(se < 0.01);
    }

    #[test]
    fn posterior_mean_interpolates_components() {
        let spec = two_mode_1d();
        let sched = Schedule::linear();
        let post = spec.posterior(&sched, &[0.0], 0.5).unwrap();
        // Symmetric point: equal responsibilities, posterior mean 0.
        assert_abs_diff_eq!(post.responsibilities()[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(post.mean_x0()[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn posterior_sampling_matches_moments() {
        let spec = two_mode_1d();
        let sched = Schedule::linear();
        let t = 0.6;
        let xt = [0.25];
        let post = spec.posterior(&sched, &xt, t).unwrap();
        let mut rng = Stream::new(31).rng();
        let n = 200_000;
        let mut mean = 0.0;
        let mut buf = [0.0];
        for _ in 0..n {
            post.sample_x0_into(&mut rng, &mut buf);
            mean += buf[0];
        }
        mean /= n as f64;
        // SD of the posterior mixture is below 1.1; 4 sigma slack.
        assert!((mean - post.mean_x0()[0]).abs() < 4.0 * 1.1 / (n as f64).sqrt());
    }

    #[test]
    fn validation_rejects_malformed_specs() {
        assert!(GmmSpec::new(1, vec![0.6, 0.5], vec![vec![0.0]; 2], vec![vec![1.0]; 2], None)
            .is_err());
        assert!(GmmSpec::new(1, vec![1.0], vec![vec![0.0]], vec![vec![0.0]], None).is_err());
        assert!(GmmSpec::new(1, vec![1.0], vec![vec![0.0, 1.0]], vec![vec![1.0]], None).is_err());
        assert!(
            GmmSpec::new(
                1,
                vec![0.5, 0.5],
                vec![vec![0.0]; 2],
                vec![vec![1.0]; 2],
                Some(vec![0, 2])
            )
            .is_err(),
            "class ids must be gap-free"
        );
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spec.json");
        let spec = GmmSpec::random_spec(3, 4, Stream::new(8)).unwrap();
        spec.to_json_file(&path).unwrap();
        let back = GmmSpec::from_json_file(&path).unwrap();
        assert_eq!(spec, back);
    }

    #[test]
    fn log_sum_exp_handles_extremes() {
        let mut acc = LogSumExp::new();
        acc.push(-1000.0);
        acc.push(-1000.0);
        assert_abs_diff_eq!(acc.finish(), -1000.0 + 2.0_f64.ln(), epsilon = 1e-12);
        let mut acc = LogSumExp::new();
        acc.push(f64::NEG_INFINITY);
        acc.push(0.0);
        assert_abs_diff_eq!(acc.finish(), 0.0, epsilon = 1e-15);
    }
}
