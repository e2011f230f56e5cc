//! Feed-forward velocity model with hand-written gradients, AdamW, and
//! the training loops.
//!
//! The model maps `[xt | sinusoidal time features | class embedding]`
//! through tanh hidden layers to a velocity; one designated hidden
//! activation doubles as the "representation" for the auxiliary
//! alignment term. Gradients are analytic (batch matrix form) and
//! cross-checked against central finite differences in the tests.
//!
//! Three unconditional losses share one loop: `cfm` regresses the
//! conditional velocity of a fresh clean point per sample; `stablevm`
//! corrupts a uniformly chosen reference from a shared per-iteration
//! batch and regresses the posterior-weighted average velocity over
//! that batch; `stf` pairs the same weighted target with an input
//! corrupted from reference 0 of a per-sample fresh batch. The
//! conditional loop draws references from a [`MemoryBank`] with a
//! classifier-free-guidance coin and pushes each iteration's true
//! samples back afterwards.

use crate::bank::MemoryBank;
use crate::error::{Error, Result};
use crate::gmm::GmmSpec;
use crate::rng::Stream;
use crate::schedules::Schedule;
use crate::targets::{sample_gmm_path, stablevm_target_with, stf_target, ReferenceBatch, TargetWorkspace};
use crate::varepa::{cosine_alignment_grad, Teacher, WeightingFn, DEFAULT_LAMBDA_RA};
use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Default hidden widths.
pub const DEFAULT_HIDDEN: [usize; 3] = [256, 256, 256];
/// Default number of sinusoidal time-feature frequencies.
pub const DEFAULT_TIME_FEATURES: usize = 16;
/// Default class-embedding width.
pub const DEFAULT_EMBED_DIM: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

/// Class-conditioning table: `num_classes` real classes plus one null
/// row (label `num_classes`) for classifier-free guidance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEmbedding {
    pub num_classes: u32,
    pub embed_dim: usize,
}

/// Architecture description; the parameter count and layout are a
/// deterministic function of these fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelArch {
    pub dim: usize,
    pub time_features: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub classes: Option<ClassEmbedding>,
    /// Index (into `hidden`) of the activation exposed as the
    /// representation.
    pub repr_layer: usize,
}

impl ModelArch {
    pub fn new(dim: usize, classes: Option<ClassEmbedding>) -> Self {
        ModelArch::with_hidden(dim, DEFAULT_HIDDEN.to_vec(), classes)
    }

    pub fn with_hidden(dim: usize, hidden: Vec<usize>, classes: Option<ClassEmbedding>) -> Self {
        let repr_layer = hidden.len() / 2;
        ModelArch {
            dim,
            time_features: DEFAULT_TIME_FEATURES,
            hidden,
            activation: Activation::Tanh,
            classes,
            repr_layer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("model dim must be positive".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config(
                "hidden widths must be nonempty and positive".into(),
            ));
        }
        if self.repr_layer >= self.hidden.len() {
            return Err(Error::Config(format!(
                "repr_layer {} out of range for {} hidden layers",
                self.repr_layer,
                self.hidden.len()
            )));
        }
        if let Some(c) = &self.classes {
            if c.embed_dim == 0 {
                return Err(Error::Config("embed_dim must be positive".into()));
            }
        }
        Ok(())
    }

    /// Width of the assembled input row.
    pub fn input_dim(&self) -> usize {
        self.dim
            + 2 * self.time_features
            + self.classes.as_ref().map_or(0, |c| c.embed_dim)
    }

    /// `(out, in)` for every affine layer, final layer last.
    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim();
        for &h in &self.hidden {
            shapes.push((h, prev));
            prev = h;
        }
        shapes.push((self.dim, prev));
        shapes
    }

    fn embed_shape(&self) -> Option<(usize, usize)> {
        self.classes
            .as_ref()
            .map(|c| (c.num_classes as usize + 1, c.embed_dim))
    }

    pub fn param_count(&self) -> usize {
        let layers: usize = self.layer_shapes().iter().map(|&(o, i)| o * i + o).sum();
        layers + self.embed_shape().map_or(0, |(r, c)| r * c)
    }

    /// Width of the representation activation.
    pub fn repr_dim(&self) -> usize {
        self.hidden[self.repr_layer]
    }

    /// Label of the null (unconditional) class, if conditional.
    pub fn null_label(&self) -> Option<u32> {
        self.classes.as_ref().map(|c| c.num_classes)
    }
}

/// Borrowed parameter views, layers in order then the embedding table.
struct Params<'a> {
    layers: Vec<(ArrayView2<'a, f64>, ArrayView1<'a, f64>)>,
    embed: Option<ArrayView2<'a, f64>>,
}

fn split_params<'a>(arch: &ModelArch, mut rest: &'a [f64]) -> Params<'a> {
    let mut layers = Vec::new();
    for (o, i) in arch.layer_shapes() {
        let (w, r) = rest.split_at(o * i);
        let (b, r2) = r.split_at(o);
        rest = r2;
        layers.push((
            ArrayView2::from_shape((o, i), w).expect("layout"),
            ArrayView1::from_shape(o, b).expect("layout"),
        ));
    }
    let embed = arch.embed_shape().map(|(r, c)| {
        let (e, r2) = rest.split_at(r * c);
        rest = r2;
        ArrayView2::from_shape((r, c), e).expect("layout")
    });
    debug_assert!(rest.is_empty());
    Params { layers, embed }
}

struct ParamsMut<'a> {
    layers: Vec<(ArrayViewMut2<'a, f64>, ArrayViewMut1<'a, f64>)>,
    embed: Option<ArrayViewMut2<'a, f64>>,
}

fn split_params_mut<'a>(arch: &ModelArch, mut rest: &'a mut [f64]) -> ParamsMut<'a> {
    let mut layers = Vec::new();
    for (o, i) in arch.layer_shapes() {
        let (w, r) = rest.split_at_mut(o * i);
        let (b, r2) = r.split_at_mut(o);
        rest = r2;
        layers.push((
            ArrayViewMut2::from_shape((o, i), w).expect("layout"),
            ArrayViewMut1::from_shape(o, b).expect("layout"),
        ));
    }
    let embed = if let Some((r, c)) = arch.embed_shape() {
        let (e, _) = rest.split_at_mut(r * c);
        Some(ArrayViewMut2::from_shape((r, c), e).expect("layout"))
    } else {
        None
    };
    ParamsMut { layers, embed }
}

/// The velocity network: architecture plus a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityModel {
    pub arch: ModelArch,
    pub params: Vec<f64>,
}

impl VelocityModel {
    /// Initializes weights scaled-uniform `U[-1/sqrt(fan_in),
    /// 1/sqrt(fan_in)]` with zero biases, the final layer all zeros
    /// (so the initial velocity field is identically zero), and
    /// embedding rows `U[-1/sqrt(embed_dim), 1/sqrt(embed_dim)]`.
    /// Zeroed parameters consume no draws.
    pub fn init(arch: ModelArch, stream: Stream) -> Result<Self> {
        arch.validate()?;
        let mut rng = stream.rng();
        let mut params = vec![0.0; arch.param_count()];
        {
            let shapes = arch.layer_shapes();
            let views = split_params_mut(&arch, &mut params);
            let n_layers = shapes.len();
            let mut layer_views = views.layers;
            for (l, (w, _b)) in layer_views.iter_mut().enumerate() {
                if l + 1 == n_layers {
                    break;
                }
                let scale = 1.0 / (shapes[l].1 as f64).sqrt();
                for v in w.iter_mut() {
                    *v = rng.random_range(-scale..scale);
                }
            }
            if let Some(mut e) = views.embed {
                let scale = 1.0 / (e.ncols() as f64).sqrt();
                for v in e.iter_mut() {
                    *v = rng.random_range(-scale..scale);
                }
            }
        }
        Ok(VelocityModel { arch, params })
    }

    pub fn from_params(arch: ModelArch, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::Config(format!(
                "parameter vector has {} entries, architecture needs {}",
                params.len(),
                arch.param_count()
            )));
        }
        Ok(VelocityModel { arch, params })
    }

    fn check_labels(&self, labels: Option<&[u32]>, rows: usize) -> Result<()> {
        match (&self.arch.classes, labels) {
            (None, None) => Ok(()),
            (None, Some(_)) => Err(Error::Config(
                "labels passed to an unconditional model".into(),
            )),
            (Some(_), None) => Err(Error::Config(
                "conditional model requires a label per sample".into(),
            )),
            (Some(c), Some(ls)) => {
                if ls.len() != rows {
                    return Err(Error::Shape(format!(
                        "{} labels for {} rows",
                        ls.len(),
                        rows
                    )));
                }
                for &l in ls {
                    if l > c.num_classes {
                        return Err(Error::Config(format!(
                            "label {l} out of range (null class is {})",
                            c.num_classes
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    /// Assembles the input rows `[xt | time features | embedding]`.
    fn assemble_input(
        &self,
        xt: ArrayView2<'_, f64>,
        t: &[f64],
        labels: Option<&[u32]>,
    ) -> Result<Array2<f64>> {
        let m = xt.nrows();
        let d = self.arch.dim;
        if xt.ncols() != d {
            return Err(Error::Shape(format!(
                "input has dim {}, model expects {d}",
                xt.ncols()
            )));
        }
        if t.len() != m {
            return Err(Error::Shape(format!("{} times for {m} rows", t.len())));
        }
        self.check_labels(labels, m)?;
        let views = split_params(&self.arch, &self.params);
        let f = self.arch.time_features;
        let mut x = Array2::zeros((m, self.arch.input_dim()));
        for (r, mut row) in x.rows_mut().into_iter().enumerate() {
            for j in 0..d {
                row[j] = xt[(r, j)];
            }
            for i in 0..f {
                let (s, c) = (std::f64::consts::PI * (1u64 << i) as f64 * t[r]).sin_cos();
                row[d + 2 * i] = s;
                row[d + 2 * i + 1] = c;
            }
            if let (Some(e), Some(ls)) = (&views.embed, labels) {
                let base = d + 2 * f;
                for j in 0..e.ncols() {
                    row[base + j] = e[(ls[r] as usize, j)];
                }
            }
        }
        Ok(x)
    }

    /// Forward pass keeping every activation (needed for backward).
    /// Returns `(input rows, hidden activations, velocities)`.
    fn forward_full(
        &self,
        xt: ArrayView2<'_, f64>,
        t: &[f64],
        labels: Option<&[u32]>,
    ) -> Result<(Array2<f64>, Vec<Array2<f64>>, Array2<f64>)> {
        let x = self.assemble_input(xt, t, labels)?;
        let views = split_params(&self.arch, &self.params);
        let n_hidden = self.arch.hidden.len();
        let mut hs: Vec<Array2<f64>> = Vec::with_capacity(n_hidden);
        for l in 0..n_hidden {
            let prev = if l == 0 { x.view() } else { hs[l - 1].view() };
            let (w, b) = &views.layers[l];
            let mut p = prev.dot(&w.t());
            p += b;
            p.mapv_inplace(f64::tanh);
            hs.push(p);
        }
        let (wf, bf) = &views.layers[n_hidden];
        let mut v = hs[n_hidden - 1].dot(&wf.t());
        v += bf;
        Ok((x, hs, v))
    }

    /// Batched forward pass; returns velocities and the representation
    /// activations, both one row per sample.
    pub fn forward_batch(
        &self,
        xt: ArrayView2<'_, f64>,
        t: &[f64],
        labels: Option<&[u32]>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let (_, hs, v) = self.forward_full(xt, t, labels)?;
        let repr = hs[self.arch.repr_layer].clone();
        Ok((v, repr))
    }

    /// Single-sample forward pass: velocity and representation.
    pub fn forward(&self, xt: &[f64], t: f64, label: Option<u32>) -> Result<(Vec<f64>, Vec<f64>)> {
        let x = ArrayView2::from_shape((1, xt.len()), xt)
            .map_err(|e| Error::Shape(e.to_string()))?;
        let labels_buf = label.map(|l| [l]);
        let (v, repr) = self.forward_batch(x, &[t], labels_buf.as_ref().map(|b| &b[..]))?;
        Ok((v.row(0).to_vec(), repr.row(0).to_vec()))
    }

    /// Loss and exact analytic gradient over a batch. The main term is
    /// the per-sample squared velocity error (optionally weighted),
    /// averaged over the batch; with [`AuxInputs`] present, the
    /// weight-normalized alignment term is added as in
    /// [`crate::varepa::combined_loss`]. `grad` is overwritten.
    pub fn loss_and_grad(&self, batch: &LossBatch<'_>, grad: &mut [f64]) -> Result<f64> {
        if grad.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "gradient buffer has {} entries, model has {}",
                grad.len(),
                self.params.len()
            )));
        }
        let m = batch.xt.nrows();
        if m == 0 {
            return Err(Error::Shape("empty training batch".into()));
        }
        if batch.targets.dim() != batch.xt.dim() {
            return Err(Error::Shape(format!(
                "targets shaped {:?}, inputs {:?}",
                batch.targets.dim(),
                batch.xt.dim()
            )));
        }
        for (r, row) in batch.targets.rows().into_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "non-finite training target at batch index {r}"
                )));
            }
        }
        if let Some(w) = batch.main_weight {
            if w.len() != m {
                return Err(Error::Shape(format!("{} weights for {m} rows", w.len())));
            }
        }

        let (x, hs, v) = self.forward_full(batch.xt, batch.t, batch.labels)?;
        let n_hidden = self.arch.hidden.len();

        // Main loss and dL/dv.
        let mut dv = &v - &batch.targets;
        let mut main = 0.0;
        for (r, mut row) in dv.rows_mut().into_iter().enumerate() {
            let w = batch.main_weight.map_or(1.0, |ws| ws[r]);
            let sq: f64 = row.iter().map(|e| e * e).sum();
            main += w * sq;
            let scale = 2.0 * w / m as f64;
            row.mapv_inplace(|e| e * scale);
        }
        let mut loss = main / m as f64;

        // Auxiliary alignment loss and its representation gradient.
        let mut d_repr: Option<Array2<f64>> = None;
        if let Some(aux) = &batch.aux {
            let rd = self.arch.repr_dim();
            if aux.features.dim() != (m, rd) {
                return Err(Error::Shape(format!(
                    "aux features shaped {:?}, want ({m}, {rd})",
                    aux.features.dim()
                )));
            }
            if aux.weights.len() != m {
                return Err(Error::Shape(format!(
                    "{} aux weights for {m} rows",
                    aux.weights.len()
                )));
            }
            let w_sum: f64 = aux.weights.iter().sum();
            if w_sum > 0.0 {
                let repr = &hs[self.arch.repr_layer];
                let mut g = Array2::zeros((m, rd));
                let mut aux_loss = 0.0;
                let mut grad_row = vec![0.0; rd];
                for r in 0..m {
                    let w = aux.weights[r];
                    let (l, _) = cosine_alignment_grad(
                        repr.row(r).as_slice().expect("layout"),
                        aux.features.row(r).as_slice().expect("layout"),
                        &mut grad_row,
                    );
                    aux_loss += w * l;
                    let scale = aux.lambda * w / w_sum;
                    for (gi, &gr) in g.row_mut(r).iter_mut().zip(&grad_row) {
                        *gi = scale * gr;
                    }
                }
                loss += aux.lambda * aux_loss / w_sum;
                d_repr = Some(g);
            }
        }

        // Backward pass.
        grad.fill(0.0);
        let views = split_params(&self.arch, &self.params);
        let mut gviews = split_params_mut(&self.arch, grad);
        {
            let (wf, _) = &views.layers[n_hidden];
            let (gwf, gbf) = &mut gviews.layers[n_hidden];
            general_mat_mul(1.0, &dv.t(), &hs[n_hidden - 1].view(), 0.0, gwf);
            gbf.assign(&dv.sum_axis(Axis(0)));
            let mut dh = dv.dot(wf);
            for l in (0..n_hidden).rev() {
                if l == self.arch.repr_layer {
                    if let Some(g) = &d_repr {
                        dh += g;
                    }
                }
                // Through tanh: d_pre = dh * (1 - h^2).
                dh.zip_mut_with(&hs[l], |dp, &h| *dp *= 1.0 - h * h);
                let prev = if l == 0 { x.view() } else { hs[l - 1].view() };
                let (gw, gb) = &mut gviews.layers[l];
                general_mat_mul(1.0, &dh.t(), &prev, 0.0, gw);
                gb.assign(&dh.sum_axis(Axis(0)));
                let (w, _) = &views.layers[l];
                if l > 0 {
                    dh = dh.dot(w);
                } else if let (Some(ge), Some(ls)) = (&mut gviews.embed, batch.labels) {
                    let dx = dh.dot(w);
                    let base = self.arch.dim + 2 * self.arch.time_features;
                    for (r, &lbl) in ls.iter().enumerate() {
                        let mut row = ge.row_mut(lbl as usize);
                        for j in 0..row.len() {
                            row[j] += dx[(r, base + j)];
                        }
                    }
                }
            }
        }
        Ok(loss)
    }
}

/// One training batch for [`VelocityModel::loss_and_grad`].
pub struct LossBatch<'a> {
    pub xt: ArrayView2<'a, f64>,
    /// Per-sample times (may all be equal).
    pub t: &'a [f64],
    pub targets: ArrayView2<'a, f64>,
    pub labels: Option<&'a [u32]>,
    /// Per-sample weight on the squared error; `None` means all ones.
    pub main_weight: Option<&'a [f64]>,
    pub aux: Option<AuxInputs<'a>>,
}

/// Auxiliary alignment inputs: per-sample teacher features (matching
/// the representation width), per-sample weights, and the coefficient
/// on the normalized term.
pub struct AuxInputs<'a> {
    pub features: ArrayView2<'a, f64>,
    pub weights: &'a [f64],
    pub lambda: f64,
}

/// AdamW with bias correction and decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamW {
    pub fn new(len: usize, lr: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer sized {}, params {}, grad {}",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
        Ok(())
    }
}

/// Loss family for the training loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Cfm,
    Stablevm,
    Stf,
}

/// Memory-bank settings for the conditional loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BankSettings {
    #[serde(default = "default_bank_capacity")]
    pub capacity: usize,
    #[serde(default = "default_p_cfg")]
    pub p_cfg: f64,
}

fn default_bank_capacity() -> usize {
    crate::bank::DEFAULT_CAPACITY
}

fn default_p_cfg() -> f64 {
    0.1
}

impl Default for BankSettings {
    fn default() -> Self {
        BankSettings {
            capacity: default_bank_capacity(),
            p_cfg: default_p_cfg(),
        }
    }
}

/// Training-run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    /// Reference-batch size for the weighted targets.
    #[serde(default = "default_n_refs")]
    pub n_refs: usize,
    /// Uniform time-sampling range `[a, b]`.
    #[serde(default)]
    pub time_range: Option<[f64; 2]>,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub iterations: u64,
    #[serde(default)]
    pub seed: u64,
    /// Hidden widths; `None` means the default architecture.
    #[serde(default)]
    pub hidden: Option<Vec<usize>>,
    /// Enables the auxiliary alignment term.
    #[serde(default)]
    pub weighting: Option<WeightingFn>,
    #[serde(default = "default_lambda_ra")]
    pub lambda_ra: f64,
    /// Enables the conditional loop.
    #[serde(default)]
    pub bank: Option<BankSettings>,
    #[serde(default = "default_probe_times")]
    pub probe_times: Vec<f64>,
    #[serde(default = "default_probe_interval")]
    pub probe_interval: u64,
    #[serde(default = "default_probe_samples")]
    pub probe_samples: usize,
}

fn default_n_refs() -> usize {
    64
}

fn default_lr() -> f64 {
    1e-4
}

fn default_batch_size() -> usize {
    128
}

fn default_lambda_ra() -> f64 {
    DEFAULT_LAMBDA_RA
}

fn default_probe_times() -> Vec<f64> {
    vec![0.2, 0.3, 0.4, 0.5]
}

fn default_probe_interval() -> u64 {
    500
}

fn default_probe_samples() -> usize {
    2048
}

impl TrainConfig {
    pub fn new(loss: LossKind, iterations: u64) -> Self {
        TrainConfig {
            loss,
            n_refs: default_n_refs(),
            time_range: None,
            lr: default_lr(),
            batch_size: default_batch_size(),
            iterations,
            seed: 0,
            hidden: None,
            weighting: None,
            lambda_ra: default_lambda_ra(),
            bank: None,
            probe_times: default_probe_times(),
            probe_interval: default_probe_interval(),
            probe_samples: default_probe_samples(),
        }
    }

    pub fn validate(&self, schedule: &Schedule) -> Result<()> {
        if self.n_refs == 0 {
            return Err(Error::Config("n_refs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        let [a, b] = self.resolved_time_range(schedule);
        if !(a >= schedule.t_min && b <= schedule.t_max && a < b) {
            return Err(Error::Config(format!(
                "time range [{a}, {b}] must sit inside [{}, {}]",
                schedule.t_min, schedule.t_max
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr={} must be positive", self.lr)));
        }
        if self.lambda_ra < 0.0 {
            return Err(Error::Config(format!(
                "lambda_ra={} must be nonnegative",
                self.lambda_ra
            )));
        }
        if let Some(w) = &self.weighting {
            w.validate()?;
        }
        if let Some(b) = &self.bank {
            if b.capacity == 0 {
                return Err(Error::Config("bank capacity must be at least 1".into()));
            }
            if !(0.0..=1.0).contains(&b.p_cfg) {
                return Err(Error::Config(format!(
                    "p_cfg={} must lie in [0, 1]",
                    b.p_cfg
                )));
            }
        }
        for &t in &self.probe_times {
            if !(t >= schedule.t_min && t <= schedule.t_max) {
                return Err(Error::Config(format!("probe time {t} out of range")));
            }
        }
        Ok(())
    }

    pub fn resolved_time_range(&self, schedule: &Schedule) -> [f64; 2] {
        self.time_range
            .unwrap_or([schedule.t_min, schedule.t_max])
    }
}

/// One metrics row; probe values are present on probe iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iteration: u64,
    pub loss: f64,
    pub probes: Option<Vec<f64>>,
}

/// Training metrics: per-iteration loss plus periodic oracle probes.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    pub probe_times: Vec<f64>,
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss");
        for t in &self.probe_times {
            out.push_str(&format!(",lmse_{t}"));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("{},{}", row.iteration, row.loss));
            match &row.probes {
                Some(ps) => {
                    for p in ps {
                        out.push_str(&format!(",{p}"));
                    }
                }
                None => {
                    for _ in &self.probe_times {
                        out.push(',');
                    }
                }
            }
            out.push('\n');
        }
        out
    }

    /// Rows that carry probe values, as `(iteration, probes)`.
    pub fn probe_rows(&self) -> Vec<(u64, &[f64])> {
        self.rows
            .iter()
            .filter_map(|r| r.probes.as_deref().map(|p| (r.iteration, p)))
            .collect()
    }
}

/// A finished (or checkpointable) training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: VelocityModel,
    pub metrics: MetricsLog,
    pub final_iteration: u64,
    /// One-off run events worth logging by a front end, currently the
    /// per-queue memory-bank fill levels after prefill.
    pub events: Vec<String>,
}

/// The model as a velocity field for the integrators; a conditional
/// model evaluates with the null (unconditional) label. Use
/// [`LabeledModel`] to sample a specific class.
impl crate::solvers::VelocitySource for VelocityModel {
    fn dim(&self) -> usize {
        self.arch.dim
    }

    fn velocity(&self, xt: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        let (v, _) = self.forward(xt, t, self.arch.null_label())?;
        out.copy_from_slice(&v);
        Ok(())
    }
}

/// A conditional model pinned to one class label, as a velocity field.
#[derive(Debug, Clone)]
pub struct LabeledModel<'a> {
    model: &'a VelocityModel,
    label: u32,
}

impl<'a> LabeledModel<'a> {
    pub fn new(model: &'a VelocityModel, label: u32) -> Result<Self> {
        match &model.arch.classes {
            None => Err(Error::Config(
                "cannot pin a label on an unconditional model".into(),
            )),
            Some(c) if label > c.num_classes => Err(Error::Config(format!(
                "label {label} out of range (null class is {})",
                c.num_classes
            ))),
            Some(_) => Ok(LabeledModel { model, label }),
        }
    }
}

impl crate::solvers::VelocitySource for LabeledModel<'_> {
    fn dim(&self) -> usize {
        self.model.arch.dim
    }

    fn velocity(&self, xt: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        let (v, _) = self.model.forward(xt, t, Some(self.label))?;
        out.copy_from_slice(&v);
        Ok(())
    }
}

/// Half mean squared error of the model against the exact mixture
/// velocity at time `t`, over `count` marginal draws `xt ~ p_t`:
/// `0.5 E ||v_model - v_exact||^2`. Batched training-probe variant of
/// [`crate::profiler::second_moment_mse`].
fn probe_mse(
    model: &VelocityModel,
    spec: &GmmSpec,
    schedule: &Schedule,
    t: f64,
    count: usize,
    stream: Stream,
) -> Result<f64> {
    if count == 0 {
        return Err(Error::Shape("probe sample count must be positive".into()));
    }
    let d = spec.dim;
    let ev = schedule.eval(t)?;
    let mut rng = stream.rng();
    let mut xt = Array2::zeros((count, d));
    let mut x0 = vec![0.0; d];
    let mut eps = vec![0.0; d];
    for mut row in xt.rows_mut() {
        spec.sample_into(&mut rng, &mut x0);
        for e in eps.iter_mut() {
            *e = StandardNormal.sample(&mut rng);
        }
        ev.corrupt_into(&x0, &eps, row.as_slice_mut().expect("layout"));
    }
    let ts = vec![t; count];
    let labels = model
        .arch
        .null_label()
        .map(|null| vec![null; count]);
    let (v, _) = model.forward_batch(xt.view(), &ts, labels.as_deref())?;
    let mut total = 0.0;
    let mut exact = vec![0.0; d];
    for (r, row) in v.rows().into_iter().enumerate() {
        spec.exact_velocity_with(&ev, xt.row(r).as_slice().expect("layout"), &mut exact);
        total += row
            .iter()
            .zip(&exact)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(0.5 * total / count as f64)
}

/// Rows built for one iteration.
struct BuiltRows {
    xt: Array2<f64>,
    targets: Array2<f64>,
    /// Clean points that defined each path (for the alignment teacher).
    x0: Array2<f64>,
    t: Vec<f64>,
    labels: Option<Vec<u32>>,
}

/// Builds one unconditional iteration. The weighted-average loss uses
/// one shared time and one shared reference batch for the whole
/// iteration, with the perturbed inputs drawn from the batch's induced
/// mixture; the baselines draw a time per sample — `cfm` corrupts a
/// fresh clean point, `stf` noises reference 0 of a per-sample fresh
/// batch and keeps the weighted target over that batch.
fn build_unconditional_rows(
    schedule: &Schedule,
    config: &TrainConfig,
    spec: &GmmSpec,
    iter_stream: Stream,
) -> Result<BuiltRows> {
    let d = spec.dim;
    let m = config.batch_size;
    let [a, b] = config.resolved_time_range(schedule);
    let shared = if config.loss == LossKind::Stablevm {
        let t = {
            let mut rng = iter_stream.child("time").rng();
            a + (b - a) * rng.random::<f64>()
        };
        let mut rng = iter_stream.child("refs").rng();
        let (points, _) = spec.sample(&mut rng, config.n_refs);
        Some((t, schedule.eval(t)?, ReferenceBatch::new(points)?))
    } else {
        None
    };

    let sample_stream = iter_stream.child("sample");
    let rows: Vec<(f64, Vec<f64>, Vec<f64>, Vec<f64>)> = (0..m)
        .into_par_iter()
        .map(|s| -> Result<(f64, Vec<f64>, Vec<f64>, Vec<f64>)> {
            let mut rng = sample_stream.at(s as u64).rng();
            match config.loss {
                LossKind::Cfm => {
                    let t = a + (b - a) * rng.random::<f64>();
                    let ev = schedule.eval(t)?;
                    let mut x0 = vec![0.0; d];
                    spec.sample_into(&mut rng, &mut x0);
                    let mut eps = vec![0.0; d];
                    for e in eps.iter_mut() {
                        *e = StandardNormal.sample(&mut rng);
                    }
                    let mut xt = vec![0.0; d];
                    ev.corrupt_into(&x0, &eps, &mut xt);
                    let mut target = vec![0.0; d];
                    ev.cond_velocity_into(&xt, &x0, &mut target);
                    Ok((t, xt, target, x0))
                }
                LossKind::Stablevm => {
                    let (t, ev, batch) = shared.as_ref().expect("shared batch");
                    let (path, idx) = sample_gmm_path(batch, schedule, *t, &mut rng)?;
                    let mut ws = TargetWorkspace::new();
                    let mut target = vec![0.0; d];
                    stablevm_target_with(batch, ev, &path.xt, &mut ws, &mut target);
                    Ok((*t, path.xt, target, batch.row(idx).to_vec()))
                }
                LossKind::Stf => {
                    let t = a + (b - a) * rng.random::<f64>();
                    let (points, _) = spec.sample(&mut rng, config.n_refs);
                    let batch = ReferenceBatch::new(points)?;
                    let (xt, target) = stf_target(&batch, schedule, t, &mut rng)?;
                    let x0 = batch.row(0).to_vec();
                    Ok((t, xt, target, x0))
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let mut xt = Array2::zeros((m, d));
    let mut targets = Array2::zeros((m, d));
    let mut x0 = Array2::zeros((m, d));
    let mut ts = Vec::with_capacity(m);
    for (s, (t, x, tg, x0s)) in rows.into_iter().enumerate() {
        xt.row_mut(s).assign(&Array1::from_vec(x));
        targets.row_mut(s).assign(&Array1::from_vec(tg));
        x0.row_mut(s).assign(&Array1::from_vec(x0s));
        ts.push(t);
    }
    Ok(BuiltRows {
        xt,
        targets,
        x0,
        t: ts,
        labels: None,
    })
}

/// Builds one conditional iteration. Per sample, sequentially: a time,
/// a uniformly drawn class to condition on, and a bank draw (the
/// guidance coin inside [`MemoryBank::draw`] may swap in the
/// unconditional references, and the swapped label is what the model
/// sees). Paths and weighted targets are then built in parallel over
/// the drawn snapshots. Finally a fresh labeled batch from the data
/// distribution is pushed into the bank, so every draw within an
/// iteration sees the bank as of the iteration's start.
fn build_conditional_rows(
    schedule: &Schedule,
    config: &TrainConfig,
    spec: &GmmSpec,
    bank: &mut MemoryBank,
    iter_stream: Stream,
) -> Result<BuiltRows> {
    let d = spec.dim;
    let m = config.batch_size;
    let [a, b] = config.resolved_time_range(schedule);
    let labels = spec
        .labels
        .as_ref()
        .ok_or_else(|| Error::Config("conditional training needs labeled data".into()))?;
    let num_classes = spec
        .n_classes()
        .filter(|&c| c > 0)
        .ok_or_else(|| Error::Config("conditional training needs labeled data".into()))?;

    let draw_stream = iter_stream.child("draw");
    let mut drawn = Vec::with_capacity(m);
    for s in 0..m {
        let mut rng = draw_stream.at(s as u64).rng();
        let t = a + (b - a) * rng.random::<f64>();
        let y: u32 = rng.random_range(0..num_classes);
        let (effective, batch) = bank.draw(y, &mut rng)?;
        drawn.push((t, effective, batch));
    }

    let path_stream = iter_stream.child("path");
    let rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = drawn
        .par_iter()
        .enumerate()
        .map(|(s, (t, _, batch))| -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
            let mut rng = path_stream.at(s as u64).rng();
            let ev = schedule.eval(*t)?;
            let (path, idx) = sample_gmm_path(batch, schedule, *t, &mut rng)?;
            let mut ws = TargetWorkspace::new();
            let mut target = vec![0.0; d];
            stablevm_target_with(batch, &ev, &path.xt, &mut ws, &mut target);
            Ok((path.xt, target, batch.row(idx).to_vec()))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut xt = Array2::zeros((m, d));
    let mut targets = Array2::zeros((m, d));
    let mut x0 = Array2::zeros((m, d));
    let mut ts = Vec::with_capacity(m);
    let mut effective_labels = Vec::with_capacity(m);
    for (s, (x, tg, x0s)) in rows.into_iter().enumerate() {
        xt.row_mut(s).assign(&Array1::from_vec(x));
        targets.row_mut(s).assign(&Array1::from_vec(tg));
        x0.row_mut(s).assign(&Array1::from_vec(x0s));
        ts.push(drawn[s].0);
        effective_labels.push(drawn[s].1);
    }

    let mut push_rng = iter_stream.child("push").rng();
    let mut fresh = vec![0.0; d];
    for _ in 0..m {
        let comp = spec.sample_into(&mut push_rng, &mut fresh);
        bank.push(&fresh, labels[comp])?;
    }
    Ok(BuiltRows {
        xt,
        targets,
        x0,
        t: ts,
        labels: Some(effective_labels),
    })
}

/// Fills a fresh memory bank from marginal draws of the labeled
/// mixture: enough points are sampled that every class queue reaches
/// capacity with overwhelming probability.
fn prefill_bank(
    spec: &GmmSpec,
    settings: &BankSettings,
    stream: Stream,
) -> Result<MemoryBank> {
    let labels = spec
        .labels
        .as_ref()
        .ok_or_else(|| Error::Config("conditional training needs labeled data".into()))?;
    let num_classes = spec
        .n_classes()
        .ok_or_else(|| Error::Config("conditional training needs labeled data".into()))?;
    let mut class_prob = vec![0.0; num_classes as usize];
    for (k, &l) in labels.iter().enumerate() {
        class_prob[l as usize] += spec.weights[k];
    }
    let min_prob = class_prob
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
        .max(1e-6);
    let draws = ((settings.capacity as f64) * 4.0 / min_prob).ceil() as usize
        + settings.capacity;
    let mut bank = MemoryBank::new(settings.capacity, num_classes, spec.dim, settings.p_cfg)?;
    let mut rng = stream.rng();
    let (points, point_labels) = spec.sample(&mut rng, draws);
    bank.prefill(points.view(), point_labels.as_deref())?;
    Ok(bank)
}

/// Runs the configured training loop on mixture data sampled online.
/// With `oracle` present, the metrics log carries probe values of
/// [`second_moment_mse`] at the configured times, every
/// `probe_interval` iterations and at the final one. Fully reproducible
/// from the seed; `resume` continues iteration numbering from a saved
/// model with a fresh optimizer (and, in the conditional loop, a
/// freshly prefilled bank).
pub fn train(
    schedule: &Schedule,
    config: &TrainConfig,
    spec: &GmmSpec,
    oracle: Option<&GmmSpec>,
    resume: Option<(VelocityModel, u64)>,
) -> Result<TrainOutcome> {
    config.validate(schedule)?;
    spec.validate()?;
    let root = Stream::new(config.seed);

    let classes = if config.bank.is_some() {
        let c = spec.n_classes().ok_or_else(|| {
            Error::Config("conditional training needs a labeled mixture".into())
        })?;
        if c == 0 {
            return Err(Error::Config(
                "conditional training needs at least one class".into(),
            ));
        }
        Some(ClassEmbedding {
            num_classes: c,
            embed_dim: DEFAULT_EMBED_DIM,
        })
    } else {
        None
    };
    let arch = match &config.hidden {
        Some(h) => ModelArch::with_hidden(spec.dim, h.clone(), classes),
        None => ModelArch::new(spec.dim, classes),
    };

    let (mut model, start) = match resume {
        Some((m, it)) => {
            if m.arch != arch {
                return Err(Error::Config(format!(
                    "checkpoint architecture {:?} does not match the configured run {:?}",
                    m.arch, arch
                )));
            }
            if it >= config.iterations {
                return Err(Error::Config(format!(
                    "checkpoint is at iteration {it}, config stops at {}",
                    config.iterations
                )));
            }
            (m, it)
        }
        None => (VelocityModel::init(arch, root.child("init"))?, 0),
    };

    let teacher = config
        .weighting
        .as_ref()
        .map(|_| Teacher::new(spec.dim, model.arch.repr_dim(), root.child("teacher")));
    let mut bank = match &config.bank {
        Some(settings) => Some(prefill_bank(spec, settings, root.child("prefill"))?),
        None => None,
    };
    let mut events = Vec::new();
    if let Some(bank) = &bank {
        for c in 0..bank.num_classes() {
            events.push(format!(
                "memory bank prefill: class {c} queue {}/{}",
                bank.queue_len(c),
                bank.capacity()
            ));
        }
        events.push(format!(
            "memory bank prefill: unconditional queue {}/{}",
            bank.queue_len(bank.unconditional_label()),
            bank.capacity()
        ));
    }

    let mut opt = AdamW::new(model.params.len(), config.lr);
    let mut grad = vec![0.0; model.params.len()];
    let mut rows_log = Vec::with_capacity((config.iterations - start) as usize);
    let iter_root = root.child("iter");
    let probe_root = root.child("probe");

    for i in start..config.iterations {
        let it = iter_root.at(i);
        let built = match bank.as_mut() {
            Some(bank) => build_conditional_rows(schedule, config, spec, bank, it)?,
            None => build_unconditional_rows(schedule, config, spec, it)?,
        };

        let mut aux_store = None;
        if let (Some(weighting), Some(teacher)) = (&config.weighting, &teacher) {
            let m = config.batch_size;
            let mut features = Array2::zeros((m, model.arch.repr_dim()));
            let mut weights = Vec::with_capacity(m);
            for s in 0..m {
                let feat = teacher.project(built.x0.row(s).as_slice().expect("layout"));
                features.row_mut(s).assign(&Array1::from_vec(feat));
                weights.push(weighting.weight(schedule, built.t[s])?);
            }
            aux_store = Some((features, weights));
        }

        let loss = {
            let aux = aux_store.as_ref().map(|(features, weights)| AuxInputs {
                features: features.view(),
                weights,
                lambda: config.lambda_ra,
            });
            let batch = LossBatch {
                xt: built.xt.view(),
                t: &built.t,
                targets: built.targets.view(),
                labels: built.labels.as_deref(),
                main_weight: None,
                aux,
            };
            model.loss_and_grad(&batch, &mut grad)?
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss became non-finite at iteration {i}"
            )));
        }
        opt.step(&mut model.params, &grad)?;

        let is_probe = oracle.is_some()
            && ((i + 1) % config.probe_interval == 0 || i + 1 == config.iterations);
        let probes = if is_probe {
            let oracle = oracle.expect("probe only with oracle");
            let mut vals = Vec::with_capacity(config.probe_times.len());
            for (p, &tp) in config.probe_times.iter().enumerate() {
                vals.push(probe_mse(
                    &model,
                    oracle,
                    schedule,
                    tp,
                    config.probe_samples,
                    probe_root.at(i).at(p as u64),
                )?);
            }
            Some(vals)
        } else {
            None
        };
        rows_log.push(MetricsRow {
            iteration: i + 1,
            loss,
            probes,
        });
    }

    Ok(TrainOutcome {
        model,
        metrics: MetricsLog {
            probe_times: config.probe_times.clone(),
            rows: rows_log,
        },
        final_iteration: config.iterations,
        events,
    })
}
