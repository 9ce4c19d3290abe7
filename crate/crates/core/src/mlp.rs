//! Fully connected network trained on squared error, with the bias terms
//! treated as nuisance parameters of the weights.
//!
//! Rows are samples: layer `k` maps `z ↦ act(z W_k + b_k)` with `W_k` of
//! shape `(in, out)`. Weight vectors are flattened layer by layer in
//! row-major order.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adjust::{self, CovariancePair, Interval, QuantileRule, SensitivityMatrix};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numcore::{self, DiffPlan, Mat, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Sigmoid,
    /// Not differentiable at zero; finite-difference based quantities are
    /// unreliable with it.
    Relu,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
            Activation::Relu => v.max(0.0),
        }
    }

    /// Derivative given the pre-activation and the activation.
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Sigmoid => post * (1.0 - post),
            Activation::Relu => f64::from(u8::from(pre > 0.0)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input, hidden..., output.
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    /// Whether the first weight matrix counts as primary. It is by far the
    /// largest and excluding it keeps the information matrix tractable.
    pub include_input_layer_in_primary: bool,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        let spec = Self {
            layer_sizes,
            activation: Activation::Sigmoid,
            include_input_layer_in_primary: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `input → hidden × depth → output`.
    pub fn uniform(input: usize, hidden: usize, depth: usize, output: usize) -> Result<Self> {
        let mut sizes = vec![input];
        sizes.extend(std::iter::repeat_n(hidden, depth));
        sizes.push(output);
        Self::new(sizes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 3 {
            return Err(Error::InvalidParams("need at least one hidden layer".into()));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::InvalidParams("layer sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn hidden_layers(&self) -> usize {
        self.layer_sizes.len() - 2
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap_or(&0)
    }

    /// Weight layers that make up the primary block.
    pub fn primary_layers(&self) -> std::ops::Range<usize> {
        let first = usize::from(!self.include_input_layer_in_primary);
        first..self.n_layers()
    }

    pub fn primary_weight_count(&self) -> usize {
        self.primary_layers()
            .map(|k| self.layer_sizes[k] * self.layer_sizes[k + 1])
            .sum()
    }

    pub fn bias_count(&self) -> usize {
        self.layer_sizes[1..].iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    pub weights: Vec<Mat>,
    pub biases: Vec<Vector>,
}

impl NetParams {
    pub fn zeros(spec: &MlpSpec) -> Self {
        let s = &spec.layer_sizes;
        Self {
            weights: (0..spec.n_layers()).map(|k| Mat::zeros(s[k], s[k + 1])).collect(),
            biases: (0..spec.n_layers()).map(|k| Vector::zeros(s[k + 1])).collect(),
        }
    }

    /// Weights `N(0, 1/fan_in)`, biases zero.
    pub fn init(spec: &MlpSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::zeros(spec);
        for w in &mut p.weights {
            let scale = 1.0 / (w.nrows() as f64).sqrt();
            // Row-major fill so the draw order matches the flattened layout.
            for r in 0..w.nrows() {
                for c in 0..w.ncols() {
                    let z: f64 = StandardNormal.sample(rng);
                    w[(r, c)] = scale * z;
                }
            }
        }
        p
    }

    pub fn check_shapes(&self, spec: &MlpSpec) -> Result<()> {
        let s = &spec.layer_sizes;
        let ok = self.weights.len() == spec.n_layers()
            && self.biases.len() == spec.n_layers()
            && (0..spec.n_layers()).all(|k| {
                self.weights[k].shape() == (s[k], s[k + 1]) && self.biases[k].len() == s[k + 1]
            });
        if ok {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                context: "NetParams shapes vs MlpSpec",
                expected: spec.n_layers(),
                found: self.weights.len(),
            })
        }
    }

    pub fn primary_weights(&self, spec: &MlpSpec) -> Vector {
        let mut out = Vec::with_capacity(spec.primary_weight_count());
        for k in spec.primary_layers() {
            let w = &self.weights[k];
            for r in 0..w.nrows() {
                for c in 0..w.ncols() {
                    out.push(w[(r, c)]);
                }
            }
        }
        Vector::from_vec(out)
    }

    pub fn set_primary_weights(&mut self, spec: &MlpSpec, v: &[f64]) {
        let mut i = 0;
        for k in spec.primary_layers() {
            let w = &mut self.weights[k];
            for r in 0..w.nrows() {
                for c in 0..w.ncols() {
                    w[(r, c)] = v[i];
                    i += 1;
                }
            }
        }
    }

    pub fn flat_biases(&self) -> Vector {
        Vector::from_iterator(
            self.biases.iter().map(|b| b.len()).sum(),
            self.biases.iter().flat_map(|b| b.iter().copied()),
        )
    }

    pub fn set_flat_biases(&mut self, v: &[f64]) {
        let mut i = 0;
        for b in &mut self.biases {
            for x in b.iter_mut() {
                *x = v[i];
                i += 1;
            }
        }
    }
}

/// Shapes plus row-major weight arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub spec: MlpSpec,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn from_params(spec: &MlpSpec, p: &NetParams) -> Self {
        Self {
            spec: spec.clone(),
            weights: p
                .weights
                .iter()
                .map(|w| (0..w.nrows()).flat_map(|r| (0..w.ncols()).map(move |c| w[(r, c)])).collect())
                .collect(),
            biases: p.biases.iter().map(|b| b.iter().copied().collect()).collect(),
        }
    }

    pub fn into_params(self) -> Result<(MlpSpec, NetParams)> {
        self.spec.validate()?;
        let s = &self.spec.layer_sizes;
        if self.weights.len() != self.spec.n_layers() || self.biases.len() != self.spec.n_layers() {
            return Err(Error::InvalidData("checkpoint layer count does not match its shapes".into()));
        }
        let mut p = NetParams::zeros(&self.spec);
        for k in 0..self.spec.n_layers() {
            if self.weights[k].len() != s[k] * s[k + 1] || self.biases[k].len() != s[k + 1] {
                return Err(Error::InvalidData(format!("checkpoint layer {k} has the wrong size")));
            }
            p.weights[k] = Mat::from_row_slice(s[k], s[k + 1], &self.weights[k]);
            p.biases[k] = Vector::from_column_slice(&self.biases[k]);
        }
        Ok((self.spec, p))
    }
}

/// Activations of every layer for a batch; `post[0]` is the input.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub pre: Vec<Mat>,
    pub post: Vec<Mat>,
}

impl ForwardCache {
    pub fn output(&self) -> &Mat {
        self.post.last().expect("at least the input is cached")
    }
}

pub fn forward_batch(spec: &MlpSpec, params: &NetParams, x: &Mat) -> ForwardCache {
    let mut pre = Vec::with_capacity(spec.n_layers());
    let mut post = Vec::with_capacity(spec.n_layers() + 1);
    post.push(x.clone());
    for k in 0..spec.n_layers() {
        let mut z = &post[k] * &params.weights[k];
        for (j, mut col) in z.column_iter_mut().enumerate() {
            col.add_scalar_mut(params.biases[k][j]);
        }
        let a = z.map(|v| spec.activation.apply(v));
        pre.push(z);
        post.push(a);
    }
    ForwardCache { pre, post }
}

/// Output for a single input vector, with the cached activations.
pub fn forward(spec: &MlpSpec, params: &NetParams, x: &[f64]) -> (Vec<f64>, ForwardCache) {
    let cache = forward_batch(spec, params, &Mat::from_row_slice(1, x.len(), x));
    (cache.output().iter().copied().collect(), cache)
}

/// Per-layer error signals `∂L/∂(pre-activation)` given `∂L/∂output`.
fn backward_deltas(spec: &MlpSpec, params: &NetParams, cache: &ForwardCache, d_out: Mat) -> Vec<Mat> {
    let l = spec.n_layers();
    let mut deltas = vec![Mat::zeros(0, 0); l];
    let mut upstream = d_out;
    for k in (0..l).rev() {
        let mut delta = upstream;
        for (d, (p, a)) in delta.iter_mut().zip(cache.pre[k].iter().zip(cache.post[k + 1].iter())) {
            *d *= spec.activation.derivative(*p, *a);
        }
        if k > 0 {
            upstream = &delta * params.weights[k].transpose();
        } else {
            upstream = Mat::zeros(0, 0);
        }
        deltas[k] = delta;
    }
    deltas
}

/// Summed weight and bias gradients given `∂L/∂output` for each row.
pub fn backprop(spec: &MlpSpec, params: &NetParams, cache: &ForwardCache, d_out: Mat) -> (Vec<Mat>, Vec<Vector>) {
    let deltas = backward_deltas(spec, params, cache, d_out);
    let gw = (0..spec.n_layers()).map(|k| cache.post[k].transpose() * &deltas[k]).collect();
    let gb = deltas.iter().map(|d| d.row_sum().transpose()).collect();
    (gw, gb)
}

/// Mean over rows of `Σ_k (output_k − target_k)²`.
pub fn mse_loss(spec: &MlpSpec, params: &NetParams, data: &Dataset) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let out = forward_batch(spec, params, &data.x);
    let diff = out.output() - data.one_hot();
    diff.norm_squared() / data.len() as f64
}

/// Gradient of [`mse_loss`] over the full parameter set.
pub fn loss_gradient(spec: &MlpSpec, params: &NetParams, data: &Dataset) -> (Vec<Mat>, Vec<Vector>) {
    let n = data.len().max(1) as f64;
    let cache = forward_batch(spec, params, &data.x);
    let d_out = (cache.output() - data.one_hot()) * (2.0 / n);
    backprop(spec, params, &cache, d_out)
}

fn flatten_primary(spec: &MlpSpec, gw: &[Mat]) -> Vector {
    let mut tmp = NetParams {
        weights: gw.to_vec(),
        biases: Vec::new(),
    };
    tmp.biases.clear();
    tmp.primary_weights(spec)
}

pub fn accuracy(spec: &MlpSpec, params: &NetParams, data: &Dataset) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let out = forward_batch(spec, params, &data.x);
    let o = out.output();
    let correct = (0..data.len())
        .filter(|&i| {
            let row = o.row(i);
            let arg = (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best });
            arg == data.labels[i]
        })
        .count();
    correct as f64 / data.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Extra epochs allowed when `target_accuracy` is not yet met.
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Keep every bias at zero (the bias-free protocol).
    pub freeze_biases: bool,
    /// Accuracy on `eval` that training continues towards, if any.
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.003,
            epochs: 15,
            max_epochs: 30,
            batch_size: 32,
            seed: 0,
            freeze_biases: true,
            target_accuracy: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub params: NetParams,
    /// Mean mini-batch loss per epoch.
    pub loss_trace: Vec<f64>,
    pub epochs_run: usize,
    pub eval_accuracy: Option<f64>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(len: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            lr,
        }
    }

    /// Updates `params` in place from `grads`, both visited in the same order.
    fn step<'a>(&mut self, params: impl Iterator<Item = &'a mut f64>, grads: impl Iterator<Item = f64>) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (((p, g), m), v) in params.zip(grads).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

/// Mini-batch Adam on the squared-error loss. `eval` is only used to decide
/// whether to keep going past `epochs` when a target accuracy is set.
pub fn train(spec: &MlpSpec, data: &Dataset, eval: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidData("cannot train on an empty dataset".into()));
    }
    if data.input_dim() != spec.layer_sizes[0] || data.classes != spec.output_dim() {
        return Err(Error::DimensionMismatch {
            context: "training data vs network shape",
            expected: spec.layer_sizes[0],
            found: data.input_dim(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = NetParams::init(spec, &mut rng);
    let n_weights: usize = params.weights.iter().map(|w| w.len()).sum();
    let n_biases = spec.bias_count();
    let mut opt_w = Adam::new(n_weights, cfg.learning_rate);
    let mut opt_b = Adam::new(n_biases, cfg.learning_rate);
    let targets = data.one_hot();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut loss_trace = Vec::new();
    let mut eval_accuracy = None;
    let batch = cfg.batch_size.max(1);
    let d = data.input_dim();
    let k_out = spec.output_dim();

    for epoch in 0..cfg.max_epochs.max(cfg.epochs) {
        if epoch >= cfg.epochs {
            match (cfg.target_accuracy, eval_accuracy) {
                (Some(t), Some(a)) if a < t => {}
                _ => break,
            }
        }
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch) {
            let xb = Mat::from_fn(chunk.len(), d, |r, c| data.x[(chunk[r], c)]);
            let yb = Mat::from_fn(chunk.len(), k_out, |r, c| targets[(chunk[r], c)]);
            let cache = forward_batch(spec, &params, &xb);
            let diff = cache.output() - &yb;
            let loss = diff.norm_squared() / chunk.len() as f64;
            if !loss.is_finite() {
                return Err(Error::DivergenceDetected { epoch });
            }
            total += loss;
            batches += 1;
            let (gw, gb) = backprop(spec, &params, &cache, diff * (2.0 / chunk.len() as f64));
            opt_w.step(
                params.weights.iter_mut().flat_map(|w| w.iter_mut()),
                gw.iter().flat_map(|g| g.iter().copied()),
            );
            if !cfg.freeze_biases {
                opt_b.step(
                    params.biases.iter_mut().flat_map(|b| b.iter_mut()),
                    gb.iter().flat_map(|g| g.iter().copied()),
                );
            }
        }
        let mean = total / batches as f64;
        if !mean.is_finite() {
            return Err(Error::DivergenceDetected { epoch });
        }
        loss_trace.push(mean);
        if let Some(ev) = eval {
            eval_accuracy = Some(accuracy(spec, &params, ev));
        }
        log::debug!("epoch {epoch}: loss {mean:.5} eval acc {eval_accuracy:?}");
    }
    Ok(TrainOutcome {
        params,
        epochs_run: loss_trace.len(),
        loss_trace,
        eval_accuracy,
    })
}

/// Per-sample scores of `−½‖output − target‖²` over the primary weights, one
/// row per sample.
pub fn per_sample_weight_scores(spec: &MlpSpec, params: &NetParams, data: &Dataset) -> Mat {
    let p = spec.primary_weight_count();
    if data.is_empty() {
        return Mat::zeros(0, p);
    }
    let cache = forward_batch(spec, params, &data.x);
    let d_out = -(cache.output() - data.one_hot());
    let deltas = backward_deltas(spec, params, &cache, d_out);
    let mut s = Mat::zeros(data.len(), p);
    for i in 0..data.len() {
        let mut col = 0;
        for k in spec.primary_layers() {
            let a = cache.post[k].row(i);
            let dl = deltas[k].row(i);
            for r in 0..a.len() {
                for c in 0..dl.len() {
                    s[(i, col)] = a[r] * dl[c];
                    col += 1;
                }
            }
        }
    }
    s
}

/// Per-sample Fisher information of the primary weights.
pub fn weight_fim(spec: &MlpSpec, params: &NetParams, data: &Dataset) -> Result<Mat> {
    numcore::fim_from_score_rows(&per_sample_weight_scores(spec, params, data))
}

/// Gradient of the mean loss over the primary weights.
pub fn primary_loss_gradient(spec: &MlpSpec, params: &NetParams, data: &Dataset) -> Vector {
    if data.is_empty() {
        return Vector::zeros(spec.primary_weight_count());
    }
    let (gw, _) = loss_gradient(spec, params, data);
    flatten_primary(spec, &gw)
}

/// `∂(∇_w C)/∂bᵀ` by central differences over every bias coordinate.
pub fn cross_jacobian_bias(spec: &MlpSpec, params: &NetParams, data: &Dataset) -> Result<Mat> {
    let b0 = params.flat_biases();
    let mut work = params.clone();
    numcore::finite_diff_jacobian(
        |b: &[f64]| {
            work.set_flat_biases(b);
            primary_loss_gradient(spec, &work, data)
        },
        b0.as_slice(),
        &DiffPlan::default(),
    )
}

/// `D₁ = −(2F)⁻¹ J`: the mean score is `−½∇C` and its weight Jacobian is
/// approximately `−F`.
pub fn weight_sensitivity(fim_w: &Mat, cross: &Mat) -> Result<SensitivityMatrix> {
    let sol = numcore::solve_spd(&(fim_w * 2.0), cross)?;
    Ok(SensitivityMatrix {
        d1: -sol.x,
        regularized: sol.regularized,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasPosterior {
    /// Diagonal of `V_b/m`.
    pub variance_diag: Vector,
    pub tau2: f64,
    pub group_count: usize,
    /// Prior weight in pseudo-observations.
    pub nu0: f64,
    /// Refit biases, one row per group.
    pub refits: Mat,
}

pub const MIN_BIAS_GROUPS: usize = 5;
pub const MIN_BIAS_GROUP_SIZE: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasRefitConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub nu0: f64,
}

impl Default for BiasRefitConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            steps: 300,
            nu0: 1.0,
        }
    }
}

/// Fits all biases on one group with the weights frozen, starting at zero.
pub fn refit_biases(spec: &MlpSpec, trained: &NetParams, group: &Dataset, cfg: &BiasRefitConfig) -> Result<Vector> {
    let mut p = trained.clone();
    for b in &mut p.biases {
        b.fill(0.0);
    }
    let mut opt = Adam::new(spec.bias_count(), cfg.learning_rate);
    for _ in 0..cfg.steps {
        let (_, gb) = loss_gradient(spec, &p, group);
        if gb.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteEvaluation { coordinate: None });
        }
        opt.step(p.biases.iter_mut().flat_map(|b| b.iter_mut()), gb.iter().flat_map(|g| g.iter().copied()));
    }
    Ok(p.flat_biases())
}

/// Normal-normal shrinkage of the across-group variance of each bias towards
/// a common prior `N(0, τ²)`, with `τ²` the pooled mean square of the refits:
/// `σ_j² = (ν₀τ² + (G−1)s_j²)/(ν₀ + G − 1)`.
pub fn shrink_bias_variance(refits: &Mat, nu0: f64) -> Result<BiasPosterior> {
    let g = refits.nrows();
    if g < 2 {
        return Err(Error::InsufficientGroups {
            needed: 2,
            min_size: 0,
            found: g,
        });
    }
    let tau2 = refits.norm_squared() / refits.len() as f64;
    let mut var = Vector::zeros(refits.ncols());
    for j in 0..refits.ncols() {
        let col = refits.column(j);
        let mean = col.mean();
        let s2 = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (g - 1) as f64;
        var[j] = (nu0 * tau2 + (g - 1) as f64 * s2) / (nu0 + (g - 1) as f64);
    }
    if var.iter().any(|v| !(*v > 0.0)) {
        // All refits exactly zero: fall back to a tiny positive floor so the
        // diagonal stays a valid variance.
        var.iter_mut().for_each(|v| *v = v.max(f64::MIN_POSITIVE));
    }
    Ok(BiasPosterior {
        variance_diag: var,
        tau2,
        group_count: g,
        nu0,
        refits: refits.clone(),
    })
}

/// Refits the biases on each group and shrinks their spread.
pub fn bias_posterior(spec: &MlpSpec, trained: &NetParams, groups: &[Dataset], cfg: &BiasRefitConfig) -> Result<BiasPosterior> {
    let small = groups.iter().filter(|g| g.len() < MIN_BIAS_GROUP_SIZE).count();
    if groups.len() < MIN_BIAS_GROUPS || small > 0 {
        return Err(Error::InsufficientGroups {
            needed: MIN_BIAS_GROUPS,
            min_size: MIN_BIAS_GROUP_SIZE,
            found: groups.len() - small,
        });
    }
    let mut refits = Mat::zeros(groups.len(), spec.bias_count());
    for (i, g) in groups.iter().enumerate() {
        refits.set_row(i, &refit_biases(spec, trained, g, cfg)?.transpose());
    }
    shrink_bias_variance(&refits, cfg.nu0)
}

/// `V_w/n = F⁻¹/n` and its adjustment by `V_b/m = diag(variance_diag)`.
pub fn adjusted_weight_cov(fim_w: &Mat, d1: &SensitivityMatrix, posterior: &BiasPosterior, n: usize) -> Result<CovariancePair> {
    let inv = numcore::inverse_spd(fim_w)?;
    if inv.regularized {
        log::warn!("weight information matrix is near singular; inverted with ridge jitter");
    }
    let v_w = inv.x / n as f64;
    Ok(adjust::adjusted_covariance(&v_w, d1, &Mat::from_diagonal(&posterior.variance_diag))?
        .with_sizes(n, posterior.group_count))
}

/// Per-sample outputs rescaled to sum to one, averaged over the dataset.
pub fn class_probabilities(spec: &MlpSpec, params: &NetParams, data: &Dataset) -> Vector {
    let k = spec.output_dim();
    if data.is_empty() {
        return Vector::zeros(k);
    }
    let out = forward_batch(spec, params, &data.x);
    let mut mu = Vector::zeros(k);
    for row in out.output().row_iter() {
        let s: f64 = row.iter().sum();
        for j in 0..k {
            mu[j] += row[j] / s;
        }
    }
    mu / data.len() as f64
}

/// How the gradient of a class probability with respect to the weights is
/// obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientPath {
    /// `(∂μ̂/∂C)·∇_w C`, with `∂μ̂/∂C` from perturbing the weights along
    /// `∇_w C` and comparing the changes in `μ̂` and `C`. This keeps only the
    /// component of `∇_w μ̂` along `∇_w C`.
    #[default]
    ChainRule,
    /// Exact `∇_w μ̂` by backpropagation.
    Direct,
}

/// `∇_w μ̂_i` for every class, one row per class.
pub fn class_probability_gradients(spec: &MlpSpec, params: &NetParams, data: &Dataset, path: GradientPath) -> Result<Mat> {
    let k = spec.output_dim();
    let p = spec.primary_weight_count();
    match path {
        GradientPath::Direct => {
            let cache = forward_batch(spec, params, &data.x);
            let out = cache.output();
            let n = data.len().max(1) as f64;
            let mut g = Mat::zeros(k, p);
            for class in 0..k {
                let d_out = Mat::from_fn(data.len(), k, |i, j| {
                    let s: f64 = out.row(i).sum();
                    let pi = out[(i, class)] / s;
                    (f64::from(u8::from(j == class)) - pi) / s / n
                });
                let (gw, _) = backprop(spec, params, &cache, d_out);
                g.set_row(class, &flatten_primary(spec, &gw).transpose());
            }
            Ok(g)
        }
        GradientPath::ChainRule => {
            let grad_c = primary_loss_gradient(spec, params, data);
            let norm = grad_c.norm();
            if !(norm > 0.0) {
                return Ok(Mat::zeros(k, p));
            }
            let dir = &grad_c / norm;
            let w0 = params.primary_weights(spec);
            let h = 1e-4 * w0.amax().max(1.0);
            let mut work = params.clone();
            let mut eval = |t: f64| {
                work.set_primary_weights(spec, (&w0 + &dir * t).as_slice());
                (mse_loss(spec, &work, data), class_probabilities(spec, &work, data))
            };
            let (c_plus, mu_plus) = eval(h);
            let (c_minus, mu_minus) = eval(-h);
            let dc = c_plus - c_minus;
            if !(dc.abs() > 0.0) || !dc.is_finite() {
                return Err(Error::NonFiniteEvaluation { coordinate: None });
            }
            let dmu_dc = (mu_plus - mu_minus) / dc;
            Ok(&dmu_dc * grad_c.transpose())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassInterval {
    pub class: usize,
    pub mu_hat: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionCi {
    pub classes: Vec<ClassInterval>,
    pub level: f64,
    pub adjusted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionCiPair {
    pub unadjusted: PredictionCi,
    pub adjusted: PredictionCi,
    /// `half_width(adjusted)/half_width(unadjusted) − 1` per class.
    pub relative_widening: Vec<f64>,
}

impl PredictionCiPair {
    pub fn median_widening(&self) -> f64 {
        median(&self.relative_widening)
    }

    pub fn adjusted_contains_unadjusted(&self) -> bool {
        self.adjusted.classes.iter().zip(&self.unadjusted.classes).all(|(a, u)| {
            let ia = Interval { center: a.mu_hat, lower: a.lower, upper: a.upper };
            let iu = Interval { center: u.mu_hat, lower: u.lower, upper: u.upper };
            ia.contains_interval(&iu)
        })
    }
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 0 {
        0.5 * (s[m - 1] + s[m])
    } else {
        s[m]
    }
}

/// Delta-method intervals for every class probability under both
/// covariances, sharing one gradient per class.
pub fn prediction_ci(
    spec: &MlpSpec,
    params: &NetParams,
    cov: &CovariancePair,
    data: &Dataset,
    level: f64,
    path: GradientPath,
    rule: QuantileRule,
) -> Result<PredictionCiPair> {
    let mu = class_probabilities(spec, params, data);
    let grads = class_probability_gradients(spec, params, data, path)?;
    let mut un = Vec::new();
    let mut ad = Vec::new();
    let mut widening = Vec::new();
    for class in 0..spec.output_dim() {
        let g = grads.row(class).transpose();
        let iu = adjust::delta_method_ci_with(mu[class], &g, &cov.unadjusted, level, rule)?;
        let ia = adjust::delta_method_ci_with(mu[class], &g, &cov.adjusted, level, rule)?;
        let hu = iu.half_width();
        widening.push(if hu > 0.0 { ia.half_width() / hu - 1.0 } else { 0.0 });
        un.push(ClassInterval { class, mu_hat: mu[class], lower: iu.lower, upper: iu.upper });
        ad.push(ClassInterval { class, mu_hat: mu[class], lower: ia.lower, upper: ia.upper });
    }
    Ok(PredictionCiPair {
        unadjusted: PredictionCi { classes: un, level, adjusted: false },
        adjusted: PredictionCi { classes: ad, level, adjusted: true },
        relative_widening: widening,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gaussian_blobs;

    fn tiny() -> (MlpSpec, NetParams, Dataset) {
        let spec = MlpSpec::new(vec![3, 4, 3, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = NetParams::init(&spec, &mut rng);
        for b in &mut p.biases {
            for v in b.iter_mut() {
                *v = 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
            }
        }
        let data = gaussian_blobs(20, 3, 2, 1.0, &mut rng).unwrap();
        (spec, p, data)
    }

    #[test]
    fn zero_net_outputs_half() {
        let spec = MlpSpec::new(vec![4, 3, 2]).unwrap();
        let (out, _) = forward(&spec, &NetParams::zeros(&spec), &[1.0, -2.0, 0.5, 3.0]);
        assert!(out.iter().all(|v| *v == 0.5));
    }

    #[test]
    fn one_one_one_by_hand() {
        let spec = MlpSpec::new(vec![1, 1, 1]).unwrap();
        let mut p = NetParams::zeros(&spec);
        p.weights[0][(0, 0)] = 1.0;
        p.weights[1][(0, 0)] = 1.0;
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        let (out, _) = forward(&spec, &p, &[1.0]);
        assert!((out[0] - s(s(1.0))).abs() < 1e-15);
        assert!((out[0] - 0.6750).abs() < 1e-4);
    }

    #[test]
    fn counts_follow_architecture() {
        let s2 = MlpSpec::uniform(784, 16, 2, 10).unwrap();
        assert_eq!((s2.primary_weight_count(), s2.bias_count()), (416, 42));
        let s4 = MlpSpec::uniform(784, 16, 4, 10).unwrap();
        assert_eq!((s4.primary_weight_count(), s4.bias_count()), (928, 74));
        assert!(MlpSpec::new(vec![3, 2]).is_err());
    }

    #[test]
    fn backprop_matches_fd() {
        let (spec, p, data) = tiny();
        let (gw, gb) = loss_gradient(&spec, &p, &data);
        for k in 0..spec.n_layers() {
            let w0: Vec<f64> = p.weights[k].iter().copied().collect();
            let fd = numcore::finite_diff_gradient(
                |w: &[f64]| {
                    let mut q = p.clone();
                    q.weights[k].copy_from_slice(w);
                    mse_loss(&spec, &q, &data)
                },
                &w0,
                &DiffPlan::default(),
            )
            .unwrap();
            let an = Vector::from_iterator(w0.len(), gw[k].iter().copied());
            assert!((&an - &fd).amax() / an.amax() < 1e-4);
            let fdb = numcore::finite_diff_gradient(
                |b: &[f64]| {
                    let mut q = p.clone();
                    q.biases[k].copy_from_slice(b);
                    mse_loss(&spec, &q, &data)
                },
                p.biases[k].as_slice(),
                &DiffPlan::default(),
            )
            .unwrap();
            assert!((&gb[k] - &fdb).amax() / gb[k].amax() < 1e-4);
        }
    }

    #[test]
    fn scores_average_to_minus_half_gradient() {
        let (spec, p, data) = tiny();
        let s = per_sample_weight_scores(&spec, &p, &data);
        let mean = s.row_mean().transpose();
        let g = primary_loss_gradient(&spec, &p, &data);
        assert!((mean * -2.0 - g).amax() < 1e-12);
    }

    #[test]
    fn permuting_hidden_units_preserves_output() {
        let (spec, p, data) = tiny();
        let perm = [2, 0, 3, 1];
        let mut q = p.clone();
        for (new, &old) in perm.iter().enumerate() {
            q.weights[0].set_column(new, &p.weights[0].column(old));
            q.biases[0][new] = p.biases[0][old];
            q.weights[1].set_row(new, &p.weights[1].row(old));
        }
        let a = forward_batch(&spec, &p, &data.x);
        let b = forward_batch(&spec, &q, &data.x);
        assert!((a.output() - b.output()).amax() < 1e-12);
    }

    #[test]
    fn duplicated_data_leaves_fim_unchanged() {
        let (spec, p, data) = tiny();
        let idx: Vec<usize> = (0..data.len()).chain(0..data.len()).collect();
        let f1 = weight_fim(&spec, &p, &data).unwrap();
        let f2 = weight_fim(&spec, &p, &data.select(&idx)).unwrap();
        assert!((f1.clone() - f2).amax() < 1e-12 * f1.amax());
        assert!(numcore::is_psd(&f1, 1e-10));
    }

    #[test]
    fn cross_jacobian_shape_and_zero_data() {
        let (spec, p, data) = tiny();
        let j = cross_jacobian_bias(&spec, &p, &data).unwrap();
        assert_eq!(j.shape(), (spec.primary_weight_count(), spec.bias_count()));
        let empty = data.select(&[]);
        assert!(cross_jacobian_bias(&spec, &p, &empty).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cross_jacobian_linear_quadratic_oracle() {
        // One linear-ish layer can't be expressed with sigmoid activations,
        // so check against mixed partials of the loss computed by nested
        // central differences instead.
        let (spec, p, data) = tiny();
        let j = cross_jacobian_bias(&spec, &p, &data).unwrap();
        let b0 = p.flat_biases();
        let w0 = p.primary_weights(&spec);
        let (r, c) = (5, 2);
        let h = 1e-4;
        let loss = |dw: f64, db: f64| {
            let mut q = p.clone();
            let mut w = w0.clone();
            w[r] += dw;
            q.set_primary_weights(&spec, w.as_slice());
            let mut b = b0.clone();
            b[c] += db;
            q.set_flat_biases(b.as_slice());
            mse_loss(&spec, &q, &data)
        };
        let mixed = (loss(h, h) - loss(h, -h) - loss(-h, h) + loss(-h, -h)) / (4.0 * h * h);
        assert!((j[(r, c)] - mixed).abs() < 1e-5 * mixed.abs().max(1e-3), "{} vs {mixed}", j[(r, c)]);
    }

    #[test]
    fn shrinkage_examples() {
        let same = Mat::from_row_slice(5, 2, &[0.3, -0.1, 0.3, -0.1, 0.3, -0.1, 0.3, -0.1, 0.3, -0.1]);
        let post = shrink_bias_variance(&same, 1.0).unwrap();
        let tau2 = (0.09 + 0.01) / 2.0;
        for v in post.variance_diag.iter() {
            assert!((v - tau2 / 5.0).abs() < 1e-12);
        }

        use rand_distr::Normal;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let normal = Normal::new(0.0, 0.1).unwrap();
        let refits = Mat::from_fn(20, 30, |_, _| normal.sample(&mut rng));
        let post = shrink_bias_variance(&refits, 1.0).unwrap();
        // Each entry is a 19-df variance estimate; its scale is what's recovered.
        let mean = post.variance_diag.mean();
        assert!((mean / 0.01 - 1.0).abs() < 0.5, "{mean}");
        assert!(post.variance_diag.iter().all(|v| *v > 0.002 && *v < 0.03));
    }

    #[test]
    fn bias_posterior_checks_groups() {
        let (spec, p, data) = tiny();
        let groups = vec![data.clone(); 5];
        assert!(matches!(
            bias_posterior(&spec, &p, &groups, &BiasRefitConfig::default()),
            Err(Error::InsufficientGroups { .. })
        ));
    }

    #[test]
    fn probabilities_sum_to_one() {
        let (spec, p, data) = tiny();
        let mu = class_probabilities(&spec, &p, &data);
        assert!((mu.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn chain_path_is_projection_of_direct() {
        let (spec, p, data) = tiny();
        let direct = class_probability_gradients(&spec, &p, &data, GradientPath::Direct).unwrap();
        let chain = class_probability_gradients(&spec, &p, &data, GradientPath::ChainRule).unwrap();
        let gc = primary_loss_gradient(&spec, &p, &data);
        for k in 0..spec.output_dim() {
            let proj = direct.row(k).dot(&gc.transpose()) / gc.norm_squared();
            let expected = gc.transpose() * proj;
            assert!((chain.row(k) - &expected).amax() < 1e-5 * expected.amax().max(1e-8));
        }
        // Direct gradients check against finite differences of μ̂.
        let w0 = p.primary_weights(&spec);
        let fd = numcore::finite_diff_gradient(
            |w: &[f64]| {
                let mut q = p.clone();
                q.set_primary_weights(&spec, w);
                class_probabilities(&spec, &q, &data)[1]
            },
            w0.as_slice(),
            &DiffPlan::default(),
        )
        .unwrap();
        assert!((direct.row(1).transpose() - &fd).amax() < 1e-6 * fd.amax());
    }

    #[test]
    fn memorizes_single_sample() {
        let spec = MlpSpec::new(vec![2, 4, 2]).unwrap();
        let data = Dataset::new(Mat::from_row_slice(1, 2, &[0.3, 0.9]), vec![1], 2).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            epochs: 600,
            max_epochs: 600,
            batch_size: 1,
            seed: 1,
            freeze_biases: false,
            target_accuracy: None,
        };
        let out = train(&spec, &data, None, &cfg).unwrap();
        assert!(*out.loss_trace.last().unwrap() < 1e-3);
        let mu = class_probabilities(&spec, &out.params, &data);
        assert!(mu[1] > 0.97);
    }

    #[test]
    fn training_is_reproducible_and_decreasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = gaussian_blobs(400, 6, 3, 3.0, &mut rng).unwrap();
        let spec = MlpSpec::uniform(6, 8, 2, 3).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.03,
            epochs: 30,
            max_epochs: 30,
            freeze_biases: false,
            ..TrainConfig::default()
        };
        let a = train(&spec, &data, None, &cfg).unwrap();
        let b = train(&spec, &data, None, &cfg).unwrap();
        assert_eq!(a, b);
        for w in a.loss_trace.windows(2) {
            assert!(w[1] <= w[0] * 1.05, "{:?}", a.loss_trace);
        }
        let acc = accuracy(&spec, &a.params, &data);
        assert!(acc > 0.8, "{acc} {:?}", a.loss_trace);
    }

    #[test]
    fn checkpoint_round_trip() {
        let (spec, p, _) = tiny();
        let json = serde_json::to_string(&Checkpoint::from_params(&spec, &p)).unwrap();
        let (s2, p2) = serde_json::from_str::<Checkpoint>(&json).unwrap().into_params().unwrap();
        assert_eq!(s2, spec);
        assert_eq!(p2, p);
    }

    #[test]
    fn zero_bias_variance_means_no_adjustment() {
        let (spec, p, data) = tiny();
        let fim = weight_fim(&spec, &p, &data).unwrap();
        let d1 = weight_sensitivity(&fim, &cross_jacobian_bias(&spec, &p, &data).unwrap()).unwrap();
        let post = BiasPosterior {
            variance_diag: Vector::zeros(spec.bias_count()),
            tau2: 0.0,
            group_count: 5,
            nu0: 1.0,
            refits: Mat::zeros(5, spec.bias_count()),
        };
        let pair = adjusted_weight_cov(&fim, &d1, &post, data.len()).unwrap();
        assert!((&pair.adjusted - &pair.unadjusted).norm() < 1e-12);
    }
}
