//! A small norm-pool classifier with hand-written backward passes.
//!
//! ```text
//! a_t = W1ᵀ x_t + b1                       (per frame, H wide)
//! h_t = relu(γ ⊙ (a_t - μ) / √(v + eps) + β)
//! g   = mean_t h_t
//! z   = W2ᵀ g + b2
//! ```
//!
//! `γ` and `β` are the only parameters test-time adaptation touches.

mod checkpoint;
mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{pretrain, PretrainConfig, TrainLog};

use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;

use crate::augment::FeatureGrid;
use crate::error::{param, Error, Result};
use crate::numerics::LogitVector;
use crate::rng::SeedStream;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Input width, hidden width and class count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub features: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            features: 40,
            hidden: 32,
            classes: 4,
        }
    }
}

/// Every parameter and statistic of the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `F × H`.
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    /// `H × C`.
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub eps: f64,
}

impl ModelParams {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            features: self.w1.nrows(),
            hidden: self.w1.ncols(),
            classes: self.w2.ncols(),
        }
    }

    fn validate(&self) -> Result<()> {
        let d = self.dims();
        let h = d.hidden;
        let shapes_ok = self.b1.len() == h
            && self.gamma.len() == h
            && self.beta.len() == h
            && self.running_mean.len() == h
            && self.running_var.len() == h
            && self.w2.nrows() == h
            && self.b2.len() == d.classes;
        if !shapes_ok {
            return Err(Error::Dimension("inconsistent parameter shapes".into()));
        }
        if d.classes < 2 {
            return Err(Error::Dimension("need at least 2 classes".into()));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(param("eps", "must be > 0"));
        }
        if self.running_var.iter().any(|&v| v.is_nan() || v <= 0.0) {
            return Err(param("running_var", "entries must be > 0"));
        }
        let all = self
            .w1
            .iter()
            .chain(&self.b1)
            .chain(&self.gamma)
            .chain(&self.beta)
            .chain(&self.running_mean)
            .chain(&self.running_var)
            .chain(&self.w2)
            .chain(&self.b2);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(param("parameters", "must be finite"));
        }
        Ok(())
    }
}

/// Per-feature normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

/// Where the normalization layer takes `μ, v` from.
#[derive(Debug, Clone, PartialEq)]
pub enum NormMode {
    /// Stored running statistics.
    Inference,
    /// Statistics of the current batch, over all frames of all items.
    BatchStats,
    /// Externally supplied statistics, treated as constants.
    Fixed(NormStats),
}

/// Gradients w.r.t. the adaptable affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub d_gamma: Array1<f64>,
    pub d_beta: Array1<f64>,
}

impl ParamGrads {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            d_gamma: Array1::zeros(hidden),
            d_beta: Array1::zeros(hidden),
        }
    }

    /// L2 norm over the concatenated `(γ, β)` gradient.
    pub fn l2_norm(&self) -> f64 {
        self.d_gamma
            .iter()
            .chain(&self.d_beta)
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        self.d_gamma += &other.d_gamma;
        self.d_beta += &other.d_beta;
    }
}

/// Gradients w.r.t. every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct FullGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

struct ItemCache {
    input: Array2<f64>,
    normalized: Array2<f64>,
    /// 1.0 where the post-affine activation is positive.
    active: Array2<f64>,
    pooled: Array1<f64>,
}

/// Activations saved by a forward pass for the matching backward pass.
pub struct ForwardCache {
    items: Vec<ItemCache>,
    inv_std: Array1<f64>,
    batch_stats: bool,
    stats: NormStats,
    version: u64,
}

impl ForwardCache {
    /// Statistics the normalization layer used.
    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Plain SGD: `p ← p - lr · g`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) {
    assert_eq!(params.len(), grads.len());
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
}

fn sgd_array<D: ndarray::Dimension>(p: &mut ndarray::Array<f64, D>, g: &ndarray::Array<f64, D>, lr: f64) {
    Zip::from(p).and(g).for_each(|p, &g| *p -= lr * g);
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormPoolClassifier {
    params: ModelParams,
    version: u64,
}

impl NormPoolClassifier {
    /// Seeded initialization: `W1, W2 ~ U(-a, a)` with `a = 1/√fan_in`,
    /// `γ = 1`, zero biases and `β`, unit running variance.
    pub fn init(dims: ModelDims, seed: SeedStream) -> Self {
        let mut rng = seed.rng();
        let mut uniform = |rows: usize, cols: usize| {
            let a = 1.0 / (rows as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-a..a))
        };
        let w1 = uniform(dims.features, dims.hidden);
        let w2 = uniform(dims.hidden, dims.classes);
        let h = dims.hidden;
        Self {
            params: ModelParams {
                w1,
                b1: Array1::zeros(h),
                gamma: Array1::ones(h),
                beta: Array1::zeros(h),
                running_mean: Array1::zeros(h),
                running_var: Array1::ones(h),
                w2,
                b2: Array1::zeros(dims.classes),
                eps: DEFAULT_EPS,
            },
            version: 0,
        }
    }

    pub fn from_params(params: ModelParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params, version: 0 })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Mutable access; invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut ModelParams {
        self.version += 1;
        &mut self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn dims(&self) -> ModelDims {
        self.params.dims()
    }

    fn check_input(&self, x: &FeatureGrid) -> Result<()> {
        if x.bins() != self.params.w1.nrows() {
            return Err(Error::Dimension(format!(
                "grid has {} bins, model expects {}",
                x.bins(),
                self.params.w1.nrows()
            )));
        }
        Ok(())
    }

    fn pre_norm(&self, x: &FeatureGrid) -> Array2<f64> {
        x.data().dot(&self.params.w1) + &self.params.b1
    }

    fn stats_of(pre: &[Array2<f64>]) -> Result<NormStats> {
        let h = pre.first().ok_or(Error::Empty("batch"))?.ncols();
        let frames: usize = pre.iter().map(|a| a.nrows()).sum();
        let n = frames as f64;
        let mut mean = Array1::<f64>::zeros(h);
        for a in pre {
            mean += &a.sum_axis(Axis(0));
        }
        mean /= n;
        let mut var = Array1::<f64>::zeros(h);
        for a in pre {
            let centered = a - &mean;
            var += &(&centered * &centered).sum_axis(Axis(0));
        }
        var /= n;
        if mean.iter().chain(&var).any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("batch statistics overflowed".into()));
        }
        Ok(NormStats { mean, var })
    }

    /// Per-feature mean and (biased) variance of the pre-normalization
    /// activations over all frames of `batch`.
    pub fn batch_stats(&self, batch: &[FeatureGrid]) -> Result<NormStats> {
        for x in batch {
            self.check_input(x)?;
        }
        let pre: Vec<Array2<f64>> = batch.iter().map(|x| self.pre_norm(x)).collect();
        Self::stats_of(&pre)
    }

    /// Logits for every item of `batch`, plus the cache backward needs.
    pub fn forward(
        &self,
        batch: &[FeatureGrid],
        mode: &NormMode,
    ) -> Result<(Vec<LogitVector>, ForwardCache)> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        for x in batch {
            self.check_input(x)?;
        }
        let p = &self.params;
        let pre: Vec<Array2<f64>> = batch.iter().map(|x| self.pre_norm(x)).collect();
        let stats = match mode {
            NormMode::Inference => NormStats {
                mean: p.running_mean.clone(),
                var: p.running_var.clone(),
            },
            NormMode::BatchStats => Self::stats_of(&pre)?,
            NormMode::Fixed(s) => {
                if s.mean.len() != p.gamma.len() || s.var.len() != p.gamma.len() {
                    return Err(Error::Dimension("fixed stats width".into()));
                }
                s.clone()
            }
        };
        let inv_std = stats.var.mapv(|v| 1.0 / (v + p.eps).sqrt());

        let mut logits = Vec::with_capacity(batch.len());
        let mut items = Vec::with_capacity(batch.len());
        for (x, a) in batch.iter().zip(pre) {
            let normalized = (a - &stats.mean) * &inv_std;
            let y = &normalized * &p.gamma + &p.beta;
            let active = y.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
            let h = y.mapv(|v| v.max(0.0));
            let pooled = h.mean_axis(Axis(0)).expect("non-empty grid");
            let z = pooled.dot(&p.w2) + &p.b2;
            logits.push(LogitVector::new(z.to_vec())?);
            items.push(ItemCache {
                input: x.data().clone(),
                normalized,
                active,
                pooled,
            });
        }
        let cache = ForwardCache {
            items,
            inv_std,
            batch_stats: matches!(mode, NormMode::BatchStats),
            stats,
            version: self.version,
        };
        Ok((logits, cache))
    }

    /// Logits only, in inference mode.
    pub fn predict(&self, batch: &[FeatureGrid]) -> Result<Vec<LogitVector>> {
        Ok(self.forward(batch, &NormMode::Inference)?.0)
    }

    fn check_cache(&self, cache: &ForwardCache, d_logits: &[Vec<f64>]) -> Result<()> {
        if cache.version != self.version {
            return Err(Error::StaleCache);
        }
        if d_logits.len() != cache.items.len() {
            return Err(Error::Dimension(format!(
                "{} upstream gradients for {} cached items",
                d_logits.len(),
                cache.items.len()
            )));
        }
        let c = self.params.w2.ncols();
        if d_logits.iter().any(|d| d.len() != c) {
            return Err(Error::Dimension("upstream gradient width".into()));
        }
        Ok(())
    }

    /// Upstream gradient at the post-affine activations of one item.
    fn d_affine_out(&self, item: &ItemCache, d_logit: &[f64]) -> Array2<f64> {
        let dz = Array1::from(d_logit.to_vec());
        let dg = self.params.w2.dot(&dz) / item.active.nrows() as f64;
        &item.active * &dg
    }

    /// Gradients of the batch loss w.r.t. `γ` and `β` only.
    pub fn backward_affine(&self, cache: &ForwardCache, d_logits: &[Vec<f64>]) -> Result<ParamGrads> {
        self.check_cache(cache, d_logits)?;
        let mut grads = ParamGrads::zeros(self.params.gamma.len());
        for (item, d) in cache.items.iter().zip(d_logits) {
            let dy = self.d_affine_out(item, d);
            grads.d_gamma += &(&dy * &item.normalized).sum_axis(Axis(0));
            grads.d_beta += &dy.sum_axis(Axis(0));
        }
        Ok(grads)
    }

    /// Gradients of the batch loss w.r.t. every trainable parameter,
    /// differentiating through the batch statistics when they were used.
    pub fn backward_full(&self, cache: &ForwardCache, d_logits: &[Vec<f64>]) -> Result<FullGrads> {
        self.check_cache(cache, d_logits)?;
        let p = &self.params;
        let d = p.dims();
        let mut g = FullGrads {
            w1: Array2::zeros((d.features, d.hidden)),
            b1: Array1::zeros(d.hidden),
            gamma: Array1::zeros(d.hidden),
            beta: Array1::zeros(d.hidden),
            w2: Array2::zeros((d.hidden, d.classes)),
            b2: Array1::zeros(d.classes),
        };
        let mut d_norm = Vec::with_capacity(cache.items.len());
        for (item, dl) in cache.items.iter().zip(d_logits) {
            let dz = Array1::from(dl.to_vec());
            let outer = item
                .pooled
                .view()
                .insert_axis(Axis(1))
                .dot(&dz.view().insert_axis(Axis(0)));
            g.w2 += &outer;
            g.b2 += &dz;
            let dy = self.d_affine_out(item, dl);
            g.gamma += &(&dy * &item.normalized).sum_axis(Axis(0));
            g.beta += &dy.sum_axis(Axis(0));
            d_norm.push(dy * &p.gamma);
        }

        // Backward through normalization to the pre-norm activations.
        let d_pre: Vec<Array2<f64>> = if cache.batch_stats {
            let frames: usize = cache.items.iter().map(|it| it.normalized.nrows()).sum();
            let n = frames as f64;
            let mut sum_dn = Array1::<f64>::zeros(d.hidden);
            let mut sum_dn_n = Array1::<f64>::zeros(d.hidden);
            for (dn, item) in d_norm.iter().zip(&cache.items) {
                sum_dn += &dn.sum_axis(Axis(0));
                sum_dn_n += &(dn * &item.normalized).sum_axis(Axis(0));
            }
            d_norm
                .iter()
                .zip(&cache.items)
                .map(|(dn, item)| {
                    let inner = dn * n - &sum_dn - &(&item.normalized * &sum_dn_n);
                    inner * &(&cache.inv_std / n)
                })
                .collect()
        } else {
            d_norm.iter().map(|dn| dn * &cache.inv_std).collect()
        };

        for (da, item) in d_pre.iter().zip(&cache.items) {
            g.w1 += &item.input.t().dot(da);
            g.b1 += &da.sum_axis(Axis(0));
        }
        Ok(g)
    }

    /// SGD on `(γ, β)` only.
    pub fn apply_affine_step(&mut self, grads: &ParamGrads, lr: f64) -> Result<()> {
        check_lr(lr)?;
        let p = self.params_mut();
        sgd_array(&mut p.gamma, &grads.d_gamma, lr);
        sgd_array(&mut p.beta, &grads.d_beta, lr);
        Ok(())
    }

    /// SGD on every trainable parameter.
    pub fn apply_full_step(&mut self, grads: &FullGrads, lr: f64) -> Result<()> {
        check_lr(lr)?;
        let p = self.params_mut();
        sgd_array(&mut p.w1, &grads.w1, lr);
        sgd_array(&mut p.b1, &grads.b1, lr);
        sgd_array(&mut p.gamma, &grads.gamma, lr);
        sgd_array(&mut p.beta, &grads.beta, lr);
        sgd_array(&mut p.w2, &grads.w2, lr);
        sgd_array(&mut p.b2, &grads.b2, lr);
        Ok(())
    }

    /// Replace the running statistics, flooring the variance at `eps`.
    pub fn set_running_stats(&mut self, stats: &NormStats) {
        let p = self.params_mut();
        let eps = p.eps;
        p.running_mean.assign(&stats.mean);
        p.running_var.assign(&stats.var.mapv(|v| v.max(eps)));
    }

    /// `running ← (1 - m) · running + m · batch`.
    pub fn blend_running_stats(&mut self, stats: &NormStats, momentum: f64) {
        let p = self.params_mut();
        let eps = p.eps;
        p.running_mean = &p.running_mean * (1.0 - momentum) + &stats.mean * momentum;
        p.running_var = (&p.running_var * (1.0 - momentum) + &stats.var * momentum).mapv(|v| v.max(eps));
    }

    /// Test-time batch normalization: running statistics become the
    /// statistics of `batch`.
    pub fn update_bn_stats(&mut self, batch: &[FeatureGrid]) -> Result<NormStats> {
        let stats = self.batch_stats(batch)?;
        self.set_running_stats(&stats);
        Ok(stats)
    }
}

fn check_lr(lr: f64) -> Result<()> {
    if lr > 0.0 && lr.is_finite() {
        Ok(())
    } else {
        Err(param("lr", format!("must be > 0, got {lr}")))
    }
}
