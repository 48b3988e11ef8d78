//! Online, single-pass test-time adaptation.
//!
//! Every batch is predicted first and adapted on second: predictions come
//! from the forward pass that precedes the batch's own parameter update.
//! Gradient methods update only the normalization affine parameters `(γ, β)`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::{make_views, FeatureGrid, MaskPolicy, Views};
use crate::error::{param, Error, Result};
use crate::losses::{
    dem_grad, entropy_of_logits, sample_weight, weighted_objective, weighted_objective_grads,
    DemParams, WeightParams, WeightedSample,
};
use crate::model::{NormMode, NormPoolClassifier, NormStats, ParamGrads};
use crate::numerics::LogitVector;
use crate::rng::SeedStream;
use crate::select::{select_batch, selection_scores, SelectionThresholds};
use crate::stream::UnlabeledBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Unadapted,
    Tbn,
    Tent,
    Imkws,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Unadapted, Method::Tbn, Method::Tent, Method::Imkws];

    pub fn name(self) -> &'static str {
        match self {
            Method::Unadapted => "unadapted",
            Method::Tbn => "tbn",
            Method::Tent => "tent",
            Method::Imkws => "imkws",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| param("method", format!("unknown method `{s}`")))
    }
}

/// Component switches for ablations. All on for the full method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Off: plain entropy replaces the decoupled loss in selection and objective.
    pub use_dem: bool,
    /// Off: the consistency term is dropped.
    pub use_consistency: bool,
    /// Off: every sample passes the filter (weights still apply).
    pub use_selection: bool,
    /// Off: every selected sample has weight 1.
    pub use_weighting: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_dem: true,
            use_consistency: true,
            use_selection: true,
            use_weighting: true,
        }
    }
}

impl Ablation {
    /// Every component off: the objective collapses to mean entropy.
    pub fn none() -> Self {
        Self {
            use_dem: false,
            use_consistency: false,
            use_selection: false,
            use_weighting: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub method: Method,
    pub dem: DemParams,
    pub weights: WeightParams,
    pub thresholds: SelectionThresholds,
    pub mask_policy: MaskPolicy,
    pub lr: f64,
    pub batch_size: usize,
    pub ablation: Ablation,
    /// Copy each batch's statistics into the running statistics after the
    /// update, so inference-mode forwards track the target domain.
    pub refresh_running_stats: bool,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            method: Method::Imkws,
            dem: DemParams::default(),
            weights: WeightParams::default(),
            thresholds: SelectionThresholds::default(),
            mask_policy: MaskPolicy::default(),
            lr: 1e-4,
            batch_size: 128,
            ablation: Ablation::default(),
            refresh_running_stats: true,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn for_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(param("lr", format!("must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(param("batch_size", "must be >= 1"));
        }
        WeightParams::new(self.weights.sigma, self.weights.lambda)?;
        SelectionThresholds::new(self.thresholds.tau_dem, self.thresholds.tau_pkc)?;
        Ok(())
    }

    /// Loss parameters after applying the `use_dem` switch.
    pub fn effective_dem(&self) -> DemParams {
        if self.ablation.use_dem {
            self.dem
        } else {
            DemParams::entropy()
        }
    }

    fn effective_lambda(&self) -> f64 {
        if self.ablation.use_consistency {
            self.weights.lambda
        } else {
            0.0
        }
    }
}

/// Telemetry for one processed batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub batch_index: usize,
    pub n_selected: usize,
    pub loss_total: f64,
    /// L2 norm of the `(γ, β)` gradient.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptTrace {
    pub records: Vec<BatchRecord>,
}

impl AdaptTrace {
    pub fn grad_norms(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.grad_norm).collect()
    }

    /// CSV with header `batch,n_selected,loss,grad_norm`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "batch,n_selected,loss,grad_norm")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{:.12e},{:.12e}",
                r.batch_index, r.n_selected, r.loss_total, r.grad_norm
            )?;
        }
        Ok(())
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }
}

/// Result of one adaptation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptOutcome {
    pub trace: AdaptTrace,
    /// Stream-ordered predicted classes.
    pub predictions: Vec<usize>,
}

/// Gradient step computed for one batch, before it is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGrads {
    pub grads: ParamGrads,
    pub loss: f64,
    pub n_selected: usize,
    pub predictions: Vec<usize>,
    pub stats: NormStats,
}

fn argmaxes(logits: &[LogitVector]) -> Vec<usize> {
    logits.iter().map(LogitVector::argmax).collect()
}

/// Mean-entropy gradients on a batch normalized with its own statistics.
pub fn tent_gradients(model: &NormPoolClassifier, grids: &[FeatureGrid]) -> Result<StepGrads> {
    let (logits, cache) = model.forward(grids, &NormMode::BatchStats)?;
    let scale = 1.0 / grids.len() as f64;
    let d_logits: Vec<Vec<f64>> = logits
        .iter()
        .map(|z| dem_grad(z, 1.0).into_iter().map(|g| g * scale).collect())
        .collect();
    let loss = logits.iter().map(entropy_of_logits).sum::<f64>() / grids.len() as f64;
    let grads = model.backward_affine(&cache, &d_logits)?;
    Ok(StepGrads {
        grads,
        loss,
        n_selected: grids.len(),
        predictions: argmaxes(&logits),
        stats: cache.stats().clone(),
    })
}

/// Everything about a batch that is decided before differentiation:
/// normalization statistics, views, selection and weights.
#[derive(Debug, Clone)]
pub struct ImkwsPlan {
    pub stats: NormStats,
    pub predictions: Vec<usize>,
    /// Consistency views for selected samples, in selection order.
    pub views: Option<Vec<Views>>,
    pub selected: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Forward the batch, draw views, run selection and resolve weights.
pub fn plan_imkws(
    model: &NormPoolClassifier,
    batch: &UnlabeledBatch,
    config: &AdaptConfig,
    stream: SeedStream,
) -> Result<ImkwsPlan> {
    let grids = &batch.grids;
    let (logits, cache) = model.forward(grids, &NormMode::BatchStats)?;
    let stats = cache.stats().clone();
    let fixed = NormMode::Fixed(stats.clone());
    let ab = &config.ablation;
    let dem = config.effective_dem();
    let need_prime = ab.use_selection || ab.use_weighting;
    let need_views = config.effective_lambda() != 0.0;

    let batch_stream = stream.derive(batch.batch_index as u64);
    let views: Option<Vec<Views>> = if need_prime || need_views {
        Some(
            grids
                .iter()
                .enumerate()
                .map(|(i, x)| make_views(x, &config.mask_policy, batch_stream.derive(i as u64)))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };

    let (selected, weights) = if need_prime {
        let views = views.as_ref().expect("views drawn");
        let primes: Vec<FeatureGrid> = views.iter().map(|v| v.prime.clone()).collect();
        let logits_prime = model.forward(&primes, &fixed)?.0;
        if ab.use_selection {
            let out = select_batch(&logits, &logits_prime, &config.thresholds, &dem, &config.weights)?;
            let selected: Vec<usize> = out.selected_indices().collect();
            let weights = selected
                .iter()
                .map(|&i| if ab.use_weighting { out.weights[i].expect("selected") } else { 1.0 })
                .collect();
            (selected, weights)
        } else {
            let (l_dem, l_pkc) = selection_scores(&logits, &logits_prime, &dem)?;
            let weights = l_dem
                .iter()
                .zip(&l_pkc)
                .map(|(&d, &p)| if ab.use_weighting { sample_weight(d, p, config.weights.sigma) } else { 1.0 })
                .collect();
            ((0..grids.len()).collect(), weights)
        }
    } else {
        ((0..grids.len()).collect(), vec![1.0; grids.len()])
    };

    let views = if need_views {
        views.map(|all| selected.iter().map(|&i| all[i].clone()).collect())
    } else {
        None
    };
    Ok(ImkwsPlan {
        stats,
        predictions: argmaxes(&logits),
        views,
        selected,
        weights,
    })
}

/// Objective value and `(γ, β)` gradients for a fixed plan at the model's
/// current parameters.
pub fn imkws_objective(
    model: &NormPoolClassifier,
    batch: &UnlabeledBatch,
    plan: &ImkwsPlan,
    config: &AdaptConfig,
) -> Result<(f64, ParamGrads)> {
    let hidden = model.dims().hidden;
    if plan.selected.is_empty() {
        return Ok((0.0, ParamGrads::zeros(hidden)));
    }
    let dem = config.effective_dem();
    let lambda = config.effective_lambda();
    let (logits, cache) = model.forward(&batch.grids, &NormMode::BatchStats)?;
    let fixed = NormMode::Fixed(plan.stats.clone());

    let view_pass = match &plan.views {
        Some(views) => {
            let tilde: Vec<FeatureGrid> = views.iter().map(|v| v.tilde.clone()).collect();
            let hat: Vec<FeatureGrid> = views.iter().map(|v| v.hat.clone()).collect();
            Some((model.forward(&tilde, &fixed)?, model.forward(&hat, &fixed)?))
        }
        None => None,
    };

    let samples: Vec<WeightedSample<'_>> = plan
        .selected
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let (z_tilde, z_hat) = match &view_pass {
                Some(((lt, _), (lh, _))) => (&lt[k], &lh[k]),
                None => (&logits[i], &logits[i]),
            };
            WeightedSample {
                z: &logits[i],
                z_tilde,
                z_hat,
                weight: plan.weights[k],
            }
        })
        .collect();
    let value = weighted_objective(&samples, &dem, lambda)?.value;
    let sample_grads = weighted_objective_grads(&samples, &dem, lambda)?;

    let classes = model.dims().classes;
    let mut d_orig = vec![vec![0.0; classes]; batch.grids.len()];
    for (&i, g) in plan.selected.iter().zip(&sample_grads) {
        d_orig[i] = g.z.clone();
    }
    let mut grads = model.backward_affine(&cache, &d_orig)?;
    if let Some(((_, cache_tilde), (_, cache_hat))) = &view_pass {
        let d_tilde: Vec<Vec<f64>> = sample_grads
            .iter()
            .map(|g| g.z_tilde.clone().expect("consistency active"))
            .collect();
        let d_hat: Vec<Vec<f64>> = sample_grads
            .iter()
            .map(|g| g.z_hat.clone().expect("consistency active"))
            .collect();
        grads.add_assign(&model.backward_affine(cache_tilde, &d_tilde)?);
        grads.add_assign(&model.backward_affine(cache_hat, &d_hat)?);
    }
    Ok((value, grads))
}

/// Selection, weighting and objective gradients for one batch.
pub fn imkws_gradients(
    model: &NormPoolClassifier,
    batch: &UnlabeledBatch,
    config: &AdaptConfig,
    stream: SeedStream,
) -> Result<StepGrads> {
    let plan = plan_imkws(model, batch, config, stream)?;
    let (loss, grads) = imkws_objective(model, batch, &plan, config)?;
    Ok(StepGrads {
        grads,
        loss,
        n_selected: plan.selected.len(),
        predictions: plan.predictions,
        stats: plan.stats,
    })
}

fn apply_step(
    model: &mut NormPoolClassifier,
    step: &StepGrads,
    batch_index: usize,
    config: &AdaptConfig,
) -> Result<BatchRecord> {
    if step.n_selected > 0 {
        model.apply_affine_step(&step.grads, config.lr)?;
    }
    if config.refresh_running_stats {
        model.set_running_stats(&step.stats);
    }
    Ok(BatchRecord {
        batch_index,
        n_selected: step.n_selected,
        loss_total: step.loss,
        grad_norm: step.grads.l2_norm(),
    })
}

/// One Tent update: mean-entropy gradient step on `(γ, β)`.
pub fn step_tent(
    model: &mut NormPoolClassifier,
    batch: &UnlabeledBatch,
    config: &AdaptConfig,
) -> Result<(StepGrads, BatchRecord)> {
    let step = tent_gradients(model, &batch.grids)?;
    let record = apply_step(model, &step, batch.batch_index, config)?;
    Ok((step, record))
}

/// One full ImKWS update.
pub fn step_imkws(
    model: &mut NormPoolClassifier,
    batch: &UnlabeledBatch,
    config: &AdaptConfig,
    stream: SeedStream,
) -> Result<(StepGrads, BatchRecord)> {
    let step = imkws_gradients(model, batch, config, stream)?;
    let record = apply_step(model, &step, batch.batch_index, config)?;
    Ok((step, record))
}

/// Test-time batch normalization: adopt the batch statistics, no gradient.
pub fn step_tbn(model: &mut NormPoolClassifier, batch: &UnlabeledBatch) -> Result<(Vec<usize>, BatchRecord)> {
    let logits = model.forward(&batch.grids, &NormMode::BatchStats)?.0;
    model.update_bn_stats(&batch.grids)?;
    let record = BatchRecord {
        batch_index: batch.batch_index,
        n_selected: 0,
        loss_total: 0.0,
        grad_norm: 0.0,
    };
    Ok((argmaxes(&logits), record))
}

/// Adapt `model` over the stream in one pass, recording pre-update predictions.
pub fn adapt_stream<I>(model: &mut NormPoolClassifier, stream: I, config: &AdaptConfig) -> Result<AdaptOutcome>
where
    I: IntoIterator<Item = UnlabeledBatch>,
{
    config.validate()?;
    let views_root = SeedStream::new(config.seed).derive_named("views");
    let mut trace = AdaptTrace::default();
    let mut predictions = Vec::new();
    for batch in stream {
        if batch.grids.is_empty() {
            return Err(Error::Empty("stream batch"));
        }
        let (preds, record) = match config.method {
            Method::Unadapted => {
                let preds = argmaxes(&model.predict(&batch.grids)?);
                let record = BatchRecord {
                    batch_index: batch.batch_index,
                    n_selected: 0,
                    loss_total: 0.0,
                    grad_norm: 0.0,
                };
                (preds, record)
            }
            Method::Tbn => step_tbn(model, &batch)?,
            Method::Tent => {
                let (step, record) = step_tent(model, &batch, config)?;
                (step.predictions, record)
            }
            Method::Imkws => {
                let (step, record) = step_imkws(model, &batch, config, views_root)?;
                (step.predictions, record)
            }
        };
        predictions.extend(preds);
        trace.records.push(record);
    }
    if trace.records.is_empty() {
        return Err(Error::Empty("stream"));
    }
    Ok(AdaptOutcome { trace, predictions })
}
