//! Finite-difference verification of every analytic gradient in the crate.
//!
//! Relative error of an analytic vector `a` against its numeric estimate `n`
//! is `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, 1e-3)`; the floor keeps vanishing
//! gradients from turning round-off into large ratios.

use std::io::Write;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::adapt::{imkws_gradients, plan_imkws, imkws_objective, tent_gradients, Ablation, AdaptConfig, Method};
use crate::augment::{FeatureGrid, MaskPolicy};
use crate::error::{param, Result};
use crate::losses::{consistency_grad, consistency_loss, dem_grad, dem_grad_tempered, dem_loss, DemParams};
use crate::model::{ModelDims, NormMode, NormPoolClassifier};
use crate::numerics::LogitVector;
use crate::rng::SeedStream;
use crate::stream::UnlabeledBatch;

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-3;
/// Random tiny models per model suite.
pub const MODEL_INSTANCES: usize = 20;

/// Called on every analytic gradient before comparison, with the suite name.
/// The identity hook is the normal mode; anything else is a negative control.
pub type Hook<'a> = &'a dyn Fn(&str, &mut [f64]);

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub suite: String,
    pub cases: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub trials: usize,
    pub suites: Vec<SuiteResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteResult::passed)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "suite,cases,max_rel_err,tolerance,passed")?;
        for s in &self.suites {
            writeln!(
                out,
                "{},{},{:.6e},{:e},{}",
                s.suite,
                s.cases,
                s.max_rel_err,
                s.tolerance,
                s.passed()
            )?;
        }
        Ok(())
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }
}

pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / inf(analytic).max(inf(numeric)).max(REL_FLOOR)
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric_grad(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let dn = f(&probe);
            probe[i] = x[i];
            (up - dn) / (2.0 * h)
        })
        .collect()
}

fn logits(v: &[f64]) -> LogitVector {
    LogitVector::new(v.to_vec()).expect("finite logits")
}

fn random_logits<R: Rng>(rng: &mut R, classes: usize) -> Vec<f64> {
    (0..classes).map(|_| rng.random_range(-10.0..=10.0)).collect()
}

const CLASS_COUNTS: [usize; 3] = [2, 4, 10];
pub const ALPHAS: [f64; 3] = [0.6, 0.8, 1.0];

struct Tracker {
    suite: &'static str,
    cases: usize,
    max: f64,
    tolerance: f64,
}

impl Tracker {
    fn new(suite: &'static str, tolerance: f64) -> Self {
        Self {
            suite,
            cases: 0,
            max: 0.0,
            tolerance,
        }
    }

    fn check(&mut self, hook: Hook<'_>, mut analytic: Vec<f64>, numeric: &[f64]) {
        hook(self.suite, &mut analytic);
        self.cases += 1;
        self.max = self.max.max(rel_err(&analytic, numeric));
    }

    fn finish(self) -> SuiteResult {
        SuiteResult {
            suite: self.suite.to_string(),
            cases: self.cases,
            max_rel_err: self.max,
            tolerance: self.tolerance,
        }
    }
}

/// `dem_grad(z, α)` against differences of `T_1(z) + α·lse(z)`.
pub fn check_dem(stream: SeedStream, trials: usize, hook: Hook<'_>) -> SuiteResult {
    let mut rng = stream.rng();
    let mut t = Tracker::new("dem", TOLERANCE);
    for i in 0..trials {
        let c = CLASS_COUNTS[i % CLASS_COUNTS.len()];
        let alpha = ALPHAS[(i / CLASS_COUNTS.len()) % ALPHAS.len()];
        let params = DemParams::new(1.0, alpha).expect("valid alpha");
        let z = random_logits(&mut rng, c);
        let numeric = numeric_grad(&z, FD_STEP, |v| dem_loss(&logits(v), &params));
        t.check(hook, dem_grad(&logits(&z), alpha), &numeric);
    }
    t.finish()
}

pub fn check_dem_tempered(stream: SeedStream, trials: usize, hook: Hook<'_>) -> SuiteResult {
    let mut rng = stream.rng();
    let mut t = Tracker::new("dem_tempered", TOLERANCE);
    for i in 0..trials {
        let c = CLASS_COUNTS[i % CLASS_COUNTS.len()];
        let tau = rng.random_range(0.5..2.0);
        let alpha = rng.random_range(0.5..=1.0);
        let params = DemParams::new(tau, alpha).expect("valid params");
        let z = random_logits(&mut rng, c);
        let numeric = numeric_grad(&z, FD_STEP, |v| dem_loss(&logits(v), &params));
        t.check(hook, dem_grad_tempered(&logits(&z), &params), &numeric);
    }
    t.finish()
}

/// All three arguments of the consistency loss, stacked.
pub fn check_consistency(stream: SeedStream, trials: usize, hook: Hook<'_>) -> SuiteResult {
    let mut rng = stream.rng();
    let mut t = Tracker::new("consistency", TOLERANCE);
    for i in 0..trials {
        let c = CLASS_COUNTS[i % CLASS_COUNTS.len()];
        let x: Vec<f64> = (0..3 * c).map(|_| rng.random_range(-10.0..=10.0)).collect();
        let loss = |v: &[f64]| {
            consistency_loss(&logits(&v[..c]), &logits(&v[c..2 * c]), &logits(&v[2 * c..]))
                .expect("matching widths")
        };
        let numeric = numeric_grad(&x, FD_STEP, loss);
        let g = consistency_grad(&logits(&x[..c]), &logits(&x[c..2 * c]), &logits(&x[2 * c..]))
            .expect("matching widths");
        let analytic = [g.z, g.z_tilde, g.z_hat].concat();
        t.check(hook, analytic, &numeric);
    }
    t.finish()
}

fn random_grid<R: Rng>(rng: &mut R, frames: usize, bins: usize) -> FeatureGrid {
    FeatureGrid::new(Array2::from_shape_fn((frames, bins), |_| rng.sample(StandardNormal))).expect("finite")
}

/// A model with every parameter and statistic randomized, so no unit
/// sits exactly at the ReLU kink by construction.
pub fn random_model(dims: ModelDims, stream: SeedStream) -> NormPoolClassifier {
    let mut model = NormPoolClassifier::init(dims, stream.derive_named("init"));
    let mut rng = stream.derive_named("perturb").rng();
    let p = model.params_mut();
    p.gamma.mapv_inplace(|_| rng.random_range(0.5..1.5));
    p.beta.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    p.running_mean.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    p.running_var.mapv_inplace(|_| rng.random_range(0.5..2.0));
    p.b2.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    model
}

/// Loss whose upstream gradient is a per-item weighted DEM gradient.
fn weighted_dem_loss(z: &[LogitVector], coeffs: &[f64], params: &DemParams) -> f64 {
    z.iter().zip(coeffs).map(|(z, c)| c * dem_loss(z, params)).sum()
}

fn weighted_dem_upstream(z: &[LogitVector], coeffs: &[f64], alpha: f64) -> Vec<Vec<f64>> {
    z.iter()
        .zip(coeffs)
        .map(|(z, c)| dem_grad(z, alpha).into_iter().map(|g| g * c).collect())
        .collect()
}

struct ModelCase {
    model: NormPoolClassifier,
    batch: Vec<FeatureGrid>,
    coeffs: Vec<f64>,
    mode: NormMode,
}

fn model_cases(stream: SeedStream, dims: ModelDims) -> Vec<ModelCase> {
    (0..MODEL_INSTANCES)
        .map(|i| {
            let s = stream.derive(i as u64);
            let model = random_model(dims, s.derive_named("model"));
            let mut rng = s.derive_named("data").rng();
            let n = 2 + i % 3;
            let frames = 2 + i % 2;
            let batch = (0..n).map(|_| random_grid(&mut rng, frames, dims.features)).collect();
            let coeffs = (0..n).map(|_| rng.random_range(0.2..2.0)).collect();
            let mode = if i % 2 == 0 {
                NormMode::BatchStats
            } else {
                NormMode::Inference
            };
            ModelCase {
                model,
                batch,
                coeffs,
                mode,
            }
        })
        .collect()
}

const MODEL_ALPHA: f64 = 0.8;

fn case_loss(case: &ModelCase, model: &NormPoolClassifier) -> f64 {
    let params = DemParams::new(1.0, MODEL_ALPHA).expect("valid alpha");
    let z = model.forward(&case.batch, &case.mode).expect("valid batch").0;
    weighted_dem_loss(&z, &case.coeffs, &params)
}

/// Numeric gradient w.r.t. a flat view of some parameters.
fn model_numeric(
    case: &ModelCase,
    read: impl Fn(&NormPoolClassifier) -> Vec<f64>,
    write: impl Fn(&mut NormPoolClassifier, &[f64]),
) -> Vec<f64> {
    let x = read(&case.model);
    numeric_grad(&x, FD_STEP, |v| {
        let mut m = case.model.clone();
        write(&mut m, v);
        case_loss(case, &m)
    })
}

fn affine_flat(m: &NormPoolClassifier) -> Vec<f64> {
    let p = m.params();
    p.gamma.iter().chain(&p.beta).copied().collect()
}

fn set_affine(m: &mut NormPoolClassifier, v: &[f64]) {
    let h = m.dims().hidden;
    let p = m.params_mut();
    p.gamma.assign(&ndarray::ArrayView1::from(&v[..h]));
    p.beta.assign(&ndarray::ArrayView1::from(&v[h..]));
}

pub fn check_model_affine(stream: SeedStream, hook: Hook<'_>) -> SuiteResult {
    let dims = ModelDims {
        features: 5,
        hidden: 4,
        classes: 3,
    };
    let mut t = Tracker::new("model_affine", TOLERANCE);
    for case in model_cases(stream, dims) {
        let (z, cache) = case.model.forward(&case.batch, &case.mode).expect("valid batch");
        let up = weighted_dem_upstream(&z, &case.coeffs, MODEL_ALPHA);
        let g = case.model.backward_affine(&cache, &up).expect("fresh cache");
        let analytic = g.d_gamma.iter().chain(&g.d_beta).copied().collect();
        let numeric = model_numeric(&case, affine_flat, set_affine);
        t.check(hook, analytic, &numeric);
    }
    t.finish()
}

fn full_flat(m: &NormPoolClassifier) -> Vec<f64> {
    let p = m.params();
    p.w1.iter()
        .chain(&p.b1)
        .chain(&p.gamma)
        .chain(&p.beta)
        .chain(&p.w2)
        .chain(&p.b2)
        .copied()
        .collect()
}

fn set_full(m: &mut NormPoolClassifier, v: &[f64]) {
    let p = m.params_mut();
    let mut it = v.iter().copied();
    for slot in p
        .w1
        .iter_mut()
        .chain(p.b1.iter_mut())
        .chain(p.gamma.iter_mut())
        .chain(p.beta.iter_mut())
        .chain(p.w2.iter_mut())
        .chain(p.b2.iter_mut())
    {
        *slot = it.next().expect("flat length");
    }
}

pub fn check_model_full(stream: SeedStream, hook: Hook<'_>) -> SuiteResult {
    let dims = ModelDims {
        features: 3,
        hidden: 4,
        classes: 3,
    };
    let mut t = Tracker::new("model_full", TOLERANCE);
    for case in model_cases(stream, dims) {
        let (z, cache) = case.model.forward(&case.batch, &case.mode).expect("valid batch");
        let up = weighted_dem_upstream(&z, &case.coeffs, MODEL_ALPHA);
        let g = case.model.backward_full(&cache, &up).expect("fresh cache");
        let analytic = g
            .w1
            .iter()
            .chain(&g.b1)
            .chain(&g.gamma)
            .chain(&g.beta)
            .chain(&g.w2)
            .chain(&g.b2)
            .copied()
            .collect();
        let numeric = model_numeric(&case, full_flat, set_full);
        t.check(hook, analytic, &numeric);
    }
    t.finish()
}

fn tiny_batch(stream: SeedStream, index: usize, n: usize, frames: usize, bins: usize) -> UnlabeledBatch {
    let mut rng = stream.rng();
    UnlabeledBatch {
        batch_index: index,
        grids: (0..n).map(|_| random_grid(&mut rng, frames, bins)).collect(),
    }
}

/// The full adaptation objective for a frozen plan (selection, weights and
/// views fixed), differentiated w.r.t. `(γ, β)`.
pub fn check_imkws_objective(stream: SeedStream, hook: Hook<'_>) -> SuiteResult {
    let dims = ModelDims {
        features: 6,
        hidden: 4,
        classes: 4,
    };
    let mut t = Tracker::new("imkws_objective", TOLERANCE);
    for i in 0..MODEL_INSTANCES {
        let s = stream.derive(i as u64);
        let model = random_model(dims, s.derive_named("model"));
        let batch = tiny_batch(s.derive_named("batch"), i, 6, 8, dims.features);
        let mut config = AdaptConfig {
            mask_policy: MaskPolicy {
                n_time_masks: 1,
                max_time_len: 3,
                n_freq_masks: 1,
                max_freq_len: 2,
            },
            ..AdaptConfig::default()
        };
        // Loose thresholds so most cases exercise a non-empty selection.
        config.thresholds.tau_dem = 50.0;
        config.thresholds.tau_pkc = -1.0;
        config.ablation.use_dem = i % 4 != 1;
        config.ablation.use_consistency = i % 4 != 2;
        config.ablation.use_selection = i % 4 != 3;
        let plan = plan_imkws(&model, &batch, &config, s.derive_named("views")).expect("valid plan");
        let (_, g) = imkws_objective(&model, &batch, &plan, &config).expect("valid objective");
        let analytic = g.d_gamma.iter().chain(&g.d_beta).copied().collect();
        let x = affine_flat(&model);
        let numeric = numeric_grad(&x, FD_STEP, |v| {
            let mut m = model.clone();
            set_affine(&mut m, v);
            imkws_objective(&m, &batch, &plan, &config).expect("valid objective").0
        });
        t.check(hook, analytic, &numeric);
    }
    t.finish()
}

/// `α = 1` on uniform logits is a stationary point; the analytic gradient
/// must be exactly zero. Reported as the largest absolute entry.
pub fn check_uniform_zero(hook: Hook<'_>) -> SuiteResult {
    let mut t = Tracker::new("uniform_zero", 0.0);
    for c in CLASS_COUNTS {
        for level in [-3.0, 0.0, 7.5] {
            let mut g = dem_grad(&logits(&vec![level; c]), 1.0);
            hook(t.suite, &mut g);
            t.cases += 1;
            t.max = g.iter().fold(t.max, |m, v| m.max(v.abs()));
        }
    }
    t.finish()
}

/// ImKWS with every component off must produce the Tent gradient bit for
/// bit. Reported as the largest absolute difference.
pub fn check_tent_reduction(stream: SeedStream, batches: usize, hook: Hook<'_>) -> SuiteResult {
    let dims = ModelDims {
        features: 6,
        hidden: 5,
        classes: 4,
    };
    let model = random_model(dims, stream.derive_named("model"));
    let config = AdaptConfig {
        method: Method::Imkws,
        ablation: Ablation::none(),
        ..AdaptConfig::default()
    };
    let mut t = Tracker::new("tent_reduction", 0.0);
    for b in 0..batches {
        let batch = tiny_batch(stream.derive(b as u64), b, 8, 5, dims.features);
        let tent = tent_gradients(&model, &batch.grids).expect("valid batch");
        let imkws = imkws_gradients(&model, &batch, &config, stream.derive_named("views")).expect("valid batch");
        let mut a: Vec<f64> = imkws.grads.d_gamma.iter().chain(&imkws.grads.d_beta).copied().collect();
        hook(t.suite, &mut a);
        let want = tent.grads.d_gamma.iter().chain(&tent.grads.d_beta);
        t.cases += 1;
        t.max = a
            .iter()
            .zip(want)
            .fold(t.max, |m, (x, y)| if x.to_bits() == y.to_bits() { m } else { m.max((x - y).abs().max(f64::MIN_POSITIVE)) });
    }
    t.finish()
}

/// Every suite, with `trials` random cases for the loss-level checks.
pub fn run_gradcheck(seed: u64, trials: usize) -> Result<GradcheckReport> {
    run_gradcheck_with(seed, trials, &|_, _| {})
}

pub fn run_gradcheck_with(seed: u64, trials: usize, hook: Hook<'_>) -> Result<GradcheckReport> {
    if trials == 0 {
        return Err(param("trials", "must be >= 1"));
    }
    let root = SeedStream::new(seed);
    let suites = vec![
        check_dem(root.derive_named("dem"), trials, hook),
        check_dem_tempered(root.derive_named("dem_tempered"), trials, hook),
        check_consistency(root.derive_named("consistency"), trials, hook),
        check_model_affine(root.derive_named("model_affine"), hook),
        check_model_full(root.derive_named("model_full"), hook),
        check_imkws_objective(root.derive_named("imkws"), hook),
        check_uniform_zero(hook),
        check_tent_reduction(root.derive_named("tent"), 10, hook),
    ];
    Ok(GradcheckReport {
        seed,
        trials,
        suites,
    })
}
