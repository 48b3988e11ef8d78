//! Decoupled entropy, multi-view consistency, pseudo-keyword consistency and
//! the weighted adaptation objective, with analytic gradients w.r.t. logits.
//!
//! Entropy splits exactly into a reward `T(z) = -Σ p_i z_i` and a penalty
//! `Q(z) = ln Σ exp(z_i)`. The reward gets its own temperature `τ` and the
//! penalty is scaled by `α ≤ 1`; with `τ = 1` the logit gradient is
//!
//! ```text
//! ∂L/∂z_j = p_j (Σ_i p_i z_i - z_j - (1 - α))
//! ```
//!
//! so `α < 1` subtracts `(1 - α) p_j` from the plain entropy gradient.

use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::numerics::{log_softmax, log_sum_exp, softmax_slice, LogitVector, ProbVector};

/// Temperature of the reward branch and scale of the penalty branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDemParams")]
pub struct DemParams {
    tau: f64,
    alpha: f64,
}

#[derive(Deserialize)]
struct RawDemParams {
    tau: f64,
    alpha: f64,
}

impl TryFrom<RawDemParams> for DemParams {
    type Error = Error;

    fn try_from(raw: RawDemParams) -> Result<Self> {
        Self::new(raw.tau, raw.alpha)
    }
}

impl DemParams {
    pub fn new(tau: f64, alpha: f64) -> Result<Self> {
        check_tau(tau)?;
        check_alpha(alpha)?;
        Ok(Self { tau, alpha })
    }

    /// `τ = 1, α = 1`: the decomposition reproduces plain entropy.
    pub fn entropy() -> Self {
        Self {
            tau: 1.0,
            alpha: 1.0,
        }
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

impl Default for DemParams {
    fn default() -> Self {
        Self {
            tau: 1.0,
            alpha: 0.8,
        }
    }
}

/// Sample-weight normalization `σ` and consistency coefficient `λ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightParams {
    pub sigma: f64,
    pub lambda: f64,
}

impl WeightParams {
    pub fn new(sigma: f64, lambda: f64) -> Result<Self> {
        if !sigma.is_finite() {
            return Err(param("sigma", "must be finite"));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(param("lambda", format!("must be >= 0, got {lambda}")));
        }
        Ok(Self { sigma, lambda })
    }
}

impl Default for WeightParams {
    fn default() -> Self {
        Self {
            sigma: 0.5,
            lambda: 1.0,
        }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(param("tau", format!("must be > 0, got {tau}")))
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(param("alpha", format!("must lie in (0, 1], got {alpha}")))
    }
}

fn check_same_len(a: &LogitVector, b: &LogitVector) -> Result<()> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(Error::Dimension(format!(
            "logit vectors have {} and {} classes",
            a.len(),
            b.len()
        )))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Reward branch `-Σ p_τi z_i` with `p_τ = softmax(z / τ)`.
pub fn reward_t(z: &LogitVector, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    Ok(reward_unchecked(z, tau))
}

fn reward_unchecked(z: &LogitVector, tau: f64) -> f64 {
    let p = softmax_slice(z.as_slice(), tau);
    -dot(&p, z.as_slice())
}

/// Penalty branch `α ln Σ exp(z_i)`.
pub fn penalty_q(z: &LogitVector, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(alpha * log_sum_exp(z))
}

/// Decoupled entropy `T_τ(z) + Q_α(z)`.
pub fn dem_loss(z: &LogitVector, params: &DemParams) -> f64 {
    reward_unchecked(z, params.tau) + params.alpha * log_sum_exp(z)
}

/// Plain Shannon entropy of `softmax(z)`, computed from logits.
pub fn entropy_of_logits(z: &LogitVector) -> f64 {
    let p = softmax_slice(z.as_slice(), 1.0);
    let lp = log_softmax(z);
    -dot(&p, &lp)
}

/// Closed-form gradient of `T_1 + Q_α` w.r.t. the logits.
///
/// Panics if `alpha` lies outside `(0, 1]`.
pub fn dem_grad(z: &LogitVector, alpha: f64) -> Vec<f64> {
    assert!(alpha > 0.0 && alpha <= 1.0, "alpha must lie in (0, 1]");
    let zs = z.as_slice();
    let p = softmax_slice(zs, 1.0);
    let mean = dot(&p, zs);
    let margin = 1.0 - alpha;
    p.iter()
        .zip(zs)
        .map(|(&pj, &zj)| pj * (mean - zj - margin))
        .collect()
}

/// Gradient of [`dem_loss`] for any temperature.
///
/// With `τ = 1` this is exactly [`dem_grad`]; otherwise the reward branch
/// contributes `-q_j - q_j (z_j - Σ q_i z_i) / τ` with `q = softmax(z / τ)`.
pub fn dem_grad_tempered(z: &LogitVector, params: &DemParams) -> Vec<f64> {
    if params.tau == 1.0 {
        return dem_grad(z, params.alpha);
    }
    let zs = z.as_slice();
    let q = softmax_slice(zs, params.tau);
    let p = softmax_slice(zs, 1.0);
    let mean_q = dot(&q, zs);
    (0..zs.len())
        .map(|j| -q[j] - q[j] * (zs[j] - mean_q) / params.tau + params.alpha * p[j])
        .collect()
}

/// Symmetric cross-entropy between the predictions for two views.
pub fn sce_loss(z: &LogitVector, z_tilde: &LogitVector) -> Result<f64> {
    check_same_len(z, z_tilde)?;
    let p = softmax_slice(z.as_slice(), 1.0);
    let q = softmax_slice(z_tilde.as_slice(), 1.0);
    let lp = log_softmax(z);
    let lq = log_softmax(z_tilde);
    Ok(-0.5 * (dot(&p, &lq) + dot(&q, &lp)))
}

/// Gradients of [`sce_loss`] w.r.t. both arguments.
pub fn sce_grad(z: &LogitVector, z_tilde: &LogitVector) -> Result<(Vec<f64>, Vec<f64>)> {
    check_same_len(z, z_tilde)?;
    let p = softmax_slice(z.as_slice(), 1.0);
    let q = softmax_slice(z_tilde.as_slice(), 1.0);
    let lp = log_softmax(z);
    let lq = log_softmax(z_tilde);
    let half_grad = |p: &[f64], q: &[f64], lq: &[f64]| -> Vec<f64> {
        // d/dz of -½(Σ p ln q + Σ q ln p), with p = softmax(z).
        let e_p_lq = dot(p, lq);
        (0..p.len())
            .map(|j| 0.5 * (-p[j] * (lq[j] - e_p_lq) + p[j] - q[j]))
            .collect()
    };
    Ok((half_grad(&p, &q, &lq), half_grad(&q, &p, &lp)))
}

/// `L_sce(z, z̃) + L_sce(z, ẑ)`.
pub fn consistency_loss(
    z: &LogitVector,
    z_tilde: &LogitVector,
    z_hat: &LogitVector,
) -> Result<f64> {
    Ok(sce_loss(z, z_tilde)? + sce_loss(z, z_hat)?)
}

/// Gradients of [`consistency_loss`] w.r.t. each of its three arguments.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyGrad {
    pub z: Vec<f64>,
    pub z_tilde: Vec<f64>,
    pub z_hat: Vec<f64>,
}

/// No stop-gradient: all three views receive gradient.
pub fn consistency_grad(
    z: &LogitVector,
    z_tilde: &LogitVector,
    z_hat: &LogitVector,
) -> Result<ConsistencyGrad> {
    let (gz_a, g_tilde) = sce_grad(z, z_tilde)?;
    let (gz_b, g_hat) = sce_grad(z, z_hat)?;
    Ok(ConsistencyGrad {
        z: gz_a.iter().zip(&gz_b).map(|(a, b)| a + b).collect(),
        z_tilde: g_tilde,
        z_hat: g_hat,
    })
}

/// Confidence drop of the pseudo-label `c = argmax p` between the original
/// and the transformed input: `p_c - p'_c`.
///
/// Panics if the two vectors have different lengths.
pub fn pkc_score(p: &ProbVector, p_prime: &ProbVector) -> f64 {
    assert_eq!(p.len(), p_prime.len(), "class count mismatch");
    let c = p.argmax();
    p.as_slice()[c] - p_prime.as_slice()[c]
}

/// `exp(σ - L_dem) + exp(L_pkc)`.
pub fn sample_weight(l_dem: f64, l_pkc: f64, sigma: f64) -> f64 {
    (sigma - l_dem).exp() + l_pkc.exp()
}

/// One selected sample: logits of the original and both augmented views,
/// plus its selection scores.
#[derive(Debug, Clone, Copy)]
pub struct SelectedSample<'a> {
    pub z: &'a LogitVector,
    pub z_tilde: &'a LogitVector,
    pub z_hat: &'a LogitVector,
    pub l_dem: f64,
    pub l_pkc: f64,
}

/// Objective value; `skip_update` is set when nothing was selected.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    pub skip_update: bool,
}

/// A sample entering the objective with an already-resolved weight.
#[derive(Debug, Clone, Copy)]
pub struct WeightedSample<'a> {
    pub z: &'a LogitVector,
    pub z_tilde: &'a LogitVector,
    pub z_hat: &'a LogitVector,
    pub weight: f64,
}

/// Per-sample logit gradients of the objective. View gradients are `None`
/// when the consistency term is inactive.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrads {
    pub z: Vec<f64>,
    pub z_tilde: Option<Vec<f64>>,
    pub z_hat: Option<Vec<f64>>,
}

/// Mean over selected samples of `w(x) · L_dem(z) + λ · L_consist(z, z̃, ẑ)`
/// with `w` from [`sample_weight`].
pub fn total_loss(
    selected: &[SelectedSample<'_>],
    params: &DemParams,
    wparams: &WeightParams,
) -> Result<TotalLoss> {
    let weighted: Vec<WeightedSample<'_>> = selected
        .iter()
        .map(|s| WeightedSample {
            z: s.z,
            z_tilde: s.z_tilde,
            z_hat: s.z_hat,
            weight: sample_weight(s.l_dem, s.l_pkc, wparams.sigma),
        })
        .collect();
    weighted_objective(&weighted, params, wparams.lambda)
}

/// Objective value for explicitly weighted samples.
pub fn weighted_objective(
    samples: &[WeightedSample<'_>],
    params: &DemParams,
    lambda: f64,
) -> Result<TotalLoss> {
    if samples.is_empty() {
        return Ok(TotalLoss {
            value: 0.0,
            skip_update: true,
        });
    }
    let mut acc = 0.0;
    for s in samples {
        acc += s.weight * dem_loss(s.z, params);
        if lambda != 0.0 {
            acc += lambda * consistency_loss(s.z, s.z_tilde, s.z_hat)?;
        }
    }
    Ok(TotalLoss {
        value: acc / samples.len() as f64,
        skip_update: false,
    })
}

/// Logit gradients of [`weighted_objective`]. Weights are treated as
/// constants. When `lambda == 0` the consistency term is not evaluated at all.
pub fn weighted_objective_grads(
    samples: &[WeightedSample<'_>],
    params: &DemParams,
    lambda: f64,
) -> Result<Vec<SampleGrads>> {
    let n = samples.len() as f64;
    samples
        .iter()
        .map(|s| {
            let scale = s.weight / n;
            let mut gz: Vec<f64> = dem_grad_tempered(s.z, params)
                .into_iter()
                .map(|g| g * scale)
                .collect();
            if lambda == 0.0 {
                return Ok(SampleGrads {
                    z: gz,
                    z_tilde: None,
                    z_hat: None,
                });
            }
            let cg = consistency_grad(s.z, s.z_tilde, s.z_hat)?;
            let cscale = lambda / n;
            for (g, c) in gz.iter_mut().zip(&cg.z) {
                *g += cscale * c;
            }
            Ok(SampleGrads {
                z: gz,
                z_tilde: Some(cg.z_tilde.iter().map(|g| g * cscale).collect()),
                z_hat: Some(cg.z_hat.iter().map(|g| g * cscale).collect()),
            })
        })
        .collect()
}
