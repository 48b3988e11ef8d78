//! Two-stage sample selection: keep samples whose decoupled entropy is
//! below `τ_dem` and whose pseudo-label confidence drops by more than
//! `τ_pkc` under the PKC transform.

use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::losses::{dem_loss, pkc_score, sample_weight, DemParams, WeightParams};
use crate::numerics::{softmax, LogitVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionThresholds {
    pub tau_dem: f64,
    pub tau_pkc: f64,
}

impl Default for SelectionThresholds {
    fn default() -> Self {
        Self {
            tau_dem: 0.4,
            tau_pkc: 0.05,
        }
    }
}

impl SelectionThresholds {
    pub fn new(tau_dem: f64, tau_pkc: f64) -> Result<Self> {
        if tau_dem.is_nan() || tau_dem <= 0.0 {
            return Err(param("tau_dem", format!("must be > 0, got {tau_dem}")));
        }
        if !tau_pkc.is_finite() {
            return Err(param("tau_pkc", "must be finite"));
        }
        Ok(Self { tau_dem, tau_pkc })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionOutcome {
    pub mask: Vec<bool>,
    pub l_dem: Vec<f64>,
    pub l_pkc: Vec<f64>,
    /// `Some(w)` exactly where `mask` is set.
    pub weights: Vec<Option<f64>>,
}

impl SelectionOutcome {
    pub fn n_selected(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn selected_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i)
    }
}

/// Per-sample `L_dem` and `L_pkc` for a batch.
pub fn selection_scores(
    logits_orig: &[LogitVector],
    logits_pkc: &[LogitVector],
    dem_params: &DemParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if logits_orig.len() != logits_pkc.len() {
        return Err(Error::Dimension(format!(
            "{} original vs {} transformed logit vectors",
            logits_orig.len(),
            logits_pkc.len()
        )));
    }
    let mut l_dem = Vec::with_capacity(logits_orig.len());
    let mut l_pkc = Vec::with_capacity(logits_orig.len());
    for (z, zp) in logits_orig.iter().zip(logits_pkc) {
        if z.len() != zp.len() {
            return Err(Error::Dimension("class count differs between views".into()));
        }
        l_dem.push(dem_loss(z, dem_params));
        l_pkc.push(pkc_score(&softmax(z, 1.0)?, &softmax(zp, 1.0)?));
    }
    Ok((l_dem, l_pkc))
}

/// Strict-inequality filter `L_dem < τ_dem ∧ L_pkc > τ_pkc`, with sample
/// weights for the survivors.
pub fn select_batch(
    logits_orig: &[LogitVector],
    logits_pkc: &[LogitVector],
    thresholds: &SelectionThresholds,
    dem_params: &DemParams,
    weight_params: &WeightParams,
) -> Result<SelectionOutcome> {
    let (l_dem, l_pkc) = selection_scores(logits_orig, logits_pkc, dem_params)?;
    let mask: Vec<bool> = l_dem
        .iter()
        .zip(&l_pkc)
        .map(|(&d, &p)| d < thresholds.tau_dem && p > thresholds.tau_pkc)
        .collect();
    let weights = mask
        .iter()
        .zip(l_dem.iter().zip(&l_pkc))
        .map(|(&m, (&d, &p))| m.then(|| sample_weight(d, p, weight_params.sigma)))
        .collect();
    Ok(SelectionOutcome {
        mask,
        l_dem,
        l_pkc,
        weights,
    })
}
