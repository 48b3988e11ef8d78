//! Numerically stable primitives over class-score vectors.
//!
//! All arithmetic is `f64`. The only probability clamp in the crate lives in
//! [`safe_ln`]; everything built from logits uses log-softmax directly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied inside `ln(p)` for probabilities that are numerically zero.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on `sum(p) == 1` accepted by [`ProbVector::new`].
pub const PROB_SUM_TOL: f64 = 1e-9;

/// Real-valued class scores for one sample. Always finite, at least two classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidLogits(format!(
                "need at least 2 classes, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidLogits(format!(
                "entry {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest score, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl TryFrom<Vec<f64>> for LogitVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LogitVector> for Vec<f64> {
    fn from(z: LogitVector) -> Self {
        z.0
    }
}

/// A categorical distribution: non-negative entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidProbs("empty".into()));
        }
        if let Some(i) = values.iter().position(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::InvalidProbs(format!(
                "entry {i} = {} outside [0, 1]",
                values[i]
            )));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::InvalidProbs(format!("entries sum to {total}")));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Pseudo-label: most probable class, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn max_of(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// `ln(p)` with `p` floored at [`PROB_FLOOR`].
pub fn safe_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// `ln Σ exp(z_i)` via the max-shift trick.
pub fn log_sum_exp(z: &LogitVector) -> f64 {
    lse_slice(z.as_slice())
}

pub(crate) fn lse_slice(z: &[f64]) -> f64 {
    let m = max_of(z);
    let s: f64 = z.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

/// Tempered softmax `exp(z_i/τ) / Σ exp(z_k/τ)`.
pub fn softmax(z: &LogitVector, tau: f64) -> Result<ProbVector> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(crate::error::param("tau", format!("must be > 0, got {tau}")));
    }
    Ok(ProbVector(softmax_slice(z.as_slice(), tau)))
}

pub(crate) fn softmax_slice(z: &[f64], tau: f64) -> Vec<f64> {
    let m = max_of(z);
    let mut e: Vec<f64> = z.iter().map(|&v| ((v - m) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    for v in &mut e {
        *v /= s;
    }
    e
}

/// `z_i - ln Σ exp(z_k)`; exact where `ln(softmax)` would underflow.
pub fn log_softmax(z: &LogitVector) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.as_slice().iter().map(|&v| v - lse).collect()
}

/// Shannon entropy in nats, with `0 · ln 0 = 0`.
pub fn entropy(p: &ProbVector) -> f64 {
    let h: f64 = -p
        .as_slice()
        .iter()
        .filter(|&&pi| pi > 0.0)
        .map(|&pi| pi * safe_ln(pi))
        .sum::<f64>();
    h.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn lv(v: &[f64]) -> LogitVector {
        LogitVector::new(v.to_vec()).unwrap()
    }

    /// Neumaier-compensated sum of exponentials, the direct-summation oracle.
    fn lse_compensated(z: &[f64]) -> f64 {
        let (mut sum, mut c) = (0.0f64, 0.0f64);
        for &v in z {
            let x = v.exp();
            let t = sum + x;
            if sum.abs() >= x.abs() {
                c += (sum - t) + x;
            } else {
                c += (x - t) + sum;
            }
            sum = t;
        }
        (sum + c).ln()
    }

    #[test]
    fn lse_examples() {
        assert!((log_sum_exp(&lv(&[0.0, 0.0])) - 2f64.ln()).abs() < 1e-15);
        let big = log_sum_exp(&lv(&[1000.0, 1000.0]));
        assert!((big - (1000.0 + 2f64.ln())).abs() < 1e-12);
        let oracle = lse_compensated(&[1.0, 2.0, 3.0]);
        let got = log_sum_exp(&lv(&[1.0, 2.0, 3.0]));
        assert!(((got - oracle) / oracle).abs() < 1e-12, "{got} vs {oracle}");
    }

    #[test]
    fn rejects_bad_logits() {
        assert!(LogitVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(LogitVector::new(vec![f64::INFINITY, 0.0]).is_err());
        assert!(LogitVector::new(vec![1.0]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&lv(&[0.0, 0.0, 0.0]), 1.0).unwrap();
        for &v in p.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&lv(&[2.0, 1.0]), 0.5).unwrap();
        let (e4, e2) = (4f64.exp(), 2f64.exp());
        assert!((p.as_slice()[0] - e4 / (e4 + e2)).abs() < 1e-15);
        assert!((p.as_slice()[0] - 0.880797).abs() < 1e-6);
        assert!((p.as_slice()[1] - 0.119203).abs() < 1e-6);
        let p = softmax(&lv(&[5.0, 1.0, 1.0]), 1e6).unwrap();
        for &v in p.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_rejects_bad_tau() {
        assert!(softmax(&lv(&[0.0, 1.0]), 0.0).is_err());
        assert!(softmax(&lv(&[0.0, 1.0]), -1.0).is_err());
    }

    #[test]
    fn entropy_examples() {
        let u = ProbVector::new(vec![0.25; 4]).unwrap();
        assert!((entropy(&u) - 4f64.ln()).abs() < 1e-15);
        let one_hot = ProbVector::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(entropy(&one_hot), 0.0);
        let half = ProbVector::new(vec![0.5, 0.5]).unwrap();
        assert!((entropy(&half) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn prob_vector_validation() {
        assert!(ProbVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbVector::new(vec![-0.1, 1.1]).is_err());
        assert!(ProbVector::new(vec![0.5, 0.5 + 5e-10]).is_ok());
    }

    #[test]
    fn entropy_decomposes_into_reward_and_penalty() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let c = rng.random_range(2..=10);
            let z = lv(&(0..c).map(|_| rng.random_range(-10.0..10.0)).collect::<Vec<_>>());
            let p = softmax(&z, 1.0).unwrap();
            let pz: f64 = p.as_slice().iter().zip(z.as_slice()).map(|(a, b)| a * b).sum();
            let rhs = -pz + log_sum_exp(&z);
            assert!((entropy(&p) - rhs).abs() < 1e-9);
        }
    }

    fn logits(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-50.0f64..50.0, 2..max_len)
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(z in logits(12), c in -1e3f64..1e3, tau in 0.5f64..10.0) {
            let a = softmax(&lv(&z), tau).unwrap();
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            let b = softmax(&lv(&shifted), tau).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn lse_shift_and_bounds(z in logits(12), c in -1e3f64..1e3) {
            let base = log_sum_exp(&lv(&z));
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            prop_assert!((log_sum_exp(&lv(&shifted)) - (base + c)).abs() < 1e-12);
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(base >= m);
            prop_assert!(base <= m + (z.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn softmax_is_a_distribution(z in logits(12), tau in 0.05f64..20.0) {
            let p = softmax(&lv(&z), tau).unwrap();
            let s: f64 = p.as_slice().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            let h = entropy(&p);
            prop_assert!(h >= 0.0 && h <= (z.len() as f64).ln() + 1e-12);
        }
    }
}
