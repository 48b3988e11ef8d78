//! Confusion matrices and F1 metrics.
//!
//! Per-class F1 uses `0/0 := 0` for precision, recall and F1 alike, so a
//! class that is never predicted (or never present) scores zero and still
//! counts toward the macro average.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub per_class: Vec<f64>,
    pub macro_f1: f64,
    pub micro_f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// From row-major counts, `rows[true][pred]`.
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let classes = rows.len();
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::Dimension("confusion matrix must be square".into()));
        }
        Ok(Self {
            classes,
            counts: rows.concat(),
        })
    }

    pub fn from_predictions(labels: &[usize], preds: &[usize], classes: usize) -> Result<Self> {
        if labels.len() != preds.len() {
            return Err(Error::Dimension(format!(
                "{} labels vs {} predictions",
                labels.len(),
                preds.len()
            )));
        }
        let mut cm = Self::new(classes);
        for (&y, &p) in labels.iter().zip(preds) {
            if y >= classes || p >= classes {
                return Err(Error::Dimension(format!("class index out of range ({y}, {p})")));
            }
            cm.record(y, p);
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.classes + pred] += 1;
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|k| self.get(k, k)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.trace(), self.total())
    }

    fn row_sum(&self, k: usize) -> u64 {
        (0..self.classes).map(|j| self.get(k, j)).sum()
    }

    fn col_sum(&self, k: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, k)).sum()
    }

    pub fn f1_scores(&self) -> Result<F1Scores> {
        if self.classes == 0 || self.total() == 0 {
            return Err(Error::Empty("confusion matrix"));
        }
        let per_class: Vec<f64> = (0..self.classes)
            .map(|k| {
                let tp = self.get(k, k);
                let precision = ratio(tp, self.col_sum(k));
                let recall = ratio(tp, self.row_sum(k));
                if precision + recall == 0.0 {
                    0.0
                } else {
                    2.0 * precision * recall / (precision + recall)
                }
            })
            .collect();
        let macro_f1 = per_class.iter().sum::<f64>() / self.classes as f64;
        // Pooled TP / (TP + FP) and TP / (TP + FN) coincide for single-label data.
        let micro_f1 = self.accuracy();
        Ok(F1Scores {
            per_class,
            macro_f1,
            micro_f1,
        })
    }
}

/// Summary of one adapted run. The last class is the non-keyword class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub per_class_f1: Vec<f64>,
    /// Unweighted mean over the keyword classes.
    pub keyword_f1: f64,
    pub nonkeyword_f1: f64,
    pub n_samples: u64,
    pub seed: u64,
}

impl EvalReport {
    pub fn from_confusion(cm: &ConfusionMatrix, seed: u64) -> Result<Self> {
        let f1 = cm.f1_scores()?;
        let c = f1.per_class.len();
        if c < 2 {
            return Err(Error::Dimension("need a keyword and a non-keyword class".into()));
        }
        let keyword_f1 = f1.per_class[..c - 1].iter().sum::<f64>() / (c - 1) as f64;
        Ok(Self {
            macro_f1: f1.macro_f1,
            micro_f1: f1.micro_f1,
            nonkeyword_f1: f1.per_class[c - 1],
            per_class_f1: f1.per_class,
            keyword_f1,
            n_samples: cm.total(),
            seed,
        })
    }
}
