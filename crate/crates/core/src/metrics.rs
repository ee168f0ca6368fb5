//! Binary classification metrics over per-volume predictions.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[truth][pred]`, class 0 = covid, 1 = non-covid.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: [[u64; 2]; 2],
}

impl Confusion {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut c = Confusion::default();
        for (truth, pred) in pairs {
            if truth > 1 || pred > 1 {
                return Err(Error::InvalidData(format!("class index out of range: ({truth}, {pred})")));
            }
            c.counts[truth][pred] += 1;
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        self.counts[0][0] + self.counts[1][1]
    }

    /// (tp, fp, fn) for `class` treated as positive.
    pub fn one_vs_rest(&self, class: usize) -> (u64, u64, u64) {
        let other = 1 - class;
        (
            self.counts[class][class],
            self.counts[other][class],
            self.counts[class][other],
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when the class was never predicted (precision reported as 0).
    pub precision_undefined: bool,
    /// Set when the class never occurs in the labels (recall reported as 0).
    pub recall_undefined: bool,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

impl ClassMetrics {
    fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let (precision, precision_undefined) = ratio(tp, tp + fp);
        let (recall, recall_undefined) = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        ClassMetrics {
            precision,
            recall,
            f1,
            precision_undefined,
            recall_undefined,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: u64,
    pub accuracy: f64,
    /// Indexed by class.
    pub per_class: [ClassMetrics; 2],
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub confusion: Confusion,
}

impl MetricsReport {
    pub fn from_confusion(confusion: Confusion) -> Result<Self> {
        let n = confusion.total();
        if n == 0 {
            return Err(Error::Empty("no predictions to evaluate".into()));
        }
        let per_class = [0, 1].map(|c| {
            let (tp, fp, fn_) = confusion.one_vs_rest(c);
            ClassMetrics::from_counts(tp, fp, fn_)
        });
        let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / 2.0;
        Ok(MetricsReport {
            n,
            accuracy: confusion.correct() as f64 / n as f64,
            macro_precision: mean(|m| m.precision),
            macro_recall: mean(|m| m.recall),
            macro_f1: mean(|m| m.f1),
            per_class,
            confusion,
        })
    }
}

/// Score `(volume_id, predicted class)` pairs against `(volume_id, true class)` pairs.
///
/// Every prediction needs exactly one label and vice versa.
pub fn evaluate(preds: &[(String, usize)], labels: &[(String, usize)]) -> Result<MetricsReport> {
    let mut truth: HashMap<&str, usize> = HashMap::with_capacity(labels.len());
    for (id, c) in labels {
        if truth.insert(id.as_str(), *c).is_some() {
            return Err(Error::IdMismatch(format!("duplicate label for {id}")));
        }
    }
    if preds.len() != truth.len() {
        return Err(Error::IdMismatch(format!(
            "{} predictions for {} labels",
            preds.len(),
            truth.len()
        )));
    }
    let mut seen = std::collections::HashSet::with_capacity(preds.len());
    let mut pairs = Vec::with_capacity(preds.len());
    for (id, p) in preds {
        let t = truth
            .get(id.as_str())
            .ok_or_else(|| Error::IdMismatch(format!("no label for volume {id}")))?;
        if !seen.insert(id.as_str()) {
            return Err(Error::IdMismatch(format!("duplicate prediction for {id}")));
        }
        pairs.push((*t, *p));
    }
    MetricsReport::from_confusion(Confusion::from_pairs(pairs)?)
}
