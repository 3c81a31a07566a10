//! Confusion matrix and macro-averaged F1 over the six expressions.

use std::fmt;

use crate::error::{Error, Result};
use crate::expression::{Expression, NUM_CLASSES};

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self) -> [u64; NUM_CLASSES] {
        self.counts.map(|row| row.iter().sum())
    }
}

pub fn confusion_matrix(truth: &[usize], pred: &[usize]) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(Error::usage(format!(
            "confusion_matrix: {} true labels but {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (i, (&t, &p)) in truth.iter().zip(pred).enumerate() {
        if t >= NUM_CLASSES || p >= NUM_CLASSES {
            return Err(Error::usage(format!(
                "confusion_matrix: sample {i} has class pair ({t}, {p}) outside 0..6"
            )));
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub per_class_f1: [f64; NUM_CLASSES],
    pub macro_f1: f64,
    pub support: [u64; NUM_CLASSES],
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class F1 with degenerate precision, recall or F1 taken as 0, and
/// their unweighted mean.
pub fn macro_f1(cm: &ConfusionMatrix) -> MetricsReport {
    let mut per_class_f1 = [0.0; NUM_CLASSES];
    for (c, f1) in per_class_f1.iter_mut().enumerate() {
        let tp = cm.counts[c][c];
        let fn_ = cm.counts[c].iter().sum::<u64>() - tp;
        let fp = (0..NUM_CLASSES).map(|r| cm.counts[r][c]).sum::<u64>() - tp;
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        *f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
    }
    MetricsReport {
        macro_f1: per_class_f1.iter().sum::<f64>() / NUM_CLASSES as f64,
        per_class_f1,
        support: cm.support(),
    }
}

impl fmt::Display for MetricsReport {
    /// Six `f1[class]=value` lines followed by `macro_f1=value`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (class, f1) in Expression::ALL.iter().zip(self.per_class_f1) {
            writeln!(f, "f1[{class}]={f1:.4}")?;
        }
        writeln!(f, "macro_f1={:.4}", self.macro_f1)
    }
}
