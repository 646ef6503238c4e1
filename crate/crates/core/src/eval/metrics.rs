use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{CoolError, Result};

/// Binary classification metrics. Class 0 is "true", class 1 is "fake".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// `confusion[gold][pred]`.
    pub confusion: [[usize; 2]; 2],
    pub n: usize,
}

/// Arg-max of a class distribution; ties go to class 0.
pub fn predicted_label(p: &[f64; 2]) -> Label {
    if p[1] > p[0] {
        Label::Fake
    } else {
        Label::True
    }
}

fn f1(confusion: &[[usize; 2]; 2], c: usize) -> f64 {
    let tp = confusion[c][c] as f64;
    let fp = confusion[1 - c][c] as f64;
    let fneg = confusion[c][1 - c] as f64;
    let denom = 2.0 * tp + fp + fneg;
    if denom == 0.0 {
        0.0
    } else {
        2.0 * tp / denom
    }
}

pub fn compute_metrics(gold: &[Label], pred: &[Label]) -> Result<Metrics> {
    if gold.len() != pred.len() {
        return Err(CoolError::Shape(format!(
            "{} gold labels vs {} predictions",
            gold.len(),
            pred.len()
        )));
    }
    if gold.is_empty() {
        return Err(CoolError::Empty("no samples to evaluate".into()));
    }
    let mut confusion = [[0usize; 2]; 2];
    for (g, p) in gold.iter().zip(pred) {
        confusion[g.index()][p.index()] += 1;
    }
    let n = gold.len();
    let correct = confusion[0][0] + confusion[1][1];
    Ok(Metrics {
        accuracy: correct as f64 / n as f64,
        macro_f1: 0.5 * (f1(&confusion, 0) + f1(&confusion, 1)),
        confusion,
        n,
    })
}

/// Metrics from class distributions.
pub fn evaluate(gold: &[Label], probs: &[[f64; 2]]) -> Result<Metrics> {
    let pred: Vec<Label> = probs.iter().map(predicted_label).collect();
    compute_metrics(gold, &pred)
}

/// Mean and sample standard deviation (`n - 1`); the deviation is 0 for one value.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
