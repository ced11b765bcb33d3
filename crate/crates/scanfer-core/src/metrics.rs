//! Challenge scoring: accuracy, per-class and macro F1, and the weighted
//! overall score `0.67 * F1 + 0.33 * accuracy`.
//!
//! Degenerate quantities (0/0 precision, recall or F1) are 0 by convention,
//! and macro F1 is the unweighted mean over all classes including degenerate
//! ones.

use crate::data::Sample;
use crate::model::FerModel;
use crate::tensor::{invalid_err, TensorError};
use crate::NUM_CLASSES;

/// Row = true class, column = predicted class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        assert!(truth < self.classes && predicted < self.classes);
        self.counts[truth * self.classes + predicted] += 1;
    }

    pub fn count(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.count(c, c)).sum()
    }

    fn row_sum(&self, truth: usize) -> u64 {
        (0..self.classes).map(|p| self.count(truth, p)).sum()
    }

    fn col_sum(&self, predicted: usize) -> u64 {
        (0..self.classes).map(|t| self.count(t, predicted)).sum()
    }
}

/// Fraction of predictions that are correct.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64, TensorError> {
    let total = cm.total();
    if total == 0 {
        return Err(invalid_err("accuracy", "empty confusion matrix"));
    }
    Ok(cm.trace() as f64 / total as f64)
}

/// Per-class precision, recall and F1, plus their unweighted means.
#[derive(Clone, Debug)]
pub struct F1Summary {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub macro_f1: f64,
}

pub fn f1_scores(cm: &ConfusionMatrix) -> F1Summary {
    let classes = cm.classes();
    let mut precision = vec![0.0; classes];
    let mut recall = vec![0.0; classes];
    let mut f1 = vec![0.0; classes];
    for c in 0..classes {
        let tp = cm.count(c, c) as f64;
        let col = cm.col_sum(c) as f64;
        let row = cm.row_sum(c) as f64;
        precision[c] = if col > 0.0 { tp / col } else { 0.0 };
        recall[c] = if row > 0.0 { tp / row } else { 0.0 };
        let denom = precision[c] + recall[c];
        f1[c] = if denom > 0.0 {
            2.0 * precision[c] * recall[c] / denom
        } else {
            0.0
        };
    }
    let macro_f1 = f1.iter().sum::<f64>() / classes as f64;
    F1Summary {
        precision,
        recall,
        f1,
        macro_f1,
    }
}

/// Weighted combination of macro F1 (67%) and accuracy (33%).
pub fn overall_score(macro_f1: f64, acc: f64) -> Result<f64, TensorError> {
    if !(0.0..=1.0).contains(&macro_f1) || !(0.0..=1.0).contains(&acc) {
        return Err(invalid_err(
            "overall_score",
            format!("inputs must be in [0,1], got f1={macro_f1}, acc={acc}"),
        ));
    }
    Ok(0.67 * macro_f1 + 0.33 * acc)
}

/// Full evaluation result for a dataset.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub macro_f1: f64,
    pub overall: f64,
}

impl EvalReport {
    pub fn from_confusion(cm: ConfusionMatrix) -> Result<Self, TensorError> {
        let acc = accuracy(&cm)?;
        let summary = f1_scores(&cm);
        let overall = overall_score(summary.macro_f1, acc)?;
        Ok(EvalReport {
            confusion: cm,
            accuracy: acc,
            precision: summary.precision,
            recall: summary.recall,
            f1: summary.f1,
            macro_f1: summary.macro_f1,
            overall,
        })
    }

    /// `key=value` text, one entry per line. Floats are printed with Rust's
    /// shortest round-trip formatting so recomputations from the printed
    /// values are exact.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("accuracy={}\n", self.accuracy));
        out.push_str(&format!("macro_f1={}\n", self.macro_f1));
        out.push_str(&format!("overall={}\n", self.overall));
        for c in 0..self.confusion.classes() {
            out.push_str(&format!("precision.{c}={}\n", self.precision[c]));
        }
        for c in 0..self.confusion.classes() {
            out.push_str(&format!("recall.{c}={}\n", self.recall[c]));
        }
        for c in 0..self.confusion.classes() {
            out.push_str(&format!("f1.{c}={}\n", self.f1[c]));
        }
        for t in 0..self.confusion.classes() {
            for p in 0..self.confusion.classes() {
                out.push_str(&format!("confusion.{t}.{p}={}\n", self.confusion.count(t, p)));
            }
        }
        out
    }

    /// Single tab-separated record: accuracy, macro F1, overall, then the
    /// per-class precision, recall and F1 blocks in class-index order.
    pub fn to_record(&self) -> String {
        let mut fields = vec![
            self.accuracy.to_string(),
            self.macro_f1.to_string(),
            self.overall.to_string(),
        ];
        fields.extend(self.precision.iter().map(|v| v.to_string()));
        fields.extend(self.recall.iter().map(|v| v.to_string()));
        fields.extend(self.f1.iter().map(|v| v.to_string()));
        fields.join("\t")
    }
}

/// Run the model over every sample and score the predictions.
pub fn evaluate(model: &FerModel, samples: &[Sample]) -> Result<EvalReport, TensorError> {
    if samples.is_empty() {
        return Err(invalid_err("evaluate", "empty dataset"));
    }
    let mut cm = ConfusionMatrix::new(model.config.num_classes.max(NUM_CLASSES));
    for sample in samples {
        let predicted = model.predict(&sample.pixels)?;
        cm.record(sample.label, predicted);
    }
    EvalReport::from_confusion(cm)
}
