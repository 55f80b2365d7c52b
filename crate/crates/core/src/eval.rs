//! Prediction, per-subset accuracy and confusion matrices.

use std::fmt::Write as _;

use serde::Serialize;

use crate::data::{subset_tags, LabeledDataset, Subset, SubsetTags};
use crate::error::{Error, Result};
use crate::mlp::{predict_logits, MlpParams};
use crate::pipeline::{train_student, TrainConfig};

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn predict(params: &MlpParams, data: &LabeledDataset) -> Result<Vec<usize>> {
    if params.input_dim() != data.dim() {
        return Err(Error::invalid(format!(
            "model expects {} features, dataset has {}",
            params.input_dim(),
            data.dim()
        )));
    }
    (0..data.len()).map(|i| predict_logits(params, data.row(i)).map(|z| argmax(&z))).collect()
}

/// Accuracies as exact ratios. Subsets or classes without test samples are
/// `None`, never zero.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub overall: f64,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
    pub per_class: Vec<Option<f64>>,
    pub n: usize,
}

impl EvalReport {
    pub fn subset(&self, s: Subset) -> Option<f64> {
        match s {
            Subset::Many => self.many,
            Subset::Medium => self.medium,
            Subset::Few => self.few,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

fn ratio(correct: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| correct as f64 / total as f64)
}

pub fn accuracy_report(preds: &[usize], labels: &[usize], tags: &SubsetTags) -> Result<EvalReport> {
    if preds.len() != labels.len() {
        return Err(Error::invalid(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    let c = tags.num_classes();
    if let Some(&y) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::invalid(format!("label {y} out of range for {c} classes")));
    }
    let mut correct = vec![0usize; c];
    let mut total = vec![0usize; c];
    for (&p, &y) in preds.iter().zip(labels) {
        total[y] += 1;
        if p == y {
            correct[y] += 1;
        }
    }
    let subset = |s: Subset| {
        let (hit, all) =
            (0..c).filter(|&k| tags.tags[k] == s).fold((0, 0), |(h, a), k| (h + correct[k], a + total[k]));
        ratio(hit, all)
    };
    let n = labels.len();
    Ok(EvalReport {
        overall: if n == 0 { 0.0 } else { correct.iter().sum::<usize>() as f64 / n as f64 },
        many: subset(Subset::Many),
        medium: subset(Subset::Medium),
        few: subset(Subset::Few),
        per_class: (0..c).map(|k| ratio(correct[k], total[k])).collect(),
        n,
    })
}

pub fn evaluate(params: &MlpParams, data: &LabeledDataset, tags: &SubsetTags) -> Result<EvalReport> {
    accuracy_report(&predict(params, data)?, data.labels(), tags)
}

/// Row = true class, column = predicted class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> usize {
        self.counts[truth * self.num_classes + predicted]
    }

    pub fn row(&self, truth: usize) -> &[usize] {
        &self.counts[truth * self.num_classes..(truth + 1) * self.num_classes]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.num_classes).map(|k| self.get(k, k)).sum()
    }

    /// Counts CSV: header row of predicted class indices, one row per true
    /// class.
    pub fn to_csv(&self) -> String {
        self.render(|v, _| v.to_string())
    }

    /// Row-normalized fractions; rows without samples are all zero.
    pub fn to_normalized_csv(&self) -> String {
        self.render(|v, row_sum| {
            let frac = if row_sum == 0 { 0.0 } else { v as f64 / row_sum as f64 };
            frac.to_string()
        })
    }

    fn render(&self, cell: impl Fn(usize, usize) -> String) -> String {
        let mut out = String::from("true\\pred");
        for j in 0..self.num_classes {
            let _ = write!(out, ",{j}");
        }
        out.push('\n');
        for i in 0..self.num_classes {
            let row = self.row(i);
            let row_sum: usize = row.iter().sum();
            let _ = write!(out, "{i}");
            for &v in row {
                let _ = write!(out, ",{}", cell(v, row_sum));
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion_matrix(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::invalid(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    let mut counts = vec![0; num_classes * num_classes];
    for (&p, &y) in preds.iter().zip(labels) {
        if p >= num_classes || y >= num_classes {
            return Err(Error::invalid(format!(
                "class pair ({y}, {p}) out of range for {num_classes} classes"
            )));
        }
        counts[y * num_classes + p] += 1;
    }
    Ok(ConfusionMatrix { num_classes, counts })
}

/// One student run per temperature against a shared teacher. Every run uses
/// the same seeds; only the distillation temperature changes.
pub fn temperature_sweep(
    train: &LabeledDataset,
    test: &LabeledDataset,
    teacher: &MlpParams,
    base: &TrainConfig,
    temperatures: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if temperatures.is_empty() {
        return Err(Error::invalid("temperature sweep needs at least one temperature"));
    }
    let tags = subset_tags(&train.class_counts()?, base.many_threshold, base.few_threshold)?;
    temperatures
        .iter()
        .map(|&t| {
            let mut cfg = base.clone();
            cfg.kd.temperature = t;
            cfg.bkd.temperature = t;
            let (student, _) = train_student(train, test, teacher, &cfg)?;
            Ok((t, evaluate(&student, test, &tags)?.overall))
        })
        .collect()
}

pub fn sweep_csv(rows: &[(f64, f64)]) -> String {
    let mut out = String::from("temperature,acc_all\n");
    for (t, acc) in rows {
        let _ = writeln!(out, "{t},{acc}");
    }
    out
}
