//! Confusion matrices, per-head precision/recall/F1 and global average
//! accuracy over the attribute heads.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::LabelCodec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {truth} labels vs {pred} predictions")]
    Length { truth: usize, pred: usize },
    #[error("label {value} at position {index} outside {classes} classes")]
    OutOfRange {
        index: usize,
        value: usize,
        classes: usize,
    },
    #[error("expected {expected} heads, got {found}")]
    Heads { expected: usize, found: usize },
    #[error("global average accuracy of an empty head list")]
    Empty,
}

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.counts[c][c]).sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    /// `trace / total`, or 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        ratio(self.trace(), self.total())
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn confusion(
    y_true: &[usize],
    y_pred: &[usize],
    classes: usize,
) -> Result<ConfusionMatrix, MetricsError> {
    if y_true.len() != y_pred.len() {
        return Err(MetricsError::Length {
            truth: y_true.len(),
            pred: y_pred.len(),
        });
    }
    let mut counts = vec![vec![0u64; classes]; classes];
    for (index, (&t, &p)) in y_true.iter().zip(y_pred).enumerate() {
        for value in [t, p] {
            if value >= classes {
                return Err(MetricsError::OutOfRange {
                    index,
                    value,
                    classes,
                });
            }
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { classes, counts })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Per-class metrics and their unweighted (macro) means. A zero
/// denominator yields 0 for that quantity.
pub fn precision_recall_f1(cm: &ConfusionMatrix) -> (Vec<ClassMetrics>, [f64; 3]) {
    let per_class: Vec<ClassMetrics> = (0..cm.classes)
        .map(|c| {
            let tp = cm.counts[c][c];
            let precision = ratio(tp, cm.col_sum(c));
            let recall = ratio(tp, cm.row_sum(c));
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                class: c.to_string(),
                precision,
                recall,
                f1,
                support: cm.row_sum(c),
            }
        })
        .collect();
    let k = cm.classes.max(1) as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k;
    let macros = [mean(|m| m.precision), mean(|m| m.recall), mean(|m| m.f1)];
    (per_class, macros)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadMetrics {
    pub name: String,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
}

impl HeadMetrics {
    /// Metrics for one head; `class_names` label the per-class rows.
    pub fn from_confusion(name: &str, class_names: &[String], cm: ConfusionMatrix) -> Self {
        let (mut per_class, [precision, recall, f1]) = precision_recall_f1(&cm);
        for (m, n) in per_class.iter_mut().zip(class_names) {
            m.class = n.clone();
        }
        Self {
            name: name.to_string(),
            accuracy: cm.accuracy(),
            precision,
            recall,
            f1,
            per_class,
            confusion: cm,
        }
    }

    pub fn score(
        name: &str,
        class_names: &[String],
        y_true: &[usize],
        y_pred: &[usize],
    ) -> Result<Self, MetricsError> {
        let cm = confusion(y_true, y_pred, class_names.len())?;
        Ok(Self::from_confusion(name, class_names, cm))
    }
}

/// Mean of the per-head accuracies.
pub fn gaa(accuracies: &[f64]) -> Result<f64, MetricsError> {
    if accuracies.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(accuracies.iter().sum::<f64>() / accuracies.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Attribute heads in codec order.
    pub heads: Vec<HeadMetrics>,
    /// Cell-type head, reported separately and never part of `gaa`.
    pub cell_type: Option<HeadMetrics>,
    pub gaa: f64,
}

/// Scores attribute predictions against labels, one index list per head.
pub fn report(
    predictions: &[Vec<usize>],
    labels: &[Vec<usize>],
    codec: &LabelCodec,
) -> Result<MetricsReport, MetricsError> {
    let expected = codec.attributes.len();
    for found in [predictions.len(), labels.len()] {
        if found != expected {
            return Err(MetricsError::Heads { expected, found });
        }
    }
    let heads = codec
        .attributes
        .iter()
        .zip(predictions.iter().zip(labels))
        .map(|((name, vocab), (pred, truth))| HeadMetrics::score(name, vocab.values(), truth, pred))
        .collect::<Result<Vec<_>, _>>()?;
    let gaa = gaa(&heads.iter().map(|h| h.accuracy).collect::<Vec<_>>())?;
    Ok(MetricsReport {
        heads,
        cell_type: None,
        gaa,
    })
}

/// Percentage with two decimals, ties rounded up.
pub fn percent(x: f64) -> String {
    let scaled = (x * 10_000.0 + 0.5 + 1e-7).floor() / 100.0;
    format!("{scaled:.2}")
}

impl MetricsReport {
    /// Plain-text table: attribute, accuracy, precision, recall, F1, with a
    /// closing global-average row.
    pub fn render_table(&self) -> String {
        let width = self
            .heads
            .iter()
            .map(|h| h.name.len())
            .max()
            .unwrap_or(0)
            .max("Global Average".len());
        let mut out = String::new();
        let line = |out: &mut String, name: &str, v: [f64; 4]| {
            let _ = writeln!(
                out,
                "{name:<width$}  {:>6}  {:>6}  {:>6}  {:>6}",
                percent(v[0]),
                percent(v[1]),
                percent(v[2]),
                percent(v[3])
            );
        };
        let _ = writeln!(
            out,
            "{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}",
            "Attribute", "Acc", "P", "R", "F1"
        );
        for h in &self.heads {
            line(&mut out, &h.name, [h.accuracy, h.precision, h.recall, h.f1]);
        }
        let n = self.heads.len().max(1) as f64;
        let mean = |f: fn(&HeadMetrics) -> f64| self.heads.iter().map(f).sum::<f64>() / n;
        line(
            &mut out,
            "Global Average",
            [
                self.gaa,
                mean(|h| h.precision),
                mean(|h| h.recall),
                mean(|h| h.f1),
            ],
        );
        if let Some(ct) = &self.cell_type {
            let _ = writeln!(out);
            line(
                &mut out,
                "cell_type",
                [ct.accuracy, ct.precision, ct.recall, ct.f1],
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}
