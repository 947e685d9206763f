//! Evaluation: confusion-based scores, one-vs-rest ranking metrics,
//! fold ensembles, attention heatmaps and plain-text result tables.
//!
//! Per-class quantities that are undefined (no positives, or no negatives for
//! ROC) are `None` and serialize as JSON `null`. Weighted aggregates use class
//! support as weights and renormalize over the classes that are defined.

mod ensemble;
mod heatmap;
mod ranking;
mod table;

pub use ensemble::{ensemble_average, ensemble_sets, Ensemble, Prediction, PredictionSet};
pub use heatmap::{bilinear_upsample, export_attention_map, write_pgm, AttentionMapFiles};
pub use ranking::{average_precision, binary_roc_auc};
pub use table::{format_per_class_table, format_summary_table, ModelRow};

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{CLASS_NAMES, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::mil::ProbVector;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Confusion matrix (`[truth][predicted]`) and the scores derived from it.
#[derive(Clone, Debug, PartialEq)]
pub struct Confusion {
    pub matrix: Vec<Vec<usize>>,
    pub per_class: Vec<ClassScores>,
    pub accuracy: f64,
    pub weighted_f1: f64,
}

/// Zero denominators give 0 for precision, recall and F1.
pub fn confusion_and_f1(predicted: &[usize], truth: &[usize], classes: usize) -> Result<Confusion> {
    if predicted.len() != truth.len() || truth.is_empty() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    let mut matrix = vec![vec![0usize; classes]; classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        for l in [p, t] {
            if l >= classes {
                return Err(Error::LabelOutOfRange(l, classes));
            }
        }
        matrix[t][p] += 1;
    }
    let n = truth.len();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let per_class: Vec<ClassScores> = (0..classes)
        .map(|c| {
            let tp = matrix[c][c];
            let support: usize = matrix[c].iter().sum();
            let predicted: usize = matrix.iter().map(|row| row[c]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassScores {
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    let trace: usize = (0..classes).map(|c| matrix[c][c]).sum();
    let weighted_f1 = per_class.iter().map(|s| s.f1 * s.support as f64).sum::<f64>() / n as f64;
    Ok(Confusion {
        matrix,
        per_class,
        accuracy: trace as f64 / n as f64,
        weighted_f1,
    })
}

/// Per-class and support-weighted one-vs-rest scores.
#[derive(Clone, Debug, PartialEq)]
pub struct OvrScores {
    pub per_class: [Option<f64>; NUM_CLASSES],
    pub weighted: Option<f64>,
}

fn check_probs(probs: &[ProbVector], truth: &[usize]) -> Result<()> {
    if probs.len() != truth.len() || truth.is_empty() {
        return Err(Error::Invalid(format!(
            "{} probability rows for {} labels",
            probs.len(),
            truth.len()
        )));
    }
    if let Some(&t) = truth.iter().find(|&&t| t >= NUM_CLASSES) {
        return Err(Error::LabelOutOfRange(t, NUM_CLASSES));
    }
    Ok(())
}

fn one_vs_rest(probs: &[ProbVector], truth: &[usize], metric: fn(&[f64], &[bool]) -> Option<f64>) -> Result<OvrScores> {
    check_probs(probs, truth)?;
    let mut per_class = [None; NUM_CLASSES];
    let (mut num, mut den) = (0.0, 0usize);
    for (c, slot) in per_class.iter_mut().enumerate() {
        let scores: Vec<f64> = probs.iter().map(|p| p.values()[c]).collect();
        let positive: Vec<bool> = truth.iter().map(|&t| t == c).collect();
        *slot = metric(&scores, &positive);
        if let Some(v) = *slot {
            let support = positive.iter().filter(|&&p| p).count();
            num += v * support as f64;
            den += support;
        }
    }
    let weighted = (den > 0).then(|| num / den as f64);
    Ok(OvrScores { per_class, weighted })
}

/// One-vs-rest ROC-AUC; classes lacking positives or negatives are excluded.
/// Errors when no class is eligible.
pub fn roc_auc_ovr_weighted(probs: &[ProbVector], truth: &[usize]) -> Result<OvrScores> {
    let s = one_vs_rest(probs, truth, binary_roc_auc)?;
    if s.weighted.is_none() {
        return Err(Error::Invalid(
            "ROC-AUC undefined: no class has both positives and negatives".into(),
        ));
    }
    Ok(s)
}

/// Per-class average precision, defined for classes with a positive.
pub fn pr_auc_per_class(probs: &[ProbVector], truth: &[usize]) -> Result<OvrScores> {
    one_vs_rest(probs, truth, average_precision)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    pub roc_auc: Option<f64>,
    pub pr_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub weighted_roc_auc: Option<f64>,
    pub weighted_pr_auc: Option<f64>,
    pub classes: Vec<ClassReport>,
    /// `[truth][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

impl MetricsReport {
    pub fn evaluate(probs: &[ProbVector], truth: &[usize]) -> Result<Self> {
        check_probs(probs, truth)?;
        let predicted: Vec<usize> = probs.iter().map(ProbVector::argmax).collect();
        let conf = confusion_and_f1(&predicted, truth, NUM_CLASSES)?;
        let roc = one_vs_rest(probs, truth, binary_roc_auc)?;
        let pr = pr_auc_per_class(probs, truth)?;
        let classes = conf
            .per_class
            .iter()
            .enumerate()
            .map(|(c, s)| ClassReport {
                name: CLASS_NAMES[c].to_string(),
                precision: s.precision,
                recall: s.recall,
                f1: s.f1,
                support: s.support,
                roc_auc: roc.per_class[c],
                pr_auc: pr.per_class[c],
            })
            .collect();
        Ok(Self {
            n: truth.len(),
            accuracy: conf.accuracy,
            weighted_f1: conf.weighted_f1,
            weighted_roc_auc: roc.weighted,
            weighted_pr_auc: pr.weighted,
            classes,
            confusion: conf.matrix,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests;
