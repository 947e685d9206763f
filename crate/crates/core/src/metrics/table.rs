//! Fixed-width text tables for one or more evaluated models.

use super::MetricsReport;
use crate::dataio::CLASS_NAMES;

pub struct ModelRow<'a> {
    pub model: &'a str,
    pub report: &'a MetricsReport,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

fn render(title: &str, header: &[&str], rows: Vec<Vec<String>>) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in &rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
            if i == 0 {
                s += &format!("{c:<w$}");
            } else {
                s += &format!("  {c:>w$}");
            }
        }
        s + "\n"
    };
    let rule = "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)) + "\n";
    let mut out = format!("{title}\n{rule}");
    out += &line(header.to_vec());
    out += &rule;
    for r in &rows {
        out += &line(r.iter().map(String::as_str).collect());
    }
    out + &rule
}

/// Accuracy and support-weighted scores, one line per model.
pub fn format_summary_table(rows: &[ModelRow]) -> String {
    let body = rows
        .iter()
        .map(|r| {
            vec![
                r.model.to_string(),
                cell(Some(r.report.accuracy)),
                cell(Some(r.report.weighted_f1)),
                cell(r.report.weighted_pr_auc),
                cell(r.report.weighted_roc_auc),
            ]
        })
        .collect();
    render(
        "Ensemble results on held-out patients",
        &[
            "Model",
            "Accuracy",
            "F1 (weighted)",
            "PR-AUC (weighted)",
            "ROC-AUC (weighted)",
        ],
        body,
    )
}

/// Average precision per class, one line per model.
pub fn format_per_class_table(rows: &[ModelRow]) -> String {
    let mut header = vec!["Model"];
    header.extend(CLASS_NAMES);
    let body = rows
        .iter()
        .map(|r| {
            let mut v = vec![r.model.to_string()];
            v.extend(r.report.classes.iter().map(|c| cell(c.pr_auc)));
            v
        })
        .collect();
    render("Per-class PR-AUC on held-out patients", &header, body)
}
