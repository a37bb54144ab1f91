//! Classification metrics, comparison tables and GradCAM.
//!
//! F1 is macro-averaged everywhere: the unweighted mean of per-class F1.
//! A class with neither support nor predictions scores F1 = 0 and still
//! counts toward the mean.

mod gradcam;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use gradcam::{gradcam, gradcam_from_activations, Heatmap};

use crate::error::{Error, Result};

/// F1 averaging convention written into every report.
pub const F1_AVERAGING: &str = "macro";

fn check_lengths(predictions: &[usize], targets: &[usize]) -> Result<()> {
    if predictions.len() != targets.len() {
        return Err(Error::Validation(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Validation("no predictions to score".into()));
    }
    Ok(())
}

/// Percentage of correct predictions.
pub fn top1(predictions: &[usize], targets: &[usize]) -> Result<f64> {
    check_lengths(predictions, targets)?;
    let hits = predictions.iter().zip(targets).filter(|(p, t)| p == t).count();
    Ok(100.0 * hits as f64 / targets.len() as f64)
}

/// `confusion[target][prediction]` counts.
pub fn confusion_matrix(predictions: &[usize], targets: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    check_lengths(predictions, targets)?;
    let mut m = vec![vec![0; k]; k];
    for (&p, &t) in predictions.iter().zip(targets) {
        if p >= k || t >= k {
            return Err(Error::Validation(format!("label {} out of range for {k} classes", p.max(t))));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// Per-class F1 from a confusion matrix.
pub fn per_class_f1(confusion: &[Vec<usize>]) -> Vec<f64> {
    let k = confusion.len();
    (0..k)
        .map(|c| {
            let tp = confusion[c][c] as f64;
            let support: usize = confusion[c].iter().sum();
            let predicted: usize = confusion.iter().map(|row| row[c]).sum();
            let denom = (support + predicted) as f64;
            if denom == 0.0 {
                0.0
            } else {
                2.0 * tp / denom
            }
        })
        .collect()
}

pub fn macro_f1(predictions: &[usize], targets: &[usize], k: usize) -> Result<f64> {
    let f = per_class_f1(&confusion_matrix(predictions, targets, k)?);
    Ok(f.iter().sum::<f64>() / k as f64)
}

/// Mean per-class F1 over `subset`, with per-class F1 taken from the full
/// confusion matrix.
pub fn subset_f1(predictions: &[usize], targets: &[usize], k: usize, subset: &[usize]) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::Validation("subset_f1 needs a nonempty class subset".into()));
    }
    if let Some(&c) = subset.iter().find(|&&c| c >= k) {
        return Err(Error::Validation(format!("subset class {c} out of range for {k} classes")));
    }
    let f = per_class_f1(&confusion_matrix(predictions, targets, k)?);
    Ok(subset.iter().map(|&c| f[c]).sum::<f64>() / subset.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetF1 {
    pub classes: Vec<usize>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Percent in `[0, 100]`.
    pub top1: f64,
    pub macro_f1: f64,
    pub f1_averaging: String,
    pub per_class_f1: Vec<f64>,
    pub subset_f1: Option<SubsetF1>,
    /// `confusion[target][prediction]`.
    pub confusion: Vec<Vec<usize>>,
}

impl MetricsReport {
    pub fn compute(predictions: &[usize], targets: &[usize], k: usize, subset: Option<&[usize]>) -> Result<Self> {
        let confusion = confusion_matrix(predictions, targets, k)?;
        let per_class_f1 = per_class_f1(&confusion);
        let trace: usize = (0..k).map(|c| confusion[c][c]).sum();
        let subset_f1 = match subset {
            Some(s) => Some(SubsetF1 { classes: s.to_vec(), value: subset_f1(predictions, targets, k, s)? }),
            None => None,
        };
        Ok(Self {
            top1: 100.0 * trace as f64 / targets.len() as f64,
            macro_f1: per_class_f1.iter().sum::<f64>() / k as f64,
            f1_averaging: F1_AVERAGING.into(),
            per_class_f1,
            subset_f1,
            confusion,
        })
    }

    /// Top-1 restricted to samples whose target is in `classes`.
    pub fn subset_top1(&self, classes: &[usize]) -> f64 {
        let hits: usize = classes.iter().map(|&c| self.confusion[c][c]).sum();
        let total: usize = classes.iter().map(|&c| self.confusion[c].iter().sum::<usize>()).sum();
        if total == 0 {
            0.0
        } else {
            100.0 * hits as f64 / total as f64
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::load(path, e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// One row of a [`TableReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub model: String,
    pub top1: f64,
    pub macro_f1: f64,
    pub subset_f1: Option<f64>,
    /// Columns in which this row is best (ties flag every tied row).
    pub best: Vec<String>,
    pub worst: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableReport {
    pub f1_averaging: String,
    pub rows: Vec<TableRow>,
}

/// Side-by-side comparison with the best and worst value of each column
/// flagged. Every row sharing the extreme value is flagged.
pub fn table_report(runs: &[(String, MetricsReport)]) -> TableReport {
    let mut rows: Vec<TableRow> = runs
        .iter()
        .map(|(name, r)| TableRow {
            model: name.clone(),
            top1: r.top1,
            macro_f1: r.macro_f1,
            subset_f1: r.subset_f1.as_ref().map(|s| s.value),
            best: Vec::new(),
            worst: Vec::new(),
        })
        .collect();
    let columns: [(&str, fn(&TableRow) -> Option<f64>); 3] = [
        ("top1", |r| Some(r.top1)),
        ("macro_f1", |r| Some(r.macro_f1)),
        ("subset_f1", |r| r.subset_f1),
    ];
    for (name, get) in columns {
        let values: Vec<f64> = rows.iter().filter_map(get).collect();
        if values.is_empty() {
            continue;
        }
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        for row in &mut rows {
            if let Some(v) = get(row) {
                if v == hi {
                    row.best.push(name.into());
                }
                if v == lo {
                    row.worst.push(name.into());
                }
            }
        }
    }
    TableReport { f1_averaging: F1_AVERAGING.into(), rows }
}

impl TableReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Validation(format!("csv: {e}"));
        w.write_record(["model", "top1", "macro_f1", "subset_f1", "best", "worst"]).map_err(err)?;
        for r in &self.rows {
            w.write_record([
                r.model.clone(),
                format!("{:.4}", r.top1),
                format!("{:.6}", r.macro_f1),
                r.subset_f1.map_or(String::new(), |v| format!("{v:.6}")),
                r.best.join(";"),
                r.worst.join(";"),
            ])
            .map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Validation(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let csv_path = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        write_json(&dir.join(format!("{stem}.json")), self)
    }
}
