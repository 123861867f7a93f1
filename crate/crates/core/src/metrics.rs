//! Confusion matrices, per-class precision/recall/F1 with macro
//! aggregates, and CSV report emission (metrics, confusion counts, and
//! training curves as plot-ready data files).

use std::fs;
use std::io::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("predictions ({preds}) and targets ({targets}) differ in length")]
    LengthMismatch { preds: usize, targets: usize },
    #[error("class id {id} out of range for {classes} classes")]
    BadId { id: usize, classes: usize },
    #[error("metrics over an empty confusion matrix")]
    EmptyMatrix,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    /// counts[i][j] = samples of true class i predicted as class j
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn n_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn predicted(&self, class: usize) -> u64 {
        self.counts.iter().map(|row| row[class]).sum()
    }
}

pub fn confusion_matrix(
    preds: &[usize],
    targets: &[usize],
    labels: &[String],
) -> Result<ConfusionMatrix, MetricsError> {
    if preds.len() != targets.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            targets: targets.len(),
        });
    }
    let c = labels.len();
    let mut counts = vec![vec![0u64; c]; c];
    for (&p, &t) in preds.iter().zip(targets) {
        if p >= c {
            return Err(MetricsError::BadId { id: p, classes: c });
        }
        if t >= c {
            return Err(MetricsError::BadId { id: t, classes: c });
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix {
        labels: labels.to_vec(),
        counts,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub label: String,
    pub support: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// true when a 0/0 was defined as 0 for this class
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub total: u64,
}

/// Per-class precision/recall/F1 (0/0 defined as 0) plus accuracy and
/// the unweighted macro-F1 over classes with nonzero support.
pub fn precision_recall_f1(cm: &ConfusionMatrix) -> Result<MetricsReport, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let mut per_class = Vec::with_capacity(cm.n_classes());
    let mut f1_sum = 0.0;
    let mut f1_classes = 0usize;
    for c in 0..cm.n_classes() {
        let tp = cm.counts[c][c];
        let support = cm.support(c);
        let predicted = cm.predicted(c);
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        if support > 0 {
            f1_sum += f1;
            f1_classes += 1;
        }
        per_class.push(ClassMetrics {
            label: cm.labels[c].clone(),
            support,
            precision,
            recall,
            f1,
            degenerate: predicted == 0 || support == 0 || precision + recall == 0.0,
        });
    }
    Ok(MetricsReport {
        per_class,
        macro_f1: if f1_classes == 0 { 0.0 } else { f1_sum / f1_classes as f64 },
        accuracy: cm.trace() as f64 / total as f64,
        total,
    })
}

/// One training-curve point: step, training loss, optional validation
/// loss.
pub type CurvePoint = (u64, f64, Option<f64>);

/// Emit `metrics.csv`, `confusion.csv`, and `curves.csv` into `out_dir`.
/// All reals use fixed 6-decimal formatting; output is byte-deterministic
/// for identical inputs.
pub fn write_report(
    report: &MetricsReport,
    cm: &ConfusionMatrix,
    curves: &[CurvePoint],
    out_dir: &Path,
) -> Result<(), MetricsError> {
    fs::create_dir_all(out_dir)?;

    let mut metrics = Vec::new();
    writeln!(metrics, "class,support,precision,recall,f1,flag")?;
    for m in &report.per_class {
        writeln!(
            metrics,
            "{},{},{:.6},{:.6},{:.6},{}",
            m.label,
            m.support,
            m.precision,
            m.recall,
            m.f1,
            if m.degenerate { "degenerate" } else { "" }
        )?;
    }
    writeln!(metrics, "macro_f1,,,,{:.6},", report.macro_f1)?;
    writeln!(metrics, "accuracy,,,,{:.6},", report.accuracy)?;
    fs::write(out_dir.join("metrics.csv"), metrics)?;

    let mut confusion = Vec::new();
    writeln!(confusion, "true\\pred,{}", cm.labels.join(","))?;
    for (label, row) in cm.labels.iter().zip(&cm.counts) {
        let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        writeln!(confusion, "{},{}", label, cells.join(","))?;
    }
    fs::write(out_dir.join("confusion.csv"), confusion)?;

    let mut curve_rows = Vec::new();
    writeln!(curve_rows, "step,TL,VL")?;
    for &(step, tl, vl) in curves {
        match vl {
            Some(v) => writeln!(curve_rows, "{step},{tl:.6},{v:.6}")?,
            None => writeln!(curve_rows, "{step},{tl:.6},")?,
        }
    }
    fs::write(out_dir.join("curves.csv"), curve_rows)?;
    Ok(())
}
