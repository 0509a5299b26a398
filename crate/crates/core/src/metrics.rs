//! Confusion matrices, per-class and aggregated metrics, confusion-pair
//! analysis, and report emission (markdown tables plus machine-readable CSV).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// K x K counts, rows = gold, columns = predicted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn from_labels(golds: &[usize], preds: &[usize], k: usize) -> Result<Self> {
        if golds.len() != preds.len() {
            return Err(Error::shape("confusion", &[golds.len()], &[preds.len()]));
        }
        let mut counts = vec![0usize; k * k];
        for (&g, &p) in golds.iter().zip(preds) {
            if g >= k {
                return Err(Error::LabelOutOfRange { label: g, classes: k });
            }
            if p >= k {
                return Err(Error::LabelOutOfRange { label: p, classes: k });
            }
            counts[g * k + p] += 1;
        }
        Ok(ConfusionMatrix { k, counts })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, gold: usize, pred: usize) -> usize {
        self.counts[gold * self.k + pred]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }

    pub fn row_total(&self, gold: usize) -> usize {
        (0..self.k).map(|p| self.get(gold, p)).sum()
    }

    pub fn col_total(&self, pred: usize) -> usize {
        (0..self.k).map(|g| self.get(g, pred)).sum()
    }

    /// Merge another matrix of the same size into this one.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.k != other.k {
            return Err(Error::shape("confusion merge", &[self.k], &[other.k]));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrfTriple {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    // 0/0 scores 0: a class absent from both gold and predictions counts as
    // a full miss, which is what pulls macro averages down on minorities.
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Per-class precision/recall/F1 with the 0/0 -> 0 rule.
pub fn per_class_prf(matrix: &ConfusionMatrix) -> Vec<ClassMetrics> {
    (0..matrix.k())
        .map(|c| {
            let tp = matrix.get(c, c) as f64;
            let precision = ratio(tp, matrix.col_total(c) as f64);
            let recall = ratio(tp, matrix.row_total(c) as f64);
            let f1 = ratio(2.0 * precision * recall, precision + recall);
            ClassMetrics {
                precision,
                recall,
                f1,
                support: matrix.row_total(c),
            }
        })
        .collect()
}

/// Macro (equal class weight) and weighted (support-weighted) averages,
/// each computed independently per metric.
pub fn aggregate(per_class: &[ClassMetrics]) -> (PrfTriple, PrfTriple) {
    let k = per_class.len() as f64;
    let total: usize = per_class.iter().map(|m| m.support).sum();
    let macro_avg = PrfTriple {
        precision: per_class.iter().map(|m| m.precision).sum::<f64>() / k,
        recall: per_class.iter().map(|m| m.recall).sum::<f64>() / k,
        f1: per_class.iter().map(|m| m.f1).sum::<f64>() / k,
    };
    let weight = |f: fn(&ClassMetrics) -> f64| {
        if total == 0 {
            0.0
        } else {
            per_class
                .iter()
                .map(|m| f(m) * m.support as f64)
                .sum::<f64>()
                / total as f64
        }
    };
    let weighted = PrfTriple {
        precision: weight(|m| m.precision),
        recall: weight(|m| m.recall),
        f1: weight(|m| m.f1),
    };
    (macro_avg, weighted)
}

/// One evaluation's metrics: per-class plus macro and weighted aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    /// `"fold0"`.., `"pooled"`, or `"mean"`.
    pub fold: String,
    pub per_class: Vec<ClassMetrics>,
    pub macro_avg: PrfTriple,
    pub weighted_avg: PrfTriple,
    pub accuracy: f64,
    pub total: usize,
}

impl MetricsReport {
    pub fn from_confusion(model: &str, fold: &str, matrix: &ConfusionMatrix) -> Self {
        let per_class = per_class_prf(matrix);
        let (macro_avg, weighted_avg) = aggregate(&per_class);
        MetricsReport {
            model: model.to_string(),
            fold: fold.to_string(),
            per_class,
            macro_avg,
            weighted_avg,
            accuracy: matrix.accuracy(),
            total: matrix.total(),
        }
    }

    /// Unweighted mean over per-fold reports (supports summed).
    pub fn mean_over_folds(model: &str, reports: &[MetricsReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::EmptyInput("mean over zero reports".into()));
        }
        let k = reports[0].per_class.len();
        if reports.iter().any(|r| r.per_class.len() != k) {
            return Err(Error::InvalidConfig(
                "fold reports disagree on class count".into(),
            ));
        }
        let n = reports.len() as f64;
        let per_class = (0..k)
            .map(|c| ClassMetrics {
                precision: reports.iter().map(|r| r.per_class[c].precision).sum::<f64>() / n,
                recall: reports.iter().map(|r| r.per_class[c].recall).sum::<f64>() / n,
                f1: reports.iter().map(|r| r.per_class[c].f1).sum::<f64>() / n,
                support: reports.iter().map(|r| r.per_class[c].support).sum(),
            })
            .collect();
        let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Ok(MetricsReport {
            model: model.to_string(),
            fold: "mean".to_string(),
            per_class,
            macro_avg: PrfTriple {
                precision: mean(|r| r.macro_avg.precision),
                recall: mean(|r| r.macro_avg.recall),
                f1: mean(|r| r.macro_avg.f1),
            },
            weighted_avg: PrfTriple {
                precision: mean(|r| r.weighted_avg.precision),
                recall: mean(|r| r.weighted_avg.recall),
                f1: mean(|r| r.weighted_avg.f1),
            },
            accuracy: mean(|r| r.accuracy),
            total: reports.iter().map(|r| r.total).sum(),
        })
    }
}

/// One off-diagonal confusion cell with its share of the gold class's
/// misclassifications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionPair {
    pub gold: usize,
    pub pred: usize,
    pub count: usize,
    /// `count / (gold row total - diagonal)`.
    pub share: f64,
}

/// Off-diagonal cells ranked by count (ties by gold then pred id), top `m`.
pub fn confusion_pairs(matrix: &ConfusionMatrix, top_m: usize) -> Vec<ConfusionPair> {
    let mut pairs = Vec::new();
    for gold in 0..matrix.k() {
        let misses = matrix.row_total(gold) - matrix.get(gold, gold);
        if misses == 0 {
            continue;
        }
        for pred in 0..matrix.k() {
            if pred == gold || matrix.get(gold, pred) == 0 {
                continue;
            }
            pairs.push(ConfusionPair {
                gold,
                pred,
                count: matrix.get(gold, pred),
                share: matrix.get(gold, pred) as f64 / misses as f64,
            });
        }
    }
    pairs.sort_by(|a, b| {
        b.count
            .cmp(&a.count)
            .then(a.gold.cmp(&b.gold))
            .then(a.pred.cmp(&b.pred))
    });
    pairs.truncate(top_m);
    pairs
}

fn fmt_f(v: f64) -> String {
    format!("{v:.4}")
}

/// Summary table: one row per report, macro and weighted P/R/F1 columns.
pub fn summary_markdown(reports: &[&MetricsReport]) -> String {
    let mut out = String::new();
    out.push_str("| Model | Fold | Macro P | Macro R | Macro F1 | Weighted P | Weighted R | Weighted F1 |\n");
    out.push_str("|---|---|---|---|---|---|---|---|\n");
    for r in reports {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} | {} |",
            r.model,
            r.fold,
            fmt_f(r.macro_avg.precision),
            fmt_f(r.macro_avg.recall),
            fmt_f(r.macro_avg.f1),
            fmt_f(r.weighted_avg.precision),
            fmt_f(r.weighted_avg.recall),
            fmt_f(r.weighted_avg.f1),
        );
    }
    out
}

/// Per-class table: one row per protocol group with its support, one F1
/// column per model.
pub fn per_class_markdown(reports: &[&MetricsReport], class_names: &[String]) -> String {
    let mut out = String::new();
    out.push_str("| Protocol group | Exam count |");
    for r in reports {
        let _ = write!(out, " {} |", r.model);
    }
    out.push('\n');
    out.push_str("|---|---|");
    for _ in reports {
        out.push_str("---|");
    }
    out.push('\n');
    for (c, name) in class_names.iter().enumerate() {
        let support = reports
            .first()
            .map(|r| r.per_class[c].support)
            .unwrap_or(0);
        let _ = write!(out, "| {name} | {support} |");
        for r in reports {
            let _ = write!(out, " {} |", fmt_f(r.per_class[c].f1));
        }
        out.push('\n');
    }
    out
}

pub const REPORT_CSV_HEADER: &str = "model,fold,class,precision,recall,f1,support";

/// Machine-readable per-class rows. Floats print in shortest round-trip form
/// so re-parsing reproduces the values exactly.
pub fn report_csv(reports: &[&MetricsReport], class_names: &[String]) -> String {
    let mut out = String::new();
    out.push_str(REPORT_CSV_HEADER);
    out.push('\n');
    for r in reports {
        for (c, m) in r.per_class.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.model,
                r.fold,
                csv_escape(&class_names[c]),
                m.precision,
                m.recall,
                m.f1,
                m.support
            );
        }
    }
    out
}

fn csv_escape(field: &str) -> String {
    if field.contains(',') || field.contains('"') || field.contains('\n') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// Parsed CSV row; the inverse of [`report_csv`].
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub model: String,
    pub fold: String,
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

pub fn parse_report_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let get = |i: usize| record.get(i).unwrap_or("").to_string();
        let num = |i: usize| -> Result<f64> {
            record
                .get(i)
                .unwrap_or("")
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad float in csv: {record:?}")))
        };
        rows.push(CsvRow {
            model: get(0),
            fold: get(1),
            class: get(2),
            precision: num(3)?,
            recall: num(4)?,
            f1: num(5)?,
            support: record
                .get(6)
                .unwrap_or("")
                .parse()
                .map_err(|_| Error::InvalidConfig("bad support in csv".into()))?,
        });
    }
    Ok(rows)
}

/// Write the consolidated report files (summary + per-class markdown, CSV,
/// and a metadata JSON blob) into `dir`.
pub fn emit_report(
    dir: &Path,
    reports: &[&MetricsReport],
    class_names: &[String],
    metadata: &serde_json::Value,
) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::EmptyInput("emit_report with no reports".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let write = |name: &str, contents: String| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, contents).map_err(|e| Error::io(path.display().to_string(), e))
    };
    write("summary.md", summary_markdown(reports))?;
    write("per_class.md", per_class_markdown(reports, class_names))?;
    write("report.csv", report_csv(reports, class_names))?;
    write("metadata.json", format!("{:#}\n", metadata))?;
    Ok(())
}
