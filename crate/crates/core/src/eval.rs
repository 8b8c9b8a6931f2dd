//! Confusion counts, precision/recall/F1 under two averaging conventions,
//! and side-by-side comparison of runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::gateway::ModelVerdict;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("no label for `{0}`")]
    MissingLabel(String),
    #[error("reports cover different label sets: `{0}` vs `{1}`")]
    LabelSetMismatch(String, String),
    #[error("nothing to compare")]
    NoReports,
    #[error("baseline `{0}` is not among the reports")]
    UnknownBaseline(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        ConfusionCounts { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// The same counts with the normal class treated as positive.
    pub fn flipped(&self) -> Self {
        ConfusionCounts::new(self.tn, self.fn_, self.fp, self.tp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Anomaly class only.
    #[default]
    PositiveClass,
    /// Unweighted mean over the anomaly and normal classes.
    Macro,
}

impl std::str::FromStr for Averaging {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "positive" | "positive_class" => Ok(Averaging::PositiveClass),
            "macro" => Ok(Averaging::Macro),
            other => Err(format!("unknown averaging `{other}` (expected positive or macro)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub averaging: Averaging,
    /// Set when some ratio had a zero denominator and was taken as 0.
    pub undefined: bool,
}

fn ratio(num: u64, den: u64, undefined: &mut bool) -> f64 {
    if den == 0 {
        *undefined = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn class_metrics(c: &ConfusionCounts, undefined: &mut bool) -> (f64, f64, f64) {
    let p = ratio(c.tp, c.tp + c.fp, undefined);
    let r = ratio(c.tp, c.tp + c.fn_, undefined);
    let f = if p + r == 0.0 {
        *undefined = true;
        0.0
    } else {
        2.0 * p * r / (p + r)
    };
    (p, r, f)
}

pub fn metrics(counts: &ConfusionCounts, averaging: Averaging) -> MetricSet {
    let mut undefined = false;
    let (precision, recall, f1) = match averaging {
        Averaging::PositiveClass => class_metrics(counts, &mut undefined),
        Averaging::Macro => {
            let (p1, r1, f1) = class_metrics(counts, &mut undefined);
            let (p0, r0, f0) = class_metrics(&counts.flipped(), &mut undefined);
            ((p1 + p0) / 2.0, (r1 + r0) / 2.0, (f1 + f0) / 2.0)
        }
    };
    MetricSet {
        precision,
        recall,
        f1,
        averaging,
        undefined,
    }
}

/// Counts predictions against labels, anomaly (1) being positive.
///
/// In strict mode every prediction needs a label; otherwise unlabeled
/// predictions are skipped.
pub fn confusion(
    predictions: &BTreeMap<String, u8>,
    labels: &BTreeMap<String, u8>,
    strict: bool,
) -> Result<ConfusionCounts, EvalError> {
    let mut c = ConfusionCounts::default();
    for (id, &pred) in predictions {
        let Some(&label) = labels.get(id) else {
            if strict {
                return Err(EvalError::MissingLabel(id.clone()));
            }
            continue;
        };
        match (pred != 0, label != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// SHA-256 over the sorted `id:label` lines of a label map.
pub fn label_set_digest(labels: &BTreeMap<String, u8>) -> String {
    let mut h = Sha256::new();
    for (id, label) in labels {
        h.update(format!("{id}:{label}\n").as_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method_name: String,
    /// Prompt variant name, or a baseline tag such as `jet` or `isolation_forest`.
    pub variant: String,
    pub counts: ConfusionCounts,
    pub metrics_macro: MetricSet,
    pub metrics_positive: MetricSet,
    /// Verdicts left out of the counts because their response failed to parse.
    pub excluded: u64,
    pub excluded_ids: Vec<String>,
    pub label_set_digest: String,
    pub run_metadata: serde_json::Value,
}

impl EvalReport {
    pub fn from_counts(
        method_name: &str,
        variant: &str,
        counts: ConfusionCounts,
        labels: &BTreeMap<String, u8>,
        run_metadata: serde_json::Value,
    ) -> Self {
        EvalReport {
            method_name: method_name.to_string(),
            variant: variant.to_string(),
            counts,
            metrics_macro: metrics(&counts, Averaging::Macro),
            metrics_positive: metrics(&counts, Averaging::PositiveClass),
            excluded: 0,
            excluded_ids: Vec::new(),
            label_set_digest: label_set_digest(labels),
            run_metadata,
        }
    }

    pub fn metrics(&self, averaging: Averaging) -> &MetricSet {
        match averaging {
            Averaging::Macro => &self.metrics_macro,
            Averaging::PositiveClass => &self.metrics_positive,
        }
    }
}

/// Scores model verdicts; `Failed` verdicts are excluded and listed.
pub fn evaluate_verdicts(
    method_name: &str,
    variant: &str,
    verdicts: &[ModelVerdict],
    labels: &BTreeMap<String, u8>,
    strict: bool,
    run_metadata: serde_json::Value,
) -> Result<EvalReport, EvalError> {
    let mut predictions = BTreeMap::new();
    let mut excluded_ids = Vec::new();
    for v in verdicts {
        if v.is_failed() {
            excluded_ids.push(v.posting_id.clone());
        } else {
            predictions.insert(v.posting_id.clone(), v.anomaly);
        }
    }
    let counts = confusion(&predictions, labels, strict)?;
    let mut report = EvalReport::from_counts(method_name, variant, counts, labels, run_metadata);
    report.excluded = excluded_ids.len() as u64;
    report.excluded_ids = excluded_ids;
    Ok(report)
}

/// Two-decimal display value, halves rounded away from zero.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method_name: String,
    pub variant: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: ConfusionCounts,
    pub excluded: u64,
    pub delta_precision: f64,
    pub delta_recall: f64,
    pub delta_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub averaging: Averaging,
    pub baseline: String,
    pub label_set_digest: String,
    pub rows: Vec<ComparisonRow>,
}

/// Lines reports up against a baseline (the first report unless one is named
/// by variant or method), sorted by F1 descending under `averaging`.
pub fn compare(reports: &[EvalReport], averaging: Averaging, baseline: Option<&str>) -> Result<Comparison, EvalError> {
    let first = reports.first().ok_or(EvalError::NoReports)?;
    for r in reports {
        if r.label_set_digest != first.label_set_digest {
            return Err(EvalError::LabelSetMismatch(
                first.method_name.clone(),
                r.method_name.clone(),
            ));
        }
    }
    let base = match baseline {
        Some(name) => reports
            .iter()
            .find(|r| r.variant == name || r.method_name == name)
            .ok_or_else(|| EvalError::UnknownBaseline(name.to_string()))?,
        None => first,
    };
    let bm = base.metrics(averaging);
    let mut rows: Vec<ComparisonRow> = reports
        .iter()
        .map(|r| {
            let m = r.metrics(averaging);
            ComparisonRow {
                method_name: r.method_name.clone(),
                variant: r.variant.clone(),
                precision: m.precision,
                recall: m.recall,
                f1: m.f1,
                counts: r.counts,
                excluded: r.excluded,
                delta_precision: m.precision - bm.precision,
                delta_recall: m.recall - bm.recall,
                delta_f1: m.f1 - bm.f1,
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        b.f1.total_cmp(&a.f1)
            .then_with(|| a.variant.cmp(&b.variant))
            .then_with(|| a.method_name.cmp(&b.method_name))
    });
    Ok(Comparison {
        averaging,
        baseline: base.variant.clone(),
        label_set_digest: first.label_set_digest.clone(),
        rows,
    })
}

fn signed(x: f64) -> String {
    let r = round2(x);
    if r == 0.0 {
        " 0.00".to_string()
    } else {
        format!("{r:+.2}")
    }
}

impl Comparison {
    /// Aligned text table in Precision, Recall, F1, TP, FP, FN, TN order.
    pub fn render_text(&self) -> String {
        let vw = self.rows.iter().map(|r| r.variant.len()).chain([7]).max().unwrap_or(7);
        let width = self
            .rows
            .iter()
            .map(|r| r.method_name.len())
            .chain([6])
            .max()
            .unwrap_or(6);
        let avg = match self.averaging {
            Averaging::Macro => "macro",
            Averaging::PositiveClass => "positive class",
        };
        let mut out = format!("averaging: {avg}; baseline: {}\n", self.baseline);
        let _ = writeln!(
            out,
            "{:<vw$}  {:<width$}  {:>9}  {:>6}  {:>5}  {:>6}  {:>6}  {:>6}  {:>6}  {:>8}  {:>5}  {:>5}  {:>5}",
            "Variant", "Method", "Precision", "Recall", "F1", "TP", "FP", "FN", "TN", "Excluded", "dP", "dR", "dF1"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<vw$}  {:<width$}  {:>9.2}  {:>6.2}  {:>5.2}  {:>6}  {:>6}  {:>6}  {:>6}  {:>8}  {:>5}  {:>5}  {:>5}",
                r.variant,
                r.method_name,
                round2(r.precision),
                round2(r.recall),
                round2(r.f1),
                r.counts.tp,
                r.counts.fp,
                r.counts.fn_,
                r.counts.tn,
                r.excluded,
                signed(r.delta_precision),
                signed(r.delta_recall),
                signed(r.delta_f1),
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 0.005
    }

    #[test]
    fn jet_row_macro() {
        let m = metrics(&ConfusionCounts::new(50, 942, 0, 4008), Averaging::Macro);
        assert!(
            close(m.precision, 0.53) && close(m.recall, 0.90) && close(m.f1, 0.50),
            "{m:?}"
        );
        assert!(!m.undefined);
    }

    #[test]
    fn gemma_row_positive() {
        let m = metrics(&ConfusionCounts::new(256, 32, 73, 4639), Averaging::PositiveClass);
        assert!(
            close(m.precision, 0.89) && close(m.recall, 0.78) && close(m.f1, 0.83),
            "{m:?}"
        );
    }

    #[test]
    fn zero_denominators_flag_undefined() {
        let m = metrics(&ConfusionCounts::new(0, 0, 5, 10), Averaging::PositiveClass);
        assert_eq!((m.precision, m.recall, m.f1, m.undefined), (0.0, 0.0, 0.0, true));
    }

    #[test]
    fn confusion_counts_intersection() {
        let preds = BTreeMap::from([("a".to_string(), 1), ("b".to_string(), 0), ("z".to_string(), 1)]);
        let labels = BTreeMap::from([("a".to_string(), 1), ("b".to_string(), 1)]);
        assert_eq!(
            confusion(&preds, &labels, false).unwrap(),
            ConfusionCounts::new(1, 0, 1, 0)
        );
        assert_eq!(
            confusion(&preds, &labels, true),
            Err(EvalError::MissingLabel("z".into()))
        );
    }

    #[test]
    fn compare_duplicate_has_zero_deltas() {
        let labels = BTreeMap::from([("a".to_string(), 1)]);
        let r = EvalReport::from_counts(
            "m",
            "v",
            ConfusionCounts::new(3, 1, 1, 5),
            &labels,
            serde_json::Value::Null,
        );
        let mut r2 = r.clone();
        r2.variant = "v2".into();
        let c = compare(&[r, r2], Averaging::PositiveClass, None).unwrap();
        assert!(c
            .rows
            .iter()
            .all(|row| row.delta_f1 == 0.0 && row.delta_precision == 0.0));
        assert!(c.render_text().contains(" 0.00"));
    }

    #[test]
    fn compare_rejects_mismatched_labels() {
        let a = BTreeMap::from([("a".to_string(), 1)]);
        let b = BTreeMap::from([("b".to_string(), 1)]);
        let ra = EvalReport::from_counts("x", "v", ConfusionCounts::default(), &a, serde_json::Value::Null);
        let rb = EvalReport::from_counts("y", "v", ConfusionCounts::default(), &b, serde_json::Value::Null);
        assert!(matches!(
            compare(&[ra, rb], Averaging::Macro, None),
            Err(EvalError::LabelSetMismatch(_, _))
        ));
        assert_eq!(compare(&[], Averaging::Macro, None), Err(EvalError::NoReports));
    }

    #[test]
    fn half_rounds_up() {
        assert_eq!(round2(0.125), 0.13);
        assert_eq!(round2(0.8349), 0.83);
    }
}
