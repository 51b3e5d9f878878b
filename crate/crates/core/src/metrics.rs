//! Precision, recall and F-beta under overall and class-wise averaging, and
//! Spearman rank correlation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::GroundTruthMatrix;
use crate::verdict::{PredictionMatrix, VoteLabel, IGNORE};
use crate::vocab::{ClassId, ClassVocabulary};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("prediction is {pred_rows}x{pred_cols} but ground truth is {gt_rows}x{gt_cols}")]
    DimMismatch {
        pred_rows: usize,
        pred_cols: usize,
        gt_rows: usize,
        gt_cols: usize,
    },
    #[error("prediction and ground truth list images or classes in a different order")]
    OrderMismatch,
    #[error("score vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("rank correlation needs at least two points, got {0}")]
    TooShort(usize),
    #[error("rank correlation is undefined for a constant vector")]
    ZeroVariance,
    #[error("score vectors must be finite")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub ignored: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn + self.ignored
    }

    fn add(&mut self, pred: i8, gt: bool) {
        match (pred, gt) {
            (IGNORE, _) => self.ignored += 1,
            (1, true) => self.tp += 1,
            (1, false) => self.fp += 1,
            (_, true) => self.fn_ += 1,
            (_, false) => self.tn += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub pooled: ConfusionCounts,
    /// In class-column order.
    pub per_class: Vec<ConfusionCounts>,
    pub classes: Vec<ClassId>,
}

pub fn confusion(
    pred: &PredictionMatrix,
    gt: &GroundTruthMatrix,
) -> Result<Confusion, MetricsError> {
    if pred.n_images() != gt.n_images() || pred.n_classes() != gt.n_classes() {
        return Err(MetricsError::DimMismatch {
            pred_rows: pred.n_images(),
            pred_cols: pred.n_classes(),
            gt_rows: gt.n_images(),
            gt_cols: gt.n_classes(),
        });
    }
    if pred.images() != gt.images() || pred.classes() != gt.classes() {
        return Err(MetricsError::OrderMismatch);
    }
    let mut pooled = ConfusionCounts::default();
    let mut per_class = vec![ConfusionCounts::default(); gt.n_classes()];
    for r in 0..gt.n_images() {
        for (c, counts) in per_class.iter_mut().enumerate() {
            let (p, g) = (pred.get(r, c), gt.get(r, c));
            counts.add(p, g);
            pooled.add(p, g);
        }
    }
    Ok(Confusion {
        pooled,
        per_class,
        classes: gt.classes().to_vec(),
    })
}

/// (1+β²)·P·R / (β²·P + R), defined as 0 when P = R = 0. Works on any scale.
pub fn f_beta(p: f64, r: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let denom = b2 * p + r;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + b2) * p * r / denom
    }
}

/// `num/den` as a percentage, or `None` when `den` is zero.
fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
    pub f05: f64,
}

impl Scores {
    pub fn from_pr(p: f64, r: f64) -> Self {
        Self {
            p,
            r,
            f1: f_beta(p, r, 1.0),
            f05: f_beta(p, r, 0.5),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverallMetrics {
    pub scores: Scores,
    /// No positive predictions: P was set to 0.
    pub degenerate_precision: bool,
    /// No ground-truth positives: R was set to 0.
    pub degenerate_recall: bool,
}

pub fn overall_metrics(counts: &ConfusionCounts) -> OverallMetrics {
    let p = ratio(counts.tp, counts.tp + counts.fp);
    let r = ratio(counts.tp, counts.tp + counts.fn_);
    OverallMetrics {
        scores: Scores::from_pr(p.unwrap_or(0.0), r.unwrap_or(0.0)),
        degenerate_precision: p.is_none(),
        degenerate_recall: r.is_none(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class_id: ClassId,
    pub counts: ConfusionCounts,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClasswiseMetrics {
    pub scores: Scores,
    pub rows: Vec<ClassRow>,
    /// Classes with no positive predictions, left out of the P average.
    pub excluded_precision: Vec<ClassId>,
    /// Classes with no ground-truth positives, left out of the R average.
    pub excluded_recall: Vec<ClassId>,
}

pub fn classwise_metrics(classes: &[ClassId], per_class: &[ConfusionCounts]) -> ClasswiseMetrics {
    assert_eq!(classes.len(), per_class.len());
    let rows: Vec<ClassRow> = classes
        .iter()
        .zip(per_class)
        .map(|(&class_id, c)| ClassRow {
            class_id,
            counts: *c,
            precision: ratio(c.tp, c.tp + c.fp),
            recall: ratio(c.tp, c.tp + c.fn_),
        })
        .collect();
    let mean = |values: Vec<f64>| {
        if values.is_empty() {
            0.0
        } else {
            values.iter().sum::<f64>() / values.len() as f64
        }
    };
    let p = mean(rows.iter().filter_map(|r| r.precision).collect());
    let r = mean(rows.iter().filter_map(|r| r.recall).collect());
    ClasswiseMetrics {
        scores: Scores::from_pr(p, r),
        excluded_precision: rows
            .iter()
            .filter(|r| r.precision.is_none())
            .map(|r| r.class_id)
            .collect(),
        excluded_recall: rows
            .iter()
            .filter(|r| r.recall.is_none())
            .map(|r| r.class_id)
            .collect(),
        rows,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub model_id: Option<String>,
    pub k: usize,
    pub nm: usize,
    pub vote_label: VoteLabel,
    pub dataset_digest: String,
    pub median_response_chars: Option<usize>,
    /// Set when any judge answer was unparseable; the ignore rule for such
    /// votes is this tool's extension of binary voting.
    pub invalid_votes: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub p_all: f64,
    pub r_all: f64,
    pub f1_all: f64,
    pub f05_all: f64,
    pub p_cls: f64,
    pub r_cls: f64,
    pub f1_cls: f64,
    pub f05_cls: f64,
    pub pooled: ConfusionCounts,
    pub per_class: Vec<ClassRow>,
    pub excluded_precision: Vec<ClassId>,
    pub excluded_recall: Vec<ClassId>,
    pub degenerate_precision: bool,
    pub degenerate_recall: bool,
    pub metadata: RunMetadata,
}

/// Metric names as they appear in reports, in table order.
pub const METRIC_NAMES: [&str; 8] = [
    "p_all", "r_all", "f1_all", "f05_all", "p_cls", "r_cls", "f1_cls", "f05_cls",
];

impl MetricsReport {
    pub fn compute(
        pred: &PredictionMatrix,
        gt: &GroundTruthMatrix,
        metadata: RunMetadata,
    ) -> Result<Self, MetricsError> {
        let confusion = confusion(pred, gt)?;
        let overall = overall_metrics(&confusion.pooled);
        let cls = classwise_metrics(&confusion.classes, &confusion.per_class);
        Ok(Self {
            p_all: overall.scores.p,
            r_all: overall.scores.r,
            f1_all: overall.scores.f1,
            f05_all: overall.scores.f05,
            p_cls: cls.scores.p,
            r_cls: cls.scores.r,
            f1_cls: cls.scores.f1,
            f05_cls: cls.scores.f05,
            pooled: confusion.pooled,
            per_class: cls.rows,
            excluded_precision: cls.excluded_precision,
            excluded_recall: cls.excluded_recall,
            degenerate_precision: overall.degenerate_precision,
            degenerate_recall: overall.degenerate_recall,
            metadata,
        })
    }

    /// The eight headline values in [`METRIC_NAMES`] order.
    pub fn values(&self) -> [f64; 8] {
        [
            self.p_all,
            self.r_all,
            self.f1_all,
            self.f05_all,
            self.p_cls,
            self.r_cls,
            self.f1_cls,
            self.f05_cls,
        ]
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        METRIC_NAMES
            .iter()
            .position(|&n| n == name)
            .map(|i| self.values()[i])
    }

    /// Per-class CSV with class names from the vocabulary.
    pub fn per_class_csv(&self, vocab: &ClassVocabulary) -> String {
        let mut out = String::from("class_id,class_name,tp,fp,fn,tn,ignored,precision,recall\n");
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        for row in &self.per_class {
            let name = vocab
                .get(row.class_id)
                .map(|c| c.name.as_str())
                .unwrap_or("");
            let c = row.counts;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                row.class_id,
                csv_field(name),
                c.tp,
                c.fp,
                c.fn_,
                c.tn,
                c.ignored,
                fmt(row.precision),
                fmt(row.recall)
            );
        }
        out
    }

    /// Plain-text table with one-decimal percentages; F0.5 class-wise is the
    /// principal metric and is marked.
    pub fn render_table(&self) -> String {
        let model = self.metadata.model_id.as_deref().unwrap_or("-");
        let headers = [
            "P_ALL",
            "R_ALL",
            "F1_ALL",
            "F0.5_ALL",
            "P_CLS",
            "R_CLS",
            "F1_CLS",
            "*F0.5_CLS*",
        ];
        let width = model.len().max(5);
        let mut out = String::new();
        let _ = write!(out, "{:<width$}", "model");
        for h in headers {
            let _ = write!(out, " {h:>10}");
        }
        out.push('\n');
        let _ = write!(out, "{model:<width$}");
        for v in self.values() {
            let _ = write!(out, " {v:>10.1}");
        }
        out.push('\n');
        let _ = writeln!(
            out,
            "k={} of nm={} ({}); ignored cells {}; principal metric F0.5_CLS = {:.1}",
            self.metadata.k,
            self.metadata.nm,
            self.metadata.vote_label,
            self.pooled.ignored,
            self.f05_cls
        );
        if self.metadata.invalid_votes {
            out.push_str("note: some judge answers were unparseable and were counted as neither yes nor no\n");
        }
        if self.degenerate_precision || self.degenerate_recall {
            out.push_str("note: a pooled denominator was zero and the value was reported as 0\n");
        }
        for (what, list) in [
            ("precision", &self.excluded_precision),
            ("recall", &self.excluded_recall),
        ] {
            if !list.is_empty() {
                let ids: Vec<String> = list.iter().map(|c| c.to_string()).collect();
                let _ = writeln!(out, "excluded from class-wise {what}: {}", ids.join(" "));
            }
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman coefficient: Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, MetricsError> {
    if xs.len() != ys.len() {
        return Err(MetricsError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(MetricsError::TooShort(xs.len()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricsError::ZeroVariance);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}
