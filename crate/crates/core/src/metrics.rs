//! Ranking and agreement metrics over `documents × labels` matrices.
//!
//! Reductions run in a fixed order (documents, then labels) so results are
//! bit-stable across runs.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Real-valued scores, `rows × cols` (documents × labels).
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "score_matrix",
                left: vec![rows, cols],
                right: vec![data.len()],
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "score_matrix" });
        }
        Ok(ScoreMatrix { rows, cols, data })
    }

    pub fn from_labels(labels: &LabelMatrix) -> Self {
        ScoreMatrix {
            rows: labels.rows,
            cols: labels.cols,
            data: labels.data.iter().map(|&b| f64::from(b)).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// `1` where the score is at least `threshold`.
    pub fn binarize(&self, threshold: f64) -> LabelMatrix {
        LabelMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| u8::from(v >= threshold)).collect(),
        }
    }

    /// Keeps the listed rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> ScoreMatrix {
        let data = rows.iter().flat_map(|&r| self.row(r).iter().copied()).collect();
        ScoreMatrix {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }
}

/// Binary reference assignments, `rows × cols`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMatrix {
    rows: usize,
    cols: usize,
    data: Vec<u8>,
}

impl LabelMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "label_matrix",
                left: vec![rows, cols],
                right: vec![data.len()],
            });
        }
        if data.iter().any(|&b| b > 1) {
            return Err(Error::invalid("label matrix entries must be 0 or 1"));
        }
        Ok(LabelMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged label rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.data[i * self.cols + j]
    }
}

fn check_shapes(op: &'static str, scores: &ScoreMatrix, labels: &LabelMatrix) -> Result<()> {
    if (scores.rows, scores.cols) != (labels.rows, labels.cols) {
        return Err(Error::Shape {
            op,
            left: vec![scores.rows, scores.cols],
            right: vec![labels.rows, labels.cols],
        });
    }
    Ok(())
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct Counts {
    tp: usize,
    fp: usize,
    fn_: usize,
}

impl Counts {
    fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => {}
        }
    }

    fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    fn jaccard(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    fn merge(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

fn per_label_counts(predicted: &LabelMatrix, labels: &LabelMatrix) -> Vec<Counts> {
    let mut counts = vec![Counts::default(); labels.cols];
    for i in 0..labels.rows {
        for (j, c) in counts.iter_mut().enumerate() {
            c.add(predicted.get(i, j) == 1, labels.get(i, j) == 1);
        }
    }
    counts
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct F1 {
    pub macro_f1: f64,
    pub micro_f1: f64,
}

/// F1 after binarizing `scores` at `threshold` (`score >= threshold` is
/// positive). A label with no positives and no predictions scores 0.
pub fn f1(scores: &ScoreMatrix, labels: &LabelMatrix, threshold: f64) -> Result<F1> {
    check_shapes("f1", scores, labels)?;
    let counts = per_label_counts(&scores.binarize(threshold), labels);
    let mut pooled = Counts::default();
    for c in &counts {
        pooled.merge(*c);
    }
    Ok(F1 {
        macro_f1: mean(counts.iter().map(Counts::f1)),
        micro_f1: pooled.f1(),
    })
}

/// ROC-AUC via the rank-sum statistic; tied scores get their midrank.
/// `None` unless both classes are present.
pub fn binary_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let mut pairs: Vec<(f64, u8)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return None;
    }
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < pairs.len() {
        let mut end = start + 1;
        while end < pairs.len() && pairs[end].0.total_cmp(&pairs[start].0) == Ordering::Equal {
            end += 1;
        }
        // 1-based ranks start+1 ..= end share their mean
        let midrank = (start + 1 + end) as f64 / 2.0;
        let tied_positives = pairs[start..end].iter().filter(|p| p.1 == 1).count();
        rank_sum += midrank * tied_positives as f64;
        start = end;
    }
    let p = positives as f64;
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Auc {
    /// Mean over labels having both classes; `None` if no label qualifies.
    pub macro_auc: Option<f64>,
    pub micro_auc: Option<f64>,
    /// Labels excluded from the macro mean.
    pub skipped_labels: usize,
}

pub fn auc(scores: &ScoreMatrix, labels: &LabelMatrix) -> Result<Auc> {
    check_shapes("auc", scores, labels)?;
    let mut col_scores = vec![0.0; scores.rows];
    let mut col_labels = vec![0u8; scores.rows];
    let mut per_label = Vec::with_capacity(scores.cols);
    let mut skipped = 0;
    for j in 0..scores.cols {
        for i in 0..scores.rows {
            col_scores[i] = scores.get(i, j);
            col_labels[i] = labels.get(i, j);
        }
        match binary_auc(&col_scores, &col_labels) {
            Some(a) => per_label.push(a),
            None => skipped += 1,
        }
    }
    Ok(Auc {
        macro_auc: (!per_label.is_empty()).then(|| mean(per_label)),
        micro_auc: binary_auc(&scores.data, &labels.data),
        skipped_labels: skipped,
    })
}

/// Label indices of one row ordered by descending score; ties keep the
/// lower index first.
pub fn ranked_labels(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    idx
}

/// Mean over documents of `|top-n ∩ true| / n`.
pub fn precision_at_n(scores: &ScoreMatrix, labels: &LabelMatrix, n: usize) -> Result<f64> {
    check_shapes("precision_at_n", scores, labels)?;
    if n == 0 || n > scores.cols {
        return Err(Error::invalid(format!(
            "precision@{n} needs 1 <= n <= {} labels",
            scores.cols
        )));
    }
    Ok(mean((0..scores.rows).map(|i| {
        let hits = ranked_labels(scores.row(i))
            .into_iter()
            .take(n)
            .filter(|&j| labels.get(i, j) == 1)
            .count();
        hits as f64 / n as f64
    })))
}

/// Axis along which macro agreement averages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MacroAxis {
    /// Per-label scores over the document axis, averaged over labels.
    #[default]
    Label,
    /// Per-document scores over the label axis, averaged over documents.
    Document,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub macro_jaccard: f64,
    pub micro_jaccard: f64,
    pub macro_precision: f64,
    pub micro_precision: f64,
    pub macro_recall: f64,
    pub micro_recall: f64,
    pub macro_axis: MacroAxis,
}

/// Jaccard/precision/recall of `annotations` against `references`.
///
/// Micro values pool intersections and unions over every cell. Macro
/// values average per-label (or per-document) scores; an empty
/// denominator contributes 0.
pub fn set_agreement(annotations: &LabelMatrix, references: &LabelMatrix, axis: MacroAxis) -> Result<Agreement> {
    if (annotations.rows, annotations.cols) != (references.rows, references.cols) {
        return Err(Error::Shape {
            op: "set_agreement",
            left: vec![annotations.rows, annotations.cols],
            right: vec![references.rows, references.cols],
        });
    }
    let groups = match axis {
        MacroAxis::Label => per_label_counts(annotations, references),
        MacroAxis::Document => (0..references.rows)
            .map(|i| {
                let mut c = Counts::default();
                for j in 0..references.cols {
                    c.add(annotations.get(i, j) == 1, references.get(i, j) == 1);
                }
                c
            })
            .collect(),
    };
    let mut pooled = Counts::default();
    for c in &groups {
        pooled.merge(*c);
    }
    Ok(Agreement {
        macro_jaccard: mean(groups.iter().map(Counts::jaccard)),
        micro_jaccard: pooled.jaccard(),
        macro_precision: mean(groups.iter().map(Counts::precision)),
        micro_precision: pooled.precision(),
        macro_recall: mean(groups.iter().map(Counts::recall)),
        micro_recall: pooled.recall(),
        macro_axis: axis,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportMode {
    /// AUC, F1 and precision@{5,8,15}.
    Ranking,
    /// Jaccard, precision and recall of binary assignments.
    Agreement,
}

pub const PRECISION_AT: [usize; 3] = [5, 8, 15];

/// Flat bundle of every metric that applies to a mode; inapplicable fields
/// are omitted from the JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: ReportMode,
    pub documents: usize,
    pub labels: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub macro_auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub micro_auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub macro_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub micro_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub precision_at_5: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub precision_at_8: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub precision_at_15: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub macro_jaccard: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub micro_jaccard: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub macro_precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub micro_precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub macro_recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub micro_recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub macro_axis: Option<MacroAxis>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub skipped_label_count: Option<usize>,
}

impl MetricsReport {
    fn empty(mode: ReportMode, documents: usize, labels: usize) -> Self {
        MetricsReport {
            mode,
            documents,
            labels,
            macro_auc: None,
            micro_auc: None,
            macro_f1: None,
            micro_f1: None,
            precision_at_5: None,
            precision_at_8: None,
            precision_at_15: None,
            macro_jaccard: None,
            micro_jaccard: None,
            macro_precision: None,
            micro_precision: None,
            macro_recall: None,
            micro_recall: None,
            macro_axis: None,
            skipped_label_count: None,
        }
    }

    pub fn precision_at(&self, n: usize) -> Option<f64> {
        match n {
            5 => self.precision_at_5,
            8 => self.precision_at_8,
            15 => self.precision_at_15,
            _ => None,
        }
    }

    /// Every populated value as `(name, value)`.
    pub fn values(&self) -> Vec<(&'static str, f64)> {
        [
            ("macro_auc", self.macro_auc),
            ("micro_auc", self.micro_auc),
            ("macro_f1", self.macro_f1),
            ("micro_f1", self.micro_f1),
            ("precision_at_5", self.precision_at_5),
            ("precision_at_8", self.precision_at_8),
            ("precision_at_15", self.precision_at_15),
            ("macro_jaccard", self.macro_jaccard),
            ("micro_jaccard", self.micro_jaccard),
            ("macro_precision", self.macro_precision),
            ("micro_precision", self.micro_precision),
            ("macro_recall", self.macro_recall),
            ("micro_recall", self.micro_recall),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect()
    }
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

pub fn full_report(scores: &ScoreMatrix, labels: &LabelMatrix, mode: ReportMode) -> Result<MetricsReport> {
    full_report_with(scores, labels, mode, DEFAULT_THRESHOLD, MacroAxis::Label)
}

pub fn full_report_with(
    scores: &ScoreMatrix,
    labels: &LabelMatrix,
    mode: ReportMode,
    threshold: f64,
    axis: MacroAxis,
) -> Result<MetricsReport> {
    check_shapes("full_report", scores, labels)?;
    let mut r = MetricsReport::empty(mode, scores.rows, scores.cols);
    match mode {
        ReportMode::Ranking => {
            let a = auc(scores, labels)?;
            r.macro_auc = a.macro_auc;
            r.micro_auc = a.micro_auc;
            r.skipped_label_count = Some(a.skipped_labels);
            let f = f1(scores, labels, threshold)?;
            r.macro_f1 = Some(f.macro_f1);
            r.micro_f1 = Some(f.micro_f1);
            let ranked: Vec<Vec<usize>> = (0..scores.rows).map(|i| ranked_labels(scores.row(i))).collect();
            for n in PRECISION_AT.into_iter().filter(|&n| n <= scores.cols) {
                let p = mean(ranked.iter().enumerate().map(|(i, order)| {
                    order.iter().take(n).filter(|&&j| labels.get(i, j) == 1).count() as f64 / n as f64
                }));
                match n {
                    5 => r.precision_at_5 = Some(p),
                    8 => r.precision_at_8 = Some(p),
                    _ => r.precision_at_15 = Some(p),
                }
            }
        }
        ReportMode::Agreement => {
            if !scores.is_binary() {
                return Err(Error::invalid("agreement mode needs binary scores"));
            }
            let a = set_agreement(&scores.binarize(0.5), labels, axis)?;
            r.macro_jaccard = Some(a.macro_jaccard);
            r.micro_jaccard = Some(a.micro_jaccard);
            r.macro_precision = Some(a.macro_precision);
            r.micro_precision = Some(a.micro_precision);
            r.macro_recall = Some(a.macro_recall);
            r.micro_recall = Some(a.micro_recall);
            r.macro_axis = Some(axis);
        }
    }
    Ok(r)
}
