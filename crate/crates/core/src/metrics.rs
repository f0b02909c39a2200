//! Binarisation, IoU and accuracy, per-subset reports and run comparison.
//!
//! IoU uses the empty-agreement convention: two empty masks score 1, an empty
//! ground truth against a non-empty prediction scores 0. Aggregate IoU is the
//! unweighted mean of per-sample IoUs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forge::{LoadedSample, ManipulationMask, SourceTag};
use crate::model::Model;
use crate::tensor::Scalar;

/// `s ≥ threshold → 1`.
pub fn binarize<F: Scalar>(s: &[F], height: usize, width: usize, threshold: F) -> Result<ManipulationMask> {
    if s.len() != height * width {
        return Err(Error::Dimension(format!("{} values for a {height}x{width} map", s.len())));
    }
    Ok(ManipulationMask {
        height,
        width,
        data: s.iter().map(|v| u8::from(*v >= threshold)).collect(),
    })
}

pub fn iou(pred: &ManipulationMask, gt: &ManipulationMask) -> Result<f64> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::Dimension(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (a, b) in pred.data.iter().zip(&gt.data) {
        inter += usize::from(*a == 1 && *b == 1);
        union += usize::from(*a == 1 || *b == 1);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Fraction of samples where `(p ≥ threshold)` matches the label.
pub fn accuracy<F: Scalar>(p: &[F], y: &[u8], threshold: F) -> Result<f64> {
    if p.len() != y.len() {
        return Err(Error::Dimension(format!("{} predictions vs {} labels", p.len(), y.len())));
    }
    if p.is_empty() {
        return Err(Error::Validation("accuracy of an empty batch".into()));
    }
    let correct = p
        .iter()
        .zip(y)
        .filter(|(pv, yv)| u8::from(**pv >= threshold) == **yv)
        .count();
    Ok(correct as f64 / p.len() as f64)
}

/// One table cell group: sample count and mean accuracy / IoU over it.
/// A metric is `None` when its branch is absent or the subset is empty.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Cell {
    pub count: usize,
    pub acc: Option<f64>,
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
struct Accum {
    count: usize,
    acc_sum: f64,
    acc_n: usize,
    iou_sum: f64,
    iou_n: usize,
}

impl Accum {
    fn push(&mut self, s: &SampleScore) {
        self.count += 1;
        if let Some(c) = s.correct {
            self.acc_sum += f64::from(u8::from(c));
            self.acc_n += 1;
        }
        if let Some(v) = s.iou {
            self.iou_sum += v;
            self.iou_n += 1;
        }
    }

    fn from_cell(c: &Cell) -> Self {
        Self {
            count: c.count,
            acc_sum: c.acc.map_or(0.0, |a| a * c.count as f64),
            acc_n: if c.acc.is_some() { c.count } else { 0 },
            iou_sum: c.iou.map_or(0.0, |a| a * c.count as f64),
            iou_n: if c.iou.is_some() { c.count } else { 0 },
        }
    }

    fn add(&mut self, o: &Accum) {
        self.count += o.count;
        self.acc_sum += o.acc_sum;
        self.acc_n += o.acc_n;
        self.iou_sum += o.iou_sum;
        self.iou_n += o.iou_n;
    }

    fn cell(&self) -> Cell {
        Cell {
            count: self.count,
            acc: (self.acc_n > 0).then(|| self.acc_sum / self.acc_n as f64),
            iou: (self.iou_n > 0).then(|| self.iou_sum / self.iou_n as f64),
        }
    }
}

/// Per-sample outcome feeding a [`MetricsReport`].
#[derive(Debug, Clone, PartialEq)]
pub struct SampleScore {
    pub label: u8,
    pub source_tag: SourceTag,
    pub correct: Option<bool>,
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub threshold_det: f64,
    pub threshold_seg: f64,
    pub all: Cell,
    pub real: Cell,
    pub fake: Cell,
    pub per_source_tag: BTreeMap<String, Cell>,
}

impl MetricsReport {
    pub fn from_scores(scores: &[SampleScore], threshold_det: f64, threshold_seg: f64) -> Self {
        let mut all = Accum::default();
        let mut real = Accum::default();
        let mut fake = Accum::default();
        let mut tags: BTreeMap<String, Accum> = BTreeMap::new();
        for s in scores {
            all.push(s);
            if s.label == 1 { fake.push(s) } else { real.push(s) }
            tags.entry(s.source_tag.to_string()).or_default().push(s);
        }
        Self {
            threshold_det,
            threshold_seg,
            all: all.cell(),
            real: real.cell(),
            fake: fake.cell(),
            per_source_tag: tags.into_iter().map(|(k, v)| (k, v.cell())).collect(),
        }
    }

    pub fn acc_all(&self) -> Option<f64> {
        self.all.acc
    }

    pub fn iou_all(&self) -> Option<f64> {
        self.all.iou
    }

    /// Count-weighted combination of reports over disjoint sample sets.
    pub fn merge(&self, other: &MetricsReport) -> Result<MetricsReport> {
        if self.threshold_det != other.threshold_det || self.threshold_seg != other.threshold_seg {
            return Err(Error::Validation("cannot merge reports with different thresholds".into()));
        }
        let join = |a: &Cell, b: &Cell| {
            let mut acc = Accum::from_cell(a);
            acc.add(&Accum::from_cell(b));
            acc.cell()
        };
        let mut tags = self.per_source_tag.clone();
        for (k, v) in &other.per_source_tag {
            let merged = match tags.get(k) {
                Some(c) => join(c, v),
                None => *v,
            };
            tags.insert(k.clone(), merged);
        }
        Ok(MetricsReport {
            threshold_det: self.threshold_det,
            threshold_seg: self.threshold_seg,
            all: join(&self.all, &other.all),
            real: join(&self.real, &other.real),
            fake: join(&self.fake, &other.fake),
            per_source_tag: tags,
        })
    }

    /// Column names and values in table order: Real, Fake, per-tag, All —
    /// first for accuracy, then for IoU.
    pub fn columns(&self) -> Vec<(String, Option<f64>)> {
        let mut cols = Vec::new();
        for (metric, pick) in [("Acc", 0), ("IoU", 1)] {
            let get = |c: &Cell| if pick == 0 { c.acc } else { c.iou };
            cols.push((format!("{metric}-Real"), get(&self.real)));
            cols.push((format!("{metric}-Fake"), get(&self.fake)));
            for (tag, c) in &self.per_source_tag {
                cols.push((format!("{metric}-{tag}"), get(c)));
            }
            cols.push((format!("{metric}-All"), get(&self.all)));
        }
        cols
    }

    pub fn to_text(&self) -> String {
        let cols = self.columns();
        let table = ComparisonTable {
            columns: cols.iter().map(|(n, _)| n.clone()).collect(),
            rows: vec![ComparisonRow { label: "model".into(), values: cols.into_iter().map(|(_, v)| v).collect() }],
        };
        table.to_text()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalThresholds {
    pub detection: f64,
    pub segmentation: f64,
}

impl Default for EvalThresholds {
    fn default() -> Self {
        Self { detection: 0.5, segmentation: 0.5 }
    }
}

impl EvalThresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("detection", self.detection), ("segmentation", self.segmentation)] {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Validation(format!("{name} threshold {t} is outside (0, 1)")));
            }
        }
        Ok(())
    }
}

/// Scores one sample given the model's `(p, S)`.
pub fn score_sample(
    p: Option<f32>,
    s: Option<&[f32]>,
    sample: &LoadedSample,
    thresholds: &EvalThresholds,
) -> Result<SampleScore> {
    let correct = p.map(|p| u8::from(p as f64 >= thresholds.detection) == sample.label);
    let iou = match s {
        Some(s) => {
            let pred = binarize(s, sample.mask.height, sample.mask.width, thresholds.segmentation as f32)?;
            Some(iou(&pred, &sample.mask)?)
        }
        None => None,
    };
    Ok(SampleScore { label: sample.label, source_tag: sample.source_tag, correct, iou })
}

/// Runs the model over `samples` and builds the per-subset report.
pub fn evaluate(model: &Model<f32>, samples: &[LoadedSample], thresholds: &EvalThresholds) -> Result<MetricsReport> {
    thresholds.validate()?;
    if samples.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty split".into()));
    }
    let scores = crate::exec::map(samples, |sample| {
        let out = model.forward_one(&sample.image)?;
        score_sample(out.p, out.s.as_deref(), sample, thresholds)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_scores(&scores, thresholds.detection, thresholds.segmentation))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub values: Vec<Option<f64>>,
}

/// Side-by-side metrics of several runs with a shared column layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub columns: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn to_text(&self) -> String {
        let fmt = |v: &Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let label_w = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
        let widths: Vec<usize> = self
            .columns
            .iter()
            .enumerate()
            .map(|(i, c)| {
                self.rows
                    .iter()
                    .map(|r| fmt(&r.values[i]).len())
                    .max()
                    .unwrap_or(0)
                    .max(c.len())
            })
            .collect();
        let mut out = String::new();
        let _ = write!(out, "{:<label_w$}", "");
        for (c, w) in self.columns.iter().zip(&widths) {
            let _ = write!(out, "  {c:>w$}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:<label_w$}", r.label);
            for (v, w) in r.values.iter().zip(&widths) {
                let _ = write!(out, "  {:>w$}", fmt(v));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Builds a comparison table; all reports must share one column layout.
pub fn compare_runs(reports: &[MetricsReport], labels: &[String]) -> Result<ComparisonTable> {
    if reports.len() < 2 {
        return Err(Error::Validation(format!("need at least two reports to compare, got {}", reports.len())));
    }
    if labels.len() != reports.len() {
        return Err(Error::Validation(format!("{} labels for {} reports", labels.len(), reports.len())));
    }
    let columns: Vec<String> = reports[0].columns().into_iter().map(|(n, _)| n).collect();
    let mut rows = Vec::with_capacity(reports.len());
    for (report, label) in reports.iter().zip(labels) {
        let cols = report.columns();
        let names: Vec<&String> = cols.iter().map(|(n, _)| n).collect();
        if names.len() != columns.len() || names.iter().zip(&columns).any(|(a, b)| *a != b) {
            return Err(Error::Validation(format!("report `{label}` has a different column layout")));
        }
        rows.push(ComparisonRow { label: label.clone(), values: cols.into_iter().map(|(_, v)| v).collect() });
    }
    Ok(ComparisonTable { columns, rows })
}
