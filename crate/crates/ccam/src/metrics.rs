//! Evaluation metrics over per-image records.
//!
//! A record is judged on five axes: top-1/top-5 classification, top-1/top-5
//! localization (class correct AND box IoU strictly above 0.5 with any
//! ground-truth box), and ground-truth-known localization, which looks at
//! the box alone. For the GT-known judgment the caller runs a second pass
//! with the GT-known box in the record's predicted-box slot.

use crate::error::{Error, Result};
use crate::localization::BoxPx;

/// IoU above which a predicted box counts as correct (strict inequality).
pub const IOU_THRESHOLD: f64 = 0.5;

/// Intersection over union of two pixel boxes.
pub fn iou(a: &BoxPx, b: &BoxPx) -> f64 {
    let ix0 = a.x0.max(b.x0);
    let iy0 = a.y0.max(b.y0);
    let ix1 = a.x1.min(b.x1);
    let iy1 = a.y1.min(b.y1);
    if ix0 >= ix1 || iy0 >= iy1 {
        return 0.0;
    }
    let inter = ((ix1 - ix0) * (iy1 - iy0)) as f64;
    let union = (a.area() + b.area()) as f64 - inter;
    inter / union
}

/// One evaluated image.
#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub id: String,
    pub gt_label: usize,
    pub gt_boxes: Vec<BoxPx>,
    /// Up to five distinct predicted classes, best first, with probabilities.
    pub top5: Vec<(usize, f64)>,
    pub pred_box: BoxPx,
}

/// The five per-record judgments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Judgment {
    pub cls1_ok: bool,
    pub cls5_ok: bool,
    pub loc1_ok: bool,
    pub loc5_ok: bool,
    /// Box-only correctness of this record's predicted box.
    pub gtknown_ok: bool,
}

/// Judge one record. The box is correct when its IoU with ANY ground-truth
/// box strictly exceeds 0.5.
pub fn judge(record: &EvalRecord) -> Judgment {
    let cls1_ok = record
        .top5
        .first()
        .is_some_and(|&(c, _)| c == record.gt_label);
    let cls5_ok = record.top5.iter().any(|&(c, _)| c == record.gt_label);
    let box_ok = record
        .gt_boxes
        .iter()
        .any(|gt| iou(&record.pred_box, gt) > IOU_THRESHOLD);
    Judgment {
        cls1_ok,
        cls5_ok,
        loc1_ok: cls1_ok && box_ok,
        loc5_ok: cls5_ok && box_ok,
        gtknown_ok: box_ok,
    }
}

/// One metric row: error percentage plus the underlying counts.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub error_pct: f64,
    pub correct: usize,
    pub total: usize,
}

impl MetricRow {
    fn new(metric: &str, correct: usize, total: usize) -> Self {
        MetricRow {
            metric: metric.to_string(),
            error_pct: 100.0 * (total - correct) as f64 / total as f64,
            correct,
            total,
        }
    }

    pub fn accuracy_pct(&self) -> f64 {
        100.0 - self.error_pct
    }
}

/// Error rates over a record set, one row per judgment.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub rows: Vec<MetricRow>,
}

impl ErrorReport {
    pub fn row(&self, metric: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.metric == metric)
    }
}

pub const METRIC_NAMES: [&str; 5] = [
    "top1_cls_err",
    "top5_cls_err",
    "top1_loc_err",
    "top5_loc_err",
    "gtknown_loc_err",
];

/// Aggregate judgments into error percentages.
pub fn aggregate(records: &[EvalRecord]) -> Result<ErrorReport> {
    if records.is_empty() {
        return Err(Error::invalid("cannot aggregate an empty record list"));
    }
    let mut counts = [0usize; 5];
    for record in records {
        let j = judge(record);
        for (slot, ok) in counts.iter_mut().zip([
            j.cls1_ok,
            j.cls5_ok,
            j.loc1_ok,
            j.loc5_ok,
            j.gtknown_ok,
        ]) {
            *slot += ok as usize;
        }
    }
    let total = records.len();
    let rows = METRIC_NAMES
        .iter()
        .zip(counts)
        .map(|(name, correct)| MetricRow::new(name, correct, total))
        .collect();
    Ok(ErrorReport { rows })
}
