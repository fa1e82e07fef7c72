use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel counts with trip as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, o: &Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

pub fn confusion(pred: &[bool], gt: &[bool], ignore: Option<&[bool]>) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() || ignore.is_some_and(|m| m.len() != gt.len()) {
        return Err(Error::Shape(format!(
            "confusion over {} predicted, {} ground-truth and {:?} ignore pixels",
            pred.len(),
            gt.len(),
            ignore.map(<[bool]>::len)
        )));
    }
    let mut c = ConfusionCounts::default();
    for i in 0..pred.len() {
        if ignore.is_some_and(|m| m[i]) {
            continue;
        }
        match (pred[i], gt[i]) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Ground-truth objects found versus present at one detection threshold.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectCounts {
    pub detected: u64,
    pub total: u64,
}

impl ObjectCounts {
    pub fn add(&mut self, o: &Self) {
        self.detected += o.detected;
        self.total += o.total;
    }

    /// Undefined without ground-truth objects.
    pub fn fraction(&self) -> Option<f64> {
        (self.total > 0).then(|| self.detected as f64 / self.total as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub trip_iou: f64,
    pub trip_obj_detection: Option<f64>,
    pub threshold: f64,
    pub counts: ConfusionCounts,
    pub objects: Option<ObjectCounts>,
}

/// `num / den`, or `if_empty` for an empty denominator.
fn ratio(num: u64, den: u64, if_empty: f64) -> f64 {
    if den == 0 {
        if_empty
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall, F1 and Trip IOU from pooled counts.
///
/// Empty denominators: precision is 1 when nothing was predicted and
/// nothing was missed (0 otherwise); recall is 1 when there was nothing to
/// find and nothing was predicted (0 otherwise); IOU is 1 when
/// `tp + fp + fn = 0`. These keep `f1 = 2 iou / (1 + iou)` exact.
pub fn metrics(counts: ConfusionCounts, objects: Option<ObjectCounts>, threshold: f64) -> MetricsReport {
    let ConfusionCounts { tp, fp, fn_, .. } = counts;
    let precision = ratio(tp, tp + fp, if fn_ == 0 { 1.0 } else { 0.0 });
    let recall = ratio(tp, tp + fn_, if fp == 0 { 1.0 } else { 0.0 });
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    MetricsReport {
        precision,
        recall,
        f1,
        trip_iou: ratio(tp, tp + fp + fn_, 1.0),
        trip_obj_detection: objects.and_then(|o| o.fraction()),
        threshold,
        counts,
        objects,
    }
}
