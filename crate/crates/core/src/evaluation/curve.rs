use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{confusion, metrics, ConfusionCounts, MetricsReport, ObjectCounts};
use super::objects::{trip_object_detection, GtObjects};
use crate::error::{Error, Result};

/// Thresholds `0.00, 0.01, ..., 1.00`.
pub fn default_thresholds() -> Vec<f64> {
    (0..=100).map(|i| f64::from(i) / 100.0).collect()
}

/// One evaluated frame: predicted trip probabilities and ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalFrame {
    pub p_trip: Vec<f32>,
    pub gt: Vec<bool>,
    pub objects: GtObjects,
    pub ignore: Option<Vec<bool>>,
}

pub fn threshold_mask(p_trip: &[f32], tau: f64) -> Vec<bool> {
    p_trip.iter().map(|&p| f64::from(p) >= tau).collect()
}

/// Micro-averaged metrics at each threshold: counts are pooled over frames
/// before the ratios are taken.
pub fn pr_sweep(frames: &[EvalFrame], thresholds: &[f64], theta_det: f64) -> Result<Vec<MetricsReport>> {
    if frames.is_empty() {
        return Err(Error::InvalidArgument("pr_sweep needs at least one frame".into()));
    }
    if thresholds.is_empty() || thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument("thresholds must be nonempty and sorted".into()));
    }
    thresholds
        .par_iter()
        .map(|&tau| {
            let mut counts = ConfusionCounts::default();
            let mut objects = ObjectCounts::default();
            for f in frames {
                let pred = threshold_mask(&f.p_trip, tau);
                counts.add(&confusion(&pred, &f.gt, f.ignore.as_deref())?);
                objects.add(&trip_object_detection(&pred, &f.objects, theta_det).counts);
            }
            Ok(metrics(counts, Some(objects), tau))
        })
        .collect()
}

/// The point of highest F1; ties go to the lowest threshold.
pub fn operating_point(curve: &[MetricsReport]) -> Result<MetricsReport> {
    let mut best: Option<&MetricsReport> = None;
    for p in curve {
        let better = match best {
            None => true,
            Some(b) => p.f1 > b.f1 || (p.f1 == b.f1 && p.threshold < b.threshold),
        };
        if better {
            best = Some(p);
        }
    }
    best.cloned().ok_or_else(|| Error::InvalidArgument("empty curve".into()))
}

/// Unweighted mean of per-fold metrics. Each metric is averaged on its own,
/// so the mean F1 is generally not the harmonic mean of the mean precision
/// and recall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub trip_iou: f64,
    /// Mean over the folds where it is defined.
    pub trip_obj_detection: Option<f64>,
    pub threshold: f64,
    pub folds: usize,
}

pub fn crossval_aggregate(reports: &[MetricsReport]) -> Result<AggregateReport> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("no fold reports to aggregate".into()));
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let od: Vec<f64> = reports.iter().filter_map(|r| r.trip_obj_detection).collect();
    Ok(AggregateReport {
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        f1: mean(|r| r.f1),
        trip_iou: mean(|r| r.trip_iou),
        trip_obj_detection: (!od.is_empty()).then(|| od.iter().sum::<f64>() / od.len() as f64),
        threshold: mean(|r| r.threshold),
        folds: reports.len(),
    })
}

pub const CURVE_HEADER: &str = "threshold,precision,recall,f1,trip_iou,obj_det";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn curve_csv(curve: &[MetricsReport]) -> String {
    let mut s = String::from(CURVE_HEADER);
    s.push('\n');
    for p in curve {
        let _ = writeln!(
            s,
            "{:.2},{:.6},{:.6},{:.6},{:.6},{}",
            p.threshold,
            p.precision,
            p.recall,
            p.f1,
            p.trip_iou,
            opt(p.trip_obj_detection)
        );
    }
    s
}

pub fn write_curve_csv(path: &Path, curve: &[MetricsReport]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, curve_csv(curve)).map_err(|e| Error::io(path, e))
}

pub const EVAL_SCHEMA_VERSION: u32 = 1;

/// A curve with its operating point and the settings that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub theta_det: f64,
    pub thresholds: Vec<f64>,
    pub operating_point: MetricsReport,
    pub curve: Vec<MetricsReport>,
}

impl EvalReport {
    pub fn new(frames: &[EvalFrame], thresholds: &[f64], theta_det: f64) -> Result<Self> {
        let curve = pr_sweep(frames, thresholds, theta_det)?;
        Ok(Self {
            schema_version: EVAL_SCHEMA_VERSION,
            theta_det,
            thresholds: thresholds.to_vec(),
            operating_point: operating_point(&curve)?,
            curve,
        })
    }
}

impl EvalFrame {
    /// Ground truth from the frame's polygons (one object per polygon).
    pub fn from_prediction(frame: &crate::dataset::LabeledFrame, map: &crate::fusion::PredictionMap) -> Result<Self> {
        let (w, h) = (frame.width(), frame.height());
        if (map.width(), map.height()) != (w, h) {
            return Err(Error::Shape(format!(
                "prediction {}x{} for frame {} of {w}x{h}",
                map.width(),
                map.height(),
                frame.frame_id
            )));
        }
        Ok(Self {
            p_trip: map.trip_probability().to_vec(),
            gt: frame.trip_mask(),
            objects: GtObjects::from_polygons(&frame.polygons, w, h),
            ignore: None,
        })
    }
}
