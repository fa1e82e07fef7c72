//! Pixel and object metrics, threshold sweeps and fold aggregation.

pub mod curve;
pub mod metrics;
pub mod objects;

pub use curve::{
    crossval_aggregate, curve_csv, default_thresholds, operating_point, pr_sweep, threshold_mask, write_curve_csv,
    AggregateReport, EvalFrame, EvalReport, CURVE_HEADER, EVAL_SCHEMA_VERSION,
};
pub use metrics::{confusion, metrics, ConfusionCounts, MetricsReport, ObjectCounts};
pub use objects::{trip_object_detection, GtObjects, ObjectDetection, ObjectRecord, DEFAULT_THETA_DET};
