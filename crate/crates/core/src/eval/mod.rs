//! Detection metrics: IoU matching, P/R, all-point AP, mAP and F1.

mod dataset;
mod metrics;

pub use crate::bbox::iou;
pub use dataset::{evaluate, evaluate_dataset, load_records, ClassAp, EvalConfig, EvalReport, ImageRecord};
pub use metrics::{
    average_precision, coco_thresholds, f1, map_range, match_detections, mean_ap, pr_curve, pr_curve_from_outcomes,
    precision_recall, ConfusionCounts, MatchResult, PrCurve, ScoredBox,
};
