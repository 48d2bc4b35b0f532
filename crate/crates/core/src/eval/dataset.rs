//! Dataset-level evaluation over per-image ground-truth and prediction files.

use super::metrics::*;
use crate::data::labels::{read_labels, read_predictions, Label, Prediction};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    /// Confidence operating point for precision, recall and F1.
    pub conf: f64,
    /// IoU threshold for precision, recall and F1.
    pub iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { conf: 0.25, iou: 0.5 }
    }
}

/// One image's truth and predictions, normalized coordinates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageRecord {
    pub name: String,
    pub gts: Vec<Label>,
    pub preds: Vec<Prediction>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: usize,
    pub gt_count: usize,
    pub ap50: f64,
    pub ap50_95: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub map50: f64,
    pub map50_95: f64,
    /// mAP at each of 0.50, 0.55, …, 0.95.
    pub ap_per_threshold: Vec<f64>,
    pub per_class: Vec<ClassAp>,
    pub counts: ConfusionCounts,
    /// Degenerate conventions that were applied.
    pub notes: Vec<String>,
}

fn class_matches(img: &ImageRecord, class: usize, iou: f64, min_score: f64) -> MatchResult {
    let dets: Vec<ScoredBox> = img
        .preds
        .iter()
        .filter(|p| p.label.class == class && p.score >= min_score)
        .map(|p| ScoredBox { score: p.score, bbox: p.label.bbox() })
        .collect();
    let gts: Vec<_> = img.gts.iter().filter(|g| g.class == class).map(|g| g.bbox()).collect();
    match_detections(&dets, &gts, iou)
}

/// AP of one class at one IoU threshold, detections pooled across images.
fn class_ap(images: &[ImageRecord], class: usize, iou: f64) -> f64 {
    let mut pooled = Vec::new();
    let mut n_gt = 0;
    for img in images {
        let m = class_matches(img, class, iou, f64::NEG_INFINITY);
        n_gt += m.outcomes.iter().filter(|o| o.1).count() + m.fn_;
        pooled.extend(m.outcomes);
    }
    // stable: equal scores keep image order, then within-image order
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));
    average_precision(&pr_curve_from_outcomes(&pooled, n_gt))
}

/// The five-metric report. mAP averages over classes present in the ground
/// truth; P/R/F1 count every prediction at or above `cfg.conf`, micro-averaged.
pub fn evaluate(images: &[ImageRecord], cfg: EvalConfig) -> EvalReport {
    let classes: BTreeSet<usize> = images.iter().flat_map(|i| i.gts.iter().map(|g| g.class)).collect();
    let pred_classes: BTreeSet<usize> = images.iter().flat_map(|i| i.preds.iter().map(|p| p.label.class)).collect();
    let thresholds = coco_thresholds();
    let mut notes = Vec::new();

    let per_class: Vec<ClassAp> = classes
        .iter()
        .map(|&c| {
            let aps: Vec<f64> = thresholds.iter().map(|&t| class_ap(images, c, t)).collect();
            let gt_count = images.iter().map(|i| i.gts.iter().filter(|g| g.class == c).count()).sum();
            ClassAp { class: c, gt_count, ap50: aps[0], ap50_95: mean_ap(&aps) }
        })
        .collect();
    let ap_per_threshold: Vec<f64> = thresholds
        .iter()
        .map(|&t| mean_ap(&classes.iter().map(|&c| class_ap(images, c, t)).collect::<Vec<_>>()))
        .collect();

    let mut counts = ConfusionCounts::default();
    for img in images {
        for &c in classes.union(&pred_classes) {
            counts += class_matches(img, c, cfg.iou, cfg.conf).counts();
        }
    }
    let (precision, recall) = precision_recall(counts);
    if counts.tp + counts.fp == 0 {
        notes.push(format!("no detections at confidence >= {}: precision set to 0", cfg.conf));
    }
    if classes.is_empty() {
        notes.push("ground truth is empty: recall and mAP set to 0".into());
    }
    EvalReport {
        precision,
        recall,
        f1: f1(precision, recall),
        map50: ap_per_threshold[0],
        map50_95: mean_ap(&ap_per_threshold),
        ap_per_threshold,
        per_class,
        counts,
        notes,
    }
}

fn txt_stems(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("txt") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Pairs `<stem>.txt` files across the two directories, in stem order.
pub fn load_records(pred_dir: impl AsRef<Path>, gt_dir: impl AsRef<Path>) -> Result<Vec<ImageRecord>> {
    let (pred_dir, gt_dir) = (pred_dir.as_ref(), gt_dir.as_ref());
    let preds = txt_stems(pred_dir)?;
    let gts = txt_stems(gt_dir)?;
    if let Some(s) = preds.keys().find(|s| !gts.contains_key(*s)) {
        return Err(Error::Dataset(format!("{s}.txt has predictions in {} but no ground truth in {}", pred_dir.display(), gt_dir.display())));
    }
    if let Some(s) = gts.keys().find(|s| !preds.contains_key(*s)) {
        return Err(Error::Dataset(format!("{s}.txt has ground truth in {} but no predictions in {}", gt_dir.display(), pred_dir.display())));
    }
    gts.iter()
        .map(|(name, gp)| Ok(ImageRecord { name: name.clone(), gts: read_labels(gp)?, preds: read_predictions(&preds[name])? }))
        .collect()
}

pub fn evaluate_dataset(pred_dir: impl AsRef<Path>, gt_dir: impl AsRef<Path>, cfg: EvalConfig) -> Result<EvalReport> {
    Ok(evaluate(&load_records(pred_dir, gt_dir)?, cfg))
}
