//! Precision, recall, AP and F1 over scored detections.

use crate::bbox::BBox;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// `(tp/(tp+fp), tp/(tp+fn))`, each 0 when its denominator is 0.
pub fn precision_recall(c: ConfusionCounts) -> (f64, f64) {
    let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    (ratio(c.tp, c.tp + c.fp), ratio(c.tp, c.tp + c.fn_))
}

/// Harmonic mean; 0 when `p + r = 0`.
pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub score: f64,
    pub bbox: BBox,
}

/// Per-detection outcome, in descending score order.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub outcomes: Vec<(f64, bool)>,
    pub fn_: usize,
}

impl MatchResult {
    pub fn counts(&self) -> ConfusionCounts {
        let tp = self.outcomes.iter().filter(|o| o.1).count();
        ConfusionCounts { tp, fp: self.outcomes.len() - tp, fn_: self.fn_ }
    }
}

/// Greedy one-to-one matching: detections in descending score (ties keep
/// input order) each take the unmatched truth of highest IoU when that IoU
/// reaches `iou_thresh`.
pub fn match_detections(dets: &[ScoredBox], gts: &[BBox], iou_thresh: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut used = vec![false; gts.len()];
    let mut outcomes = Vec::with_capacity(dets.len());
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if used[j] {
                continue;
            }
            let iou = dets[i].bbox.iou(g);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        let hit = matches!(best, Some((_, iou)) if iou >= iou_thresh);
        if let (true, Some((j, _))) = (hit, best) {
            used[j] = true;
        }
        outcomes.push((dets[i].score, hit));
    }
    MatchResult { outcomes, fn_: used.iter().filter(|u| !**u).count() }
}

/// `(recall, precision)` points, recall non-decreasing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrCurve {
    pub points: Vec<(f64, f64)>,
}

/// Cumulative points over outcomes already in ranking order.
pub fn pr_curve_from_outcomes(outcomes: &[(f64, bool)], n_gt: usize) -> PrCurve {
    let mut tp = 0usize;
    let points = outcomes
        .iter()
        .enumerate()
        .map(|(k, &(_, hit))| {
            tp += hit as usize;
            let r = if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 };
            (r, tp as f64 / (k + 1) as f64)
        })
        .collect();
    PrCurve { points }
}

pub fn pr_curve(dets: &[ScoredBox], gts: &[BBox], iou_thresh: f64) -> PrCurve {
    pr_curve_from_outcomes(&match_detections(dets, gts, iou_thresh).outcomes, gts.len())
}

/// All-point interpolated area: precision replaced by its running maximum
/// from the right, integrated stepwise over recall from 0.
pub fn average_precision(curve: &PrCurve) -> f64 {
    let mut envelope: Vec<f64> = curve.points.iter().map(|p| p.1).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut prev_r = 0.0;
    let mut ap = 0.0;
    for (&(r, _), &p) in curve.points.iter().zip(&envelope) {
        ap += (r - prev_r) * p;
        prev_r = r;
    }
    ap
}

pub fn mean_ap(per_class: &[f64]) -> f64 {
    if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().sum::<f64>() / per_class.len() as f64
    }
}

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// Mean of single-class AP over [`coco_thresholds`].
pub fn map_range(dets: &[ScoredBox], gts: &[BBox]) -> f64 {
    let aps: Vec<f64> = coco_thresholds().iter().map(|&t| average_precision(&pr_curve(dets, gts, t))).collect();
    mean_ap(&aps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sb(score: f64, b: BBox) -> ScoredBox {
        ScoredBox { score, bbox: b }
    }

    fn unit() -> BBox {
        BBox::new(0.0, 0.0, 1.0, 1.0)
    }

    /// A box overlapping `unit()` with IoU exactly `v` (shifted along x).
    fn at_iou(v: f64) -> BBox {
        // overlap 1−s, union 1+s ⇒ s = (1−v)/(1+v)
        let s = (1.0 - v) / (1.0 + v);
        BBox::new(s, 0.0, 1.0 + s, 1.0)
    }

    #[test]
    fn matching_examples() {
        let m = match_detections(&[sb(0.9, at_iou(0.6))], &[unit()], 0.5);
        assert_eq!(m.counts(), ConfusionCounts { tp: 1, fp: 0, fn_: 0 });
        let m = match_detections(&[sb(0.9, at_iou(0.4))], &[unit()], 0.5);
        assert_eq!(m.counts(), ConfusionCounts { tp: 0, fp: 1, fn_: 1 });
        let m = match_detections(&[sb(0.8, unit()), sb(0.9, unit())], &[unit()], 0.5);
        assert_eq!(m.outcomes, vec![(0.9, true), (0.8, false)]);
    }

    #[test]
    fn precision_recall_examples() {
        assert_eq!(precision_recall(ConfusionCounts { tp: 8, fp: 2, fn_: 2 }), (0.8, 0.8));
        assert_eq!(precision_recall(ConfusionCounts { tp: 0, fp: 0, fn_: 3 }).0, 0.0);
        assert_eq!(precision_recall(ConfusionCounts { tp: 5, fp: 0, fn_: 0 }), (1.0, 1.0));
    }

    #[test]
    fn curve_and_ap_examples() {
        let c = pr_curve_from_outcomes(&[(0.9, true), (0.8, false), (0.7, true)], 2);
        assert_eq!(c.points, vec![(0.5, 1.0), (0.5, 0.5), (1.0, 2.0 / 3.0)]);
        assert!((average_precision(&c) - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);

        let all_tp = pr_curve_from_outcomes(&[(0.9, true), (0.5, true)], 2);
        assert_eq!(average_precision(&all_tp), 1.0);
        let all_fp = pr_curve_from_outcomes(&[(0.9, false), (0.5, false)], 2);
        assert!(all_fp.points.iter().all(|&p| p == (0.0, 0.0)));
        assert_eq!(average_precision(&PrCurve::default()), 0.0);
    }

    #[test]
    fn map_examples() {
        assert_eq!(mean_ap(&[0.8, 0.6]), 0.7);
        assert_eq!(mean_ap(&[0.4]), 0.4);
        let gts = [unit(), BBox::new(3.0, 3.0, 4.0, 4.0)];
        let perfect: Vec<_> = gts.iter().map(|&b| sb(1.0, b)).collect();
        assert_eq!(map_range(&perfect, &gts), 1.0);
        assert_eq!(map_range(&[], &gts), 0.0);
        let loose = [sb(0.9, at_iou(0.55))];
        assert!((map_range(&loose, &[unit()]) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn f1_examples() {
        assert!((f1(0.883, 0.771) - 0.823).abs() < 5e-4);
        assert_eq!(f1(1.0, 0.0), 0.0);
        assert!((f1(0.6, 0.6) - 0.6).abs() < 1e-15);
    }
}
