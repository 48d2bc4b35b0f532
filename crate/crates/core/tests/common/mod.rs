//! Brute-force detection-metric oracle and random instance generator shared by
//! the eval and acceptance suites. Written against the label types only, not
//! the library's matching or AP code.
#![allow(dead_code)]

use sdedet::data::{format_labels, Label, Prediction};
use sdedet::eval::ImageRecord;
use sdedet::rng::SplitMix64;
use std::fmt::Write as _;
use std::path::Path;

fn corners(l: &Label) -> [f64; 4] {
    [l.cx - l.w / 2.0, l.cy - l.h / 2.0, l.cx + l.w / 2.0, l.cy + l.h / 2.0]
}

pub fn oracle_iou(a: &Label, b: &Label) -> f64 {
    let (a, b) = (corners(a), corners(b));
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union > 0.0 { inter / union } else { 0.0 }
}

/// Per-image greedy matching; returns (score, is_tp) for each kept prediction
/// and the number of truths of that class.
pub fn oracle_match(img: &ImageRecord, class: usize, thr: f64, min_score: f64) -> (Vec<(f64, bool)>, usize) {
    let gts: Vec<&Label> = img.gts.iter().filter(|g| g.class == class).collect();
    let mut preds: Vec<&Prediction> = img.preds.iter().filter(|p| p.label.class == class && p.score >= min_score).collect();
    // scores are distinct in these tests, so a plain sort is unambiguous
    preds.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let mut taken = vec![false; gts.len()];
    let mut out = vec![];
    for p in preds {
        let mut best = -1.0;
        let mut best_j = None;
        for j in 0..gts.len() {
            let v = oracle_iou(&p.label, gts[j]);
            if !taken[j] && v > best {
                best = v;
                best_j = Some(j);
            }
        }
        let tp = best_j.is_some() && best >= thr;
        if tp {
            taken[best_j.unwrap()] = true;
        }
        out.push((p.score, tp));
    }
    (out, gts.len())
}

/// AP as the sum, over true positives in rank order, of the best precision
/// achievable at that rank or later, each weighted by 1/n_gt.
pub fn oracle_ap(images: &[ImageRecord], class: usize, thr: f64) -> f64 {
    let mut all = vec![];
    let mut n_gt = 0;
    for img in images {
        let (o, n) = oracle_match(img, class, thr, -1.0);
        all.extend(o);
        n_gt += n;
    }
    if n_gt == 0 {
        return 0.0;
    }
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let prec: Vec<f64> = (0..all.len())
        .map(|k| all[..=k].iter().filter(|o| o.1).count() as f64 / (k + 1) as f64)
        .collect();
    let mut ap = 0.0;
    for k in 0..all.len() {
        if all[k].1 {
            ap += prec[k..].iter().cloned().fold(0.0, f64::max) / n_gt as f64;
        }
    }
    ap
}

pub struct Oracle {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
    pub map50: f64,
    pub map50_95: f64,
}

pub fn oracle(images: &[ImageRecord], conf: f64, iou: f64) -> Oracle {
    let mut classes: Vec<usize> = images.iter().flat_map(|i| i.gts.iter().map(|g| g.class)).collect();
    classes.sort();
    classes.dedup();
    let map_at = |t: f64| {
        if classes.is_empty() {
            0.0
        } else {
            classes.iter().map(|&c| oracle_ap(images, c, t)).sum::<f64>() / classes.len() as f64
        }
    };
    let ts: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let (mut tp, mut fp, mut n_gt) = (0usize, 0usize, 0usize);
    for img in images {
        n_gt += img.gts.len();
        let mut pred_classes: Vec<usize> = img.preds.iter().map(|p| p.label.class).chain(img.gts.iter().map(|g| g.class)).collect();
        pred_classes.sort();
        pred_classes.dedup();
        for c in pred_classes {
            let (o, _) = oracle_match(img, c, iou, conf);
            tp += o.iter().filter(|x| x.1).count();
            fp += o.iter().filter(|x| !x.1).count();
        }
    }
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    Oracle { p, r, f1, map50: map_at(0.5), map50_95: ts.iter().map(|&t| map_at(t)).sum::<f64>() / 10.0 }
}

fn rand_label(rng: &mut SplitMix64, class: usize) -> Label {
    let w = rng.uniform(0.02, 0.4);
    let h = rng.uniform(0.02, 0.4);
    Label { class, cx: rng.uniform(w / 2.0, 1.0 - w / 2.0), cy: rng.uniform(h / 2.0, 1.0 - h / 2.0), w, h }
}

fn jitter(rng: &mut SplitMix64, l: &Label) -> Label {
    let w = (l.w * rng.uniform(0.8, 1.25)).min(0.9);
    let h = (l.h * rng.uniform(0.8, 1.25)).min(0.9);
    let cx = (l.cx + rng.uniform(-0.3, 0.3) * l.w).clamp(w / 2.0, 1.0 - w / 2.0);
    let cy = (l.cy + rng.uniform(-0.3, 0.3) * l.h).clamp(h / 2.0, 1.0 - h / 2.0);
    Label { class: l.class, cx, cy, w, h }
}

pub fn random_set(seed: u64) -> Vec<ImageRecord> {
    let mut rng = SplitMix64::new(seed);
    let n_img = 1 + rng.below(6);
    let n_cls = 1 + rng.below(3);
    (0..n_img)
        .map(|i| {
            let gts: Vec<Label> = (0..rng.below(7))
                .map(|_| {
                    let c = rng.below(n_cls);
                    rand_label(&mut rng, c)
                })
                .collect();
            let mut preds = vec![];
            for g in &gts {
                for _ in 0..rng.below(3) {
                    let mut l = jitter(&mut rng, g);
                    if rng.next_f64() < 0.1 {
                        l.class = rng.below(n_cls + 1);
                    }
                    preds.push(Prediction { score: rng.next_f64(), label: l });
                }
            }
            for _ in 0..rng.below(4) {
                let c = rng.below(n_cls);
                preds.push(Prediction { score: rng.next_f64(), label: rand_label(&mut rng, c) });
            }
            ImageRecord { name: format!("img{i:03}"), gts, preds }
        })
        .collect()
}

/// One `<name>.txt` per image in each directory, six decimals.
pub fn write_set(set: &[ImageRecord], pred: &Path, gt: &Path) {
    for img in set {
        std::fs::write(gt.join(format!("{}.txt", img.name)), format_labels(&img.gts)).unwrap();
        let mut s = String::new();
        for p in &img.preds {
            let l = p.label;
            writeln!(s, "{} {:.6} {:.6} {:.6} {:.6} {:.6}", l.class, p.score, l.cx, l.cy, l.w, l.h).unwrap();
        }
        std::fs::write(pred.join(format!("{}.txt", img.name)), s).unwrap();
    }
}

fn six(v: f64) -> f64 {
    format!("{v:.6}").parse().unwrap()
}

/// The set as it reads back from [`write_set`] output.
pub fn quantize(set: &[ImageRecord]) -> Vec<ImageRecord> {
    let q = |l: &Label| Label { class: l.class, cx: six(l.cx), cy: six(l.cy), w: six(l.w), h: six(l.h) };
    set.iter()
        .map(|img| ImageRecord {
            name: img.name.clone(),
            gts: img.gts.iter().map(q).collect(),
            preds: img.preds.iter().map(|p| Prediction { score: six(p.score), label: q(&p.label) }).collect(),
        })
        .collect()
}
