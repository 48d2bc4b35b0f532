use proptest::prelude::*;
use sdedet::bbox::BBox;
use sdedet::data::{Label, Prediction};
use sdedet::eval::*;
use sdedet::Error;

mod common;
use common::{oracle, random_set, write_set};

#[test]
fn evaluate_matches_brute_force_on_50_sets() {
    let cfg = EvalConfig::default();
    let mut informative = 0;
    for seed in 0..50 {
        let set = random_set(1000 + seed);
        let r = evaluate(&set, cfg);
        let o = oracle(&set, cfg.conf, cfg.iou);
        for (name, a, b) in [
            ("precision", r.precision, o.p),
            ("recall", r.recall, o.r),
            ("f1", r.f1, o.f1),
            ("map50", r.map50, o.map50),
            ("map50_95", r.map50_95, o.map50_95),
        ] {
            assert!((a - b).abs() <= 1e-9, "seed {seed} {name}: {a} vs oracle {b}");
        }
        informative += (r.map50 > 0.0 && r.map50 < 1.0 && r.map50_95 < r.map50) as usize;
    }
    assert!(informative >= 20, "only {informative} sets exercise partial AP");
}

#[test]
fn evaluate_dataset_reads_directories() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, gt) = (dir.path().join("pred"), dir.path().join("gt"));
    std::fs::create_dir_all(&pred).unwrap();
    std::fs::create_dir_all(&gt).unwrap();
    let set = random_set(7);
    write_set(&set, &pred, &gt);
    let records = load_records(&pred, &gt).unwrap();
    assert_eq!(records.len(), set.len());
    let from_files = evaluate_dataset(&pred, &gt, EvalConfig::default()).unwrap();
    let o = oracle(&records, 0.25, 0.5);
    assert!((from_files.map50 - o.map50).abs() < 1e-9);
    assert!((from_files.f1 - o.f1).abs() < 1e-9);

    std::fs::remove_file(gt.join(format!("{}.txt", set[0].name))).unwrap();
    match evaluate_dataset(&pred, &gt, EvalConfig::default()) {
        Err(Error::Dataset(msg)) => assert!(msg.contains(&set[0].name), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn perfect_predictions_score_one() {
    let mut set = random_set(3);
    for img in &mut set {
        img.preds = img.gts.iter().map(|&l| Prediction { score: 0.9, label: l }).collect();
    }
    let extra = Label { class: 0, cx: 0.5, cy: 0.5, w: 0.1, h: 0.1 };
    set[0].gts.push(extra);
    set[0].preds.push(Prediction { score: 0.9, label: extra });
    let r = evaluate(&set, EvalConfig::default());
    assert_eq!((r.precision, r.recall, r.f1, r.map50, r.map50_95), (1.0, 1.0, 1.0, 1.0, 1.0));
}

#[test]
fn table_row_f1() {
    assert!((f1(0.883, 0.771) - 0.823).abs() <= 5e-4);
    // counts giving P = 0.883 and R = 0.771 exactly
    let c = ConfusionCounts { tp: 771, fp: 102, fn_: 229 };
    let (p, r) = precision_recall(c);
    assert!((p - 771.0 / 873.0).abs() < 1e-12 && r == 0.771);
    assert_eq!(format!("{:.3}", f1(p, r)), "0.823");
}

// ---- invariants ----

fn arb_box() -> impl Strategy<Value = BBox> {
    (0.0..0.9f64, 0.0..0.9f64, 0.01..0.5f64, 0.01..0.5f64).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

fn arb_scene() -> impl Strategy<Value = (Vec<ScoredBox>, Vec<BBox>)> {
    (prop::collection::vec((0.0..1.0f64, arb_box()), 0..12), prop::collection::vec(arb_box(), 0..8))
        .prop_map(|(d, g)| (d.into_iter().map(|(score, bbox)| ScoredBox { score, bbox }).collect(), g))
}

proptest! {
    #[test]
    fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let (x, y) = (iou(&a, &b), iou(&b, &a));
        prop_assert_eq!(x, y);
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn counts_are_consistent((dets, gts) in arb_scene(), thr in 0.3..0.9f64) {
        let c = match_detections(&dets, &gts, thr).counts();
        prop_assert_eq!(c.tp + c.fn_, gts.len());
        prop_assert_eq!(c.tp + c.fp, dets.len());
    }

    #[test]
    fn f1_between_p_and_r(p in 0.0..1.0f64, r in 0.0..1.0f64) {
        let f = f1(p, r);
        prop_assert!(f >= p.min(r) - 1e-12 && f <= p.max(r) + 1e-12);
    }

    #[test]
    fn ap_bounded_and_envelope_monotone((dets, gts) in arb_scene()) {
        let curve = pr_curve(&dets, &gts, 0.5);
        let ap = average_precision(&curve);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ap));
        for w in curve.points.windows(2) {
            prop_assert!(w[1].0 >= w[0].0);
        }
        let mut env: Vec<f64> = curve.points.iter().map(|p| p.1).collect();
        for i in (0..env.len().saturating_sub(1)).rev() {
            env[i] = env[i].max(env[i + 1]);
        }
        prop_assert!(env.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn ap_invariant_under_monotone_rescoring((dets, gts) in arb_scene()) {
        let moved: Vec<ScoredBox> = dets.iter().map(|d| ScoredBox { score: d.score.powi(3) * 0.5 + 0.1, ..*d }).collect();
        let a = average_precision(&pr_curve(&dets, &gts, 0.5));
        let b = average_precision(&pr_curve(&moved, &gts, 0.5));
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn extra_true_positive_never_lowers_ap((dets, mut gts) in arb_scene(), b in arb_box()) {
        // a fresh truth plus an exact, top-scoring detection of it
        gts.retain(|g| iou(g, &b) == 0.0);
        let before = average_precision(&pr_curve(&dets, &gts, 0.5));
        let mut d2 = dets.clone();
        d2.push(ScoredBox { score: 2.0, bbox: b });
        let mut g2 = gts.clone();
        g2.push(b);
        let after = average_precision(&pr_curve(&d2, &g2, 0.5));
        prop_assert!(after >= before - 1e-12, "{before} -> {after}");
    }
}
