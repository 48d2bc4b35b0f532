use sdedet::data::{load_image, save_ppm};
use sdedet::network::NetworkSpec;
use sdedet::rng::SplitMix64;
use sdedet::Tensor;
use std::fmt::Write as _;
use std::path::Path;
use std::process::{Command, Output};

fn sdedet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdedet")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_image(path: &Path, h: usize, w: usize, seed: u64) {
    let mut r = SplitMix64::new(seed);
    save_ppm(&Tensor::from_fn(&[3, h, w], |_| r.next_f64() as f32), path).unwrap();
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn shapes_pass_with_13_rows() {
    let o = sdedet(&["shapes"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    let rows = out.lines().filter(|l| l.trim_start().chars().next().is_some_and(|c| c.is_ascii_digit())).count();
    assert_eq!(rows, 13);
    for s in ["(80,80,64)", "(40,40,128)", "(20,20,256)"] {
        assert!(out.contains(s), "{s}");
    }
}

#[test]
fn shapes_broken_stride_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = NetworkSpec::default();
    let l = spec.backbone.iter_mut().find(|l| l.name == "down2").unwrap();
    l.kind = sdedet::network::LayerKind::ConvModule { stride: 1, kernel: 3 };
    let path = dir.path().join("spec.json");
    std::fs::write(&path, spec.to_json()).unwrap();
    let o = sdedet(&["shapes", "--spec", p(&path)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("row 4"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_and_catches_fault() {
    let o = sdedet(&["gradcheck", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    for b in ["star", "deform-attn", "ema", "conv"] {
        assert!(out.lines().any(|l| l.starts_with(b) && l.ends_with("ok")), "{b}: {out}");
    }
    assert_eq!(sdedet(&["gradcheck", "--inject-fault"]).status.code(), Some(1));
    assert_eq!(sdedet(&["gradcheck", "--groups", "3"]).status.code(), Some(2));
}

#[test]
fn infer_is_deterministic_and_respects_conf() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("a.ppm");
    write_image(&img, 120, 200, 1);
    let o = sdedet(&["infer", p(&img), "--conf", "1.0"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), "");

    let run = |extra: &[&str]| {
        let mut args = vec!["infer", p(&img), "--conf", "0.001", "--seed", "5"];
        args.extend_from_slice(extra);
        let o = sdedet(&args);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        stdout(&o)
    };
    let a = run(&[]);
    assert!(!a.is_empty());
    assert_eq!(a, run(&[]));
    for line in a.lines() {
        let f: Vec<f64> = line.split(' ').map(|s| s.parse().unwrap()).collect();
        assert_eq!(f.len(), 6);
        assert!(f[2] >= 0.0 && f[4] <= 200.0 && f[3] >= 0.0 && f[5] <= 120.0, "{line}");
    }

    let w = dir.path().join("w.sdew");
    assert_eq!(sdedet(&["init-weights", "--seed", "5", "--out", p(&w)]).status.code(), Some(0));
    assert_eq!(run(&["--weights", p(&w)]), a);
}

#[test]
fn infer_input_errors_exit_2() {
    let o = sdedet(&["infer", "/nonexistent/x.ppm"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("x.ppm"));
    assert_eq!(sdedet(&["infer", "x.ppm", "--conf", "1.5"]).status.code(), Some(2));
    assert_eq!(sdedet(&["frobnicate"]).status.code(), Some(2));
}

/// 100 images × 10 truths; 771 found exactly plus 102 disjoint false alarms
/// give P = 771/873 ≈ 0.883 and R = 0.771.
fn write_eval_fixture(pred: &Path, gt: &Path) {
    std::fs::create_dir_all(pred).unwrap();
    std::fs::create_dir_all(gt).unwrap();
    let mut found = 0;
    let mut fps = 0;
    for i in 0..100 {
        let (mut g, mut pr) = (String::new(), String::new());
        for j in 0..10 {
            let cx = 0.05 + 0.1 * j as f64;
            writeln!(g, "0 {cx:.6} 0.250000 0.080000 0.080000").unwrap();
            if i * 10 + j < 771 {
                writeln!(pr, "0 0.900000 {cx:.6} 0.250000 0.080000 0.080000").unwrap();
                found += 1;
            }
        }
        if fps < 102 {
            for _ in 0..2.min(102 - fps) {
                writeln!(pr, "0 0.800000 0.500000 0.750000 0.080000 0.080000").unwrap();
                fps += 1;
            }
        }
        std::fs::write(gt.join(format!("{i:03}.txt")), g).unwrap();
        std::fs::write(pred.join(format!("{i:03}.txt")), pr).unwrap();
    }
    assert_eq!((found, fps), (771, 102));
}

#[test]
fn eval_reports_table_f1() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, gt) = (dir.path().join("pred"), dir.path().join("gt"));
    write_eval_fixture(&pred, &gt);
    let o = sdedet(&["eval", p(&pred), p(&gt)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!((v["precision"].as_f64().unwrap() - 0.883).abs() < 5e-4);
    assert!((v["recall"].as_f64().unwrap() - 0.771).abs() < 1e-12);
    assert_eq!(format!("{:.3}", v["f1"].as_f64().unwrap()), "0.823");

    let report = dir.path().join("r.json");
    let o = sdedet(&["eval", p(&pred), p(&gt), "--out", p(&report)]);
    assert!(stdout(&o).contains("f1 0.823"), "{}", stdout(&o));
    assert!(report.exists());

    std::fs::remove_file(gt.join("042.txt")).unwrap();
    let o = sdedet(&["eval", p(&pred), p(&gt)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("042"), "{}", stderr(&o));
}

#[test]
fn eval_perfect_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, gt) = (dir.path().join("pred"), dir.path().join("gt"));
    std::fs::create_dir_all(&pred).unwrap();
    std::fs::create_dir_all(&gt).unwrap();
    std::fs::write(gt.join("a.txt"), "0 0.5 0.5 0.2 0.2\n").unwrap();
    std::fs::write(pred.join("a.txt"), "0 0.9 0.5 0.5 0.2 0.2\n").unwrap();
    let v: serde_json::Value = serde_json::from_str(&stdout(&sdedet(&["eval", p(&pred), p(&gt)]))).unwrap();
    for k in ["precision", "recall", "f1", "map50", "map50_95"] {
        assert_eq!(v[k].as_f64(), Some(1.0), "{k}");
    }
}

fn sample_dir(dir: &Path, n: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        write_image(&dir.join(format!("s{i:02}.ppm")), 8, 10, i as u64);
        std::fs::write(dir.join(format!("s{i:02}.txt")), "0 0.300000 0.400000 0.200000 0.200000\n").unwrap();
    }
}

#[test]
fn augment_writes_sevenfold() {
    let dir = tempfile::tempdir().unwrap();
    let (src, out) = (dir.path().join("in"), dir.path().join("out"));
    sample_dir(&src, 3);
    let o = sdedet(&["augment", p(&src), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let names: Vec<String> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(names.iter().filter(|n| n.ends_with(".ppm")).count(), 21);
    assert_eq!(names.iter().filter(|n| n.ends_with(".txt")).count(), 21);
    let flipped = std::fs::read_to_string(out.join("s01_hflip.txt")).unwrap();
    assert_eq!(flipped, "0 0.700000 0.400000 0.200000 0.200000\n");
    assert_eq!(load_image(out.join("s01_original.ppm")).unwrap(), load_image(src.join("s01.ppm")).unwrap());
}

#[test]
fn split_counts_and_copies() {
    let dir = tempfile::tempdir().unwrap();
    let (src, out) = (dir.path().join("in"), dir.path().join("out"));
    sample_dir(&src, 10);
    let a = sdedet(&["split", p(&src), "--seed", "9", "--out", p(&out)]);
    assert_eq!(a.status.code(), Some(0));
    assert!(stdout(&a).ends_with("train 6 test 4\n"));
    assert_eq!(stdout(&a), stdout(&sdedet(&["split", p(&src), "--seed", "9"])));
    assert_eq!(std::fs::read_dir(out.join("train")).unwrap().count(), 12);
    assert_eq!(std::fs::read_dir(out.join("test")).unwrap().count(), 8);
}

#[test]
fn gradcam_writes_input_sized_overlay() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("a.ppm");
    write_image(&img, 64, 64, 2);
    let out = dir.path().join("cam.ppm");
    let o = sdedet(&["gradcam", p(&img), "--layer", "deform", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("20x20"));
    assert_eq!(load_image(&out).unwrap().shape(), &[3, 640, 640]);
    let o = sdedet(&["gradcam", p(&img), "--layer", "nope", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("neck.p3"));
}

#[test]
fn bench_reports_latency_and_flops() {
    let o = Command::new(env!("CARGO_BIN_EXE_sdedet")).args(["bench", "--reps", "1"]).env("SDE_THREADS", "2").output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("mean") && out.contains("stddev") && out.contains("on 2 threads"), "{out}");
    assert!(out.contains("flops"));
}
