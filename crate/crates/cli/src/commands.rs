use crate::{Cli, Command, ModelArgs};
use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use sdedet::data::{self, letterbox, load_image, save_ppm, AugmentKind, Letterbox};
use sdedet::eval::{evaluate_dataset, EvalConfig};
use sdedet::network::{
    build_model, check_table1, detect, forward_logits, gradcam, load_weights, param_count, save_weights, DetectConfig,
    Detection, Hwc, Model, NetworkSpec, WeightStore,
};
use sdedet::nn::selfcheck::{block_gradchecks, CHECK_SHAPE, CHECK_TOLERANCE};
use sdedet::rng::SplitMix64;
use sdedet::Tensor;
use std::fmt::Write as _;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

pub fn run(cli: Cli) -> Result<ExitCode> {
    let seed = cli.seed;
    match cli.command {
        Command::Shapes { model } => shapes(&model, seed),
        Command::Gradcheck { groups, inject_fault } => gradcheck(seed, groups, inject_fault),
        Command::Infer { image, model, conf, nms_iou, out } => {
            infer(&image, &model, seed, DetectConfig { conf, nms_iou }, out.as_deref())
        }
        Command::Eval { pred_dir, gt_dir, conf, iou, out } => eval(&pred_dir, &gt_dir, EvalConfig { conf, iou }, out.as_deref()),
        Command::Augment { in_dir, out } => augment(&in_dir, &out),
        Command::Split { in_dir, ratio, out } => split(&in_dir, ratio, seed, out.as_deref()),
        Command::Gradcam { image, model, layer, out } => grad_cam(&image, &model, seed, &layer, &out),
        Command::Bench { model, reps } => bench(&model, seed, reps),
        Command::InitWeights { model, out } => {
            let spec = load_spec(&model)?;
            let store = WeightStore::seeded(&spec, seed)?;
            save_weights(&store, &out)?;
            println!("wrote {} tensors to {}", store.tensors.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn load_spec(args: &ModelArgs) -> Result<NetworkSpec> {
    let mut spec = match &args.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            NetworkSpec::from_json(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => NetworkSpec::default(),
    };
    if let Some(g) = args.groups {
        spec.neck.ema_groups = g;
        spec.validate()?;
    }
    Ok(spec)
}

fn load_model(args: &ModelArgs, seed: u64) -> Result<Model<f32>> {
    let spec = load_spec(args)?;
    Ok(match &args.weights {
        Some(p) => build_model(&spec, &load_weights(p)?)?,
        None => Model::new(spec, seed)?,
    })
}

fn input_side(model: &Model<f32>) -> Result<usize> {
    let Hwc(h, w, _) = model.spec().input;
    if h != w {
        bail!("letterboxing needs a square network input, spec has {h}x{w}");
    }
    Ok(h)
}

fn shapes(args: &ModelArgs, seed: u64) -> Result<ExitCode> {
    let model = load_model(args, seed)?;
    let rows = check_table1(&model, seed)?;
    let show = |h: Option<Hwc>| h.map_or("-".to_string(), |h| h.to_string());
    println!("{:>3}  {:<21} {:<7} {:<15} {:<15} status", "row", "operation", "layer", "expected", "actual");
    for r in &rows {
        let status = if r.ok() { "ok" } else { "MISMATCH" };
        let layer = r.layer.as_deref().unwrap_or("-");
        println!("{:>3}  {:<21} {:<7} {:<15} {:<15} {status}", r.row, r.op, layer, r.expected.to_string(), show(r.actual));
    }
    let spec = model.spec();
    let mut prev = spec.input;
    for l in &spec.backbone {
        if !l.table_row {
            println!("note: '{}' ({}) maps {} to {} and is not a table row", l.name, l.label(), prev, l.output);
        }
        prev = l.output;
    }
    println!("parameters: {}", param_count(&model));
    match rows.iter().find(|r| !r.ok()) {
        Some(r) => {
            eprintln!(
                "row {} ({}, layer {}) expected {} but got {}",
                r.row,
                r.op,
                r.layer.as_deref().unwrap_or("-"),
                r.expected,
                show(r.actual)
            );
            Ok(ExitCode::from(1))
        }
        None => Ok(ExitCode::SUCCESS),
    }
}

fn gradcheck(seed: u64, groups: usize, inject_fault: bool) -> Result<ExitCode> {
    let checks = block_gradchecks(seed, groups, inject_fault)?;
    let [c, h, w] = CHECK_SHAPE;
    println!("input {c}x{h}x{w}, tolerance {CHECK_TOLERANCE:e}");
    let mut failed = false;
    for ch in &checks {
        let ok = ch.rel_error < CHECK_TOLERANCE && ch.grad_scale > 0.0;
        failed |= !ok;
        println!("{:<12} max rel error {:.3e}  {}", ch.block, ch.rel_error, if ok { "ok" } else { "FAIL" });
    }
    Ok(if failed { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn to_source(d: &Detection, lb: &Letterbox) -> Detection {
    Detection { bbox: lb.to_source(&d.bbox), ..*d }
}

fn infer(image: &Path, args: &ModelArgs, seed: u64, cfg: DetectConfig, out: Option<&Path>) -> Result<ExitCode> {
    let model = load_model(args, seed)?;
    let img = load_image(image)?;
    let (input, lb) = letterbox(&img, input_side(&model)?)?;
    let dets = detect(&model, &input, cfg)?;
    let text: String = dets.iter().map(|d| to_source(d, &lb).to_line() + "\n").collect();
    match out {
        Some(p) => {
            std::fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
            println!("{} detections written to {}", dets.len(), p.display());
        }
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn eval(pred: &Path, gt: &Path, cfg: EvalConfig, out: Option<&Path>) -> Result<ExitCode> {
    let report = evaluate_dataset(pred, gt, cfg)?;
    let json = serde_json::to_string_pretty(&report)?;
    match out {
        Some(p) => {
            std::fs::write(p, json + "\n").with_context(|| format!("writing {}", p.display()))?;
            println!(
                "precision {:.3} recall {:.3} f1 {:.3} mAP@0.5 {:.3} mAP@0.5:0.95 {:.3}",
                report.precision, report.recall, report.f1, report.map50, report.map50_95
            );
        }
        None => println!("{json}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn augment(in_dir: &Path, out: &Path) -> Result<ExitCode> {
    let pairs = data::pair_files(in_dir)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    // one sample in memory per worker: the full set may not fit
    pairs.par_iter().try_for_each(|p| -> Result<()> {
        let sample = data::load_sample(p)?;
        for kind in AugmentKind::ALL {
            let a = data::augment(&sample, kind)?;
            save_ppm(&a.sample.image, out.join(format!("{}.ppm", a.stem())))?;
            std::fs::write(out.join(format!("{}.txt", a.stem())), data::format_labels(&a.sample.labels))?;
        }
        Ok(())
    })?;
    println!("{} samples -> {} outputs in {}", pairs.len(), pairs.len() * AugmentKind::ALL.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn split(in_dir: &Path, ratio: f64, seed: u64, out: Option<&Path>) -> Result<ExitCode> {
    let pairs = data::pair_files(in_dir)?;
    let (train, test) = data::split_dataset(&pairs, ratio, seed)?;
    if let Some(out) = out {
        for (part, set) in [("train", &train), ("test", &test)] {
            let dir = out.join(part);
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            for p in set {
                for f in [&p.image, &p.labels] {
                    let name = f.file_name().context("file without a name")?;
                    std::fs::copy(f, dir.join(name)).with_context(|| format!("copying {}", f.display()))?;
                }
            }
        }
    }
    let mut listing = String::new();
    for (part, set) in [("train", &train), ("test", &test)] {
        for p in set {
            writeln!(listing, "{part} {}", p.name)?;
        }
    }
    print!("{listing}");
    println!("train {} test {}", train.len(), test.len());
    Ok(ExitCode::SUCCESS)
}

/// Blue→cyan→yellow→red ramp.
fn jet(v: f32) -> [f32; 3] {
    let ramp = |c: f32| (1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0);
    [ramp(3.0), ramp(2.0), ramp(1.0)]
}

fn grad_cam(image: &Path, args: &ModelArgs, seed: u64, layer: &str, out: &Path) -> Result<ExitCode> {
    let model = load_model(args, seed)?;
    let side = input_side(&model)?;
    let (input, _) = letterbox(&load_image(image)?, side)?;
    let cam = gradcam(&model, &input, layer)?;
    let (ch, cw) = (cam.shape()[0], cam.shape()[1]);
    let plane = side * side;
    let mut overlay = Tensor::zeros(&[3, side, side]);
    let o = overlay.data_mut();
    for y in 0..side {
        for x in 0..side {
            let heat = jet(cam.get(&[y * ch / side, x * cw / side]));
            let i = y * side + x;
            for c in 0..3 {
                o[c * plane + i] = 0.5 * input.data()[c * plane + i] + 0.5 * heat[c];
            }
        }
    }
    save_ppm(&overlay, out)?;
    println!("layer {layer}: {ch}x{cw} map scaled to {side}x{side}, written to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn bench(args: &ModelArgs, seed: u64, reps: usize) -> Result<ExitCode> {
    if reps == 0 {
        bail!("--reps must be at least 1");
    }
    let model = load_model(args, seed)?;
    let side = input_side(&model)?;
    let mut rng = SplitMix64::new(seed);
    let image = Tensor::from_fn(&[3, side, side], |_| rng.next_f64() as f32);
    let (_, flops) = forward_logits(&model, &image)?;
    let mut ms = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        forward_logits(&model, &image)?;
        ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mean = ms.iter().sum::<f64>() / reps as f64;
    let var = ms.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / reps as f64;
    println!(
        "forward {side}x{side}: mean {mean:.1} ms, stddev {:.1} ms over {reps} runs on {} threads",
        var.sqrt(),
        rayon::current_num_threads()
    );
    println!("flops: {:.2} G (2 x multiply-adds of convolutions and matmuls)", flops as f64 / 1e9);
    println!("parameters: {}", param_count(&model));
    Ok(ExitCode::SUCCESS)
}
