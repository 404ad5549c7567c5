//! Acceptance gate. Run with `cargo test -p lhinet-cli --test acceptance -- --nocapture`
//! to see one PASS/FAIL line per criterion.

#[path = "../../core/tests/common/oracles.rs"]
mod oracles;

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use lhinet_core::candidates::{load_candidates_csv, write_candidates_csv};
use lhinet_core::froc::{check_reported_cpm, cpm, froc};
use lhinet_core::geometry::{iou3, nms_indices, tile_volume, Box3, Tiling};
use lhinet_core::hs2::{load_model, save_model, Architecture, Hs2Model, Hs2Net, Label};
use lhinet_core::lhi::compute_lhi;
use lhinet_core::volume_io::{read_mhd, save_mhd};
use lhinet_core::{CtVolume, NoduleCandidate, VolumeGeometry};
use oracles::*;
use rand::Rng;
use serde_json::Value;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, Duration);

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn lhinet(args: &[&str]) -> Result<String, String> {
    let out =
        Command::new(env!("CARGO_BIN_EXE_lhinet")).args(args).output().map_err(|e| format!("spawn lhinet: {e}"))?;
    if !out.status.success() {
        return Err(format!("lhinet {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn cpm_rows() -> Outcome {
    let rows: [(&str, [f64; 7], f64); 3] = [
        ("row A", [0.659, 0.745, 0.819, 0.865, 0.906, 0.933, 0.946], 0.839),
        ("row B", [0.848, 0.876, 0.905, 0.933, 0.943, 0.957, 0.970], 0.919),
        ("row C", [0.904, 0.914, 0.933, 0.957, 0.971, 0.971, 0.971], 0.952),
    ];
    let mut notes = Vec::new();
    for (name, s, reported) in rows {
        let c = check_reported_cpm(&s, reported).map_err(|e| e.to_string())?;
        check((c.computed - cpm(&s).unwrap()).abs() == 0.0, || "check disagrees with cpm".into())?;
        match name {
            "row C" => {
                check((c.computed - 0.946).abs() <= 0.0005, || format!("row C computes to {}", c.computed))?;
                check(!c.consistent, || "row C discrepancy not flagged".into())?;
                notes.push(format!("row C {:.4} flagged vs {reported}", c.computed));
            }
            _ => {
                check(c.consistent, || format!("{name} computes to {}, expected {reported}", c.computed))?;
                notes.push(format!("{name} {:.4}", c.computed));
            }
        }
    }
    Ok(notes.join(", "))
}

fn lhi_oracle_match() -> Outcome {
    let mut rng = seeded_rng(101);
    for i in 0..1000 {
        let stack = random_stack(&mut rng, 11, 32, 32, 30.0);
        let tau = rng.random_range(1..=15);
        let got = compute_lhi(&stack, tau, 30.0).map_err(|e| e.to_string())?;
        check(got == lhi_oracle(&stack, tau, 30.0), || format!("stack {i} differs from the closed form"))?;
    }
    Ok("1000 stacks identical".into())
}

fn gradient_check_reduced() -> Outcome {
    let arch = Architecture { input_size: 48, conv_channels: [4, 6], fc_widths: [64, 32, 16], classes: 2 };
    let net = Hs2Net::<f64>::new(arch, 202);
    let mut rng = seeded_rng(203);
    let inputs: Vec<Vec<f64>> = (0..4).map(|_| (0..48 * 48).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
    let labels = [Label::Nodule, Label::Tissue, Label::Nodule, Label::Tissue];
    let r = gradient_check(&net, &inputs, &labels, 1e-4);
    check(r.checked == net.parameter_count(), || "not every parameter checked".into())?;
    check(r.worst_relative < 1e-3, || format!("worst relative error {:e} at {:?}", r.worst_relative, r.worst))?;
    Ok(format!(
        "{} parameters, worst relative error {:.1e}, {} re-measured across a kink",
        r.checked, r.worst_relative, r.reduced_step
    ))
}

fn froc_bruteforce_match() -> Outcome {
    let mut rng = seeded_rng(404);
    for i in 0..200 {
        let (cands, gt, scans) = random_froc_instance(&mut rng);
        let r = froc(&cands, &gt, scans).map_err(|e| e.to_string())?;
        let b = froc_bruteforce(&cands, &gt, scans);
        let points: Vec<_> = r.operating_points.iter().map(|p| (p.threshold, p.fps_per_scan, p.sensitivity)).collect();
        check(points == b.points && r.level_sensitivities == b.levels && r.cpm == b.cpm, || {
            format!("instance {i}: cpm {} vs brute force {}", r.cpm, b.cpm)
        })?;
    }
    Ok("200 instances identical".into())
}

fn geometry() -> Outcome {
    let mut rng = seeded_rng(606);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let a = Box3::new(std::array::from_fn(|_| rng.random_range(0.0..8.0)), rng.random_range(1.0..8.0));
        let b = Box3::new(std::array::from_fn(|_| rng.random_range(0.0..8.0)), rng.random_range(1.0..8.0));
        worst = worst.max((iou3(&a, &b) - iou_monte_carlo(&a, &b, 100_000, &mut rng)).abs());
    }
    check(worst < 0.01, || format!("IoU off by {worst}"))?;
    for i in 0..200 {
        let n = rng.random_range(0..50);
        let boxes = random_boxes(&mut rng, n);
        let thr = [0.0, 0.1, 0.3, 0.5][i % 4];
        check(nms_indices(&boxes, thr) == nms_bruteforce(&boxes, thr), || format!("NMS set {i} differs"))?;
    }
    for i in 0..100 {
        let window = rng.random_range(2..24);
        let min_overlap = rng.random_range(0..window);
        let dims: [usize; 3] = std::array::from_fn(|_| rng.random_range(window..4 * window));
        let tiles = tile_volume(dims, Tiling { window, min_overlap, pad: false }).map_err(|e| e.to_string())?;
        let mut hit = vec![false; dims.iter().product()];
        for t in &tiles {
            check((0..3).all(|k| t[k] + window <= dims[k]), || format!("dims {dims:?}: tile {t:?} leaves the volume"))?;
            for z in t[2]..t[2] + window {
                for y in t[1]..t[1] + window {
                    let row = dims[0] * (y + dims[1] * z);
                    hit[row + t[0]..row + t[0] + window].fill(true);
                }
            }
        }
        check(hit.iter().all(|&h| h), || format!("dims {dims:?} case {i}: voxel not covered"))?;
    }
    Ok(format!("IoU max deviation {worst:.4}, 200 NMS sets, 100 tilings"))
}

fn six_digits(x: f64) -> String {
    format!("{x:.5e}")
}

fn round_trips() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = seeded_rng(707);
    let g = VolumeGeometry::new([37, 29, 11], [0.703125, 0.703125, 1.25], [-187.5, -201.2, -310.75]).unwrap();
    let voxels = (0..g.voxel_count()).map(|_| rng.random_range(i16::MIN..=i16::MAX)).collect();
    let v = CtVolume::new(g, voxels).map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a.mhd"), dir.path().join("b.mhd"));
    save_mhd(&v, &a).map_err(|e| e.to_string())?;
    let back = read_mhd(&a).map_err(|e| e.to_string())?;
    check(back == v, || "volume changed on reload".into())?;
    save_mhd(&back, &b).map_err(|e| e.to_string())?;
    check(fs::read(dir.path().join("a.raw")).ok() == fs::read(dir.path().join("b.raw")).ok(), || "raw differs".into())?;
    let header = |p: &Path| fs::read_to_string(p).unwrap_or_default().replace("b.raw", "a.raw");
    check(header(&a) == header(&b), || "header differs".into())?;

    let model =
        Hs2Model::new(Architecture { conv_channels: [4, 6], fc_widths: [64, 32, 16], ..Architecture::default() }, 708);
    let bytes = save_model(&model);
    let loaded = load_model(&bytes).map_err(|e| e.to_string())?;
    check(save_model(&loaded) == bytes, || "model bytes differ".into())?;

    let cands: Vec<NoduleCandidate> = (0..500)
        .map(|i| NoduleCandidate {
            scan_id: format!("1.3.6.1.4.{i}"),
            center_mm: std::array::from_fn(|_| rng.random_range(-400.0..400.0)),
            diameter_mm: rng.random_range(3.0..30.0),
            score: rng.random_range(0.0..1.0),
        })
        .collect();
    let mut buf = Vec::new();
    write_candidates_csv(&mut buf, &cands).map_err(|e| e.to_string())?;
    let back = load_candidates_csv(buf.as_slice()).map_err(|e| e.to_string())?;
    check(back.len() == cands.len(), || "row count changed".into())?;
    for (x, y) in cands.iter().zip(&back) {
        let fields = |c: &NoduleCandidate| {
            (c.scan_id.clone(), c.center_mm.map(six_digits), six_digits(c.diameter_mm), six_digits(c.score))
        };
        check(fields(x) == fields(y), || format!("{x:?} became {y:?}"))?;
    }
    Ok("MHD and model bit-exact, 500 CSV rows lossless".into())
}

/// Generates disjoint training and evaluation phantoms, trains HS² on blob
/// candidates of the training scans and filters the evaluation candidates.
fn phantom_experiment(root: &Path, epochs: usize, small: bool) -> Result<(Value, f64), String> {
    let train = root.join("train");
    let eval = root.join("eval");
    let arch: &[&str] = if small { &["--conv-channels", "4,6", "--fc-widths", "64,32,16"] } else { &[] };
    let (train_count, eval_count) = if small { (8, 6) } else { (40, 60) };
    let (train_n, train_t, eval_n, eval_t) = if small { (20, 40, 15, 30) } else { (100, 200, 150, 300) };
    lhinet(&[
        "phantom",
        "gen",
        "--count",
        &train_count.to_string(),
        "--nodules",
        &train_n.to_string(),
        "--tubes",
        &train_t.to_string(),
        "--noise",
        "5",
        "--seed",
        "11",
        "--prefix",
        "train",
        "--out-dir",
        path(&train),
    ])?;
    lhinet(&[
        "phantom",
        "gen",
        "--count",
        &eval_count.to_string(),
        "--nodules",
        &eval_n.to_string(),
        "--tubes",
        &eval_t.to_string(),
        "--noise",
        "5",
        "--seed",
        "12",
        "--prefix",
        "eval",
        "--out-dir",
        path(&eval),
    ])?;
    for set in [&train, &eval] {
        lhinet(&["candidates", "detect", "--volumes", path(set), "--out", path(&set.join("blobs.csv"))])?;
        lhinet(&[
            "lhi",
            "extract",
            "--candidates",
            path(&set.join("blobs.csv")),
            "--volumes",
            path(set),
            "--annotations",
            path(&set.join("annotations.csv")),
            "--out-dir",
            path(&set.join("lhi")),
        ])?;
    }
    let model = root.join("hs2.bin");
    let epochs = epochs.to_string();
    let train_index = train.join("lhi/index.csv");
    let mut train_args =
        vec!["hs2", "train", "--index", path(&train_index), "--epochs", &epochs, "--seed", "13", "--out", path(&model)];
    train_args.extend_from_slice(arch);
    lhinet(&train_args)?;
    let preds = root.join("eval_predictions.csv");
    lhinet(&[
        "hs2",
        "predict",
        "--model",
        path(&model),
        "--index",
        path(&eval.join("lhi/index.csv")),
        "--out",
        path(&preds),
    ])?;
    let mut rdr = csv::Reader::from_path(&preds).map_err(|e| e.to_string())?;
    let (mut n, mut correct) = (0usize, 0usize);
    for rec in rdr.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        if &rec[1] != "unknown" {
            n += 1;
            correct += usize::from(rec[1] == rec[3]);
        }
    }
    let accuracy = correct as f64 / n.max(1) as f64;
    let out = root.join("run");
    lhinet(&[
        "pipeline",
        "run",
        "--volumes",
        path(&eval),
        "--model",
        path(&model),
        "--annotations",
        path(&eval.join("annotations.csv")),
        "--out-dir",
        path(&out),
    ])?;
    let report = fs::read_to_string(out.join("report.json")).map_err(|e| e.to_string())?;
    Ok((serde_json::from_str(&report).map_err(|e| e.to_string())?, accuracy))
}

fn phantom_fp_reduction() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (report, accuracy) = phantom_experiment(dir.path(), 5, false)?;
    let r = &report["fp_reduction"];
    let num = |k: &str| r[k].as_f64().ok_or_else(|| format!("report lacks {k}"));
    let (fp_before, fp_after) = (num("fp_before")?, num("fp_after")?);
    let (s_before, s_after) = (num("sensitivity_before")?, num("sensitivity_after")?);
    let reduction = if fp_before > 0.0 { 1.0 - fp_after / fp_before } else { 0.0 };
    let drop = 100.0 * (s_before - s_after);
    let summary = format!(
        "held-out accuracy {:.1}%, FPs {fp_before} -> {fp_after} ({:.1}% fewer), sensitivity {s_before:.3} -> {s_after:.3}",
        100.0 * accuracy,
        100.0 * reduction
    );
    check(accuracy >= 0.90, || summary.clone())?;
    check(reduction >= 0.5, || summary.clone())?;
    check(drop <= 2.0, || summary.clone())?;
    Ok(summary)
}

fn determinism() -> Outcome {
    let files = [
        "candidates_before.csv",
        "candidates_after.csv",
        "predictions.csv",
        "report.json",
        "froc_before.csv",
        "froc_after.csv",
    ];
    let runs: Vec<_> = (0..2)
        .map(|_| -> Result<_, String> {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            phantom_experiment(dir.path(), 2, true)?;
            let bytes = files.map(|f| fs::read(dir.path().join("run").join(f)).unwrap_or_default());
            let model = fs::read(dir.path().join("hs2.bin")).unwrap_or_default();
            Ok((bytes, model))
        })
        .collect::<Result<_, _>>()?;
    check(runs[0].1 == runs[1].1, || "trained models differ".into())?;
    for (i, f) in files.iter().enumerate() {
        check(!runs[0].0[i].is_empty(), || format!("{f} missing or empty"))?;
        check(runs[0].0[i] == runs[1].0[i], || format!("{f} differs between runs"))?;
    }
    Ok(format!("{} output files byte-identical across two seeded runs", files.len()))
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 8] = [
        ("1 CPM arithmetic", cpm_rows, Duration::from_secs(1)),
        ("2 LHI oracle", lhi_oracle_match, Duration::from_secs(10)),
        ("3 gradient check", gradient_check_reduced, Duration::from_secs(60)),
        ("4 FROC brute force", froc_bruteforce_match, Duration::from_secs(30)),
        ("5 phantom FP reduction", phantom_fp_reduction, Duration::from_secs(15 * 60)),
        ("6 geometry", geometry, Duration::from_secs(30)),
        ("7 round-trips", round_trips, Duration::from_secs(5)),
        ("8 determinism", determinism, Duration::from_secs(15 * 60)),
    ];
    let mut failed = Vec::new();
    for (name, run, budget) in criteria {
        let start = Instant::now();
        let outcome = run();
        let took = start.elapsed();
        let verdict = match outcome {
            Ok(msg) if took <= budget => Ok(msg),
            Ok(msg) => Err(format!("{msg}; took {took:.1?}, budget {budget:?}")),
            Err(e) => Err(e),
        };
        match verdict {
            Ok(msg) => println!("PASS {name}: {msg} ({took:.2?})"),
            Err(msg) => {
                println!("FAIL {name}: {msg} ({took:.2?})");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
