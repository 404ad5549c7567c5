use std::path::PathBuf;

use clap::Args;
use lhinet_core::hs2::load_model;
use lhinet_core::pipeline::{detect_all, run as run_pipeline, PipelineConfig};
use lhinet_core::NoduleCandidate;
use serde::{Deserialize, Serialize};

use super::candidates::BlobFlags;
use super::{
    create, create_dir, load_scans, read_annotations, read_candidates, write_candidates, write_text, LhiFlags,
};
use crate::config::required;
use crate::error::{io_at, CliError, Result};
use crate::manifest::Record;

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct RunArgs {
    #[arg(long)]
    pub volumes: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Candidate CSV; blobs are detected in the volumes when omitted.
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    /// Ground truth; enables the FROC and false-positive reports.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long)]
    pub min_score: Option<f64>,
    #[arg(long)]
    pub nms_iou: Option<f64>,
    /// HS² keeps a candidate when its nodule probability is at least this.
    #[arg(long)]
    pub nodule_probability: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub lhi: LhiFlags,
    #[command(flatten)]
    #[serde(flatten)]
    pub blob: BlobFlags,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    seriesuid: &'a str,
    #[serde(rename = "coordX")]
    x: f64,
    #[serde(rename = "coordY")]
    y: f64,
    #[serde(rename = "coordZ")]
    z: f64,
    diameter_mm: f64,
    probability: f64,
    p_nodule: f64,
    kept: bool,
}

pub fn run(args: &RunArgs) -> Result<Record> {
    let dir = required(&args.volumes, "volumes")?;
    let model_path = required(&args.model, "model")?;
    let out_dir = required(&args.out_dir, "out-dir")?;
    let d = PipelineConfig::default();
    let config = PipelineConfig {
        min_score: args.min_score.unwrap_or(d.min_score),
        nms_iou: args.nms_iou.unwrap_or(d.nms_iou),
        nodule_probability: args.nodule_probability.unwrap_or(d.nodule_probability),
        lhi: args.lhi.params()?,
    };
    let bytes = std::fs::read(&model_path).map_err(io_at(&model_path))?;
    let model = load_model(&bytes).map_err(|e| CliError::invalid(format!("{}: {e}", model_path.display())))?;
    let (scans, mut inputs) = load_scans(&dir)?;
    inputs.push(model_path);
    let candidates: Vec<NoduleCandidate> = match &args.candidates {
        Some(p) => {
            inputs.push(p.clone());
            read_candidates(p)?
        }
        None => detect_all(&scans, &args.blob.params()?),
    };
    let gt = match &args.annotations {
        Some(p) => {
            inputs.push(p.clone());
            Some(read_annotations(p)?)
        }
        None => None,
    };
    let output = run_pipeline(&scans, &candidates, &model, gt.as_deref(), &config)?;

    create_dir(&out_dir)?;
    let before = out_dir.join("candidates_before.csv");
    let after = out_dir.join("candidates_after.csv");
    let preds = out_dir.join("predictions.csv");
    write_candidates(&before, &output.before())?;
    write_candidates(&after, &output.after())?;
    let mut w = csv::Writer::from_writer(create(&preds)?);
    for c in &output.classified {
        let [x, y, z] = c.candidate.center_mm;
        w.serialize(PredictionRow {
            seriesuid: &c.candidate.scan_id,
            x,
            y,
            z,
            diameter_mm: c.candidate.diameter_mm,
            probability: c.candidate.score,
            p_nodule: c.p_nodule,
            kept: c.kept,
        })
        .map_err(|e| CliError::invalid(e.to_string()))?;
    }
    w.flush().map_err(io_at(&preds))?;
    drop(w);
    let mut outputs = vec![before, after, preds];
    println!(
        "{} candidates after threshold and NMS, {} kept by HS²",
        output.classified.len(),
        output.classified.iter().filter(|c| c.kept).count()
    );
    if let Some(report) = &output.report {
        let r = &report.fp_reduction;
        println!("false positives {} -> {} ({}% fewer)", r.fp_before, r.fp_after, r.reduction_percent);
        println!("sensitivity {:.4} -> {:.4}", r.sensitivity_before, r.sensitivity_after);
        println!("CPM {:.4} -> {:.4}", report.froc_before.cpm, report.froc_after.cpm);
        let report_path = out_dir.join("report.json");
        write_text(&report_path, &(serde_json::to_string_pretty(report)? + "\n"))?;
        let fb = out_dir.join("froc_before.csv");
        let fa = out_dir.join("froc_after.csv");
        write_text(&fb, &report.froc_before.points_csv())?;
        write_text(&fa, &report.froc_after.points_csv())?;
        outputs.extend([report_path, fb, fa]);
    }
    Ok(Record { inputs, outputs, manifest: Some(out_dir.join("manifest.json")) })
}
