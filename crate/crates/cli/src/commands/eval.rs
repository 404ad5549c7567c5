use std::path::PathBuf;

use clap::Args;
use lhinet_core::candidates::DEFAULT_MIN_SCORE;
use lhinet_core::froc::{check_reported_cpm, cpm as cpm_of, fp_reduction_report, froc as froc_report, FP_LEVELS};
use serde::{Deserialize, Serialize};

use super::{read_annotations, read_candidates, sidecar, volume_files, write_text};
use crate::config::required;
use crate::error::{CliError, Result};
use crate::manifest::Record;

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct FrocArgs {
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Number of scans evaluated (FPs are averaged over these).
    #[arg(long)]
    pub scans: Option<usize>,
    /// Count scans from the `.mhd` files of this directory instead.
    #[arg(long)]
    pub volumes: Option<PathBuf>,
    /// JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Operating points as CSV, for plotting.
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

fn print_levels(levels: &[f64; 7], cpm: f64) {
    for (l, s) in FP_LEVELS.iter().zip(levels) {
        println!("  {l:>6} FP/scan  sensitivity {s:.4}");
    }
    println!("CPM {cpm:.4}");
}

pub fn froc(args: &FrocArgs) -> Result<Record> {
    let cand_path = required(&args.candidates, "candidates")?;
    let ann_path = required(&args.annotations, "annotations")?;
    let mut inputs = vec![cand_path.clone(), ann_path.clone()];
    let scans = match (args.scans, &args.volumes) {
        (Some(n), _) => n,
        (None, Some(dir)) => {
            let files = volume_files(dir)?;
            inputs.extend(files.iter().cloned());
            files.len()
        }
        (None, None) => return Err(CliError::invalid("give --scans or --volumes")),
    };
    let report = froc_report(&read_candidates(&cand_path)?, &read_annotations(&ann_path)?, scans)?;
    print_levels(&report.level_sensitivities, report.cpm);
    let mut outputs = Vec::new();
    if let Some(out) = &args.out {
        write_text(out, &(serde_json::to_string_pretty(&report)? + "\n"))?;
        outputs.push(out.clone());
    }
    if let Some(curve) = &args.curve {
        write_text(curve, &report.points_csv())?;
        outputs.push(curve.clone());
    }
    let manifest = outputs.first().map(|o| sidecar(o, ".manifest.json"));
    Ok(Record { inputs, outputs, manifest })
}

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct FpReportArgs {
    /// Candidates before false-positive reduction.
    #[arg(long)]
    pub before: Option<PathBuf>,
    /// Surviving candidates, a subset of `--before`.
    #[arg(long)]
    pub after: Option<PathBuf>,
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long)]
    pub min_score: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn fp_report(args: &FpReportArgs) -> Result<Record> {
    let before = required(&args.before, "before")?;
    let after = required(&args.after, "after")?;
    let ann = required(&args.annotations, "annotations")?;
    let r = fp_reduction_report(
        &read_candidates(&before)?,
        &read_candidates(&after)?,
        &read_annotations(&ann)?,
        args.min_score.unwrap_or(DEFAULT_MIN_SCORE),
    )?;
    println!("false positives {} -> {} ({}% fewer)", r.fp_before, r.fp_after, r.reduction_percent);
    println!("sensitivity {:.4} -> {:.4}", r.sensitivity_before, r.sensitivity_after);
    let mut outputs = Vec::new();
    if let Some(out) = &args.out {
        write_text(out, &(serde_json::to_string_pretty(&r)? + "\n"))?;
        outputs.push(out.clone());
    }
    let manifest = outputs.first().map(|o| sidecar(o, ".manifest.json"));
    Ok(Record { inputs: vec![before, after, ann], outputs, manifest })
}

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct CpmArgs {
    /// Seven sensitivities at 1/8, 1/4, 1/2, 1, 2, 4 and 8 FPs per scan.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub sensitivities: Option<Vec<f64>>,
    /// A published CPM to check against the computed mean.
    #[arg(long)]
    pub reported: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct CpmOutput {
    sensitivities: Vec<f64>,
    cpm: f64,
    reported: Option<f64>,
    consistent: Option<bool>,
}

pub fn cpm(args: &CpmArgs) -> Result<Record> {
    let s = required(&args.sensitivities, "sensitivities")?;
    let value = cpm_of(&s)?;
    println!("CPM {value:.4}");
    let mut consistent = None;
    if let Some(reported) = args.reported {
        let check = check_reported_cpm(&s, reported)?;
        consistent = Some(check.consistent);
        if check.consistent {
            println!("matches reported {reported}");
        } else {
            println!(
                "DISCREPANCY: reported {reported}, computed {:.4} (difference {:+.4})",
                check.computed,
                reported - check.computed
            );
        }
    }
    let mut outputs = Vec::new();
    if let Some(out) = &args.out {
        let o = CpmOutput { sensitivities: s, cpm: value, reported: args.reported, consistent };
        write_text(out, &(serde_json::to_string_pretty(&o)? + "\n"))?;
        outputs.push(out.clone());
    }
    let manifest = outputs.first().map(|o| sidecar(o, ".manifest.json"));
    Ok(Record { inputs: Vec::new(), outputs, manifest })
}
