use std::collections::HashMap;
use std::path::PathBuf;

use clap::Args;
use lhinet_core::candidates::{dedup_candidates, threshold_candidates, DEFAULT_MIN_SCORE, DEFAULT_NMS_IOU};
use lhinet_core::pipeline::detect_all;
use lhinet_core::volume_io::VolumeHeader;
use lhinet_core::{BlobParams, VolumeGeometry};
use serde::{Deserialize, Serialize};

use super::{load_scans, read_candidates, scan_id, sidecar, volume_files, write_candidates};
use crate::config::required;
use crate::error::{io_at, CliError, Result};
use crate::manifest::Record;

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct FilterArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Keep candidates scoring strictly above this.
    #[arg(long)]
    pub min_score: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn filter(args: &FilterArgs) -> Result<Record> {
    let input = required(&args.input, "input")?;
    let out = required(&args.out, "out")?;
    let cands = read_candidates(&input)?;
    let kept = threshold_candidates(&cands, args.min_score.unwrap_or(DEFAULT_MIN_SCORE));
    write_candidates(&out, &kept)?;
    println!("kept {} of {} candidates", kept.len(), cands.len());
    Ok(Record { inputs: vec![input], manifest: Some(sidecar(&out, ".manifest.json")), outputs: vec![out] })
}

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct NmsArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Directory of `<scan id>.mhd` volumes (headers give the voxel frame).
    #[arg(long)]
    pub volumes: Option<PathBuf>,
    /// Drop a box whose IoU with a better one exceeds this.
    #[arg(long)]
    pub iou: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn nms(args: &NmsArgs) -> Result<Record> {
    let input = required(&args.input, "input")?;
    let out = required(&args.out, "out")?;
    let dir = required(&args.volumes, "volumes")?;
    let files = volume_files(&dir)?;
    let mut geometries = HashMap::new();
    for f in &files {
        let text = std::fs::read_to_string(f).map_err(io_at(f))?;
        let h = VolumeHeader::parse(&text)?;
        geometries.insert(scan_id(f), VolumeGeometry::new(h.dim_size, h.element_spacing, h.offset)?);
    }
    let cands = read_candidates(&input)?;
    let kept = dedup_candidates(&cands, &geometries, args.iou.unwrap_or(DEFAULT_NMS_IOU))
        .map_err(|e| CliError::invalid(format!("{e} (no matching volume in {})", dir.display())))?;
    write_candidates(&out, &kept)?;
    println!("kept {} of {} candidates", kept.len(), cands.len());
    let mut inputs = vec![input];
    inputs.extend(files);
    Ok(Record { inputs, manifest: Some(sidecar(&out, ".manifest.json")), outputs: vec![out] })
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct BlobFlags {
    /// Voxels strictly above this HU value are foreground.
    #[arg(long)]
    pub blob_threshold: Option<f64>,
    #[arg(long)]
    pub blob_min_diameter: Option<f64>,
    #[arg(long)]
    pub blob_max_diameter: Option<f64>,
}

impl BlobFlags {
    pub fn params(&self) -> Result<BlobParams> {
        let d = BlobParams::default();
        let p = BlobParams {
            intensity_threshold: self.blob_threshold.unwrap_or(d.intensity_threshold),
            min_diameter_mm: self.blob_min_diameter.unwrap_or(d.min_diameter_mm),
            max_diameter_mm: self.blob_max_diameter.unwrap_or(d.max_diameter_mm),
        };
        if p.min_diameter_mm.partial_cmp(&p.max_diameter_mm) != Some(std::cmp::Ordering::Less) {
            return Err(CliError::invalid("--blob-min-diameter must be below --blob-max-diameter"));
        }
        Ok(p)
    }
}

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct DetectArgs {
    #[arg(long)]
    pub volumes: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub blob: BlobFlags,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn detect(args: &DetectArgs) -> Result<Record> {
    let dir = required(&args.volumes, "volumes")?;
    let out = required(&args.out, "out")?;
    let params = args.blob.params()?;
    let (scans, inputs) = load_scans(&dir)?;
    let cands = detect_all(&scans, &params);
    write_candidates(&out, &cands)?;
    println!("{} candidates from {} scans", cands.len(), scans.len());
    Ok(Record { inputs, manifest: Some(sidecar(&out, ".manifest.json")), outputs: vec![out] })
}
