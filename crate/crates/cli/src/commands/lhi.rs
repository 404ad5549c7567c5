use std::collections::HashMap;
use std::path::{Path, PathBuf};

use clap::Args;
use lhinet_core::froc::{match_candidates, HitKind};
use lhinet_core::lhi::lhi_for_candidate;
use lhinet_core::{Grid, Label};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{create, create_dir, load_scans, read_annotations, read_candidates, LhiFlags};
use crate::config::required;
use crate::error::{io_at, CliError, Result};
use crate::manifest::Record;

pub const INDEX_FILE: &str = "index.csv";

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct ExtractArgs {
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    #[arg(long)]
    pub volumes: Option<PathBuf>,
    /// Label candidates by whether they hit an annotated nodule.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub lhi: LhiFlags,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

/// One row of an LHI index: the image file is headerless little-endian
/// `f32`, row-major, normalized to [0, 1].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexRow {
    pub candidate_id: String,
    pub file: String,
    /// `nodule`, `tissue` or `unknown`.
    pub label: String,
}

pub fn label_name(label: Option<Label>) -> &'static str {
    match label {
        Some(Label::Nodule) => "nodule",
        Some(Label::Tissue) => "tissue",
        None => "unknown",
    }
}

pub fn parse_label(s: &str) -> Result<Option<Label>> {
    match s {
        "nodule" => Ok(Some(Label::Nodule)),
        "tissue" => Ok(Some(Label::Tissue)),
        "unknown" | "" => Ok(None),
        other => Err(CliError::invalid(format!("unknown label {other:?}"))),
    }
}

pub fn write_image(path: &Path, grid: &Grid<f32>) -> Result<()> {
    let bytes: Vec<u8> = grid.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(io_at(path))
}

pub fn read_image(path: &Path) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path).map_err(io_at(path))?;
    if bytes.len() % 4 != 0 {
        return Err(CliError::invalid(format!("{}: length is not a multiple of 4", path.display())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

/// Index rows with their images, paths resolved against the index folder.
pub fn read_index(path: &Path) -> Result<Vec<(IndexRow, Vec<f32>)>> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_reader(super::open(path)?);
    let rows = reader
        .deserialize::<IndexRow>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
    rows.into_iter()
        .map(|r| {
            let img = read_image(&dir.join(&r.file))?;
            Ok((r, img))
        })
        .collect()
}

pub fn extract(args: &ExtractArgs) -> Result<Record> {
    let cand_path = required(&args.candidates, "candidates")?;
    let dir = required(&args.volumes, "volumes")?;
    let out_dir = required(&args.out_dir, "out-dir")?;
    let params = args.lhi.params()?;
    let cands = read_candidates(&cand_path)?;
    let (scans, mut inputs) = load_scans(&dir)?;
    inputs.push(cand_path);
    let by_id: HashMap<&str, _> = scans.iter().map(|s| (s.id.as_str(), &s.volume)).collect();
    if let Some(c) = cands.iter().find(|c| !by_id.contains_key(c.scan_id.as_str())) {
        return Err(CliError::invalid(format!("candidate scan {:?} has no volume in {}", c.scan_id, dir.display())));
    }
    let labels: Vec<Option<Label>> = match &args.annotations {
        Some(p) => {
            let gt = read_annotations(p)?;
            inputs.push(p.clone());
            match_candidates(&cands, &gt)
                .candidates
                .into_iter()
                .map(|k| Some(if k == HitKind::FalsePositive { Label::Tissue } else { Label::Nodule }))
                .collect()
        }
        None => vec![None; cands.len()],
    };
    let images = cands
        .par_iter()
        .map(|c| lhi_for_candidate(by_id[c.scan_id.as_str()], c, &params))
        .collect::<std::result::Result<Vec<_>, _>>()?;

    create_dir(&out_dir)?;
    let index_path = out_dir.join(INDEX_FILE);
    let mut index = csv::Writer::from_writer(create(&index_path)?);
    let mut outputs = Vec::with_capacity(cands.len() + 1);
    for (i, (img, label)) in images.iter().zip(&labels).enumerate() {
        let file = format!("{i:06}.lhi");
        let path = out_dir.join(&file);
        write_image(&path, &img.normalized())?;
        outputs.push(path);
        index
            .serialize(IndexRow { candidate_id: img.candidate_id.clone(), file, label: label_name(*label).into() })
            .map_err(|e| CliError::invalid(e.to_string()))?;
    }
    index.flush().map_err(io_at(&index_path))?;
    drop(index);
    outputs.push(index_path);
    println!("wrote {} LHIs of {}x{} to {}", images.len(), params.out_size, params.out_size, out_dir.display());
    Ok(Record { inputs, outputs, manifest: Some(out_dir.join("manifest.json")) })
}
