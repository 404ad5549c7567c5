pub mod candidates;
pub mod eval;
pub mod hs2;
pub mod lhi;
pub mod phantom;
pub mod pipeline;
pub mod volume;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::Args;
use lhinet_core::candidates::{load_annotations_csv, load_candidates_csv, write_candidates_csv};
use lhinet_core::volume_io::{read_mhd, VolumeHeader};
use lhinet_core::{GroundTruthNodule, LhiParams, NoduleCandidate, Scan};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{io_at, CliError, Result};

/// LHI flags shared by `lhi extract` and `pipeline run`.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct LhiFlags {
    /// Counter value written on a change.
    #[arg(long)]
    pub tau: Option<u32>,
    /// Absolute HU difference that counts as a change (strictly greater).
    #[arg(long)]
    pub delta: Option<f64>,
    /// Slices per LHI window, centered on the candidate.
    #[arg(long)]
    pub window: Option<usize>,
    /// Crop side as a multiple of the candidate diameter.
    #[arg(long)]
    pub patch_scale: Option<f64>,
    /// Output LHI side in pixels.
    #[arg(long)]
    pub size: Option<usize>,
}

impl LhiFlags {
    pub fn params(&self) -> Result<LhiParams> {
        let d = LhiParams::default();
        let p = LhiParams {
            tau: self.tau.unwrap_or(d.tau),
            delta_threshold: self.delta.unwrap_or(d.delta_threshold),
            window_slices: self.window.unwrap_or(d.window_slices),
            patch_scale: self.patch_scale.unwrap_or(d.patch_scale),
            out_size: self.size.unwrap_or(d.out_size),
        };
        p.validate()?;
        Ok(p)
    }
}

pub fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(io_at(path))
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(io_at(path))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_at(dir))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io_at(path))
}

pub fn read_candidates(path: &Path) -> Result<Vec<NoduleCandidate>> {
    load_candidates_csv(open(path)?).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
}

pub fn read_annotations(path: &Path) -> Result<Vec<GroundTruthNodule>> {
    load_annotations_csv(open(path)?).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
}

pub fn write_candidates(path: &Path, candidates: &[NoduleCandidate]) -> Result<()> {
    write_candidates_csv(create(path)?, candidates).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
}

/// `.mhd` files of a directory, sorted by name.
pub fn volume_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_at(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("mhd")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::invalid(format!("no .mhd volumes in {}", dir.display())));
    }
    Ok(files)
}

pub fn scan_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Header and data files behind a set of volumes, for hashing.
pub fn volume_inputs(files: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::with_capacity(2 * files.len());
    for f in files {
        let text = std::fs::read_to_string(f).map_err(io_at(f))?;
        let header = VolumeHeader::parse(&text)?;
        out.push(f.clone());
        out.push(f.parent().unwrap_or(Path::new(".")).join(header.element_data_file));
    }
    Ok(out)
}

/// Every volume of `dir` in file-name order; scan ids are file stems.
pub fn load_scans(dir: &Path) -> Result<(Vec<Scan>, Vec<PathBuf>)> {
    let files = volume_files(dir)?;
    let scans =
        files.par_iter().map(|f| Ok(Scan { id: scan_id(f), volume: read_mhd(f)? })).collect::<Result<Vec<_>>>()?;
    Ok((scans, volume_inputs(&files)?))
}

pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}
