use std::io::Write;
use std::path::PathBuf;

use clap::Args;
use lhinet_core::candidates::write_annotations_csv;
use lhinet_core::phantom::{generate, random_spec, RandomLayout};
use lhinet_core::volume_io::save_mhd;
use lhinet_core::PhantomSpec;
use serde::{Deserialize, Serialize};

use super::{create, create_dir, open, write_text};
use crate::config::required;
use crate::error::{io_at, CliError, Result};
use crate::manifest::Record;

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct GenArgs {
    /// JSON phantom spec; without it, random layouts are drawn.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Number of random scans.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Scan id prefix for random scans.
    #[arg(long)]
    pub prefix: Option<String>,
    /// Total nodules across all random scans, spread evenly.
    #[arg(long)]
    pub nodules: Option<usize>,
    /// Total tubes across all random scans, spread evenly.
    #[arg(long)]
    pub tubes: Option<usize>,
    /// Gaussian noise sigma in HU for random scans.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Random scan size `x,y,z` in voxels.
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<usize>>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

/// Share `i` of `total` split over `n` parts.
fn share(total: usize, n: usize, i: usize) -> usize {
    (i + 1) * total / n - i * total / n
}

fn specs(args: &GenArgs) -> Result<(Vec<PhantomSpec>, Vec<PathBuf>)> {
    if let Some(path) = &args.spec {
        let spec: PhantomSpec =
            serde_json::from_reader(open(path)?).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
        return Ok((vec![spec], vec![path.clone()]));
    }
    let count = args.count.unwrap_or(1);
    if count == 0 {
        return Err(CliError::invalid("--count must be at least 1"));
    }
    let base = RandomLayout::default();
    let dims = match args.dims.as_deref() {
        None => base.dims,
        Some(&[x, y, z]) => [x, y, z],
        Some(other) => return Err(CliError::invalid(format!("--dims needs three values, got {other:?}"))),
    };
    let nodules = args.nodules.unwrap_or(base.nodules * count);
    let tubes = args.tubes.unwrap_or(base.tubes * count);
    let seed = args.seed.unwrap_or(0);
    let prefix = args.prefix.clone().unwrap_or_else(|| "phantom".into());
    let width = (count - 1).to_string().len().max(3);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let layout = RandomLayout {
            dims,
            nodules: share(nodules, count, i),
            tubes: share(tubes, count, i),
            noise_sigma_hu: args.noise.unwrap_or(base.noise_sigma_hu),
            ..base
        };
        out.push(random_spec(&layout, &format!("{prefix}{i:0width$}"), seed + i as u64)?);
    }
    Ok((out, Vec::new()))
}

pub fn gen(args: &GenArgs) -> Result<Record> {
    let dir = required(&args.out_dir, "out-dir")?;
    create_dir(&dir)?;
    let (specs, inputs) = specs(args)?;
    let mut record = Record { inputs, manifest: Some(dir.join("manifest.json")), ..Record::default() };
    let mut nodules = Vec::new();
    let tissue_path = dir.join("tissues.csv");
    let mut tissues = create(&tissue_path)?;
    writeln!(tissues, "seriesuid,coordX,coordY,coordZ,side_mm").map_err(io_at(&tissue_path))?;
    for spec in &specs {
        let p = generate(spec)?;
        let path = dir.join(format!("{}.mhd", spec.scan_id));
        save_mhd(&p.volume, &path)?;
        record.outputs.push(path.clone());
        record.outputs.push(path.with_extension("raw"));
        for t in &p.tissues {
            let [x, y, z] = t.center;
            writeln!(tissues, "{},{x},{y},{z},{}", spec.scan_id, t.side).map_err(io_at(&tissue_path))?;
        }
        nodules.extend(p.nodules);
        log::info!("generated {}", spec.scan_id);
    }
    tissues.flush().map_err(io_at(&tissue_path))?;
    let ann_path = dir.join("annotations.csv");
    write_annotations_csv(create(&ann_path)?, &nodules).map_err(|e| CliError::invalid(e.to_string()))?;
    let spec_path = dir.join("specs.json");
    write_text(&spec_path, &(serde_json::to_string_pretty(&specs)? + "\n"))?;
    record.outputs.extend([ann_path, tissue_path, spec_path]);
    println!("wrote {} scans with {} nodules to {}", specs.len(), nodules.len(), dir.display());
    Ok(record)
}
