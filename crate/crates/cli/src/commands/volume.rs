use std::path::PathBuf;

use clap::Args;
use lhinet_core::volume_io::read_mhd;
use serde::{Deserialize, Serialize};

use super::volume_inputs;
use crate::config::required;
use crate::error::Result;
use crate::manifest::Record;

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct InfoArgs {
    /// MetaImage header (.mhd).
    pub input: Option<PathBuf>,
    /// Print JSON instead of text.
    #[arg(long)]
    pub json: bool,
}

#[derive(Serialize)]
struct Info {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    origin_mm: [f64; 3],
    min_hu: i16,
    max_hu: i16,
}

pub fn info(args: &InfoArgs) -> Result<Record> {
    let path = required(&args.input, "input")?;
    let v = read_mhd(&path)?;
    let (min_hu, max_hu) = v.min_max();
    let info = Info { dims: v.dims(), spacing_mm: v.spacing(), origin_mm: v.origin(), min_hu, max_hu };
    if args.json {
        println!("{}", serde_json::to_string_pretty(&info)?);
    } else {
        let [x, y, z] = info.dims;
        println!("dims      {x} x {y} x {z}");
        println!("spacing   {:?} mm", info.spacing_mm);
        println!("origin    {:?} mm", info.origin_mm);
        println!("HU range  {min_hu} .. {max_hu}");
    }
    Ok(Record { inputs: volume_inputs(&[path])?, ..Record::default() })
}
