use std::io::Write;
use std::path::PathBuf;

use clap::Args;
use lhinet_core::hs2::{load_model, save_model, train as fit, Hs2Model};
use lhinet_core::{Architecture, LabeledImage, TrainConfig};
use serde::{Deserialize, Serialize};

use super::lhi::{label_name, parse_label, read_index};
use super::{create, sidecar};
use crate::config::required;
use crate::error::{io_at, CliError, Result};
use crate::manifest::Record;

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// `index.csv` written by `lhi extract` with labels.
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Learning-rate multiplier applied every `--decay-every` epochs.
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub decay_every: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Seeds both the weights and the batch order.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train on the natural class ratio instead of oversampling to 1:1.
    #[arg(long)]
    pub no_balance: bool,
    /// Filters of the two convolution layers, `a,b`.
    #[arg(long, value_delimiter = ',')]
    pub conv_channels: Option<Vec<usize>>,
    /// Widths of the three hidden dense layers, `a,b,c`.
    #[arg(long, value_delimiter = ',')]
    pub fc_widths: Option<Vec<usize>>,
}

fn architecture(args: &TrainArgs, input_size: usize) -> Result<Architecture> {
    let d = Architecture::default();
    let conv_channels = match args.conv_channels.as_deref() {
        None => d.conv_channels,
        Some(&[a, b]) => [a, b],
        Some(v) => return Err(CliError::invalid(format!("--conv-channels needs two values, got {v:?}"))),
    };
    let fc_widths = match args.fc_widths.as_deref() {
        None => d.fc_widths,
        Some(&[a, b, c]) => [a, b, c],
        Some(v) => return Err(CliError::invalid(format!("--fc-widths needs three values, got {v:?}"))),
    };
    Ok(Architecture { input_size, conv_channels, fc_widths, ..d })
}

fn side(len: usize) -> Result<usize> {
    let s = (len as f64).sqrt().round() as usize;
    if s * s != len || s == 0 {
        return Err(CliError::invalid(format!("LHI with {len} values is not square")));
    }
    Ok(s)
}

pub fn train(args: &TrainArgs) -> Result<Record> {
    let index = required(&args.index, "index")?;
    let out = required(&args.out, "out")?;
    let mut data = Vec::new();
    for (row, input) in read_index(&index)? {
        if let Some(label) = parse_label(&row.label)? {
            data.push(LabeledImage { id: row.candidate_id, input, label });
        }
    }
    let first = data.first().ok_or_else(|| CliError::invalid(format!("{}: no labelled LHIs", index.display())))?;
    let size = side(first.input.len())?;
    if data.iter().any(|d| d.input.len() != size * size) {
        return Err(CliError::invalid("LHIs in the index differ in size"));
    }
    let d = TrainConfig::default();
    let config = TrainConfig {
        learning_rate: args.learning_rate.unwrap_or(d.learning_rate),
        lr_decay: args.lr_decay.unwrap_or(d.lr_decay),
        decay_every: args.decay_every.unwrap_or(d.decay_every),
        epochs: args.epochs.unwrap_or(d.epochs),
        batch_size: args.batch_size.unwrap_or(d.batch_size),
        seed: args.seed.unwrap_or(d.seed),
        balance_classes: !args.no_balance,
    };
    let mut model = Hs2Model::new(architecture(args, size)?, config.seed);
    let report = fit(&mut model, &data, &config)?;
    std::fs::write(&out, save_model(&model)).map_err(io_at(&out))?;

    let loss_path = sidecar(&out, ".loss.csv");
    let mut w = create(&loss_path)?;
    let mut lines = String::from("epoch,learning_rate,loss\n");
    for (e, l) in report.loss_history.iter().enumerate() {
        lines.push_str(&format!("{e},{},{l}\n", config.learning_rate_at(e)));
    }
    w.write_all(lines.as_bytes()).and_then(|_| w.flush()).map_err(io_at(&loss_path))?;
    println!(
        "trained on {} LHIs ({} slots per epoch), final loss {:.6}",
        data.len(),
        report.epoch_slots,
        report.loss_history.last().copied().unwrap_or(f64::NAN)
    );
    Ok(Record { inputs: vec![index], manifest: Some(sidecar(&out, ".manifest.json")), outputs: vec![out, loss_path] })
}

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    candidate_id: &'a str,
    label: &'a str,
    p_nodule: f64,
    predicted: &'static str,
}

pub fn predict(args: &PredictArgs) -> Result<Record> {
    let model_path = required(&args.model, "model")?;
    let index = required(&args.index, "index")?;
    let out = required(&args.out, "out")?;
    let bytes = std::fs::read(&model_path).map_err(io_at(&model_path))?;
    let model = load_model(&bytes).map_err(|e| CliError::invalid(format!("{}: {e}", model_path.display())))?;
    let rows = read_index(&index)?;
    let mut w = csv::Writer::from_writer(create(&out)?);
    let (mut labelled, mut correct) = (0usize, 0usize);
    for (row, input) in &rows {
        let p = model.forward(input)?;
        if let Some(l) = parse_label(&row.label)? {
            labelled += 1;
            correct += usize::from(l == p.label);
        }
        w.serialize(PredictionRow {
            candidate_id: &row.candidate_id,
            label: &row.label,
            p_nodule: p.p_nodule,
            predicted: label_name(Some(p.label)),
        })
        .map_err(|e| CliError::invalid(e.to_string()))?;
    }
    w.flush().map_err(io_at(&out))?;
    if labelled > 0 {
        println!("accuracy {:.4} on {labelled} labelled LHIs", correct as f64 / labelled as f64);
    }
    println!("wrote {} predictions to {}", rows.len(), out.display());
    Ok(Record { inputs: vec![model_path, index], manifest: Some(sidecar(&out, ".manifest.json")), outputs: vec![out] })
}
