//! `lhinet`: nodule candidate processing, LHI extraction, HS² training and
//! FROC evaluation from the command line.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use commands::{candidates, eval, hs2, lhi, phantom, pipeline, volume};
use error::Result;
use manifest::Record;

#[derive(Debug, Parser)]
#[command(name = "lhinet", version, about = "Lung nodule false-positive reduction with location history images")]
struct Cli {
    /// JSON file with flat keys mirroring the long flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Where to write the run manifest (defaults next to the main output).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Worker threads for per-scan work.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthetic scans with planted nodules and tubes.
    #[command(subcommand)]
    Phantom(PhantomCommand),
    /// Inspect MetaImage volumes.
    #[command(subcommand)]
    Volume(VolumeCommand),
    /// Filter, deduplicate or detect candidates.
    #[command(subcommand)]
    Candidates(CandidatesCommand),
    /// Location history images.
    #[command(subcommand)]
    Lhi(LhiCommand),
    /// Train or apply the HS² classifier.
    #[command(subcommand)]
    Hs2(Hs2Command),
    /// FROC, CPM and false-positive reduction reports.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Threshold, NMS, LHI and HS² filtering in one go.
    #[command(subcommand)]
    Pipeline(PipelineCommand),
}

#[derive(Debug, Subcommand)]
enum PhantomCommand {
    Gen(phantom::GenArgs),
}

#[derive(Debug, Subcommand)]
enum VolumeCommand {
    Info(volume::InfoArgs),
}

#[derive(Debug, Subcommand)]
enum CandidatesCommand {
    Filter(candidates::FilterArgs),
    Nms(candidates::NmsArgs),
    Detect(candidates::DetectArgs),
}

#[derive(Debug, Subcommand)]
enum LhiCommand {
    Extract(lhi::ExtractArgs),
}

#[derive(Debug, Subcommand)]
enum Hs2Command {
    Train(hs2::TrainArgs),
    Predict(hs2::PredictArgs),
}

#[derive(Debug, Subcommand)]
enum EvalCommand {
    Froc(eval::FrocArgs),
    FpReport(eval::FpReportArgs),
    Cpm(eval::CpmArgs),
}

#[derive(Debug, Subcommand)]
enum PipelineCommand {
    Run(pipeline::RunArgs),
}

struct Context {
    config: Option<Map<String, Value>>,
    manifest: Option<PathBuf>,
}

impl Context {
    fn execute<T: Serialize + DeserializeOwned>(
        &self,
        name: &str,
        args: T,
        run: impl FnOnce(&T) -> Result<Record>,
    ) -> Result<()> {
        let args = match &self.config {
            Some(c) => config::merge(args, c, name)?,
            None => args,
        };
        let record = run(&args)?;
        if let Some(path) = self.manifest.clone().or(record.manifest.clone()) {
            manifest::write(name, serde_json::to_value(&args)?, &record, &path)?;
        }
        Ok(())
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(error::CliError::invalid("--jobs must be at least 1"));
        }
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    let ctx = Context { config: cli.config.as_deref().map(config::load).transpose()?, manifest: cli.manifest };
    match cli.command {
        Command::Phantom(PhantomCommand::Gen(a)) => ctx.execute("phantom gen", a, phantom::gen),
        Command::Volume(VolumeCommand::Info(a)) => ctx.execute("volume info", a, volume::info),
        Command::Candidates(CandidatesCommand::Filter(a)) => ctx.execute("candidates filter", a, candidates::filter),
        Command::Candidates(CandidatesCommand::Nms(a)) => ctx.execute("candidates nms", a, candidates::nms),
        Command::Candidates(CandidatesCommand::Detect(a)) => ctx.execute("candidates detect", a, candidates::detect),
        Command::Lhi(LhiCommand::Extract(a)) => ctx.execute("lhi extract", a, lhi::extract),
        Command::Hs2(Hs2Command::Train(a)) => ctx.execute("hs2 train", a, hs2::train),
        Command::Hs2(Hs2Command::Predict(a)) => ctx.execute("hs2 predict", a, hs2::predict),
        Command::Eval(EvalCommand::Froc(a)) => ctx.execute("eval froc", a, eval::froc),
        Command::Eval(EvalCommand::FpReport(a)) => ctx.execute("eval fp-report", a, eval::fp_report),
        Command::Eval(EvalCommand::Cpm(a)) => ctx.execute("eval cpm", a, eval::cpm),
        Command::Pipeline(PipelineCommand::Run(a)) => ctx.execute("pipeline run", a, pipeline::run),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
