use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use geotrust_cli::{server, CliResult};
use geotrust_core::config::PipelineConfig;
use geotrust_core::pipeline::{Pipeline, Stage};
use geotrust_core::synth::{synth_generate, write_dataset, SynthConfig};
use geotrust_core::Error;

#[derive(Parser)]
#[command(name = "geotrust", version, about = "Reliability scoring for segmentation runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Dataset manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Directory holding stage outputs and the report.
    #[arg(long, default_value = "work")]
    work_dir: PathBuf,
    /// Pipeline configuration (JSON); defaults apply to absent fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured worker thread count.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit centroid models for both feature spaces.
    Fit(RunArgs),
    /// Score downstream scenes against the centroid models.
    ScoreOod(RunArgs),
    /// Per-pixel and per-scene ensemble uncertainty.
    ScoreUncertainty(RunArgs),
    /// F1 and calibration against ground truth.
    Evaluate(RunArgs),
    /// Risk-coverage curves and the keep/discard flag.
    Discard(RunArgs),
    /// Train the score combiners.
    Fuse(RunArgs),
    /// Attribute decile grouping and trends.
    Link(RunArgs),
    /// Assemble report.json and the CSV exports.
    Report(RunArgs),
    /// Every stage in order.
    Run(RunArgs),
    /// Write a synthetic dataset.
    Synth {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Generator configuration (JSON).
        #[arg(long)]
        synth_config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        scenes: Option<usize>,
        /// OOD displacement in units of sigma.
        #[arg(long)]
        shift: Option<f64>,
    },
    /// Serve the report over HTTP.
    Serve {
        #[arg(long, default_value = "work")]
        work_dir: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        /// Static dashboard files served at `/`.
        #[arg(long)]
        assets: Option<PathBuf>,
    },
}

fn pipeline(args: &RunArgs) -> CliResult<Pipeline> {
    let mut cfg = match &args.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.threads.is_some() {
        cfg.threads = args.threads;
    }
    cfg.validate()?;
    Ok(Pipeline::new(cfg, &args.manifest, &args.work_dir)?)
}

fn run_stage(args: &RunArgs, stage: Stage) -> CliResult<()> {
    pipeline(args)?.run_stage(stage)?;
    eprintln!("{} done", stage.name());
    Ok(())
}

fn synth(
    out: PathBuf,
    synth_config: Option<PathBuf>,
    seed: Option<u64>,
    scenes: Option<usize>,
    shift: Option<f64>,
) -> CliResult<()> {
    let mut cfg = match synth_config {
        Some(path) => {
            let text = fs::read_to_string(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => SynthConfig::default(),
    };
    if let Some(v) = seed {
        cfg.seed = v;
    }
    if let Some(v) = scenes {
        cfg.scenes = v;
    }
    if let Some(v) = shift {
        cfg.shift = v;
    }
    let data = synth_generate(&cfg)?;
    let manifest = write_dataset(&data, &out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Fit(a) => run_stage(&a, Stage::Fit),
        Command::ScoreOod(a) => run_stage(&a, Stage::ScoreOod),
        Command::ScoreUncertainty(a) => run_stage(&a, Stage::ScoreUncertainty),
        Command::Evaluate(a) => run_stage(&a, Stage::Evaluate),
        Command::Discard(a) => run_stage(&a, Stage::Discard),
        Command::Fuse(a) => run_stage(&a, Stage::Fuse),
        Command::Link(a) => run_stage(&a, Stage::Link),
        Command::Report(a) => {
            let p = pipeline(&a)?;
            p.run_stage(Stage::Report)?;
            println!("{}", p.work_dir().report_path().display());
            Ok(())
        }
        Command::Run(a) => {
            let p = pipeline(&a)?;
            let report = p.run_all()?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            println!("{}", p.work_dir().report_path().display());
            Ok(())
        }
        Command::Synth {
            out,
            synth_config,
            seed,
            scenes,
            shift,
        } => synth(out, synth_config, seed, scenes, shift),
        Command::Serve { work_dir, bind, assets } => {
            let rt = tokio::runtime::Runtime::new().map_err(geotrust_cli::CliError::Server)?;
            rt.block_on(server::serve(&work_dir, &bind, assets))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
