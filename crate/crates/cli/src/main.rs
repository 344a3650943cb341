use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use clipsam::training::PromptConfig;
use clipsam::PromptMode;
use clipsam_cli::{
    cmd_eval, cmd_generate_data, cmd_report_params, cmd_train, exit_code, load_segmenter, serve, EvalArgs, GenerateArgs,
};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "clipsam", version, about = "Promptable segmentation with semantically conditioned adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a run config; writes config.json, metrics.jsonl and best.safetensors.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a dataset or split manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: PathBuf,
        /// manual or semi_automatic; defaults to the training mode.
        #[arg(long)]
        mode: Option<PromptMode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for per-sample predicted masks.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Parameter counts per component.
    ReportParams {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Used without --config: toy or vit-b.
        #[arg(long, default_value = "vit-b")]
        preset: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the synthetic shapes dataset.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n_train: usize,
        #[arg(long, default_value_t = 50)]
        n_val: usize,
        #[arg(long, value_delimiter = ',', default_value = "circle,square,triangle,cross")]
        classes: Vec<String>,
        #[arg(long, default_value_t = 96)]
        size: usize,
        #[arg(long)]
        camouflage: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_delimiter = ',', default_value = "0.0625,0.125,0.25,0.5")]
        fractions: Vec<f64>,
    },
    /// Serve POST /segment, GET /classes and GET /health.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value_t = PromptConfig::default().tau)]
        tau: f64,
        #[arg(long, default_value_t = PromptConfig::default().k)]
        k: usize,
    },
}

fn run(cli: Cli) -> Result<(), clipsam::Error> {
    match cli.command {
        Command::Train { config, seed } => {
            let dir = cmd_train(&config, seed)?;
            println!("run directory: {}", dir.display());
        }
        Command::Eval { checkpoint, split, mode, seed, out, dump } => {
            let path = cmd_eval(&EvalArgs {
                checkpoint: &checkpoint,
                split: &split,
                mode,
                seed,
                out: out.as_deref(),
                dump: dump.as_deref(),
            })?;
            println!("metrics: {}", path.display());
        }
        Command::ReportParams { config, preset, out } => {
            print!("{}", cmd_report_params(config.as_deref(), &preset, out.as_deref())?);
        }
        Command::GenerateData { out, n_train, n_val, classes, size, camouflage, seed, fractions } => {
            cmd_generate_data(&GenerateArgs { out, n_train, n_val, classes, size, camouflage, seed, fractions })?;
        }
        Command::Serve { checkpoint, port, tau, k } => {
            let seg = load_segmenter(&checkpoint, PromptConfig { tau, k })?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| clipsam::Error::Internal(e.to_string()))?;
            rt.block_on(serve(seg, port)).map_err(|e| clipsam::Error::Internal(e.to_string()))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
