use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use plgan_cli::commands::{self, DatasetOptions, InitOptions, SweepOptions, SynthOptions, TrainOptions};
use plgan_cli::service::{router, ServiceState};
use plgan_core::plg::LayoutMode;
use plgan_core::{Error, Result};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "plgan", version, about = "Panoptic layout generation and layout-to-image synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a run config
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a training checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the config's output directory
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Override the config's total step count
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Evaluation protocols
    Eval {
        #[command(subcommand)]
        command: EvalCommand,
    },
    /// Synthesize an image and layout preview for one scene
    Synth {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        layout: LayoutArgs,
        /// Also write the raw layout tensors
        #[arg(long)]
        dump_layout: bool,
    },
    /// Serve the HTTP inference API
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, env = "PLGAN_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Disable the guided filter in ISA-Norm
        #[arg(long)]
        no_gf: bool,
    },
    /// Dataset tools
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Write a checkpoint with randomly initialized weights
    Init {
        /// Taxonomy JSON; the synthetic shapes taxonomy when omitted
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        /// Model config JSON; defaults for --resolution when omitted
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the built-in toy run config
    ToyConfig,
}

#[derive(Args)]
struct LayoutArgs {
    /// panoptic, stuff_only or instance_only
    #[arg(long, default_value = "panoptic", value_parser = parse_mode)]
    mode: LayoutMode,
    /// Disable the guided filter in ISA-Norm
    #[arg(long)]
    no_gf: bool,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Coverage (and optional image scores) under center perturbation
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated ascending ranges
        #[arg(long, value_delimiter = ',', required = true)]
        ranges: Vec<f64>,
        /// Comma-separated perturbation seeds
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
        /// JSON list of scenes; synthetic shapes scenes when omitted
        #[arg(long)]
        scenes: Option<PathBuf>,
        /// Synthetic shapes config for generated scenes
        #[arg(long)]
        synth_config: Option<PathBuf>,
        /// Number of generated scenes
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
        #[command(flatten)]
        layout: LayoutArgs,
        /// Also synthesize images and score them
        #[arg(long)]
        synthesize: bool,
        #[arg(long, default_value = "sweep_out")]
        out: PathBuf,
        #[arg(long, default_value = "sweep")]
        stem: String,
    },
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Write a synthetic shapes dataset in the annotation format
    Synth {
        /// Synthetic shapes config JSON; the toy config when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_mode(s: &str) -> std::result::Result<LayoutMode, String> {
    LayoutMode::parse(s).ok_or_else(|| format!("unknown mode {s:?}; expected panoptic, stuff_only or instance_only"))
}

fn serve(checkpoint: PathBuf, host: String, port: u16, no_gf: bool) -> Result<Value> {
    let model = plgan_core::checkpoint::load_checkpoint(&checkpoint, &candle_core::Device::Cpu)?.model;
    let state = Arc::new(ServiceState::new(model).with_guided_filter(!no_gf));
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .map_err(|_| Error::BadConfig(format!("bad listen address {host}:{port}")))?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| Error::io(addr.to_string(), e))?;
        log::info!("listening on http://{addr}");
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| Error::io(addr.to_string(), e))
    })?;
    Ok(json!({ "stopped": addr.to_string() }))
}

fn run(cli: Cli) -> Result<Value> {
    match cli.command {
        Command::Train { config, resume, output_dir, steps } => {
            commands::train(&TrainOptions { config, resume, output_dir, steps })
        }
        Command::Eval { command: EvalCommand::Sweep { checkpoint, ranges, seeds, scenes, synth_config, count, data_seed, layout, synthesize, out, stem } } => {
            commands::eval_sweep(&SweepOptions {
                checkpoint,
                ranges,
                seeds,
                scenes,
                synth_config,
                count,
                data_seed,
                mode: layout.mode,
                synthesize,
                use_gf: !layout.no_gf,
                out,
                stem,
            })
        }
        Command::Synth { scene, checkpoint, out, seed, layout, dump_layout } => commands::synth(&SynthOptions {
            scene,
            checkpoint,
            out,
            seed,
            mode: layout.mode,
            use_gf: !layout.no_gf,
            dump_layout,
        }),
        Command::Serve { checkpoint, port, host, no_gf } => serve(checkpoint, host, port, no_gf),
        Command::Dataset { command: DatasetCommand::Synth { config, count, seed, out } } => {
            commands::dataset_synth(&DatasetOptions { config, count, seed, out })
        }
        Command::Init { taxonomy, model_config, resolution, seed, out } => {
            commands::init(&InitOptions { taxonomy, model_config, resolution, seed, out })
        }
        Command::ToyConfig => Ok(serde_json::from_str(&plgan_cli::config::RunConfig::toy().to_json())?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap exits with status 2 and usage text on bad arguments.
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": e.name(), "message": e.to_string() }));
            ExitCode::from(1)
        }
    }
}
