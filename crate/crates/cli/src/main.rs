use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dragflow::sprites::DatasetConfig;
use dragflow::trajectory::{AnchorConfig, GaussianConfig};
use dragflow_cli::commands;
use dragflow_cli::service::{serve, App};

#[derive(Parser)]
#[command(name = "dragflow", version, about = "Trajectory-conditioned sprite video diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic sprite clips with frames, flow, scene and caption.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dataset config JSON; defaults to 32x32 clips of 8 frames.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run dense-flow then sparse-trajectory training from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a video for a request file.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        request: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the request.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score generated videos listed in a manifest and print the report.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for tracked-vs-target overlay images.
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// Sample trajectories from a directory of .flo files.
    SampleTraj {
        #[arg(long)]
        flow: PathBuf,
        #[arg(long, default_value_t = 16)]
        lambda: usize,
        #[arg(long = "max-traj", default_value_t = 8)]
        max_traj: usize,
        #[arg(long, default_value_t = 99)]
        kernel: usize,
        #[arg(long, default_value_t = 10.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Start the HTTP service for the trajectory editor.
    Serve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        /// Base image PNG offered to the editor.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Scene JSON whose first frame is offered to the editor.
        #[arg(long, conflicts_with = "image")]
        scene: Option<PathBuf>,
    },
}

fn log(msg: &str) {
    eprintln!("{msg}");
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { out, count, seed, config } => {
            let cfg = match config {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(&p).map_err(|e| anyhow::anyhow!("cannot read {}: {e}", p.display()))?)?,
                None => DatasetConfig::default(),
            };
            commands::gen_data(&out, count, seed, cfg)
        }
        Command::Train { config, out } => commands::train(&config, &out, &mut log),
        Command::Sample { model, request, out, seed } => commands::sample(&model, &request, &out, seed, &mut log),
        Command::Eval { manifest, out, overlay } => {
            let report = commands::eval(&manifest, overlay.as_deref())?;
            let text = serde_json::to_string_pretty(&report)? + "\n";
            if let Some(p) = out {
                std::fs::write(&p, &text).map_err(|e| anyhow::anyhow!("cannot write {}: {e}", p.display()))?;
            }
            print!("{text}");
            Ok(())
        }
        Command::SampleTraj { flow, lambda, max_traj, kernel, sigma, seed, out } => commands::sample_traj(
            &flow,
            AnchorConfig {
                interval: lambda,
                max_trajectories: max_traj,
            },
            GaussianConfig {
                kernel_size: kernel,
                sigma,
            },
            seed,
            &out,
        ),
        Command::Serve { model, addr, image, scene } => {
            let (model, vocab) = commands::load_model_dir(&model)?;
            let base = commands::base_image(&model.config, image.as_deref(), scene.as_deref())?;
            let app = App::start(model, vocab, commands::home_dir(), base);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(app, &addr))?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
