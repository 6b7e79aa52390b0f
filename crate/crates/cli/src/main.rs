use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gausstr_cli::commands;
use gausstr_core::config::RunConfig;
use gausstr_core::Error;

#[derive(Parser)]
#[command(
    name = "gausstr",
    about = "Synthetic scenes, Gaussian training, rendering and occupancy evaluation",
    after_help = "Any config key can be overridden as --key=value, e.g. --queries_per_view=100 --seg_aug=true."
)]
struct Cli {
    /// Run configuration (TOML, or JSON by extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; falls back to GAUSSTR_THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic scenes with oracle maps and ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a data directory and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render predicted Gaussians into every view of a scene.
    Render {
        /// Scene directory (or a data directory, see --scene).
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with = "gaussians", required_unless_present = "gaussians")]
        ckpt: Option<PathBuf>,
        /// Render a saved Gaussian set instead of running the network.
        #[arg(long)]
        gaussians: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        scene: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict Gaussians for a scene and voxelize them into a GOCC grid.
    Voxelize {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        scene: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a predicted grid with ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Evaluate even when the config hashes differ.
        #[arg(long)]
        force: bool,
    },
}

/// Pull `--key=value` config overrides out of the argument list.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut keys = RunConfig::keys();
    keys.extend(["dim".to_string(), "c_r".to_string()]);
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        if let Some((k, v)) = a.strip_prefix("--").and_then(|s| s.split_once('=')) {
            if keys.iter().any(|key| key == k) {
                overrides.push((k.to_string(), v.to_string()));
                continue;
            }
        }
        rest.push(a);
    }
    (rest, overrides)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Numerical { .. } => 4,
        _ => 3,
    }
}

fn run(cli: Cli, overrides: &[(String, String)]) -> gausstr_core::Result<()> {
    let threads = match cli.threads {
        Some(n) => Some(n),
        None => match std::env::var("GAUSSTR_THREADS") {
            Ok(s) => Some(s.trim().parse().map_err(|_| Error::Config(format!("GAUSSTR_THREADS={s} is not a count")))?),
            Err(_) => None,
        },
    };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = base.with_overrides(overrides)?;
    match cli.cmd {
        Cmd::Synth { out } => commands::synth(&cfg, &out),
        Cmd::Train { data, out } => commands::train(&cfg, &data, &out),
        Cmd::Render {
            data,
            ckpt,
            gaussians,
            scene,
            out,
        } => commands::render(&cfg, &data, scene, ckpt.as_deref(), gaussians.as_deref(), &out),
        Cmd::Voxelize { data, ckpt, scene, out } => commands::voxelize(&cfg, &data, scene, &ckpt, &out),
        Cmd::Eval { pred, gt, out, force } => commands::eval(&pred, &gt, &out, force),
    }
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = Cli::parse_from(args);
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gausstr: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
