use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use specterra::{cmd_convert, cmd_gradcheck, cmd_prep, cmd_roundtrip, cmd_train, RunConfig};

/// Vocoder-free voice conversion: prep a paired corpus, train the
/// magnitude-mapping transformer, convert audio, and verify the numerics.
#[derive(Parser)]
#[command(name = "specterra", version, about)]
struct Cli {
    /// INI-style config file (`key = value`); flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run seed; all randomness derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest a manifest of WAV pairs into spectrum caches.
    Prep {
        /// Tab-separated manifest: label, source wav, target wav.
        #[arg(long)]
        manifest: PathBuf,
        /// Directory for the feature caches, index, and report.
        #[arg(long)]
        cache_dir: PathBuf,
    },
    /// Train on a prepped cache directory.
    Train {
        #[arg(long)]
        cache_dir: PathBuf,
        /// Directory receiving checkpoints and metrics.csv.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides the configured step count.
        #[arg(long)]
        max_steps: Option<u64>,
        /// Metrics CSV path (defaults to metrics.csv in the checkpoint dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert one WAV through a trained checkpoint.
    Convert {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input WAV (16-bit PCM mono).
        input: PathBuf,
        /// Output WAV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference verification of every autodiff op and the
    /// end-to-end model loss.
    Gradcheck,
    /// STFT/ISTFT round-trip SNR check on one file.
    Roundtrip {
        /// Input WAV.
        input: PathBuf,
    },
}

fn init_thread_pool() {
    if let Ok(v) = std::env::var("SPECTERRA_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    init_thread_pool();
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    match cli.command {
        Command::Prep { manifest, cache_dir } => {
            cmd_prep(&cfg, &manifest, &cache_dir)?;
        }
        Command::Train {
            cache_dir,
            checkpoint,
            max_steps,
            out,
        } => {
            if let Some(steps) = max_steps {
                cfg.train.max_steps = steps;
            }
            cmd_train(&cfg, &cache_dir, &checkpoint, out.as_deref())?;
        }
        Command::Convert {
            checkpoint,
            input,
            out,
        } => {
            cmd_convert(&cfg, &checkpoint, &input, &out)?;
        }
        Command::Gradcheck => {
            cmd_gradcheck(cfg.train.seed)?;
        }
        Command::Roundtrip { input } => {
            cmd_roundtrip(&cfg, &input)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
