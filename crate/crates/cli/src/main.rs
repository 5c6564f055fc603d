use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stainforge_cli::commands::{evaluate, preprocess, synth, train};
use stainforge_cli::{serve, CliError, Result, RunConfig};
use stainforge_core::synth::SynthConfig;

#[derive(Parser)]
#[command(name = "stainforge", version, about = "Virtual staining of mIF markers from H&E")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML or JSON run configuration.
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides the root seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// QC, AF subtraction, normalization and GMM gating.
    Preprocess(Common),
    /// Train the translator on the preprocessed tiles.
    Train(Common),
    /// Score predictions at pixel and cell level.
    Evaluate(Common),
    /// Run the AF-tuning API on 127.0.0.1.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        port: Option<u16>,
    },
    /// Write a synthetic dataset with planted labels and a run config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = SynthConfig::default().tiles)]
        tiles: usize,
        #[arg(long, default_value_t = SynthConfig::default().size)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if common.jobs.is_some() {
        cfg.jobs = common.jobs;
    }
    if let Some(jobs) = cfg.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Internal(e.to_string()))?;
    }
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess(c) => {
            let cfg = load(&c)?;
            let s = preprocess::run(&cfg)?;
            eprintln!("kept {}/{} tiles, {} cells", s.tiles_kept, s.tiles_total, s.cells);
            print_json(&s)
        }
        Command::Train(c) => print_json(&train::run(&load(&c)?)?),
        Command::Evaluate(c) => {
            let cfg = load(&c)?;
            let out = evaluate::run(&cfg)?;
            eprintln!("report written to {}", cfg.evaluate_dir().join(evaluate::REPORT_FILE).display());
            print_json(&out.report.macro_avg)
        }
        Command::Serve { common, port } => {
            let cfg = load(&common)?;
            serve::serve(&cfg, port.unwrap_or(cfg.serve.port))
        }
        Command::Synth { out, tiles, size, seed } => {
            let cfg = SynthConfig { tiles, size, seed, ..SynthConfig::default() };
            let o = synth::run(Path::new(&out), &cfg)?;
            eprintln!("{} tiles, {} nuclei; run with --config {}", o.dataset.tiles, o.dataset.nuclei, o.config.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
