use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hybridcomm::cli::{self, CliError, ExperimentConfig, SweepOptions};

#[derive(Parser)]
#[command(name = "hybridcomm", version, about = "Simulated 3D-parallel training with per-path compression")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment per seed and write loss, trace and summary files.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seeds, overriding the config.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Run every scheme (and world size) in the config's sweep section.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<String>,
        /// Also write SVG charts.
        #[arg(long)]
        plots: bool,
    },
    /// Measure ratio and throughput of each codec on synthetic buffers.
    CodecBench {
        /// Comma-separated buffer lengths in values.
        #[arg(long, default_value = "4096,1048576")]
        sizes: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config and print the resolved layout and scheme table.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn seeds(list: Option<&str>) -> Result<Option<Vec<u64>>, CliError> {
    list.map(|s| cli::parse_list("--seeds", s)).transpose()
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Run { config, out, seeds: s } => {
            let cfg = ExperimentConfig::load(&config)?;
            let seeds = seeds(s.as_deref())?;
            for r in cli::cmd_run(&cfg, out.as_deref(), seeds.as_deref())? {
                println!(
                    "{} seed {}: {:.1} samples/s, eval loss {:.6e}{}",
                    r.scheme,
                    r.seed,
                    r.samples_per_sec,
                    r.final_eval_loss,
                    if r.diverged { " (diverged)" } else { "" }
                );
            }
        }
        Command::Sweep { config, out, seeds: s, plots } => {
            let cfg = ExperimentConfig::load(&config)?;
            let opts = SweepOptions {
                out,
                seeds: seeds(s.as_deref())?,
                plots,
            };
            print!("{}", cli::sweep_csv(&cli::cmd_sweep(&cfg, &opts)?));
        }
        Command::CodecBench { sizes, out } => {
            let sizes: Vec<usize> = cli::parse_list("--sizes", &sizes)?;
            let csv = cli::codec_bench_csv(&cli::codec_bench(&sizes));
            if let Some(dir) = out {
                let path = dir.join("codec_bench.csv");
                std::fs::create_dir_all(&dir).map_err(|source| CliError::Io { path: dir.clone(), source })?;
                std::fs::write(&path, &csv).map_err(|source| CliError::Io { path, source })?;
            }
            print!("{csv}");
        }
        Command::Validate { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            print!("{}", cli::cmd_validate(&cfg)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match dispatch(args.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
