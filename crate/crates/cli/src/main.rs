use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fia_cli::grid::GridSpec;
use fia_cli::run::{cmd_ablate, cmd_edit, cmd_metrics, cmd_selftest, selftest_config};
use fia_cli::{CliError, RunConfig};

#[derive(Parser)]
#[command(name = "fia-edit", version, about = "Inversion-free image editing with feature interaction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Edit one PPM image.
    Edit {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the decoded edit latent every N steps.
        #[arg(long)]
        snapshot_stride: Option<usize>,
    },
    /// Run an ablation grid over the configured fixtures.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        /// Output directory; the report is written to report.txt inside it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Compare two PPM images.
    Metrics {
        a: PathBuf,
        b: PathBuf,
        /// PPM whose bright pixels select the MSE region.
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Run edit, metrics and a small ablation twice and compare the outputs.
    Selftest {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Edit {
            input,
            out,
            config,
            seed,
            snapshot_stride,
        } => {
            let cfg = RunConfig::load_or_default(config.as_deref())?;
            for path in cmd_edit(&cfg, &input, &out, seed, snapshot_stride)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Ablate {
            grid,
            out,
            config,
            seed,
            jobs,
        } => {
            let cfg = RunConfig::load_or_default(config.as_deref())?;
            let path = cmd_ablate(&cfg, &GridSpec::load(&grid)?, &out, seed, jobs)?;
            println!("wrote {}", path.display());
        }
        Command::Metrics { a, b, mask } => print!("{}", cmd_metrics(&a, &b, mask.as_deref())?),
        Command::Selftest { out, config, jobs } => {
            let cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => selftest_config(),
            };
            let names = cmd_selftest(&cfg, &out, jobs)?;
            println!("selftest: {} artifacts identical across two runs", names.len());
            for name in names {
                println!("  {name}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fia-edit: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
