use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use untied::harness::{
    emit_curves, emit_table, fetch_datasets, run_experiment, write_outputs, ExperimentConfig, Overrides,
    RemoteDataset, ResultArchive, TableFormat,
};
use untied::verification::{run_suite, SUITE_SEEDS};

#[derive(Parser)]
#[command(name = "untied", version, about = "Train networks whose backward factors are decoupled from their activations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment grid and write archive, tables and curves.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Runs per cell.
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Worker threads; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        workers: usize,
        /// MNIST/Fashion training samples to draw before the 80/20 split; 0 keeps all.
        #[arg(long)]
        train_subset: Option<usize>,
        /// Output directory; defaults to runs/<experiment id>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the result table of an archive.
    Table {
        #[arg(long)]
        archive: PathBuf,
        /// csv or md.
        #[arg(long, default_value = "md")]
        format: String,
    },
    /// Print the per-run training curves of one cell as CSV.
    Curves {
        #[arg(long)]
        archive: PathBuf,
        /// Cell id, e.g. "bs=64,lr=0.01,pair=log/d".
        #[arg(long)]
        cell: String,
    },
    /// Run gradient and direction checks.
    Verify,
    /// Download and verify MNIST or Fashion-MNIST IDX files.
    Fetch {
        /// mnist or fashion.
        #[arg(long)]
        dataset: String,
        /// Destination directory; defaults to data/<dataset>.
        #[arg(long)]
        dest: Option<PathBuf>,
        /// Copy (optionally gzipped) files from this directory instead of downloading.
        #[arg(long)]
        from: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { config, runs, epochs, workers, train_subset, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            cfg.apply_overrides(&Overrides { runs, epochs, train_subset })?;
            let cells = cfg.cells().len();
            eprintln!("{}: {cells} cells × {} runs, {} epochs", cfg.id, cfg.runs, cfg.epochs());
            let archive = run_experiment(&cfg, workers)?;
            let dir = out.unwrap_or_else(|| PathBuf::from("runs").join(&cfg.id));
            for path in write_outputs(&archive, &dir)? {
                eprintln!("wrote {}", path.display());
            }
            print!("{}", emit_table(&archive, TableFormat::Markdown)?);
        }
        Command::Table { archive, format } => {
            let archive = ResultArchive::load(&archive)?;
            print!("{}", emit_table(&archive, format.parse()?)?);
        }
        Command::Curves { archive, cell } => {
            let archive = ResultArchive::load(&archive)?;
            print!("{}", emit_curves(&archive, &cell)?);
        }
        Command::Verify => {
            let outcomes = run_suite(&SUITE_SEEDS)?;
            let mut failed = 0;
            for o in &outcomes {
                let status = if o.passed { "ok  " } else { "FAIL" };
                println!("{status} {:<28} seed {:<2} {}", o.check, o.seed, o.detail);
                failed += usize::from(!o.passed);
            }
            println!("{} checks, {failed} failed", outcomes.len());
            if failed > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Fetch { dataset, dest, from } => {
            let which: RemoteDataset = dataset.parse()?;
            let dest = dest.unwrap_or_else(|| PathBuf::from("data").join(&dataset));
            let paths = fetch_datasets(which, &dest, from.as_deref())
                .with_context(|| format!("fetching {dataset} into {}", dest.display()))?;
            for p in paths {
                let size = fs::metadata(&p).map(|m| m.len()).unwrap_or(0);
                println!("{} ({size} bytes)", p.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
