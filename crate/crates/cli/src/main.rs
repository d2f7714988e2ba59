use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hoca_cli::commands::{self, ItemSource};
use hoca_cli::config::{resolve, Overrides, RunConfig, RESOLVED_CONFIG};
use hoca_cli::CliError;
use hoca_core::bench::SweepGrid;
use hoca_core::maf::{ArityConfig, Mechanism};

#[derive(Parser)]
#[command(name = "hoca", version, about = "Higher-order correlation attention experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// unary, hoca or lowrank.
    #[arg(long, global = true)]
    mechanism: Option<Mechanism>,
    /// Comma-separated family arities, e.g. `1,2,3`.
    #[arg(long, global = true)]
    arities: Option<ArityConfig>,
    #[arg(long, global = true)]
    rank: Option<usize>,
    #[arg(long, global = true)]
    hidden: Option<usize>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    beam_width: Option<usize>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            mechanism: self.mechanism,
            arities: self.arities.clone(),
            rank: self.rank,
            hidden: self.hidden,
            lr: self.lr,
            epochs: self.epochs,
            beam_width: self.beam_width,
        }
    }

    fn resolve(&self, fallback: Option<&Path>) -> Result<RunConfig, CliError> {
        let path = self.config.as_deref().or(fallback);
        Ok(resolve(path, &self.overrides())?)
    }
}

#[derive(Args)]
struct ItemArgs {
    /// Feature bundle directory to decode.
    #[arg(long, conflicts_with = "item")]
    bundle: Option<PathBuf>,
    /// Test-split item of the configured synthetic dataset.
    #[arg(long)]
    item: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the numerical verification suites.
    Verify {
        /// One of propositions, equivalence, complexity, gradients, unary, beam.
        #[arg(long)]
        suite: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a captioner on the synthetic dataset.
    Train {
        #[arg(long)]
        out: PathBuf,
    },
    /// Count and time the score computation of each mechanism.
    Bench {
        #[arg(long)]
        out: PathBuf,
        /// Largest intermediate allowed before a configuration is capped.
        #[arg(long)]
        max_elements: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        mechanisms: Option<Vec<Mechanism>>,
        #[arg(long = "n", value_delimiter = ',')]
        modalities: Option<Vec<usize>>,
        #[arg(long = "t", value_delimiter = ',')]
        extents: Option<Vec<usize>>,
        #[arg(long = "k", value_delimiter = ',')]
        ranks: Option<Vec<usize>>,
        /// Timed repetitions per configuration; 0 skips timing.
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Train low-rank models over a grid of ranks and seeds.
    SweepRank {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        ranks: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Record per-step attention weights while decoding one item.
    EmitAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        item: ItemArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy and beam decoding of one item.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        item: ItemArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Feature bundle utilities.
    #[command(subcommand)]
    Bundle(BundleCommand),
}

#[derive(Subcommand)]
enum BundleCommand {
    /// Write a synthetic test item as a feature bundle.
    Export {
        #[arg(long, default_value_t = 0)]
        item: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// The configuration saved next to a checkpoint, if there is one.
fn beside_checkpoint(checkpoint: &Path) -> Option<PathBuf> {
    let path = checkpoint.parent()?.join(RESOLVED_CONFIG);
    path.is_file().then_some(path)
}

fn run(cli: Cli) -> Result<bool, CliError> {
    let mut out = io::stdout().lock();
    let c = &cli.common;
    let ok = match cli.command {
        Command::Verify { suite, out: dir } => commands::verify(suite.as_deref(), &c.resolve(None)?, dir.as_deref(), &mut out)?,
        Command::Train { out: dir } => commands::train(&c.resolve(None)?, &dir, &mut out)?,
        Command::Bench {
            out: dir,
            max_elements,
            mechanisms,
            modalities,
            extents,
            ranks,
            runs,
        } => {
            let d = SweepGrid::default();
            let grid = SweepGrid {
                mechanisms: mechanisms.unwrap_or(d.mechanisms),
                n: modalities.unwrap_or(d.n),
                t: extents.unwrap_or(d.t),
                k: ranks.unwrap_or(d.k),
                max_elements: max_elements.unwrap_or(d.max_elements),
                runs: runs.unwrap_or(d.runs),
                d: d.d,
            };
            commands::bench(&c.resolve(None)?, &grid, &dir, &mut out)?
        }
        Command::SweepRank { out: dir, ranks, seeds } => commands::sweep_rank(&c.resolve(None)?, &ranks, &seeds, &dir, &mut out)?,
        Command::EmitAttention { checkpoint, item, out: dir } => {
            let config = c.resolve(beside_checkpoint(&checkpoint).as_deref())?;
            let source = ItemSource::pick(item.bundle, item.item, &config);
            commands::emit_attention(&config, &checkpoint, &source, &dir, &mut out)?
        }
        Command::Decode { checkpoint, item, out: dir } => {
            let config = c.resolve(beside_checkpoint(&checkpoint).as_deref())?;
            let source = ItemSource::pick(item.bundle, item.item, &config);
            commands::decode(&config, &checkpoint, &source, dir.as_deref(), &mut out)?
        }
        Command::Bundle(BundleCommand::Export { item, out: dir }) => commands::bundle_export(&c.resolve(None)?, item, &dir, &mut out)?,
    };
    Ok(ok)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
