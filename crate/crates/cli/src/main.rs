use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mimo_cli::commands::{self, AnalyzeKind, Common};
use mimo_cli::CliError;

#[derive(Parser)]
#[command(name = "mimo", version, about = "Train and analyse MIMO subnetwork ensembles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config (JSON).
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides `output_dir` and $MIMO_OUTPUT_DIR.
    #[arg(long, short)]
    output_dir: Option<PathBuf>,
    /// Re-derives every seed in the config from this one.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, short, action = clap::ArgAction::Count)]
    verbose: u8,
}

impl From<CommonArgs> for Common {
    fn from(a: CommonArgs) -> Self {
        Common {
            config: a.config,
            output_dir: a.output_dir,
            seed: a.seed,
            verbose: a.verbose,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one network and write a checkpoint, loss curve and metrics.
    Train(CommonArgs),
    /// Report on a trained checkpoint.
    Analyze {
        #[arg(value_enum)]
        kind: Kind,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the config's sweep section.
    Sweep(CommonArgs),
    /// Decompose regression test error per ensemble size.
    BiasVariance(CommonArgs),
    /// Evaluate the plane through three subnetworks.
    Landscape {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Kind {
    Diversity,
    Invariance,
    Separation,
    Metrics,
    Sparsity,
}

impl From<Kind> for AnalyzeKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Diversity => AnalyzeKind::Diversity,
            Kind::Invariance => AnalyzeKind::Invariance,
            Kind::Separation => AnalyzeKind::Separation,
            Kind::Metrics => AnalyzeKind::Metrics,
            Kind::Sparsity => AnalyzeKind::Sparsity,
        }
    }
}

fn dispatch(command: Command) -> Result<PathBuf, CliError> {
    match command {
        Command::Train(c) => commands::train(&c.into()),
        Command::Analyze { kind, checkpoint, common } => commands::analyze(&common.into(), kind.into(), &checkpoint),
        Command::Sweep(c) => commands::sweep(&c.into()),
        Command::BiasVariance(c) => commands::bias_variance(&c.into()),
        Command::Landscape { checkpoint, common } => commands::landscape(&common.into(), &checkpoint),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(manifest) => {
            println!("{}", manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
