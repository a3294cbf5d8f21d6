use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sparsemo_cli::{commands, Ablation, Overrides, RunConfig, RunLayout};
use sparsemo_core::prior::LossMode;
use sparsemo_core::Result;

#[derive(Parser)]
#[command(name = "sparsemo", version, about = "Full-body motion from head and hand tracking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// Sparse encoder loss.
    #[arg(long, global = true)]
    mode: Option<LossMode>,
    #[arg(long, global = true, value_enum)]
    ablation: Option<Ablation>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic training and test sets.
    Synth,
    /// Train the full motion prior.
    TrainPrior,
    /// Train the sparse motion encoder against the frozen prior.
    TrainSparse,
    /// Train the sequence model against the frozen encoders.
    TrainSeq,
    /// Reconstruct motion from the tracking signals of motion files.
    Infer {
        /// Motion file or directory; the test split by default.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Evaluate the model chain on the test split.
    Eval {
        /// Sequence checkpoint to compare against, per action.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let c = cli.common;
    let base = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let overrides = Overrides {
        seed: c.seed,
        mode: c.mode,
        ablation: c.ablation,
    };
    let cfg = base.resolve(&overrides)?;
    let layout = RunLayout::new(&cfg, &c.out);
    match cli.command {
        Command::Synth => commands::synth(&cfg, &layout),
        Command::TrainPrior => commands::train_prior(&cfg, &layout),
        Command::TrainSparse => commands::train_sparse(&cfg, &layout),
        Command::TrainSeq => commands::train_seq(&cfg, &layout),
        Command::Infer { input } => {
            for p in commands::infer(&cfg, &layout, input.as_deref())? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Eval { baseline } => {
            let report = commands::eval(&cfg, &layout, baseline.as_deref())?;
            print!("{}", report.to_csv());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error kind={} message={message:?}", e.kind());
            ExitCode::FAILURE
        }
    }
}
