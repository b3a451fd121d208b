//! `linkreg`: Bayesian record linkage with a jointly fitted downstream
//! regression. Subcommands generate synthetic corpora, run the sampler, and
//! evaluate posterior output against ground truth.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use linkreg_cli::commands::{self, EvalArgs, GenerateArgs, RunArgs, UsageError};

#[derive(Parser)]
#[command(
    name = "linkreg",
    version,
    about = "Bayesian record linkage with joint regression"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with ground truth.
    Generate(GenerateCli),
    /// Run the posterior sampler on a corpus.
    Run(RunCli),
    /// Evaluate run output against ground truth.
    Eval(EvalCli),
}

#[derive(Args)]
struct GenerateCli {
    /// Built-in experiment name: RL500-dedup, RL500-bipartite, ExpI, ExpII,
    /// or ExpIII.
    #[arg(long, conflicts_with = "spec")]
    experiment: Option<String>,
    /// Generator spec file (JSON) instead of a built-in name.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Generator seed (overrides the spec's seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for corpus.csv, truth.csv, schema.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunCli {
    /// JSON configuration file; command-line flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Output directory for trace.csv, pairs.csv, linksets.csv, summary.json.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `linkage-only` or `joint`.
    #[arg(long)]
    mode: Option<String>,
    /// Prior shorthand, e.g. `pyp:0.4,0.98`, `constrained-pyp:1,0.725`,
    /// `uniform-labels:600`, `uniform-partitions:600`.
    #[arg(long)]
    prior: Option<String>,
    /// Forbid within-database duplicates.
    #[arg(long)]
    constrained: bool,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    burn_in: Option<u64>,
    #[arg(long)]
    thin: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of independent chains; chain `i` uses seed + i.
    #[arg(long)]
    chains: Option<usize>,
}

#[derive(Args)]
struct EvalCli {
    /// Directory holding a run's outputs.
    #[arg(long)]
    run: PathBuf,
    /// Ground truth CSV.
    #[arg(long)]
    truth: PathBuf,
    /// Output directory; defaults to the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Plug-in run directory for the joint-versus-plug-in comparison.
    #[arg(long)]
    plugin: Option<PathBuf>,
    /// Bin count for real-valued posterior histograms.
    #[arg(long, default_value_t = 40)]
    bins: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => commands::cmd_generate(&GenerateArgs {
            experiment: args.experiment,
            spec: args.spec,
            seed: args.seed,
            out: args.out,
        }),
        Command::Run(args) => commands::cmd_run(&RunArgs {
            config: args.config,
            corpus: args.corpus,
            schema: args.schema,
            out: args.out,
            mode: args.mode,
            prior: args.prior,
            constrained: args.constrained,
            iterations: args.iterations,
            burn_in: args.burn_in,
            thin: args.thin,
            seed: args.seed,
            chains: args.chains,
        }),
        Command::Eval(args) => commands::cmd_eval(&EvalArgs {
            run: args.run,
            truth: args.truth,
            out: args.out,
            plugin: args.plugin,
            bins: args.bins,
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
