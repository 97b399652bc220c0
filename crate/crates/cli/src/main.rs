//! `nco`: generate instances, train, evaluate, search, solve exactly and plot.

mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "nco", version, about = "Neural combinatorial optimization toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random instance dataset.
    Generate(GenerateArgs),
    /// Train a policy from a config.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or given solutions) on a dataset.
    Eval(EvalArgs),
    /// Adapt a checkpoint to a dataset with active search or EAS.
    Search(SearchArgs),
    /// Solve a dataset exactly.
    Oracle(OracleArgs),
    /// Turn training metrics into a tidy CSV and an SVG chart.
    Plot(PlotArgs),
}

#[derive(Args)]
pub struct GenerateArgs {
    /// tsp, cvrp, op, pctsp or pdp.
    #[arg(long)]
    pub env: String,
    /// Customer count (node count for TSP).
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 1234)]
    pub seed: u64,
    /// Vehicle capacity (CVRP); defaults to the size table.
    #[arg(long)]
    pub capacity: Option<f32>,
    /// Length budget (OP); defaults to the size table.
    #[arg(long)]
    pub max_length: Option<f32>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Config files, later ones win.
    #[arg(long, required = true)]
    pub config: Vec<PathBuf>,
    /// Overrides such as `model.policy.encoder.num_layers=6`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Continue from the latest checkpoint in the run directory.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many epochs.
    #[arg(long)]
    pub stop_after: Option<usize>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "solutions", conflicts_with = "solutions")]
    pub checkpoint: Option<PathBuf>,
    /// Score the action sequences of an `oracle` CSV instead of a policy.
    #[arg(long)]
    pub solutions: Option<PathBuf>,
    /// NCOF dataset, or a TSPLib `.tsp` / CVRPLib `.vrp` file.
    #[arg(long)]
    pub dataset: PathBuf,
    /// greedy, sampling:M, multistart[:N], augmentation:K or ms_aug[:K];
    /// repeat for several.
    #[arg(long, default_value = "greedy")]
    pub scheme: Vec<String>,
    /// Reference values: an `oracle` CSV, or `oracle` to solve now.
    #[arg(long)]
    pub bks: Option<String>,
    #[arg(long, default_value_t = 1234)]
    pub seed: u64,
    /// CSV report; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct SearchArgs {
    /// as or eas.
    #[arg(long)]
    pub method: String,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub iters: usize,
    #[arg(long, default_value_t = 1234)]
    pub seed: u64,
    /// Adapt one parameter copy per instance (active search).
    #[arg(long)]
    pub per_instance: bool,
    /// Reference values as for `eval`.
    #[arg(long)]
    pub bks: Option<String>,
    /// Mean best-so-far cost per iteration.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct OracleArgs {
    #[arg(long)]
    pub env: String,
    #[arg(long)]
    pub dataset: PathBuf,
    /// CSV with `instance_id,bks,actions`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct PlotArgs {
    /// `metrics.csv` files of one or more runs.
    #[arg(long, required = true, num_args = 1..)]
    pub metrics: Vec<PathBuf>,
    /// Output path; `.csv` and `.svg` files are written next to each other.
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Search(a) => commands::search(a),
        Command::Oracle(a) => commands::oracle(a),
        Command::Plot(a) => plot::plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
