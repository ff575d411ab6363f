use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod assign;
mod commands;
mod error;
mod table;

#[derive(Parser)]
#[command(name = "rpk", version, about = "Build, fuse, scale and inspect re-parameterizable conv blocks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a block from a model config and write graph + weights.
    Build(BuildArgs),
    /// Show where rep blocks may carry an identity branch.
    Plan(PlanArgs),
    /// Fuse rep blocks into single convolutions and verify equivalence.
    Fuse(FuseArgs),
    /// Scale an ELAN / E-ELAN config and compare accounting.
    Scale(ScaleArgs),
    /// Count parameters and MACs.
    Count(CountArgs),
    /// Run label assignment on a scenario file.
    Assign(AssignArgs),
    /// Compare two graphs on seeded random inputs.
    CheckEquiv(CheckEquivArgs),
}

#[derive(Args)]
pub struct GraphPaths {
    /// Graph description (TOML).
    #[arg(long)]
    pub graph: PathBuf,
    /// Weight container (RPKW).
    #[arg(long)]
    pub weights: PathBuf,
}

#[derive(Args)]
pub struct BuildArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
}

#[derive(Args)]
pub struct PlanArgs {
    #[command(flatten)]
    pub input: GraphPaths,
    /// Write placements as TOML.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct FuseArgs {
    #[command(flatten)]
    pub input: GraphPaths,
    #[arg(long)]
    pub out_graph: PathBuf,
    #[arg(long)]
    pub out_weights: PathBuf,
    /// Write the equivalence report as TOML.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Also fold batch norms that directly follow a convolution.
    #[arg(long)]
    pub fold_bn: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Spatial size of the random test inputs.
    #[arg(long, default_value_t = 16)]
    pub size: usize,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Compound,
    WidthOnly,
    DepthOnly,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum TransitionArg {
    Explicit,
    Induced,
}

#[derive(Args)]
pub struct ScaleArgs {
    /// Model config with an elan or eelan block; the built-in base otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "compound")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 1.0)]
    pub depth: f64,
    #[arg(long, default_value_t = 1.0)]
    pub width: f64,
    /// Compound mode: also scale branch widths by the width factor.
    #[arg(long)]
    pub branch_width: bool,
    /// Compound mode: how the transition width is chosen.
    #[arg(long, value_enum, default_value = "explicit")]
    pub transition: TransitionArg,
    /// Input size for MAC counting.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct CountArgs {
    #[arg(long, conflicts_with_all = ["graph", "weights"])]
    pub config: Option<PathBuf>,
    #[arg(long, requires = "weights")]
    pub graph: Option<PathBuf>,
    #[arg(long, requires = "graph")]
    pub weights: Option<PathBuf>,
    /// Input size for MAC counting.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct AssignArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    /// Targets file (TOML); grid dumps are written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct CheckEquivArgs {
    #[arg(long)]
    pub graph_a: PathBuf,
    #[arg(long)]
    pub weights_a: PathBuf,
    #[arg(long)]
    pub graph_b: PathBuf,
    #[arg(long)]
    pub weights_b: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub inputs: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Build(a) => commands::build(&a),
        Command::Plan(a) => commands::plan(&a),
        Command::Fuse(a) => commands::fuse(&a),
        Command::Scale(a) => commands::scale(&a),
        Command::Count(a) => commands::count(&a),
        Command::Assign(a) => assign::run(&a),
        Command::CheckEquiv(a) => commands::check_equiv(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            e.code()
        }
    }
}
