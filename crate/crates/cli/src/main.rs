//! `domerge`: merge LoRA adapters, inspect checkpoints, compute diagnostics
//! and run the Monte Carlo verification suites.

mod cmd;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};

use domerge::report::Json;

#[derive(Parser, Debug)]
#[command(name = "domerge", version, about = "Decoupled, orthogonalized merging of LoRA adapters")]
struct Cli {
    /// Worker threads for per-layer and per-trial parallelism.
    #[arg(long, global = true, env = "DO_MERGE_THREADS")]
    threads: Option<usize>,

    /// Machine-readable output; errors go to stderr as JSON.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Merge adapters into one checkpoint.
    Merge(MergeArgs),
    /// List tensors and detected LoRA pairs in a checkpoint.
    Inspect(InspectArgs),
    /// Write magnitude-variance and cross-Gram diagnostics for adapters.
    Diagnose(DiagnoseArgs),
    /// Run Monte Carlo verification suites.
    Verify(VerifyArgs),
}

#[derive(Args, Debug, Clone)]
#[group(required = true, multiple = false)]
pub struct AdapterInputs {
    /// Adapter checkpoints, in merge order.
    #[arg(value_name = "ADAPTER")]
    pub adapters: Vec<PathBuf>,

    /// JSON list of {path, name, scaling}; relative paths resolve against
    /// the manifest's directory.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct PatternArgs {
    /// Glob for A factors; the first `*` captures the layer name.
    #[arg(long, default_value = domerge::checkpoint::DEFAULT_A_PATTERN)]
    pub a_pattern: String,

    #[arg(long, default_value = domerge::checkpoint::DEFAULT_B_PATTERN)]
    pub b_pattern: String,

    /// Per-adapter scale folded into B (one value, or one per adapter).
    #[arg(long, value_delimiter = ',')]
    pub scaling: Vec<f64>,

    /// Fail when adapters disagree on layers (default).
    #[arg(long, conflicts_with = "lenient")]
    pub strict: bool,

    /// Drop layers missing from some adapter, with a warning.
    #[arg(long)]
    pub lenient: bool,
}

#[derive(Args, Debug)]
pub struct MergeArgs {
    #[command(flatten)]
    pub inputs: AdapterInputs,

    #[command(flatten)]
    pub patterns: PatternArgs,

    /// Pre-trained checkpoint, required for fused output.
    #[arg(long)]
    pub base: Option<PathBuf>,

    /// do_merging, task_arithmetic or average.
    #[arg(long, default_value = "do_merging")]
    pub method: String,

    /// Merging coefficient (default 1/n²).
    #[arg(long)]
    pub lambda: Option<f64>,

    /// column, row or matrix.
    #[arg(long, default_value = "column")]
    pub magnitude_mode: String,

    /// Skip factor orthogonalization.
    #[arg(long)]
    pub no_ortho: bool,

    /// Merge full-rank matrices directly instead of magnitude and direction.
    #[arg(long)]
    pub no_decouple: bool,

    #[arg(long, default_value_t = 200, conflicts_with = "no_ortho")]
    pub ortho_steps: usize,

    /// Largest allowed ‖δ_i‖/‖W_i‖.
    #[arg(long, default_value_t = 0.05, conflicts_with = "no_ortho")]
    pub ortho_budget: f64,

    #[arg(long, default_value_t = 1e-2, conflicts_with = "no_ortho")]
    pub ortho_step_size: f64,

    /// Perturbation penalty weight (default: initial L_o / Σ‖W_i‖²).
    #[arg(long, conflicts_with = "no_ortho")]
    pub ortho_mu: Option<f64>,

    #[arg(long, short)]
    pub output: PathBuf,

    /// delta, fused or lowrank:R.
    #[arg(long, default_value = "delta")]
    pub output_mode: String,

    /// Storage dtype for written tensors (default f32; fused keeps the base dtype).
    #[arg(long)]
    pub dtype: Option<String>,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Overwrite an existing output file.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    pub path: PathBuf,

    #[arg(long, default_value = domerge::checkpoint::DEFAULT_A_PATTERN)]
    pub a_pattern: String,

    #[arg(long, default_value = domerge::checkpoint::DEFAULT_B_PATTERN)]
    pub b_pattern: String,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub inputs: AdapterInputs,

    #[command(flatten)]
    pub patterns: PatternArgs,

    #[arg(long)]
    pub report: PathBuf,

    /// json or csv.
    #[arg(long, default_value = "json")]
    pub format: String,

    /// Measure cross-Gram norms after orthogonalizing the factors.
    #[arg(long)]
    pub after_ortho: bool,

    /// Also report cross-Gram norms of the B and A factor groups.
    #[arg(long)]
    pub factors: bool,

    #[arg(long, default_value = "column")]
    pub magnitude_mode: String,

    /// Fine-tuned accuracies, for the normalized average accuracy.
    #[arg(long, value_delimiter = ',', requires = "merged_acc")]
    pub finetuned_acc: Vec<f64>,

    /// Merged-model accuracies, same order as --finetuned-acc.
    #[arg(long, value_delimiter = ',', requires = "finetuned_acc")]
    pub merged_acc: Vec<f64>,

    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// theorem31, theorem32, theorem33, crossterm or all.
    #[arg(long, default_value = "all")]
    pub suite: String,

    /// Samples per suite (default: each suite's own).
    #[arg(long)]
    pub samples: Option<usize>,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// JSON report of means, standard errors and verdicts.
    #[arg(long)]
    pub report: Option<PathBuf>,

    #[arg(long, action = ArgAction::SetTrue)]
    pub force: bool,
}

/// Exit codes shared by every command.
pub mod exit {
    pub const PROPERTY_VIOLATED: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const PARSE: u8 = 3;
    pub const IO: u8 = 4;
}

/// An error together with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub kind: &'static str,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self { code: exit::USAGE, kind: "usage", error: anyhow::anyhow!(msg.into()) }
    }

    pub fn property(msg: impl Into<String>) -> Self {
        Self { code: exit::PROPERTY_VIOLATED, kind: "property_violated", error: anyhow::anyhow!(msg.into()) }
    }
}

impl From<domerge::Error> for Failure {
    fn from(e: domerge::Error) -> Self {
        use domerge::Error as E;
        let (code, kind) = match &e {
            E::Parse { .. } => (exit::PARSE, "parse"),
            E::Alignment(_) => (exit::PARSE, "alignment"),
            E::Dimension(_) | E::NonFinite { .. } => (exit::PARSE, "shape"),
            E::Io { .. } => (exit::IO, "io"),
            E::Parameter(_) | E::Config(_) => (exit::USAGE, "usage"),
        };
        Self { code, kind, error: e.into() }
    }
}

fn report_failure(f: &Failure, json: bool) {
    if json {
        let err = Json::object([(
            "error",
            Json::object([
                ("kind", Json::from(f.kind)),
                ("message", Json::from(format!("{:#}", f.error))),
                ("exit_code", Json::from(f.code as usize)),
            ]),
        )]);
        eprint!("{}", err.to_pretty());
    } else {
        eprintln!("error: {:#}", f.error);
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap has not told us whether --json was given, so look for it directly
            let json = std::env::args_os().any(|a| a == "--json");
            if !json || !e.use_stderr() {
                e.exit();
            }
            let f = Failure::usage(e.render().to_string().trim().to_string());
            report_failure(&f, true);
            return ExitCode::from(f.code);
        }
    };
    let json = cli.json;
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            report_failure(&f, json);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::usage("--threads must be positive"));
        }
        domerge::par::set_threads(n).map_err(Failure::usage)?;
    }
    match cli.command {
        Command::Merge(a) => cmd::merge(a),
        Command::Inspect(a) => cmd::inspect(a, cli.json),
        Command::Diagnose(a) => cmd::diagnose(a, cli.json),
        Command::Verify(a) => cmd::verify(a, cli.json),
    }
}
