use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod error;
mod run;

use error::CliError;

/// Generative data assimilation on unstructured 2D meshes.
#[derive(Parser, Debug)]
#[command(name = "genda", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Run config JSON; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Grid points evaluated concurrently.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Mesh generation and hierarchy tools.
    #[command(subcommand)]
    Mesh(MeshCmd),
    /// Dataset generation.
    #[command(subcommand)]
    Data(DataCmd),
    /// Trains the denoiser.
    Train {
        mode: TrainModeArg,
        /// Initial weights.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides `train.steps`.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Classical baseline.
    #[command(subcommand)]
    Baseline(BaselineCmd),
    /// Reconstructs fields on the held-out meshes from sampled sensors.
    Assimilate(EvalArgs),
    /// Scores a predicted field against a reference field.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        mesh: PathBuf,
        /// Sensor set the prediction used (fills n_obs and strategy).
        #[arg(long)]
        sensors: Option<PathBuf>,
    },
    /// Evaluation grid over one axis.
    Sweep {
        kind: SweepArg,
        #[command(flatten)]
        eval: EvalArgs,
    },
}

#[derive(Subcommand, Debug)]
enum MeshCmd {
    /// Writes the configured meshes.
    Gen,
    /// Builds the two-level hierarchy of a mesh.
    Decimate {
        #[arg(long)]
        mesh: PathBuf,
        /// Fine-to-coarse node ratio; the config value when omitted.
        #[arg(long)]
        ratio: Option<f64>,
    },
    /// Prints node, triangle and edge counts as JSON.
    Stats {
        #[arg(long)]
        mesh: PathBuf,
        /// Hierarchy file written by `mesh decimate`.
        #[arg(long, conflicts_with = "ratio")]
        graph: Option<PathBuf>,
        /// Decimates on the fly with this ratio.
        #[arg(long)]
        ratio: Option<f64>,
    },
}

#[derive(Subcommand, Debug)]
enum DataCmd {
    /// Solves every (mesh, angle) flow and writes the dataset.
    Synth,
}

#[derive(Subcommand, Debug)]
enum BaselineCmd {
    #[command(subcommand)]
    Lcsvd(LcsvdCmd),
}

#[derive(Subcommand, Debug)]
enum LcsvdCmd {
    /// Fits one basis per held-out mesh.
    Fit,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TrainModeArg {
    Diffusion,
    Supervised,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepArg {
    Gamma,
    Obs,
    Strategy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Diffusion,
    Supervised,
    Lcsvd,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    /// Model checkpoint, or a directory of `<mesh>.svd` files for lcsvd
    /// (fitted on the fly when omitted).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = MethodArg::Diffusion)]
    pub method: MethodArg,
    /// Guidance weights, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub gammas: Option<Vec<f64>>,
    /// Sensor counts, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub counts: Option<Vec<usize>>,
    /// Sensor strategies, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub strategy: Option<Vec<String>>,
    /// Ensemble members per reconstruction.
    #[arg(long)]
    pub ensemble: Option<usize>,
}

fn init_logging() -> Result<(), CliError> {
    let level = std::env::var("GENDA_LOG").unwrap_or_else(|_| "info".into());
    if !["error", "info", "debug"].contains(&level.as_str()) {
        return Err(CliError::Usage(format!("GENDA_LOG must be one of error, info, debug (got `{level}`)")));
    }
    env_logger::Builder::new().parse_filters(&level).format_timestamp_secs().init();
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let c = &cli.common;
    match cli.cmd {
        Cmd::Mesh(MeshCmd::Gen) => commands::mesh_gen(c),
        Cmd::Mesh(MeshCmd::Decimate { mesh, ratio }) => commands::mesh_decimate(c, &mesh, ratio),
        Cmd::Mesh(MeshCmd::Stats { mesh, graph, ratio }) => commands::mesh_stats_cmd(c, &mesh, graph.as_deref(), ratio),
        Cmd::Data(DataCmd::Synth) => commands::data_synth(c),
        Cmd::Train { mode, checkpoint, steps } => commands::train(c, mode, checkpoint.as_deref(), steps),
        Cmd::Baseline(BaselineCmd::Lcsvd(LcsvdCmd::Fit)) => commands::lcsvd_fit(c),
        Cmd::Assimilate(args) => commands::assimilate(c, &args),
        Cmd::Evaluate { pred, truth, mesh, sensors } => commands::evaluate(c, &pred, &truth, &mesh, sensors.as_deref()),
        Cmd::Sweep { kind, eval } => commands::sweep(c, kind, &eval),
    }
}

fn fail(e: CliError) -> ExitCode {
    eprintln!("{}", e.to_json());
    ExitCode::from(e.exit_code())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => return fail(CliError::Usage(e.render().to_string().trim().to_string())),
    };
    if let Err(e) = init_logging() {
        return fail(e);
    }
    if cli.common.jobs == 0 {
        return fail(CliError::Usage("--jobs must be at least 1".into()));
    }
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}
