//! `madiff`: data generation, MaskNet training, editing, evaluation and
//! diagnostics for desk-scale mask-guided diffusion editing.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use madiff_core::datagen::TaskType;
use madiff_core::editor::MaskSource;

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(
    name = "madiff",
    version,
    about = "Mask-guided diffusion editing of synthetic fashion images"
)]
pub struct Cli {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for task-level parallelism.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// More log output; repeat for trace level.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset: training triples and evaluation tasks.
    GenData(GenDataArgs),
    /// Train MaskNet on a generated dataset.
    TrainMasknet(TrainArgs),
    /// Edit one image towards a prompt.
    Edit(EditArgs),
    /// Benchmark the editor on evaluation tasks.
    Eval(EvalArgs),
    /// Compare MaskNet and attention processor on/off variants.
    Ablate(AblateArgs),
    /// Average attention over successful and failed edits.
    AttnStats(AttnStatsArgs),
    /// Inversion followed by sampling; fails when the reconstruction error is too large.
    Roundtrip(RoundtripArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::TrainMasknet(_) => "train-masknet",
            Command::Edit(_) => "edit",
            Command::Eval(_) => "eval",
            Command::Ablate(_) => "ablate",
            Command::AttnStats(_) => "attn-stats",
            Command::Roundtrip(_) => "roundtrip",
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
    /// Training triples.
    #[arg(long)]
    pub train: Option<usize>,
    /// Evaluation tasks per task type.
    #[arg(long)]
    pub eval: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "masknet")]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    /// Input PNG (16×16, or 64×64 display size).
    #[arg(long, requires = "prompt", conflicts_with_all = ["data", "task"])]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub prompt: Option<String>,
    /// Dataset directory holding `--task`.
    #[arg(long, requires = "task")]
    pub data: Option<PathBuf>,
    #[arg(long, requires = "data")]
    pub task: Option<String>,
    #[arg(long)]
    pub mask_source: Option<MaskSource>,
    /// MaskNet checkpoint.
    #[arg(long)]
    pub masknet: Option<PathBuf>,
    #[arg(long)]
    pub noise_level: Option<f64>,
    #[arg(long)]
    pub no_attention_processor: bool,
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TaskSelection {
    /// Dataset directory; tasks are generated from the seed when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Restrict to one task type.
    #[arg(long)]
    pub tasks: Option<TaskType>,
    /// MaskNet checkpoint; trained in-process when absent and needed.
    #[arg(long)]
    pub masknet: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub select: TaskSelection,
    /// Use at most this many tasks.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub mask_source: Option<MaskSource>,
    #[arg(long, default_value = "eval")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub select: TaskSelection,
    /// Number of seeded tasks.
    #[arg(long, default_value_t = 50)]
    pub seeds: usize,
    #[arg(long, default_value = "ablation")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AttnStatsArgs {
    /// Run directories written by `edit --data`; a noise-level sweep runs
    /// when none are given.
    #[arg(long, num_args = 1..)]
    pub runs: Vec<PathBuf>,
    #[command(flatten)]
    pub select: TaskSelection,
    /// Tasks per noise level in sweep mode.
    #[arg(long, default_value_t = 20)]
    pub limit: usize,
    /// Comma-separated noise levels for the sweep.
    #[arg(long, value_delimiter = ',')]
    pub noise_levels: Option<Vec<f64>>,
    #[arg(long, default_value = "attn-stats")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RoundtripArgs {
    /// Effective DDIM steps; repeat or comma-separate for several.
    #[arg(long, value_delimiter = ',', default_value = "50")]
    pub steps: Vec<usize>,
    #[arg(long, default_value = "roundtrip")]
    pub out: PathBuf,
}

/// A result check failed; exits with status 1.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "check failed: {}", self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn exit_code(e: &anyhow::Error) -> u8 {
    use madiff_core::Error as E;
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<E>() {
            return match err.root() {
                E::Io { .. } => 2,
                E::Format(_) | E::Configuration(_) | E::Parameter(_) => 3,
                _ => 1,
            };
        }
        if cause.is::<std::io::Error>() {
            return 2;
        }
        if cause.is::<toml::de::Error>() {
            return 3;
        }
    }
    1
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = Some(j);
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(3);
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let run = || -> anyhow::Result<()> {
        let cfg = load_config(&cli)?;
        if let Some(n) = cfg.jobs {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()?;
        }
        commands::run(&cli.command, cfg)
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
