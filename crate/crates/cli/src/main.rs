mod commands;
mod config;
mod fail;
mod plot;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::bail;
use clap::{Parser, Subcommand, ValueEnum};

use commands::AblateParam;
use config::{Reference, RunConfig, ScoreMethod};
use fail::Fail;
use run::{runs_root, Run};

#[derive(Parser)]
#[command(name = "distillkit", version, about = "Difficulty-aware dataset distillation")]
struct Cli {
    /// Run config (JSON). Without it, the stored config of `--name` is used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run name; overrides the config's `name`.
    #[arg(long, global = true)]
    name: Option<String>,
    /// Top-level seed; every other seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum BudgetArg {
    Full,
    Few,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate or import the train and test sets.
    GenData,
    /// Score every training sample by difficulty.
    Score {
        #[arg(long)]
        method: Option<ScoreMethod>,
        /// Score file for `--method import`.
        #[arg(long)]
        path: Option<PathBuf>,
    },
    /// Train expert trajectories.
    Expert {
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate window-selected subsets over a grid of start positions.
    SweepWindow {
        #[arg(long, value_delimiter = ',')]
        betas: Option<Vec<f64>>,
        #[arg(long, value_enum, default_value = "full")]
        budget: BudgetArg,
    },
    /// Build the initial synthetic set from the difficulty window.
    Select {
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        ipc: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Run trajectory-matching distillation.
    Distill {
        #[arg(long)]
        resume: bool,
        /// Start from this synthetic set instead of initializing.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Train fresh networks on a reduced set and test them.
    Eval {
        /// A synthetic-set file, or one of `synthetic`, `full`, `window`, `random`.
        #[arg(long, default_value = "synthetic")]
        input: String,
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Feature-space coverage of a synthetic set or of distillation checkpoints.
    Coverage {
        #[arg(long)]
        input: Option<PathBuf>,
        /// Checkpoint directory (default: the run's checkpoints).
        #[arg(long, num_args = 0..=1)]
        timeline: Option<Option<PathBuf>>,
        #[arg(long, value_enum)]
        reference: Option<Reference>,
        /// Also dump the feature vectors.
        #[arg(long)]
        features: bool,
    },
    /// Per-partition gradient norms while training on a synthetic set.
    GradNorms {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
    },
    /// Distill and evaluate once per value of one parameter.
    Ablate {
        #[arg(long, value_enum)]
        param: AblateParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Charts and merged tables from a run's CSV outputs.
    Report {
        #[arg(long, num_args = 1..)]
        inputs: Vec<PathBuf>,
        /// Combine inputs from different configs.
        #[arg(long)]
        force: bool,
    },
}

fn base_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    match (&cli.config, &cli.name) {
        (Some(p), _) => config::load(p),
        (None, Some(name)) => {
            let stored = runs_root().join(name).join("config.json");
            if !stored.exists() {
                bail!(Fail::missing(format!("no run named {name:?}; pass --config")));
            }
            config::load(&stored)
        }
        (None, None) => bail!(Fail::config("pass --config or --name")),
    }
}

fn open(cli: &Cli) -> anyhow::Result<Run> {
    let mut cfg = base_config(cli)?;
    if let Some(n) = &cli.name {
        cfg.name = n.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match &cli.cmd {
        Cmd::Score { method, path } => {
            if let Some(m) = method {
                cfg.scores.method = *m;
            }
            if let Some(p) = path {
                cfg.scores.import_path = Some(p.clone());
            }
        }
        Cmd::Expert { seeds, epochs } => {
            if let Some(k) = seeds {
                cfg.experts.count = *k;
            }
            if let Some(t) = epochs {
                cfg.experts.train.epochs = *t;
            }
        }
        _ => {}
    }
    cfg.derive_seeds();
    Run::open(cfg, &runs_root())
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            bail!(Fail::config("--jobs must be positive"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(j).build_global()?;
    }
    let run = open(&cli)?;
    match cli.cmd {
        Cmd::GenData => commands::gen_data(&run),
        Cmd::Score { .. } => commands::score(&run),
        Cmd::Expert { .. } => commands::expert(&run),
        Cmd::SweepWindow { betas, budget } => commands::sweep_window(&run, betas, matches!(budget, BudgetArg::Few)),
        Cmd::Select { beta, ipc, alpha } => commands::select(&run, beta, ipc, alpha),
        Cmd::Distill { resume, init } => commands::distill(&run, resume, init),
        Cmd::Eval { input, seeds } => commands::eval(&run, &input, seeds),
        Cmd::Coverage {
            input,
            timeline,
            reference,
            features,
        } => commands::coverage(&run, input, timeline, reference, features),
        Cmd::GradNorms { input, epochs, seeds } => commands::grad_norms(&run, input, epochs, seeds),
        Cmd::Ablate { param, values } => commands::ablate(&run, param, &values),
        Cmd::Report { inputs, force } => commands::report(&run, inputs, force),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(fail::exit_code(&e) as u8)
        }
    }
}
