//! `dosing`: one subcommand per pipeline stage plus the study service.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use dosing_core::cohort::{ingest_cohort, Format};
use dosing_core::pipeline::{self, Layout, RunConfig};
use dosing_core::study::{design_study, BaselineActions};
use dosing_shadow::{AppState, Store, Study};

#[derive(Parser)]
#[command(name = "dosing", version, about = "Batch RL for vasopressor and fluid dosing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Run directory holding every stage's inputs and outputs.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a cohort with the scripted clinicians.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Number of admissions.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Validate a trajectory file, split it, and fit the preprocessor.
    Ingest {
        #[command(flatten)]
        common: Common,
        /// JSON-lines or CSV trajectory file; defaults to the run's cohort.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        n_test: Option<usize>,
    },
    /// Fit the history encoder and observation model.
    TrainState {
        #[command(flatten)]
        common: Common,
    },
    /// Fit the behavior-policy model.
    TrainBehavior {
        #[command(flatten)]
        common: Common,
    },
    /// Train the actor-critic with tree-search targets.
    TrainPolicy {
        #[command(flatten)]
        common: Common,
        /// Draw learning rates from the tuning ranges for this trial.
        #[arg(long)]
        trial: Option<u64>,
    },
    /// Off-policy evaluation and simulator ground truth.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        rollouts: Option<usize>,
    },
    /// Score a study log against recorded, baseline, and model doses.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        baseline_actions: PathBuf,
        /// Score both drugs with one 2-D density.
        #[arg(long)]
        joint: bool,
    },
    /// Run the study service.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Held-out cohort; defaults to the run's test split.
        #[arg(long)]
        cohort: Option<PathBuf>,
        /// Defaults to the run's full-model policy.
        #[arg(long)]
        policy_checkpoint: Option<PathBuf>,
        #[arg(long)]
        baseline_actions: Option<PathBuf>,
        /// Study log; defaults to `study_log.jsonl` in the run directory.
        #[arg(long)]
        log: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    match &common.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn serve(
    common: &Common,
    config: &RunConfig,
    port: u16,
    host: &str,
    cohort: Option<&Path>,
    policy: Option<&Path>,
    baseline: Option<&Path>,
    log: Option<&Path>,
) -> Result<()> {
    let layout = Layout::new(&common.out);
    pipeline::echo_config(&layout, "serve", config, common.seed)?;
    let cohort_path = cohort.map(Path::to_path_buf).unwrap_or_else(|| layout.test());
    let cohort = ingest_cohort(&cohort_path, Some(Format::from_path(&cohort_path)))
        .with_context(|| format!("reading {}", cohort_path.display()))?;
    let design = design_study(&cohort, &config.study)?;
    let recommender = match policy {
        Some(p) => Some(pipeline::load_recommender_with(&layout, p)?),
        None => pipeline::load_recommender(&layout)
            .map_err(|e| tracing::warn!("serving without model doses: {e}"))
            .ok(),
    };
    let baseline = match baseline {
        Some(p) => Some(BaselineActions::from_csv(std::fs::File::open(p)?)?),
        None => None,
    };
    let log = log.map(Path::to_path_buf).unwrap_or_else(|| layout.path("study_log.jsonl"));
    let store = Store::open(
        Study {
            design,
            baseline,
            recommender,
            joint: config.study.joint,
        },
        &log,
    )?;
    let addr: SocketAddr = format!("{host}:{port}").parse().context("bad host or port")?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(dosing_shadow::serve(AppState::new(store), addr))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { common, n } => {
            let mut config = load_config(&common)?;
            if let Some(n) = n {
                config.n_admissions = n;
            }
            let c = pipeline::run_simulate(&config, common.seed, &Layout::new(&common.out))?;
            println!("simulated {} admissions ({} steps)", c.len(), c.total_steps());
        }
        Command::Ingest { common, input, n_test } => {
            let mut config = load_config(&common)?;
            if let Some(n) = n_test {
                config.n_test = n;
            }
            let p = pipeline::run_ingest(&config, common.seed, input.as_deref(), &Layout::new(&common.out))?;
            println!("train {} admissions, test {}", p.train.len(), p.test.len());
        }
        Command::TrainState { common } => {
            pipeline::run_train_state(&load_config(&common)?, common.seed, &Layout::new(&common.out))?;
        }
        Command::TrainBehavior { common } => {
            pipeline::run_train_behavior(&load_config(&common)?, common.seed, &Layout::new(&common.out))?;
        }
        Command::TrainPolicy { common, trial } => {
            let mut config = load_config(&common)?;
            if let Some(t) = trial {
                config.apply_trial(common.seed, t);
            }
            pipeline::run_train_policy(&config, common.seed, &Layout::new(&common.out))?;
        }
        Command::Evaluate { common, rollouts } => {
            let mut config = load_config(&common)?;
            if let Some(r) = rollouts {
                config.evaluation.rollouts = r;
            }
            let ev = pipeline::run_evaluate(&config, common.seed, &Layout::new(&common.out))?;
            print!("{}", ev.ope.to_tsv());
            if let Some(tv) = ev.true_values {
                print!("{}", tv.to_tsv());
            }
        }
        Command::Score {
            common,
            log,
            baseline_actions,
            joint,
        } => {
            let mut config = load_config(&common)?;
            config.study.joint |= joint;
            let t = pipeline::run_score(&config, common.seed, &Layout::new(&common.out), &log, &baseline_actions)?;
            print!("{}", t.to_tsv());
        }
        Command::Serve {
            common,
            port,
            host,
            cohort,
            policy_checkpoint,
            baseline_actions,
            log,
        } => {
            let config = load_config(&common)?;
            serve(
                &common,
                &config,
                port,
                &host,
                cohort.as_deref(),
                policy_checkpoint.as_deref(),
                baseline_actions.as_deref(),
                log.as_deref(),
            )?;
        }
    }
    Ok(())
}

fn main() {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
