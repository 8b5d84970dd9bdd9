mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use dynatreat::actor_critic::SharingMode;
use dynatreat::dp::TimeGrid;
use dynatreat::eval::{compare, evaluate_welfare, selectivity_stats};
use dynatreat::pipeline::{DataSource, PipelineConfig};
use dynatreat::Error;

use stages::{write_json, Stage, StageError, Workspace};

#[derive(Parser, Debug)]
#[command(name = "dynatreat", version, about = "Learn dynamic treatment-allocation policies under a budget")]
struct Cli {
    /// Pipeline configuration (JSON). Defaults to the synthetic instance.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Training worker threads.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Single-writer training with a fixed worker order (reproducible).
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset and its ground truth.
    Synth {
        #[arg(long)]
        n: Option<usize>,
    },
    /// Cross-fitted doubly-robust rewards.
    Estimate,
    /// k-median clusters of the covariates.
    Cluster {
        #[arg(long)]
        k: Option<usize>,
    },
    /// Seasonal Poisson arrival rates per cluster.
    Rates,
    /// Actor-critic training of the dynamic policy.
    Train {
        #[arg(long)]
        alpha_theta: Option<f64>,
        #[arg(long)]
        alpha_v: Option<f64>,
        #[arg(long)]
        updates: Option<u64>,
    },
    /// Welfare of a policy relative to the random 50% policy.
    Evaluate {
        /// Policy JSON file or one of trained, deterministic, static,
        /// random, nobody, everyone.
        #[arg(long)]
        policy: Option<String>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Paired comparison of two policies on common random numbers.
    Compare {
        #[arg(long)]
        a: Option<String>,
        #[arg(long)]
        b: Option<String>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Rejections preceding each treatment, by month and budget decile.
    Selectivity {
        #[arg(long)]
        policy: Option<String>,
        #[arg(long)]
        sims: Option<usize>,
    },
    /// Grid value of the trained policy.
    DpSolve {
        /// `deterministic` or a number of uniform time intervals.
        #[arg(long, default_value = "200")]
        grid: String,
    },
    /// Run every stage, skipping those already complete.
    Pipeline {
        /// Rerun every stage.
        #[arg(long)]
        force: bool,
    },
}

/// Failure with the process exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Validation(_) | Error::Json(_) | Error::Csv(_) => 2,
            Error::Divergence { .. } | Error::NonFinite(_) => 3,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<StageError> for Failure {
    fn from(e: StageError) -> Self {
        let message = e.to_string();
        Failure { message, ..Failure::from(e.error) }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let s = std::fs::read_to_string(p).map_err(|e| Failure { code: 2, message: format!("cannot read {}: {e}", p.display()) })?;
            let mut cfg = PipelineConfig::from_json(&s)?;
            // Relative data paths are relative to the config file.
            if let DataSource::Csv { path, .. } = &mut cfg.data {
                if let Some(dir) = p.parent().filter(|_| PathBuf::from(&*path).is_relative()) {
                    *path = dir.join(&*path).to_string_lossy().into_owned();
                }
            }
            cfg
        }
        None => PipelineConfig::synthetic(9223, 0),
    };
    if let Some(seed) = cli.seed {
        cfg.reseed(seed);
    }
    if let Some(w) = cli.workers {
        cfg.train.workers = w;
    }
    if cli.deterministic {
        cfg.train.mode = SharingMode::SingleWriter;
    }
    match &cli.command {
        Command::Synth { n: Some(n) } => match &mut cfg.data {
            DataSource::Synth { spec } => spec.n = *n,
            DataSource::Csv { .. } => return Err(Failure { code: 2, message: "--n applies to synthetic data sources only".into() }),
        },
        Command::Cluster { k: Some(k) } => cfg.clusters = *k,
        Command::Train { alpha_theta, alpha_v, updates } => {
            if let Some(a) = alpha_theta {
                cfg.train.alpha_theta = *a;
            }
            if let Some(a) = alpha_v {
                cfg.train.alpha_v = *a;
            }
            if let Some(u) = updates {
                cfg.train.max_updates = *u;
            }
        }
        Command::Evaluate { episodes: Some(e), .. } | Command::Compare { episodes: Some(e), .. } => cfg.eval.episodes = *e,
        Command::Selectivity { sims: Some(s), .. } => cfg.eval.selectivity_sims = *s,
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Run the stages that the named policies are read from.
fn prerequisites(ws: &mut Workspace, policies: &[&str]) -> Result<(), StageError> {
    ws.run_until(Stage::Static)?;
    if policies.iter().any(|p| matches!(*p, "trained" | "deterministic")) {
        ws.run_until(Stage::Train)?;
    }
    Ok(())
}

fn print(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).unwrap_or_default());
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    let mut ws = Workspace::open(&cli.out, cfg)?;
    let seed = ws.config.seed;
    let episodes = ws.config.eval.episodes;
    let result = match &cli.command {
        Command::Synth { .. } => ws.run_until(Stage::Data),
        Command::Estimate => ws.run_until(Stage::Estimate),
        Command::Cluster { .. } => ws.run_until(Stage::Cluster),
        Command::Rates => ws.run_until(Stage::Rates),
        Command::Train { .. } => ws.run_until(Stage::Train),
        Command::Evaluate { policy: None, .. } => ws.run_until(Stage::Evaluate),
        Command::Compare { a: None, b: None, .. } => ws.run_until(Stage::Compare),
        Command::Selectivity { policy: None, .. } => ws.run_until(Stage::Selectivity),
        Command::Evaluate { policy: Some(p), .. } | Command::Selectivity { policy: Some(p), .. } => prerequisites(&mut ws, &[p]),
        Command::Compare { a, b, .. } => prerequisites(&mut ws, &[a.as_deref().unwrap_or("trained"), b.as_deref().unwrap_or("static")]),
        Command::DpSolve { .. } => ws.run_until(Stage::Train),
        Command::Pipeline { force: false } => ws.run_all(),
        Command::Pipeline { force: true } => Stage::ALL.iter().try_for_each(|s| ws.run_stage(*s, true)),
    };
    for line in &ws.log {
        eprintln!("{line}");
    }
    result?;

    match &cli.command {
        Command::Evaluate { policy: Some(p), .. } => {
            let env = ws.environment()?;
            let choice = ws.policy_choice(p)?;
            let r = evaluate_welfare(&*choice.as_policy(), &env, episodes, seed)?;
            let path = ws.path("eval_custom.json");
            write_json(&path, &r)?;
            print(&json!({ "policy": p, "report": path, "mean_welfare": r.mean_welfare, "relative_welfare": r.relative_welfare }));
        }
        Command::Compare { a, b, .. } if a.is_some() || b.is_some() => {
            let env = ws.environment()?;
            let (a, b) = (a.as_deref().unwrap_or("trained"), b.as_deref().unwrap_or("static"));
            let (pa, pb) = (ws.policy_choice(a)?, ws.policy_choice(b)?);
            let r = compare(&*pa.as_policy(), &*pb.as_policy(), &env, episodes, seed)?;
            let path = ws.path("compare_custom.json");
            write_json(&path, &json!({ "a": a, "b": b, "report": r }))?;
            print(&json!({ "report": path, "difference": r.difference, "ci_halfwidth": r.ci_halfwidth, "ratio": r.ratio }));
        }
        Command::Selectivity { policy: Some(p), .. } => {
            let env = ws.environment()?;
            let r = selectivity_stats(&*ws.policy_choice(p)?.as_policy(), &env, ws.config.eval.selectivity_sims, seed)?;
            let path = ws.path("selectivity_custom.json");
            write_json(&path, &r)?;
            print(&json!({ "report": path, "events": r.events }));
        }
        Command::DpSolve { grid } => {
            let g = match grid.as_str() {
                "deterministic" => TimeGrid::Deterministic,
                m => TimeGrid::Uniform(m.parse().map_err(|_| Failure { code: 2, message: format!("invalid --grid {m:?}") })?),
            };
            let path = ws.dp_solve(g)?;
            print(&json!({ "value_grid": path }));
        }
        _ => print(&json!({ "out": ws.dir, "stages": ws.log })),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
