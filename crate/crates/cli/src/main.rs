//! `reachnav` command-line driver.
//!
//! Exit status is 0 on success; failures print `error[<category>]: ...` to
//! stderr and exit with the category's code (see [`exit_code`]). Usage
//! errors exit with 2. The `REACHNAV_WORKERS` environment variable sets the
//! worker thread count.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use reachnav::config::RunConfig;
use reachnav::grid::Mode;
use reachnav::heatmap::SceneSpec;
use reachnav::pipeline;
use reachnav::sim::NeighbourStrategy;

const WORKERS_ENV: &str = "REACHNAV_WORKERS";

#[derive(Parser)]
#[command(name = "reachnav", version, about = "Reachability-guided multi-agent navigation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Instance {
    /// Decentralized navigation value over the local observation.
    Swarm,
    /// Single agent on a line; small enough for the grid oracle.
    Line,
}

#[derive(Clone, Copy, ValueEnum)]
enum GridMode {
    Vi,
    Epigraph,
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    Value,
    Nearest,
    Random,
}

impl From<Strategy> for NeighbourStrategy {
    fn from(s: Strategy) -> Self {
        match s {
            Strategy::Value => NeighbourStrategy::Value,
            Strategy::Nearest => NeighbourStrategy::Nearest,
            Strategy::Random => NeighbourStrategy::Random,
        }
    }
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (TOML). Documented defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; defaults to the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the auxiliary (epigraph) value network.
    TrainEpigraph {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "swarm")]
        instance: Instance,
    },
    /// Train the pairwise safety value network.
    TrainSafety {
        #[command(flatten)]
        common: Common,
    },
    /// Solve a grid oracle and save its t = 0 slice.
    SolveGrid {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: GridMode,
    },
    /// Compare a trained network with a grid dump.
    Validate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        grid: PathBuf,
    },
    /// Run a batch of closed-loop scenarios.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Directory holding epigraph.ckpt and safety.ckpt; defaults to the output directory.
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        n_agents: Option<usize>,
        #[arg(long, value_enum)]
        strategy: Option<Strategy>,
        /// Comma-separated seeds; defaults to the config's seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Emit a value heatmap over ego position for a fixed scene.
    Heatmap {
        #[command(flatten)]
        common: Common,
        /// Epigraph checkpoint; defaults to <out>/epigraph.ckpt.
        #[arg(long)]
        net: Option<PathBuf>,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 50)]
        res: usize,
    },
    /// Summarise the simulation reports found in a directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

/// Exit status per library error category.
fn exit_code(category: &str) -> u8 {
    match category {
        "config" => 3,
        "validation" => 4,
        "dependency" => 5,
        "checkpoint" => 6,
        "numerical" => 7,
        "grid" => 8,
        "scenario" => 9,
        "io" => 10,
        _ => 1,
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn out_dir(common: &Common, cfg: &RunConfig) -> PathBuf {
    common.out.clone().unwrap_or_else(|| cfg.output_dir.clone())
}

fn workers_from_env() -> Result<Option<usize>> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => Ok(Some(
            v.trim()
                .parse()
                .map_err(|_| reachnav::Error::Validation(format!("{WORKERS_ENV} must be a positive integer, got '{v}'")))?,
        )),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<()> {
    pipeline::configure_workers(workers_from_env()?)?;
    match cli.command {
        Command::TrainEpigraph { common, instance } => {
            let cfg = load_config(common.config.as_deref())?;
            let out = out_dir(&common, &cfg);
            let (_, log) = match instance {
                Instance::Swarm => pipeline::train_epigraph_stage(&cfg, &out)?,
                Instance::Line => pipeline::train_line_stage(&cfg, &out)?,
            };
            if let Some(last) = log.entries.last() {
                println!("final loss {:.6e} after {} iterations", last.loss, last.iteration + 1);
            }
        }
        Command::TrainSafety { common } => {
            let cfg = load_config(common.config.as_deref())?;
            let (_, log) = pipeline::train_safety_stage(&cfg, &out_dir(&common, &cfg))?;
            if let Some(last) = log.entries.last() {
                println!("final loss {:.6e} after {} iterations", last.loss, last.iteration + 1);
            }
        }
        Command::SolveGrid { common, mode } => {
            let cfg = load_config(common.config.as_deref())?;
            let mode = match mode {
                GridMode::Vi => Mode::Vi,
                GridMode::Epigraph => Mode::Epigraph,
            };
            let field = pipeline::solve_grid_stage(&cfg, mode, &out_dir(&common, &cfg))?;
            println!("solved {} nodes", field.len());
        }
        Command::Validate { common, net, grid } => {
            let cfg = load_config(common.config.as_deref())?;
            let report = pipeline::validate_stage(&cfg, &net, &grid, &out_dir(&common, &cfg))?;
            let c = &report.comparison;
            println!(
                "{}: sign agreement {:.4}, MAE {:.4} on {} of {} points",
                report.kind, c.sign_agreement, c.mae_confident, c.n_confident, c.n_points
            );
            if let Some(b) = &report.budget {
                println!("budget agreement {}/{} (max diff {:.4})", b.n_agree, b.n_probes, b.max_abs_diff);
            }
        }
        Command::Simulate {
            common,
            models,
            n_agents,
            strategy,
            seeds,
        } => {
            let cfg = load_config(common.config.as_deref())?;
            let out = out_dir(&common, &cfg);
            let models_dir = models.unwrap_or_else(|| out.clone());
            let models = pipeline::load_models(&cfg, &models_dir)?;
            let seeds = if seeds.is_empty() { cfg.seeds.clone() } else { seeds };
            let report = pipeline::simulate_stage(
                &cfg,
                &models,
                n_agents.unwrap_or(cfg.simulation.n_agents),
                strategy.map(Into::into).unwrap_or(cfg.simulation.strategy),
                &seeds,
                &out,
            )?;
            if let Some(m) = &report.overall {
                println!(
                    "safety rate {:.4}, safe scenarios {:.4}, cost {}",
                    m.safety_rate,
                    m.safe_scenario_rate,
                    m.cumulative_cost.map_or("undefined".to_string(), |c| format!("{c:.4}"))
                );
            }
            if !report.failures.is_empty() {
                eprintln!("{} scenario(s) failed; see report.toml", report.failures.len());
            }
        }
        Command::Heatmap { common, net, scene, res } => {
            let cfg = load_config(common.config.as_deref())?;
            let out = out_dir(&common, &cfg);
            let net = net.unwrap_or_else(|| out.join(pipeline::EPIGRAPH_CKPT));
            let model = pipeline::load_model(&net)?;
            let scene = SceneSpec::load(&scene)?;
            let path = pipeline::heatmap_stage(&cfg, &model, &scene, res, &out)?;
            println!("wrote {}", path.display());
        }
        Command::Report { input } => {
            let found = pipeline::report_stage(&input).with_context(|| format!("summarising {}", input.display()))?;
            for (name, r) in &found {
                if let Some(m) = &r.overall {
                    println!(
                        "{name}: {} agents, {} strategy, safety rate {:.4}, safe scenarios {:.4}",
                        r.n_agents,
                        r.strategy.name(),
                        m.safety_rate,
                        m.safe_scenario_rate
                    );
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.downcast_ref::<reachnav::Error>().map_or("internal", |e| e.category());
            eprintln!("error[{category}]: {e:#}");
            ExitCode::from(exit_code(category))
        }
    }
}
