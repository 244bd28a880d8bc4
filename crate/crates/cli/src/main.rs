use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dnmpc_core::config::RunConfigFile;
use dnmpc_core::coordinator::ControllerVariant;
use dnmpc_core::planner::{plan_reference, write_path_csv};
use dnmpc_core::sim::{output_names, run_benchmark, run_scenario};
use nalgebra::Vector2;

/// Distributed HOCBF-constrained NMPC for quadruped teams.
#[derive(Parser)]
#[command(name = "dnmpc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one scenario; writes the per-tick log CSV and a metrics JSON.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = parse_variant)]
        variant: Option<ControllerVariant>,
    },
    /// Paired randomized runs over seeds and variants.
    Benchmark {
        #[command(flatten)]
        common: Common,
        /// Number of seeds, counted from `--seed`.
        #[arg(long)]
        n: Option<u64>,
        /// First seed when `--n` is given.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated variant names.
        #[arg(long, value_delimiter = ',', value_parser = parse_variant)]
        variants: Option<Vec<ControllerVariant>>,
        /// Worker threads; 0 uses every logical core.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run the global planner only; writes waypoint and path CSVs per agent.
    Plan {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "DNMPC_OUT_DIR")]
    out_dir: Option<PathBuf>,
    /// Log every SQP iteration.
    #[arg(long)]
    debug_solver: bool,
}

fn parse_variant(s: &str) -> std::result::Result<ControllerVariant, String> {
    ControllerVariant::parse(s).ok_or_else(|| {
        let names: Vec<&str> = ControllerVariant::ALL.iter().map(|v| v.name()).collect();
        format!(
            "unknown variant `{s}`; expected one of {}",
            names.join(", ")
        )
    })
}

impl Common {
    fn load(&self) -> Result<(RunConfigFile, PathBuf)> {
        let cfg = match &self.config {
            Some(p) => {
                RunConfigFile::load(p).with_context(|| format!("loading {}", p.display()))?
            }
            None => RunConfigFile::default(),
        };
        let out = self
            .out_dir
            .clone()
            .unwrap_or_else(|| cfg.output.dir.clone());
        init_logging(&cfg, self.debug_solver);
        Ok((cfg, out))
    }
}

fn init_logging(cfg: &RunConfigFile, debug_solver: bool) {
    let mut b = env_logger::Builder::new();
    b.parse_filters(cfg.output.verbosity.as_filter());
    if debug_solver {
        b.parse_filters("dnmpc_core::solver=trace");
    }
    if let Ok(env) = std::env::var("RUST_LOG") {
        b.parse_filters(&env);
    }
    let _ = b.try_init();
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn cmd_run(common: &Common, seed: Option<u64>, variant: Option<ControllerVariant>) -> Result<()> {
    let (cfg, out) = common.load()?;
    let mut scenario = cfg.scenario_for(seed.unwrap_or(cfg.scenario.seed))?;
    if let Some(v) = variant {
        scenario.variant = v;
    }
    scenario.validate()?;
    let (log, metrics) = run_scenario(&scenario)?;
    create_dir(&out)?;
    let (csv_name, json_name) = output_names(metrics.seed, &metrics.variant);
    log.write_csv(&out.join(&csv_name))?;
    metrics.write_json(&out.join(&json_name))?;
    println!(
        "{} seed {}: {} after {:.2} m ({} ticks); wrote {} and {}",
        metrics.variant,
        metrics.seed,
        if metrics.success {
            "success"
        } else {
            metrics.failure_reason.as_str()
        },
        metrics.distance_traveled,
        metrics.n_ticks,
        out.join(csv_name).display(),
        out.join(json_name).display(),
    );
    Ok(())
}

fn cmd_benchmark(
    common: &Common,
    n: Option<u64>,
    first_seed: u64,
    variants: Option<Vec<ControllerVariant>>,
    workers: Option<usize>,
) -> Result<()> {
    let (cfg, out) = common.load()?;
    let mut bench = cfg.benchmark.clone();
    if let Some(n) = n {
        if n == 0 {
            bail!("--n must be at least 1");
        }
        bench.seeds = (first_seed..first_seed + n).collect();
    }
    if let Some(v) = variants {
        bench.variants = v;
    }
    if let Some(w) = workers {
        bench.workers = w;
    }
    let random = cfg.random.clone().unwrap_or_default();
    let result = run_benchmark(&bench, &random, &cfg.scenario)?;
    result.write(&out)?;
    for row in &result.table {
        println!(
            "{:<15} {:>3}/{:<3} {:.3}",
            row.variant, row.successes, row.n, row.rate
        );
    }
    println!(
        "wrote success_table.csv, runs.csv and survival.csv to {}",
        out.display()
    );
    Ok(())
}

fn cmd_plan(common: &Common, seed: Option<u64>) -> Result<()> {
    let (cfg, out) = common.load()?;
    let scenario = cfg.scenario_for(seed.unwrap_or(cfg.scenario.seed))?;
    let obstacles = scenario.planner_obstacles();
    create_dir(&out)?;
    for (i, a) in scenario.agents.iter().enumerate() {
        let start = Vector2::new(a.start[0], a.start[1]);
        let goal = Vector2::new(a.goal[0], a.goal[1]);
        let (raw, smooth, _) = plan_reference(
            &start,
            &goal,
            &obstacles,
            &scenario.planner,
            scenario.speed,
            scenario.mpc.ts,
            scenario.model.standing_height,
        )
        .with_context(|| format!("planning agent {i}"))?;
        write_path_csv(&raw.waypoints, &out.join(format!("waypoints_agent{i}.csv")))?;
        write_path_csv(&smooth, &out.join(format!("path_agent{i}.csv")))?;
        println!(
            "agent {i}: {} waypoints, cost {:.3} m, {} path points",
            raw.waypoints.len(),
            raw.cost,
            smooth.len()
        );
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Run {
            common,
            seed,
            variant,
        } => cmd_run(common, *seed, *variant),
        Command::Benchmark {
            common,
            n,
            seed,
            variants,
            workers,
        } => cmd_benchmark(common, *n, *seed, variants.clone(), *workers),
        Command::Plan { common, seed } => cmd_plan(common, *seed),
    }
}
