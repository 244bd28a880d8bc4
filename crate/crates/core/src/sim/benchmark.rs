use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::run::{run_scenario, Metrics};
use super::scenario::{make_random_scenario, RandomScenarioParams, ScenarioConfig};
use crate::coordinator::ControllerVariant;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkParams {
    pub seeds: Vec<u64>,
    pub variants: Vec<ControllerVariant>,
    /// Worker threads; 0 picks the number of CPUs.
    pub workers: usize,
    /// Survival-curve bin width, meters.
    pub bin: f64,
}

impl Default for BenchmarkParams {
    fn default() -> Self {
        BenchmarkParams {
            seeds: (0..10).collect(),
            variants: ControllerVariant::ALL.to_vec(),
            workers: 0,
            bin: 0.5,
        }
    }
}

impl BenchmarkParams {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config(
                format!("{prefix}.seeds"),
                "at least one seed is required",
            ));
        }
        if self.variants.is_empty() {
            return Err(Error::config(
                format!("{prefix}.variants"),
                "at least one variant is required",
            ));
        }
        if !(self.bin > 0.0) {
            return Err(Error::config(format!("{prefix}.bin"), "must be > 0 m"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessRow {
    pub variant: String,
    pub n: usize,
    pub successes: usize,
    pub rate: f64,
    /// Space-separated failed seeds.
    pub failed_seeds: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRow {
    pub distance_bin: f64,
    pub variant: String,
    pub surviving_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub seed: u64,
    pub variant: String,
    pub success: bool,
    pub failure_reason: String,
    pub distance_traveled: f64,
    pub min_h_agents: Option<f64>,
    pub min_h_obstacles: Option<f64>,
    pub mean_solve_time: f64,
    pub n_infeasible: u64,
    pub n_fallback: u64,
}

#[derive(Debug, Clone, Default)]
pub struct BenchmarkResult {
    /// Seed-major, variants in the requested order.
    pub runs: Vec<Metrics>,
    pub table: Vec<SuccessRow>,
    pub survival: Vec<SurvivalRow>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

impl BenchmarkResult {
    pub fn run_rows(&self) -> Vec<RunRow> {
        self.runs
            .iter()
            .map(|m| RunRow {
                seed: m.seed,
                variant: m.variant.clone(),
                success: m.success,
                failure_reason: m.failure_reason.clone(),
                distance_traveled: m.distance_traveled,
                min_h_agents: finite(m.min_h_agents),
                min_h_obstacles: finite(m.min_h_obstacles),
                mean_solve_time: m.mean_solve_time,
                n_infeasible: m.n_infeasible,
                n_fallback: m.n_fallback,
            })
            .collect()
    }

    pub fn rate(&self, variant: ControllerVariant) -> Option<f64> {
        self.table
            .iter()
            .find(|r| r.variant == variant.name())
            .map(|r| r.rate)
    }

    /// Writes `success_table.csv`, `runs.csv` and `survival.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_rows(&dir.join("success_table.csv"), &self.table)?;
        write_rows(&dir.join("runs.csv"), &self.run_rows())?;
        write_rows(&dir.join("survival.csv"), &self.survival)?;
        Ok(())
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Fraction of runs still going at each distance bin. A successful run
/// survives every bin.
pub fn survival_curve(
    runs: &[Metrics],
    variants: &[ControllerVariant],
    bin: f64,
) -> Vec<SurvivalRow> {
    let course = runs.iter().map(|m| m.course_length).fold(0.0, f64::max);
    let n_bins = (course / bin).ceil() as usize;
    let mut rows = Vec::new();
    for v in variants {
        let mine: Vec<&Metrics> = runs.iter().filter(|m| m.variant == v.name()).collect();
        if mine.is_empty() {
            continue;
        }
        for b in 0..=n_bins {
            let d = b as f64 * bin;
            let alive = mine
                .iter()
                .filter(|m| m.success || m.distance_traveled >= d)
                .count();
            rows.push(SurvivalRow {
                distance_bin: d,
                variant: v.name().to_string(),
                surviving_fraction: alive as f64 / mine.len() as f64,
            });
        }
    }
    rows
}

pub fn success_table(runs: &[Metrics], variants: &[ControllerVariant]) -> Vec<SuccessRow> {
    variants
        .iter()
        .map(|v| {
            let mine: Vec<&Metrics> = runs.iter().filter(|m| m.variant == v.name()).collect();
            let successes = mine.iter().filter(|m| m.success).count();
            let failed: Vec<String> = mine
                .iter()
                .filter(|m| !m.success)
                .map(|m| m.seed.to_string())
                .collect();
            SuccessRow {
                variant: v.name().to_string(),
                n: mine.len(),
                successes,
                rate: if mine.is_empty() {
                    0.0
                } else {
                    successes as f64 / mine.len() as f64
                },
                failed_seeds: failed.join(" "),
            }
        })
        .collect()
}

/// Runs every variant on the same randomized scenario per seed.
pub fn run_benchmark(
    bench: &BenchmarkParams,
    random: &RandomScenarioParams,
    base: &ScenarioConfig,
) -> Result<BenchmarkResult> {
    bench.validate("benchmark")?;
    random.validate("random")?;
    let scenarios = bench
        .seeds
        .iter()
        .map(|&s| make_random_scenario(s, random, base))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<ScenarioConfig> = scenarios
        .iter()
        .flat_map(|sc| {
            bench.variants.iter().map(move |v| {
                let mut c = sc.clone();
                c.variant = *v;
                c
            })
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(bench.workers)
        .build()
        .map_err(|e| Error::config("benchmark.workers", e.to_string()))?;
    let runs = pool.install(|| {
        jobs.par_iter()
            .map(|c| {
                let (_, m) = run_scenario(c)?;
                log::info!("seed {} {}: {}", m.seed, m.variant, m.failure_reason);
                Ok(m)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(BenchmarkResult {
        table: success_table(&runs, &bench.variants),
        survival: survival_curve(&runs, &bench.variants, bench.bin),
        runs,
    })
}
