//! Closed-loop simulation: plant, scenarios, single runs and benchmarks.

mod benchmark;
mod plant;
mod run;
mod scenario;

pub use benchmark::{
    run_benchmark, success_table, survival_curve, BenchmarkParams, BenchmarkResult, RunRow,
    SuccessRow, SurvivalRow,
};
pub use plant::{integrate_plant, PlantParams, Wrench};
pub use run::{output_names, run_scenario, FailureReason, Metrics, SimLog, TickRecord};
pub use scenario::{
    make_random_scenario, AgentSpec, Push, RandomScenarioParams, ScenarioConfig, TerrainParams,
};
