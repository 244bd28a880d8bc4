use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::plant::PlantParams;
use crate::coordinator::{ControllerConfig, ControllerVariant, MpcParams};
use crate::error::{Error, Result};
use crate::hocbf::SafetyParams;
use crate::nmpc::{CostParams, SolverParams};
use crate::planner::{astar, map_for, PlannerParams};
use crate::srb::{ContactSchedule, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    /// xy start, meters.
    pub start: [f64; 2],
    /// xy goal, meters.
    pub goal: [f64; 2],
}

/// Constant world-frame force on one agent over `[start, start + duration)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Push {
    pub agent: usize,
    /// Seconds.
    pub start: f64,
    /// Seconds.
    pub duration: f64,
    /// Newtons.
    pub force: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TerrainParams {
    /// Radius of the per-tick random force ball, N.
    pub force: f64,
    /// Radius of the per-tick random torque ball, N·m.
    pub torque: f64,
}

impl Default for TerrainParams {
    fn default() -> Self {
        TerrainParams {
            force: 0.0,
            torque: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub variant: ControllerVariant,
    pub agents: Vec<AgentSpec>,
    /// True obstacle centers, seen by the controllers, meters.
    pub obstacles: Vec<[f64; 2]>,
    /// Obstacle centers used by the planner; the true ones when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub believed_obstacles: Option<Vec<[f64; 2]>>,
    pub pushes: Vec<Push>,
    pub terrain: TerrainParams,
    /// Reference speed, m/s.
    pub speed: f64,
    /// Extra time allowed beyond the longest reference, seconds.
    pub time_margin: f64,
    /// An agent has arrived once its progress along the start-goal line comes
    /// within this distance of the course length, meters.
    pub goal_tolerance: f64,
    pub mpc: MpcParams,
    pub model: ModelParams,
    pub gait: ContactSchedule,
    pub cost: CostParams,
    pub safety: SafetyParams,
    pub solver: SolverParams,
    pub planner: PlannerParams,
    pub plant: PlantParams,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 0,
            variant: ControllerVariant::CbfDnmpc,
            agents: vec![
                AgentSpec {
                    start: [0.0, 0.5],
                    goal: [10.0, 0.5],
                },
                AgentSpec {
                    start: [0.0, -0.5],
                    goal: [10.0, -0.5],
                },
            ],
            obstacles: Vec::new(),
            believed_obstacles: None,
            pushes: Vec::new(),
            terrain: TerrainParams::default(),
            speed: 1.0,
            time_margin: 10.0,
            goal_tolerance: 0.3,
            mpc: MpcParams::default(),
            model: ModelParams::default(),
            gait: ContactSchedule::default(),
            cost: CostParams::default(),
            safety: SafetyParams::default(),
            solver: SolverParams::default(),
            planner: PlannerParams::default(),
            plant: PlantParams::default(),
        }
    }
}

fn to_vec2(v: &[[f64; 2]]) -> Vec<Vector2<f64>> {
    v.iter().map(|p| Vector2::new(p[0], p[1])).collect()
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.agents.is_empty() {
            return Err(Error::config("agents", "at least one agent is required"));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        for (i, a) in self.agents.iter().enumerate() {
            if !finite(&a.start) || !finite(&a.goal) {
                return Err(Error::config(
                    format!("agents[{i}]"),
                    "start/goal must be finite",
                ));
            }
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            if !finite(o) {
                return Err(Error::config(format!("obstacles[{i}]"), "must be finite"));
            }
        }
        if let Some(b) = &self.believed_obstacles {
            if b.len() != self.obstacles.len() {
                return Err(Error::config(
                    "believed_obstacles",
                    "must list one entry per true obstacle",
                ));
            }
        }
        for (i, p) in self.pushes.iter().enumerate() {
            if p.agent >= self.agents.len() {
                return Err(Error::config(format!("pushes[{i}].agent"), "no such agent"));
            }
            if !(p.start >= 0.0 && p.duration > 0.0 && finite(&p.force)) {
                return Err(Error::config(
                    format!("pushes[{i}]"),
                    "start must be >= 0 s, duration > 0 s, force finite",
                ));
            }
        }
        if !(self.terrain.force >= 0.0 && self.terrain.torque >= 0.0) {
            return Err(Error::config("terrain", "amplitudes must be >= 0"));
        }
        if !(self.speed > 0.0 && self.speed.is_finite()) {
            return Err(Error::config("speed", "must be > 0 m/s"));
        }
        if !(self.time_margin >= 0.0) {
            return Err(Error::config("time_margin", "must be >= 0 s"));
        }
        if !(self.goal_tolerance > 0.0) {
            return Err(Error::config("goal_tolerance", "must be > 0 m"));
        }
        self.mpc.validate("mpc")?;
        self.model.validate("model")?;
        self.cost.validate("cost")?;
        self.safety.validate("safety")?;
        self.solver.validate("solver")?;
        self.planner.validate("planner")?;
        self.plant.validate("plant", self.mpc.ts)?;
        if !(self.gait.step_time > 0.0) {
            return Err(Error::config("gait.step_time", "must be > 0 s"));
        }
        Ok(())
    }

    pub fn true_obstacles(&self) -> Vec<Vector2<f64>> {
        to_vec2(&self.obstacles)
    }

    pub fn planner_obstacles(&self) -> Vec<Vector2<f64>> {
        to_vec2(self.believed_obstacles.as_ref().unwrap_or(&self.obstacles))
    }

    pub fn controller(&self) -> ControllerConfig {
        ControllerConfig {
            variant: self.variant,
            mpc: self.mpc.clone(),
            model: self.model.clone(),
            gait: self.gait,
            cost: self.cost.clone(),
            safety: self.safety,
            solver: self.solver.clone(),
        }
    }
}

/// Settings of the randomized two-agent course.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomScenarioParams {
    pub n_obstacles: usize,
    /// Meters along x.
    pub course_length: f64,
    /// Lateral distance between the two parallel references, meters.
    pub separation: f64,
    /// Obstacles are placed with |y| below this, meters.
    pub corridor_half_width: f64,
    /// Pushes, rough-terrain wrenches and obstacle uncertainty on/off.
    pub disturbances: bool,
    /// Largest planner-side error of an obstacle position, meters.
    pub obstacle_uncertainty: f64,
    /// Lateral push, N and s.
    pub push_force: f64,
    pub push_duration: f64,
    /// Largest rough-terrain wrench, N and N·m; the level is drawn per run.
    pub terrain_force: f64,
    pub terrain_torque: f64,
}

impl Default for RandomScenarioParams {
    fn default() -> Self {
        RandomScenarioParams {
            n_obstacles: 20,
            course_length: 10.0,
            separation: 1.0,
            corridor_half_width: 2.0,
            disturbances: false,
            obstacle_uncertainty: 0.3,
            push_force: 60.0,
            push_duration: 0.2,
            terrain_force: 8.0,
            terrain_torque: 0.8,
        }
    }
}

impl RandomScenarioParams {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if !(self.course_length > 0.0) {
            return Err(Error::config(
                format!("{prefix}.course_length"),
                "must be > 0 m",
            ));
        }
        if !(self.separation >= 0.0 && self.corridor_half_width > 0.0) {
            return Err(Error::config(
                prefix.to_string(),
                "invalid corridor geometry",
            ));
        }
        if !(self.obstacle_uncertainty >= 0.0
            && self.push_force >= 0.0
            && self.push_duration > 0.0
            && self.terrain_force >= 0.0
            && self.terrain_torque >= 0.0)
        {
            return Err(Error::config(
                prefix.to_string(),
                "disturbance settings must be >= 0",
            ));
        }
        Ok(())
    }
}

const MAX_SAMPLES: usize = 200_000;
const ATTEMPT_SAMPLES: usize = 2_000;

fn in_disk(rng: &mut ChaCha8Rng, radius: f64) -> Vector2<f64> {
    loop {
        let v = Vector2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        if v.norm_squared() <= 1.0 {
            return v * radius;
        }
    }
}

/// Two agents on parallel references with obstacles spread uniformly over
/// the corridor. Every draw comes from `seed`; module parameters are copied
/// from `base`.
pub fn make_random_scenario(
    seed: u64,
    params: &RandomScenarioParams,
    base: &ScenarioConfig,
) -> Result<ScenarioConfig> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = params.separation / 2.0;
    let length = params.course_length;
    let agents = vec![
        AgentSpec {
            start: [0.0, half],
            goal: [length, half],
        },
        AgentSpec {
            start: [0.0, -half],
            goal: [length, -half],
        },
    ];
    let d_th = base.safety.d_th;
    let spacing = 2.0 * d_th;
    let endpoint_clearance = 1.5 * d_th;
    let endpoints: Vec<Vector2<f64>> = agents
        .iter()
        .flat_map(|a| {
            [
                Vector2::new(a.start[0], a.start[1]),
                Vector2::new(a.goal[0], a.goal[1]),
            ]
        })
        .collect();

    let mut samples = 0;
    loop {
        let mut obstacles: Vec<Vector2<f64>> = Vec::with_capacity(params.n_obstacles);
        let mut attempt = 0;
        while obstacles.len() < params.n_obstacles {
            samples += 1;
            attempt += 1;
            if samples > MAX_SAMPLES {
                return Err(Error::Placement(MAX_SAMPLES));
            }
            if attempt > ATTEMPT_SAMPLES {
                obstacles.clear();
                attempt = 0;
            }
            let o = Vector2::new(
                rng.gen_range(0.0..length),
                rng.gen_range(-params.corridor_half_width..params.corridor_half_width),
            );
            if endpoints
                .iter()
                .any(|e| (o - e).norm() < endpoint_clearance)
            {
                continue;
            }
            if obstacles.iter().any(|q| (o - q).norm() < spacing) {
                continue;
            }
            obstacles.push(o);
        }
        let believed: Vec<Vector2<f64>> =
            if params.disturbances && params.obstacle_uncertainty > 0.0 {
                obstacles
                    .iter()
                    .map(|o| o + in_disk(&mut rng, params.obstacle_uncertainty))
                    .collect()
            } else {
                obstacles.clone()
            };
        // Both agents must have a plan on the believed map.
        let reachable = agents.iter().all(|a| {
            let s = Vector2::new(a.start[0], a.start[1]);
            let g = Vector2::new(a.goal[0], a.goal[1]);
            map_for(&s, &g, &believed, &base.planner)
                .and_then(|m| astar(&m, &s, &g))
                .is_ok()
        });
        if !reachable {
            continue;
        }

        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.agents = agents;
        cfg.obstacles = obstacles.iter().map(|o| [o.x, o.y]).collect();
        cfg.believed_obstacles = if params.disturbances {
            Some(believed.iter().map(|o| [o.x, o.y]).collect())
        } else {
            None
        };
        cfg.pushes = Vec::new();
        cfg.terrain = TerrainParams::default();
        if params.disturbances {
            let level: f64 = rng.gen_range(0.0..1.0);
            cfg.terrain = TerrainParams {
                force: level * params.terrain_force,
                torque: level * params.terrain_torque,
            };
            if params.push_force > 0.0 {
                let duration = length / base.speed;
                let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                cfg.pushes.push(Push {
                    agent: rng.gen_range(0..2),
                    start: rng.gen_range(0.1 * duration..0.8 * duration),
                    duration: params.push_duration,
                    force: [0.0, side * params.push_force, 0.0],
                });
            }
        }
        return Ok(cfg);
    }
}
