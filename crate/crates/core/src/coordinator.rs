//! Tick-synchronous multi-agent loop with one-step-delay plan exchange.
//!
//! At tick `t` every agent solves against an immutable snapshot of the plans
//! published at `t - 1` (or earlier, if messages were dropped); the new plans
//! are delivered together once all agents are done.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hocbf::{com_projection, ConstraintForm, SafetyParams};
use crate::nmpc::qp::{solve_qp, Constraints};
use crate::nmpc::{
    plan_footholds, shift_plan, solve, transcribe, CostParams, HorizonPlan, IterationRecord,
    SafetyMode, SolverParams, TranscribeInput,
};
use crate::srb::{
    contact_flags, euler_step, euler_step_jacobians, AgentState, ContactSchedule, GrfInput,
    ModelParams, N_LEGS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerVariant {
    /// HOCBF rows inside the local NMPC.
    CbfDnmpc,
    /// Plain distance rows inside the local NMPC.
    EuclidDnmpc,
    /// Unconstrained NMPC followed by a one-step safety filter on `u_0`.
    PosthocFilter,
}

impl ControllerVariant {
    pub const ALL: [ControllerVariant; 3] = [
        ControllerVariant::CbfDnmpc,
        ControllerVariant::EuclidDnmpc,
        ControllerVariant::PosthocFilter,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ControllerVariant::CbfDnmpc => "cbf_dnmpc",
            ControllerVariant::EuclidDnmpc => "euclid_dnmpc",
            ControllerVariant::PosthocFilter => "posthoc_filter",
        }
    }

    pub fn parse(name: &str) -> Option<ControllerVariant> {
        Self::ALL.into_iter().find(|v| v.name() == name)
    }

    pub fn safety_mode(&self) -> SafetyMode {
        match self {
            ControllerVariant::CbfDnmpc => SafetyMode::Hocbf,
            ControllerVariant::EuclidDnmpc => SafetyMode::Euclidean,
            ControllerVariant::PosthocFilter => SafetyMode::Off,
        }
    }
}

impl std::fmt::Display for ControllerVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ControllerVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ControllerVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::config(
                    "variant",
                    format!("unknown variant `{s}` (cbf_dnmpc, euclid_dnmpc, posthoc_filter)"),
                )
            })
    }
}

/// What to apply when a solve ends infeasible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackPolicy {
    /// First input of the previous plan shifted to the current tick.
    #[default]
    ShiftedPlan,
    /// The solver's last iterate, whatever its violation.
    BestIterate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcParams {
    pub horizon: usize,
    /// Control period, seconds.
    pub ts: f64,
    pub form: ConstraintForm,
    pub fallback: FallbackPolicy,
    /// Consecutive ticks the shifted-plan fallback may be used; after that
    /// the solver iterate is applied.
    pub max_fallback_streak: usize,
    /// Probability that one directed plan message is lost in a tick.
    pub drop_probability: f64,
}

impl Default for MpcParams {
    fn default() -> Self {
        MpcParams {
            horizon: 10,
            ts: 0.01,
            form: ConstraintForm::Min,
            fallback: FallbackPolicy::ShiftedPlan,
            max_fallback_streak: 5,
            drop_probability: 0.0,
        }
    }
}

impl MpcParams {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if self.horizon < 3 {
            return Err(Error::config(format!("{prefix}.horizon"), "must be >= 3"));
        }
        if !(self.ts > 0.0 && self.ts.is_finite()) {
            return Err(Error::config(format!("{prefix}.ts"), "must be > 0 s"));
        }
        if !(0.0..=1.0).contains(&self.drop_probability) {
            return Err(Error::config(
                format!("{prefix}.drop_probability"),
                "must be in [0, 1]",
            ));
        }
        Ok(())
    }
}

/// Everything one local controller needs; shared read-only by all agents.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    pub variant: ControllerVariant,
    pub mpc: MpcParams,
    pub model: ModelParams,
    pub gait: ContactSchedule,
    pub cost: CostParams,
    pub safety: SafetyParams,
    pub solver: SolverParams,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            variant: ControllerVariant::CbfDnmpc,
            mpc: MpcParams::default(),
            model: ModelParams::default(),
            gait: ContactSchedule::default(),
            cost: CostParams::default(),
            safety: SafetyParams::default(),
            solver: SolverParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanMessage {
    pub sender: usize,
    pub tick: i64,
    pub plan: HorizonPlan,
}

/// Latest plan received from each neighbor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NeighborBuffer {
    messages: BTreeMap<usize, PlanMessage>,
}

impl NeighborBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores `msg` unless an equal or newer plan from the sender is held.
    pub fn insert(&mut self, msg: PlanMessage) -> bool {
        match self.messages.get(&msg.sender) {
            Some(old) if old.tick >= msg.tick => false,
            _ => {
                self.messages.insert(msg.sender, msg);
                true
            }
        }
    }

    pub fn get(&self, sender: usize) -> Option<&PlanMessage> {
        self.messages.get(&sender)
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn senders(&self) -> impl Iterator<Item = usize> + '_ {
        self.messages.keys().copied()
    }

    /// Ticks elapsed since the stored plan of `sender` was computed.
    pub fn staleness(&self, sender: usize, t: i64) -> Option<i64> {
        self.messages.get(&sender).map(|m| t - m.tick)
    }
}

/// Hold-position plans for every agent, stamped one tick before the start.
pub fn bootstrap(x0_all: &[AgentState], horizon: usize) -> Vec<NeighborBuffer> {
    (0..x0_all.len())
        .map(|i| {
            let mut buf = NeighborBuffer::new();
            for (j, x) in x0_all.iter().enumerate() {
                if j != i {
                    buf.insert(PlanMessage {
                        sender: j,
                        tick: -1,
                        plan: HorizonPlan::hold(-1, *x, horizon),
                    });
                }
            }
            buf
        })
        .collect()
}

/// Neighbor state estimates for tick `t`, each covering `k = 0..=N`, in
/// sender order. Fails if a stored plan is not strictly older than `t`.
pub fn estimate_neighbors(
    buffer: &NeighborBuffer,
    t: i64,
    ts: f64,
    neighbors: &[usize],
) -> Result<Vec<Vec<AgentState>>> {
    neighbors
        .iter()
        .map(|&j| {
            let msg = buffer.get(j).ok_or(Error::MissingNeighbor(j))?;
            let lag = t - msg.tick;
            if lag < 1 {
                return Err(Error::InvalidQuery(format!(
                    "plan of agent {j} from tick {} read at tick {t}",
                    msg.tick
                )));
            }
            let mut plan = msg.plan.clone();
            for _ in 0..lag {
                plan = shift_plan(&plan, ts);
            }
            Ok(plan.states)
        })
        .collect()
}

/// Per-agent data for one tick.
#[derive(Debug, Clone)]
pub struct AgentTickInput<'a> {
    pub state: AgentState,
    /// State references for `k = 0..=N`.
    pub references: &'a [AgentState],
    /// Foot positions of the plant at the current tick.
    pub feet: [Vector3<f64>; N_LEGS],
    /// Obstacle centers as seen by the controller.
    pub obstacles: &'a [Vector2<f64>],
}

#[derive(Debug, Clone)]
pub struct AgentTickOutput {
    pub input: GrfInput,
    pub plan: HorizonPlan,
    pub fallback: bool,
    /// The safety filter changed the input.
    pub filtered: bool,
    pub consensus_cost: f64,
    pub solve_time: f64,
    pub records: Vec<IterationRecord>,
    /// Largest lag over the plans read this tick.
    pub max_staleness: i64,
}

pub struct Coordinator {
    config: ControllerConfig,
    tick: i64,
    buffers: Vec<NeighborBuffer>,
    own: Vec<Option<HorizonPlan>>,
    streaks: Vec<usize>,
    rng: ChaCha8Rng,
    delay_violations: usize,
}

impl Coordinator {
    pub fn new(config: ControllerConfig, x0_all: &[AgentState], seed: u64) -> Self {
        let buffers = bootstrap(x0_all, config.mpc.horizon);
        Coordinator {
            tick: 0,
            own: vec![None; x0_all.len()],
            streaks: vec![0; x0_all.len()],
            buffers,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x05dc_b0f5),
            delay_violations: 0,
            config,
        }
    }

    pub fn tick_index(&self) -> i64 {
        self.tick
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn buffers(&self) -> &[NeighborBuffer] {
        &self.buffers
    }

    /// Reads of a plan computed at the reading tick; always zero.
    pub fn delay_violations(&self) -> usize {
        self.delay_violations
    }

    /// Solves every agent in parallel, then delivers all new plans.
    pub fn tick(&mut self, inputs: &[AgentTickInput<'_>]) -> Result<Vec<AgentTickOutput>> {
        self.tick_with(inputs, &[])
    }

    /// Like [`Self::tick`], withholding the plans of the listed senders.
    pub fn tick_with(
        &mut self,
        inputs: &[AgentTickInput<'_>],
        withheld: &[usize],
    ) -> Result<Vec<AgentTickOutput>> {
        let n = self.buffers.len();
        if inputs.len() != n {
            return Err(Error::InvalidQuery(format!(
                "{} agent inputs for {n} agents",
                inputs.len()
            )));
        }
        let t = self.tick;
        for buf in &self.buffers {
            for j in buf.senders() {
                if buf.get(j).is_some_and(|m| m.tick >= t) {
                    self.delay_violations += 1;
                }
            }
        }
        let outputs: Vec<AgentTickOutput> = (0..n)
            .into_par_iter()
            .map(|i| {
                solve_agent(
                    &self.config,
                    t,
                    i,
                    &inputs[i],
                    &self.buffers[i],
                    self.own[i].as_ref(),
                    self.streaks[i],
                )
            })
            .collect::<Result<_>>()?;

        for (i, out) in outputs.iter().enumerate() {
            self.own[i] = Some(out.plan.clone());
            self.streaks[i] = if out.plan.feasible {
                0
            } else {
                self.streaks[i] + 1
            };
        }
        let p_drop = self.config.mpc.drop_probability;
        for sender in 0..n {
            if withheld.contains(&sender) {
                continue;
            }
            for receiver in 0..n {
                if receiver == sender {
                    continue;
                }
                if p_drop > 0.0 && self.rng.gen::<f64>() < p_drop {
                    continue;
                }
                self.buffers[receiver].insert(PlanMessage {
                    sender,
                    tick: t,
                    plan: outputs[sender].plan.clone(),
                });
            }
        }
        self.tick += 1;
        Ok(outputs)
    }
}

/// One agent's work at tick `t`: estimates, transcription, solve, fallback
/// and (for the filter variant) the one-step safety filter.
pub fn solve_agent(
    cfg: &ControllerConfig,
    t: i64,
    agent: usize,
    input: &AgentTickInput<'_>,
    buffer: &NeighborBuffer,
    previous: Option<&HorizonPlan>,
    fallback_streak: usize,
) -> Result<AgentTickOutput> {
    let start = Instant::now();
    let mpc = &cfg.mpc;
    let n = mpc.horizon;
    let time = t as f64 * mpc.ts;
    let neighbors: Vec<usize> = buffer.senders().filter(|&j| j != agent).collect();
    let estimates = estimate_neighbors(buffer, t, mpc.ts, &neighbors)?;
    let max_staleness = neighbors
        .iter()
        .filter_map(|&j| buffer.staleness(j, t))
        .max()
        .unwrap_or(0);

    let shifted = previous.map(|p| {
        let mut p = p.clone();
        while p.t0 < t {
            p = shift_plan(&p, mpc.ts);
        }
        p
    });
    let guess: Vec<AgentState> = match &shifted {
        Some(p) => p.states.clone(),
        None => input.references.to_vec(),
    };
    let feet = plan_footholds(&input.feet, time, &guess, n, mpc.ts, &cfg.model, &cfg.gait);
    let problem = transcribe(
        &TranscribeInput {
            x0: input.state,
            time,
            references: input.references,
            neighbor_estimates: &estimates,
            obstacles: input.obstacles,
            feet: &feet,
        },
        n,
        mpc.ts,
        &cfg.model,
        &cfg.cost,
        &cfg.safety,
        &cfg.gait,
        cfg.variant.safety_mode(),
        mpc.form,
    )?;
    let outcome = solve(&problem, shifted.as_ref(), &cfg.solver)?;
    let consensus_cost = problem.consensus_cost(&outcome.trajectory);
    let records = outcome.records.clone();
    let feasible = outcome.feasible;
    let mut plan = outcome.into_plan(t);

    let mut fallback = false;
    if !feasible
        && mpc.fallback == FallbackPolicy::ShiftedPlan
        && fallback_streak < mpc.max_fallback_streak
    {
        fallback = true;
        plan = match shifted {
            Some(mut p) => {
                p.states[0] = input.state;
                p.feasible = false;
                p
            }
            None => {
                let flags = contact_flags(time, &cfg.gait);
                let mut p = HorizonPlan::hold(t, input.state, n);
                p.inputs = vec![GrfInput::hover(&cfg.model, &flags); n];
                p.feasible = false;
                p
            }
        };
        // The fallback input must match the current stance.
        let flags = contact_flags(time, &cfg.gait);
        if (0..N_LEGS).any(|l| !flags[l] && plan.inputs[0].forces[l] != Vector3::zeros()) {
            plan.inputs[0] = GrfInput::hover(&cfg.model, &flags);
        }
    }

    let mut applied = plan.inputs[0];
    let mut filtered = false;
    if cfg.variant == ControllerVariant::PosthocFilter {
        let filt = safety_filter(
            cfg,
            &input.state,
            &applied,
            &feet[0],
            plan.inputs.get(1).unwrap_or(&applied),
            &feet[1.min(n - 1)],
            &estimates,
            input.obstacles,
            time,
        );
        if let Some(u) = filt {
            filtered = (u.to_vector() - applied.to_vector()).amax() > 1e-9;
            applied = u;
        }
    }

    Ok(AgentTickOutput {
        input: applied,
        plan,
        fallback,
        filtered,
        consensus_cost,
        solve_time: start.elapsed().as_secs_f64(),
        records,
        max_staleness,
    })
}

/// `min ||u - u_nom||^2 + k ||sum r x du||^2` subject to the linearized per-pair `psi2(0) >= 0`
/// rows and the friction pyramid. `None` when the QP has no solution.
const TORQUE_WEIGHT: f64 = 1e4;

#[allow(clippy::too_many_arguments)]
pub fn safety_filter(
    cfg: &ControllerConfig,
    x0: &AgentState,
    u_nom: &GrfInput,
    feet0: &[Vector3<f64>; N_LEGS],
    u_next: &GrfInput,
    feet1: &[Vector3<f64>; N_LEGS],
    estimates: &[Vec<AgentState>],
    obstacles: &[Vector2<f64>],
    time: f64,
) -> Option<GrfInput> {
    let ts = cfg.mpc.ts;
    let model = &cfg.model;
    let flags = contact_flags(time, &cfg.gait);
    let legs: Vec<usize> = (0..N_LEGS).filter(|&l| flags[l]).collect();
    let nv = 3 * legs.len();
    if nv == 0 {
        return None;
    }
    let x1 = euler_step(x0, u_nom, feet0, ts, model).ok()?;
    let x2 = euler_step(&x1, u_next, feet1, ts, model).ok()?;
    let (a1, _) = euler_step_jacobians(&x1, u_next, feet1, ts, model).ok()?;
    let (_, b0) = euler_step_jacobians(x0, u_nom, feet0, ts, model).ok()?;
    let dx2 = a1 * b0;

    let [w0, w1, w2] = cfg.safety.psi2_weights();
    let d_th = cfg.safety.with_margin().d_th;
    let c0 = com_projection(x0);
    let c1 = com_projection(&x1);
    let c2 = com_projection(&x2);
    let mut cons = Constraints::new(nv);
    let mut pair = |o0: Vector2<f64>, o1: Vector2<f64>, o2: Vector2<f64>| {
        let d2 = c2 - o2;
        let rho2 = d2.norm().max(1e-9);
        let n2 = d2 / rho2;
        let value =
            w0 * ((c0 - o0).norm() - d_th) + w1 * ((c1 - o1).norm() - d_th) + w2 * (rho2 - d_th);
        let mut row = vec![0.0; nv];
        for (s, &l) in legs.iter().enumerate() {
            for c in 0..3 {
                let col = 3 * l + c;
                row[3 * s + c] = w2 * (n2.x * dx2[(0, col)] + n2.y * dx2[(1, col)]);
            }
        }
        cons.push(&row, value);
    };
    for est in estimates {
        let at = |k: usize| com_projection(&est[k.min(est.len() - 1)]);
        pair(at(0), at(1), at(2));
    }
    for o in obstacles {
        pair(*o, *o, *o);
    }
    let n_safety = cons.len();
    if n_safety == 0 {
        return None;
    }
    let mu = model.mu;
    for s in 0..legs.len() {
        let f = u_nom.forces[legs[s]];
        let base = 3 * s;
        cons.push_sparse(&[(base + 2, 1.0)], f.z - model.fz_min);
        cons.push_sparse(&[(base + 2, -1.0)], model.fz_max - f.z);
        cons.push_sparse(&[(base, -1.0), (base + 2, mu)], mu * f.z - f.x);
        cons.push_sparse(&[(base, 1.0), (base + 2, mu)], mu * f.z + f.x);
        cons.push_sparse(&[(base + 1, -1.0), (base + 2, mu)], mu * f.z - f.y);
        cons.push_sparse(&[(base + 1, 1.0), (base + 2, mu)], mu * f.z + f.y);
    }
    let mut torque = nalgebra::DMatrix::zeros(3, nv);
    for (s, &l) in legs.iter().enumerate() {
        let r = feet0[l] - x0.p;
        torque
            .view_mut((0, 3 * s), (3, 3))
            .copy_from(&r.cross_matrix());
    }
    let h = nalgebra::DMatrix::identity(nv, nv) * 2.0
        + torque.transpose() * &torque * (2.0 * TORQUE_WEIGHT);
    let g = nalgebra::DVector::zeros(nv);
    let sol = solve_qp(&h, &g, &cons).ok()?;
    let mut u = *u_nom;
    for (s, &l) in legs.iter().enumerate() {
        for c in 0..3 {
            u.forces[l][c] += sol.x[3 * s + c];
        }
    }
    Some(u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::srb::{foot_positions, FootholdTracker};

    fn walking_refs(x: f64, y: f64, vx: f64, t0: i64, n: usize) -> Vec<AgentState> {
        (0..=n)
            .map(|k| {
                let tk = (t0 + k as i64) as f64 * 0.01;
                let mut s = AgentState::standing(x + vx * tk, y, 0.0, 0.28);
                s.v.x = vx;
                s
            })
            .collect()
    }

    #[test]
    fn bootstrap_fills_every_buffer() {
        let xs: Vec<_> = (0..4)
            .map(|i| AgentState::standing(i as f64, 0.0, 0.0, 0.28))
            .collect();
        let bufs = bootstrap(&xs, 10);
        assert_eq!(bufs.len(), 4);
        for (i, b) in bufs.iter().enumerate() {
            assert_eq!(b.len(), 3);
            assert!(b.get(i).is_none());
        }
        let est = estimate_neighbors(&bufs[0], 0, 0.01, &[1, 2, 3]).unwrap();
        for (e, x) in est.iter().zip(&xs[1..]) {
            assert_eq!(e.len(), 11);
            assert!(e.iter().all(|s| s == x));
        }
    }

    #[test]
    fn estimates_shift_by_the_lag() {
        let refs = walking_refs(0.0, 0.0, 0.5, 0, 10);
        let plan = HorizonPlan {
            states: refs.clone(),
            ..HorizonPlan::hold(7, refs[0], 10)
        };
        let mut buf = NeighborBuffer::new();
        buf.insert(PlanMessage {
            sender: 1,
            tick: 7,
            plan: plan.clone(),
        });
        let est = estimate_neighbors(&buf, 8, 0.01, &[1]).unwrap();
        for k in 0..10 {
            assert_eq!(est[0][k], refs[k + 1]);
        }
        let est3 = estimate_neighbors(&buf, 10, 0.01, &[1]).unwrap();
        assert_eq!(buf.staleness(1, 10), Some(3));
        let mut p = plan;
        for _ in 0..3 {
            p = shift_plan(&p, 0.01);
        }
        assert_eq!(est3[0], p.states);
        assert!(estimate_neighbors(&buf, 7, 0.01, &[1]).is_err());
        assert!(matches!(
            estimate_neighbors(&buf, 8, 0.01, &[2]),
            Err(Error::MissingNeighbor(2))
        ));
    }

    #[test]
    fn buffer_keeps_the_newest_plan() {
        let x = AgentState::default();
        let mut buf = NeighborBuffer::new();
        assert!(buf.insert(PlanMessage {
            sender: 0,
            tick: 3,
            plan: HorizonPlan::hold(3, x, 10)
        }));
        assert!(!buf.insert(PlanMessage {
            sender: 0,
            tick: 2,
            plan: HorizonPlan::hold(2, x, 10)
        }));
        assert_eq!(buf.get(0).unwrap().tick, 3);
    }

    struct Pair {
        states: Vec<AgentState>,
        refs: Vec<Vec<AgentState>>,
        trackers: Vec<FootholdTracker>,
    }

    impl Pair {
        fn new(ys: &[f64]) -> Self {
            let states: Vec<_> = ys
                .iter()
                .map(|&y| AgentState::standing(0.0, y, 0.0, 0.28))
                .collect();
            Pair {
                refs: ys
                    .iter()
                    .map(|&y| walking_refs(0.0, y, 0.0, 0, 10))
                    .collect(),
                states,
                trackers: vec![FootholdTracker::new(); ys.len()],
            }
        }

        fn inputs(&mut self, t: i64, cfg: &ControllerConfig) -> Vec<AgentTickInput<'_>> {
            let time = t as f64 * cfg.mpc.ts;
            let mut out = Vec::new();
            for (i, x) in self.states.iter().enumerate() {
                let feet = self.trackers[i].update(time, x, &cfg.model, &cfg.gait);
                out.push(AgentTickInput {
                    state: *x,
                    references: &self.refs[i],
                    feet,
                    obstacles: &[],
                });
            }
            out
        }
    }

    #[test]
    fn non_interacting_agents_match_single_agent_solves() {
        let mut cfg = ControllerConfig::default();
        cfg.cost.w = 0.0;
        let mut pair = Pair::new(&[0.0, 5.0]);
        let xs = pair.states.clone();
        let mut coord = Coordinator::new(cfg.clone(), &xs, 1);
        let inputs = pair.inputs(0, &cfg);
        let out = coord.tick(&inputs).unwrap();
        for (i, o) in out.iter().enumerate() {
            // Oracle: the same agent solved alone.
            let alone =
                solve_agent(&cfg, 0, 0, &inputs[i], &NeighborBuffer::new(), None, 0).unwrap();
            let hover = GrfInput::hover(&cfg.model, &contact_flags(0.0, &cfg.gait));
            assert!((o.input.to_vector() - hover.to_vector()).amax() < 1.0);
            assert!(o.plan.feasible);
            assert!((o.input.to_vector() - alone.input.to_vector()).amax() < 1e-6);
        }
        assert_eq!(coord.buffers()[0].get(1).unwrap().tick, 0);
        assert_eq!(coord.delay_violations(), 0);
    }

    #[test]
    fn solve_order_does_not_matter() {
        let cfg = ControllerConfig::default();
        let mut pair = Pair::new(&[0.0, 1.0, -1.2]);
        let xs = pair.states.clone();
        let mut coord = Coordinator::new(cfg.clone(), &xs, 1);
        let inputs = pair.inputs(0, &cfg);
        let buffers = coord.buffers().to_vec();
        let out = coord.tick(&inputs).unwrap();
        for i in (0..3).rev() {
            let again = solve_agent(&cfg, 0, i, &inputs[i], &buffers[i], None, 0).unwrap();
            assert_eq!(again.plan, out[i].plan);
        }
    }

    #[test]
    fn withheld_message_doubles_the_shift() {
        let cfg = ControllerConfig::default();
        let mut pair = Pair::new(&[0.0, 1.0]);
        let xs = pair.states.clone();
        let mut coord = Coordinator::new(cfg.clone(), &xs, 1);
        let inputs = pair.inputs(0, &cfg);
        coord.tick(&inputs).unwrap();
        let inputs = pair.inputs(1, &cfg);
        coord.tick_with(&inputs, &[1]).unwrap();
        assert_eq!(coord.buffers()[0].staleness(1, 2), Some(2));
        let inputs = pair.inputs(2, &cfg);
        let out = coord.tick(&inputs).unwrap();
        assert_eq!(out[0].max_staleness, 2);
        assert_eq!(out[1].max_staleness, 1);
    }

    #[test]
    fn head_on_pair_is_steered_apart() {
        let cfg = ControllerConfig {
            cost: CostParams {
                w: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let model = cfg.model.clone();
        let mut states = vec![
            AgentState::standing(0.0, 0.02, 0.0, 0.28),
            AgentState::standing(2.0, -0.02, std::f64::consts::PI, 0.28),
        ];
        let mut coord = Coordinator::new(cfg.clone(), &states, 3);
        let mut trackers = vec![FootholdTracker::new(); 2];
        let mut min_h = f64::INFINITY;
        for t in 0..250i64 {
            let time = t as f64 * 0.01;
            let refs: Vec<Vec<AgentState>> = vec![
                (0..=10)
                    .map(|k| {
                        let mut s =
                            AgentState::standing(0.5 * (time + 0.01 * k as f64), 0.0, 0.0, 0.28);
                        s.v.x = 0.5;
                        s
                    })
                    .collect(),
                (0..=10)
                    .map(|k| {
                        let mut s = AgentState::standing(
                            2.0 - 0.5 * (time + 0.01 * k as f64),
                            0.0,
                            std::f64::consts::PI,
                            0.28,
                        );
                        s.v.x = -0.5;
                        s
                    })
                    .collect(),
            ];
            let feet: Vec<_> = (0..2)
                .map(|i| trackers[i].update(time, &states[i], &model, &cfg.gait))
                .collect();
            let inputs: Vec<_> = (0..2)
                .map(|i| AgentTickInput {
                    state: states[i],
                    references: &refs[i],
                    feet: feet[i],
                    obstacles: &[],
                })
                .collect();
            let out = coord.tick(&inputs).unwrap();
            for i in 0..2 {
                for _ in 0..10 {
                    states[i] = crate::srb::rk4_step(
                        &states[i],
                        |x| crate::srb::grf_to_wrench(&out[i].input, &feet[i], &x.p),
                        0.001,
                        &model,
                    )
                    .unwrap();
                }
            }
            let d = (com_projection(&states[0]) - com_projection(&states[1])).norm();
            min_h = min_h.min(d - cfg.safety.d_th);
        }
        assert!(min_h > 0.0, "min h {min_h}");
        assert!((states[0].p.y - states[1].p.y).abs() > 0.1 || states[0].p.x < states[1].p.x);
        let _ = foot_positions(&states[0], &model, &cfg.gait);
    }

    #[test]
    fn filter_is_identity_when_safe_and_corrects_when_not() {
        let cfg = ControllerConfig::default();
        let x0 = {
            let mut s = AgentState::standing(0.0, 0.0, 0.0, 0.28);
            s.v.x = 1.0;
            s
        };
        let flags = contact_flags(0.0, &cfg.gait);
        let feet = foot_positions(&x0, &cfg.model, &cfg.gait);
        let u = GrfInput::hover(&cfg.model, &flags);
        let far = [Vector2::new(5.0, 0.0)];
        let same = safety_filter(&cfg, &x0, &u, &feet, &u, &feet, &[], &far, 0.0).unwrap();
        assert!((same.to_vector() - u.to_vector()).amax() < 1e-9);
        // 5 cm from the threshold at 1 m/s: braking is required.
        let near = [Vector2::new(0.65, 0.0)];
        let fixed = safety_filter(&cfg, &x0, &u, &feet, &u, &feet, &[], &near, 0.0).unwrap();
        assert!(fixed.net_force().x < -1.0);
        for l in 0..N_LEGS {
            if !flags[l] {
                assert_eq!(fixed.forces[l], Vector3::zeros());
            }
        }
    }
}
