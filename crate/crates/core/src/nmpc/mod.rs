//! Local nonlinear MPC of one agent: costs, multiple-shooting transcription
//! and the SQP solver.

mod cost;
pub mod qp;
mod sqp;
mod transcribe;

pub use cost::{lj_gradient_hessian, lj_potential, stage_cost, terminal_cost, CostParams};
pub use sqp::{solve, write_debug_csv, IterationRecord, SolveOutcome, SolverParams};
pub use transcribe::{
    plan_footholds, transcribe, NlpProblem, NlpSizes, PostureRow, SafetyMode, Trajectory,
    TranscribeInput,
};

use serde::{Deserialize, Serialize};

use crate::srb::{euler_rate_matrix, AgentState, GrfInput};

/// Predicted state and input trajectories of one local solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonPlan {
    /// Tick at which the plan was computed.
    pub t0: i64,
    /// `k = 0..=N`
    pub states: Vec<AgentState>,
    /// `k = 0..N`
    pub inputs: Vec<GrfInput>,
    pub objective: f64,
    pub feasible: bool,
    pub solver_iters: usize,
    pub max_violation: f64,
}

impl HorizonPlan {
    /// Plan that holds `x0` with zero inputs.
    pub fn hold(t0: i64, x0: AgentState, horizon: usize) -> Self {
        HorizonPlan {
            t0,
            states: vec![x0; horizon + 1],
            inputs: vec![GrfInput::zero(); horizon],
            objective: 0.0,
            feasible: true,
            solver_iters: 0,
            max_violation: 0.0,
        }
    }

    pub fn horizon(&self) -> usize {
        self.inputs.len()
    }
}

/// Drops the first step and extends the tail by one sample at constant
/// velocity and body rate, repeating the last input.
pub fn shift_plan(plan: &HorizonPlan, ts: f64) -> HorizonPlan {
    let last = *plan.states.last().expect("plan has states");
    let mut next = last;
    next.p += ts * last.v;
    if let Ok(a) = euler_rate_matrix(&last.theta) {
        next.theta += ts * (a * last.omega);
    }
    let mut states: Vec<AgentState> = plan.states[1..].to_vec();
    states.push(next);
    let mut inputs: Vec<GrfInput> = plan.inputs.iter().skip(1).copied().collect();
    if let Some(u) = plan.inputs.last() {
        inputs.push(*u);
    }
    HorizonPlan {
        t0: plan.t0 + 1,
        states,
        inputs,
        ..plan.clone()
    }
}
