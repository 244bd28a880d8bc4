//! Direct multiple-shooting transcription of the local problem.
//!
//! Decision variables are the predicted states `x_1..x_N` and the force
//! components of the stance legs for `u_0..u_{N-1}`; swing-leg forces are
//! structurally zero and never enter the decision vector.

use nalgebra::{DVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::cost::{lj_gradient_hessian, stage_cost, terminal_cost, CostParams};
use super::HorizonPlan;
use crate::error::{Error, Result};
use crate::hocbf::{
    com_projection, distance_rows, hocbf_rows, BarrierRow, ConstraintForm, SafetyParams,
};
use crate::srb::{
    contact_flags, euler_step, euler_step_jacobians, foot_positions, AgentState, ContactFlags,
    ContactSchedule, GrfInput, InputJac, ModelParams, StateJac, StateVec, NU, NX, N_LEGS,
};

/// Which safety rows the local problem carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SafetyMode {
    /// `psi2 >= 0` at `k = 0..=N-2`.
    #[default]
    Hocbf,
    /// `h >= 0` at `k = 1..=N`.
    Euclidean,
    Off,
}

/// Everything the local problem needs besides the parameters.
#[derive(Debug, Clone, Copy)]
pub struct TranscribeInput<'a> {
    pub x0: AgentState,
    /// Time of `x0`, seconds; fixes the gait phase over the horizon.
    pub time: f64,
    /// State references for `k = 0..=N`.
    pub references: &'a [AgentState],
    /// Neighbor state estimates, each covering `k = 0..=N`.
    pub neighbor_estimates: &'a [Vec<AgentState>],
    pub obstacles: &'a [Vector2<f64>],
    /// Foot positions used by the prediction model at `k = 0..N`.
    pub feet: &'a [[Vector3<f64>; N_LEGS]],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NlpSizes {
    /// `N (12 + 12)`, the size of the un-reduced decision vector.
    pub n_decision_reported: usize,
    /// States plus stance-leg force components actually optimized.
    pub n_decision: usize,
    pub n_defects: usize,
    pub n_safety_rows: usize,
    pub n_posture_rows: usize,
    pub n_friction_rows: usize,
}

/// `limit - sign * (x_k[index] - center) >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PostureRow {
    pub value: f64,
    pub k: usize,
    pub index: usize,
    pub sign: f64,
}

/// A candidate solution: `states[0]` is the fixed initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<AgentState>,
    pub inputs: Vec<GrfInput>,
}

#[derive(Debug, Clone)]
pub struct NlpProblem {
    pub(crate) horizon: usize,
    pub(crate) ts: f64,
    pub(crate) x0: AgentState,
    pub(crate) references: Vec<AgentState>,
    pub(crate) input_refs: Vec<GrfInput>,
    pub(crate) stance: Vec<ContactFlags>,
    /// Stance legs per step, in leg order.
    pub(crate) stance_legs: Vec<Vec<usize>>,
    /// First decision column of each step's inputs within the input block.
    pub(crate) input_offsets: Vec<usize>,
    pub(crate) n_inputs: usize,
    pub(crate) feet: Vec<[Vector3<f64>; N_LEGS]>,
    /// `[neighbor][k]` xy COM estimates.
    pub(crate) tracks: Vec<Vec<Vector2<f64>>>,
    pub(crate) obstacles: Vec<Vector2<f64>>,
    pub(crate) model: ModelParams,
    pub(crate) cost: CostParams,
    pub(crate) safety: SafetyParams,
    pub(crate) mode: SafetyMode,
    pub(crate) form: ConstraintForm,
}

/// Builds the local NLP for one agent at one tick.
#[allow(clippy::too_many_arguments)]
pub fn transcribe(
    input: &TranscribeInput<'_>,
    horizon: usize,
    ts: f64,
    model: &ModelParams,
    cost: &CostParams,
    safety: &SafetyParams,
    schedule: &ContactSchedule,
    mode: SafetyMode,
    form: ConstraintForm,
) -> Result<NlpProblem> {
    if input.references.len() < horizon + 1 {
        return Err(Error::InvalidQuery(format!(
            "reference covers {} steps, horizon needs {}",
            input.references.len(),
            horizon + 1
        )));
    }
    if input.feet.len() < horizon {
        return Err(Error::InvalidQuery(format!(
            "foot plan covers {} steps, horizon needs {}",
            input.feet.len(),
            horizon
        )));
    }
    let tracks: Vec<Vec<Vector2<f64>>> = input
        .neighbor_estimates
        .iter()
        .enumerate()
        .map(|(j, est)| {
            if est.len() < horizon + 1 {
                Err(Error::ShortEstimate {
                    neighbor: j,
                    got: est.len(),
                    need: horizon + 1,
                })
            } else {
                Ok(est[..=horizon].iter().map(com_projection).collect())
            }
        })
        .collect::<Result<_>>()?;

    let stance: Vec<ContactFlags> = (0..horizon)
        .map(|k| contact_flags(input.time + k as f64 * ts, schedule))
        .collect();
    let stance_legs: Vec<Vec<usize>> = stance
        .iter()
        .map(|f| (0..N_LEGS).filter(|&l| f[l]).collect())
        .collect();
    let mut input_offsets = Vec::with_capacity(horizon);
    let mut n_inputs = 0;
    for legs in &stance_legs {
        input_offsets.push(n_inputs);
        n_inputs += 3 * legs.len();
    }
    let input_refs = stance.iter().map(|f| GrfInput::hover(model, f)).collect();

    Ok(NlpProblem {
        horizon,
        ts,
        x0: input.x0,
        references: input.references[..=horizon].to_vec(),
        input_refs,
        stance,
        stance_legs,
        input_offsets,
        n_inputs,
        feet: input.feet[..horizon].to_vec(),
        tracks,
        obstacles: input.obstacles.to_vec(),
        model: model.clone(),
        cost: cost.clone(),
        safety: safety.with_margin(),
        mode,
        form,
    })
}

/// Foot positions over the horizon: stance feet already on the ground keep
/// their pinned position, feet touching down inside the horizon land at the
/// nominal placement of the guess state at touchdown.
pub fn plan_footholds(
    current_feet: &[Vector3<f64>; N_LEGS],
    time: f64,
    guess: &[AgentState],
    horizon: usize,
    ts: f64,
    model: &ModelParams,
    schedule: &ContactSchedule,
) -> Vec<[Vector3<f64>; N_LEGS]> {
    let flags0 = contact_flags(time, schedule);
    let mut pinned: [Option<Vector3<f64>>; N_LEGS] = [None; N_LEGS];
    for leg in 0..N_LEGS {
        if flags0[leg] {
            pinned[leg] = Some(current_feet[leg]);
        }
    }
    let mut out = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let flags = contact_flags(time + k as f64 * ts, schedule);
        let state = guess.get(k).or(guess.last()).copied().unwrap_or_default();
        let nominal = foot_positions(&state, model, schedule);
        let mut feet = [Vector3::zeros(); N_LEGS];
        for leg in 0..N_LEGS {
            if flags[leg] {
                let p = *pinned[leg].get_or_insert(nominal[leg]);
                feet[leg] = p;
            } else {
                pinned[leg] = None;
                feet[leg] = nominal[leg];
            }
        }
        out.push(feet);
    }
    out
}

/// Friction-pyramid rows of one stance force: `coeffs · f + offset >= 0`.
pub(crate) fn friction_rows(model: &ModelParams) -> [([f64; 3], f64); 6] {
    let mu = model.mu;
    [
        ([0.0, 0.0, 1.0], -model.fz_min),
        ([0.0, 0.0, -1.0], model.fz_max),
        ([-1.0, 0.0, mu], 0.0),
        ([1.0, 0.0, mu], 0.0),
        ([0.0, -1.0, mu], 0.0),
        ([0.0, 1.0, mu], 0.0),
    ]
}

impl NlpProblem {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn x0(&self) -> &AgentState {
        &self.x0
    }

    pub fn stance(&self) -> &[ContactFlags] {
        &self.stance
    }

    pub fn feet(&self) -> &[[Vector3<f64>; N_LEGS]] {
        &self.feet
    }

    pub fn references(&self) -> &[AgentState] {
        &self.references
    }

    pub fn input_refs(&self) -> &[GrfInput] {
        &self.input_refs
    }

    pub fn model(&self) -> &ModelParams {
        &self.model
    }

    pub fn ts(&self) -> f64 {
        self.ts
    }

    pub fn has_safety_rows(&self) -> bool {
        self.mode != SafetyMode::Off && !(self.tracks.is_empty() && self.obstacles.is_empty())
    }

    pub fn sizes(&self) -> NlpSizes {
        let n = self.horizon;
        let n_pairs = self.tracks.len() + self.obstacles.len();
        let per_step = match self.form {
            ConstraintForm::Min => usize::from(n_pairs > 0),
            ConstraintForm::PerPair => n_pairs,
        };
        let n_safety_rows = match self.mode {
            SafetyMode::Hocbf => per_step * n.saturating_sub(1),
            SafetyMode::Euclidean => per_step * n,
            SafetyMode::Off => 0,
        };
        let n_stance: usize = self.stance_legs.iter().map(Vec::len).sum();
        NlpSizes {
            n_decision_reported: n * (NX + NU),
            n_decision: n * NX + self.n_inputs,
            n_defects: n * NX,
            n_safety_rows,
            n_posture_rows: self.posture_rows(&self.cold_start()).len(),
            n_friction_rows: 6 * n_stance,
        }
    }

    pub(crate) fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    /// Forward rollout of the gravity-compensating inputs from `x0`.
    pub fn cold_start(&self) -> Trajectory {
        let mut states = vec![self.x0];
        for k in 0..self.horizon {
            let prev = states[k];
            let next = euler_step(
                &prev,
                &self.input_refs[k],
                &self.feet[k],
                self.ts,
                &self.model,
            )
            .unwrap_or(prev);
            states.push(next);
        }
        Trajectory {
            states,
            inputs: self.input_refs.clone(),
        }
    }

    /// Initial guess from a (shifted) previous plan. Inputs whose stance
    /// pattern disagrees with the schedule fall back to the reference input.
    pub fn warm_start(&self, plan: &HorizonPlan) -> Trajectory {
        let n = self.horizon;
        let mut states = Vec::with_capacity(n + 1);
        states.push(self.x0);
        for k in 1..=n {
            let s = plan
                .states
                .get(k)
                .or(plan.states.last())
                .copied()
                .unwrap_or(self.x0);
            states.push(s);
        }
        let inputs = (0..n)
            .map(|k| match plan.inputs.get(k) {
                Some(u) if self.matches_stance(u, k) => *u,
                _ => self.input_refs[k],
            })
            .collect();
        Trajectory { states, inputs }
    }

    fn matches_stance(&self, u: &GrfInput, k: usize) -> bool {
        (0..N_LEGS).all(|l| self.stance[k][l] || u.forces[l] == Vector3::zeros())
            && self.stance_legs[k]
                .iter()
                .any(|&l| u.forces[l] != Vector3::zeros())
    }

    pub fn objective(&self, traj: &Trajectory) -> f64 {
        let n = self.horizon;
        let mut total = 0.0;
        for k in 0..n {
            let coms: Vec<_> = self.tracks.iter().map(|t| t[k]).collect();
            total += stage_cost(
                &traj.states[k],
                &traj.inputs[k],
                &self.references[k],
                &self.input_refs[k],
                &coms,
                &self.cost,
            );
        }
        total + terminal_cost(&traj.states[n], &self.references[n], &self.cost)
    }

    /// Consensus part of the objective, `w Σ_k Σ_j U`.
    pub fn consensus_cost(&self, traj: &Trajectory) -> f64 {
        let mut total = 0.0;
        for k in 0..self.horizon {
            let com = com_projection(&traj.states[k]);
            for t in &self.tracks {
                total += lj_gradient_hessian(&com, &t[k], &self.cost).0;
            }
        }
        total
    }

    /// Shooting defects `f(x_k, u_k) - x_{k+1}` for `k = 0..N`.
    pub fn defects(&self, traj: &Trajectory) -> Result<Vec<StateVec>> {
        (0..self.horizon)
            .map(|k| {
                let next = euler_step(
                    &traj.states[k],
                    &traj.inputs[k],
                    &self.feet[k],
                    self.ts,
                    &self.model,
                )?;
                Ok(next.to_vector() - traj.states[k + 1].to_vector())
            })
            .collect()
    }

    pub fn safety_rows(&self, traj: &Trajectory) -> Result<Vec<BarrierRow>> {
        if !self.has_safety_rows() {
            return Ok(Vec::new());
        }
        let coms: Vec<_> = traj.states.iter().map(com_projection).collect();
        match self.mode {
            SafetyMode::Hocbf => hocbf_rows(
                &coms,
                &self.tracks,
                &self.obstacles,
                &self.safety,
                self.form,
            ),
            SafetyMode::Euclidean => distance_rows(
                &coms,
                &self.tracks,
                &self.obstacles,
                &self.safety,
                self.form,
            ),
            SafetyMode::Off => Ok(Vec::new()),
        }
    }

    /// Attitude and height rows from `k = 2`, body-rate rows from `k = 1`;
    /// under the Euler model `x_1` attitude and height do not depend on the
    /// inputs.
    pub fn posture_rows(&self, traj: &Trajectory) -> Vec<PostureRow> {
        let p = &self.safety.posture;
        let mut out = Vec::new();
        for k in 1..=self.horizon {
            let x = traj.states[k].to_vector();
            let r = self.references[k].to_vector();
            let limits = [
                (2, p.height, r[2], 2),
                (6, p.tilt, 0.0, 2),
                (7, p.tilt, 0.0, 2),
                (8, p.yaw, r[8], 2),
                (9, p.tilt_rate, 0.0, 1),
                (10, p.tilt_rate, 0.0, 1),
                (11, p.yaw_rate, 0.0, 1),
            ];
            for (index, limit, center, first) in limits {
                if k < first || !limit.is_finite() {
                    continue;
                }
                for sign in [1.0, -1.0] {
                    out.push(PostureRow {
                        value: limit - sign * (x[index] - center),
                        k,
                        index,
                        sign,
                    });
                }
            }
        }
        out
    }

    /// Friction-pyramid residuals of every stance force.
    pub fn friction_residuals(&self, traj: &Trajectory) -> Vec<f64> {
        let rows = friction_rows(&self.model);
        let mut out = Vec::new();
        for (k, legs) in self.stance_legs.iter().enumerate() {
            for &l in legs {
                let f = traj.inputs[k].forces[l];
                for (c, off) in &rows {
                    out.push(c[0] * f.x + c[1] * f.y + c[2] * f.z + off);
                }
            }
        }
        out
    }

    /// Largest violation over defects (inf-norm), safety and friction rows.
    /// Posture rows are a soft envelope and do not count.
    pub fn max_violation(&self, traj: &Trajectory) -> Result<f64> {
        let mut v: f64 = 0.0;
        for d in self.defects(traj)? {
            v = v.max(d.amax());
        }
        for r in self.safety_rows(traj)? {
            v = v.max(-r.value);
        }
        for r in self.friction_residuals(traj) {
            v = v.max(-r);
        }
        Ok(v)
    }

    pub(crate) fn jacobians(&self, traj: &Trajectory, k: usize) -> Result<(StateJac, InputJac)> {
        euler_step_jacobians(
            &traj.states[k],
            &traj.inputs[k],
            &self.feet[k],
            self.ts,
            &self.model,
        )
    }

    /// Flat decision vector `[x_1 .. x_N, stance forces of u_0 .. u_{N-1}]`.
    pub fn pack(&self, traj: &Trajectory) -> DVector<f64> {
        let n = self.horizon;
        let mut z = DVector::zeros(n * NX + self.n_inputs);
        for k in 1..=n {
            z.rows_mut((k - 1) * NX, NX)
                .copy_from(&traj.states[k].to_vector());
        }
        for k in 0..n {
            for (i, &l) in self.stance_legs[k].iter().enumerate() {
                let base = n * NX + self.input_offsets[k] + 3 * i;
                z.rows_mut(base, 3).copy_from(&traj.inputs[k].forces[l]);
            }
        }
        z
    }

    pub fn unpack(&self, z: &DVector<f64>) -> Trajectory {
        let n = self.horizon;
        let mut states = vec![self.x0];
        for k in 1..=n {
            let v = StateVec::from_iterator(z.rows((k - 1) * NX, NX).iter().copied());
            states.push(AgentState::from_vector(&v));
        }
        let mut inputs = vec![GrfInput::zero(); n];
        for k in 0..n {
            for (i, &l) in self.stance_legs[k].iter().enumerate() {
                let base = n * NX + self.input_offsets[k] + 3 * i;
                inputs[k].forces[l] = Vector3::new(z[base], z[base + 1], z[base + 2]);
            }
        }
        Trajectory { states, inputs }
    }

    /// Analytic objective gradient on the flat decision vector.
    pub fn objective_gradient(&self, traj: &Trajectory) -> DVector<f64> {
        let n = self.horizon;
        let mut g = DVector::zeros(n * NX + self.n_inputs);
        for k in 1..=n {
            let gx = self.state_gradient(traj, k);
            g.rows_mut((k - 1) * NX, NX).copy_from(&gx);
        }
        for k in 0..n {
            for (i, &l) in self.stance_legs[k].iter().enumerate() {
                let base = n * NX + self.input_offsets[k] + 3 * i;
                let diff = traj.inputs[k].forces[l] - self.input_refs[k].forces[l];
                for c in 0..3 {
                    g[base + c] = 2.0 * self.cost.r_diag[c] * diff[c];
                }
            }
        }
        g
    }

    /// Gradient of the objective with respect to `x_k`, `k >= 1`.
    pub(crate) fn state_gradient(&self, traj: &Trajectory, k: usize) -> StateVec {
        let diff = traj.states[k].to_vector() - self.references[k].to_vector();
        let weights = if k == self.horizon {
            &self.cost.p_diag
        } else {
            &self.cost.q_diag
        };
        let mut g = StateVec::from_fn(|i, _| 2.0 * weights[i] * diff[i]);
        if k < self.horizon {
            let com = com_projection(&traj.states[k]);
            for t in &self.tracks {
                let (_, grad, _) = lj_gradient_hessian(&com, &t[k], &self.cost);
                g[0] += grad.x;
                g[1] += grad.y;
            }
        }
        g
    }

    /// Gauss-Newton Hessian block of the objective for `x_k`, `k >= 1`.
    pub(crate) fn state_hessian(&self, traj: &Trajectory, k: usize) -> StateJac {
        let weights = if k == self.horizon {
            &self.cost.p_diag
        } else {
            &self.cost.q_diag
        };
        let mut h = StateJac::from_fn(|r, c| if r == c { 2.0 * weights[r] } else { 0.0 });
        if k < self.horizon {
            let com = com_projection(&traj.states[k]);
            for t in &self.tracks {
                let (_, _, hess) = lj_gradient_hessian(&com, &t[k], &self.cost);
                for r in 0..2 {
                    for c in 0..2 {
                        h[(r, c)] += hess[(r, c)];
                    }
                }
            }
        }
        h
    }

    /// All constraint residuals on the flat vector: defects (equalities),
    /// then safety, posture and friction rows (inequalities, `>= 0`).
    pub fn constraint_values(&self, z: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let traj = self.unpack(z);
        let defects = self.defects(&traj)?;
        let eq = DVector::from_iterator(
            defects.len() * NX,
            defects.iter().flat_map(|d| d.iter().copied()),
        );
        let mut ineq: Vec<f64> = self.safety_rows(&traj)?.iter().map(|r| r.value).collect();
        ineq.extend(self.posture_rows(&traj).iter().map(|r| r.value));
        ineq.extend(self.friction_residuals(&traj));
        Ok((eq, DVector::from_vec(ineq)))
    }

    /// Dense analytic Jacobians of [`Self::constraint_values`].
    pub fn constraint_jacobians(
        &self,
        z: &DVector<f64>,
    ) -> Result<(nalgebra::DMatrix<f64>, nalgebra::DMatrix<f64>)> {
        use nalgebra::DMatrix;
        let traj = self.unpack(z);
        let n = self.horizon;
        let nz = z.len();
        let mut jeq = DMatrix::zeros(n * NX, nz);
        for k in 0..n {
            let (ax, au) = self.jacobians(&traj, k)?;
            let row = k * NX;
            if k >= 1 {
                jeq.view_mut((row, (k - 1) * NX), (NX, NX)).copy_from(&ax);
            }
            for i in 0..NX {
                jeq[(row + i, k * NX + i)] -= 1.0;
            }
            for (s, &l) in self.stance_legs[k].iter().enumerate() {
                let col = n * NX + self.input_offsets[k] + 3 * s;
                jeq.view_mut((row, col), (NX, 3))
                    .copy_from(&au.fixed_view::<NX, 3>(0, 3 * l));
            }
        }
        let safety = self.safety_rows(&traj)?;
        let posture = self.posture_rows(&traj);
        let fr = friction_rows(&self.model);
        let n_fr: usize = 6 * self.stance_legs.iter().map(Vec::len).sum::<usize>();
        let mut jin = DMatrix::zeros(safety.len() + posture.len() + n_fr, nz);
        for (r, row) in safety.iter().enumerate() {
            for &(k, g) in &row.terms {
                if k >= 1 {
                    jin[(r, (k - 1) * NX)] += g.x;
                    jin[(r, (k - 1) * NX + 1)] += g.y;
                }
            }
        }
        for (i, p) in posture.iter().enumerate() {
            jin[(safety.len() + i, (p.k - 1) * NX + p.index)] = -p.sign;
        }
        let mut r = safety.len() + posture.len();
        for k in 0..n {
            for s in 0..self.stance_legs[k].len() {
                let col = n * NX + self.input_offsets[k] + 3 * s;
                for (c, _) in &fr {
                    for i in 0..3 {
                        jin[(r, col + i)] = c[i];
                    }
                    r += 1;
                }
            }
        }
        Ok((jeq, jin))
    }
}
