//! Sequential quadratic programming on the multiple-shooting NLP.
//!
//! Each subproblem linearizes the dynamics and the safety rows, uses a
//! Gauss-Newton model of the objective and is condensed onto the input
//! increments before being handed to the dual active-set QP. Steps are
//! globalized with a backtracking line search on an l1 exact-penalty merit.

use std::path::Path;

use nalgebra::{Const, DMatrix, DVector, Dyn, OMatrix};
use serde::{Deserialize, Serialize};

use super::qp::{solve_qp, Constraints, QpError};
use super::transcribe::{friction_rows, NlpProblem, PostureRow, Trajectory};
use super::HorizonPlan;
use crate::error::{Error, Result};
use crate::hocbf::BarrierRow;
use crate::srb::{euler_step, AgentState, StateVec, NX};

type Sens = OMatrix<f64, Const<NX>, Dyn>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverParams {
    /// Major iteration budget.
    pub max_iters: usize,
    /// A solution is feasible iff its largest violation is at most this.
    pub feasibility_tol: f64,
    /// Sufficient-decrease constant of the line search.
    pub armijo: f64,
    pub max_backtracks: usize,
    /// Stop once the largest state increment falls below this.
    pub step_tol: f64,
    /// Penalty on the elastic slacks when a subproblem is infeasible.
    pub elastic_penalty: f64,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams {
            max_iters: 8,
            feasibility_tol: 1e-4,
            armijo: 1e-4,
            max_backtracks: 10,
            step_tol: 1e-4,
            elastic_penalty: 1e12,
        }
    }
}

impl SolverParams {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::config(format!("{prefix}.max_iters"), "must be >= 1"));
        }
        if !(self.feasibility_tol > 0.0) {
            return Err(Error::config(
                format!("{prefix}.feasibility_tol"),
                "must be > 0",
            ));
        }
        if !(self.armijo > 0.0 && self.armijo < 0.5) {
            return Err(Error::config(
                format!("{prefix}.armijo"),
                "must be in (0, 0.5)",
            ));
        }
        if !(self.step_tol >= 0.0) {
            return Err(Error::config(format!("{prefix}.step_tol"), "must be >= 0"));
        }
        if !(self.elastic_penalty > 0.0) {
            return Err(Error::config(
                format!("{prefix}.elastic_penalty"),
                "must be > 0",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub objective: f64,
    pub merit: f64,
    pub penalty: f64,
    pub max_violation: f64,
    pub step_norm: f64,
    pub alpha: f64,
    pub qp_iterations: usize,
    pub elastic: bool,
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub trajectory: Trajectory,
    pub objective: f64,
    pub max_violation: f64,
    pub feasible: bool,
    pub iterations: usize,
    /// Stopped on a small step rather than the budget.
    pub converged: bool,
    pub records: Vec<IterationRecord>,
}

impl SolveOutcome {
    pub fn into_plan(self, t0: i64) -> HorizonPlan {
        HorizonPlan {
            t0,
            states: self.trajectory.states,
            inputs: self.trajectory.inputs,
            objective: self.objective,
            feasible: self.feasible,
            solver_iters: self.iterations,
            max_violation: self.max_violation,
        }
    }
}

/// Constraint values at a trajectory, kept for the merit and the QP.
struct Evaluation {
    objective: f64,
    defects: Vec<StateVec>,
    safety: Vec<BarrierRow>,
    posture: Vec<PostureRow>,
    friction: Vec<f64>,
}

impl Evaluation {
    fn new(problem: &NlpProblem, traj: &Trajectory) -> Result<Self> {
        Ok(Evaluation {
            objective: problem.objective(traj),
            defects: problem.defects(traj)?,
            safety: problem.safety_rows(traj)?,
            posture: problem.posture_rows(traj),
            friction: problem.friction_residuals(traj),
        })
    }

    fn infeasibility_l1(&self) -> f64 {
        let eq: f64 = self.defects.iter().map(|d| d.abs().sum()).sum();
        let ineq: f64 = self
            .safety
            .iter()
            .map(|r| r.value)
            .chain(self.friction.iter().copied())
            .map(|v| (-v).max(0.0))
            .sum();
        let posture: f64 = self.posture.iter().map(|r| (-r.value).max(0.0)).sum();
        eq + ineq + POSTURE_WEIGHT * posture
    }

    fn max_violation(&self) -> f64 {
        let mut v: f64 = 0.0;
        for d in &self.defects {
            v = v.max(d.amax());
        }
        for r in &self.safety {
            v = v.max(-r.value);
        }
        for r in &self.friction {
            v = v.max(-r);
        }
        v
    }

    fn merit(&self, penalty: f64) -> f64 {
        self.objective + penalty * self.infeasibility_l1()
    }
}

struct Step {
    du: DVector<f64>,
    dx: Vec<StateVec>,
    /// Directional derivative of the objective along the step.
    objective_slope: f64,
    multiplier_bound: f64,
    qp_iterations: usize,
    elastic: bool,
}

/// Solves the local problem from a warm start (or the hover rollout).
pub fn solve(
    problem: &NlpProblem,
    warm_start: Option<&HorizonPlan>,
    params: &SolverParams,
) -> Result<SolveOutcome> {
    let mut traj = match warm_start {
        Some(plan) => problem.warm_start(plan),
        None => problem.cold_start(),
    };
    let mut eval = Evaluation::new(problem, &traj)?;
    let mut penalty: f64 = 0.0;
    let mut records = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..params.max_iters {
        let step = match subproblem(problem, &traj, &eval, params.elastic_penalty.max(penalty)) {
            Ok(s) => s,
            Err(e) => {
                log::debug!("sqp subproblem failed at iteration {iter}: {e}");
                break;
            }
        };
        iterations += 1;
        penalty = penalty.max(1.1 * step.multiplier_bound).max(1.0);

        let phi0 = eval.merit(penalty);
        let infeas0 = eval.infeasibility_l1();
        // Directional derivative bound of the l1 merit along the step.
        let slope = step.objective_slope - penalty * infeas0;
        let mut alpha = 1.0;
        let mut accepted = None;
        'search: for _ in 0..=params.max_backtracks {
            let linear = apply_step(problem, &traj, &step, alpha);
            // The rolled-out trial removes the second-order defect error
            // of the linearized step and is tried first.
            for trial in [rollout(problem, &linear), Some(linear)]
                .into_iter()
                .flatten()
            {
                if let Ok(e) = Evaluation::new(problem, &trial) {
                    let phi = e.merit(penalty);
                    if phi.is_finite() && phi <= phi0 + params.armijo * alpha * slope.min(0.0) {
                        accepted = Some((trial, e));
                        break 'search;
                    }
                }
            }
            alpha *= 0.5;
        }
        let step_norm = step
            .dx
            .iter()
            .map(|d| d.amax())
            .fold(0.0, f64::max)
            .max(step.du.amax() * 1e-3);
        let Some((trial, e)) = accepted else {
            records.push(IterationRecord {
                iter,
                objective: eval.objective,
                merit: phi0,
                penalty,
                max_violation: eval.max_violation(),
                step_norm,
                alpha: 0.0,
                qp_iterations: step.qp_iterations,
                elastic: step.elastic,
            });
            break;
        };
        traj = trial;
        eval = e;
        records.push(IterationRecord {
            iter,
            objective: eval.objective,
            merit: eval.merit(penalty),
            penalty,
            max_violation: eval.max_violation(),
            step_norm: alpha * step_norm,
            alpha,
            qp_iterations: step.qp_iterations,
            elastic: step.elastic,
        });
        log::trace!(target: "dnmpc_core::solver", "{:?}", records.last().unwrap());
        if alpha == 1.0
            && step_norm <= params.step_tol
            && eval.max_violation() <= params.feasibility_tol
        {
            converged = true;
            break;
        }
    }

    let max_violation = eval.max_violation();
    Ok(SolveOutcome {
        objective: eval.objective,
        feasible: max_violation <= params.feasibility_tol,
        max_violation,
        iterations,
        converged,
        records,
        trajectory: traj,
    })
}

fn apply_step(problem: &NlpProblem, traj: &Trajectory, step: &Step, alpha: f64) -> Trajectory {
    let mut out = traj.clone();
    for k in 1..=problem.horizon {
        let x = traj.states[k].to_vector() + alpha * step.dx[k];
        out.states[k] = AgentState::from_vector(&x);
    }
    for k in 0..problem.horizon {
        let off = problem.input_offsets[k];
        for (i, &l) in problem.stance_legs[k].iter().enumerate() {
            for c in 0..3 {
                out.inputs[k].forces[l][c] += alpha * step.du[off + 3 * i + c];
            }
        }
    }
    out
}

/// Re-simulates the states from `x0` under the trial inputs.
fn rollout(problem: &NlpProblem, traj: &Trajectory) -> Option<Trajectory> {
    let mut out = traj.clone();
    for k in 0..problem.horizon {
        let next = euler_step(
            &out.states[k],
            &out.inputs[k],
            &problem.feet[k],
            problem.ts,
            &problem.model,
        )
        .ok()?;
        if !next.is_finite() {
            return None;
        }
        out.states[k + 1] = next;
    }
    Some(out)
}

/// Builds and solves the condensed QP around `traj`.
///
/// With state increments `dx_k = Γ_k du + e_k`, where `e` propagates the
/// defects, only the input increments remain as QP variables.
fn subproblem(
    problem: &NlpProblem,
    traj: &Trajectory,
    eval: &Evaluation,
    elastic_penalty: f64,
) -> Result<Step> {
    let n = problem.horizon;
    let nu = problem.n_inputs();

    // Affine state increments.
    let mut gammas: Vec<Sens> = Vec::with_capacity(n + 1);
    let mut offsets: Vec<StateVec> = Vec::with_capacity(n + 1);
    let mut a_mats = Vec::with_capacity(n);
    gammas.push(Sens::zeros(nu));
    offsets.push(StateVec::zeros());
    for k in 0..n {
        let (ax, au) = problem.jacobians(traj, k)?;
        let mut g = ax * &gammas[k];
        let off = problem.input_offsets[k];
        for (i, &l) in problem.stance_legs[k].iter().enumerate() {
            for c in 0..3 {
                g.column_mut(off + 3 * i + c)
                    .copy_from(&au.column(3 * l + c));
            }
        }
        let e = ax * offsets[k] + eval.defects[k];
        gammas.push(g);
        offsets.push(e);
        a_mats.push(ax);
    }

    // Condensed Hessian and gradient.
    let mut hc = DMatrix::zeros(nu, nu);
    let mut gc = DVector::zeros(nu);
    let mut g_inputs = DVector::zeros(nu);
    for k in 0..n {
        let off = problem.input_offsets[k];
        for (i, &l) in problem.stance_legs[k].iter().enumerate() {
            let diff = traj.inputs[k].forces[l] - problem.input_refs[k].forces[l];
            for c in 0..3 {
                let j = off + 3 * i + c;
                hc[(j, j)] += 2.0 * problem.cost.r_diag[c];
                g_inputs[j] = 2.0 * problem.cost.r_diag[c] * diff[c];
                gc[j] += g_inputs[j];
            }
        }
    }
    let mut hx = Vec::with_capacity(n + 1);
    let mut gx = Vec::with_capacity(n + 1);
    hx.push(Default::default());
    gx.push(StateVec::zeros());
    for k in 1..=n {
        let h = problem.state_hessian(traj, k);
        let g = problem.state_gradient(traj, k);
        // Only the inputs before step k influence x_k.
        let cols = problem.input_offsets.get(k).copied().unwrap_or(nu);
        let gam = gammas[k].columns(0, cols);
        let m = h * gam;
        hc.view_mut((0, 0), (cols, cols))
            .gemm_tr(1.0, &gam, &m, 1.0);
        let lin = g + h * offsets[k];
        let mut gv = gc.rows_mut(0, cols);
        gv.gemv_tr(1.0, &gam, &lin, 1.0);
        hx.push(h);
        gx.push(g);
    }
    let hc = (&hc + hc.transpose()) * 0.5;

    // Inequality rows in du.
    let n_safety = eval.safety.len();
    let fr = friction_rows(&problem.model);
    let mut cons = Constraints::new(nu);
    let mut row = vec![0.0; nu];
    for r in &eval.safety {
        row.iter_mut().for_each(|v| *v = 0.0);
        let mut b = r.value;
        for &(k, grad) in &r.terms {
            if k == 0 {
                continue;
            }
            b += grad.x * offsets[k][0] + grad.y * offsets[k][1];
            let cols = problem.input_offsets.get(k).copied().unwrap_or(nu);
            for j in 0..cols {
                row[j] += grad.x * gammas[k][(0, j)] + grad.y * gammas[k][(1, j)];
            }
        }
        cons.push(&row, b);
    }
    for p in &eval.posture {
        let cols = problem.input_offsets.get(p.k).copied().unwrap_or(nu);
        row.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..cols {
            row[j] = -p.sign * gammas[p.k][(p.index, j)];
        }
        cons.push(&row, p.value - p.sign * offsets[p.k][p.index]);
    }
    let n_soft = n_safety + eval.posture.len();
    let mut fi = 0;
    for k in 0..n {
        let off = problem.input_offsets[k];
        for i in 0..problem.stance_legs[k].len() {
            for (c, _) in &fr {
                let entries: Vec<(usize, f64)> = (0..3)
                    .filter(|&m| c[m] != 0.0)
                    .map(|m| (off + 3 * i + m, c[m]))
                    .collect();
                cons.push_sparse(&entries, eval.friction[fi]);
                fi += 1;
            }
        }
    }

    let (du, row_multipliers, qp_iterations, elastic) = match solve_qp(&hc, &gc, &cons) {
        Ok(sol) => (sol.x, sol.multipliers, sol.iterations, false),
        Err(QpError::Infeasible) | Err(QpError::IterationLimit) if n_soft > 0 => {
            let sol = solve_elastic(
                &hc,
                &gc,
                &cons,
                &[
                    (n_safety, elastic_penalty),
                    (eval.posture.len(), POSTURE_WEIGHT * elastic_penalty),
                ],
            )?;
            (sol.0, sol.1, sol.2, true)
        }
        Err(e) => return Err(Error::InvalidQuery(format!("qp subproblem: {e:?}"))),
    };

    let dx: Vec<StateVec> = (0..=n).map(|k| &gammas[k] * &du + offsets[k]).collect();

    // Defect multipliers by the backward recursion of the stationarity
    // conditions in x_k.
    let mut safety_grad = vec![StateVec::zeros(); n + 1];
    for (r, nu_r) in eval.safety.iter().zip(row_multipliers.iter()) {
        for &(k, grad) in &r.terms {
            safety_grad[k][0] += nu_r * grad.x;
            safety_grad[k][1] += nu_r * grad.y;
        }
    }
    for (p, nu_r) in eval
        .posture
        .iter()
        .zip(row_multipliers.iter().skip(n_safety))
    {
        safety_grad[p.k][p.index] -= nu_r * p.sign;
    }
    let mut lambda_max: f64 = 0.0;
    let mut lambda = StateVec::zeros();
    for k in (1..=n).rev() {
        let carry = if k < n {
            a_mats[k].transpose() * lambda
        } else {
            StateVec::zeros()
        };
        lambda = carry + safety_grad[k] - hx[k] * dx[k] - gx[k];
        lambda_max = lambda_max.max(lambda.amax());
    }
    let nu_max = row_multipliers.amax();

    let objective_slope = g_inputs.dot(&du) + (1..=n).map(|k| gx[k].dot(&dx[k])).sum::<f64>();
    Ok(Step {
        du,
        dx,
        objective_slope,
        multiplier_bound: lambda_max.max(nu_max),
        qp_iterations,
        elastic,
    })
}

/// Elastic variant: each group of consecutive soft rows (safety, posture)
/// shares one nonnegative slack, an l-infinity relaxation per group, at a
/// linear penalty; friction rows stay hard.
/// Posture envelope rows weigh this much relative to safety and dynamics rows.
const POSTURE_WEIGHT: f64 = 1.0;

fn solve_elastic(
    hc: &DMatrix<f64>,
    gc: &DVector<f64>,
    cons: &Constraints,
    groups: &[(usize, f64)],
) -> Result<(DVector<f64>, DVector<f64>, usize)> {
    let nu = gc.len();
    let groups: Vec<(usize, f64)> = groups.iter().copied().filter(|g| g.0 > 0).collect();
    let ns = groups.len();
    let nz = nu + ns;
    let scale = hc.diagonal().amax().max(1.0);
    let mut h = DMatrix::zeros(nz, nz);
    h.view_mut((0, 0), (nu, nu)).copy_from(hc);
    let mut g = DVector::zeros(nz);
    g.rows_mut(0, nu).copy_from(gc);
    for k in 0..ns {
        h[(nu + k, nu + k)] = 1e-3 * scale;
        g[nu + k] = groups[k].1;
    }
    let mut owner = vec![None; cons.len()];
    let mut first = 0;
    for (k, &(len, _)) in groups.iter().enumerate() {
        for o in owner.iter_mut().skip(first).take(len) {
            *o = Some(k);
        }
        first += len;
    }
    let mut ec = Constraints::new(nz);
    let mut row = vec![0.0; nz];
    for i in 0..cons.len() {
        row.iter_mut().for_each(|v| *v = 0.0);
        row[..nu].copy_from_slice(cons.row(i));
        if let Some(k) = owner[i] {
            row[nu + k] = 1.0;
        }
        ec.push(&row, cons.offset(i));
    }
    for k in 0..ns {
        ec.push_sparse(&[(nu + k, 1.0)], 0.0);
    }
    let sol = solve_qp(&h, &g, &ec)
        .map_err(|e| Error::InvalidQuery(format!("elastic qp subproblem: {e:?}")))?;
    let mult = DVector::from_iterator(cons.len(), sol.multipliers.iter().take(cons.len()).copied());
    Ok((sol.x.rows(0, nu).into_owned(), mult, sol.iterations))
}

/// Writes the per-iteration records as CSV.
pub fn write_debug_csv(records: &[IterationRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hocbf::{ConstraintForm, SafetyParams};
    use crate::nmpc::cost::CostParams;
    use crate::nmpc::transcribe::{plan_footholds, transcribe, SafetyMode, TranscribeInput};
    use crate::srb::{foot_positions, ContactSchedule, ModelParams, N_LEGS};
    use nalgebra::{Vector2, Vector3};

    struct Setup {
        x0: AgentState,
        time: f64,
        refs: Vec<AgentState>,
        neighbors: Vec<Vec<AgentState>>,
        obstacles: Vec<Vector2<f64>>,
        mode: SafetyMode,
        cost: CostParams,
    }

    impl Setup {
        fn hover() -> Self {
            let x0 = AgentState::standing(0.0, 0.0, 0.0, 0.28);
            Setup {
                x0,
                time: 0.0,
                refs: vec![x0; 11],
                neighbors: Vec::new(),
                obstacles: Vec::new(),
                mode: SafetyMode::Hocbf,
                cost: CostParams::default(),
            }
        }

        fn problem(&self) -> NlpProblem {
            let model = ModelParams::default();
            let schedule = ContactSchedule::default();
            let feet = plan_footholds(
                &foot_positions(&self.x0, &model, &schedule),
                self.time,
                &self.refs,
                10,
                0.01,
                &model,
                &schedule,
            );
            let input = TranscribeInput {
                x0: self.x0,
                time: self.time,
                references: &self.refs,
                neighbor_estimates: &self.neighbors,
                obstacles: &self.obstacles,
                feet: &feet,
            };
            transcribe(
                &input,
                10,
                0.01,
                &model,
                &self.cost,
                &SafetyParams::default(),
                &schedule,
                self.mode,
                ConstraintForm::Min,
            )
            .unwrap()
        }
    }

    fn walking(x: f64, y: f64, vx: f64) -> Vec<AgentState> {
        (0..=10)
            .map(|k| {
                let mut s = AgentState::standing(x + vx * 0.01 * k as f64, y, 0.0, 0.28);
                s.v.x = vx;
                s
            })
            .collect()
    }

    #[test]
    fn hover_is_solved_in_place() {
        let p = Setup::hover().problem();
        let out = solve(&p, None, &SolverParams::default()).unwrap();
        assert!(out.feasible);
        assert!(out.objective <= 1e-2, "objective {}", out.objective);
        assert!(out.converged);
    }

    #[test]
    fn swing_forces_stay_zero() {
        let mut s = Setup::hover();
        s.refs = walking(0.0, 0.0, 0.5);
        let p = s.problem();
        let out = solve(&p, None, &SolverParams::default()).unwrap();
        for (k, u) in out.trajectory.inputs.iter().enumerate() {
            for l in 0..N_LEGS {
                if !p.stance()[k][l] {
                    assert_eq!(u.forces[l], Vector3::zeros());
                }
            }
        }
        assert!(out.feasible);
        assert!(p
            .friction_residuals(&out.trajectory)
            .iter()
            .all(|&r| r >= -1e-6));
    }

    #[test]
    fn merit_is_monotone_within_a_penalty() {
        let mut s = Setup::hover();
        s.refs = walking(0.0, 0.0, 0.8);
        s.x0.p.z = 0.25;
        s.x0.theta.x = 0.05;
        let p = s.problem();
        let out = solve(&p, None, &SolverParams::default()).unwrap();
        for w in out.records.windows(2) {
            if w[0].penalty == w[1].penalty {
                assert!(w[1].merit <= w[0].merit + 1e-6 * w[0].merit.abs());
            }
        }
        assert!(out.feasible);
    }

    #[test]
    fn warm_start_needs_no_more_iterations_than_cold() {
        let mut s = Setup::hover();
        s.refs = walking(0.0, 0.0, 0.6);
        let p = s.problem();
        let params = SolverParams::default();
        let first = solve(&p, None, &params).unwrap();
        let plan = first.clone().into_plan(0);
        let warm = solve(&p, Some(&plan), &params).unwrap();
        assert!(warm.iterations <= first.iterations);
        assert!(warm.objective <= first.objective * (1.0 + 1e-9) + 1e-9);
    }

    #[test]
    fn head_on_agents_keep_the_barrier() {
        let mut s = Setup::hover();
        s.x0 = walking(0.0, 0.0, 0.6)[0];
        s.refs = walking(0.0, 0.0, 0.6);
        // The neighbor walks towards us and is predicted to overlap.
        let mut other = walking(0.8, 0.02, -0.6);
        for st in &mut other {
            st.v.x = -0.6;
        }
        s.neighbors = vec![other];
        s.cost.w = 0.0;
        let p = s.problem();
        let out = solve(&p, None, &SolverParams::default()).unwrap();
        assert!(
            out.feasible,
            "violation {} {:#?}",
            out.max_violation, out.records
        );
        assert!(p
            .safety_rows(&out.trajectory)
            .unwrap()
            .iter()
            .all(|r| r.value >= -1e-4));
    }

    #[test]
    fn deterministic() {
        let mut s = Setup::hover();
        s.refs = walking(0.0, 0.0, 0.6);
        s.obstacles = vec![Vector2::new(1.0, 0.3)];
        let p = s.problem();
        let a = solve(&p, None, &SolverParams::default()).unwrap();
        let b = solve(&p, None, &SolverParams::default()).unwrap();
        assert_eq!(a.trajectory, b.trajectory);
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn debug_csv_has_one_row_per_iteration() {
        let mut s = Setup::hover();
        s.refs = walking(0.0, 0.0, 0.6);
        let p = s.problem();
        let out = solve(&p, None, &SolverParams::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("solver.csv");
        write_debug_csv(&out.records, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), out.records.len() + 1);
    }
}
