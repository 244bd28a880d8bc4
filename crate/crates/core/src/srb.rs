//! Single-rigid-body template model of one quadruped.
//!
//! State is `(p, v, theta, omega)`: COM position and velocity in the world
//! frame, ZYX Euler angles (roll, pitch, yaw) and body-frame angular rates.
//! The input is one ground reaction force per leg, world frame, in the leg
//! order `[FL, FR, RL, RR]`.

use std::ops::AddAssign;

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NX: usize = 12;
pub const NU: usize = 12;
pub const N_LEGS: usize = 4;

pub type StateVec = SVector<f64, NX>;
pub type InputVec = SVector<f64, NU>;
pub type StateJac = SMatrix<f64, NX, NX>;
pub type InputJac = SMatrix<f64, NX, NU>;

/// Closest the pitch angle may come to ±π/2.
pub const PITCH_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Leg {
    FL = 0,
    FR = 1,
    RL = 2,
    RR = 3,
}

impl Leg {
    pub const ALL: [Leg; 4] = [Leg::FL, Leg::FR, Leg::RL, Leg::RR];
}

/// Stance flag per leg, `[FL, FR, RL, RR]`.
pub type ContactFlags = [bool; N_LEGS];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AgentState {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub theta: Vector3<f64>,
    pub omega: Vector3<f64>,
}

impl AgentState {
    /// Standing at rest at `(x, y)` with the given yaw.
    pub fn standing(x: f64, y: f64, yaw: f64, height: f64) -> Self {
        AgentState {
            p: Vector3::new(x, y, height),
            v: Vector3::zeros(),
            theta: Vector3::new(0.0, 0.0, yaw),
            omega: Vector3::zeros(),
        }
    }

    pub fn to_vector(&self) -> StateVec {
        let mut out = StateVec::zeros();
        out.fixed_rows_mut::<3>(0).copy_from(&self.p);
        out.fixed_rows_mut::<3>(3).copy_from(&self.v);
        out.fixed_rows_mut::<3>(6).copy_from(&self.theta);
        out.fixed_rows_mut::<3>(9).copy_from(&self.omega);
        out
    }

    pub fn from_vector(x: &StateVec) -> Self {
        AgentState {
            p: x.fixed_rows::<3>(0).into_owned(),
            v: x.fixed_rows::<3>(3).into_owned(),
            theta: x.fixed_rows::<3>(6).into_owned(),
            omega: x.fixed_rows::<3>(9).into_owned(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|c| c.is_finite())
    }

    pub fn yaw(&self) -> f64 {
        self.theta.z
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GrfInput {
    pub forces: [Vector3<f64>; N_LEGS],
}

impl GrfInput {
    pub fn zero() -> Self {
        Self::default()
    }

    /// Gravity-compensating input: the weight split evenly over the stance legs.
    pub fn hover(params: &ModelParams, flags: &ContactFlags) -> Self {
        let n_stance = flags.iter().filter(|&&s| s).count();
        let mut u = GrfInput::zero();
        if n_stance == 0 {
            return u;
        }
        let weight = params.mass * params.gravity()[2] / n_stance as f64;
        for (leg, &stance) in flags.iter().enumerate() {
            if stance {
                u.forces[leg] = Vector3::new(0.0, 0.0, weight);
            }
        }
        u
    }

    pub fn to_vector(&self) -> InputVec {
        let mut out = InputVec::zeros();
        for (leg, f) in self.forces.iter().enumerate() {
            out.fixed_rows_mut::<3>(3 * leg).copy_from(f);
        }
        out
    }

    pub fn from_vector(u: &InputVec) -> Self {
        let mut forces = [Vector3::zeros(); N_LEGS];
        for (leg, f) in forces.iter_mut().enumerate() {
            *f = u.fixed_rows::<3>(3 * leg).into_owned();
        }
        GrfInput { forces }
    }

    pub fn net_force(&self) -> Vector3<f64> {
        self.forces.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelParams {
    /// kg
    pub mass: f64,
    /// Body-frame inertia, kg·m², row-major.
    pub inertia: [[f64; 3]; 3],
    /// Magnitude of gravity along world -z, m/s².
    pub gravity: f64,
    /// Body-frame xy offsets of the nominal foot positions, meters.
    pub hip_offsets: [[f64; 2]; N_LEGS],
    /// meters
    pub standing_height: f64,
    pub mu: f64,
    /// Vertical force bounds for a stance leg, N.
    pub fz_min: f64,
    pub fz_max: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            mass: 12.45,
            inertia: [[0.017, 0.0, 0.0], [0.0, 0.056, 0.0], [0.0, 0.0, 0.065]],
            gravity: 9.81,
            hip_offsets: [
                [0.183, 0.13],
                [0.183, -0.13],
                [-0.183, 0.13],
                [-0.183, -0.13],
            ],
            standing_height: 0.28,
            mu: 0.6,
            fz_min: 1.0,
            fz_max: 200.0,
        }
    }
}

impl ModelParams {
    pub fn inertia(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.inertia[r][c])
    }

    /// The vector g₀ of the translational dynamics (gravity points along -z).
    pub fn gravity(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, self.gravity)
    }

    pub fn validate(&self, prefix: &str) -> Result<()> {
        let key = |k: &str| format!("{prefix}.{k}");
        if !(self.mass > 0.0) {
            return Err(Error::config(key("mass"), "must be > 0 kg"));
        }
        let inertia = self.inertia();
        if (inertia - inertia.transpose()).abs().max() > 1e-12 {
            return Err(Error::config(key("inertia"), "must be symmetric"));
        }
        if inertia.cholesky().is_none() {
            return Err(Error::config(key("inertia"), "must be positive definite"));
        }
        if !(self.mu > 0.0) {
            return Err(Error::config(key("mu"), "must be > 0"));
        }
        if !(self.fz_min >= 0.0 && self.fz_min < self.fz_max) {
            return Err(Error::config(key("fz_min"), "need 0 <= fz_min < fz_max"));
        }
        if !(self.standing_height > 0.0) {
            return Err(Error::config(key("standing_height"), "must be > 0 m"));
        }
        Ok(())
    }
}

/// Trot schedule: diagonal pairs alternate, each in stance for `step_time`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContactSchedule {
    /// seconds
    pub step_time: f64,
    /// Fraction of the full cycle, in [0, 1).
    pub phase_offset: f64,
}

impl Default for ContactSchedule {
    fn default() -> Self {
        ContactSchedule {
            step_time: 0.18,
            phase_offset: 0.0,
        }
    }
}

impl ContactSchedule {
    pub fn cycle(&self) -> f64 {
        2.0 * self.step_time
    }
}

/// Absorbs round-off in `k as f64 * ts` at phase boundaries.
const PHASE_EPS: f64 = 1e-9;

pub fn contact_flags(t: f64, schedule: &ContactSchedule) -> ContactFlags {
    let s = ((t + PHASE_EPS) / schedule.cycle() + schedule.phase_offset).rem_euclid(1.0);
    let first_pair = s < 0.5;
    // {FL, RR} then {FR, RL}
    [first_pair, !first_pair, !first_pair, first_pair]
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn drot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn drot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

fn drot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// Body-to-world rotation `Rz(yaw) Ry(pitch) Rx(roll)`.
pub fn rotation(theta: &Vector3<f64>) -> Matrix3<f64> {
    rot_z(theta.z) * rot_y(theta.y) * rot_x(theta.x)
}

pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

fn check_pitch(theta: &Vector3<f64>) -> Result<()> {
    if theta.y.abs() >= std::f64::consts::FRAC_PI_2 - PITCH_MARGIN || !theta.y.is_finite() {
        return Err(Error::SingularEuler(theta.y));
    }
    Ok(())
}

/// Maps body angular velocity to ZYX Euler-angle rates.
pub fn euler_rate_matrix(theta: &Vector3<f64>) -> Result<Matrix3<f64>> {
    check_pitch(theta)?;
    let (sr, cr) = theta.x.sin_cos();
    let (sp, cp) = theta.y.sin_cos();
    let tp = sp / cp;
    Ok(Matrix3::new(
        1.0,
        sr * tp,
        cr * tp,
        0.0,
        cr,
        -sr,
        0.0,
        sr / cp,
        cr / cp,
    ))
}

/// d(A(theta) w)/d(theta).
fn euler_rate_jacobian(theta: &Vector3<f64>, w: &Vector3<f64>) -> Matrix3<f64> {
    let (sr, cr) = theta.x.sin_cos();
    let (sp, cp) = theta.y.sin_cos();
    let tp = sp / cp;
    let a = cr * w.y - sr * w.z;
    let b = sr * w.y + cr * w.z;
    let cp2 = cp * cp;
    Matrix3::new(
        tp * a,
        b / cp2,
        0.0,
        -b,
        0.0,
        0.0,
        a / cp,
        b * sp / cp2,
        0.0,
    )
}

/// Net force and moment about the COM of the leg forces (world frame).
pub fn grf_to_wrench(
    u: &GrfInput,
    feet: &[Vector3<f64>; N_LEGS],
    p: &Vector3<f64>,
) -> (Vector3<f64>, Vector3<f64>) {
    let mut f_net = Vector3::zeros();
    let mut tau_net = Vector3::zeros();
    for (f, r) in u.forces.iter().zip(feet) {
        f_net += f;
        tau_net += (r - p).cross(f);
    }
    (f_net, tau_net)
}

pub fn continuous_dynamics(
    x: &AgentState,
    f_net: &Vector3<f64>,
    tau_net: &Vector3<f64>,
    params: &ModelParams,
) -> Result<StateVec> {
    let a = euler_rate_matrix(&x.theta)?;
    let inertia = params.inertia();
    let inertia_inv = inertia.try_inverse().expect("inertia is positive definite");
    let rot = rotation(&x.theta);

    let acc = f_net / params.mass - params.gravity();
    let theta_dot = a * x.omega;
    let omega_dot = inertia_inv * (rot.transpose() * tau_net - x.omega.cross(&(inertia * x.omega)));

    let mut dx = StateVec::zeros();
    dx.fixed_rows_mut::<3>(0).copy_from(&x.v);
    dx.fixed_rows_mut::<3>(3).copy_from(&acc);
    dx.fixed_rows_mut::<3>(6).copy_from(&theta_dot);
    dx.fixed_rows_mut::<3>(9).copy_from(&omega_dot);
    Ok(dx)
}

/// Forward-Euler prediction model with fixed foot positions.
pub fn euler_step(
    x: &AgentState,
    u: &GrfInput,
    feet: &[Vector3<f64>; N_LEGS],
    ts: f64,
    params: &ModelParams,
) -> Result<AgentState> {
    let (f_net, tau_net) = grf_to_wrench(u, feet, &x.p);
    let dx = continuous_dynamics(x, &f_net, &tau_net, params)?;
    Ok(AgentState::from_vector(&(x.to_vector() + ts * dx)))
}

/// `euler_step` with foot positions from the nominal kinematics at state `x`.
pub fn euler_step_nominal(
    x: &AgentState,
    u: &GrfInput,
    ts: f64,
    params: &ModelParams,
    schedule: &ContactSchedule,
) -> Result<AgentState> {
    let feet = foot_positions(x, params, schedule);
    euler_step(x, u, &feet, ts, params)
}

/// Jacobians of [`euler_step`] with respect to the state and the full
/// 12-component input.
pub fn euler_step_jacobians(
    x: &AgentState,
    u: &GrfInput,
    feet: &[Vector3<f64>; N_LEGS],
    ts: f64,
    params: &ModelParams,
) -> Result<(StateJac, InputJac)> {
    let a = euler_rate_matrix(&x.theta)?;
    let inertia = params.inertia();
    let inertia_inv = inertia.try_inverse().expect("inertia is positive definite");
    let rot = rotation(&x.theta);
    let rot_t = rot.transpose();
    let (f_net, tau_net) = grf_to_wrench(u, feet, &x.p);

    let mut jx = StateJac::identity();
    // p <- v
    for i in 0..3 {
        jx[(i, 3 + i)] += ts;
    }
    // theta <- theta, omega
    let d_rate = euler_rate_jacobian(&x.theta, &x.omega);
    jx.fixed_view_mut::<3, 3>(6, 6).add_assign(&(ts * d_rate));
    jx.fixed_view_mut::<3, 3>(6, 9).copy_from(&(ts * a));
    // omega <- p (moment arms), theta (R^T), omega (gyroscopic)
    let d_p = inertia_inv * rot_t * skew(&f_net);
    jx.fixed_view_mut::<3, 3>(9, 0).copy_from(&(ts * d_p));
    let (r, pch, y) = (x.theta.x, x.theta.y, x.theta.z);
    let d_roll = (rot_z(y) * rot_y(pch) * drot_x(r)).transpose() * tau_net;
    let d_pitch = (rot_z(y) * drot_y(pch) * rot_x(r)).transpose() * tau_net;
    let d_yaw = (drot_z(y) * rot_y(pch) * rot_x(r)).transpose() * tau_net;
    let d_theta = inertia_inv * Matrix3::from_columns(&[d_roll, d_pitch, d_yaw]);
    jx.fixed_view_mut::<3, 3>(9, 6).copy_from(&(ts * d_theta));
    let iw = inertia * x.omega;
    let d_gyro = skew(&x.omega) * inertia - skew(&iw);
    jx.fixed_view_mut::<3, 3>(9, 9)
        .add_assign(&(-ts * inertia_inv * d_gyro));

    let mut ju = InputJac::zeros();
    let lin = Matrix3::identity() * (ts / params.mass);
    for (leg, r_foot) in feet.iter().enumerate() {
        ju.fixed_view_mut::<3, 3>(3, 3 * leg).copy_from(&lin);
        let ang = ts * inertia_inv * rot_t * skew(&(r_foot - x.p));
        ju.fixed_view_mut::<3, 3>(9, 3 * leg).copy_from(&ang);
    }
    Ok((jx, ju))
}

/// Nominal foot placement for state `x`: the hip offset rotated by yaw, on
/// the ground plane, shifted by the Raibert term `v * step_time / 2`.
pub fn foot_positions(
    x: &AgentState,
    params: &ModelParams,
    schedule: &ContactSchedule,
) -> [Vector3<f64>; N_LEGS] {
    let (s, c) = x.yaw().sin_cos();
    let shift = x.v * (schedule.step_time / 2.0);
    let mut feet = [Vector3::zeros(); N_LEGS];
    for (foot, hip) in feet.iter_mut().zip(&params.hip_offsets) {
        *foot = Vector3::new(
            x.p.x + c * hip[0] - s * hip[1] + shift.x,
            x.p.y + s * hip[0] + c * hip[1] + shift.y,
            0.0,
        );
    }
    feet
}

/// Pins each stance foot at the nominal placement computed at its touchdown.
#[derive(Debug, Clone, PartialEq)]
pub struct FootholdTracker {
    feet: [Vector3<f64>; N_LEGS],
    flags: Option<ContactFlags>,
}

impl Default for FootholdTracker {
    fn default() -> Self {
        Self::new()
    }
}

impl FootholdTracker {
    pub fn new() -> Self {
        FootholdTracker {
            feet: [Vector3::zeros(); N_LEGS],
            flags: None,
        }
    }

    pub fn update(
        &mut self,
        t: f64,
        x: &AgentState,
        params: &ModelParams,
        schedule: &ContactSchedule,
    ) -> [Vector3<f64>; N_LEGS] {
        let flags = contact_flags(t, schedule);
        let nominal = foot_positions(x, params, schedule);
        for leg in 0..N_LEGS {
            let touchdown = match self.flags {
                Some(prev) => flags[leg] && !prev[leg],
                None => true,
            };
            if touchdown || !flags[leg] {
                self.feet[leg] = nominal[leg];
            }
        }
        self.flags = Some(flags);
        self.feet
    }

    pub fn feet(&self) -> &[Vector3<f64>; N_LEGS] {
        &self.feet
    }

    pub fn flags(&self) -> Option<ContactFlags> {
        self.flags
    }
}

/// Pyramid friction-cone residuals; feasible iff all are non-negative.
///
/// Stance legs contribute `[fz - fz_min, fz_max - fz, mu fz - |fx|, mu fz - |fy|]`,
/// swing legs `[-|fx|, -|fy|, -|fz|]`.
pub fn friction_cone_residuals(
    u: &GrfInput,
    params: &ModelParams,
    flags: &ContactFlags,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(4 * N_LEGS);
    for (f, &stance) in u.forces.iter().zip(flags) {
        if stance {
            out.extend_from_slice(&[
                f.z - params.fz_min,
                params.fz_max - f.z,
                params.mu * f.z - f.x.abs(),
                params.mu * f.z - f.y.abs(),
            ]);
        } else {
            out.extend_from_slice(&[-f.x.abs(), -f.y.abs(), -f.z.abs()]);
        }
    }
    out
}

/// Classic RK4 step of the continuous dynamics under a constant wrench.
pub fn rk4_step(
    x: &AgentState,
    wrench: impl Fn(&AgentState) -> (Vector3<f64>, Vector3<f64>),
    dt: f64,
    params: &ModelParams,
) -> Result<AgentState> {
    let eval = |s: &StateVec| -> Result<StateVec> {
        let st = AgentState::from_vector(s);
        let (f, tau) = wrench(&st);
        continuous_dynamics(&st, &f, &tau, params)
    };
    let x0 = x.to_vector();
    let k1 = eval(&x0)?;
    let k2 = eval(&(x0 + 0.5 * dt * k1))?;
    let k3 = eval(&(x0 + 0.5 * dt * k2))?;
    let k4 = eval(&(x0 + dt * k3))?;
    Ok(AgentState::from_vector(
        &(x0 + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn params() -> ModelParams {
        ModelParams::default()
    }

    fn state(vals: [f64; 12]) -> AgentState {
        AgentState::from_vector(&StateVec::from_row_slice(&vals))
    }

    #[test]
    fn euler_rate_identity_at_zero() {
        let a = euler_rate_matrix(&Vector3::zeros()).unwrap();
        assert_relative_eq!(a, Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn euler_rate_yaw_only() {
        // Body-rate form depends on roll and pitch only.
        let theta = Vector3::new(0.0, 0.0, FRAC_PI_2);
        let a = euler_rate_matrix(&theta).unwrap();
        assert_relative_eq!(a, Matrix3::identity(), epsilon = 1e-15);
        // Expressed against world-frame rates the map permutes x and y:
        // a world x-rate yields no roll rate.
        let world = a * rotation(&theta).transpose();
        let rates = world * Vector3::new(1.0, 0.0, 0.0);
        assert_relative_eq!(rates, Vector3::new(0.0, -1.0, 0.0), epsilon = 1e-15);
        let rates = world * Vector3::new(0.0, 1.0, 0.0);
        assert_relative_eq!(rates, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-15);
    }

    fn euler_from_rotation(r: &Matrix3<f64>) -> Vector3<f64> {
        let pitch = (-r[(2, 0)]).asin();
        let roll = r[(2, 1)].atan2(r[(2, 2)]);
        let yaw = r[(1, 0)].atan2(r[(0, 0)]);
        Vector3::new(roll, pitch, yaw)
    }

    fn so3_exp(w: &Vector3<f64>) -> Matrix3<f64> {
        let angle = w.norm();
        if angle < 1e-300 {
            return Matrix3::identity();
        }
        let k = skew(&(w / angle));
        Matrix3::identity() + angle.sin() * k + (1.0 - angle.cos()) * k * k
    }

    #[test]
    fn euler_rate_matches_rotation_finite_difference() {
        let theta = Vector3::new(0.1, 0.2, 0.3);
        let omega = Vector3::new(0.7, -0.4, 0.9);
        let r0 = rotation(&theta);
        let h = 1e-6;
        let plus = euler_from_rotation(&(r0 * so3_exp(&(omega * h))));
        let minus = euler_from_rotation(&(r0 * so3_exp(&(-omega * h))));
        let fd = (plus - minus) / (2.0 * h);
        let a = euler_rate_matrix(&theta).unwrap();
        assert_relative_eq!(a * omega, fd, epsilon = 1e-6);
    }

    #[test]
    fn euler_rate_rejects_singular_pitch() {
        let theta = Vector3::new(0.0, FRAC_PI_2 - 5e-4, 0.0);
        assert!(matches!(
            euler_rate_matrix(&theta),
            Err(Error::SingularEuler(_))
        ));
        assert!(euler_rate_matrix(&Vector3::new(0.0, FRAC_PI_2 - 2e-3, 0.0)).is_ok());
    }

    #[test]
    fn wrench_examples() {
        let p = Vector3::new(0.3, -0.2, 0.28);
        let mut u = GrfInput::zero();
        u.forces[0] = Vector3::new(0.0, 0.0, 10.0);
        let feet = [p, Vector3::zeros(), Vector3::zeros(), Vector3::zeros()];
        let (f, tau) = grf_to_wrench(&u, &feet, &p);
        assert_relative_eq!(f, Vector3::new(0.0, 0.0, 10.0));
        assert_relative_eq!(tau, Vector3::zeros());

        let feet = [p + Vector3::new(0.1, 0.0, -0.28), p, p, p];
        let (_, tau) = grf_to_wrench(&u, &feet, &p);
        assert_relative_eq!(tau, Vector3::new(0.0, -1.0, 0.0), epsilon = 1e-12);

        let mut u = GrfInput::zero();
        u.forces[0] = Vector3::new(0.0, 0.0, 25.0);
        u.forces[3] = Vector3::new(0.0, 0.0, 25.0);
        let off = Vector3::new(0.18, 0.13, -0.28);
        let feet = [p + off, p, p, p + Vector3::new(-off.x, -off.y, off.z)];
        let (_, tau) = grf_to_wrench(&u, &feet, &p);
        assert_relative_eq!(tau, Vector3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn dynamics_hover_is_equilibrium() {
        let p = params();
        let x = AgentState::standing(1.0, 2.0, 0.4, 0.28);
        let f = Vector3::new(0.0, 0.0, p.mass * p.gravity);
        let dx = continuous_dynamics(&x, &f, &Vector3::zeros(), &p).unwrap();
        assert_relative_eq!(dx, StateVec::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn dynamics_free_fall() {
        let p = params();
        let x = AgentState::standing(0.0, 0.0, 0.0, 0.28);
        let dx = continuous_dynamics(&x, &Vector3::zeros(), &Vector3::zeros(), &p).unwrap();
        assert_relative_eq!(
            dx.fixed_rows::<3>(3).into_owned(),
            Vector3::new(0.0, 0.0, -9.81)
        );
    }

    #[test]
    fn dynamics_principal_axis_spin() {
        let mut p = params();
        p.inertia = [[0.02, 0.0, 0.0], [0.0, 0.05, 0.0], [0.0, 0.0, 0.07]];
        let mut x = AgentState::standing(0.0, 0.0, 0.0, 0.28);
        x.omega = Vector3::new(0.0, 0.0, 1.0);
        let dx = continuous_dynamics(&x, &Vector3::zeros(), &Vector3::zeros(), &p).unwrap();
        assert_relative_eq!(dx.fixed_rows::<3>(9).into_owned(), Vector3::zeros());
    }

    #[test]
    fn euler_step_fixed_point_and_drift() {
        let p = params();
        let sched = ContactSchedule::default();
        let flags = contact_flags(0.0, &sched);
        let hover = GrfInput::hover(&p, &flags);
        let x = AgentState::standing(0.0, 0.0, 0.0, 0.28);
        let next = euler_step_nominal(&x, &hover, 0.01, &p, &sched).unwrap();
        assert_relative_eq!(next.to_vector(), x.to_vector(), epsilon = 1e-12);

        let mut x = x;
        x.v = Vector3::new(0.5, 0.0, 0.0);
        let next = euler_step_nominal(&x, &hover, 0.01, &p, &sched).unwrap();
        assert_relative_eq!(next.p, x.p + Vector3::new(0.005, 0.0, 0.0), epsilon = 1e-12);
        assert_relative_eq!(next.v, x.v, epsilon = 1e-12);
    }

    #[test]
    fn euler_step_constant_force_update() {
        // With no rotation the velocity update is the exact uniformly
        // accelerated one and the position advances by the start velocity.
        let p = params();
        let mut x = AgentState::standing(0.2, -0.1, 0.0, 0.28);
        x.v = Vector3::new(0.3, -0.2, 0.05);
        let mut u = GrfInput::zero();
        u.forces[0] = Vector3::new(3.0, -2.0, 80.0);
        let feet = [x.p; 4];
        let ts = 0.01;
        let next = euler_step(&x, &u, &feet, ts, &p).unwrap();
        let acc = u.net_force() / p.mass - p.gravity();
        assert_relative_eq!(next.v, x.v + acc * ts, epsilon = 1e-12);
        assert_relative_eq!(next.p, x.p + x.v * ts, epsilon = 1e-12);
        // a = 0: closed-form uniform motion.
        let mut u = GrfInput::zero();
        u.forces[0] = Vector3::new(0.0, 0.0, p.mass * p.gravity);
        let next = euler_step(&x, &u, &feet, ts, &p).unwrap();
        assert_relative_eq!(next.p, x.p + x.v * ts, epsilon = 1e-12);
    }

    #[test]
    fn euler_step_first_order_convergence() {
        let p = params();
        let mut x = state([
            0.1, 0.0, 0.3, 0.4, -0.2, 0.1, 0.05, -0.08, 0.3, 0.5, -0.3, 0.8,
        ]);
        x.p.z = 0.28;
        let mut u = GrfInput::zero();
        u.forces[0] = Vector3::new(4.0, 2.0, 70.0);
        u.forces[3] = Vector3::new(-3.0, 1.0, 60.0);
        let feet = foot_positions(&x, &p, &ContactSchedule::default());
        let wrench = |s: &AgentState| grf_to_wrench(&u, &feet, &s.p);
        let mut errs = Vec::new();
        for ts in [0.02, 0.01, 0.005] {
            let euler = euler_step(&x, &u, &feet, ts, &p).unwrap();
            let mut reference = x;
            let fine = 200;
            for _ in 0..fine {
                reference = rk4_step(&reference, wrench, ts / fine as f64, &p).unwrap();
            }
            errs.push((euler.to_vector() - reference.to_vector()).norm());
        }
        // Local error O(ts^2): halving ts quarters the error.
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((3.5..4.5).contains(&ratio), "ratio {ratio}, errs {errs:?}");
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let p = params();
        let x = state([
            0.3, -0.2, 0.29, 0.4, 0.1, -0.05, 0.1, -0.15, 0.7, 0.3, -0.6, 0.9,
        ]);
        let mut u = GrfInput::zero();
        u.forces[1] = Vector3::new(5.0, -3.0, 65.0);
        u.forces[2] = Vector3::new(-2.0, 4.0, 58.0);
        let feet = foot_positions(&x, &p, &ContactSchedule::default());
        let (jx, ju) = euler_step_jacobians(&x, &u, &feet, 0.01, &p).unwrap();
        let h = 1e-6;
        for j in 0..NX {
            let mut xp = x.to_vector();
            let mut xm = x.to_vector();
            xp[j] += h;
            xm[j] -= h;
            let fp = euler_step(&AgentState::from_vector(&xp), &u, &feet, 0.01, &p).unwrap();
            let fm = euler_step(&AgentState::from_vector(&xm), &u, &feet, 0.01, &p).unwrap();
            let fd = (fp.to_vector() - fm.to_vector()) / (2.0 * h);
            assert_relative_eq!(jx.column(j).into_owned(), fd, epsilon = 1e-8);
        }
        for j in 0..NU {
            let mut up = u.to_vector();
            let mut um = u.to_vector();
            up[j] += h;
            um[j] -= h;
            let fp = euler_step(&x, &GrfInput::from_vector(&up), &feet, 0.01, &p).unwrap();
            let fm = euler_step(&x, &GrfInput::from_vector(&um), &feet, 0.01, &p).unwrap();
            let fd = (fp.to_vector() - fm.to_vector()) / (2.0 * h);
            assert_relative_eq!(ju.column(j).into_owned(), fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn contact_flags_examples() {
        let s = ContactSchedule::default();
        assert_eq!(contact_flags(0.0, &s), [true, false, false, true]);
        assert_eq!(contact_flags(0.18, &s), [false, true, true, false]);
        assert_eq!(contact_flags(0.36, &s), contact_flags(0.0, &s));
        let shifted = ContactSchedule {
            phase_offset: 0.5,
            ..s
        };
        assert_eq!(contact_flags(0.0, &shifted), [false, true, true, false]);
        // tick arithmetic at the boundary
        assert_eq!(contact_flags(18.0 * 0.01, &s), [false, true, true, false]);
        assert_eq!(contact_flags(17.0 * 0.01, &s), [true, false, false, true]);
    }

    #[test]
    fn foot_positions_examples() {
        let p = params();
        let s = ContactSchedule::default();
        let x = AgentState::standing(0.0, 0.0, 0.0, 0.28);
        let feet = foot_positions(&x, &p, &s);
        for (f, hip) in feet.iter().zip(&p.hip_offsets) {
            assert_relative_eq!(*f, Vector3::new(hip[0], hip[1], 0.0));
        }
        let x = AgentState::standing(0.0, 0.0, FRAC_PI_2, 0.28);
        let feet = foot_positions(&x, &p, &s);
        for (f, hip) in feet.iter().zip(&p.hip_offsets) {
            assert_relative_eq!(*f, Vector3::new(-hip[1], hip[0], 0.0), epsilon = 1e-12);
        }
        let mut x = AgentState::standing(0.0, 0.0, 0.0, 0.28);
        x.v = Vector3::new(1.0, 0.0, 0.0);
        let feet = foot_positions(&x, &p, &s);
        for (f, hip) in feet.iter().zip(&p.hip_offsets) {
            assert_relative_eq!(
                *f,
                Vector3::new(hip[0] + 0.09, hip[1], 0.0),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn foothold_tracker_pins_stance_feet() {
        let p = params();
        let s = ContactSchedule::default();
        let mut tracker = FootholdTracker::new();
        let mut x = AgentState::standing(0.0, 0.0, 0.0, 0.28);
        x.v = Vector3::new(0.5, 0.0, 0.0);
        let first = tracker.update(0.0, &x, &p, &s);
        x.p.x += 0.05;
        let later = tracker.update(0.05, &x, &p, &s);
        // FL and RR stay put, FR and RL follow the body.
        assert_eq!(first[0], later[0]);
        assert_eq!(first[3], later[3]);
        assert_relative_eq!(later[1].x - first[1].x, 0.05, epsilon = 1e-12);
        // After the switch the new stance pair is pinned at its touchdown.
        let td = tracker.update(0.18, &x, &p, &s);
        x.p.x += 0.05;
        let after = tracker.update(0.19, &x, &p, &s);
        assert_eq!(td[1], after[1]);
        assert_eq!(td[2], after[2]);
    }

    #[test]
    fn friction_cone_examples() {
        let p = params();
        let flags = [true, false, false, true];
        let mut u = GrfInput::zero();
        u.forces[0] = Vector3::new(0.0, 0.0, 30.0);
        u.forces[3] = Vector3::new(0.0, 0.0, 30.0);
        assert!(friction_cone_residuals(&u, &p, &flags)
            .iter()
            .all(|&r| r >= 0.0));
        u.forces[0] = Vector3::new(20.0, 0.0, 30.0);
        let r = friction_cone_residuals(&u, &p, &flags);
        assert_relative_eq!(r[2], -2.0, epsilon = 1e-12);
        // swing legs at zero force sit on the boundary
        assert_eq!(&r[4..7], &[0.0, 0.0, 0.0]);
        assert_eq!(r.len(), 14);
    }

    #[test]
    fn rk4_ballistic_flight_is_exact() {
        let p = params();
        let mut x = AgentState::standing(0.0, 0.0, 0.0, 0.3);
        x.v = Vector3::new(0.4, -0.3, 1.2);
        let start = x;
        for _ in 0..500 {
            x = rk4_step(&x, |_| (Vector3::zeros(), Vector3::zeros()), 1e-3, &p).unwrap();
        }
        let t = 0.5;
        let expected = start.p + start.v * t - 0.5 * p.gravity() * t * t;
        assert!((x.p - expected).norm() <= 1e-8);
    }

    #[test]
    fn yaw_wraps_only_through_angles() {
        let r = rotation(&Vector3::new(0.0, 0.0, PI));
        assert_relative_eq!(r * Vector3::x(), -Vector3::x(), epsilon = 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn force() -> impl Strategy<Value = Vector3<f64>> {
            (-50.0..50.0f64, -50.0..50.0f64, -50.0..150.0f64)
                .prop_map(|(x, y, z)| Vector3::new(x, y, z))
        }

        fn grf() -> impl Strategy<Value = GrfInput> {
            [force(), force(), force(), force()].prop_map(|forces| GrfInput { forces })
        }

        proptest! {
            #[test]
            fn wrench_is_linear(u1 in grf(), u2 in grf(), a in -3.0..3.0f64, b in -3.0..3.0f64,
                                px in -1.0..1.0f64, py in -1.0..1.0f64) {
                let p = Vector3::new(px, py, 0.28);
                let feet = foot_positions(&AgentState::standing(px, py, 0.3, 0.28),
                    &ModelParams::default(), &ContactSchedule::default());
                let mix = GrfInput::from_vector(&(a * u1.to_vector() + b * u2.to_vector()));
                let (f, t) = grf_to_wrench(&mix, &feet, &p);
                let (f1, t1) = grf_to_wrench(&u1, &feet, &p);
                let (f2, t2) = grf_to_wrench(&u2, &feet, &p);
                prop_assert!((f - (a * f1 + b * f2)).norm() <= 1e-12 * (1.0 + f.norm()));
                prop_assert!((t - (a * t1 + b * t2)).norm() <= 1e-12 * (1.0 + t.norm()));
            }

            #[test]
            fn trot_has_two_stance_legs_and_is_periodic(t in 0.0..100.0f64, off in 0.0..1.0f64) {
                let s = ContactSchedule { step_time: 0.18, phase_offset: off };
                let flags = contact_flags(t, &s);
                prop_assert_eq!(flags.iter().filter(|&&f| f).count(), 2);
                prop_assert!(flags[0] == flags[3] && flags[1] == flags[2]);
                // away from switching instants the schedule repeats every cycle
                let phase = ((t + PHASE_EPS) / s.cycle() + off).rem_euclid(1.0);
                prop_assume!((phase - 0.5).abs() > 1e-6 && phase > 1e-6 && phase < 1.0 - 1e-6);
                prop_assert_eq!(flags, contact_flags(t + s.cycle(), &s));
            }
        }
    }
}
