use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hocbf::com_projection;
use crate::srb::{AgentState, GrfInput, NX};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostParams {
    /// Diagonal of the stage weight Q, ordered like the state.
    pub q_diag: [f64; NX],
    /// Diagonal of the terminal weight P.
    pub p_diag: [f64; NX],
    /// Weight on each force component (x, y, z) of every stance leg.
    pub r_diag: [f64; 3],
    /// Consensus weight.
    pub w: f64,
    /// Lennard-Jones well depth.
    pub epsilon: f64,
    /// Lennard-Jones zero-crossing distance, meters.
    pub sigma: f64,
    /// Lower clamp on the distance inside the optimizer, meters.
    pub lj_min_distance: f64,
}

const Q_DIAG: [f64; NX] = [
    1e5, 1e5, 8e6, // p
    5e5, 5e5, 8e6, // v
    1e4, 1e4, 1e4, // theta
    1e4, 1e4, 1e4, // omega
];

impl Default for CostParams {
    fn default() -> Self {
        CostParams {
            q_diag: Q_DIAG,
            p_diag: Q_DIAG.map(|q| 100.0 * q),
            r_diag: [1.0; 3],
            w: 1e9,
            epsilon: 50.0,
            sigma: 0.85,
            lj_min_distance: 0.05,
        }
    }
}

impl CostParams {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let all_pos = |v: &[f64]| v.iter().all(|&x| x > 0.0 && x.is_finite());
        if !all_pos(&self.q_diag) {
            return Err(Error::config(
                format!("{prefix}.q_diag"),
                "entries must be > 0",
            ));
        }
        if !all_pos(&self.p_diag) {
            return Err(Error::config(
                format!("{prefix}.p_diag"),
                "entries must be > 0",
            ));
        }
        if !all_pos(&self.r_diag) {
            return Err(Error::config(
                format!("{prefix}.r_diag"),
                "entries must be > 0",
            ));
        }
        if !(self.w >= 0.0) {
            return Err(Error::config(format!("{prefix}.w"), "must be >= 0"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config(format!("{prefix}.epsilon"), "must be > 0"));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::config(format!("{prefix}.sigma"), "must be > 0 m"));
        }
        if !(self.lj_min_distance > 0.0) {
            return Err(Error::config(
                format!("{prefix}.lj_min_distance"),
                "must be > 0 m",
            ));
        }
        Ok(())
    }

    /// Distance at which the interaction force vanishes, `2^(1/6) sigma`.
    pub fn lj_equilibrium(&self) -> f64 {
        2f64.powf(1.0 / 6.0) * self.sigma
    }
}

/// `4 eps ((sigma/rho)^12 - (sigma/rho)^6)`
pub fn lj_potential(rho: f64, epsilon: f64, sigma: f64) -> Result<f64> {
    if !(rho > 0.0) {
        return Err(Error::NonPositiveDistance(rho));
    }
    let s6 = (sigma / rho).powi(6);
    Ok(4.0 * epsilon * (s6 * s6 - s6))
}

/// Value, first and second derivative in `rho`, clamped below at `rho_min`
/// (constant below the clamp).
fn lj_derivatives(rho: f64, p: &CostParams) -> (f64, f64, f64) {
    let clamped = rho < p.lj_min_distance;
    let r = rho.max(p.lj_min_distance);
    let s6 = (p.sigma / r).powi(6);
    let s12 = s6 * s6;
    let u = 4.0 * p.epsilon * (s12 - s6);
    if clamped {
        return (u, 0.0, 0.0);
    }
    let du = 24.0 * p.epsilon / r * (s6 - 2.0 * s12);
    let d2u = 4.0 * p.epsilon / (r * r) * (156.0 * s12 - 42.0 * s6);
    (u, du, d2u)
}

/// Weighted consensus term of one neighbor as a function of the agent's xy
/// position: value, gradient and a positive semidefinite Hessian
/// approximation (negative curvature dropped).
pub fn lj_gradient_hessian(
    com: &Vector2<f64>,
    other: &Vector2<f64>,
    params: &CostParams,
) -> (f64, Vector2<f64>, Matrix2<f64>) {
    let d = com - other;
    let rho = d.norm();
    let (u, du, d2u) = lj_derivatives(rho, params);
    let w = params.w;
    if rho < 1e-12 {
        return (w * u, Vector2::zeros(), Matrix2::zeros());
    }
    let n = d / rho;
    let nnt = n * n.transpose();
    let radial = d2u.max(0.0);
    let tangential = (du / rho).max(0.0);
    let hess = radial * nnt + tangential * (Matrix2::identity() - nnt);
    (w * u, w * du * n, w * hess)
}

fn weighted_sq(diff: impl Iterator<Item = (f64, f64)>) -> f64 {
    diff.map(|(d, q)| q * d * d).sum()
}

pub fn stage_cost(
    x: &AgentState,
    u: &GrfInput,
    x_ref: &AgentState,
    u_ref: &GrfInput,
    neighbor_coms: &[Vector2<f64>],
    params: &CostParams,
) -> f64 {
    let dx = x.to_vector() - x_ref.to_vector();
    let state = weighted_sq(dx.iter().copied().zip(params.q_diag));
    let mut input = 0.0;
    for (f, fr) in u.forces.iter().zip(&u_ref.forces) {
        input += weighted_sq((f - fr).iter().copied().zip(params.r_diag));
    }
    let com = com_projection(x);
    let consensus: f64 = neighbor_coms
        .iter()
        .map(|q| lj_gradient_hessian(&com, q, params).0)
        .sum();
    state + input + consensus
}

pub fn terminal_cost(x_n: &AgentState, x_ref_n: &AgentState, params: &CostParams) -> f64 {
    let dx = x_n.to_vector() - x_ref_n.to_vector();
    weighted_sq(dx.iter().copied().zip(params.p_diag))
}
