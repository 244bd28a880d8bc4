use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::srb::{grf_to_wrench, rk4_step, AgentState, GrfInput, ModelParams, N_LEGS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantParams {
    /// Integration substep, seconds; must divide the control period.
    pub dt_fine: f64,
    /// Instability thresholds: speed (m/s), roll/pitch (rad), height band (m).
    pub max_speed: f64,
    pub max_tilt: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        PlantParams {
            dt_fine: 0.001,
            max_speed: 10.0,
            max_tilt: 0.6,
            z_min: 0.12,
            z_max: 0.45,
        }
    }
}

impl PlantParams {
    pub fn validate(&self, prefix: &str, ts: f64) -> Result<()> {
        if !(self.dt_fine > 0.0) {
            return Err(Error::config(format!("{prefix}.dt_fine"), "must be > 0 s"));
        }
        let ratio = ts / self.dt_fine;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio.round() < 1.0 {
            return Err(Error::config(
                format!("{prefix}.dt_fine"),
                "must divide the control period mpc.ts",
            ));
        }
        if !(self.max_speed > 0.0 && self.max_tilt > 0.0 && self.z_max > self.z_min) {
            return Err(Error::config(
                prefix.to_string(),
                "invalid instability thresholds",
            ));
        }
        Ok(())
    }

    pub fn substeps(&self, ts: f64) -> usize {
        (ts / self.dt_fine).round() as usize
    }

    /// Reason string if `x` is outside the stable envelope.
    pub fn instability(&self, x: &AgentState) -> Option<String> {
        if !x.is_finite() {
            return Some("non-finite state".into());
        }
        if x.v.norm() > self.max_speed {
            return Some(format!("speed {:.3} m/s", x.v.norm()));
        }
        if x.theta.x.abs() > self.max_tilt || x.theta.y.abs() > self.max_tilt {
            return Some(format!("tilt roll {:.3} pitch {:.3}", x.theta.x, x.theta.y));
        }
        if x.p.z < self.z_min || x.p.z > self.z_max {
            return Some(format!("height {:.3} m", x.p.z));
        }
        None
    }
}

/// External wrench in the world frame.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Wrench {
    pub force: Vector3<f64>,
    pub torque: Vector3<f64>,
}

impl std::ops::Add for Wrench {
    type Output = Wrench;

    fn add(self, o: Wrench) -> Wrench {
        Wrench {
            force: self.force + o.force,
            torque: self.torque + o.torque,
        }
    }
}

/// One RK4 substep of the continuous dynamics, input and disturbance held.
pub fn integrate_plant(
    x: &AgentState,
    u: &GrfInput,
    feet: &[Vector3<f64>; N_LEGS],
    disturbance: &Wrench,
    dt_fine: f64,
    params: &ModelParams,
) -> Result<AgentState> {
    rk4_step(
        x,
        |s| {
            let (f, tau) = grf_to_wrench(u, feet, &s.p);
            (f + disturbance.force, tau + disturbance.torque)
        },
        dt_fine,
        params,
    )
}
