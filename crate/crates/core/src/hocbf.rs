//! Distance barriers between agents and obstacles and the discrete-time
//! higher-order barrier series of relative degree two.
//!
//! With linear class-K functions `a1(s) = c1 s`, `a2(s) = c2 s`:
//!
//! ```text
//! psi0(t) = h(t)
//! psi1(t) = h(t+1) - h(t) + c1 h(t)
//! psi2(t) = psi1(t+1) - psi1(t) + c2 psi1(t)
//!         = h(t+2) - (2 - c1 - c2) h(t+1) + (1 - c1)(1 - c2) h(t)
//! ```

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::srb::AgentState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SafetyParams {
    /// Threshold distance between COMs (and COM to obstacle center), meters.
    pub d_th: f64,
    pub alpha1_gain: f64,
    pub alpha2_gain: f64,
    /// Added to `d_th` inside the controllers only, meters.
    pub margin: f64,
    pub posture: PostureLimits,
}

/// Envelope on the planned states. Infinite values drop the rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostureLimits {
    /// Roll and pitch, rad.
    pub tilt: f64,
    /// Roll and pitch body rates, rad/s.
    pub tilt_rate: f64,
    /// Height error to the reference, m.
    pub height: f64,
    /// Yaw error to the reference, rad.
    pub yaw: f64,
    /// Yaw body rate, rad/s.
    pub yaw_rate: f64,
}

impl Default for PostureLimits {
    fn default() -> Self {
        PostureLimits {
            tilt: 0.2,
            tilt_rate: 2.0,
            height: 0.05,
            yaw: 0.3,
            yaw_rate: 2.0,
        }
    }
}

impl Default for SafetyParams {
    fn default() -> Self {
        SafetyParams {
            d_th: 0.6,
            alpha1_gain: 0.1,
            alpha2_gain: 0.05,
            margin: 0.03,
            posture: PostureLimits::default(),
        }
    }
}

impl SafetyParams {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if !(self.d_th > 0.0) {
            return Err(Error::config(format!("{prefix}.d_th"), "must be > 0 m"));
        }
        for (name, g) in [
            ("alpha1_gain", self.alpha1_gain),
            ("alpha2_gain", self.alpha2_gain),
        ] {
            if !(g > 0.0 && g < 1.0) {
                return Err(Error::config(
                    format!("{prefix}.{name}"),
                    "must lie in (0, 1)",
                ));
            }
        }
        if !(self.margin >= 0.0) {
            return Err(Error::config(format!("{prefix}.margin"), "must be >= 0 m"));
        }
        let p = &self.posture;
        for (name, v) in [
            ("tilt", p.tilt),
            ("tilt_rate", p.tilt_rate),
            ("height", p.height),
            ("yaw", p.yaw),
            ("yaw_rate", p.yaw_rate),
        ] {
            if !(v > 0.0) {
                return Err(Error::config(
                    format!("{prefix}.posture.{name}"),
                    "must be > 0",
                ));
            }
        }
        Ok(())
    }

    pub fn alpha1(&self, s: f64) -> f64 {
        self.alpha1_gain * s
    }

    pub fn alpha2(&self, s: f64) -> f64 {
        self.alpha2_gain * s
    }

    /// Copy with the margin folded into `d_th`, as the controllers use it.
    pub fn with_margin(&self) -> SafetyParams {
        SafetyParams {
            d_th: self.d_th + self.margin,
            margin: 0.0,
            ..*self
        }
    }

    /// Weights `(w0, w1, w2)` with `psi2(t) = w0 h(t) + w1 h(t+1) + w2 h(t+2)`.
    pub fn psi2_weights(&self) -> [f64; 3] {
        let (c1, c2) = (self.alpha1_gain, self.alpha2_gain);
        [(1.0 - c1) * (1.0 - c2), -(2.0 - c1 - c2), 1.0]
    }
}

/// Which neighbor or obstacle attains the minimum barrier value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArgminKind {
    Agent(usize),
    Obstacle(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarrierEval {
    pub h: f64,
    pub psi0: f64,
    pub psi1: f64,
    pub psi2: f64,
    pub argmin: Option<ArgminKind>,
}

/// How the barrier constraints enter the local NLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintForm {
    /// One row per step on the minimum over all neighbors and obstacles.
    #[default]
    Min,
    /// One row per step per neighbor/obstacle.
    PerPair,
}

pub fn com_projection(x: &AgentState) -> Vector2<f64> {
    Vector2::new(x.p.x, x.p.y)
}

fn distance_barrier(a: &Vector2<f64>, b: &Vector2<f64>, params: &SafetyParams) -> f64 {
    (a - b).norm() - params.d_th
}

pub fn h_pair(x_i: &AgentState, x_j: &AgentState, params: &SafetyParams) -> f64 {
    distance_barrier(&com_projection(x_i), &com_projection(x_j), params)
}

pub fn h_obstacle(x_i: &AgentState, o: &Vector2<f64>, params: &SafetyParams) -> f64 {
    distance_barrier(&com_projection(x_i), o, params)
}

/// Minimum barrier over neighbors then obstacles; ties go to the earlier
/// entry in that order.
pub fn h_min_at(
    com: &Vector2<f64>,
    neighbors: &[Vector2<f64>],
    obstacles: &[Vector2<f64>],
    params: &SafetyParams,
) -> Result<(f64, ArgminKind)> {
    let agents = neighbors
        .iter()
        .enumerate()
        .map(|(j, q)| (distance_barrier(com, q, params), ArgminKind::Agent(j)));
    let obs = obstacles
        .iter()
        .enumerate()
        .map(|(l, o)| (distance_barrier(com, o, params), ArgminKind::Obstacle(l)));
    let mut best: Option<(f64, ArgminKind)> = None;
    for (h, kind) in agents.chain(obs) {
        match best {
            Some((b, _)) if h >= b => {}
            _ => best = Some((h, kind)),
        }
    }
    best.ok_or(Error::EmptyEnvironment)
}

pub fn h_min(
    x_i: &AgentState,
    neighbors: &[Vector2<f64>],
    obstacles: &[Vector2<f64>],
    params: &SafetyParams,
) -> Result<(f64, ArgminKind)> {
    h_min_at(&com_projection(x_i), neighbors, obstacles, params)
}

/// Barrier series at `t` from three consecutive barrier values.
pub fn psi_series(h_t: f64, h_t1: f64, h_t2: f64, params: &SafetyParams) -> BarrierEval {
    let psi1 = (h_t1 - h_t) + params.alpha1(h_t);
    let psi1_next = (h_t2 - h_t1) + params.alpha1(h_t1);
    let psi2 = (psi1_next - psi1) + params.alpha2(psi1);
    BarrierEval {
        h: h_t,
        psi0: h_t,
        psi1,
        psi2,
        argmin: None,
    }
}

/// A barrier constraint row `value >= 0` together with its gradient with
/// respect to the xy COM positions of the predicted states it touches.
#[derive(Debug, Clone, PartialEq)]
pub struct BarrierRow {
    pub value: f64,
    /// `(state index k, d value / d p_xy(k))`
    pub terms: Vec<(usize, Vector2<f64>)>,
}

fn unit_or_x(d: Vector2<f64>) -> Vector2<f64> {
    let n = d.norm();
    if n > 1e-12 {
        d / n
    } else {
        Vector2::x()
    }
}

/// Neighbor COM estimates, indexed `[neighbor][k]`.
pub type NeighborTracks = [Vec<Vector2<f64>>];

fn check_tracks(tracks: &NeighborTracks, need: usize) -> Result<()> {
    for (j, t) in tracks.iter().enumerate() {
        if t.len() < need {
            return Err(Error::ShortEstimate {
                neighbor: j,
                got: t.len(),
                need,
            });
        }
    }
    Ok(())
}

/// Barrier value and gradient for one pair at step `k`.
fn pair_value(
    com: &Vector2<f64>,
    k: usize,
    kind: ArgminKind,
    tracks: &NeighborTracks,
    obstacles: &[Vector2<f64>],
    params: &SafetyParams,
) -> (f64, Vector2<f64>) {
    let other = match kind {
        ArgminKind::Agent(j) => tracks[j][k],
        ArgminKind::Obstacle(l) => obstacles[l],
    };
    let d = com - other;
    (d.norm() - params.d_th, unit_or_x(d))
}

fn all_pairs(n_neighbors: usize, n_obstacles: usize) -> impl Iterator<Item = ArgminKind> {
    (0..n_neighbors)
        .map(ArgminKind::Agent)
        .chain((0..n_obstacles).map(ArgminKind::Obstacle))
}

/// HOCBF rows `psi2(k) >= 0` for `k = 0..=N-2` along a predicted plan.
///
/// In the min form the gradient uses the active pair at each step.
pub fn hocbf_rows(
    coms: &[Vector2<f64>],
    tracks: &NeighborTracks,
    obstacles: &[Vector2<f64>],
    params: &SafetyParams,
    form: ConstraintForm,
) -> Result<Vec<BarrierRow>> {
    let n_states = coms.len();
    check_tracks(tracks, n_states)?;
    if n_states < 3 || (tracks.is_empty() && obstacles.is_empty()) {
        return Ok(Vec::new());
    }
    let w = params.psi2_weights();
    let mut rows = Vec::new();
    match form {
        ConstraintForm::Min => {
            let mut vals = Vec::with_capacity(n_states);
            for (k, com) in coms.iter().enumerate() {
                let nb: Vec<Vector2<f64>> = tracks.iter().map(|t| t[k]).collect();
                let (_, kind) = h_min_at(com, &nb, obstacles, params)?;
                vals.push(pair_value(com, k, kind, tracks, obstacles, params));
            }
            for k in 0..n_states - 2 {
                let value = (0..3).map(|m| w[m] * vals[k + m].0).sum();
                let terms = (0..3).map(|m| (k + m, w[m] * vals[k + m].1)).collect();
                rows.push(BarrierRow { value, terms });
            }
        }
        ConstraintForm::PerPair => {
            for kind in all_pairs(tracks.len(), obstacles.len()) {
                let vals: Vec<_> = coms
                    .iter()
                    .enumerate()
                    .map(|(k, com)| pair_value(com, k, kind, tracks, obstacles, params))
                    .collect();
                for k in 0..n_states - 2 {
                    let value = (0..3).map(|m| w[m] * vals[k + m].0).sum();
                    let terms = (0..3).map(|m| (k + m, w[m] * vals[k + m].1)).collect();
                    rows.push(BarrierRow { value, terms });
                }
            }
        }
    }
    Ok(rows)
}

/// Plain distance rows `h(k) >= 0` for `k = 1..=N` (no barrier dynamics).
pub fn distance_rows(
    coms: &[Vector2<f64>],
    tracks: &NeighborTracks,
    obstacles: &[Vector2<f64>],
    params: &SafetyParams,
    form: ConstraintForm,
) -> Result<Vec<BarrierRow>> {
    check_tracks(tracks, coms.len())?;
    if tracks.is_empty() && obstacles.is_empty() {
        return Ok(Vec::new());
    }
    let mut rows = Vec::new();
    match form {
        ConstraintForm::Min => {
            for (k, com) in coms.iter().enumerate().skip(1) {
                let nb: Vec<Vector2<f64>> = tracks.iter().map(|t| t[k]).collect();
                let (_, kind) = h_min_at(com, &nb, obstacles, params)?;
                let (value, grad) = pair_value(com, k, kind, tracks, obstacles, params);
                rows.push(BarrierRow {
                    value,
                    terms: vec![(k, grad)],
                });
            }
        }
        ConstraintForm::PerPair => {
            for kind in all_pairs(tracks.len(), obstacles.len()) {
                for (k, com) in coms.iter().enumerate().skip(1) {
                    let (value, grad) = pair_value(com, k, kind, tracks, obstacles, params);
                    rows.push(BarrierRow {
                        value,
                        terms: vec![(k, grad)],
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// HOCBF residuals of a predicted state sequence against neighbor state
/// estimates covering the same indices.
pub fn hocbf_residuals(
    states: &[AgentState],
    neighbor_estimates: &[Vec<AgentState>],
    obstacles: &[Vector2<f64>],
    params: &SafetyParams,
    form: ConstraintForm,
) -> Result<Vec<f64>> {
    let coms: Vec<_> = states.iter().map(com_projection).collect();
    let tracks: Vec<Vec<_>> = neighbor_estimates
        .iter()
        .map(|est| est.iter().map(com_projection).collect())
        .collect();
    Ok(hocbf_rows(&coms, &tracks, obstacles, params, form)?
        .into_iter()
        .map(|r| r.value)
        .collect())
}

/// Barrier series at the first step of a plan, with the minimizing pair.
pub fn barrier_eval(
    states: &[AgentState],
    neighbor_estimates: &[Vec<AgentState>],
    obstacles: &[Vector2<f64>],
    params: &SafetyParams,
) -> Result<BarrierEval> {
    let h_at = |k: usize| {
        let nb: Vec<_> = neighbor_estimates
            .iter()
            .map(|e| com_projection(&e[k]))
            .collect();
        h_min(&states[k], &nb, obstacles, params)
    };
    let (h0, kind) = h_at(0)?;
    let (h1, _) = h_at(1)?;
    let (h2, _) = h_at(2)?;
    let mut eval = psi_series(h0, h1, h2, params);
    eval.argmin = Some(kind);
    Ok(eval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;

    fn at(x: f64, y: f64) -> AgentState {
        AgentState::standing(x, y, 0.0, 0.28)
    }

    #[test]
    fn projection_drops_everything_but_xy() {
        let mut x = at(1.0, 2.0);
        assert_eq!(com_projection(&x), Vector2::new(1.0, 2.0));
        x.p.z = 5.0;
        x.v = Vector3::new(1.0, 2.0, 3.0);
        x.theta = Vector3::new(0.1, 0.2, 0.3);
        x.omega = Vector3::new(-1.0, 0.0, 4.0);
        assert_eq!(com_projection(&x), Vector2::new(1.0, 2.0));
        assert_eq!(
            com_projection(&AgentState::standing(0.0, 0.0, 0.0, 9.0)),
            Vector2::zeros()
        );
    }

    #[test]
    fn pair_and_obstacle_barriers() {
        let p = SafetyParams::default();
        assert_relative_eq!(
            h_pair(&at(0.0, 0.0), &at(0.6, 0.0), &p),
            0.0,
            epsilon = 1e-15
        );
        assert_relative_eq!(
            h_pair(&at(0.0, 0.0), &at(1.6, 0.0), &p),
            1.0,
            epsilon = 1e-15
        );
        assert_relative_eq!(h_pair(&at(0.3, 0.3), &at(0.3, 0.3), &p), -0.6);
        assert_relative_eq!(h_obstacle(&at(1.0, 1.0), &Vector2::new(1.0, 1.0), &p), -0.6);
        assert_relative_eq!(h_obstacle(&at(0.0, 0.0), &Vector2::new(0.0, 0.6), &p), 0.0);
        assert_relative_eq!(
            h_obstacle(&at(3.0, 4.0), &Vector2::zeros(), &p),
            4.4,
            epsilon = 1e-12
        );
    }

    #[test]
    fn min_barrier_and_tie_break() {
        let p = SafetyParams::default();
        let x = at(0.0, 0.0);
        let (h, kind) =
            h_min(&x, &[Vector2::new(1.0, 0.0)], &[Vector2::new(0.0, 0.7)], &p).unwrap();
        assert_relative_eq!(h, 0.1, epsilon = 1e-12);
        assert_eq!(kind, ArgminKind::Obstacle(0));

        let (h, kind) = h_min(
            &x,
            &[Vector2::new(0.0, 3.0), Vector2::new(2.0, 0.0)],
            &[],
            &p,
        )
        .unwrap();
        assert_relative_eq!(h, 1.4, epsilon = 1e-12);
        assert_eq!(kind, ArgminKind::Agent(1));

        let (_, kind) =
            h_min(&x, &[Vector2::new(1.0, 0.0)], &[Vector2::new(0.0, 1.0)], &p).unwrap();
        assert_eq!(kind, ArgminKind::Agent(0));

        assert!(matches!(
            h_min(&x, &[], &[], &p),
            Err(Error::EmptyEnvironment)
        ));
    }

    #[test]
    fn psi_series_examples() {
        let p = SafetyParams::default();
        let e = psi_series(0.4, 0.4, 0.4, &p);
        assert_relative_eq!(e.psi0, 0.4);
        assert_relative_eq!(e.psi1, 0.04, epsilon = 1e-15);
        assert_relative_eq!(e.psi2, 0.002, epsilon = 1e-15);

        let e = psi_series(0.4, 0.38, 0.37, &p);
        assert_relative_eq!(e.psi1, 0.02, epsilon = 1e-15);
        assert_relative_eq!(e.psi2, 0.009, epsilon = 1e-15);

        let e = psi_series(0.0, 0.0, 0.0, &p);
        assert_eq!((e.psi0, e.psi1, e.psi2), (0.0, 0.0, 0.0));
        assert_eq!(e.h, e.psi0);
    }

    #[test]
    fn weights_agree_with_series() {
        let p = SafetyParams::default();
        let w = p.psi2_weights();
        let (a, b, c) = (0.7, 0.31, -0.2);
        assert_relative_eq!(
            psi_series(a, b, c, &p).psi2,
            w[0] * a + w[1] * b + w[2] * c,
            epsilon = 1e-15
        );
    }

    #[test]
    fn static_agent_residuals_are_constant() {
        let p = SafetyParams::default();
        let states = vec![at(0.0, 0.0); 11];
        let obstacles = [Vector2::new(5.0, 0.0)];
        let r = hocbf_residuals(&states, &[], &obstacles, &p, ConstraintForm::Min).unwrap();
        assert_eq!(r.len(), 9);
        let h = 4.4;
        for v in r {
            assert_relative_eq!(v, p.alpha2(p.alpha1(h)), epsilon = 1e-12);
        }
    }

    #[test]
    fn head_on_rollout_violates_somewhere() {
        // Brute-force oracle: two agents closing at 1 m/s each from 2 m
        // apart under the Euler model with no correction.
        let p = SafetyParams::default();
        let ts = 0.01;
        let start_gap = 2.0;
        let mut found = false;
        // slide the horizon along the uncorrected rollout
        for t0 in 0..200 {
            let gap0 = start_gap - 2.0 * ts * t0 as f64;
            let me: Vec<_> = (0..11)
                .map(|k| at(-0.5 * gap0 + ts * k as f64, 0.0))
                .collect();
            let other: Vec<_> = (0..11)
                .map(|k| at(0.5 * gap0 - ts * k as f64, 0.0))
                .collect();
            let r = hocbf_residuals(&me, &[other], &[], &p, ConstraintForm::Min).unwrap();
            if r.iter().any(|&v| v < 0.0) {
                found = true;
                // the violation appears while still outside the threshold
                assert!(gap0 > p.d_th);
                break;
            }
        }
        assert!(found);
    }

    #[test]
    fn min_form_counts_rows_per_step() {
        let p = SafetyParams::default();
        let states = vec![at(0.0, 0.0); 11];
        let nb = vec![vec![at(3.0, 0.0); 11]];
        let obstacles: Vec<_> = (0..20).map(|i| Vector2::new(2.0 + i as f64, 2.0)).collect();
        let r = hocbf_residuals(&states, &nb, &obstacles, &p, ConstraintForm::Min).unwrap();
        assert_eq!(r.len(), 9);
        let r = hocbf_residuals(&states, &nb, &obstacles, &p, ConstraintForm::PerPair).unwrap();
        assert_eq!(r.len(), 21 * 9);
        assert!(hocbf_residuals(&states, &[], &[], &p, ConstraintForm::Min)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn short_estimate_is_an_error() {
        let p = SafetyParams::default();
        let states = vec![at(0.0, 0.0); 11];
        let nb = vec![vec![at(3.0, 0.0); 10]];
        assert!(matches!(
            hocbf_residuals(&states, &nb, &[], &p, ConstraintForm::Min),
            Err(Error::ShortEstimate {
                neighbor: 0,
                got: 10,
                need: 11
            })
        ));
    }

    #[test]
    fn row_gradients_match_finite_differences() {
        let p = SafetyParams::default();
        let coms: Vec<_> = (0..11)
            .map(|k| Vector2::new(0.05 * k as f64, 0.02 * (k as f64).sin()))
            .collect();
        let tracks = vec![(0..11)
            .map(|k| Vector2::new(1.5 - 0.04 * k as f64, 0.3))
            .collect::<Vec<_>>()];
        let obstacles = [Vector2::new(0.6, -1.0), Vector2::new(2.0, 1.0)];
        for form in [ConstraintForm::Min, ConstraintForm::PerPair] {
            let rows = hocbf_rows(&coms, &tracks, &obstacles, &p, form).unwrap();
            let h = 1e-7;
            for (r, row) in rows.iter().enumerate() {
                for &(k, g) in &row.terms {
                    for axis in 0..2 {
                        let mut plus = coms.clone();
                        let mut minus = coms.clone();
                        plus[k][axis] += h;
                        minus[k][axis] -= h;
                        let vp = hocbf_rows(&plus, &tracks, &obstacles, &p, form).unwrap()[r].value;
                        let vm =
                            hocbf_rows(&minus, &tracks, &obstacles, &p, form).unwrap()[r].value;
                        assert_relative_eq!(g[axis], (vp - vm) / (2.0 * h), epsilon = 1e-7);
                    }
                }
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn pt() -> impl Strategy<Value = Vector2<f64>> {
            (-5.0..5.0f64, -5.0..5.0f64).prop_map(|(x, y)| Vector2::new(x, y))
        }

        proptest! {
            #[test]
            fn min_bounds_every_pair(me in pt(), nb in proptest::collection::vec(pt(), 0..4),
                                     obs in proptest::collection::vec(pt(), 1..6)) {
                let p = SafetyParams::default();
                let (h, _) = h_min_at(&me, &nb, &obs, &p).unwrap();
                for q in nb.iter().chain(&obs) {
                    prop_assert!(h <= (me - q).norm() - p.d_th);
                }
            }

            #[test]
            fn translation_invariant(shift in pt(), seq in proptest::collection::vec(pt(), 3),
                                     other in pt()) {
                let p = SafetyParams::default();
                let coms: Vec<_> = seq.clone();
                let moved: Vec<_> = seq.iter().map(|c| c + shift).collect();
                let track = vec![vec![other; 3]];
                let track_moved = vec![vec![other + shift; 3]];
                let a = hocbf_rows(&coms, &track, &[], &p, ConstraintForm::Min).unwrap();
                let b = hocbf_rows(&moved, &track_moved, &[], &p, ConstraintForm::Min).unwrap();
                prop_assert!((a[0].value - b[0].value).abs() <= 1e-12);
            }

            #[test]
            fn threshold_shifts_every_value(me in pt(), o in pt(), bump in 0.01..1.0f64) {
                let lo = SafetyParams::default();
                let hi = SafetyParams { d_th: lo.d_th + bump, ..lo };
                let x = AgentState::standing(me.x, me.y, 0.0, 0.28);
                let d = h_obstacle(&x, &o, &lo) - h_obstacle(&x, &o, &hi);
                prop_assert!((d - bump).abs() <= 1e-12);
            }
        }
    }
}
