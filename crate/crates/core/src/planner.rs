//! Offline reference generation: grid A*, potential-field smoothing and
//! constant-speed time parametrization.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::srb::AgentState;

/// Lattice of cell centers `min + i * resolution`, inclusive of both bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMap {
    /// `[x_min, x_max, y_min, y_max]`, meters.
    pub bounds: [f64; 4],
    pub resolution: f64,
    pub obstacles: Vec<Vector2<f64>>,
    /// Cells within this distance of an obstacle center are blocked, meters.
    pub inflation: f64,
    nx: usize,
    ny: usize,
    blocked: Vec<bool>,
}

impl GridMap {
    pub fn new(
        bounds: [f64; 4],
        resolution: f64,
        obstacles: Vec<Vector2<f64>>,
        inflation: f64,
    ) -> Result<Self> {
        if !(resolution > 0.0) {
            return Err(Error::config("planner.resolution", "must be > 0 m"));
        }
        if !(bounds[1] > bounds[0] && bounds[3] > bounds[2]) {
            return Err(Error::config("planner.bounds", "must satisfy min < max"));
        }
        if !(inflation >= 0.0) {
            return Err(Error::config("planner.inflation", "must be >= 0 m"));
        }
        let nx = ((bounds[1] - bounds[0]) / resolution + 1e-9).floor() as usize + 1;
        let ny = ((bounds[3] - bounds[2]) / resolution + 1e-9).floor() as usize + 1;
        let mut map = GridMap {
            bounds,
            resolution,
            obstacles,
            inflation,
            nx,
            ny,
            blocked: vec![false; nx * ny],
        };
        for iy in 0..ny {
            for ix in 0..nx {
                let c = map.center(ix, iy);
                map.blocked[iy * nx + ix] =
                    map.obstacles.iter().any(|o| (c - o).norm() <= inflation);
            }
        }
        Ok(map)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn center(&self, ix: usize, iy: usize) -> Vector2<f64> {
        Vector2::new(
            self.bounds[0] + ix as f64 * self.resolution,
            self.bounds[2] + iy as f64 * self.resolution,
        )
    }

    /// Nearest cell to a world point, if inside the bounds.
    pub fn cell(&self, p: &Vector2<f64>) -> Option<(usize, usize)> {
        let fx = ((p.x - self.bounds[0]) / self.resolution).round();
        let fy = ((p.y - self.bounds[2]) / self.resolution).round();
        if fx < 0.0 || fy < 0.0 || fx as usize >= self.nx || fy as usize >= self.ny {
            return None;
        }
        Some((fx as usize, fy as usize))
    }

    pub fn is_blocked(&self, ix: usize, iy: usize) -> bool {
        self.blocked[iy * self.nx + ix]
    }

    pub fn set_blocked(&mut self, ix: usize, iy: usize, blocked: bool) {
        self.blocked[iy * self.nx + ix] = blocked;
    }

    /// Distance from `p` to the nearest obstacle center.
    pub fn clearance(&self, p: &Vector2<f64>) -> f64 {
        self.obstacles
            .iter()
            .map(|o| (p - o).norm())
            .fold(f64::INFINITY, f64::min)
    }

    pub(crate) fn neighbors(
        &self,
        ix: usize,
        iy: usize,
    ) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        const STEPS: [(i64, i64); 8] = [
            (1, 0),
            (-1, 0),
            (0, 1),
            (0, -1),
            (1, 1),
            (1, -1),
            (-1, 1),
            (-1, -1),
        ];
        STEPS.iter().filter_map(move |&(dx, dy)| {
            let x = ix as i64 + dx;
            let y = iy as i64 + dy;
            if x < 0 || y < 0 || x as usize >= self.nx || y as usize >= self.ny {
                return None;
            }
            let (x, y) = (x as usize, y as usize);
            if self.is_blocked(x, y) {
                return None;
            }
            let step = if dx != 0 && dy != 0 {
                std::f64::consts::SQRT_2
            } else {
                1.0
            };
            Some((x, y, step * self.resolution))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AstarPath {
    pub waypoints: Vec<Vector2<f64>>,
    pub cost: f64,
}

#[derive(PartialEq)]
struct Open {
    f: f64,
    order: u64,
    cell: usize,
}

impl Eq for Open {}

impl Ord for Open {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on f, then on insertion order.
        other
            .f
            .total_cmp(&self.f)
            .then_with(|| other.order.cmp(&self.order))
    }
}

impl PartialOrd for Open {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn endpoint_cell(map: &GridMap, p: &Vector2<f64>, what: &str) -> Result<(usize, usize)> {
    let c = map
        .cell(p)
        .ok_or_else(|| Error::InvalidQuery(format!("{what} ({}, {}) outside the map", p.x, p.y)))?;
    if map.is_blocked(c.0, c.1) {
        return Err(Error::NoPath {
            start: [p.x, p.y],
            goal: [p.x, p.y],
        });
    }
    Ok(c)
}

/// 8-connected shortest path between the cells nearest to `start` and `goal`.
pub fn astar(map: &GridMap, start: &Vector2<f64>, goal: &Vector2<f64>) -> Result<AstarPath> {
    let no_path = || Error::NoPath {
        start: [start.x, start.y],
        goal: [goal.x, goal.y],
    };
    let s = endpoint_cell(map, start, "start").map_err(|_| no_path())?;
    let g = endpoint_cell(map, goal, "goal").map_err(|_| no_path())?;
    let (nx, ny) = map.dims();
    let idx = |c: (usize, usize)| c.1 * nx + c.0;
    let goal_pt = map.center(g.0, g.1);
    let h = |i: usize| (map.center(i % nx, i / nx) - goal_pt).norm();

    let mut dist = vec![f64::INFINITY; nx * ny];
    let mut parent = vec![usize::MAX; nx * ny];
    let mut closed = vec![false; nx * ny];
    let mut heap = BinaryHeap::new();
    let mut order = 0u64;
    dist[idx(s)] = 0.0;
    heap.push(Open {
        f: h(idx(s)),
        order,
        cell: idx(s),
    });
    while let Some(Open { cell, .. }) = heap.pop() {
        if closed[cell] {
            continue;
        }
        closed[cell] = true;
        if cell == idx(g) {
            break;
        }
        for (x, y, w) in map.neighbors(cell % nx, cell / nx) {
            let j = y * nx + x;
            let d = dist[cell] + w;
            if !closed[j] && d < dist[j] {
                dist[j] = d;
                parent[j] = cell;
                order += 1;
                heap.push(Open {
                    f: d + h(j),
                    order,
                    cell: j,
                });
            }
        }
    }
    if !closed[idx(g)] {
        return Err(no_path());
    }
    let mut cells = vec![idx(g)];
    while let Some(&c) = cells.last() {
        if c == idx(s) {
            break;
        }
        cells.push(parent[c]);
    }
    cells.reverse();
    Ok(AstarPath {
        waypoints: cells.iter().map(|&c| map.center(c % nx, c / nx)).collect(),
        cost: dist[idx(g)],
    })
}

/// Exact minimum distance from the polyline to any obstacle center.
pub fn path_clearance(map: &GridMap, path: &[Vector2<f64>]) -> f64 {
    if path.len() == 1 {
        return map.clearance(&path[0]);
    }
    let mut best = f64::INFINITY;
    for w in path.windows(2) {
        let d = w[1] - w[0];
        let len2 = d.norm_squared();
        for o in &map.obstacles {
            let t = if len2 > 0.0 {
                ((o - w[0]).dot(&d) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            best = best.min((w[0] + d * t - o).norm());
        }
    }
    best
}

/// Drops intermediate waypoints whose removal keeps the clearance of the
/// shortcut at least the clearance of the raw path.
pub fn prune_waypoints(map: &GridMap, waypoints: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
    if waypoints.len() <= 2 {
        return waypoints.to_vec();
    }
    let floor = path_clearance(map, waypoints);
    let mut out = vec![waypoints[0]];
    let mut i = 0;
    while i < waypoints.len() - 1 {
        let mut j = waypoints.len() - 1;
        while j > i + 1 {
            let seg = [waypoints[i], waypoints[j]];
            if path_clearance(map, &seg) >= floor {
                break;
            }
            j -= 1;
        }
        out.push(waypoints[j]);
        i = j;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerParams {
    /// Grid resolution, meters.
    pub resolution: f64,
    /// Blocked radius around obstacles, meters.
    pub inflation: f64,
    /// Map margin beyond the start/goal box, meters.
    pub margin: f64,
    pub attractive_gain: f64,
    pub repulsive_gain: f64,
    /// Obstacles farther than this exert no repulsion, meters.
    pub influence: f64,
    /// Gradient step length, meters.
    pub step: f64,
    /// Distance at which a waypoint counts as reached, meters.
    pub capture_radius: f64,
    /// Arc-length spacing of the emitted path, meters.
    pub spacing: f64,
    /// Stall detection: minimum progress towards the waypoint over
    /// `stall_window` steps, meters.
    pub stall_epsilon: f64,
    pub stall_window: usize,
}

impl Default for PlannerParams {
    fn default() -> Self {
        PlannerParams {
            resolution: 0.1,
            inflation: 0.8,
            margin: 1.5,
            attractive_gain: 1.0,
            repulsive_gain: 0.5,
            influence: 0.8,
            step: 0.02,
            capture_radius: 0.05,
            spacing: 0.02,
            stall_epsilon: 1e-3,
            stall_window: 100,
        }
    }
}

impl PlannerParams {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let pos = [
            ("resolution", self.resolution),
            ("step", self.step),
            ("capture_radius", self.capture_radius),
            ("spacing", self.spacing),
            ("influence", self.influence),
        ];
        for (k, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{prefix}.{k}"), "must be > 0"));
            }
        }
        let nonneg = [
            ("inflation", self.inflation),
            ("margin", self.margin),
            ("attractive_gain", self.attractive_gain),
            ("repulsive_gain", self.repulsive_gain),
            ("stall_epsilon", self.stall_epsilon),
        ];
        for (k, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{prefix}.{k}"), "must be >= 0"));
            }
        }
        if self.stall_window == 0 {
            return Err(Error::config(
                format!("{prefix}.stall_window"),
                "must be >= 1",
            ));
        }
        Ok(())
    }
}

fn pf_gradient(
    q: &Vector2<f64>,
    target: &Vector2<f64>,
    map: &GridMap,
    p: &PlannerParams,
) -> Vector2<f64> {
    let attract = p.attractive_gain * (q - target);
    let mut repulse = Vector2::zeros();
    for o in &map.obstacles {
        let d = q - o;
        let rho = d.norm();
        if rho < p.influence && rho > 1e-9 {
            let mag = p.repulsive_gain * (1.0 / rho - 1.0 / p.influence) / (rho * rho);
            repulse -= mag * d / rho;
        }
    }
    let mut g = attract + repulse;
    // Head-on symmetric case: push to the left of travel.
    let travel = -attract;
    if travel.norm() > 1e-12 && repulse.norm() > 1e-12 {
        let cross = travel.x * g.y - travel.y * g.x;
        if cross.abs() < 1e-9 * travel.norm() * g.norm().max(1e-12) {
            let left = Vector2::new(-travel.y, travel.x).normalize();
            g -= 1e-3 * repulse.norm().max(1.0) * left;
        }
    }
    g
}

/// Gradient descent from `a` until `b` is within the capture radius; `None`
/// on a stall.
fn pf_segment(
    a: &Vector2<f64>,
    b: &Vector2<f64>,
    map: &GridMap,
    p: &PlannerParams,
) -> Option<Vec<Vector2<f64>>> {
    let mut q = *a;
    let mut pts = vec![q];
    let mut history = vec![(q - b).norm()];
    let max_steps = (50.0 * ((b - a).norm() / p.step + 1.0)) as usize + 1000;
    for _ in 0..max_steps {
        if (q - b).norm() <= p.capture_radius.max(p.step) {
            pts.push(*b);
            return Some(pts);
        }
        let g = pf_gradient(&q, b, map, p);
        let gn = g.norm();
        if gn < 1e-12 {
            return None;
        }
        q -= p.step * g / gn;
        pts.push(q);
        history.push((q - b).norm());
        let n = history.len();
        if n > p.stall_window && history[n - 1 - p.stall_window] - history[n - 1] < p.stall_epsilon
        {
            return None;
        }
    }
    None
}

/// Potential-field smoothing between consecutive waypoints; each segment
/// falls back to the straight segment on a stall or if its clearance drops
/// below that of the straight segment.
pub fn potential_field_smooth(
    waypoints: &[Vector2<f64>],
    map: &GridMap,
    params: &PlannerParams,
) -> Result<Vec<Vector2<f64>>> {
    if waypoints.len() < 2 {
        return Err(Error::InvalidQuery("need at least two waypoints".into()));
    }
    let mut dense = vec![waypoints[0]];
    for w in waypoints.windows(2) {
        let raw = [w[0], w[1]];
        let floor = path_clearance(map, &raw);
        let seg = match pf_segment(&w[0], &w[1], map, params) {
            Some(s) if path_clearance(map, &s) >= floor => s,
            _ => raw.to_vec(),
        };
        dense.extend_from_slice(&seg[1..]);
    }
    Ok(resample_keeping_corners(&dense, params.spacing))
}

/// Points at fixed arc-length spacing along a polyline, ending at its end.
pub fn resample(path: &[Vector2<f64>], spacing: f64) -> Vec<Vector2<f64>> {
    let mut cum = vec![0.0];
    for w in path.windows(2) {
        cum.push(cum.last().unwrap() + (w[1] - w[0]).norm());
    }
    let total = *cum.last().unwrap();
    let n = (total / spacing - 1e-9).ceil().max(0.0) as usize;
    let mut out = Vec::with_capacity(n + 1);
    let mut seg = 0;
    for i in 0..=n {
        let s = (i as f64 * spacing).min(total);
        while seg + 1 < cum.len() - 1 && cum[seg + 1] < s {
            seg += 1;
        }
        out.push(interpolate(path, &cum, seg, s));
    }
    out
}

/// Like [`resample`], but also keeps every vertex where the polyline turns,
/// so the result traces the same curve.
pub fn resample_keeping_corners(path: &[Vector2<f64>], spacing: f64) -> Vec<Vector2<f64>> {
    let uniform = resample(path, spacing);
    if path.len() < 3 {
        return uniform;
    }
    let mut cum = vec![0.0];
    for w in path.windows(2) {
        cum.push(cum.last().unwrap() + (w[1] - w[0]).norm());
    }
    let mut points: Vec<(f64, Vector2<f64>)> = uniform
        .iter()
        .enumerate()
        .map(|(i, p)| ((i as f64 * spacing).min(cum[cum.len() - 1]), *p))
        .collect();
    for (k, w) in path.windows(3).enumerate() {
        let (a, b) = (w[1] - w[0], w[2] - w[1]);
        if a.perp(&b).abs() > 1e-12 * a.norm() * b.norm() {
            points.push((cum[k + 1], w[1]));
        }
    }
    points.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut out: Vec<Vector2<f64>> = Vec::with_capacity(points.len());
    for (_, p) in points {
        if out.last().is_none_or(|q| (p - q).norm() > 1e-9) {
            out.push(p);
        }
    }
    if let (Some(last), Some(end)) = (out.last_mut(), path.last()) {
        *last = *end;
    }
    out
}

fn interpolate(path: &[Vector2<f64>], cum: &[f64], seg: usize, s: f64) -> Vector2<f64> {
    if path.len() == 1 {
        return path[0];
    }
    let len = cum[seg + 1] - cum[seg];
    let f = if len > 0.0 { (s - cum[seg]) / len } else { 0.0 };
    path[seg] + (path[seg + 1] - path[seg]) * f.clamp(0.0, 1.0)
}

/// Time-indexed references at `ts` spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    pub ts: f64,
    pub samples: Vec<AgentState>,
}

impl ReferenceTrajectory {
    /// `N + 1` samples starting at `tick`, holding the final sample.
    pub fn window(&self, tick: usize, horizon: usize) -> Vec<AgentState> {
        (0..=horizon).map(|k| self.at(tick + k)).collect()
    }

    pub fn at(&self, tick: usize) -> AgentState {
        match self.samples.get(tick) {
            Some(s) => *s,
            None => *self.samples.last().expect("non-empty reference"),
        }
    }

    pub fn duration(&self) -> f64 {
        (self.samples.len().saturating_sub(1)) as f64 * self.ts
    }

    pub fn goal(&self) -> Vector2<f64> {
        let s = self.samples.last().expect("non-empty reference");
        Vector2::new(s.p.x, s.p.y)
    }
}

/// Constant-speed arc-length parametrization with yaw along the tangent.
pub fn reference_from_path(
    path: &[Vector2<f64>],
    speed: f64,
    ts: f64,
    height: f64,
) -> Result<ReferenceTrajectory> {
    if !(speed > 0.0) {
        return Err(Error::config("scenario.speed", "must be > 0 m/s"));
    }
    if path.is_empty() {
        return Err(Error::InvalidQuery("empty path".into()));
    }
    let mut cum = vec![0.0];
    for w in path.windows(2) {
        cum.push(cum.last().unwrap() + (w[1] - w[0]).norm());
    }
    let total = *cum.last().unwrap();
    let n = (total / (speed * ts) - 1e-9).ceil().max(0.0) as usize;
    let mut pos = Vec::with_capacity(n + 1);
    let mut seg = 0;
    for k in 0..=n {
        let s = (k as f64 * speed * ts).min(total);
        while seg + 2 < cum.len() && cum[seg + 1] < s {
            seg += 1;
        }
        pos.push(interpolate(path, &cum, seg, s));
    }
    // Tangent yaw per sample, unwrapped.
    let mut yaw = Vec::with_capacity(pos.len());
    let mut prev: Option<f64> = None;
    for k in 0..pos.len() {
        let d = if k + 1 < pos.len() {
            pos[k + 1] - pos[k]
        } else if k > 0 {
            pos[k] - pos[k - 1]
        } else if path.len() > 1 {
            path[1] - path[0]
        } else {
            Vector2::x()
        };
        let raw = if d.norm() > 1e-12 {
            d.y.atan2(d.x)
        } else {
            prev.unwrap_or(0.0)
        };
        let y = match prev {
            Some(p) => p + wrap_angle(raw - p),
            None => raw,
        };
        yaw.push(y);
        prev = Some(y);
    }
    let mut samples = Vec::with_capacity(pos.len());
    for k in 0..pos.len() {
        let mut s = AgentState::standing(pos[k].x, pos[k].y, yaw[k], height);
        if k + 1 < pos.len() {
            let v = (pos[k + 1] - pos[k]) / ts;
            s.v = Vector3::new(v.x, v.y, 0.0);
            s.omega.z = (yaw[k + 1] - yaw[k]) / ts;
        }
        samples.push(s);
    }
    Ok(ReferenceTrajectory { ts, samples })
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI
}

/// Writes `x,y` rows with a header.
pub fn write_path_csv(path: &[Vector2<f64>], file: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(file)?;
    w.write_record(["x", "y"])?;
    for p in path {
        w.write_record([p.x.to_string(), p.y.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Full planning pipeline for one agent.
pub fn plan_reference(
    start: &Vector2<f64>,
    goal: &Vector2<f64>,
    obstacles: &[Vector2<f64>],
    params: &PlannerParams,
    speed: f64,
    ts: f64,
    height: f64,
) -> Result<(AstarPath, Vec<Vector2<f64>>, ReferenceTrajectory)> {
    let map = map_for(start, goal, obstacles, params)?;
    let raw = astar(&map, start, goal)?;
    let mut pts = raw.waypoints.clone();
    // Exact endpoints rather than their cell centers.
    pts[0] = *start;
    *pts.last_mut().unwrap() = *goal;
    let pruned = prune_waypoints(&map, &pts);
    let smooth = potential_field_smooth(&pruned, &map, params)?;
    let reference = reference_from_path(&smooth, speed, ts, height)?;
    Ok((raw, smooth, reference))
}

/// Map covering the start/goal box plus the margin, snapped to the grid.
pub fn map_for(
    start: &Vector2<f64>,
    goal: &Vector2<f64>,
    obstacles: &[Vector2<f64>],
    params: &PlannerParams,
) -> Result<GridMap> {
    let r = params.resolution;
    let snap_lo = |v: f64| (v / r).floor() * r;
    let snap_hi = |v: f64| (v / r).ceil() * r;
    let bounds = [
        snap_lo(start.x.min(goal.x) - params.margin),
        snap_hi(start.x.max(goal.x) + params.margin),
        snap_lo(start.y.min(goal.y) - params.margin - 2.0),
        snap_hi(start.y.max(goal.y) + params.margin + 2.0),
    ];
    GridMap::new(bounds, r, obstacles.to_vec(), params.inflation)
}
