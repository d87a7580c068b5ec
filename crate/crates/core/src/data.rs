//! Demonstration data: RRT* paths in SE(2), control extraction with
//! goal-vanishing shaping, and closed-loop rollouts.

use std::f64::consts::{PI, TAU};
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{RobotBody, Workspace};
use crate::interval::wrap_theta_value;
use crate::neuralnet::Mlp;
use crate::reach::{Dynamics, Holonomic};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("no path to the goal after {iters} iterations")]
    Unreachable { iters: usize },
    #[error("consecutive samples {index} and {} coincide", index + 1)]
    DegenerateStep { index: usize },
    #[error("{which} configuration is not safe")]
    UnsafeEndpoint { which: &'static str },
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `a − b` with the θ component on the shorter arc.
pub fn state_diff(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], wrap_pi(a[2] - b[2])]
}

fn wrap_pi(d: f64) -> f64 {
    let w = d.rem_euclid(TAU);
    if w > PI {
        w - TAU
    } else {
        w
    }
}

fn norm3(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Euclidean state distance with wrapped θ.
pub fn state_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    norm3(&state_diff(a, b))
}

/// Planner metric: θ weighted by the robot radius.
fn plan_distance(a: &[f64; 3], b: &[f64; 3], r: f64) -> f64 {
    let d = state_diff(b, a);
    (d[0] * d[0] + d[1] * d[1] + (r * d[2]) * (r * d[2])).sqrt()
}

fn interpolate(a: &[f64; 3], b: &[f64; 3], t: f64) -> [f64; 3] {
    let d = state_diff(b, a);
    [a[0] + t * d[0], a[1] + t * d[1], wrap_theta_value(a[2] + t * d[2])]
}

/// Exact footprint check.
pub fn config_safe(ws: &Workspace, robot: &RobotBody, z: &[f64; 3]) -> bool {
    ws.contains_region(&robot.placed_pieces(z[0], z[1], z[2]))
}

fn edge_free(ws: &Workspace, robot: &RobotBody, a: &[f64; 3], b: &[f64; 3], res: f64) -> bool {
    let d = state_diff(b, a);
    let len = (d[0] * d[0] + d[1] * d[1]).sqrt().max(robot.r * d[2].abs());
    let n = (len / res).ceil().max(1.0) as usize;
    (1..=n).all(|i| config_safe(ws, robot, &interpolate(a, b, i as f64 / n as f64)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub waypoints: Vec<[f64; 3]>,
    pub collision_free: bool,
}

impl Trajectory {
    /// Length in the planner metric.
    pub fn cost(&self, r: f64) -> f64 {
        self.waypoints.windows(2).map(|w| plan_distance(&w[0], &w[1], r)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerParams {
    pub max_iters: usize,
    pub step: f64,
    pub rewire_radius: f64,
    pub goal_bias: f64,
    /// Collision-check spacing along edges.
    pub resolution: f64,
    pub seed: u64,
}

impl Default for PlannerParams {
    fn default() -> Self {
        Self { max_iters: 1500, step: 0.4, rewire_radius: 0.8, goal_bias: 0.05, resolution: 0.0625, seed: 0 }
    }
}

struct Node {
    z: [f64; 3],
    parent: usize,
    cost: f64,
}

/// RRT* with straight-line steering and greedy shortcutting of the result.
pub fn rrt_star_plan(
    ws: &Workspace,
    robot: &RobotBody,
    start: [f64; 3],
    goal: [f64; 3],
    params: &PlannerParams,
) -> Result<Trajectory, DataError> {
    if !config_safe(ws, robot, &start) {
        return Err(DataError::UnsafeEndpoint { which: "start" });
    }
    if !config_safe(ws, robot, &goal) {
        return Err(DataError::UnsafeEndpoint { which: "goal" });
    }
    if state_distance(&start, &goal) == 0.0 {
        return Ok(Trajectory { waypoints: vec![start], collision_free: true });
    }
    let r = robot.r;
    let res = params.resolution;
    let bb = ws.aabb();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut nodes = vec![Node { z: start, parent: 0, cost: 0.0 }];
    // Best (node, total cost) connecting to the goal.
    let mut best: Option<(usize, f64)> = None;
    let try_goal = |nodes: &[Node], i: usize, best: &mut Option<(usize, f64)>| {
        let d = plan_distance(&nodes[i].z, &goal, r);
        if d <= params.rewire_radius {
            let c = nodes[i].cost + d;
            if best.map_or(true, |(_, b)| c < b) && edge_free(ws, robot, &nodes[i].z, &goal, res) {
                *best = Some((i, c));
            }
        }
    };
    try_goal(&nodes, 0, &mut best);

    for _ in 0..params.max_iters {
        let sample = if rng.gen_bool(params.goal_bias) {
            goal
        } else {
            [rng.gen_range(bb.min.x..bb.max.x), rng.gen_range(bb.min.y..bb.max.y), rng.gen_range(0.0..TAU)]
        };
        let (near_i, near_d) = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (i, plan_distance(&n.z, &sample, r)))
            .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
        if near_d == 0.0 {
            continue;
        }
        let z = if near_d > params.step { interpolate(&nodes[near_i].z, &sample, params.step / near_d) } else { sample };
        if !config_safe(ws, robot, &z) {
            continue;
        }
        let neighbours: Vec<(usize, f64)> = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (i, plan_distance(&n.z, &z, r)))
            .filter(|&(i, d)| d <= params.rewire_radius || i == near_i)
            .collect();
        let mut order: Vec<(usize, f64)> = neighbours.iter().map(|&(i, d)| (i, nodes[i].cost + d)).collect();
        order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let Some(&(parent, cost)) = order.iter().find(|(i, _)| edge_free(ws, robot, &nodes[*i].z, &z, res)) else {
            continue;
        };
        let new = nodes.len();
        nodes.push(Node { z, parent, cost });
        for &(i, d) in &neighbours {
            if i != parent && cost + d < nodes[i].cost && edge_free(ws, robot, &z, &nodes[i].z, res) {
                let delta = nodes[i].cost - (cost + d);
                nodes[i].parent = new;
                nodes[i].cost = cost + d;
                let mut stack = vec![i];
                while let Some(p) = stack.pop() {
                    for c in 1..nodes.len() {
                        if nodes[c].parent == p && c != i {
                            nodes[c].cost -= delta;
                            stack.push(c);
                        }
                    }
                }
            }
        }
        if let Some((b, _)) = best {
            best = Some((b, nodes[b].cost + plan_distance(&nodes[b].z, &goal, r)));
        }
        try_goal(&nodes, new, &mut best);
    }
    let Some((last, _)) = best else {
        return Err(DataError::Unreachable { iters: params.max_iters });
    };
    let mut path = if nodes[last].z == goal { Vec::new() } else { vec![goal] };
    let mut i = last;
    loop {
        path.push(nodes[i].z);
        if i == 0 {
            break;
        }
        i = nodes[i].parent;
    }
    path.reverse();
    Ok(Trajectory { waypoints: shortcut(ws, robot, &path, res), collision_free: true })
}

fn shortcut(ws: &Workspace, robot: &RobotBody, path: &[[f64; 3]], res: f64) -> Vec<[f64; 3]> {
    let mut out = vec![path[0]];
    let mut i = 0;
    while i + 1 < path.len() {
        let j = (i + 1..path.len()).rev().find(|&j| j == i + 1 || edge_free(ws, robot, &path[i], &path[j], res)).expect("i + 1 qualifies");
        out.push(path[j]);
        i = j;
    }
    out
}

/// Points along the trajectory at planner-metric spacing `ds`, ending at the
/// last waypoint.
pub fn resample(traj: &Trajectory, ds: f64, r: f64) -> Vec<[f64; 3]> {
    let w = &traj.waypoints;
    let lens: Vec<f64> = w.windows(2).map(|s| plan_distance(&s[0], &s[1], r)).collect();
    let total: f64 = lens.iter().sum();
    let mut out = vec![w[0]];
    let (mut seg, mut start) = (0, 0.0);
    let mut k = 1;
    while (k as f64) * ds < total - 1e-9 * ds {
        let s = k as f64 * ds;
        while s > start + lens[seg] || lens[seg] == 0.0 {
            start += lens[seg];
            seg += 1;
        }
        out.push(interpolate(&w[seg], &w[seg + 1], (s - start) / lens[seg]));
        k += 1;
    }
    let last = *w.last().expect("non-empty");
    if out.last() != Some(&last) {
        out.push(last);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Shaping {
    /// `10·ê·e/(1 − e)`, magnitude clamped to `u_max`.
    Paper,
    /// `10·ê·e/(1 + e)`.
    #[default]
    Saturating,
}

impl std::str::FromStr for Shaping {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "paper" => Ok(Shaping::Paper),
            "saturating" => Ok(Shaping::Saturating),
            _ => Err(format!("unknown shaping mode {s:?}; expected paper or saturating")),
        }
    }
}

/// Shaped control at `z` from the raw step `z → z_next`.
pub fn shape_control(
    z: &[f64; 3],
    z_next: &[f64; 3],
    goal: &[f64; 3],
    k: f64,
    mode: Shaping,
    u_max: f64,
    index: usize,
) -> Result<[f64; 3], DataError> {
    let e = state_distance(goal, z);
    if e == 0.0 {
        return Ok([0.0; 3]);
    }
    let d = state_diff(z_next, z);
    let raw = [d[0] / k, d[1] / k, d[2] / k];
    let n = norm3(&raw);
    if n == 0.0 {
        return Err(DataError::DegenerateStep { index });
    }
    let mut scale = match mode {
        Shaping::Paper => 10.0 * e / (1.0 - e),
        Shaping::Saturating => 10.0 * e / (1.0 + e),
    };
    if !scale.is_finite() || scale.abs() > u_max {
        scale = u_max.copysign(if scale.is_nan() { 1.0 } else { scale });
    }
    Ok(raw.map(|v| scale * v / n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub goal: [f64; 3],
    #[serde(rename = "K")]
    pub k: f64,
    /// Trajectories that contributed samples.
    pub count: usize,
    pub requested: usize,
    pub complete: bool,
    pub seed: u64,
    pub mode: Shaping,
}

impl Default for DatasetMeta {
    fn default() -> Self {
        Self { goal: [0.0; 3], k: 0.01, count: 0, requested: 0, complete: false, seed: 0, mode: Shaping::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub z: Vec<[f64; 3]>,
    pub u: Vec<[f64; 3]>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    /// CSV with header `x,y,theta,ux,uy,utheta`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), DataError> {
        let mut out = csv::Writer::from_writer(w);
        let fmt = |e: csv::Error| DataError::Format(e.to_string());
        out.write_record(["x", "y", "theta", "ux", "uy", "utheta"]).map_err(fmt)?;
        for (z, u) in self.z.iter().zip(&self.u) {
            let row: Vec<String> = z.iter().chain(u).map(|v| format!("{v:?}")).collect();
            out.write_record(&row).map_err(fmt)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, meta: DatasetMeta) -> Result<Self, DataError> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers().map_err(|e| DataError::Format(e.to_string()))?;
        if header.iter().collect::<Vec<_>>() != ["x", "y", "theta", "ux", "uy", "utheta"] {
            return Err(DataError::Format("header must be x,y,theta,ux,uy,utheta".into()));
        }
        let mut d = Dataset { meta, ..Default::default() };
        for (line, rec) in rd.records().enumerate() {
            let rec = rec.map_err(|e| DataError::Format(e.to_string()))?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| DataError::Format(format!("row {}: {e}", line + 2)))?;
            if vals.len() != 6 || vals.iter().any(|v| !v.is_finite()) {
                return Err(DataError::Format(format!("row {}: expected 6 finite values", line + 2)));
            }
            d.z.push([vals[0], vals[1], vals[2]]);
            d.u.push([vals[3], vals[4], vals[5]]);
        }
        Ok(d)
    }

    /// Writes `path` (CSV) and the sidecar `path` with extension `.json`.
    pub fn save(&self, path: &std::path::Path) -> Result<(), DataError> {
        self.write_csv(std::fs::File::create(path)?)?;
        let side = serde_json::to_string_pretty(&self.meta).expect("serializable");
        std::fs::write(path.with_extension("json"), side + "\n")?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, DataError> {
        let side = std::fs::read_to_string(path.with_extension("json"))?;
        let meta = serde_json::from_str(&side).map_err(|e| DataError::Format(e.to_string()))?;
        Self::read_csv(std::fs::File::open(path)?, meta)
    }
}

/// Samples every trajectory at spacing `ds`, shapes the controls, drops
/// degenerate steps and unsafe states, and appends `(goal, 0)`.
#[allow(clippy::too_many_arguments)]
pub fn build_dataset(
    ws: &Workspace,
    robot: &RobotBody,
    trajs: &[Trajectory],
    dynamics: Holonomic,
    goal: [f64; 3],
    mode: Shaping,
    u_max: f64,
    ds: f64,
) -> Dataset {
    let mut d = Dataset::default();
    for t in trajs {
        let pts = resample(t, ds, robot.r);
        for (i, w) in pts.windows(2).enumerate() {
            // Degenerate steps carry no direction; they are skipped.
            let Ok(u) = shape_control(&w[0], &w[1], &goal, dynamics.k, mode, u_max, i) else { continue };
            if config_safe(ws, robot, &w[0]) && u.iter().all(|v| v.is_finite()) {
                d.z.push(w[0]);
                d.u.push(u);
            }
        }
    }
    if config_safe(ws, robot, &goal) {
        d.z.push(goal);
        d.u.push([0.0; 3]);
    }
    d.meta = DatasetMeta { goal, k: dynamics.k, count: trajs.len(), requested: trajs.len(), complete: true, seed: 0, mode };
    d
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub trajectories: usize,
    pub goal: [f64; 3],
    pub k: f64,
    pub mode: Shaping,
    pub u_max: f64,
    /// Sample spacing along trajectories (planner metric).
    pub spacing: f64,
    pub planner: PlannerParams,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            trajectories: 100,
            goal: [4.0, 1.4, PI],
            k: 0.01,
            mode: Shaping::Saturating,
            u_max: 50.0,
            spacing: 0.05,
            planner: PlannerParams::default(),
            seed: 0,
        }
    }
}

/// Uniformly sampled safe configuration.
pub fn sample_safe(ws: &Workspace, robot: &RobotBody, rng: &mut impl Rng) -> [f64; 3] {
    let bb = ws.aabb();
    loop {
        let z = [rng.gen_range(bb.min.x..bb.max.x), rng.gen_range(bb.min.y..bb.max.y), rng.gen_range(0.0..TAU)];
        if config_safe(ws, robot, &z) {
            return z;
        }
    }
}

/// Plans from random safe starts until `cfg.trajectories` paths exist or
/// `4×` that many attempts fail. Attempt `i` uses RNG stream `i` of the
/// master seed, so the result is independent of scheduling.
pub fn generate_trajectories(ws: &Workspace, robot: &RobotBody, cfg: &DataConfig) -> Result<Vec<Trajectory>, DataError> {
    if !config_safe(ws, robot, &cfg.goal) {
        return Err(DataError::UnsafeEndpoint { which: "goal" });
    }
    let want = cfg.trajectories;
    let mut out = Vec::with_capacity(want);
    let mut next = 0u64;
    let limit = 4 * want.max(1) as u64;
    while out.len() < want && next < limit {
        let batch = (want - out.len()) as u64;
        let end = (next + batch).min(limit);
        let plans: Vec<Option<Trajectory>> = (next..end)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(i);
                let start = sample_safe(ws, robot, &mut rng);
                let params = PlannerParams { seed: rng.gen(), ..cfg.planner.clone() };
                rrt_star_plan(ws, robot, start, cfg.goal, &params).ok()
            })
            .collect();
        out.extend(plans.into_iter().flatten().take(want - out.len()));
        next = end;
    }
    Ok(out)
}

/// Trajectories plus shaping, with completeness recorded in the metadata.
pub fn generate_dataset(ws: &Workspace, robot: &RobotBody, cfg: &DataConfig) -> Result<Dataset, DataError> {
    let trajs = generate_trajectories(ws, robot, cfg)?;
    if trajs.is_empty() {
        return Err(DataError::Unreachable { iters: cfg.planner.max_iters });
    }
    let mut d = build_dataset(ws, robot, &trajs, Holonomic { k: cfg.k }, cfg.goal, cfg.mode, cfg.u_max, cfg.spacing);
    d.meta.requested = cfg.trajectories;
    d.meta.complete = trajs.len() == cfg.trajectories;
    d.meta.seed = cfg.seed;
    Ok(d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub states: Vec<[f64; 3]>,
    pub collision_step: Option<usize>,
    pub reached: bool,
}

/// Iterates `z ← z + K·φ(z)` (θ wrapped) for up to `n_steps`, stopping once
/// within `tol` of `goal`.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    net: &Mlp,
    dynamics: &Holonomic,
    z0: [f64; 3],
    n_steps: usize,
    ws: &Workspace,
    robot: &RobotBody,
    goal: [f64; 3],
    tol: f64,
) -> Rollout {
    let mut z = z0;
    let mut states = vec![z];
    let mut collision_step = (!config_safe(ws, robot, &z)).then_some(0);
    let mut reached = state_distance(&z, &goal) <= tol;
    for k in 1..=n_steps {
        if reached {
            break;
        }
        let u = net.forward(&z).expect("3-dimensional controller");
        let next = dynamics.step(&z, &u);
        z = [next[0], next[1], wrap_theta_value(next[2])];
        states.push(z);
        if collision_step.is_none() && !config_safe(ws, robot, &z) {
            collision_step = Some(k);
        }
        reached = state_distance(&z, &goal) <= tol;
    }
    Rollout { states, collision_step, reached }
}
