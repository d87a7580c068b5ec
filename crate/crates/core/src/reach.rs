//! One-step reachable sets of partition cells under a network controller,
//! the penalty test, partition refinement and violation reporting.

use std::collections::HashMap;
use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geom::{footprint_over_approx, GeomError, RobotBody, Workspace};
use crate::interval::{wrap_angle, AngleFragment, ConfigBox, Interval, IntervalBox, StateBox};
use crate::neuralnet::{IbpTrace, Mlp};
use crate::partition::PartitionTree;

/// Discrete-time dynamics with an interval extension.
pub trait Dynamics: Sync {
    fn step(&self, z: &[f64], u: &[f64]) -> Vec<f64>;
    /// Box containing `step(z, u)` for all `z ∈ a`, `u ∈ b`.
    fn step_box(&self, a: &IntervalBox, b: &IntervalBox) -> IntervalBox;
    /// Pulls cotangents on the `step_box` output bounds back to the control
    /// box bounds `(d b.lo, d b.hi)`.
    fn pullback_control(&self, g_lo: &[f64], g_hi: &[f64]) -> (Vec<f64>, Vec<f64>);
}

/// `z' = z + K·u`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Holonomic {
    pub k: f64,
}

impl Dynamics for Holonomic {
    fn step(&self, z: &[f64], u: &[f64]) -> Vec<f64> {
        z.iter().zip(u).map(|(a, b)| a + self.k * b).collect()
    }

    fn step_box(&self, a: &IntervalBox, b: &IntervalBox) -> IntervalBox {
        IntervalBox::new(a.dims.iter().zip(&b.dims).map(|(x, u)| x.minkowski(&u.scale(self.k))).collect())
    }

    fn pullback_control(&self, g_lo: &[f64], g_hi: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let k = self.k;
        if k >= 0.0 {
            (g_lo.iter().map(|g| k * g).collect(), g_hi.iter().map(|g| k * g).collect())
        } else {
            (g_hi.iter().map(|g| k * g).collect(), g_lo.iter().map(|g| k * g).collect())
        }
    }
}

/// Workspace, robot and the thresholds used by the penalty test.
pub struct Scene<'a> {
    pub ws: &'a Workspace,
    pub robot: &'a RobotBody,
    pub dynamics: &'a dyn Dynamics,
    pub eps_p: f64,
    pub eps_q: f64,
    /// Per-dimension volume scaling.
    pub delta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReachBox {
    pub source: usize,
    /// One-step box with θ left unwrapped.
    pub bx: StateBox,
    /// Area of the reached footprint over-approximation outside W (m²).
    pub violation_p: f64,
    /// Volume of the reached misc box outside Q.
    pub violation_q: f64,
}

/// Reach box of a cell plus the IBP trace it came from.
pub(crate) fn reach_box_traced(net: &Mlp, bx: &StateBox, dynamics: &dyn Dynamics) -> (IntervalBox, IbpTrace) {
    let full = bx.to_box();
    let trace = net.ibp_trace(&full.lo(), &full.hi()).expect("network input matches state dimension");
    let out = dynamics.step_box(&full, &trace.output_box());
    (out, trace)
}

/// Footprint violation of a configuration box whose θ span may exceed π
/// (split into sub-π pieces, summed).
pub fn cfg_violation(ws: &Workspace, robot: &RobotBody, cfg: &ConfigBox) -> Result<f64, GeomError> {
    let w = cfg.theta.width();
    let pieces = ((w / (0.9 * PI)).floor() as usize + 1).max(1);
    let mut total = 0.0;
    for i in 0..pieces {
        let lo = cfg.theta.lo + w * i as f64 / pieces as f64;
        let hi = if i + 1 == pieces { cfg.theta.hi } else { cfg.theta.lo + w * (i + 1) as f64 / pieces as f64 };
        let sub = ConfigBox::new(cfg.x, cfg.y, Interval::new(lo, hi));
        total += ws.region_violation(&footprint_over_approx(robot, &sub)?);
    }
    Ok(total)
}

fn misc_violation(misc: &IntervalBox, q: &IntervalBox) -> f64 {
    let inside = misc.intersect(q).expect("misc dimension matches Q").map_or(0.0, |b| b.volume());
    (misc.volume() - inside).max(0.0)
}

pub fn cell_reach(net: &Mlp, tree: &PartitionTree, id: usize, scene: &Scene) -> Result<ReachBox, GeomError> {
    reach_of_box(net, &tree.cells[id].bx, id, &tree.q, scene)
}

fn reach_of_box(net: &Mlp, bx: &StateBox, id: usize, q: &IntervalBox, scene: &Scene) -> Result<ReachBox, GeomError> {
    let (out, _) = reach_box_traced(net, bx, scene.dynamics);
    let sb = StateBox::from_box(&out).expect("state has three configuration dimensions");
    let violation_p = cfg_violation(scene.ws, scene.robot, &sb.cfg)?;
    let violation_q = misc_violation(&sb.misc, q);
    Ok(ReachBox { source: id, bx: sb, violation_p, violation_q })
}

/// True when the reach box violates either margin.
pub fn penalty_test(rb: &ReachBox, eps_p: f64, eps_q: f64) -> bool {
    rb.violation_p > eps_p || rb.violation_q > eps_q
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RefineStats {
    pub loop_count: usize,
    /// `#(Q)·Vol(P_[p])/(ε_x ε_y ε_θ)` over the input cells.
    pub loop_bound: f64,
    pub input_cells: usize,
    pub splits: usize,
    pub merges: usize,
    pub dropped: usize,
    /// δ-scaled volume of dropped cells.
    pub residual_unsafe_volume: f64,
}

/// Refines the leaf set against the current network.
///
/// Failing cells are bisected down to the minimum width and dropped there;
/// dropped cells stay out of the partition. Passing cells are merged with
/// their sibling when the sibling is a current leaf with the same label,
/// both pass and the merged parent passes.
pub fn refine_partition(tree: &mut PartitionTree, net: &Mlp, scene: &Scene) -> Result<RefineStats, GeomError> {
    let input = tree.leaves();
    let eps = tree.eps;
    let mut stats = RefineStats {
        input_cells: input.len(),
        loop_bound: tree.leaf_cfg_volume() / (eps[0] * eps[1] * eps[2]),
        ..Default::default()
    };

    let q = tree.q.clone();
    let first: Vec<Result<bool, GeomError>> = input
        .par_iter()
        .map(|&id| reach_of_box(net, &tree.cells[id].bx, id, &q, scene).map(|rb| penalty_test(&rb, scene.eps_p, scene.eps_q)))
        .collect();
    let mut fails: HashMap<usize, bool> = HashMap::with_capacity(input.len());
    for (&id, r) in input.iter().zip(first) {
        fails.insert(id, r?);
    }
    let mut test = |tree: &PartitionTree, id: usize| -> Result<bool, GeomError> {
        if let Some(&f) = fails.get(&id) {
            return Ok(f);
        }
        let rb = reach_of_box(net, &tree.cells[id].bx, id, &q, scene)?;
        let f = penalty_test(&rb, scene.eps_p, scene.eps_q);
        fails.insert(id, f);
        Ok(f)
    };

    let mut stack = input;
    while let Some(id) = stack.pop() {
        if !tree.cells[id].leaf {
            continue;
        }
        stats.loop_count += 1;
        if test(tree, id)? {
            if tree.cells[id].bx.splittable(&eps) {
                let [a, b] = tree.split_cell(id).expect("splittable cell splits");
                for c in [a, b] {
                    tree.cells[c].leaf = true;
                }
                tree.cells[id].leaf = false;
                stack.push(b);
                stack.push(a);
                stats.splits += 1;
            } else {
                let c = &mut tree.cells[id];
                c.leaf = false;
                c.dropped = true;
                stats.dropped += 1;
                stats.residual_unsafe_volume += c.bx.to_box().volume_scaled(&scene.delta).expect("delta matches state dim");
            }
            continue;
        }
        let (sib, parent) = (tree.cells[id].sibling, tree.cells[id].parent);
        if let (Some(sib), Some(parent)) = (sib, parent) {
            let mergeable = tree.cells[sib].leaf && tree.cells[sib].label == tree.cells[id].label;
            if mergeable && !test(tree, sib)? && !test(tree, parent)? {
                let label = tree.cells[id].label;
                tree.cells[id].leaf = false;
                tree.cells[sib].leaf = false;
                let p = &mut tree.cells[parent];
                p.leaf = true;
                p.children = None;
                p.label = label;
                stack.push(parent);
                stats.merges += 1;
            }
        }
    }
    Ok(stats)
}

/// Number of retained leaves that fail the penalty test (should be 0).
pub fn recheck_refined(tree: &PartitionTree, net: &Mlp, scene: &Scene) -> Result<usize, GeomError> {
    let leaves = tree.leaves();
    let fails: Vec<Result<bool, GeomError>> =
        leaves.par_iter().map(|&id| cell_reach(net, tree, id, scene).map(|rb| penalty_test(&rb, scene.eps_p, scene.eps_q))).collect();
    let mut n = 0;
    for f in fails {
        n += f? as usize;
    }
    Ok(n)
}

/// Uniform-grid bucket index over the xy projections of safe leaves.
pub struct SafeIndex {
    boxes: Vec<(usize, IntervalBox)>,
    origin: [f64; 2],
    cell: [f64; 2],
    dims: [usize; 2],
    buckets: Vec<Vec<u32>>,
}

impl SafeIndex {
    pub fn new(tree: &PartitionTree) -> Self {
        let boxes = tree.safe_leaves().into_iter().map(|id| (id, tree.cells[id].bx.to_box())).collect();
        Self::build(boxes, [4.0 * tree.eps[0], 4.0 * tree.eps[1]])
    }

    /// Index over arbitrary boxes; ids are positions in `boxes`.
    pub fn from_boxes(boxes: Vec<IntervalBox>, cell: [f64; 2]) -> Self {
        Self::build(boxes.into_iter().enumerate().collect(), cell)
    }

    fn build(boxes: Vec<(usize, IntervalBox)>, cell: [f64; 2]) -> Self {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for (_, b) in &boxes {
            for d in 0..2 {
                lo[d] = lo[d].min(b.dims[d].lo);
                hi[d] = hi[d].max(b.dims[d].hi);
            }
        }
        if boxes.is_empty() {
            lo = [0.0; 2];
            hi = [1.0; 2];
        }
        let dims = [0, 1].map(|d| (((hi[d] - lo[d]) / cell[d]).ceil() as usize).max(1));
        let mut idx = SafeIndex { boxes: Vec::new(), origin: lo, cell, dims, buckets: vec![Vec::new(); dims[0] * dims[1]] };
        for (k, (_, b)) in boxes.iter().enumerate() {
            let (ix, iy) = idx.range(b);
            for j in iy.0..=iy.1 {
                for i in ix.0..=ix.1 {
                    idx.buckets[j * dims[0] + i].push(k as u32);
                }
            }
        }
        idx.boxes = boxes;
        idx
    }

    fn range(&self, b: &IntervalBox) -> ((usize, usize), (usize, usize)) {
        let r = |d: usize| {
            let f = |v: f64| (((v - self.origin[d]) / self.cell[d]).floor().max(0.0) as usize).min(self.dims[d] - 1);
            (f(b.dims[d].lo), f(b.dims[d].hi))
        };
        (r(0), r(1))
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Safe leaves whose box meets `b` with positive volume, in leaf-id order.
    pub fn overlapping(&self, b: &IntervalBox) -> Vec<(usize, &IntervalBox)> {
        if self.boxes.is_empty() {
            return Vec::new();
        }
        let (ix, iy) = self.range(b);
        let mut ks: Vec<u32> = Vec::new();
        for j in iy.0..=iy.1 {
            for i in ix.0..=ix.1 {
                ks.extend_from_slice(&self.buckets[j * self.dims[0] + i]);
            }
        }
        ks.sort_unstable();
        ks.dedup();
        ks.into_iter()
            .map(|k| &self.boxes[k as usize])
            .filter(|(_, s)| s.dims.iter().zip(&b.dims).all(|(p, q)| p.lo.max(q.lo) < p.hi.min(q.hi)))
            .map(|(id, s)| (*id, s))
            .collect()
    }

    /// `Σ Vol_δ(b ∩ X')` over safe leaves `X'`.
    pub fn covered_volume(&self, b: &IntervalBox, delta: &[f64]) -> f64 {
        self.overlapping(b)
            .into_iter()
            .map(|(_, s)| s.intersect(b).expect("same dimension").map_or(0.0, |x| x.volume_scaled(delta).expect("delta matches")))
            .sum()
    }
}

/// Reach box fragments after θ wrapping, with the fragment θ bounds'
/// provenance.
pub fn wrap_fragments(bx: &IntervalBox) -> Vec<(IntervalBox, AngleFragment)> {
    wrap_angle(bx.dims[2])
        .into_iter()
        .map(|f| {
            let mut b = bx.clone();
            b.dims[2] = f.interval;
            (b, f)
        })
        .collect()
}

/// `V = Vol^{1/3} − (cov + ε_smooth)^{1/3}`, clamped at 0.
pub fn v_value(vol: f64, cov: f64, eps_smooth: f64) -> f64 {
    (vol.cbrt() - (cov + eps_smooth).cbrt()).max(0.0)
}

/// Per-epoch record (one JSON line).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub epoch: usize,
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "J_S")]
    pub j_s: f64,
    #[serde(rename = "lambda_S")]
    pub lambda_s: f64,
    pub violation_volume: f64,
    pub active_cells: usize,
    pub residual_unsafe_volume: f64,
    pub leaf_count: usize,
    pub wall_time_s: Option<f64>,
}

impl ViolationReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Geometry part of a report: outside volume and active cells. Marks the
/// `active` flag on every leaf.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Violation {
    pub total_outside_volume: f64,
    pub active_cells: usize,
}

pub fn violation_report(tree: &mut PartitionTree, net: &Mlp, scene: &Scene, eps_smooth: f64) -> Violation {
    let index = SafeIndex::new(tree);
    let leaves = tree.leaves();
    let per_leaf: Vec<(f64, bool)> = leaves
        .par_iter()
        .map(|&id| {
            let (out, _) = reach_box_traced(net, &tree.cells[id].bx, scene.dynamics);
            let mut outside = 0.0;
            let mut v = 0.0;
            for (frag, _) in wrap_fragments(&out) {
                let vol = frag.volume_scaled(&scene.delta).expect("delta matches");
                let cov = index.covered_volume(&frag, &scene.delta);
                outside += (vol - cov).max(0.0);
                v += v_value(vol, cov, eps_smooth);
            }
            (outside, v > 0.0)
        })
        .collect();
    for c in tree.cells.iter_mut() {
        c.active = false;
    }
    let mut total = 0.0;
    let mut active = 0;
    for (&id, &(outside, is_active)) in leaves.iter().zip(&per_leaf) {
        total += outside;
        if is_active {
            active += 1;
            tree.cells[id].active = true;
        }
    }
    Violation { total_outside_volume: total, active_cells: active }
}

/// Leaves flagged active by the last [`violation_report`].
pub fn active_leaves(tree: &PartitionTree) -> Vec<usize> {
    tree.cells.iter().filter(|c| c.leaf && c.active).map(|c| c.id).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Polygon;
    use crate::neuralnet::Activation;
    use crate::partition::{build_partition, Label};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const DELTA: [f64; 3] = [1.0, 1.0, 1.0 / (2.0 * PI)];

    fn world() -> (Workspace, RobotBody) {
        let ws = Workspace::new(Polygon::rect(0.0, 0.0, 4.0, 3.0), vec![Polygon::rect(1.5, 1.0, 2.5, 2.0)]).unwrap();
        let robot = RobotBody::new(Polygon::rect(-0.15, -0.075, 0.15, 0.075)).unwrap();
        (ws, robot)
    }

    fn scene<'a>(ws: &'a Workspace, robot: &'a RobotBody, dynamics: &'a Holonomic) -> Scene<'a> {
        Scene { ws, robot, dynamics, eps_p: 1e-2, eps_q: 1e-2, delta: DELTA.to_vec() }
    }

    fn constant_net(c: [f64; 3]) -> Mlp {
        let mut net = Mlp::init(&[3, 4, 3], 0).unwrap();
        let n = net.param_count();
        net.set_params(&vec![0.0; n]);
        net.layers[1].bias = c.to_vec();
        net
    }

    fn random_net(seed: u64, scale: f64) -> Mlp {
        let mut net = Mlp::init(&[3, 8, 3], seed).unwrap();
        let p: Vec<f64> = net.params().iter().map(|v| v * scale).collect();
        net.set_params(&p);
        net
    }

    fn tree() -> PartitionTree {
        let (ws, robot) = world();
        build_partition(&ws, &robot, &IntervalBox::default(), [0.25, 0.25, 0.2 * PI]).unwrap()
    }

    #[test]
    fn holonomic_box_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in [0.01, -0.5] {
            let dynamics = Holonomic { k };
            for _ in 0..200 {
                let lo: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let a = IntervalBox::from_bounds(&lo, &lo.iter().map(|v| v + 0.3).collect::<Vec<_>>()).unwrap();
                let ul: Vec<f64> = (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect();
                let b = IntervalBox::from_bounds(&ul, &ul.iter().map(|v| v + 2.0).collect::<Vec<_>>()).unwrap();
                let out = dynamics.step_box(&a, &b);
                let z: Vec<f64> = a.dims.iter().map(|i| rng.gen_range(i.lo..=i.hi)).collect();
                let u: Vec<f64> = b.dims.iter().map(|i| rng.gen_range(i.lo..=i.hi)).collect();
                assert!(out.contains_point(&dynamics.step(&z, &u)));
            }
        }
    }

    #[test]
    fn zero_and_constant_nets() {
        let (ws, robot) = world();
        let dynamics = Holonomic { k: 0.01 };
        let sc = scene(&ws, &robot, &dynamics);
        let t = tree();
        let id = t.leaves()[3];
        let zero = cell_reach(&constant_net([0.0; 3]), &t, id, &sc).unwrap();
        for (a, b) in zero.bx.cfg.dims().iter().zip(t.cells[id].bx.cfg.dims()) {
            assert!((a.lo - b.lo).abs() < 1e-300 && (a.hi - b.hi).abs() < 1e-15);
            assert!(a.contains_interval(&b));
        }

        let c = [1.0, -2.0, 0.5];
        let rb = cell_reach(&constant_net(c), &t, id, &sc).unwrap();
        for d in 0..3 {
            let src = t.cells[id].bx.cfg.dims()[d];
            let got = rb.bx.cfg.dims()[d];
            assert!((got.lo - (src.lo + 0.01 * c[d])).abs() < 1e-12);
            assert!((got.hi - (src.hi + 0.01 * c[d])).abs() < 1e-12);
        }
    }

    #[test]
    fn reach_is_sound_on_samples() {
        let (ws, robot) = world();
        let dynamics = Holonomic { k: 0.01 };
        let sc = scene(&ws, &robot, &dynamics);
        let t = tree();
        let net = random_net(3, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &id in t.leaves().iter().step_by(7) {
            let rb = cell_reach(&net, &t, id, &sc).unwrap();
            let b = rb.bx.to_box();
            for _ in 0..1000 {
                let z: Vec<f64> = t.cells[id].bx.cfg.dims().iter().map(|i| rng.gen_range(i.lo..=i.hi)).collect();
                let next = dynamics.step(&z, &net.forward(&z).unwrap());
                assert!(b.contains_point(&next));
            }
        }
    }

    #[test]
    fn penalty_test_cases() {
        let (ws, robot) = world();
        let dynamics = Holonomic { k: 0.01 };
        let sc = scene(&ws, &robot, &dynamics);
        let cell = StateBox::new(
            ConfigBox::new(Interval::new(0.15, 0.25), Interval::new(0.4, 0.5), Interval::new(0.0, 0.0)),
            IntervalBox::default(),
        );
        // Interior, tiny gain.
        let inner = StateBox::new(
            ConfigBox::new(Interval::new(0.6, 0.7), Interval::new(0.4, 0.5), Interval::new(0.1, 0.2)),
            IntervalBox::default(),
        );
        let rb = reach_of_box(&constant_net([0.1, 0.0, 0.0]), &inner, 0, &IntervalBox::default(), &sc).unwrap();
        assert!(!penalty_test(&rb, 1e-2, 1e-2));
        assert!(!penalty_test(&rb, f64::INFINITY, f64::INFINITY));

        // Flush against the wall x = 0 and pushed outward by 10 m/step·K = 0.1 m.
        let rb = reach_of_box(&constant_net([-10.0, 0.0, 0.0]), &cell, 0, &IntervalBox::default(), &sc).unwrap();
        // Moved box x ∈ [0.05, 0.15]; footprint x-extent 0.15 → 0.1 m over a 0.25 m tall sweep.
        assert!((rb.violation_p - 0.1 * 0.25).abs() < 1e-12, "{}", rb.violation_p);
        assert!(penalty_test(&rb, 1e-2, 1e-2));
        assert!(!penalty_test(&rb, f64::INFINITY, f64::INFINITY));
    }

    #[test]
    fn refine_with_passing_net_preserves_volume() {
        let (ws, robot) = world();
        let dynamics = Holonomic { k: 0.01 };
        let sc = Scene { eps_p: f64::INFINITY, ..scene(&ws, &robot, &dynamics) };
        let mut t = tree();
        let before = t.leaf_cfg_volume();
        let net = constant_net([0.0; 3]);
        let stats = refine_partition(&mut t, &net, &sc).unwrap();
        assert_eq!(stats.dropped, 0);
        assert_eq!(stats.splits, 0);
        assert!(stats.merges > 0);
        assert!((t.leaf_cfg_volume() - before).abs() <= 1e-9);
        assert!(stats.loop_count as f64 <= stats.loop_bound);
    }

    #[test]
    fn refine_postconditions_random_net() {
        let (ws, robot) = world();
        let dynamics = Holonomic { k: 0.01 };
        let sc = scene(&ws, &robot, &dynamics);
        for seed in 0..3 {
            let mut t = tree();
            let old: Vec<IntervalBox> = t.leaves().iter().map(|&id| t.cells[id].bx.to_box()).collect();
            let before = t.leaves().iter().map(|&id| t.cells[id].bx.to_box().volume_scaled(&DELTA).unwrap()).sum::<f64>();
            let net = random_net(seed, 5.0);
            let stats = refine_partition(&mut t, &net, &sc).unwrap();
            assert!(stats.dropped > 0 && stats.splits > 0, "{stats:?}");
            assert_eq!(recheck_refined(&t, &net, &sc).unwrap(), 0);
            assert!(stats.loop_count as f64 <= stats.loop_bound, "{stats:?}");
            let after = t.leaves().iter().map(|&id| t.cells[id].bx.to_box().volume_scaled(&DELTA).unwrap()).sum::<f64>();
            assert!((before - after - stats.residual_unsafe_volume).abs() <= 1e-9);
            for &id in &t.leaves() {
                let b = t.cells[id].bx.to_box();
                let covered: f64 = old.iter().filter_map(|o| o.intersect(&b).unwrap()).map(|x| x.volume()).sum();
                assert!((covered - b.volume()).abs() <= 1e-9 * b.volume().max(1.0));
            }
        }
    }

    #[test]
    fn dropped_cells_stay_dropped() {
        let (ws, robot) = world();
        let dynamics = Holonomic { k: 0.01 };
        let sc = scene(&ws, &robot, &dynamics);
        let mut t = tree();
        refine_partition(&mut t, &random_net(1, 20.0), &sc).unwrap();
        let dropped = t.dropped();
        assert!(!dropped.is_empty());
        let vol = t.leaf_cfg_volume();
        let lenient = Scene { eps_p: f64::INFINITY, ..scene(&ws, &robot, &dynamics) };
        let stats = refine_partition(&mut t, &constant_net([0.0; 3]), &lenient).unwrap();
        assert_eq!(stats.dropped, 0);
        assert_eq!(t.dropped(), dropped);
        assert!(dropped.iter().all(|&id| !t.cells[id].leaf));
        assert!((t.leaf_cfg_volume() - vol).abs() <= 1e-9);
    }

    #[test]
    fn report_examples() {
        let ws = Workspace::new(Polygon::rect(0.0, 0.0, 4.0, 4.0), vec![]).unwrap();
        let robot = RobotBody::new(Polygon::rect(-0.1, -0.1, 0.1, 0.1)).unwrap();
        let dynamics = Holonomic { k: 0.01 };
        let sc = scene(&ws, &robot, &dynamics);
        let mut t = build_partition(&ws, &robot, &IntervalBox::default(), [0.5, 0.5, 0.5 * PI]).unwrap();
        // Keep only interior, all-safe leaves.
        for c in t.cells.iter_mut() {
            if c.leaf && (c.label != Label::Safe || c.bx.cfg.x.lo < 1.0 || c.bx.cfg.x.hi > 3.0 || c.bx.cfg.y.lo < 1.0 || c.bx.cfg.y.hi > 3.0) {
                c.leaf = false;
            }
        }
        assert!(t.leaf_count() > 0);
        let v = violation_report(&mut t, &constant_net([0.0; 3]), &sc, 1e-12);
        assert_eq!(v.active_cells, 0);
        assert!(v.total_outside_volume.abs() < 1e-12);

        // One leaf pushed far away from every safe cell.
        let v = violation_report(&mut t, &constant_net([1000.0, 0.0, 0.0]), &sc, 1e-12);
        assert_eq!(v.active_cells, t.leaf_count());
        let vol: f64 = t.leaves().iter().map(|&id| t.cells[id].bx.to_box().volume_scaled(&DELTA).unwrap()).sum();
        assert!((v.total_outside_volume - vol).abs() < 1e-9);
        assert_eq!(active_leaves(&t).len(), t.leaf_count());
    }

    #[test]
    fn safe_index_matches_linear_scan() {
        let t = tree();
        let index = SafeIndex::new(&t);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..300 {
            let lo = [rng.gen_range(-0.5..4.0), rng.gen_range(-0.5..3.0), rng.gen_range(0.0..6.0)];
            let b = IntervalBox::from_bounds(&lo, &[lo[0] + 0.4, lo[1] + 0.3, lo[2] + 0.5]).unwrap();
            let fast = index.covered_volume(&b, &DELTA);
            let slow: f64 = t
                .safe_leaves()
                .iter()
                .filter_map(|&id| t.cells[id].bx.to_box().intersect(&b).unwrap())
                .map(|x| x.volume_scaled(&DELTA).unwrap())
                .sum();
            assert!((fast - slow).abs() < 1e-12);
        }
        let _ = Activation::Tanh;
    }
}
