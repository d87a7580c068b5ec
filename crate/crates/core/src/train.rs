//! Losses, the reach-coverage penalty and the retraining loop.
//!
//! The base loss is a ridge-regularized squared error on the dataset. The
//! penalty sums, over partition leaves, the squared cube-root gap between a
//! reach box's δ-volume and the part of it covered by safe leaves. Both are
//! minimized with full-batch Adam; one optimizer state runs through base
//! training and all retraining epochs.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::geom::{GeomError, RobotBody, Workspace};
use crate::interval::IntervalBox;
use crate::neuralnet::{Mlp, NnError, ParamGrad};
use crate::partition::{build_partition, PartitionError, PartitionTree};
use crate::reach::{reach_box_traced, refine_partition, v_value, violation_report, wrap_fragments, Dynamics, Holonomic, RefineStats, SafeIndex, Scene, ViolationReport};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
}

/// Fixed work-unit size for parallel reductions; results are summed in
/// chunk order, so they do not depend on the thread count.
const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Data-term weight; `None` means `1/|D|`.
    pub lambda_e: Option<f64>,
    /// Ridge weight; `None` means `1/(#parameters)`.
    pub lambda_r: Option<f64>,
    pub lambda_s_step: f64,
    pub lambda_s_target: f64,
    pub delta: Vec<f64>,
    pub eps_smooth: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Adam steps on the base loss before the partition is built.
    pub base_steps: usize,
    /// Adam steps on `J + λ_S·S` per retraining epoch.
    pub inner_steps: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_e: None,
            lambda_r: None,
            lambda_s_step: 1e-3,
            lambda_s_target: 1e-2,
            delta: vec![1.0, 1.0, 1.0 / std::f64::consts::TAU],
            eps_smooth: 1e-12,
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            base_steps: 3000,
            inner_steps: 200,
        }
    }
}

impl LossConfig {
    /// `λ_S(i) = min(step·i, target)`.
    pub fn lambda_s(&self, epoch: usize) -> f64 {
        (self.lambda_s_step * epoch as f64).min(self.lambda_s_target)
    }

    fn weights(&self, n_data: usize, n_params: usize) -> (f64, f64) {
        (self.lambda_e.unwrap_or(1.0 / n_data as f64), self.lambda_r.unwrap_or(1.0 / n_params as f64))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n: usize, cfg: &LossConfig) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0, lr: cfg.lr, b1: cfg.beta1, b2: cfg.beta2, eps: cfg.adam_eps }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, net: &mut Mlp, g: &ParamGrad) {
        self.t += 1;
        let c1 = 1.0 - self.b1.powi(self.t as i32);
        let c2 = 1.0 - self.b2.powi(self.t as i32);
        let mut p = net.params();
        for i in 0..p.len() {
            let gi = g.flat[i];
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * gi;
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * gi * gi;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        net.set_params(&p);
    }
}

/// `J = λ_E Σ ‖u − φ(z)‖² + λ_R Σ θ²` and its gradient.
pub fn base_loss_and_grad(net: &Mlp, data: &Dataset, cfg: &LossConfig) -> Result<(f64, ParamGrad), TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let n = data.len();
    let (le, lr) = cfg.weights(n, net.param_count());
    let parts: Vec<(f64, ParamGrad)> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut g = net.zero_grad();
            let mut e = 0.0;
            if le != 0.0 {
                for k in c * CHUNK..((c + 1) * CHUNK).min(n) {
                    e += net.squared_error_grad(&data.z[k], &data.u[k], &mut g);
                }
            }
            (e, g)
        })
        .collect();
    let mut grad = net.zero_grad();
    let mut sse = 0.0;
    for (e, g) in &parts {
        sse += e;
        grad.add_scaled(g, le);
    }
    let params = net.params();
    let ridge: f64 = params.iter().map(|v| v * v).sum();
    for (gi, p) in grad.flat.iter_mut().zip(&params) {
        *gi += 2.0 * lr * p;
    }
    Ok((le * sse + lr * ridge, grad))
}

/// `V(X, P_A)` summed over θ-wrap fragments of `x`.
pub fn metric_v(x: &IntervalBox, index: &SafeIndex, delta: &[f64], eps_smooth: f64) -> f64 {
    wrap_fragments(x)
        .iter()
        .map(|(f, _)| {
            let vol = f.volume_scaled(delta).expect("delta matches");
            v_value(vol, index.covered_volume(f, delta), eps_smooth)
        })
        .sum()
}

/// `V` of one reach box and `∂V/∂(box lo, box hi)`.
fn v_and_box_grad(out: &IntervalBox, index: &SafeIndex, delta: &[f64], eps_smooth: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let n = out.dim();
    let mut g_lo = vec![0.0; n];
    let mut g_hi = vec![0.0; n];
    let mut v_total = 0.0;
    for (f, frag) in wrap_fragments(out) {
        let vol = f.volume_scaled(delta).expect("delta matches");
        let overlaps = index.overlapping(&f);
        let cov: f64 = overlaps
            .iter()
            .map(|(_, s)| s.intersect(&f).expect("same dimension").map_or(0.0, |x| x.volume_scaled(delta).expect("delta matches")))
            .sum();
        let v = v_value(vol, cov, eps_smooth);
        if v <= 0.0 {
            continue;
        }
        v_total += v;
        let dv_dvol = if vol > 0.0 { vol.cbrt() / (3.0 * vol) } else { 0.0 };
        let dv_dcov = -(cov + eps_smooth).cbrt() / (3.0 * (cov + eps_smooth));
        let widths: Vec<f64> = f.dims.iter().zip(delta).map(|(i, d)| d * i.width()).collect();
        let mut fl = vec![0.0; n];
        let mut fh = vec![0.0; n];
        for d in 0..n {
            let others: f64 = (0..n).filter(|&e| e != d).map(|e| widths[e]).product();
            fl[d] -= dv_dvol * delta[d] * others;
            fh[d] += dv_dvol * delta[d] * others;
        }
        for (_, s) in &overlaps {
            let ov: Vec<f64> =
                f.dims.iter().zip(&s.dims).zip(delta).map(|((a, b), dl)| dl * (a.hi.min(b.hi) - a.lo.max(b.lo))).collect();
            for d in 0..n {
                let others: f64 = (0..n).filter(|&e| e != d).map(|e| ov[e]).product();
                let (a, b) = (f.dims[d], s.dims[d]);
                if a.hi < b.hi {
                    fh[d] += dv_dcov * delta[d] * others;
                }
                if a.lo > b.lo {
                    fl[d] -= dv_dcov * delta[d] * others;
                }
            }
        }
        for d in 0..n {
            if d == 2 {
                if frag.lo_tracks {
                    g_lo[d] += fl[d];
                }
                if frag.hi_tracks {
                    g_hi[d] += fh[d];
                }
            } else {
                g_lo[d] += fl[d];
                g_hi[d] += fh[d];
            }
        }
    }
    (v_total, g_lo, g_hi)
}

/// Penalty ingredients that stay fixed while the network changes.
pub struct PenaltyProblem<'a> {
    pub cells: Vec<&'a crate::interval::StateBox>,
    pub index: &'a SafeIndex,
    pub dynamics: &'a dyn Dynamics,
    pub delta: &'a [f64],
    pub eps_smooth: f64,
}

impl<'a> PenaltyProblem<'a> {
    /// Over all leaves of `tree`.
    pub fn for_tree(tree: &'a PartitionTree, index: &'a SafeIndex, dynamics: &'a dyn Dynamics, cfg: &'a LossConfig) -> Self {
        let cells = tree.leaves().into_iter().map(|id| &tree.cells[id].bx).collect();
        Self { cells, index, dynamics, delta: &cfg.delta, eps_smooth: cfg.eps_smooth }
    }

    /// `S = Σ V(F̄(X), P_A)²`.
    pub fn value(&self, net: &Mlp) -> f64 {
        let parts: Vec<f64> = self
            .cells
            .par_chunks(CHUNK)
            .map(|chunk| {
                chunk
                    .iter()
                    .map(|bx| {
                        let (out, _) = reach_box_traced(net, bx, self.dynamics);
                        let v = metric_v(&out, self.index, self.delta, self.eps_smooth);
                        v * v
                    })
                    .sum::<f64>()
            })
            .collect();
        parts.iter().sum()
    }

    /// `S` and `∂S/∂params`; cells with `V = 0` contribute nothing.
    pub fn value_and_grad(&self, net: &Mlp) -> (f64, ParamGrad) {
        let parts: Vec<(f64, ParamGrad)> = self
            .cells
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut g = net.zero_grad();
                let mut s = 0.0;
                for bx in chunk {
                    let (out, trace) = reach_box_traced(net, bx, self.dynamics);
                    let (v, gl, gh) = v_and_box_grad(&out, self.index, self.delta, self.eps_smooth);
                    if v <= 0.0 {
                        continue;
                    }
                    s += v * v;
                    let gl: Vec<f64> = gl.iter().map(|x| 2.0 * v * x).collect();
                    let gh: Vec<f64> = gh.iter().map(|x| 2.0 * v * x).collect();
                    let (ul, uh) = self.dynamics.pullback_control(&gl, &gh);
                    net.ibp_backward(&trace, &ul, &uh, &mut g);
                }
                (s, g)
            })
            .collect();
        let mut grad = net.zero_grad();
        let mut s = 0.0;
        for (v, g) in &parts {
            s += v;
            grad.add_scaled(g, 1.0);
        }
        (s, grad)
    }
}

/// `S` and its gradient over the leaves of `tree`.
pub fn penalty_and_grad(net: &Mlp, tree: &PartitionTree, dynamics: &dyn Dynamics, cfg: &LossConfig) -> (f64, ParamGrad) {
    let index = SafeIndex::new(tree);
    PenaltyProblem::for_tree(tree, &index, dynamics, cfg).value_and_grad(net)
}

/// Runs `steps` Adam steps on the base loss; returns the loss before each step.
pub fn train_base_steps(net: &mut Mlp, adam: &mut Adam, data: &Dataset, cfg: &LossConfig, steps: usize) -> Result<Vec<f64>, TrainError> {
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (j, g) = base_loss_and_grad(net, data, cfg)?;
        losses.push(j);
        adam.step(net, &g);
    }
    Ok(losses)
}

/// Fresh network trained on the base loss for `cfg.base_steps` steps.
pub fn train_base(data: &Dataset, arch: &[usize], seed: u64, cfg: &LossConfig) -> Result<(Mlp, Adam, f64), TrainError> {
    let mut net = Mlp::init(arch, seed)?;
    let mut adam = Adam::new(net.param_count(), cfg);
    train_base_steps(&mut net, &mut adam, data, cfg, cfg.base_steps)?;
    let (j, _) = base_loss_and_grad(&net, data, cfg)?;
    Ok((net, adam, j))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub arch: Vec<usize>,
    pub seed: u64,
    pub eps_w: [f64; 3],
    pub eps_p: f64,
    pub eps_q: f64,
    pub epochs: usize,
    /// Holonomic gain `K`.
    pub k: f64,
    pub loss: LossConfig,
    /// Record wall-clock seconds in reports (breaks byte-identical reruns).
    pub record_wall_time: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            arch: vec![3, 16, 16, 3],
            seed: 0,
            eps_w: [0.25, 0.25, 0.2 * std::f64::consts::PI],
            eps_p: 1e-2,
            eps_q: 1e-2,
            epochs: 10,
            k: 0.01,
            loss: LossConfig::default(),
            record_wall_time: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub net: Mlp,
    pub adam: Adam,
    pub epoch: usize,
    pub history: Vec<ViolationReport>,
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub base_net: Mlp,
    pub state: TrainState,
    pub tree: PartitionTree,
    pub refine_stats: Vec<RefineStats>,
}

/// Base training, partition build, then `epochs` rounds of penalized
/// training followed by refinement against the updated network.
///
/// Report 0 describes the base network on the freshly built partition.
pub fn run_pipeline(ws: &Workspace, robot: &RobotBody, data: &Dataset, cfg: &PipelineConfig) -> Result<PipelineResult, TrainError> {
    let (net, adam, _) = train_base(data, &cfg.arch, cfg.seed, &cfg.loss)?;
    retrain(ws, robot, data, cfg, net, adam, |_| {})
}

/// The retraining half of [`run_pipeline`], starting from a trained base
/// network and its optimizer state. `on_report` sees each report as it is
/// produced.
pub fn retrain(
    ws: &Workspace,
    robot: &RobotBody,
    data: &Dataset,
    cfg: &PipelineConfig,
    net: Mlp,
    adam: Adam,
    mut on_report: impl FnMut(&ViolationReport),
) -> Result<PipelineResult, TrainError> {
    let start = Instant::now();
    let lc = &cfg.loss;
    let dynamics = Holonomic { k: cfg.k };
    let scene = Scene { ws, robot, dynamics: &dynamics, eps_p: cfg.eps_p, eps_q: cfg.eps_q, delta: lc.delta.clone() };
    let (j0, _) = base_loss_and_grad(&net, data, lc)?;
    let base_net = net.clone();
    let q = IntervalBox::new(Vec::new());
    let mut tree = build_partition(ws, robot, &q, cfg.eps_w)?;
    let mut refine_stats = Vec::with_capacity(cfg.epochs);
    let wall = |on: bool| on.then(|| start.elapsed().as_secs_f64());

    let v = violation_report(&mut tree, &net, &scene, lc.eps_smooth);
    let report = ViolationReport {
        epoch: 0,
        j: j0,
        j_s: j0,
        lambda_s: 0.0,
        violation_volume: v.total_outside_volume,
        active_cells: v.active_cells,
        residual_unsafe_volume: 0.0,
        leaf_count: tree.leaf_count(),
        wall_time_s: wall(cfg.record_wall_time),
    };
    on_report(&report);
    let mut state = TrainState { net, adam, epoch: 0, history: vec![report] };

    for epoch in 1..=cfg.epochs {
        refine_stats.push(refine_partition(&mut tree, &state.net, &scene)?);
        let lambda = lc.lambda_s(epoch);
        let index = SafeIndex::new(&tree);
        let penalty = PenaltyProblem::for_tree(&tree, &index, &dynamics, lc);
        for _ in 0..lc.inner_steps {
            let (_, mut g) = base_loss_and_grad(&state.net, data, lc)?;
            if lambda != 0.0 {
                let (_, gs) = penalty.value_and_grad(&state.net);
                g.add_scaled(&gs, lambda);
            }
            state.adam.step(&mut state.net, &g);
        }
        let (j, _) = base_loss_and_grad(&state.net, data, lc)?;
        let s = if lambda != 0.0 { penalty.value(&state.net) } else { 0.0 };
        drop(penalty);
        let v = violation_report(&mut tree, &state.net, &scene, lc.eps_smooth);
        let report = ViolationReport {
            epoch,
            j,
            j_s: j + lambda * s,
            lambda_s: lambda,
            violation_volume: v.total_outside_volume,
            active_cells: v.active_cells,
            residual_unsafe_volume: tree.dropped_volume(&lc.delta),
            leaf_count: tree.leaf_count(),
            wall_time_s: wall(cfg.record_wall_time),
        };
        on_report(&report);
        state.history.push(report);
        state.epoch = epoch;
    }
    Ok(PipelineResult { base_net, state, tree, refine_stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interval::{ConfigBox, Interval, StateBox};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::TAU;

    const DELTA: [f64; 3] = [1.0, 1.0, 1.0 / TAU];

    fn toy_data(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = Dataset::default();
        for _ in 0..n {
            d.z.push([rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0), rng.gen_range(0.0..TAU)]);
            d.u.push([rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
        }
        d
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        diff / b.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12)
    }

    fn fd_grad(net: &Mlp, f: impl Fn(&Mlp) -> f64, h: f64) -> Vec<f64> {
        let p = net.params();
        (0..p.len())
            .map(|k| {
                let mut a = net.clone();
                let mut b = net.clone();
                let mut pa = p.clone();
                let mut pb = p.clone();
                pa[k] += h;
                pb[k] -= h;
                a.set_params(&pa);
                b.set_params(&pb);
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn ridge_only_and_exact_fit() {
        let net = Mlp::init(&[3, 5, 3], 1).unwrap();
        let data = toy_data(10, 2);
        let cfg = LossConfig { lambda_e: Some(0.0), lambda_r: Some(0.3), ..Default::default() };
        let (j, g) = base_loss_and_grad(&net, &data, &cfg).unwrap();
        let p = net.params();
        assert!((j - 0.3 * p.iter().map(|v| v * v).sum::<f64>()).abs() < 1e-12);
        for (gi, pi) in g.flat.iter().zip(&p) {
            assert!((gi - 0.6 * pi).abs() < 1e-12);
        }

        let z = [0.5, 0.2, 1.0];
        let mut d = Dataset::default();
        d.z.push(z);
        let u = net.forward(&z).unwrap();
        d.u.push([u[0], u[1], u[2]]);
        let cfg = LossConfig { lambda_r: Some(0.0), ..Default::default() };
        let (j, g) = base_loss_and_grad(&net, &d, &cfg).unwrap();
        assert_eq!(j, 0.0);
        assert!(g.is_zero());

        assert!(matches!(base_loss_and_grad(&net, &Dataset::default(), &cfg), Err(TrainError::EmptyDataset)));
    }

    #[test]
    fn base_gradient_matches_finite_differences() {
        for case in 0..200 {
            let mut net = Mlp::init(&[3, 4, 3], case).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(case + 1000);
            let p: Vec<f64> = net.params().iter().map(|v| v + rng.gen_range(-0.1..0.1)).collect();
            net.set_params(&p);
            let data = toy_data(5, case);
            let cfg = LossConfig::default();
            let (_, g) = base_loss_and_grad(&net, &data, &cfg).unwrap();
            let fd = fd_grad(&net, |n| base_loss_and_grad(n, &data, &cfg).unwrap().0, 1e-5);
            assert!(rel_err(&g.flat, &fd) <= 1e-5, "case {case}: {}", rel_err(&g.flat, &fd));
        }
    }

    fn index_of(boxes: &[[f64; 6]]) -> SafeIndex {
        SafeIndex::from_boxes(
            boxes.iter().map(|b| IntervalBox::from_bounds(&b[..3], &b[3..]).unwrap()).collect(),
            [1.0, 1.0],
        )
    }

    #[test]
    fn metric_v_examples() {
        let idx = index_of(&[[0.0, 0.0, 0.0, 4.0, 4.0, TAU]]);
        let inside = IntervalBox::from_bounds(&[1.0, 1.0, 1.0], &[2.0, 2.0, 2.0]).unwrap();
        assert!(metric_v(&inside, &idx, &DELTA, 1e-12) <= 1e-4);

        let far = IntervalBox::from_bounds(&[10.0, 10.0, 1.0], &[12.0, 11.0, 2.0]).unwrap();
        let vol = far.volume_scaled(&DELTA).unwrap();
        assert!((metric_v(&far, &idx, &DELTA, 1e-12) - vol.cbrt()).abs() < 1e-3);

        // Vol_δ = 8 with half covered: 2 − 4^{1/3} ≈ 0.41259.
        let unit = [1.0, 1.0, 1.0];
        let idx = SafeIndex::from_boxes(vec![IntervalBox::from_bounds(&[0.0, 0.0, 0.0], &[1.0, 2.0, 2.0]).unwrap()], [1.0, 1.0]);
        let x = IntervalBox::from_bounds(&[0.0, 0.0, 0.0], &[2.0, 2.0, 2.0]).unwrap();
        let v = metric_v(&x, &idx, &unit, 0.0);
        assert!((v - 0.412_598_948_3).abs() < 1e-9, "{v}");
        let (s, g) = {
            let cell = StateBox::new(ConfigBox::new(Interval::new(0.0, 2.0), Interval::new(0.0, 2.0), Interval::new(0.0, 2.0)), IntervalBox::default());
            let mut net = Mlp::init(&[3, 4, 3], 0).unwrap();
            let n = net.param_count();
            net.set_params(&vec![0.0; n]);
            let dynamics = Holonomic { k: 0.01 };
            let pp = PenaltyProblem { cells: vec![&cell], index: &idx, dynamics: &dynamics, delta: &unit, eps_smooth: 0.0 };
            pp.value_and_grad(&net)
        };
        assert!((s - 0.170_237_893_9).abs() < 1e-6, "{s}");
        assert!(g.norm() > 0.0);
    }

    #[test]
    fn v_is_bounded_and_additive_over_wrap() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let idx = index_of(&[[0.0, 0.0, 0.0, 1.0, 1.0, 1.0], [0.0, 0.0, 5.5, 1.0, 1.0, TAU], [1.0, 0.0, 0.0, 2.0, 1.0, TAU]]);
        for _ in 0..500 {
            let lo = [rng.gen_range(-0.5..1.5), rng.gen_range(-0.5..1.0), rng.gen_range(-1.0..6.0)];
            let x = IntervalBox::from_bounds(&lo, &[lo[0] + 0.5, lo[1] + 0.5, lo[2] + rng.gen_range(0.0..2.0)]).unwrap();
            let v = metric_v(&x, &idx, &DELTA, 1e-12);
            let sum: f64 = wrap_fragments(&x)
                .iter()
                .map(|(f, _)| v_value(f.volume_scaled(&DELTA).unwrap(), idx.covered_volume(f, &DELTA), 1e-12))
                .sum();
            assert!(v >= 0.0);
            assert!((v - sum).abs() < 1e-9);
            let bound: f64 = wrap_fragments(&x).iter().map(|(f, _)| f.volume_scaled(&DELTA).unwrap().cbrt()).sum();
            assert!(v <= bound + 1e-12);
        }
    }

    /// Random toy: safe boxes on a grid, cells nearby, tiny network.
    fn toy_penalty(seed: u64) -> (Mlp, Vec<StateBox>, SafeIndex) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Mlp::init(&[3, 4, 3], seed).unwrap();
        let p: Vec<f64> = net.params().iter().map(|v| v * 3.0 + rng.gen_range(-0.5..0.5)).collect();
        net.set_params(&p);
        let mut safe = Vec::new();
        for i in 0..3 {
            for j in 0..3 {
                if rng.gen_bool(0.6) {
                    let (x, y) = (i as f64 * 0.5, j as f64 * 0.5);
                    safe.push(IntervalBox::from_bounds(&[x, y, 0.0], &[x + 0.5, y + 0.5, rng.gen_range(1.0..TAU)]).unwrap());
                }
            }
        }
        let cells = (0..4)
            .map(|_| {
                let (x, y, t) = (rng.gen_range(0.0..1.3), rng.gen_range(0.0..1.3), rng.gen_range(0.0..5.0));
                StateBox::new(
                    ConfigBox::new(Interval::new(x, x + 0.2), Interval::new(y, y + 0.2), Interval::new(t, t + 0.6)),
                    IntervalBox::default(),
                )
            })
            .collect();
        (net, cells, SafeIndex::from_boxes(safe, [0.5, 0.5]))
    }

    /// Smallest distance between any reach-box face and any safe-box face
    /// (or the θ seam) along the same axis, over boxes that overlap.
    fn kink_margin(net: &Mlp, cells: &[StateBox], idx: &SafeIndex, dynamics: &Holonomic) -> f64 {
        let mut m = f64::INFINITY;
        for bx in cells {
            let (out, _) = reach_box_traced(net, bx, dynamics);
            for (f, _) in wrap_fragments(&out) {
                for d in 0..3 {
                    if d == 2 {
                        for v in [f.dims[d].lo, f.dims[d].hi] {
                            m = m.min(v.abs()).min((v - TAU).abs());
                        }
                    }
                }
                let grown = IntervalBox::new(f.dims.iter().map(|i| Interval::new(i.lo - 1e-3, i.hi + 1e-3)).collect());
                for (_, s) in idx.overlapping(&grown) {
                    for d in 0..3 {
                        for a in [f.dims[d].lo, f.dims[d].hi] {
                            for b in [s.dims[d].lo, s.dims[d].hi] {
                                m = m.min((a - b).abs());
                            }
                        }
                    }
                }
            }
        }
        m
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let dynamics = Holonomic { k: 0.05 };
        let mut checked = 0;
        let mut seed = 0;
        while checked < 200 {
            seed += 1;
            let (net, cells, idx) = toy_penalty(seed);
            if net.params().iter().any(|w| w.abs() < 1e-3) || kink_margin(&net, &cells, &idx, &dynamics) < 1e-3 {
                continue;
            }
            let pp = PenaltyProblem { cells: cells.iter().collect(), index: &idx, dynamics: &dynamics, delta: &DELTA, eps_smooth: 1e-12 };
            let (s, g) = pp.value_and_grad(&net);
            if s < 1e-6 {
                continue;
            }
            assert!((s - pp.value(&net)).abs() <= 1e-12 * s.max(1.0));
            let fd = fd_grad(&net, |n| pp.value(n), 1e-6);
            let e = rel_err(&g.flat, &fd);
            assert!(e <= 1e-3, "seed {seed}: rel err {e}");
            checked += 1;
        }
    }

    #[test]
    fn penalty_step_decreases_s() {
        let dynamics = Holonomic { k: 0.05 };
        let mut done = 0;
        let mut seed = 10_000;
        while done < 100 {
            seed += 1;
            let (net, cells, idx) = toy_penalty(seed);
            let pp = PenaltyProblem { cells: cells.iter().collect(), index: &idx, dynamics: &dynamics, delta: &DELTA, eps_smooth: 1e-12 };
            let (s, g) = pp.value_and_grad(&net);
            if s < 1e-8 || g.norm() == 0.0 {
                continue;
            }
            let p = net.params();
            let mut lr = 1e-2 / g.norm();
            let mut decreased = false;
            for _ in 0..30 {
                let mut n = net.clone();
                n.set_params(&p.iter().zip(&g.flat).map(|(a, b)| a - lr * b).collect::<Vec<_>>());
                if pp.value(&n) < s {
                    decreased = true;
                    break;
                }
                lr *= 0.5;
            }
            assert!(decreased, "seed {seed}");
            done += 1;
        }
    }

    #[test]
    fn lambda_schedule() {
        let cfg = LossConfig { lambda_s_step: 1e-3, lambda_s_target: 1e-2, ..Default::default() };
        let mut prev = 0.0;
        for i in 0..20 {
            let l = cfg.lambda_s(i);
            assert!(l >= prev);
            prev = l;
        }
        let reach_at = (cfg.lambda_s_target / cfg.lambda_s_step).ceil() as usize;
        assert_eq!(cfg.lambda_s(reach_at), 1e-2);
        assert!(cfg.lambda_s(reach_at - 1) < 1e-2);
    }

    #[test]
    fn train_base_fits_single_point_and_is_deterministic() {
        let mut d = Dataset::default();
        d.z.push([0.3, -0.2, 1.0]);
        d.u.push([0.5, -0.7, 0.2]);
        let cfg = LossConfig { lambda_r: Some(0.0), base_steps: 2000, lr: 1e-2, ..Default::default() };
        let (net, _, _) = train_base(&d, &[3, 16, 3], 4, &cfg).unwrap();
        let u = net.forward(&d.z[0]).unwrap();
        let err: f64 = u.iter().zip(&d.u[0]).map(|(a, b)| (a - b) * (a - b)).sum();
        assert!(err < 1e-4, "{err}");

        let data = toy_data(40, 5);
        let run = || {
            let mut net = Mlp::init(&[3, 8, 3], 6).unwrap();
            let mut adam = Adam::new(net.param_count(), &cfg);
            train_base_steps(&mut net, &mut adam, &data, &cfg, 50).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn ridge_only_shrinks_parameters() {
        let data = toy_data(5, 7);
        let cfg = LossConfig { lambda_e: Some(0.0), lambda_r: Some(1.0), lr: 3e-3, ..Default::default() };
        let mut net = Mlp::init(&[3, 6, 3], 8).unwrap();
        let mut adam = Adam::new(net.param_count(), &cfg);
        let mut prev = net.params().iter().map(|v| v * v).sum::<f64>();
        for _ in 0..100 {
            train_base_steps(&mut net, &mut adam, &data, &cfg, 1).unwrap();
            let now = net.params().iter().map(|v| v * v).sum::<f64>();
            assert!(now < prev);
            prev = now;
        }
    }
}
