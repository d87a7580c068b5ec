//! Adaptive box cover of the safe configuration set.
//!
//! Cells live in a forest of binary trees stored in an id-indexed arena; the
//! roots are the seed cells of the initial frontier and have no sibling.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{footprint_over_approx, footprint_under_approx, GeomError, RobotBody, Workspace};
use crate::interval::{ConfigBox, Interval, IntervalBox, IntervalError, StateBox};

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Interval(#[from] IntervalError),
    #[error("partition file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Safe,
    Mixed,
    Unsafe,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub id: usize,
    pub bx: StateBox,
    pub label: Label,
    pub parent: Option<usize>,
    pub sibling: Option<usize>,
    pub children: Option<[usize; 2]>,
    pub leaf: bool,
    /// Removed by refinement while still violating at minimum width.
    pub dropped: bool,
    pub active: bool,
}

/// Counters from [`build_partition`].
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BuildStats {
    pub loop_count: usize,
    /// `2·Vol(F0)/(ε_x ε_y ε_θ)`.
    pub loop_bound: f64,
    pub safe_leaves: usize,
    pub mixed_leaves: usize,
    pub discarded_volume: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionTree {
    pub eps: [f64; 3],
    pub q: IntervalBox,
    pub cells: Vec<Cell>,
    pub stats: BuildStats,
}

/// Safe iff `A_o ⊆ W`; Unsafe iff `A_u ⊄ W`; Mixed otherwise.
pub fn classify_cell(cfg: &ConfigBox, ws: &Workspace, robot: &RobotBody) -> Result<Label, GeomError> {
    let ao = footprint_over_approx(robot, cfg)?;
    if ws.contains_region(&ao) {
        return Ok(Label::Safe);
    }
    let au = footprint_under_approx(robot, cfg);
    if !ws.contains_region(&au) {
        return Ok(Label::Unsafe);
    }
    Ok(Label::Mixed)
}

impl PartitionTree {
    fn push(&mut self, bx: StateBox, label: Label, parent: Option<usize>) -> usize {
        let id = self.cells.len();
        self.cells.push(Cell { id, bx, label, parent, sibling: None, children: None, leaf: false, dropped: false, active: false });
        id
    }

    /// Splits `id` along its widest normalized dimension.
    pub(crate) fn split_cell(&mut self, id: usize) -> Result<[usize; 2], IntervalError> {
        let (a, b) = self.cells[id].bx.split(&self.eps)?;
        Ok(self.attach_children(id, a, b))
    }

    fn attach_children(&mut self, id: usize, a: StateBox, b: StateBox) -> [usize; 2] {
        let label = self.cells[id].label;
        let ia = self.push(a, label, Some(id));
        let ib = self.push(b, label, Some(id));
        self.cells[ia].sibling = Some(ib);
        self.cells[ib].sibling = Some(ia);
        let c = &mut self.cells[id];
        c.children = Some([ia, ib]);
        c.leaf = false;
        [ia, ib]
    }

    /// Leaf ids in increasing order.
    pub fn leaves(&self) -> Vec<usize> {
        self.cells.iter().filter(|c| c.leaf).map(|c| c.id).collect()
    }

    pub fn safe_leaves(&self) -> Vec<usize> {
        self.cells.iter().filter(|c| c.leaf && c.label == Label::Safe).map(|c| c.id).collect()
    }

    pub fn dropped(&self) -> Vec<usize> {
        self.cells.iter().filter(|c| c.dropped).map(|c| c.id).collect()
    }

    /// δ-scaled volume of cells dropped by refinement.
    pub fn dropped_volume(&self, delta: &[f64]) -> f64 {
        self.cells.iter().filter(|c| c.dropped).map(|c| c.bx.to_box().volume_scaled(delta).expect("delta matches state dim")).sum()
    }

    pub fn leaf_count(&self) -> usize {
        self.cells.iter().filter(|c| c.leaf).count()
    }

    /// Total unscaled configuration volume of the leaves.
    pub fn leaf_cfg_volume(&self) -> f64 {
        self.cells.iter().filter(|c| c.leaf).map(|c| c.bx.cfg.to_box().volume()).sum()
    }

    /// First leaf (by id) containing the configuration, boundaries included.
    pub fn find_leaf(&self, x: f64, y: f64, theta: f64) -> Option<usize> {
        self.cells.iter().find(|c| c.leaf && c.bx.cfg.contains(x, y, theta)).map(|c| c.id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&PartitionFile::from(self)).expect("partition serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PartitionError> {
        let f: PartitionFile = serde_json::from_str(text).map_err(|e| PartitionError::Format(e.to_string()))?;
        f.try_into()
    }
}

/// Builds the cover with a depth-first worklist.
///
/// The initial frontier is a grid of seed cells over a covering of the
/// workspace bounding box times `[0, 2π)`. Seed widths are `ε_i·2^k`, so
/// bisection bottoms out at cells exactly `ε_i` wide; in θ every seed spans
/// less than π.
pub fn build_partition(ws: &Workspace, robot: &RobotBody, q: &IntervalBox, eps: [f64; 3]) -> Result<PartitionTree, PartitionError> {
    let bb = ws.aabb();
    let xs = seed_axis(Interval::new(bb.min.x, bb.max.x), eps[0]);
    let ys = seed_axis(Interval::new(bb.min.y, bb.max.y), eps[1]);
    let ts = seed_theta(eps[2]);
    let span = |v: &[Interval]| v.last().unwrap().hi - v[0].lo;
    let f0_volume = span(&xs) * span(&ys) * TAU;
    let mut tree = PartitionTree {
        eps,
        q: q.clone(),
        cells: Vec::new(),
        stats: BuildStats { loop_bound: 2.0 * f0_volume / (eps[0] * eps[1] * eps[2]), ..Default::default() },
    };
    for &t in &ts {
        for &y in &ys {
            for &x in &xs {
                tree.push(StateBox::new(ConfigBox::new(x, y, t), q.clone()), Label::Mixed, None);
            }
        }
    }
    let mut stack: Vec<usize> = (0..tree.cells.len()).rev().collect();

    while let Some(id) = stack.pop() {
        tree.stats.loop_count += 1;
        let cfg = tree.cells[id].bx.cfg;
        let label = classify_cell(&cfg, ws, robot)?;
        tree.cells[id].label = label;
        match label {
            Label::Safe => {
                tree.cells[id].leaf = true;
                tree.stats.safe_leaves += 1;
            }
            Label::Unsafe => {
                tree.stats.discarded_volume += cfg.to_box().volume();
            }
            Label::Mixed => {
                if tree.cells[id].bx.splittable(&eps) {
                    let [a, b] = tree.split_cell(id)?;
                    stack.push(b);
                    stack.push(a);
                } else {
                    tree.cells[id].leaf = true;
                    tree.stats.mixed_leaves += 1;
                }
            }
        }
    }
    Ok(tree)
}

/// Covers `extent` with `n` seeds of width `ε·2^k`, `n ∈ {1, 3, 5, 7}`, taking
/// the smallest total `n·2^k ≥ ⌈width/ε⌉` and centering the cover on `extent`.
fn seed_axis(extent: Interval, eps: f64) -> Vec<Interval> {
    let m = ((extent.width() / eps) * (1.0 - 1e-12)).ceil().max(1.0) as u64;
    let (n, k) = (0..64u32)
        .flat_map(|k| [1u64, 3, 5, 7].into_iter().map(move |n| (n, k)))
        .filter(|&(n, k)| n << k >= m)
        .min_by_key(|&(n, k)| (n << k, n))
        .unwrap();
    let w = eps * (1u64 << k) as f64;
    let lo = extent.mid() - 0.5 * w * n as f64;
    (0..n).map(|i| Interval::new(lo + w * i as f64, lo + w * (i + 1) as f64)).collect()
}

/// Splits `[0, 2π)` into `n ≥ 3` equal seeds, with `n·2^k = ⌈2π/ε_θ⌉` and `k`
/// as large as possible.
fn seed_theta(eps: f64) -> Vec<Interval> {
    let m = ((TAU / eps) * (1.0 - 1e-12)).ceil().max(3.0) as u64;
    let mut n = m;
    while n % 2 == 0 && n / 2 >= 3 {
        n /= 2;
    }
    (0..n).map(|i| Interval::new(TAU * i as f64 / n as f64, TAU * (i + 1) as f64 / n as f64)).collect()
}

#[derive(Serialize, Deserialize)]
struct BoxFile {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Serialize, Deserialize)]
struct CellFile {
    id: usize,
    #[serde(rename = "box")]
    bx: BoxFile,
    label: Label,
    parent: Option<usize>,
    sibling: Option<usize>,
    children: Option<[usize; 2]>,
    leaf: bool,
    #[serde(default, skip_serializing_if = "is_false")]
    dropped: bool,
}

#[derive(Serialize, Deserialize)]
struct PartitionFile {
    eps: [f64; 3],
    #[serde(rename = "Q")]
    q: BoxFile,
    cells: Vec<CellFile>,
}

impl From<&PartitionTree> for PartitionFile {
    fn from(t: &PartitionTree) -> Self {
        PartitionFile {
            eps: t.eps,
            q: BoxFile { lo: t.q.lo(), hi: t.q.hi() },
            cells: t
                .cells
                .iter()
                .map(|c| {
                    let b = c.bx.to_box();
                    CellFile {
                        id: c.id,
                        bx: BoxFile { lo: b.lo(), hi: b.hi() },
                        label: c.label,
                        parent: c.parent,
                        sibling: c.sibling,
                        children: c.children,
                        leaf: c.leaf,
                        dropped: c.dropped,
                    }
                })
                .collect(),
        }
    }
}

impl TryFrom<PartitionFile> for PartitionTree {
    type Error = PartitionError;

    fn try_from(f: PartitionFile) -> Result<Self, PartitionError> {
        let q = IntervalBox::from_bounds(&f.q.lo, &f.q.hi)?;
        let n = f.cells.len();
        let mut cells = Vec::with_capacity(n);
        for (k, c) in f.cells.into_iter().enumerate() {
            if c.id != k {
                return Err(PartitionError::Format(format!("cells[{k}].id is {}, expected {k}", c.id)));
            }
            let links = c.parent.into_iter().chain(c.sibling).chain(c.children.into_iter().flatten());
            if let Some(bad) = links.into_iter().find(|&l| l >= n) {
                return Err(PartitionError::Format(format!("cells[{k}] links to missing cell {bad}")));
            }
            let bx = StateBox::from_box(&IntervalBox::from_bounds(&c.bx.lo, &c.bx.hi)?)?;
            if bx.misc.dim() != q.dim() {
                return Err(PartitionError::Format(format!("cells[{k}].box has {} misc dims, Q has {}", bx.misc.dim(), q.dim())));
            }
            cells.push(Cell {
                id: c.id,
                bx,
                label: c.label,
                parent: c.parent,
                sibling: c.sibling,
                children: c.children,
                leaf: c.leaf,
                dropped: c.dropped,
                active: false,
            });
        }
        Ok(PartitionTree { eps: f.eps, q, cells, stats: BuildStats::default() })
    }
}
