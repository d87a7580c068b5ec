//! Deterministic SVG export of xy projections: leaves in blue, reach boxes
//! in red, rollouts green (collision-free) or red. Elements are emitted in
//! leaf-id order with fixed-precision coordinates, so equal inputs give
//! equal bytes.

use std::fmt::Write;

use rayon::prelude::*;

use crate::data::Rollout;
use crate::geom::{Polygon, Workspace};
use crate::interval::IntervalBox;
use crate::neuralnet::Mlp;
use crate::partition::PartitionTree;
use crate::reach::{reach_box_traced, Dynamics};

/// Pixels per meter.
const SCALE: f64 = 160.0;
const MARGIN: f64 = 0.1;

/// One-step reach box of every leaf, in leaf-id order.
pub fn leaf_reach_boxes(tree: &PartitionTree, net: &Mlp, dynamics: &dyn Dynamics) -> Vec<IntervalBox> {
    tree.leaves().par_iter().map(|&id| reach_box_traced(net, &tree.cells[id].bx, dynamics).0).collect()
}

struct Frame {
    x0: f64,
    y1: f64,
}

impl Frame {
    fn x(&self, x: f64) -> f64 {
        (x - self.x0) * SCALE
    }

    fn y(&self, y: f64) -> f64 {
        (self.y1 - y) * SCALE
    }

    fn rect(&self, out: &mut String, b: &IntervalBox, style: &str) {
        let (x, y) = (&b.dims[0], &b.dims[1]);
        let _ = writeln!(
            out,
            r#"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" {style}/>"#,
            self.x(x.lo),
            self.y(y.hi),
            x.width() * SCALE,
            y.width() * SCALE
        );
    }

    fn ring(&self, out: &mut String, p: &Polygon, style: &str) {
        let pts: Vec<String> = p.vertices.iter().map(|v| format!("{:.3},{:.3}", self.x(v.x), self.y(v.y))).collect();
        let _ = writeln!(out, r#"<polygon points="{}" {style}/>"#, pts.join(" "));
    }
}

pub fn render(ws: &Workspace, tree: &PartitionTree, reach: &[IntervalBox], runs: &[Rollout]) -> String {
    let bb = ws.aabb();
    let f = Frame { x0: bb.min.x - MARGIN, y1: bb.max.y + MARGIN };
    let w = (bb.max.x - bb.min.x + 2.0 * MARGIN) * SCALE;
    let h = (bb.max.y - bb.min.y + 2.0 * MARGIN) * SCALE;
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.3} {h:.3}">"#);
    f.ring(&mut out, &ws.outer, r##"fill="#ffffff" stroke="#000000" stroke-width="2""##);
    for hole in &ws.holes {
        f.ring(&mut out, hole, r##"fill="#9a9a9a" stroke="#000000" stroke-width="1""##);
    }
    out.push_str("<g id=\"leaves\">\n");
    for id in tree.leaves() {
        f.rect(&mut out, &tree.cells[id].bx.to_box(), r##"fill="none" stroke="#1f4fd1" stroke-opacity="0.5" stroke-width="0.6""##);
    }
    out.push_str("</g>\n<g id=\"reach\">\n");
    for b in reach {
        f.rect(&mut out, b, r##"fill="#d62020" fill-opacity="0.08" stroke="#d62020" stroke-opacity="0.5" stroke-width="0.6""##);
    }
    out.push_str("</g>\n<g id=\"trajectories\">\n");
    for r in runs {
        let colour = if r.collision_step.is_some() { "#d62020" } else { "#1a9a3a" };
        let pts: Vec<String> = r.states.iter().map(|z| format!("{:.3},{:.3}", f.x(z[0]), f.y(z[1]))).collect();
        let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="1.5"/>"#, pts.join(" "));
    }
    out.push_str("</g>\n</svg>\n");
    out
}
