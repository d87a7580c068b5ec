//! Planar polygon kernel.
//!
//! Everything here works on simple polygons stored counter-clockwise. Areas of
//! intersection are computed by decomposing both operands into convex pieces
//! and clipping pairwise, which keeps the code free of a general boolean
//! kernel. Unions of convex pieces are carried around as [`Region`]s.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interval::ConfigBox;

/// Vertex snapping / incidence tolerance (meters).
pub const GEOM_TOL: f64 = 1e-9;
/// Areas at or below this are treated as zero (m²).
pub const AREA_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("rotation span {span} rad is not below π; split the angle interval first")]
    RotationSpanTooLarge { span: f64 },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("malformed world file: {0}")]
    Format(String),
}

impl GeomError {
    fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        GeomError::Invalid { field: field.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, o: Point) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Point) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn rotate(self, theta: f64) -> Point {
        let (s, c) = theta.sin_cos();
        Point { x: c * self.x - s * self.y, y: s * self.x + c * self.y }
    }

    pub fn dist(self, o: Point) -> f64 {
        (self - o).norm()
    }
}

impl Add for Point {
    type Output = Point;
    fn add(self, o: Point) -> Point {
        Point { x: self.x + o.x, y: self.y + o.y }
    }
}

impl Sub for Point {
    type Output = Point;
    fn sub(self, o: Point) -> Point {
        Point { x: self.x - o.x, y: self.y - o.y }
    }
}

impl Neg for Point {
    type Output = Point;
    fn neg(self) -> Point {
        Point { x: -self.x, y: -self.y }
    }
}

impl Mul<f64> for Point {
    type Output = Point;
    fn mul(self, k: f64) -> Point {
        Point { x: self.x * k, y: self.y * k }
    }
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b - a).cross(c - a)
}

/// Distance from `p` to the segment `[a, b]`.
pub fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = b - a;
    let len2 = ab.dot(ab);
    if len2 == 0.0 {
        return p.dist(a);
    }
    let t = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
    p.dist(a + ab * t)
}

/// Proper or touching intersection test for closed segments.
fn segments_intersect(a: Point, b: Point, c: Point, d: Point) -> bool {
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    let on = |p: Point, q: Point, r: Point| segment_distance(r, p, q) <= GEOM_TOL;
    on(c, d, a) || on(c, d, b) || on(a, b, c) || on(a, b, d)
}

/// Axis-aligned bounding rectangle `(min, max)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Point,
    pub max: Point,
}

impl Aabb {
    pub fn overlaps(&self, o: &Aabb) -> bool {
        self.min.x <= o.max.x && o.min.x <= self.max.x && self.min.y <= o.max.y && o.min.y <= self.max.y
    }
}

/// Simple polygon, counter-clockwise. An empty vertex list is the empty set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Polygon {
    pub vertices: Vec<Point>,
}

impl Polygon {
    pub fn new(vertices: Vec<Point>) -> Self {
        Self { vertices }
    }

    pub fn empty() -> Self {
        Self { vertices: Vec::new() }
    }

    pub fn from_coords(coords: &[[f64; 2]]) -> Self {
        Self { vertices: coords.iter().map(|c| Point::new(c[0], c[1])).collect() }
    }

    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self::new(vec![Point::new(x0, y0), Point::new(x1, y0), Point::new(x1, y1), Point::new(x0, y1)])
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.len() < 3 || self.area() <= AREA_TOL
    }

    pub fn signed_area(&self) -> f64 {
        let n = self.vertices.len();
        if n < 3 {
            return 0.0;
        }
        let o = self.vertices[0];
        let mut s = 0.0;
        for i in 1..n - 1 {
            s += (self.vertices[i] - o).cross(self.vertices[i + 1] - o);
        }
        0.5 * s
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    pub fn edges(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    pub fn aabb(&self) -> Aabb {
        let mut min = Point::new(f64::INFINITY, f64::INFINITY);
        let mut max = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in &self.vertices {
            min.x = min.x.min(v.x);
            min.y = min.y.min(v.y);
            max.x = max.x.max(v.x);
            max.y = max.y.max(v.y);
        }
        Aabb { min, max }
    }

    pub fn translate(&self, t: Point) -> Polygon {
        Polygon { vertices: self.vertices.iter().map(|&v| v + t).collect() }
    }

    pub fn rotate(&self, theta: f64) -> Polygon {
        Polygon { vertices: self.vertices.iter().map(|v| v.rotate(theta)).collect() }
    }

    pub fn is_convex(&self) -> bool {
        let n = self.vertices.len();
        if n < 3 {
            return true;
        }
        (0..n).all(|i| orient(self.vertices[i], self.vertices[(i + 1) % n], self.vertices[(i + 2) % n]) >= -GEOM_TOL)
    }

    /// Boundary-inclusive point test (crossing number plus an edge-distance
    /// check at `tol`).
    pub fn contains_point(&self, p: Point, tol: f64) -> bool {
        if self.vertices.len() < 3 {
            return false;
        }
        if self.edges().any(|(a, b)| segment_distance(p, a, b) <= tol) {
            return true;
        }
        self.strictly_contains_point(p)
    }

    /// Crossing-number test with no boundary handling.
    pub fn strictly_contains_point(&self, p: Point) -> bool {
        let mut inside = false;
        for (a, b) in self.edges() {
            if (a.y > p.y) != (b.y > p.y) {
                let x = a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x);
                if p.x < x {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Distance from `p` to the polygon boundary.
    pub fn boundary_distance(&self, p: Point) -> f64 {
        self.edges().map(|(a, b)| segment_distance(p, a, b)).fold(f64::INFINITY, f64::min)
    }

    /// `Err((i, j))` names the first pair of non-adjacent edges that touch, or
    /// adjacent edges that fold back on each other.
    pub fn check_simple(&self) -> Result<(), (usize, usize)> {
        let n = self.vertices.len();
        let v = &self.vertices;
        for i in 0..n {
            let (a, b) = (v[i], v[(i + 1) % n]);
            if a.dist(b) <= GEOM_TOL {
                return Err((i, (i + 1) % n));
            }
            for j in i + 1..n {
                let (c, d) = (v[j], v[(j + 1) % n]);
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                if adjacent {
                    // Shared vertex; reject only collinear fold-back.
                    let (p, q, r) = if j == i + 1 { (a, b, d) } else { (c, a, b) };
                    if orient(p, q, r).abs() <= GEOM_TOL * p.dist(r).max(1.0) && (q - p).dot(r - q) < 0.0 {
                        return Err((i, j));
                    }
                    continue;
                }
                if segments_intersect(a, b, c, d) {
                    return Err((i, j));
                }
            }
        }
        Ok(())
    }

    /// Drops vertices that are collinear with their neighbours.
    pub fn simplified(&self) -> Polygon {
        let mut v = self.vertices.clone();
        loop {
            let n = v.len();
            if n < 3 {
                return Polygon::new(v);
            }
            let idx = (0..n).find(|&i| {
                let (a, b, c) = (v[(i + n - 1) % n], v[i], v[(i + 1) % n]);
                orient(a, b, c).abs() <= GEOM_TOL * a.dist(c).max(1.0)
            });
            match idx {
                Some(i) => {
                    v.remove(i);
                }
                None => return Polygon::new(v),
            }
        }
    }
}

/// Convex hull (Andrew's monotone chain), counter-clockwise, without
/// collinear points.
pub fn convex_hull(points: &[Point]) -> Polygon {
    let mut pts: Vec<Point> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup_by(|a, b| a.dist(*b) <= GEOM_TOL * 1e-3);
    if pts.len() < 3 {
        return Polygon::new(pts);
    }
    let mut hull: Vec<Point> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Vec<Point> = if pass == 0 { pts.clone() } else { pts.iter().rev().copied().collect() };
        for p in iter {
            while hull.len() >= start + 2 && orient(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    Polygon::new(hull)
}

/// Keeps the part of a convex polygon with `n · q <= d`.
pub fn clip_halfplane(poly: &[Point], n: Point, d: f64) -> Vec<Point> {
    let m = poly.len();
    let mut out = Vec::with_capacity(m + 1);
    for i in 0..m {
        let a = poly[i];
        let b = poly[(i + 1) % m];
        let da = n.dot(a) - d;
        let db = n.dot(b) - d;
        if da <= 0.0 {
            out.push(a);
        }
        if (da < 0.0 && db > 0.0) || (da > 0.0 && db < 0.0) {
            let t = da / (da - db);
            out.push(a + (b - a) * t);
        }
    }
    out
}

/// Intersection of two convex CCW polygons (Sutherland–Hodgman).
pub fn clip_convex(subject: &Polygon, clip: &Polygon) -> Polygon {
    let mut out = subject.vertices.clone();
    for (a, b) in clip.edges() {
        if out.is_empty() {
            break;
        }
        let e = b - a;
        let n = Point::new(e.y, -e.x);
        out = clip_halfplane(&out, n, n.dot(a));
    }
    Polygon::new(out)
}

/// Triangulates a simple CCW polygon by ear clipping.
fn triangulate(poly: &Polygon) -> Vec<[usize; 3]> {
    let v = &poly.vertices;
    let mut idx: Vec<usize> = (0..v.len()).collect();
    let mut tris = Vec::new();
    let mut guard = 0;
    while idx.len() > 3 && guard < 10 * v.len() * v.len() + 10 {
        guard += 1;
        let m = idx.len();
        let mut found = None;
        for k in 0..m {
            let (ia, ib, ic) = (idx[(k + m - 1) % m], idx[k], idx[(k + 1) % m]);
            let (a, b, c) = (v[ia], v[ib], v[ic]);
            if orient(a, b, c) <= GEOM_TOL * GEOM_TOL {
                continue;
            }
            let blocked = idx.iter().any(|&j| {
                if j == ia || j == ib || j == ic {
                    return false;
                }
                let p = v[j];
                orient(a, b, p) >= 0.0 && orient(b, c, p) >= 0.0 && orient(c, a, p) >= 0.0
            });
            if !blocked {
                found = Some(k);
                break;
            }
        }
        let k = match found {
            Some(k) => k,
            None => break,
        };
        let m = idx.len();
        tris.push([idx[(k + m - 1) % m], idx[k], idx[(k + 1) % m]]);
        idx.remove(k);
    }
    if idx.len() == 3 {
        tris.push([idx[0], idx[1], idx[2]]);
    }
    tris
}

/// Convex decomposition: ear-clipping triangulation followed by greedy
/// Hertel–Mehlhorn merging of triangles across removable diagonals.
pub fn convex_decompose(poly: &Polygon) -> Vec<Polygon> {
    let poly = poly.simplified();
    if poly.vertices.len() < 3 {
        return Vec::new();
    }
    if poly.is_convex() {
        return vec![poly];
    }
    let v = &poly.vertices;
    let mut pieces: Vec<Vec<usize>> = triangulate(&poly).into_iter().map(|t| t.to_vec()).collect();
    let convex = |ids: &[usize]| Polygon::new(ids.iter().map(|&i| v[i]).collect()).is_convex();
    'outer: loop {
        for i in 0..pieces.len() {
            for j in i + 1..pieces.len() {
                if let Some(merged) = merge_on_shared_edge(&pieces[i], &pieces[j]) {
                    if convex(&merged) {
                        pieces[i] = merged;
                        pieces.remove(j);
                        continue 'outer;
                    }
                }
            }
        }
        break;
    }
    pieces.into_iter().map(|ids| Polygon::new(ids.iter().map(|&i| v[i]).collect())).collect()
}

/// Merges two CCW index cycles that share a directed edge `a→b` / `b→a`.
fn merge_on_shared_edge(p: &[usize], q: &[usize]) -> Option<Vec<usize>> {
    let (n, m) = (p.len(), q.len());
    for i in 0..n {
        let (a, b) = (p[i], p[(i + 1) % n]);
        for j in 0..m {
            if q[j] == b && q[(j + 1) % m] == a {
                // Walk p from b around to a, then q from a around to b.
                let mut out = Vec::with_capacity(n + m - 2);
                for k in 0..n {
                    out.push(p[(i + 1 + k) % n]);
                }
                for k in 2..m {
                    out.push(q[(j + k) % m]);
                }
                return Some(out);
            }
        }
    }
    None
}

/// Union of convex polygons. Pieces may overlap; areas computed by summing
/// pieces are upper bounds of the true union area in that case.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Region {
    pub pieces: Vec<Polygon>,
}

impl Region {
    pub fn empty() -> Self {
        Self { pieces: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.iter().all(Polygon::is_empty)
    }

    pub fn area_upper(&self) -> f64 {
        self.pieces.iter().map(Polygon::area).sum()
    }

    pub fn contains_point(&self, p: Point, tol: f64) -> bool {
        self.pieces.iter().any(|q| q.contains_point(p, tol))
    }

    pub fn from_polygon(poly: &Polygon) -> Self {
        if poly.is_convex() {
            Region { pieces: vec![poly.clone()] }
        } else {
            Region { pieces: convex_decompose(poly) }
        }
    }
}

#[derive(Debug, Clone)]
struct ConvexPiece {
    poly: Polygon,
    aabb: Aabb,
}

impl ConvexPiece {
    fn new(poly: Polygon) -> Self {
        let aabb = poly.aabb();
        Self { poly, aabb }
    }
}

/// Free region `int(outer) \ ∪ holes`. Holes are obstacles strictly inside
/// the outer boundary and pairwise disjoint.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub outer: Polygon,
    pub holes: Vec<Polygon>,
    outer_pieces: Vec<ConvexPiece>,
    hole_pieces: Vec<ConvexPiece>,
}

impl Workspace {
    /// Validates simplicity, orientation and hole placement.
    pub fn new(outer: Polygon, holes: Vec<Polygon>) -> Result<Self, GeomError> {
        validate_ring(&outer, "outer")?;
        for (h, hole) in holes.iter().enumerate() {
            let field = format!("holes[{h}]");
            validate_ring(hole, &field)?;
            for (k, &p) in hole.vertices.iter().enumerate() {
                if !outer.strictly_contains_point(p) || outer.boundary_distance(p) <= GEOM_TOL {
                    return Err(GeomError::invalid(format!("{field}[{k}]"), "vertex is not strictly inside the outer boundary"));
                }
            }
            if let Some((i, j)) = rings_touch(hole, &outer) {
                return Err(GeomError::invalid(field, format!("edge {i} touches outer edge {j}")));
            }
            for (g, other) in holes.iter().enumerate().take(h) {
                if let Some((i, j)) = rings_touch(hole, other) {
                    return Err(GeomError::invalid(field, format!("edge {i} touches holes[{g}] edge {j}")));
                }
                if hole.vertices.iter().any(|&p| other.strictly_contains_point(p))
                    || other.vertices.iter().any(|&p| hole.strictly_contains_point(p))
                {
                    return Err(GeomError::invalid(field, format!("overlaps holes[{g}]")));
                }
            }
        }
        let outer_pieces = convex_decompose(&outer).into_iter().map(ConvexPiece::new).collect();
        let hole_pieces = holes.iter().flat_map(convex_decompose).map(ConvexPiece::new).collect();
        Ok(Self { outer, holes, outer_pieces, hole_pieces })
    }

    pub fn aabb(&self) -> Aabb {
        self.outer.aabb()
    }

    /// Free area.
    pub fn area(&self) -> f64 {
        self.outer.area() - self.holes.iter().map(Polygon::area).sum::<f64>()
    }

    pub fn contains_point(&self, p: Point) -> bool {
        self.outer.contains_point(p, 0.0) && !self.holes.iter().any(|h| h.strictly_contains_point(p) && h.boundary_distance(p) > 0.0)
    }

    /// Distance from `p` to the nearest wall (outer or hole boundary).
    pub fn boundary_distance(&self, p: Point) -> f64 {
        self.holes.iter().map(|h| h.boundary_distance(p)).fold(self.outer.boundary_distance(p), f64::min)
    }

    /// Area of a convex polygon lying outside the free region.
    fn convex_violation(&self, poly: &Polygon) -> f64 {
        if poly.vertices.len() < 3 {
            return 0.0;
        }
        let area = poly.area();
        if area <= 0.0 {
            return 0.0;
        }
        let bb = poly.aabb();
        let overlap = |pieces: &[ConvexPiece]| -> f64 {
            pieces.iter().filter(|p| p.aabb.overlaps(&bb)).map(|p| clip_convex(poly, &p.poly).area()).sum()
        };
        let inside_outer = overlap(&self.outer_pieces);
        let inside_holes = overlap(&self.hole_pieces);
        (area - inside_outer + inside_holes).max(0.0)
    }

    /// Area of `region ∩ complement(W)` (summed over pieces).
    pub fn region_violation(&self, region: &Region) -> f64 {
        region.pieces.iter().map(|p| self.convex_violation(p)).sum()
    }

    pub fn contains_region(&self, region: &Region) -> bool {
        region.pieces.iter().all(|p| self.convex_violation(p) <= AREA_TOL)
    }

    /// `poly ⊆ W`; the empty polygon is contained in everything.
    pub fn contains(&self, poly: &Polygon) -> bool {
        poly.vertices.len() < 3 || self.contains_region(&Region::from_polygon(poly))
    }

    /// Area of `poly ∩ complement(W)`.
    pub fn violation_area(&self, poly: &Polygon) -> f64 {
        if poly.vertices.len() < 3 {
            return 0.0;
        }
        self.region_violation(&Region::from_polygon(poly))
    }
}

fn validate_ring(poly: &Polygon, field: &str) -> Result<(), GeomError> {
    if poly.vertices.len() < 3 {
        return Err(GeomError::invalid(field, format!("needs at least 3 vertices, got {}", poly.vertices.len())));
    }
    if let Some((k, _)) = poly.vertices.iter().enumerate().find(|(_, p)| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(GeomError::invalid(format!("{field}[{k}]"), "non-finite coordinate"));
    }
    if let Err((i, j)) = poly.check_simple() {
        return Err(GeomError::invalid(field, format!("self-intersecting: edge {i} meets edge {j}")));
    }
    let a = poly.signed_area();
    if a <= 0.0 {
        return Err(GeomError::invalid(field, format!("vertices must be counter-clockwise (signed area {a})")));
    }
    Ok(())
}

fn rings_touch(p: &Polygon, q: &Polygon) -> Option<(usize, usize)> {
    for (i, (a, b)) in p.edges().enumerate() {
        for (j, (c, d)) in q.edges().enumerate() {
            if segments_intersect(a, b, c, d) {
                return Some((i, j));
            }
        }
    }
    None
}

/// Robot footprint in the body frame plus its convex decomposition and the
/// bounding radius `r = max ‖v‖` about the body origin.
#[derive(Debug, Clone)]
pub struct RobotBody {
    pub footprint: Polygon,
    pub convex_pieces: Vec<Polygon>,
    pub r: f64,
}

impl RobotBody {
    pub fn new(footprint: Polygon) -> Result<Self, GeomError> {
        validate_ring(&footprint, "robot")?;
        let convex_pieces = convex_decompose(&footprint);
        let r = footprint.vertices.iter().map(|v| v.norm()).fold(0.0, f64::max);
        Ok(Self { footprint, convex_pieces, r })
    }

    /// Convex pieces placed at `(x, y, theta)`.
    pub fn placed_pieces(&self, x: f64, y: f64, theta: f64) -> Region {
        let t = Point::new(x, y);
        Region { pieces: self.convex_pieces.iter().map(|p| p.rotate(theta).translate(t)).collect() }
    }
}

/// `R(theta) · footprint + (x, y)`.
pub fn footprint_at(robot: &RobotBody, x: f64, y: f64, theta: f64) -> Polygon {
    robot.footprint.rotate(theta).translate(Point::new(x, y))
}

fn rect_corners(cfg: &ConfigBox) -> [Point; 4] {
    [
        Point::new(cfg.x.lo, cfg.y.lo),
        Point::new(cfg.x.hi, cfg.y.lo),
        Point::new(cfg.x.hi, cfg.y.hi),
        Point::new(cfg.x.lo, cfg.y.hi),
    ]
}

/// Polygon containing every footprint placed in `cfg`.
///
/// Each vertex's rotation arc is enclosed by its two endpoints and the
/// intersection of the endpoint tangents (`‖v‖ / cos(Δθ/2)` along the mid
/// angle); the per-piece hull is then swept over the position rectangle.
pub fn footprint_over_approx(robot: &RobotBody, cfg: &ConfigBox) -> Result<Region, GeomError> {
    let span = cfg.theta.width();
    if span >= PI {
        return Err(GeomError::RotationSpanTooLarge { span });
    }
    let (tl, tu, tm) = (cfg.theta.lo, cfg.theta.hi, cfg.theta.mid());
    let stretch = 1.0 / (0.5 * span).cos();
    let corners = rect_corners(cfg);
    let pieces = robot
        .convex_pieces
        .iter()
        .map(|piece| {
            let mut arc = Vec::with_capacity(3 * piece.len());
            for &v in &piece.vertices {
                arc.push(v.rotate(tl));
                arc.push(v.rotate(tu));
                arc.push(v.rotate(tm) * stretch);
            }
            let swept = convex_hull(&arc);
            let mut pts = Vec::with_capacity(4 * swept.len());
            for &c in &corners {
                pts.extend(swept.vertices.iter().map(|&p| p + c));
            }
            convex_hull(&pts)
        })
        .collect();
    Ok(Region { pieces })
}

/// Polygon contained in every footprint placed in `cfg` (possibly empty).
///
/// The mid-angle footprint is eroded by `r·Δθ/2` (the largest displacement a
/// rotation by `Δθ/2` causes inside the radius-`r` disk); each eroded piece is
/// then intersected over the four translates given by the position corners.
pub fn footprint_under_approx(robot: &RobotBody, cfg: &ConfigBox) -> Region {
    let tm = cfg.theta.mid();
    let erosion = robot.r * 0.5 * cfg.theta.width();
    let corners = rect_corners(cfg);
    let mut pieces = Vec::new();
    for piece in &robot.convex_pieces {
        let rotated = piece.rotate(tm);
        let mut out = rotated.translate(corners[0]).vertices;
        for (a, b) in rotated.edges() {
            let e = b - a;
            let len = e.norm();
            if len == 0.0 {
                continue;
            }
            let n = Point::new(e.y / len, -e.x / len);
            let shift = corners.iter().map(|&c| n.dot(c)).fold(f64::INFINITY, f64::min);
            out = clip_halfplane(&out, n, n.dot(a) - erosion + shift);
            if out.len() < 3 {
                break;
            }
        }
        let poly = Polygon::new(out);
        if !poly.is_empty() {
            pieces.push(poly);
        }
    }
    Region { pieces }
}

/// World file: `{"outer": [[x,y],..], "holes": [[[x,y],..],..], "robot": [[x,y],..]}`,
/// all rings counter-clockwise, robot in the body frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldFile {
    pub outer: Vec<[f64; 2]>,
    #[serde(default)]
    pub holes: Vec<Vec<[f64; 2]>>,
    pub robot: Vec<[f64; 2]>,
}

impl WorldFile {
    pub fn parse(text: &str) -> Result<Self, GeomError> {
        serde_json::from_str(text).map_err(|e| GeomError::Format(e.to_string()))
    }

    pub fn build(&self) -> Result<(Workspace, RobotBody), GeomError> {
        let ws = Workspace::new(Polygon::from_coords(&self.outer), self.holes.iter().map(|h| Polygon::from_coords(h)).collect())?;
        Ok((ws, RobotBody::new(Polygon::from_coords(&self.robot))?))
    }
}

/// Parses and validates a world file.
pub fn load_world(text: &str) -> Result<(Workspace, RobotBody), GeomError> {
    WorldFile::parse(text)?.build()
}
