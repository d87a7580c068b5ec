//! Composite-interval (box) arithmetic.
//!
//! Boxes are Cartesian products of closed real intervals. Configuration boxes
//! carry `x`, `y` in meters and `theta` in radians; state boxes append the
//! miscellaneous (velocity-like) dimensions.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative slack on the `width / eps > 1` subdivision test, so cells whose
/// width equals the threshold up to rounding are not split again.
pub const WIDTH_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntervalError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no configuration dimension exceeds its subdivision threshold")]
    BelowThreshold,
}

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        debug_assert!(lo <= hi, "inverted interval [{lo}, {hi}]");
        Self { lo, hi }
    }

    pub fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn contains_interval(&self, other: &Interval) -> bool {
        self.lo <= other.lo && other.hi <= self.hi
    }

    /// Componentwise intersection, `None` when the result inverts.
    pub fn intersect(&self, other: &Interval) -> Option<Interval> {
        let lo = self.lo.max(other.lo);
        let hi = self.hi.min(other.hi);
        (lo <= hi).then_some(Interval { lo, hi })
    }

    pub fn minkowski(&self, other: &Interval) -> Interval {
        Interval { lo: self.lo + other.lo, hi: self.hi + other.hi }
    }

    /// `k * self`, with bounds swapped for negative `k`.
    pub fn scale(&self, k: f64) -> Interval {
        let (a, b) = (k * self.lo, k * self.hi);
        Interval { lo: a.min(b), hi: a.max(b) }
    }
}

/// N-dimensional composite interval. Zero dimensions is allowed and has
/// volume 1 (empty product).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct IntervalBox {
    pub dims: Vec<Interval>,
}

impl IntervalBox {
    pub fn new(dims: Vec<Interval>) -> Self {
        Self { dims }
    }

    pub fn from_bounds(lo: &[f64], hi: &[f64]) -> Result<Self, IntervalError> {
        if lo.len() != hi.len() {
            return Err(IntervalError::DimensionMismatch { expected: lo.len(), got: hi.len() });
        }
        Ok(Self { dims: lo.iter().zip(hi).map(|(&l, &h)| Interval::new(l, h)).collect() })
    }

    pub fn point(z: &[f64]) -> Self {
        Self { dims: z.iter().map(|&v| Interval::point(v)).collect() }
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn lo(&self) -> Vec<f64> {
        self.dims.iter().map(|d| d.lo).collect()
    }

    pub fn hi(&self) -> Vec<f64> {
        self.dims.iter().map(|d| d.hi).collect()
    }

    pub fn center(&self) -> Vec<f64> {
        self.dims.iter().map(Interval::mid).collect()
    }

    pub fn radius(&self) -> Vec<f64> {
        self.dims.iter().map(|d| 0.5 * d.width()).collect()
    }

    pub fn contains_point(&self, z: &[f64]) -> bool {
        z.len() == self.dim() && self.dims.iter().zip(z).all(|(d, &v)| d.contains(v))
    }

    pub fn contains_box(&self, other: &IntervalBox) -> bool {
        other.dim() == self.dim()
            && self.dims.iter().zip(&other.dims).all(|(a, b)| a.contains_interval(b))
    }

    fn check_dim(&self, other: &IntervalBox) -> Result<(), IntervalError> {
        if self.dim() != other.dim() {
            return Err(IntervalError::DimensionMismatch { expected: self.dim(), got: other.dim() });
        }
        Ok(())
    }

    /// `Π δ_i (hi_i - lo_i)`.
    pub fn volume_scaled(&self, delta: &[f64]) -> Result<f64, IntervalError> {
        if delta.len() != self.dim() {
            return Err(IntervalError::DimensionMismatch { expected: self.dim(), got: delta.len() });
        }
        Ok(self.dims.iter().zip(delta).map(|(d, s)| s * d.width()).product())
    }

    pub fn volume(&self) -> f64 {
        self.dims.iter().map(Interval::width).product()
    }

    pub fn intersect(&self, other: &IntervalBox) -> Result<Option<IntervalBox>, IntervalError> {
        self.check_dim(other)?;
        let mut dims = Vec::with_capacity(self.dim());
        for (a, b) in self.dims.iter().zip(&other.dims) {
            match a.intersect(b) {
                Some(i) => dims.push(i),
                None => return Ok(None),
            }
        }
        Ok(Some(IntervalBox { dims }))
    }

    pub fn minkowski_sum(&self, other: &IntervalBox) -> Result<IntervalBox, IntervalError> {
        self.check_dim(other)?;
        Ok(IntervalBox { dims: self.dims.iter().zip(&other.dims).map(|(a, b)| a.minkowski(b)).collect() })
    }

    /// Cartesian product `self × other`.
    pub fn product(&self, other: &IntervalBox) -> IntervalBox {
        let mut dims = self.dims.clone();
        dims.extend_from_slice(&other.dims);
        IntervalBox { dims }
    }
}

/// Configuration-space cell `[x] × [y] × [theta]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfigBox {
    pub x: Interval,
    pub y: Interval,
    pub theta: Interval,
}

impl ConfigBox {
    pub fn new(x: Interval, y: Interval, theta: Interval) -> Self {
        Self { x, y, theta }
    }

    pub fn point(x: f64, y: f64, theta: f64) -> Self {
        Self { x: Interval::point(x), y: Interval::point(y), theta: Interval::point(theta) }
    }

    pub fn dims(&self) -> [Interval; 3] {
        [self.x, self.y, self.theta]
    }

    pub fn from_dims(d: &[Interval]) -> Self {
        Self { x: d[0], y: d[1], theta: d[2] }
    }

    pub fn to_box(&self) -> IntervalBox {
        IntervalBox { dims: self.dims().to_vec() }
    }

    pub fn contains(&self, x: f64, y: f64, theta: f64) -> bool {
        self.x.contains(x) && self.y.contains(y) && self.theta.contains(theta)
    }

    /// Largest ratio `width_i / eps_i` over the three configuration dimensions.
    pub fn normalized_width(&self, eps: &[f64; 3]) -> f64 {
        self.dims().iter().zip(eps).map(|(d, e)| d.width() / e).fold(0.0, f64::max)
    }
}

/// Angle reduced to `[0, 2π)`.
pub fn wrap_theta_value(theta: f64) -> f64 {
    let w = theta.rem_euclid(TAU);
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Splits `theta` into fragments inside `[0, 2π]`. Widths up to `2π` give one
/// or two fragments; wider intervals (only possible for reachable boxes)
/// unroll into more.
pub fn wrap_theta(cfg: &ConfigBox) -> Vec<ConfigBox> {
    wrap_angle(cfg.theta)
        .into_iter()
        .map(|f| ConfigBox { theta: f.interval, ..*cfg })
        .collect()
}

/// One wrapped piece of an angle interval. `lo_tracks` / `hi_tracks` mark the
/// endpoints that move with the source interval's `lo` / `hi` (the others are
/// pinned to `0` or `2π`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngleFragment {
    pub interval: Interval,
    pub lo_tracks: bool,
    pub hi_tracks: bool,
}

pub fn wrap_angle(theta: Interval) -> Vec<AngleFragment> {
    let shift = (theta.lo / TAU).floor() * TAU;
    let lo = theta.lo - shift;
    let hi = theta.hi - shift;
    if hi <= TAU {
        return vec![AngleFragment { interval: Interval { lo, hi }, lo_tracks: true, hi_tracks: true }];
    }
    let mut out = vec![AngleFragment { interval: Interval { lo, hi: TAU }, lo_tracks: true, hi_tracks: false }];
    let mut rest = hi - TAU;
    while rest > TAU {
        out.push(AngleFragment { interval: Interval { lo: 0.0, hi: TAU }, lo_tracks: false, hi_tracks: false });
        rest -= TAU;
    }
    out.push(AngleFragment { interval: Interval { lo: 0.0, hi: rest }, lo_tracks: false, hi_tracks: true });
    out
}

/// State-space cell `X = X_p × X_q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateBox {
    pub cfg: ConfigBox,
    pub misc: IntervalBox,
}

impl StateBox {
    pub fn new(cfg: ConfigBox, misc: IntervalBox) -> Self {
        Self { cfg, misc }
    }

    pub fn dim(&self) -> usize {
        3 + self.misc.dim()
    }

    pub fn to_box(&self) -> IntervalBox {
        self.cfg.to_box().product(&self.misc)
    }

    pub fn from_box(b: &IntervalBox) -> Result<Self, IntervalError> {
        if b.dim() < 3 {
            return Err(IntervalError::DimensionMismatch { expected: 3, got: b.dim() });
        }
        Ok(Self { cfg: ConfigBox::from_dims(&b.dims[..3]), misc: IntervalBox::new(b.dims[3..].to_vec()) })
    }

    /// Bisects the configuration dimension with the largest `width / eps`
    /// (lowest index on ties). The misc part is copied unchanged.
    pub fn split(&self, eps: &[f64; 3]) -> Result<(StateBox, StateBox), IntervalError> {
        let dims = self.cfg.dims();
        let mut best = 0;
        let mut best_ratio = dims[0].width() / eps[0];
        for i in 1..3 {
            let ratio = dims[i].width() / eps[i];
            if ratio > best_ratio {
                best = i;
                best_ratio = ratio;
            }
        }
        if best_ratio <= 1.0 + WIDTH_TOL {
            return Err(IntervalError::BelowThreshold);
        }
        let mid = dims[best].mid();
        let mut left = dims;
        let mut right = dims;
        left[best].hi = mid;
        right[best].lo = mid;
        Ok((
            StateBox { cfg: ConfigBox::from_dims(&left), misc: self.misc.clone() },
            StateBox { cfg: ConfigBox::from_dims(&right), misc: self.misc.clone() },
        ))
    }

    pub fn normalized_width(&self, eps: &[f64; 3]) -> f64 {
        self.cfg.normalized_width(eps)
    }

    /// Normalized width above `1` (beyond rounding noise).
    pub fn splittable(&self, eps: &[f64; 3]) -> bool {
        self.normalized_width(eps) > 1.0 + WIDTH_TOL
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn iv(lo: f64, hi: f64) -> Interval {
        Interval::new(lo, hi)
    }

    #[test]
    fn unit_cube_volume() {
        let b = IntervalBox::new(vec![iv(0.0, 1.0); 3]);
        assert_eq!(b.volume_scaled(&[1.0, 1.0, 1.0]).unwrap(), 1.0);
    }

    #[test]
    fn angle_scaling_normalizes_full_turn() {
        let b = IntervalBox::new(vec![iv(0.0, 1.0), iv(0.0, 1.0), iv(0.0, TAU)]);
        let v = b.volume_scaled(&[1.0, 1.0, 1.0 / TAU]).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_dim_volume_is_one() {
        assert_eq!(IntervalBox::default().volume_scaled(&[]).unwrap(), 1.0);
    }

    #[test]
    fn volume_dimension_mismatch() {
        let b = IntervalBox::new(vec![iv(0.0, 1.0); 2]);
        assert_eq!(
            b.volume_scaled(&[1.0]),
            Err(IntervalError::DimensionMismatch { expected: 2, got: 1 })
        );
    }

    #[test]
    fn intersect_cases() {
        let a = IntervalBox::new(vec![iv(0.0, 1.0), iv(0.0, 1.0)]);
        let b = IntervalBox::new(vec![iv(0.5, 2.0), iv(0.0, 1.0)]);
        assert_eq!(a.intersect(&b).unwrap(), Some(IntervalBox::new(vec![iv(0.5, 1.0), iv(0.0, 1.0)])));
        let c = IntervalBox::new(vec![iv(3.0, 4.0), iv(0.0, 1.0)]);
        assert_eq!(a.intersect(&c).unwrap(), None);
        assert_eq!(a.intersect(&a).unwrap(), Some(a.clone()));
        assert!(a.intersect(&IntervalBox::new(vec![iv(0.0, 1.0)])).is_err());
    }

    #[test]
    fn minkowski_cases() {
        let a = IntervalBox::new(vec![iv(0.0, 1.0)]);
        assert_eq!(a.minkowski_sum(&IntervalBox::point(&[0.0])).unwrap(), a);
        let b = IntervalBox::new(vec![iv(-0.1, 0.2)]);
        let s = a.minkowski_sum(&b).unwrap();
        assert!((s.dims[0].lo + 0.1).abs() < 1e-15 && (s.dims[0].hi - 1.2).abs() < 1e-15);
    }

    #[test]
    fn wrap_examples() {
        let y = iv(0.0, 1.0);
        let f = wrap_theta(&ConfigBox::new(y, y, iv(0.1, 0.5)));
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].theta, iv(0.1, 0.5));

        let f = wrap_theta(&ConfigBox::new(y, y, iv(-0.2, 0.2)));
        assert_eq!(f.len(), 2);
        assert!((f[0].theta.lo - (TAU - 0.2)).abs() < 1e-12 && f[0].theta.hi == TAU);
        assert!(f[1].theta.lo == 0.0 && (f[1].theta.hi - 0.2).abs() < 1e-12);

        let f = wrap_theta(&ConfigBox::new(y, y, iv(6.0, 6.6)));
        assert_eq!(f.len(), 2);
        assert!((f[0].theta.lo - 6.0).abs() < 1e-12 && f[0].theta.hi == TAU);
        assert!((f[1].theta.hi - (6.6 - TAU)).abs() < 1e-12);
        assert!((f[1].theta.hi - 0.3168).abs() < 1e-4);
    }

    #[test]
    fn wrap_wider_than_turn_unrolls() {
        let f = wrap_angle(iv(-1.0, 2.0 * TAU));
        let total: f64 = f.iter().map(|a| a.interval.width()).sum();
        assert!((total - (2.0 * TAU + 1.0)).abs() < 1e-12);
        assert_eq!(f.len(), 3);
    }

    #[test]
    fn split_widest_dimension() {
        let b = StateBox::new(ConfigBox::new(iv(0.0, 2.0), iv(0.0, 1.0), iv(0.0, 1.0)), IntervalBox::default());
        let (l, r) = b.split(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(l.cfg.x, iv(0.0, 1.0));
        assert_eq!(r.cfg.x, iv(1.0, 2.0));
        assert_eq!(l.cfg.y, b.cfg.y);
        let vol = |s: &StateBox| s.to_box().volume();
        assert!((vol(&l) + vol(&r) - vol(&b)).abs() < 1e-15);
    }

    #[test]
    fn split_tie_prefers_x() {
        let b = StateBox::new(ConfigBox::new(iv(0.0, 2.0), iv(0.0, 2.0), iv(0.0, 2.0)), IntervalBox::default());
        let (l, _) = b.split(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(l.cfg.x, iv(0.0, 1.0));
        assert_eq!(l.cfg.theta, iv(0.0, 2.0));
    }

    #[test]
    fn split_below_threshold() {
        let b = StateBox::new(ConfigBox::new(iv(0.0, 1.0), iv(0.0, 1.0), iv(0.0, PI / 8.0)), IntervalBox::default());
        assert_eq!(b.split(&[1.0, 1.0, 1.0]), Err(IntervalError::BelowThreshold));
    }

    fn arb_interval() -> impl Strategy<Value = Interval> {
        (-10.0f64..10.0, 0.0f64..5.0).prop_map(|(lo, w)| Interval::new(lo, lo + w))
    }

    fn arb_box(n: usize) -> impl Strategy<Value = IntervalBox> {
        prop::collection::vec(arb_interval(), n).prop_map(IntervalBox::new)
    }

    proptest! {
        #[test]
        fn intersect_laws(a in arb_box(3), b in arb_box(3), c in arb_box(3)) {
            prop_assert_eq!(a.intersect(&b).unwrap(), b.intersect(&a).unwrap());
            prop_assert_eq!(a.intersect(&a).unwrap(), Some(a.clone()));
            let ab_c = a.intersect(&b).unwrap().and_then(|ab| ab.intersect(&c).unwrap());
            let a_bc = b.intersect(&c).unwrap().and_then(|bc| a.intersect(&bc).unwrap());
            prop_assert_eq!(ab_c, a_bc);
        }

        #[test]
        fn minkowski_widths_add(a in arb_box(4), b in arb_box(4)) {
            let s = a.minkowski_sum(&b).unwrap();
            for i in 0..4 {
                let expect = a.dims[i].width() + b.dims[i].width();
                prop_assert!((s.dims[i].width() - expect).abs() < 1e-12);
            }
        }

        #[test]
        fn volume_product_and_permutation(a in arb_box(2), b in arb_box(2),
                                          d in prop::collection::vec(0.1f64..3.0, 4)) {
            let p = a.product(&b);
            let vp = p.volume_scaled(&d).unwrap();
            let va = a.volume_scaled(&d[..2]).unwrap();
            let vb = b.volume_scaled(&d[2..]).unwrap();
            prop_assert!((vp - va * vb).abs() <= 1e-9 * vp.abs().max(1.0));
            let perm = IntervalBox::new(vec![p.dims[3], p.dims[1], p.dims[0], p.dims[2]]);
            let dperm = [d[3], d[1], d[0], d[2]];
            prop_assert!((perm.volume_scaled(&dperm).unwrap() - vp).abs() <= 1e-9 * vp.abs().max(1.0));
        }

        #[test]
        fn wrap_preserves_length(lo in -10.0f64..10.0, w in 0.0f64..TAU) {
            let frags = wrap_angle(Interval::new(lo, lo + w));
            prop_assert!(frags.len() <= 2);
            let total: f64 = frags.iter().map(|f| f.interval.width()).sum();
            prop_assert!((total - w).abs() < 1e-12);
            for f in &frags {
                prop_assert!(f.interval.lo >= 0.0 && f.interval.hi <= TAU);
            }
            if frags.len() == 2 {
                prop_assert!(frags[1].interval.hi <= frags[0].interval.lo + 1e-12);
            }
        }

        #[test]
        fn split_children_cover_parent(x in arb_interval(), y in arb_interval(), t in 0.0f64..3.0) {
            let b = StateBox::new(ConfigBox::new(x, y, Interval::new(0.0, t)), IntervalBox::default());
            let eps = [0.5, 0.5, 0.4];
            if let Ok((l, r)) = b.split(&eps) {
                let v = b.to_box().volume();
                prop_assert!((l.to_box().volume() + r.to_box().volume() - v).abs() <= 1e-12 * v.max(1.0));
                prop_assert!(b.to_box().contains_box(&l.to_box()) && b.to_box().contains_box(&r.to_box()));
                prop_assert!(l.normalized_width(&eps) <= b.normalized_width(&eps));
                prop_assert!(r.normalized_width(&eps) <= b.normalized_width(&eps));
            } else {
                prop_assert!(b.normalized_width(&eps) <= 1.0 + WIDTH_TOL);
            }
        }
    }
}
