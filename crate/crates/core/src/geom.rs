//! Planar geometry in the dataset-local metric frame.

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl From<[f64; 2]> for Vec2 {
    fn from(a: [f64; 2]) -> Self {
        Vec2::new(a[0], a[1])
    }
}

impl From<Vec2> for [f64; 2] {
    fn from(v: Vec2) -> Self {
        [v.x, v.y]
    }
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, o: Vec2) -> f64 {
        (self - o).norm()
    }

    pub fn normalized(self) -> Option<Vec2> {
        let n = self.norm();
        (n > 0.0 && n.is_finite()).then(|| self * (1.0 / n))
    }

    /// Left-hand perpendicular.
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn lerp(self, o: Vec2, t: f64) -> Vec2 {
        self + (o - self) * t
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, o: Vec2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Closest point on segment `a`-`b` to `p`, as (parameter in [0,1], point).
pub fn closest_on_segment(p: Vec2, a: Vec2, b: Vec2) -> (f64, Vec2) {
    let ab = b - a;
    let len_sq = ab.norm_sq();
    if len_sq == 0.0 {
        return (0.0, a);
    }
    let t = ((p - a).dot(ab) / len_sq).clamp(0.0, 1.0);
    (t, a + ab * t)
}

/// Nearest point of a polyline to a query point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolylineHit {
    pub segment: usize,
    pub point: Vec2,
    pub arc: f64,
    pub distance: f64,
}

/// Polyline with cached cumulative arc length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<Vec2>", into = "Vec<Vec2>")]
pub struct Polyline {
    points: Vec<Vec2>,
    cum: Vec<f64>,
}

impl From<Vec<Vec2>> for Polyline {
    fn from(points: Vec<Vec2>) -> Self {
        Polyline::new(points)
    }
}

impl From<Polyline> for Vec<Vec2> {
    fn from(p: Polyline) -> Self {
        p.points
    }
}

impl Polyline {
    pub fn new(points: Vec<Vec2>) -> Self {
        let mut cum = Vec::with_capacity(points.len());
        let mut acc = 0.0;
        for (i, p) in points.iter().enumerate() {
            if i > 0 {
                acc += p.dist(points[i - 1]);
            }
            cum.push(acc);
        }
        Polyline { points, cum }
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Cumulative arc length at each vertex.
    pub fn arcs(&self) -> &[f64] {
        &self.cum
    }

    pub fn length(&self) -> f64 {
        self.cum.last().copied().unwrap_or(0.0)
    }

    pub fn first(&self) -> Vec2 {
        self.points[0]
    }

    pub fn last(&self) -> Vec2 {
        *self.points.last().expect("non-empty polyline")
    }

    pub fn segment_count(&self) -> usize {
        self.points.len().saturating_sub(1)
    }

    pub fn segment(&self, i: usize) -> (Vec2, Vec2) {
        (self.points[i], self.points[i + 1])
    }

    fn segment_at(&self, arc: f64) -> usize {
        let n = self.segment_count();
        if n == 0 {
            return 0;
        }
        // first vertex with cum > arc, minus one
        let idx = self.cum.partition_point(|&c| c <= arc);
        idx.saturating_sub(1).min(n - 1)
    }

    /// Point at arc length `arc`, clamped to the polyline.
    pub fn point_at(&self, arc: f64) -> Vec2 {
        if self.points.len() == 1 {
            return self.points[0];
        }
        let arc = arc.clamp(0.0, self.length());
        let i = self.segment_at(arc);
        let (a, b) = self.segment(i);
        let seg_len = self.cum[i + 1] - self.cum[i];
        if seg_len == 0.0 {
            return a;
        }
        a.lerp(b, (arc - self.cum[i]) / seg_len)
    }

    /// Unit tangent at arc length `arc`. Falls back to +x on degenerate input.
    pub fn tangent_at(&self, arc: f64) -> Vec2 {
        if self.points.len() < 2 {
            return Vec2::new(1.0, 0.0);
        }
        let arc = arc.clamp(0.0, self.length());
        let mut i = self.segment_at(arc);
        // skip zero-length segments
        loop {
            let (a, b) = self.segment(i);
            if let Some(t) = (b - a).normalized() {
                return t;
            }
            if i + 1 >= self.segment_count() {
                break;
            }
            i += 1;
        }
        (self.last() - self.first())
            .normalized()
            .unwrap_or(Vec2::new(1.0, 0.0))
    }

    fn hit_segment(&self, p: Vec2, i: usize) -> PolylineHit {
        let (a, b) = self.segment(i);
        let (t, q) = closest_on_segment(p, a, b);
        PolylineHit {
            segment: i,
            point: q,
            arc: self.cum[i] + t * (self.cum[i + 1] - self.cum[i]),
            distance: p.dist(q),
        }
    }

    /// Globally nearest point; ties resolve to the lower arc length.
    pub fn project(&self, p: Vec2) -> PolylineHit {
        self.project_window(p, 0.0, f64::INFINITY)
    }

    /// Nearest point among segments overlapping the arc window `[lo, hi]`.
    /// The returned arc is clamped into the window.
    pub fn project_window(&self, p: Vec2, lo: f64, hi: f64) -> PolylineHit {
        if self.points.len() == 1 {
            return PolylineHit {
                segment: 0,
                point: self.points[0],
                arc: 0.0,
                distance: p.dist(self.points[0]),
            };
        }
        let lo = lo.clamp(0.0, self.length());
        let hi = hi.clamp(lo, self.length());
        let first = self.segment_at(lo);
        let last = self.segment_at(hi);
        let mut best: Option<PolylineHit> = None;
        for i in first..=last {
            let mut h = self.hit_segment(p, i);
            if h.arc < lo || h.arc > hi {
                let arc = h.arc.clamp(lo, hi);
                let q = self.point_at(arc);
                h = PolylineHit {
                    segment: i,
                    point: q,
                    arc,
                    distance: p.dist(q),
                };
            }
            if best.is_none_or(|b| h.distance < b.distance) {
                best = Some(h);
            }
        }
        best.expect("at least one segment")
    }

    /// Resample at uniform arc-length spacing. The final vertex is always kept.
    pub fn resample(&self, spacing: f64) -> Polyline {
        assert!(spacing > 0.0, "spacing must be positive");
        if self.points.len() < 2 {
            return self.clone();
        }
        let total = self.length();
        let n = (total / spacing).floor() as usize;
        let mut pts: Vec<Vec2> = (0..=n).map(|k| self.point_at(k as f64 * spacing)).collect();
        if total - n as f64 * spacing > 1e-9 || pts.len() < 2 {
            pts.push(self.last());
        }
        Polyline::new(pts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_projection_clamps() {
        let (t, q) = closest_on_segment(Vec2::new(-3.0, 4.0), Vec2::ZERO, Vec2::new(10.0, 0.0));
        assert_eq!(t, 0.0);
        assert_eq!(q, Vec2::ZERO);
        let (t, q) = closest_on_segment(Vec2::new(5.0, 2.0), Vec2::ZERO, Vec2::new(10.0, 0.0));
        assert_eq!(t, 0.5);
        assert_eq!(q, Vec2::new(5.0, 0.0));
    }

    #[test]
    fn polyline_arc_queries() {
        let pl = Polyline::new(vec![Vec2::new(0.0, 0.0), Vec2::new(3.0, 4.0), Vec2::new(6.0, 0.0)]);
        assert_eq!(pl.length(), 10.0);
        assert_eq!(pl.point_at(5.0), Vec2::new(3.0, 4.0));
        assert_eq!(pl.point_at(100.0), Vec2::new(6.0, 0.0));
        let t = pl.tangent_at(7.0);
        assert!((t.x - 0.6).abs() < 1e-12 && (t.y + 0.8).abs() < 1e-12);
        let r = pl.resample(3.0);
        assert_eq!(r.len(), 5);
        assert_eq!(r.last(), Vec2::new(6.0, 0.0));
    }

    #[test]
    fn window_projection_restricts_arc() {
        let pl = Polyline::new(vec![Vec2::new(0.0, 0.0), Vec2::new(100.0, 0.0)]);
        let h = pl.project_window(Vec2::new(10.0, 1.0), 20.0, 50.0);
        assert_eq!(h.arc, 20.0);
        let h = pl.project(Vec2::new(10.0, 1.0));
        assert_eq!(h.arc, 10.0);
        assert_eq!(h.distance, 1.0);
    }
}
