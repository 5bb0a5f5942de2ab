//! Planar geometry for the bird's-eye-view plane.
//!
//! Everything here works in world meters. Values are immutable after
//! construction and every operation is a pure function, so shared references
//! can be used freely across threads.
//!
//! Tolerances are fixed constants: `EPS` (1e-9) for convexity and orientation
//! predicates, `DEGENERATE_AREA` (1e-12) for homogeneous scale and area
//! degeneracy.

use std::cmp::Ordering;
use std::f64::consts::PI;
use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Predicate tolerance for orientation and convexity tests.
pub const EPS: f64 = 1e-9;
/// Anything at or below this magnitude is treated as zero area / zero scale.
pub const DEGENERATE_AREA: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point maps to the horizon (|w| = {w:e})")]
    HorizonPoint { w: f64 },
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("invalid polygon: {0}")]
    InvalidPolygon(String),
    #[error("invalid oriented box: {0}")]
    InvalidBox(String),
    #[error("homography is singular (|det| = {0:e})")]
    SingularHomography(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn dot(self, o: Point2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 2D cross product.
    pub fn cross(self, o: Point2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, o: Point2) -> f64 {
        (self - o).norm()
    }

    pub fn lerp(self, o: Point2, t: f64) -> Point2 {
        Point2::new(self.x + (o.x - self.x) * t, self.y + (o.y - self.y) * t)
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, o: Point2) -> Point2 {
        Point2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, s: f64) -> Point2 {
        Point2::new(self.x * s, self.y * s)
    }
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid can land exactly on 2π for tiny negative inputs
    if r >= PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Absolute angular difference on the circle, in `[0, π]`.
pub fn angle_distance(a: f64, b: f64) -> f64 {
    wrap_angle(a - b).abs()
}

/// Planar projective transform, row-major.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: [[f64; 3]; 3],
}

impl Homography {
    /// Builds a homography, scaling so that `m[2][2] == 1` when it is nonzero.
    pub fn new(m: [[f64; 3]; 3]) -> Result<Self, GeometryError> {
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(GeometryError::DegenerateInput(
                "homography entries must be finite".into(),
            ));
        }
        let mut m = m;
        let s = m[2][2];
        if s != 0.0 {
            for row in m.iter_mut() {
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
        }
        let h = Self { m };
        let det = h.determinant();
        if det.abs() <= DEGENERATE_AREA {
            return Err(GeometryError::SingularHomography(det));
        }
        Ok(h)
    }

    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn from_row_major(v: &[f64; 9]) -> Result<Self, GeometryError> {
        Self::new([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]])
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.m;
        [
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        ]
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.m
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn inverse(&self) -> Self {
        let m = &self.m;
        let det = self.determinant();
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| {
            m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]
        };
        let adj = [
            [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
            [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
            [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
        ];
        let mut inv = [[0.0; 3]; 3];
        for (r, row) in adj.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                inv[r][c] = v / det;
            }
        }
        // invertibility was checked at construction, so this cannot fail
        Self::new(inv).unwrap_or(Self { m: inv })
    }

    /// Homogeneous scale `w` of the transformed point.
    pub fn w(&self, p: Point2) -> f64 {
        self.m[2][0] * p.x + self.m[2][1] * p.y + self.m[2][2]
    }
}

pub fn project_point(h: &Homography, p: Point2) -> Result<Point2, GeometryError> {
    let m = h.matrix();
    let w = h.w(p);
    if w.abs() <= DEGENERATE_AREA {
        return Err(GeometryError::HorizonPoint { w });
    }
    Ok(Point2::new(
        (m[0][0] * p.x + m[0][1] * p.y + m[0][2]) / w,
        (m[1][0] * p.x + m[1][1] * p.y + m[1][2]) / w,
    ))
}

/// Projects the footprint of `b` through `h`.
///
/// The four corners must all lie on the same side of the horizon line,
/// otherwise the image is not a bounded convex quadrilateral.
pub fn project_box(h: &Homography, b: &OrientedBox) -> Result<ConvexPolygon, GeometryError> {
    let corners = b.corners();
    let mut sign = 0.0;
    let mut out = Vec::with_capacity(4);
    for c in corners {
        let w = h.w(c);
        if w.abs() <= DEGENERATE_AREA || (sign != 0.0 && w.signum() != sign) {
            return Err(GeometryError::HorizonPoint { w });
        }
        sign = w.signum();
        out.push(project_point(h, c)?);
    }
    ConvexPolygon::new(out)
}

/// BEV footprint of an agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub center: Point2,
    pub length: f64,
    pub width: f64,
    pub yaw: f64,
}

impl OrientedBox {
    pub fn new(center: Point2, length: f64, width: f64, yaw: f64) -> Result<Self, GeometryError> {
        if !center.is_finite() {
            return Err(GeometryError::InvalidBox("center must be finite".into()));
        }
        if !(length.is_finite() && length > 0.0) {
            return Err(GeometryError::InvalidBox(format!("length {length} must be > 0")));
        }
        if !(width.is_finite() && width > 0.0) {
            return Err(GeometryError::InvalidBox(format!("width {width} must be > 0")));
        }
        if !(-PI..PI).contains(&yaw) {
            return Err(GeometryError::InvalidBox(format!("yaw {yaw} outside [-pi, pi)")));
        }
        Ok(Self {
            center,
            length,
            width,
            yaw,
        })
    }

    pub fn area(&self) -> f64 {
        self.length * self.width
    }

    /// Corners in counter-clockwise order, starting front-right.
    pub fn corners(&self) -> [Point2; 4] {
        let (s, c) = self.yaw.sin_cos();
        let fwd = Point2::new(c, s) * (self.length / 2.0);
        let left = Point2::new(-s, c) * (self.width / 2.0);
        let o = self.center;
        [
            o + fwd - left,
            o + fwd + left,
            o - fwd + left,
            o - fwd - left,
        ]
    }

    pub fn footprint(&self) -> ConvexPolygon {
        ConvexPolygon::from_ccw_unchecked(self.corners().to_vec())
    }
}

/// Axis-aligned bounding box, used as a cheap rejection test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Point2,
    pub max: Point2,
}

impl Aabb {
    pub fn of_points(pts: &[Point2]) -> Self {
        let mut min = Point2::new(f64::INFINITY, f64::INFINITY);
        let mut max = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in pts {
            min.x = min.x.min(p.x);
            min.y = min.y.min(p.y);
            max.x = max.x.max(p.x);
            max.y = max.y.max(p.y);
        }
        Self { min, max }
    }

    pub fn overlaps(&self, o: &Aabb) -> bool {
        self.min.x <= o.max.x && o.min.x <= self.max.x && self.min.y <= o.max.y && o.min.y <= self.max.y
    }

    pub fn inflate(&self, d: f64) -> Aabb {
        Aabb {
            min: Point2::new(self.min.x - d, self.min.y - d),
            max: Point2::new(self.max.x + d, self.max.y + d),
        }
    }
}

/// Convex polygon with counter-clockwise vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexPolygon {
    vertices: Vec<Point2>,
}

impl ConvexPolygon {
    /// Validates and stores a convex polygon. Clockwise input is reversed.
    pub fn new(mut vertices: Vec<Point2>) -> Result<Self, GeometryError> {
        if vertices.len() < 3 {
            return Err(GeometryError::InvalidPolygon(format!(
                "need at least 3 vertices, got {}",
                vertices.len()
            )));
        }
        if vertices.iter().any(|p| !p.is_finite()) {
            return Err(GeometryError::InvalidPolygon("non-finite vertex".into()));
        }
        let n = vertices.len();
        for i in 0..n {
            if vertices[i].distance(vertices[(i + 1) % n]) <= EPS {
                return Err(GeometryError::InvalidPolygon(format!(
                    "repeated vertex at index {}",
                    (i + 1) % n
                )));
            }
        }
        let signed = signed_area(&vertices);
        if signed.abs() <= DEGENERATE_AREA {
            return Err(GeometryError::InvalidPolygon("zero area".into()));
        }
        if signed < 0.0 {
            vertices.reverse();
        }
        let mut turning = 0.0;
        for i in 0..n {
            let a = vertices[i];
            let b = vertices[(i + 1) % n];
            let c = vertices[(i + 2) % n];
            let e0 = b - a;
            let e1 = c - b;
            let cross = e0.cross(e1);
            if cross < -EPS {
                return Err(GeometryError::InvalidPolygon(format!(
                    "not convex at vertex {}",
                    (i + 1) % n
                )));
            }
            turning += cross.atan2(e0.dot(e1));
        }
        // a simple convex polygon turns exactly once
        if (turning - 2.0 * PI).abs() > 1e-6 {
            return Err(GeometryError::InvalidPolygon("self-intersecting".into()));
        }
        Ok(Self { vertices })
    }

    pub(crate) fn from_ccw_unchecked(vertices: Vec<Point2>) -> Self {
        Self { vertices }
    }

    pub fn vertices(&self) -> &[Point2] {
        &self.vertices
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.vertices).abs()
    }

    pub fn centroid(&self) -> Point2 {
        let v = &self.vertices;
        let n = v.len();
        let (mut cx, mut cy, mut a2) = (0.0, 0.0, 0.0);
        // shift to the first vertex for numerical stability
        let o = v[0];
        for i in 0..n {
            let p = v[i] - o;
            let q = v[(i + 1) % n] - o;
            let c = p.cross(q);
            a2 += c;
            cx += (p.x + q.x) * c;
            cy += (p.y + q.y) * c;
        }
        Point2::new(o.x + cx / (3.0 * a2), o.y + cy / (3.0 * a2))
    }

    pub fn aabb(&self) -> Aabb {
        Aabb::of_points(&self.vertices)
    }

    pub fn edges(&self) -> impl Iterator<Item = (Point2, Point2)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    /// Boundary-inclusive containment.
    pub fn contains(&self, p: Point2) -> bool {
        self.edges().all(|(a, b)| (b - a).cross(p - a) >= -EPS)
    }

    /// Uniform scaling about the centroid.
    pub fn scaled(&self, factor: f64) -> ConvexPolygon {
        let c = self.centroid();
        ConvexPolygon::from_ccw_unchecked(
            self.vertices.iter().map(|&p| c + (p - c) * factor).collect(),
        )
    }

    pub fn translated(&self, d: Point2) -> ConvexPolygon {
        ConvexPolygon::from_ccw_unchecked(self.vertices.iter().map(|&p| p + d).collect())
    }

    /// Total order on the raw vertex data, used to pick a canonical argument
    /// order for symmetric binary operations.
    fn canonical_cmp(&self, o: &ConvexPolygon) -> Ordering {
        self.vertices.len().cmp(&o.vertices.len()).then_with(|| {
            for (a, b) in self.vertices.iter().zip(&o.vertices) {
                let c = a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y));
                if c != Ordering::Equal {
                    return c;
                }
            }
            Ordering::Equal
        })
    }
}

fn signed_area(v: &[Point2]) -> f64 {
    let n = v.len();
    let o = v[0];
    let mut s = 0.0;
    for i in 1..n - 1 {
        s += (v[i] - o).cross(v[i + 1] - o);
    }
    s / 2.0
}

/// Clips `subject` to the inside of every edge of the convex `clip`.
fn clip_convex(subject: &[Point2], clip: &ConvexPolygon) -> Vec<Point2> {
    let mut out: Vec<Point2> = subject.to_vec();
    for (a, b) in clip.edges() {
        if out.is_empty() {
            break;
        }
        let input = std::mem::take(&mut out);
        let e = b - a;
        let side = |p: Point2| e.cross(p - a);
        let n = input.len();
        for i in 0..n {
            let cur = input[i];
            let prev = input[(i + n - 1) % n];
            let sc = side(cur);
            let sp = side(prev);
            if sc >= 0.0 {
                if sp < 0.0 {
                    out.push(prev.lerp(cur, sp / (sp - sc)));
                }
                out.push(cur);
            } else if sp >= 0.0 {
                out.push(prev.lerp(cur, sp / (sp - sc)));
            }
        }
    }
    out
}

fn ordered<'a>(a: &'a ConvexPolygon, b: &'a ConvexPolygon) -> (&'a ConvexPolygon, &'a ConvexPolygon) {
    if a.canonical_cmp(b) == Ordering::Greater {
        (b, a)
    } else {
        (a, b)
    }
}

/// Area of `a ∩ b`, computed by convex clipping. Symmetric in its arguments.
pub fn intersection_area(a: &ConvexPolygon, b: &ConvexPolygon) -> f64 {
    if !a.aabb().overlaps(&b.aabb()) {
        return 0.0;
    }
    let (subject, clip) = ordered(a, b);
    let clipped = clip_convex(subject.vertices(), clip);
    if clipped.len() < 3 {
        return 0.0;
    }
    let area = signed_area(&clipped);
    if area <= DEGENERATE_AREA {
        0.0
    } else {
        area
    }
}

pub fn iou(a: &ConvexPolygon, b: &ConvexPolygon) -> Result<f64, GeometryError> {
    let (aa, ab) = (a.area(), b.area());
    if aa <= DEGENERATE_AREA || ab <= DEGENERATE_AREA {
        return Err(GeometryError::DegenerateInput(format!(
            "polygon area too small ({aa:e}, {ab:e})"
        )));
    }
    let inter = intersection_area(a, b);
    let union = aa + ab - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

fn point_segment_distance(p: Point2, a: Point2, b: Point2) -> f64 {
    let ab = b - a;
    let len2 = ab.dot(ab);
    if len2 == 0.0 {
        return p.distance(a);
    }
    let t = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
    p.distance(a + ab * t)
}

fn segments_intersect(p1: Point2, p2: Point2, q1: Point2, q2: Point2) -> bool {
    let d1 = (q2 - q1).cross(p1 - q1);
    let d2 = (q2 - q1).cross(p2 - q1);
    let d3 = (p2 - p1).cross(q1 - p1);
    let d4 = (p2 - p1).cross(q2 - p1);
    ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
}

/// Minimum Euclidean distance between two convex polygons; 0 when they touch
/// or overlap.
pub fn polygon_distance(a: &ConvexPolygon, b: &ConvexPolygon) -> f64 {
    if a.vertices().iter().any(|&p| b.contains(p)) || b.vertices().iter().any(|&p| a.contains(p)) {
        return 0.0;
    }
    for (p1, p2) in a.edges() {
        for (q1, q2) in b.edges() {
            if segments_intersect(p1, p2, q1, q2) {
                return 0.0;
            }
        }
    }
    let mut best = f64::INFINITY;
    for &p in a.vertices() {
        for (q1, q2) in b.edges() {
            best = best.min(point_segment_distance(p, q1, q2));
        }
    }
    for &p in b.vertices() {
        for (q1, q2) in a.edges() {
            best = best.min(point_segment_distance(p, q1, q2));
        }
    }
    best
}

/// Midpoint of the region where two polygons touch, within `tol`.
///
/// Collects every vertex of either polygon lying within `tol` of the other's
/// boundary and returns the midpoint of the two collected points farthest
/// apart, together with that span length. `None` if nothing is within `tol`.
pub fn contact_midpoint(a: &ConvexPolygon, b: &ConvexPolygon, tol: f64) -> Option<(Point2, f64)> {
    let near = |p: Point2, poly: &ConvexPolygon| {
        poly.edges().any(|(q1, q2)| point_segment_distance(p, q1, q2) <= tol)
    };
    let mut pts: Vec<Point2> = a.vertices().iter().copied().filter(|&p| near(p, b)).collect();
    pts.extend(b.vertices().iter().copied().filter(|&p| near(p, a)));
    if pts.is_empty() {
        return None;
    }
    let mut best = (pts[0], pts[0], 0.0);
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let d = pts[i].distance(pts[j]);
            if d > best.2 {
                best = (pts[i], pts[j], d);
            }
        }
    }
    Some((best.0.lerp(best.1, 0.5), best.2))
}
