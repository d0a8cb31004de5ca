use nalgebra::{Point3, Vector3};

use super::MeshError;

/// Hits closer than this to a ray origin are ignored.
pub const MIN_HIT_DISTANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Point3<f64>,
    pub max: Point3<f64>,
}

impl Aabb {
    pub fn empty() -> Self {
        Self {
            min: Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY),
            max: Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        }
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Point3<f64>>) -> Self {
        let mut bounds = Self::empty();
        for p in points {
            bounds.grow(p);
        }
        bounds
    }

    pub fn is_empty(&self) -> bool {
        self.min.x > self.max.x || self.min.y > self.max.y || self.min.z > self.max.z
    }

    pub fn grow(&mut self, p: &Point3<f64>) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        Aabb {
            min: self.min.inf(&other.min),
            max: self.max.sup(&other.max),
        }
    }

    pub fn expanded(&self, margin: f64) -> Aabb {
        let m = Vector3::repeat(margin);
        Aabb {
            min: self.min - m,
            max: self.max + m,
        }
    }

    pub fn extent(&self) -> Vector3<f64> {
        self.max - self.min
    }

    pub fn center(&self) -> Point3<f64> {
        nalgebra::center(&self.min, &self.max)
    }

    pub fn contains_box(&self, other: &Aabb) -> bool {
        (0..3).all(|k| self.min[k] <= other.min[k] && other.max[k] <= self.max[k])
    }

    pub fn overlaps(&self, other: &Aabb) -> bool {
        (0..3).all(|k| self.min[k] <= other.max[k] && other.min[k] <= self.max[k])
    }

    pub fn distance_to_point(&self, p: &Point3<f64>) -> f64 {
        let mut d2 = 0.0;
        for k in 0..3 {
            let v = if p[k] < self.min[k] {
                self.min[k] - p[k]
            } else if p[k] > self.max[k] {
                p[k] - self.max[k]
            } else {
                0.0
            };
            d2 += v * v;
        }
        d2.sqrt()
    }

    pub fn distance_to_box(&self, other: &Aabb) -> f64 {
        let mut d2 = 0.0;
        for k in 0..3 {
            let v = (other.min[k] - self.max[k]).max(self.min[k] - other.max[k]).max(0.0);
            d2 += v * v;
        }
        d2.sqrt()
    }

    /// Slab test of the parametric line `origin + t * dir` for `t` in `[t_min, t_max]`.
    /// The box is padded slightly so that rounding never culls a grazing hit.
    pub fn hit_by(&self, origin: &Point3<f64>, inv_dir: &Vector3<f64>, t_min: f64, t_max: f64) -> bool {
        let pad = 1e-9 * (1.0 + self.extent().amax());
        let mut lo = t_min;
        let mut hi = t_max;
        for k in 0..3 {
            let a = (self.min[k] - pad - origin[k]) * inv_dir[k];
            let b = (self.max[k] + pad - origin[k]) * inv_dir[k];
            // NaN arises for a zero direction component with the origin on a slab plane.
            let (near, far) = if a <= b { (a, b) } else { (b, a) };
            if near.is_nan() || far.is_nan() {
                if origin[k] < self.min[k] - pad || origin[k] > self.max[k] + pad {
                    return false;
                }
                continue;
            }
            lo = lo.max(near);
            hi = hi.min(far);
            if lo > hi {
                return false;
            }
        }
        true
    }
}

/// Half-line with a unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Point3<f64>,
    direction: Vector3<f64>,
}

impl Ray {
    pub fn new(origin: Point3<f64>, direction: Vector3<f64>) -> Result<Self, MeshError> {
        let norm = direction.norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(MeshError::ZeroDirection);
        }
        Ok(Self {
            origin,
            direction: direction / norm,
        })
    }

    pub fn direction(&self) -> Vector3<f64> {
        self.direction
    }

    pub fn at(&self, t: f64) -> Point3<f64> {
        self.origin + self.direction * t
    }
}

/// Line segment swept by a ball of `radius` (a capsule). Radius 0 is the bare segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub start: Point3<f64>,
    pub end: Point3<f64>,
    pub radius: f64,
}

impl Segment {
    pub fn new(start: Point3<f64>, end: Point3<f64>) -> Self {
        Self {
            start,
            end,
            radius: 0.0,
        }
    }

    pub fn with_radius(mut self, radius: f64) -> Self {
        self.radius = radius.max(0.0);
        self
    }

    pub fn length(&self) -> f64 {
        (self.end - self.start).norm()
    }

    pub fn bounds(&self) -> Aabb {
        Aabb::from_points([&self.start, &self.end])
    }
}

/// Ray/triangle crossing with barycentric weights of the hit point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangleHit {
    pub distance: f64,
    pub barycentric: [f64; 3],
}

impl TriangleHit {
    /// Smallest barycentric weight; zero means the hit is on an edge or vertex.
    pub fn edge_proximity(&self) -> f64 {
        self.barycentric.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Watertight ray/triangle intersection (Woop, Benthin and Wald). Edges are inclusive,
/// so a ray through a shared edge reports a hit on both neighbours.
pub fn ray_triangle(origin: &Point3<f64>, dir: &Vector3<f64>, tri: &[Point3<f64>; 3]) -> Option<TriangleHit> {
    let kz = dir.iamax();
    let mut kx = (kz + 1) % 3;
    let mut ky = (kx + 1) % 3;
    if dir[kz] < 0.0 {
        std::mem::swap(&mut kx, &mut ky);
    }
    let sx = dir[kx] / dir[kz];
    let sy = dir[ky] / dir[kz];
    let sz = 1.0 / dir[kz];

    let a = tri[0] - origin;
    let b = tri[1] - origin;
    let c = tri[2] - origin;
    let ax = a[kx] - sx * a[kz];
    let ay = a[ky] - sy * a[kz];
    let bx = b[kx] - sx * b[kz];
    let by = b[ky] - sy * b[kz];
    let cx = c[kx] - sx * c[kz];
    let cy = c[ky] - sy * c[kz];

    let u = cx * by - cy * bx;
    let v = ax * cy - ay * cx;
    let w = bx * ay - by * ax;
    if (u < 0.0 || v < 0.0 || w < 0.0) && (u > 0.0 || v > 0.0 || w > 0.0) {
        return None;
    }
    let det = u + v + w;
    if det == 0.0 {
        return None;
    }
    let t_scaled = u * sz * a[kz] + v * sz * b[kz] + w * sz * c[kz];
    let t = t_scaled / det;
    if !(t > MIN_HIT_DISTANCE) || !t.is_finite() {
        return None;
    }
    Some(TriangleHit {
        distance: t,
        barycentric: [u / det, v / det, w / det],
    })
}

/// Closest point on a triangle (Ericson, Real-Time Collision Detection 5.1.5).
pub fn closest_point_on_triangle(p: &Point3<f64>, tri: &[Point3<f64>; 3]) -> Point3<f64> {
    let [a, b, c] = *tri;
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

pub fn point_triangle_distance(p: &Point3<f64>, tri: &[Point3<f64>; 3]) -> f64 {
    (p - closest_point_on_triangle(p, tri)).norm()
}

/// Distance between segments `p1q1` and `p2q2` (Ericson 5.1.9).
pub fn segment_segment_distance(p1: &Point3<f64>, q1: &Point3<f64>, p2: &Point3<f64>, q2: &Point3<f64>) -> f64 {
    let d1 = q1 - p1;
    let d2 = q2 - p2;
    let r = p1 - p2;
    let a = d1.norm_squared();
    let e = d2.norm_squared();
    let f = d2.dot(&r);
    let eps = 1e-18;
    let (s, t);
    if a <= eps && e <= eps {
        return (p1 - p2).norm();
    }
    if a <= eps {
        s = 0.0;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = d1.dot(&r);
        if e <= eps {
            t = 0.0;
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let mut s0 = if denom > eps * a * e {
                ((b * f - c * e) / denom).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let mut t0 = (b * s0 + f) / e;
            if t0 < 0.0 {
                t0 = 0.0;
                s0 = (-c / a).clamp(0.0, 1.0);
            } else if t0 > 1.0 {
                t0 = 1.0;
                s0 = ((b - c) / a).clamp(0.0, 1.0);
            }
            s = s0;
            t = t0;
        }
    }
    let c1 = p1 + d1 * s;
    let c2 = p2 + d2 * t;
    (c1 - c2).norm()
}

/// True iff the closed segment touches the triangle.
pub fn segment_intersects_triangle(start: &Point3<f64>, end: &Point3<f64>, tri: &[Point3<f64>; 3]) -> bool {
    let d = end - start;
    let len = d.norm();
    if len == 0.0 {
        return point_triangle_distance(start, tri) == 0.0;
    }
    let dir = d / len;
    if let Some(hit) = ray_triangle(start, &dir, tri) {
        if hit.distance <= len {
            return true;
        }
    }
    // Endpoints lying on the triangle are below the ray's minimum hit distance.
    point_triangle_distance(start, tri) <= MIN_HIT_DISTANCE || point_triangle_distance(end, tri) <= MIN_HIT_DISTANCE
}

pub fn segment_triangle_distance(start: &Point3<f64>, end: &Point3<f64>, tri: &[Point3<f64>; 3]) -> f64 {
    if segment_intersects_triangle(start, end, tri) {
        return 0.0;
    }
    let mut best = point_triangle_distance(start, tri).min(point_triangle_distance(end, tri));
    for k in 0..3 {
        let a = tri[k];
        let b = tri[(k + 1) % 3];
        best = best.min(segment_segment_distance(start, end, &a, &b));
    }
    best
}

pub fn triangle_area(tri: &[Point3<f64>; 3]) -> f64 {
    0.5 * (tri[1] - tri[0]).cross(&(tri[2] - tri[0])).norm()
}
