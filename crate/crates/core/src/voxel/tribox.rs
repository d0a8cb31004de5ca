use nalgebra::{Point3, Vector3};

/// Separating-axis triangle/box overlap (Akenine-Möller). The box is given by its
/// center and half extent; touching counts as overlapping.
pub fn triangle_box_overlap(center: &Point3<f64>, half: f64, tri: &[Point3<f64>; 3]) -> bool {
    let v = [tri[0] - center, tri[1] - center, tri[2] - center];
    let edges = [v[1] - v[0], v[2] - v[1], v[0] - v[2]];

    let separated = |axis: &Vector3<f64>| {
        let p0 = axis.dot(&v[0]);
        let p1 = axis.dot(&v[1]);
        let p2 = axis.dot(&v[2]);
        let lo = p0.min(p1).min(p2);
        let hi = p0.max(p1).max(p2);
        let r = half * (axis.x.abs() + axis.y.abs() + axis.z.abs());
        lo > r || hi < -r
    };

    // Box face normals.
    for axis in [Vector3::x(), Vector3::y(), Vector3::z()] {
        let (a, b, c) = (v[0].dot(&axis), v[1].dot(&axis), v[2].dot(&axis));
        let lo = a.min(b).min(c);
        let hi = a.max(b).max(c);
        if lo > half || hi < -half {
            return false;
        }
    }
    // Triangle normal.
    let normal = edges[0].cross(&edges[1]);
    if separated(&normal) {
        return false;
    }
    // Edge/axis cross products.
    for e in &edges {
        for axis in [Vector3::x(), Vector3::y(), Vector3::z()] {
            let a = axis.cross(e);
            if separated(&a) {
                return false;
            }
        }
    }
    true
}
