//! Triangle meshes and the intersection queries the placement rules are built on.
//!
//! All coordinates are millimetres. A [`MeshModel`] is immutable once built; a
//! [`SpatialIndex`] wraps one in a bounding-volume hierarchy for ray casts, capsule
//! obstruction tests and inside/outside classification.

mod bvh;
mod obj;
mod primitives;

use std::collections::HashMap;
use std::path::PathBuf;

use nalgebra::{Isometry3, Point3};
use thiserror::Error;

pub use bvh::{Hit, SpatialIndex, HIT_MERGE_DISTANCE};
pub use obj::{load_obj, parse_obj, write_obj};
pub use primitives::{
    closest_point_on_triangle, point_triangle_distance, ray_triangle, segment_intersects_triangle,
    segment_segment_distance, segment_triangle_distance, triangle_area, Aabb, Ray, Segment, TriangleHit,
    MIN_HIT_DISTANCE,
};

/// Triangles with an area at or below this (mm²) are dropped on construction.
pub const DEGENERATE_AREA: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("cannot read `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("mesh `{0}` has no non-degenerate triangles")]
    Empty(String),
    #[error("triangle {triangle} references vertex {index}, mesh has {count} vertices")]
    IndexOutOfRange { triangle: usize, index: u32, count: usize },
    #[error("mesh `{0}` is not closed")]
    NotClosed(String),
    #[error("direction vector has zero length")]
    ZeroDirection,
}

impl MeshError {
    pub fn is_missing_file(&self) -> bool {
        matches!(self, MeshError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeshModel {
    name: String,
    vertices: Vec<Point3<f64>>,
    triangles: Vec<[u32; 3]>,
}

impl MeshModel {
    /// Builds a mesh, checking indices and dropping degenerate triangles.
    pub fn new(
        name: impl Into<String>,
        vertices: Vec<Point3<f64>>,
        triangles: Vec<[u32; 3]>,
    ) -> Result<Self, MeshError> {
        let name = name.into();
        let count = vertices.len();
        for (t, tri) in triangles.iter().enumerate() {
            if let Some(&index) = tri.iter().find(|&&i| i as usize >= count) {
                return Err(MeshError::IndexOutOfRange {
                    triangle: t,
                    index,
                    count,
                });
            }
        }
        let triangles: Vec<[u32; 3]> = triangles
            .into_iter()
            .filter(|tri| {
                let pts = tri.map(|i| vertices[i as usize]);
                triangle_area(&pts) > DEGENERATE_AREA
            })
            .collect();
        if triangles.is_empty() {
            return Err(MeshError::Empty(name));
        }
        Ok(Self {
            name,
            vertices,
            triangles,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn vertices(&self) -> &[Point3<f64>] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn triangle(&self, index: usize) -> [Point3<f64>; 3] {
        self.triangles[index].map(|i| self.vertices[i as usize])
    }

    pub fn centroid(&self, index: usize) -> Point3<f64> {
        let [a, b, c] = self.triangle(index);
        Point3::from((a.coords + b.coords + c.coords) / 3.0)
    }

    pub fn bounds(&self) -> Aabb {
        // Only referenced vertices count; OBJ files may carry stray ones.
        let mut bounds = Aabb::empty();
        for tri in &self.triangles {
            for &i in tri {
                bounds.grow(&self.vertices[i as usize]);
            }
        }
        bounds
    }

    /// Signed enclosed volume (mm³); positive for outward-facing winding.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|tri| {
                let [a, b, c] = tri.map(|i| self.vertices[i as usize].coords);
                a.dot(&b.cross(&c))
            })
            .sum::<f64>()
            / 6.0
    }

    /// True iff every directed edge is matched by exactly one opposite edge, i.e. the
    /// surface is closed, manifold along its edges and consistently oriented.
    pub fn is_closed(&self) -> bool {
        let mut directed: HashMap<(u32, u32), u32> = HashMap::with_capacity(self.triangles.len() * 3);
        for tri in &self.triangles {
            for k in 0..3 {
                *directed.entry((tri[k], tri[(k + 1) % 3])).or_insert(0) += 1;
            }
        }
        directed
            .iter()
            .all(|(&(a, b), &n)| n == 1 && directed.get(&(b, a)) == Some(&1))
    }

    pub fn transformed(&self, iso: &Isometry3<f64>) -> MeshModel {
        MeshModel {
            name: self.name.clone(),
            vertices: self.vertices.iter().map(|p| iso * p).collect(),
            triangles: self.triangles.clone(),
        }
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Copy with the triangle list replaced; used by tests that punch holes.
    pub fn with_triangles(&self, triangles: Vec<[u32; 3]>) -> Result<MeshModel, MeshError> {
        MeshModel::new(self.name.clone(), self.vertices.clone(), triangles)
    }
}

/// Axis-aligned box mesh with outward winding, 8 vertices and 12 triangles.
pub fn box_mesh(name: &str, min: Point3<f64>, max: Point3<f64>) -> MeshModel {
    let v = |x: bool, y: bool, z: bool| {
        Point3::new(
            if x { max.x } else { min.x },
            if y { max.y } else { min.y },
            if z { max.z } else { min.z },
        )
    };
    let vertices = vec![
        v(false, false, false),
        v(true, false, false),
        v(true, true, false),
        v(false, true, false),
        v(false, false, true),
        v(true, false, true),
        v(true, true, true),
        v(false, true, true),
    ];
    let quads: [[u32; 4]; 6] = [
        [0, 3, 2, 1],
        [4, 5, 6, 7],
        [0, 1, 5, 4],
        [2, 3, 7, 6],
        [1, 2, 6, 5],
        [0, 4, 7, 3],
    ];
    let triangles = quads
        .iter()
        .flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
        .collect();
    MeshModel::new(name, vertices, triangles).expect("box with positive extent")
}

/// Subdivided-icosahedron sphere with outward winding.
pub fn icosphere(name: &str, center: Point3<f64>, radius: f64, subdivisions: u32) -> MeshModel {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut unit: Vec<nalgebra::Vector3<f64>> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| nalgebra::Vector3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoints: HashMap<(u32, u32), u32> = HashMap::new();
        let mut midpoint = |a: u32, b: u32, unit: &mut Vec<nalgebra::Vector3<f64>>| {
            let key = (a.min(b), a.max(b));
            *midpoints.entry(key).or_insert_with(|| {
                unit.push(((unit[a as usize] + unit[b as usize]) * 0.5).normalize());
                (unit.len() - 1) as u32
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut unit);
            let bc = midpoint(b, c, &mut unit);
            let ca = midpoint(c, a, &mut unit);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    let vertices = unit.iter().map(|u| center + u * radius).collect();
    MeshModel::new(name, vertices, faces).expect("sphere with positive radius")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{Translation3, UnitQuaternion, Vector3};

    #[test]
    fn rejects_out_of_range_index() {
        let err = MeshModel::new("t", vec![Point3::origin(); 3], vec![[0, 1, 3]]).unwrap_err();
        assert!(matches!(err, MeshError::IndexOutOfRange { index: 3, .. }));
    }

    #[test]
    fn drops_degenerate_triangles() {
        let vertices = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(2.0, 0.0, 0.0),
        ];
        let mesh = MeshModel::new("t", vertices.clone(), vec![[0, 1, 2], [0, 1, 3]]).unwrap();
        assert_eq!(mesh.triangle_count(), 1);
        assert!(matches!(
            MeshModel::new("t", vertices, vec![[0, 1, 3]]),
            Err(MeshError::Empty(_))
        ));
    }

    #[test]
    fn cube_is_closed_and_single_triangle_is_not() {
        let cube = box_mesh("c", Point3::origin(), Point3::new(100.0, 100.0, 100.0));
        assert!(cube.is_closed());
        assert_relative_eq!(cube.signed_volume(), 1.0e6, epsilon = 1e-6);

        let tri = MeshModel::new(
            "t",
            vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0), Point3::new(0.0, 1.0, 0.0)],
            vec![[0, 1, 2]],
        )
        .unwrap();
        assert!(!tri.is_closed());

        let mut holed = cube.triangles().to_vec();
        holed.remove(5);
        assert!(!cube.with_triangles(holed).unwrap().is_closed());
    }

    #[test]
    fn flipped_triangle_breaks_closedness() {
        let cube = box_mesh("c", Point3::origin(), Point3::new(1.0, 1.0, 1.0));
        let mut tris = cube.triangles().to_vec();
        tris[0].swap(1, 2);
        assert!(!cube.with_triangles(tris).unwrap().is_closed());
    }

    #[test]
    fn icosphere_is_closed_with_near_analytic_volume() {
        let s = icosphere("s", Point3::new(1.0, 2.0, 3.0), 100.0, 3);
        assert!(s.is_closed());
        let analytic = 4.0 / 3.0 * std::f64::consts::PI * 1.0e6;
        assert!((s.signed_volume() - analytic).abs() / analytic < 0.02);
    }

    #[test]
    fn closedness_survives_reordering_and_rigid_motion() {
        let s = icosphere("s", Point3::origin(), 50.0, 2);
        let mut tris = s.triangles().to_vec();
        tris.reverse();
        tris.rotate_left(17);
        assert!(s.with_triangles(tris).unwrap().is_closed());
        let iso = Isometry3::from_parts(
            Translation3::new(10.0, -20.0, 5.0),
            UnitQuaternion::from_axis_angle(&Vector3::y_axis(), 0.7),
        );
        assert!(s.transformed(&iso).is_closed());
    }
}
