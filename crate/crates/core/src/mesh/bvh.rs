use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::{Point3, Vector3};

use super::primitives::{
    point_triangle_distance, ray_triangle, segment_intersects_triangle, segment_triangle_distance, Aabb, Ray, Segment,
    TriangleHit, MIN_HIT_DISTANCE,
};
use super::{MeshError, MeshModel};

const LEAF_SIZE: usize = 4;

/// Hits along one ray closer than this are the same crossing (an edge or vertex
/// shared by several triangles).
pub const HIT_MERGE_DISTANCE: f64 = 1e-6;

/// Generic directions for parity rays, far from axes and diagonals.
const PARITY_DIRECTIONS: [[f64; 3]; 7] = [
    [0.538_1, 0.316_9, 0.780_6],
    [-0.267_2, 0.891_5, 0.365_2],
    [0.612_4, -0.447_2, -0.651_6],
    [-0.701_3, -0.213_9, 0.680_1],
    [0.137_9, -0.953_1, 0.269_8],
    [0.842_2, 0.511_7, -0.169_4],
    [-0.391_8, 0.143_6, -0.908_7],
];

/// One ray crossing: distance along the ray (mm) and the triangle id.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub distance: f64,
    pub triangle: usize,
}

#[derive(Debug, Clone)]
struct Node {
    bounds: Aabb,
    /// Leaf: first slot in `order`. Inner: index of the right child (left is `self + 1`).
    offset: u32,
    /// Zero for inner nodes.
    count: u32,
}

/// Bounding-volume hierarchy over the triangles of one mesh.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    mesh: MeshModel,
    tris: Vec<[Point3<f64>; 3]>,
    nodes: Vec<Node>,
    order: Vec<u32>,
    closed: bool,
}

impl SpatialIndex {
    pub fn new(mesh: MeshModel) -> Self {
        let tris: Vec<_> = (0..mesh.triangle_count()).map(|i| mesh.triangle(i)).collect();
        let bounds: Vec<Aabb> = tris.iter().map(|t| Aabb::from_points(t.iter())).collect();
        let centroids: Vec<Point3<f64>> = bounds.iter().map(Aabb::center).collect();
        let mut order: Vec<u32> = (0..tris.len() as u32).collect();
        let mut nodes = Vec::with_capacity(2 * tris.len() / LEAF_SIZE + 1);
        build(&mut nodes, &mut order, 0, &bounds, &centroids);
        let closed = mesh.is_closed();
        Self {
            mesh,
            tris,
            nodes,
            order,
            closed,
        }
    }

    pub fn mesh(&self) -> &MeshModel {
        &self.mesh
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn bounds(&self) -> Aabb {
        self.nodes[0].bounds
    }

    pub fn triangle(&self, id: usize) -> &[Point3<f64>; 3] {
        &self.tris[id]
    }

    /// Depth-first walk; `enter` prunes subtrees, `leaf` sees triangle ids and may stop
    /// the walk by returning `false`.
    fn walk(&self, mut enter: impl FnMut(&Aabb) -> bool, mut leaf: impl FnMut(usize) -> bool) {
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            if !enter(&node.bounds) {
                continue;
            }
            if node.count > 0 {
                let start = node.offset as usize;
                for &t in &self.order[start..start + node.count as usize] {
                    if !leaf(t as usize) {
                        return;
                    }
                }
            } else {
                stack.push(node.offset as usize);
                stack.push(n + 1);
            }
        }
    }

    fn raw_hits(&self, origin: &Point3<f64>, dir: &Vector3<f64>) -> Vec<(usize, TriangleHit)> {
        let inv = dir.map(|c| 1.0 / c);
        let mut hits = Vec::new();
        self.walk(
            |b| b.hit_by(origin, &inv, 0.0, f64::INFINITY),
            |t| {
                if let Some(h) = ray_triangle(origin, dir, &self.tris[t]) {
                    hits.push((t, h));
                }
                true
            },
        );
        hits
    }

    /// All crossings beyond [`MIN_HIT_DISTANCE`], ascending. Hits within
    /// [`HIT_MERGE_DISTANCE`] of the previous kept hit are merged, so a crossing
    /// through a shared edge or vertex is reported once (lowest triangle id).
    pub fn ray_intersect(&self, ray: &Ray) -> Vec<Hit> {
        let hits = self
            .raw_hits(&ray.origin, &ray.direction())
            .into_iter()
            .map(|(triangle, h)| Hit {
                distance: h.distance,
                triangle,
            })
            .collect();
        merge_hits(hits)
    }

    /// True iff some triangle lies within `seg.radius` of the segment.
    pub fn segment_blocked(&self, seg: &Segment) -> bool {
        let probe = seg.bounds().expanded(seg.radius);
        let mut blocked = false;
        self.walk(
            |b| b.overlaps(&probe),
            |t| {
                let tri = &self.tris[t];
                blocked = if seg.radius == 0.0 {
                    segment_intersects_triangle(&seg.start, &seg.end, tri)
                } else {
                    segment_triangle_distance(&seg.start, &seg.end, tri) <= seg.radius
                };
                !blocked
            },
        );
        blocked
    }

    /// Minimum distance from the segment to the mesh surface.
    pub fn segment_distance(&self, start: &Point3<f64>, end: &Point3<f64>) -> f64 {
        let seg_box = Aabb::from_points([start, end]);
        self.best_first(
            |b| b.distance_to_box(&seg_box),
            |tri| segment_triangle_distance(start, end, tri),
        )
        .map(|(_, d)| d)
        .unwrap_or(f64::INFINITY)
    }

    /// Nearest triangle to `p` and its distance; ties go to the lower id.
    pub fn closest_triangle(&self, p: &Point3<f64>) -> Option<(usize, f64)> {
        self.best_first(|b| b.distance_to_point(p), |tri| point_triangle_distance(p, tri))
    }

    fn best_first(
        &self,
        lower_bound: impl Fn(&Aabb) -> f64,
        exact: impl Fn(&[Point3<f64>; 3]) -> f64,
    ) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        let mut heap = BinaryHeap::new();
        heap.push(Pending(lower_bound(&self.nodes[0].bounds), 0));
        while let Some(Pending(bound, n)) = heap.pop() {
            if matches!(best, Some((_, d)) if bound > d) {
                break;
            }
            let node = &self.nodes[n];
            if node.count > 0 {
                let start = node.offset as usize;
                for &t in &self.order[start..start + node.count as usize] {
                    let t = t as usize;
                    let d = exact(&self.tris[t]);
                    let better = match best {
                        None => true,
                        Some((bt, bd)) => d < bd || (d == bd && t < bt),
                    };
                    if better {
                        best = Some((t, d));
                    }
                }
            } else {
                for child in [n + 1, node.offset as usize] {
                    heap.push(Pending(lower_bound(&self.nodes[child].bounds), child));
                }
            }
        }
        best
    }

    /// Ray-parity inside test. Requires a closed mesh.
    pub fn point_in_mesh(&self, p: &Point3<f64>) -> Result<bool, MeshError> {
        if !self.closed {
            return Err(MeshError::NotClosed(self.mesh.name().to_string()));
        }
        Ok(self.parity_inside(p))
    }

    /// Ray parity without the closedness check. Rays that graze an edge or vertex are
    /// discarded and the next direction is tried.
    pub fn parity_inside(&self, p: &Point3<f64>) -> bool {
        if self.nodes[0].bounds.distance_to_point(p) > 0.0 {
            return false;
        }
        let mut fallback = None;
        for d in PARITY_DIRECTIONS {
            let dir = Vector3::new(d[0], d[1], d[2]).normalize();
            let hits = self.raw_hits(p, &dir);
            let grazing = hits
                .iter()
                .any(|(_, h)| h.edge_proximity() < 1e-9 || h.distance < 10.0 * MIN_HIT_DISTANCE);
            if !grazing {
                return hits.len() % 2 == 1;
            }
            if fallback.is_none() {
                let merged = merge_hits(
                    hits.into_iter()
                        .map(|(triangle, h)| Hit {
                            distance: h.distance,
                            triangle,
                        })
                        .collect(),
                );
                fallback = Some(merged.len() % 2 == 1);
            }
        }
        fallback.unwrap_or(false)
    }
}

fn merge_hits(mut hits: Vec<Hit>) -> Vec<Hit> {
    hits.sort_by(|a, b| {
        a.distance
            .partial_cmp(&b.distance)
            .unwrap_or(Ordering::Equal)
            .then(a.triangle.cmp(&b.triangle))
    });
    let mut merged: Vec<Hit> = Vec::with_capacity(hits.len());
    for h in hits {
        match merged.last() {
            Some(last) if h.distance - last.distance <= HIT_MERGE_DISTANCE => {}
            _ => merged.push(h),
        }
    }
    merged
}

struct Pending(f64, usize);

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Pending {}
impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Pending {
    // Min-heap on the bound.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .partial_cmp(&self.0)
            .unwrap_or(Ordering::Equal)
            .then(other.1.cmp(&self.1))
    }
}

fn build(nodes: &mut Vec<Node>, order: &mut [u32], offset: usize, bounds: &[Aabb], centroids: &[Point3<f64>]) -> usize {
    let node_bounds = order
        .iter()
        .fold(Aabb::empty(), |acc, &t| acc.union(&bounds[t as usize]));
    let index = nodes.len();
    if order.len() <= LEAF_SIZE {
        nodes.push(Node {
            bounds: node_bounds,
            offset: offset as u32,
            count: order.len() as u32,
        });
        return index;
    }
    let centroid_box = Aabb::from_points(order.iter().map(|&t| &centroids[t as usize]));
    let axis = centroid_box.extent().imax();
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        centroids[a as usize][axis]
            .partial_cmp(&centroids[b as usize][axis])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    nodes.push(Node {
        bounds: node_bounds,
        offset: 0,
        count: 0,
    });
    let (left, right) = order.split_at_mut(mid);
    build(nodes, left, offset, bounds, centroids);
    let right_index = build(nodes, right, offset + mid, bounds, centroids);
    nodes[index].offset = right_index as u32;
    index
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{box_mesh, icosphere};

    fn cube() -> SpatialIndex {
        SpatialIndex::new(box_mesh("c", Point3::origin(), Point3::new(100.0, 100.0, 100.0)))
    }

    fn collect_leaves(index: &SpatialIndex, n: usize, out: &mut Vec<u32>) -> Aabb {
        let node = &index.nodes[n];
        if node.count > 0 {
            let s = node.offset as usize;
            let ids = &index.order[s..s + node.count as usize];
            out.extend_from_slice(ids);
            let tight = ids.iter().fold(Aabb::empty(), |a, &t| {
                a.union(&Aabb::from_points(index.tris[t as usize].iter()))
            });
            assert!(node.bounds.contains_box(&tight));
            return tight;
        }
        let l = collect_leaves(index, n + 1, out);
        let r = collect_leaves(index, node.offset as usize, out);
        let both = l.union(&r);
        assert!(node.bounds.contains_box(&both));
        both
    }

    #[test]
    fn every_triangle_in_exactly_one_leaf() {
        let index = SpatialIndex::new(icosphere("s", Point3::origin(), 10.0, 3));
        let mut ids = Vec::new();
        collect_leaves(&index, 0, &mut ids);
        ids.sort_unstable();
        let expected: Vec<u32> = (0..index.mesh().triangle_count() as u32).collect();
        assert_eq!(ids, expected);
    }

    #[test]
    fn ray_through_single_triangle() {
        let mesh = MeshModel::new(
            "t",
            vec![
                Point3::new(-10.0, -10.0, 0.0),
                Point3::new(10.0, -10.0, 0.0),
                Point3::new(0.0, 10.0, 0.0),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let index = SpatialIndex::new(mesh);
        let up = Ray::new(Point3::new(0.0, 0.0, -10.0), Vector3::z()).unwrap();
        let hits = index.ray_intersect(&up);
        assert_eq!(hits.len(), 1);
        assert!((hits[0].distance - 10.0).abs() < 1e-12);
        assert_eq!(hits[0].triangle, 0);
        let away = Ray::new(Point3::new(0.0, 0.0, -10.0), -Vector3::z()).unwrap();
        assert!(index.ray_intersect(&away).is_empty());
    }

    #[test]
    fn diagonal_edge_hit_counts_once() {
        // Each cube face is split along a diagonal; aim straight at it.
        let index = cube();
        let ray = Ray::new(Point3::new(50.0, 50.0, -20.0), Vector3::z()).unwrap();
        let hits = index.ray_intersect(&ray);
        assert_eq!(hits.len(), 2, "{hits:?}");
        assert!((hits[0].distance - 20.0).abs() < 1e-9);
        assert!((hits[1].distance - 120.0).abs() < 1e-9);
    }

    #[test]
    fn segment_queries_on_cube() {
        let index = cube();
        let through = Segment::new(Point3::new(-50.0, 50.0, 50.0), Point3::new(150.0, 50.0, 50.0));
        assert!(index.segment_blocked(&through));
        let outside = Segment::new(Point3::new(-50.0, -50.0, -50.0), Point3::new(-10.0, -50.0, -50.0));
        assert!(!index.segment_blocked(&outside));
        // Passes 4 mm above the top face.
        let near = Segment::new(Point3::new(20.0, 50.0, 104.0), Point3::new(80.0, 50.0, 104.0));
        assert!(!index.segment_blocked(&near));
        assert!(index.segment_blocked(&near.with_radius(5.0)));
        assert!(!index.segment_blocked(&near.with_radius(3.9)));
        assert!((index.segment_distance(&near.start, &near.end) - 4.0).abs() < 1e-9);
    }

    #[test]
    fn inside_tests_on_cube() {
        let index = cube();
        assert!(index.point_in_mesh(&Point3::new(50.0, 50.0, 50.0)).unwrap());
        assert!(!index.point_in_mesh(&Point3::new(150.0, 50.0, 50.0)).unwrap());
        assert!(!index.point_in_mesh(&Point3::new(-1.0, -1.0, -1.0)).unwrap());
        // On the plane of a face diagonal but inside.
        assert!(index.point_in_mesh(&Point3::new(30.0, 30.0, 30.0)).unwrap());
    }

    #[test]
    fn open_mesh_rejected_for_inside_test() {
        let m = box_mesh("c", Point3::origin(), Point3::new(1.0, 1.0, 1.0));
        let mut tris = m.triangles().to_vec();
        tris.pop();
        let index = SpatialIndex::new(m.with_triangles(tris).unwrap());
        assert!(matches!(
            index.point_in_mesh(&Point3::new(0.5, 0.5, 0.5)),
            Err(MeshError::NotClosed(_))
        ));
    }

    #[test]
    fn closest_triangle_distance() {
        let index = cube();
        let (_, d) = index.closest_triangle(&Point3::new(50.0, 50.0, 130.0)).unwrap();
        assert!((d - 30.0).abs() < 1e-9);
        let (_, inside) = index.closest_triangle(&Point3::new(50.0, 50.0, 90.0)).unwrap();
        assert!((inside - 10.0).abs() < 1e-9);
    }
}
