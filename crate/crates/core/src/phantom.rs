//! Synthetic thorax used for fixtures, tests and demos.
//!
//! Axes: +x toward the patient's right, +y anterior, +z cranial; millimetres. The skin
//! is a capped elliptic cylinder, the ribs are elliptic bands inside it, and the
//! target sits in the right upper chest near the hilum.

use nalgebra::{Isometry3, Point3, Translation3, UnitQuaternion, Vector3};

use crate::constraints::{AnatomicalScene, ConstraintError, Role};
use crate::geometry::{CameraPose, GeometryError, Hand, TrocarTrajectory};
use crate::mesh::{box_mesh, MeshModel};

pub const SKIN_SEMI_AXES: (f64, f64) = (170.0, 120.0);
pub const SKIN_Z: (f64, f64) = (-150.0, 250.0);
const SKIN_SEGMENTS: usize = 36;
const SKIN_ROWS: usize = 20;
pub const RIB_CENTERS_Z: [f64; 9] = [-120.0, -80.0, -40.0, 0.0, 40.0, 80.0, 120.0, 160.0, 200.0];
const RIB_HEIGHT: f64 = 10.0;

/// Capped elliptic cylinder about the z axis, wound outward.
pub fn elliptic_cylinder(
    name: &str,
    semi_axes: (f64, f64),
    z_range: (f64, f64),
    segments: usize,
    rows: usize,
) -> MeshModel {
    let (a, b) = semi_axes;
    let (z0, z1) = z_range;
    let mut vertices = Vec::with_capacity(segments * (rows + 1) + 2);
    for k in 0..=rows {
        let z = z0 + (z1 - z0) * k as f64 / rows as f64;
        for i in 0..segments {
            let t = std::f64::consts::TAU * i as f64 / segments as f64;
            vertices.push(Point3::new(a * t.cos(), b * t.sin(), z));
        }
    }
    let bottom = vertices.len() as u32;
    vertices.push(Point3::new(0.0, 0.0, z0));
    vertices.push(Point3::new(0.0, 0.0, z1));
    let top = bottom + 1;
    let v = |i: usize, k: usize| (k * segments + i % segments) as u32;
    let mut triangles = Vec::with_capacity(2 * segments * (rows + 1));
    for k in 0..rows {
        for i in 0..segments {
            triangles.push([v(i, k), v(i + 1, k), v(i + 1, k + 1)]);
            triangles.push([v(i, k), v(i + 1, k + 1), v(i, k + 1)]);
        }
    }
    for i in 0..segments {
        triangles.push([bottom, v(i + 1, 0), v(i, 0)]);
        triangles.push([top, v(i, rows), v(i + 1, rows)]);
    }
    MeshModel::new(name, vertices, triangles).expect("valid cylinder")
}

/// Closed elliptic band between two concentric ellipses, like a hoop.
pub fn elliptic_band(
    name: &str,
    outer: (f64, f64),
    inner: (f64, f64),
    z_range: (f64, f64),
    segments: usize,
) -> MeshModel {
    let ring = |(a, b): (f64, f64), z: f64| {
        (0..segments).map(move |i| {
            let t = std::f64::consts::TAU * i as f64 / segments as f64;
            Point3::new(a * t.cos(), b * t.sin(), z)
        })
    };
    let (z0, z1) = z_range;
    let vertices: Vec<Point3<f64>> = ring(outer, z0)
        .chain(ring(outer, z1))
        .chain(ring(inner, z0))
        .chain(ring(inner, z1))
        .collect();
    let n = segments;
    let at = |ring: usize, i: usize| (ring * n + i % n) as u32;
    let (ob, ot, ib, it) = (0, 1, 2, 3);
    let mut triangles = Vec::with_capacity(8 * n);
    for i in 0..n {
        let j = i + 1;
        triangles.push([at(ob, i), at(ob, j), at(ot, j)]);
        triangles.push([at(ob, i), at(ot, j), at(ot, i)]);
        triangles.push([at(ib, i), at(it, j), at(ib, j)]);
        triangles.push([at(ib, i), at(it, i), at(it, j)]);
        triangles.push([at(ot, i), at(ot, j), at(it, i)]);
        triangles.push([at(ot, j), at(it, j), at(it, i)]);
        triangles.push([at(ob, i), at(ib, i), at(ob, j)]);
        triangles.push([at(ob, j), at(ib, i), at(ib, j)]);
    }
    MeshModel::new(name, vertices, triangles).expect("valid band")
}

/// Capped circular tube from `start` to `end`.
pub fn tube(name: &str, start: Point3<f64>, end: Point3<f64>, radius: f64, segments: usize) -> MeshModel {
    let d = end - start;
    let length = d.norm();
    let rotation = UnitQuaternion::rotation_between(&Vector3::z(), &d)
        .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI));
    let iso = Isometry3::from_parts(Translation3::from(start.coords), rotation);
    elliptic_cylinder(name, (radius, radius), (0.0, length), segments, 1).transformed(&iso)
}

/// Parametric angle (degrees, −180..180) and height of a point on the skin cylinder.
pub fn skin_coordinates(p: &Point3<f64>) -> (f64, f64) {
    let (a, b) = SKIN_SEMI_AXES;
    ((p.y / b).atan2(p.x / a).to_degrees(), p.z)
}

/// Mesh inventory, target and entry regions of the phantom.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub meshes: Vec<(Role, MeshModel)>,
    pub convergent_point: Point3<f64>,
    pub tool_region: Vec<usize>,
    pub camera_region: Vec<usize>,
}

impl Phantom {
    pub fn scene(&self) -> Result<AnatomicalScene, ConstraintError> {
        AnatomicalScene::new(
            self.meshes.clone(),
            self.convergent_point,
            self.tool_region.iter().copied(),
            self.camera_region.iter().copied(),
        )
    }

    pub fn skin(&self) -> &MeshModel {
        &self
            .meshes
            .iter()
            .find(|(r, _)| *r == Role::Skin)
            .expect("phantom has skin")
            .1
    }
}

/// Skin triangles whose centroid falls inside an angular sector and height band.
fn lateral_region(skin: &MeshModel, angles: (f64, f64), heights: (f64, f64)) -> Vec<usize> {
    (0..skin.triangle_count())
        .filter(|&t| {
            let c = skin.centroid(t);
            let (theta, z) = skin_coordinates(&c);
            let lateral = (c.x / SKIN_SEMI_AXES.0).hypot(c.y / SKIN_SEMI_AXES.1) > 0.99;
            lateral && (angles.0..=angles.1).contains(&theta) && (heights.0..=heights.1).contains(&z)
        })
        .collect()
}

pub fn synthetic_thorax() -> Phantom {
    let (a, b) = SKIN_SEMI_AXES;
    let skin = elliptic_cylinder("skin", SKIN_SEMI_AXES, SKIN_Z, SKIN_SEGMENTS, SKIN_ROWS);
    let tool_region = lateral_region(&skin, (0.0, 110.0), (-20.0, 100.0));
    let camera_region = lateral_region(&skin, (-80.0, -20.0), (-110.0, -10.0));

    let mut meshes = vec![(Role::Skin, skin)];
    for (k, z) in RIB_CENTERS_Z.iter().enumerate() {
        let band = elliptic_band(
            &format!("rib_{}", k + 1),
            (a - 10.0, b - 10.0),
            (a - 18.0, b - 18.0),
            (z - RIB_HEIGHT / 2.0, z + RIB_HEIGHT / 2.0),
            48,
        );
        meshes.push((Role::Rib, band));
    }
    meshes.push((
        Role::Vertebra,
        box_mesh(
            "vertebrae",
            Point3::new(-20.0, -110.0, -150.0),
            Point3::new(20.0, -70.0, 240.0),
        ),
    ));
    meshes.push((
        Role::Scapula,
        box_mesh(
            "scapula",
            Point3::new(30.0, -98.0, 150.0),
            Point3::new(90.0, -88.0, 235.0),
        ),
    ));
    meshes.push((
        Role::Trachea,
        tube(
            "trachea",
            Point3::new(0.0, -30.0, 110.0),
            Point3::new(0.0, -30.0, 240.0),
            10.0,
            16,
        ),
    ));
    meshes.push((
        Role::Vasculature,
        tube(
            "pulmonary_artery",
            Point3::new(0.0, 0.0, 130.0),
            Point3::new(45.0, -5.0, 135.0),
            8.0,
            16,
        ),
    ));
    meshes.push((
        Role::Vasculature,
        tube(
            "pulmonary_vein",
            Point3::new(5.0, 15.0, 100.0),
            Point3::new(50.0, 10.0, 120.0),
            6.0,
            16,
        ),
    ));
    Phantom {
        meshes,
        convergent_point: Point3::new(60.0, -10.0, 140.0),
        tool_region,
        camera_region,
    }
}

/// Point on the skin cylinder at parametric angle `theta_deg` and height `z`.
pub fn skin_point(theta_deg: f64, z: f64) -> Point3<f64> {
    let (a, b) = SKIN_SEMI_AXES;
    let t = theta_deg.to_radians();
    Point3::new(a * t.cos(), b * t.sin(), z)
}

/// Reference plan on the phantom: both instruments in the anterolateral window, the
/// scope posterolateral and below, aimed at the target.
#[derive(Debug, Clone, Copy)]
pub struct NominalPlan {
    pub left: TrocarTrajectory,
    pub right: TrocarTrajectory,
    pub camera: CameraPose,
}

/// (angle°, height mm) on the skin; the entry is the centroid of the nearest region
/// triangle.
pub const NOMINAL_LEFT_ENTRY: (f64, f64) = (77.0, 57.0);
pub const NOMINAL_RIGHT_ENTRY: (f64, f64) = (27.0, 97.0);
pub const NOMINAL_CAMERA_ENTRY: (f64, f64) = (-37.0, -97.0);
pub const NOMINAL_CAMERA_ROLL_DEG: f64 = 180.0;
pub const NOMINAL_CAMERA_DEPTH_MM: f64 = 80.0;

/// Centroid of the region triangle nearest to `skin_point(theta_deg, z)`.
pub fn region_centroid_near(skin: &MeshModel, region: &[usize], theta_deg: f64, z: f64) -> Option<Point3<f64>> {
    let p = skin_point(theta_deg, z);
    region
        .iter()
        .map(|&t| skin.centroid(t))
        .min_by(|x, y| (x - p).norm().total_cmp(&(y - p).norm()))
}

pub fn nominal_plan(phantom: &Phantom) -> Result<NominalPlan, GeometryError> {
    let c = phantom.convergent_point;
    let skin = phantom.skin();
    let tool =
        |(theta, z): (f64, f64)| region_centroid_near(skin, &phantom.tool_region, theta, z).expect("tool region");
    let (ct, cz) = NOMINAL_CAMERA_ENTRY;
    let cam_entry = region_centroid_near(skin, &phantom.camera_region, ct, cz).expect("camera region");
    let camera = CameraPose::aimed_at(
        cam_entry,
        c,
        NOMINAL_CAMERA_DEPTH_MM,
        crate::geometry::DEFAULT_TILT_DEG,
        NOMINAL_CAMERA_ROLL_DEG,
        crate::geometry::DEFAULT_TUBE_LENGTH_MM,
    )?;
    Ok(NominalPlan {
        left: TrocarTrajectory::new(tool(NOMINAL_LEFT_ENTRY), c, Hand::Left)?,
        right: TrocarTrajectory::new(tool(NOMINAL_RIGHT_ENTRY), c, Hand::Right)?,
        camera,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::SpatialIndex;

    #[test]
    fn builders_make_closed_outward_meshes() {
        let c = elliptic_cylinder("c", (30.0, 20.0), (0.0, 50.0), 12, 3);
        assert!(c.is_closed());
        assert!(c.signed_volume() > 0.0);
        let band = elliptic_band("b", (30.0, 20.0), (25.0, 15.0), (0.0, 10.0), 24);
        assert!(band.is_closed());
        assert!(band.signed_volume() > 0.0);
        let t = tube("t", Point3::new(1.0, 2.0, 3.0), Point3::new(-40.0, 10.0, 3.0), 5.0, 16);
        assert!(t.is_closed());
        assert!(t.signed_volume() > 0.0);
        let down = tube("d", Point3::origin(), Point3::new(0.0, 0.0, -10.0), 5.0, 8);
        assert!(down.signed_volume() > 0.0);
    }

    #[test]
    fn nominal_plan_is_valid() {
        use crate::constraints::{evaluate_plan, PlanParams};
        let p = synthetic_thorax();
        let plan = nominal_plan(&p).unwrap();
        let report = evaluate_plan(
            &plan.left,
            &plan.right,
            &plan.camera,
            &p.scene().unwrap(),
            &PlanParams::default(),
        )
        .unwrap();
        assert!(report.overall_valid, "{:?}", report.failed_rules().collect::<Vec<_>>());
        assert!(report.in_band);
        assert!(
            (0.65..=1.37).contains(&report.operable_volume_l),
            "{}",
            report.operable_volume_l
        );
    }

    #[test]
    fn phantom_is_consistent() {
        let p = synthetic_thorax();
        for (_, m) in &p.meshes {
            assert!(m.is_closed(), "{}", m.name());
        }
        assert!(!p.tool_region.is_empty() && !p.camera_region.is_empty());
        let scene = p.scene().unwrap();
        for m in scene.bony() {
            assert!(!m.index().point_in_mesh(&p.convergent_point).unwrap(), "{}", m.name());
        }
        let skin = SpatialIndex::new(p.skin().clone());
        assert!(skin.point_in_mesh(&p.convergent_point).unwrap());
    }
}
