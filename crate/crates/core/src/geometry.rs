//! Trocar trajectories, instrument and endoscope cones, and the angle math behind
//! the placement rules. Lengths are millimetres, angles degrees.

use nalgebra::{Isometry3, Point3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::MeshModel;

pub const DEFAULT_DOF_HALF_ANGLE_DEG: f64 = 20.0;
pub const DEFAULT_REACH_MM: f64 = 280.0;
pub const DEFAULT_TILT_DEG: f64 = 30.0;
pub const DEFAULT_FOV_DEG: f64 = 60.0;
pub const DEFAULT_FOV_LENGTH_MM: f64 = 280.0;
pub const DEFAULT_TUBE_LENGTH_MM: f64 = 300.0;
pub const DEFAULT_RADIAL_SEGMENTS: usize = 64;

/// Slack on containment tests so that rigid motions do not flip boundary points.
const CONTAINMENT_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("trajectory entry and target coincide")]
    ZeroLengthTrajectory,
    #[error("zero-length vector")]
    ZeroVector,
    #[error("cone half-angle {0}° outside [0°, 90°)")]
    HalfAngle(f64),
    #[error("cone length {0} mm must be positive")]
    ConeLength(f64),
    #[error("cannot tessellate a cone with half-angle {half_angle}° into {segments} segments")]
    Tessellation { half_angle: f64, segments: usize },
    #[error("camera pose parameter out of range: {0}")]
    CameraPose(String),
    #[error("target {distance:.1} mm from the entry is too close for a {depth:.1} mm insertion with {tilt}° tilt")]
    AimUnreachable { distance: f64, depth: f64, tilt: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hand {
    Left,
    Right,
}

impl Hand {
    pub fn as_str(self) -> &'static str {
        match self {
            Hand::Left => "left",
            Hand::Right => "right",
        }
    }
}

/// Straight instrument path from a skin entry to the target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrocarTrajectory {
    entry: Point3<f64>,
    target: Point3<f64>,
    hand: Hand,
    length: f64,
    axis: Vector3<f64>,
}

impl TrocarTrajectory {
    pub fn new(entry: Point3<f64>, target: Point3<f64>, hand: Hand) -> Result<Self, GeometryError> {
        let d = target - entry;
        let length = d.norm();
        if !(length > 0.0) {
            return Err(GeometryError::ZeroLengthTrajectory);
        }
        Ok(Self {
            entry,
            target,
            hand,
            length,
            axis: d / length,
        })
    }

    pub fn entry(&self) -> Point3<f64> {
        self.entry
    }
    pub fn target(&self) -> Point3<f64> {
        self.target
    }
    pub fn hand(&self) -> Hand {
        self.hand
    }
    pub fn length(&self) -> f64 {
        self.length
    }
    /// Unit vector from entry to target.
    pub fn axis(&self) -> Vector3<f64> {
        self.axis
    }

    pub fn transformed(&self, iso: &Isometry3<f64>) -> Self {
        Self::new(iso * self.entry, iso * self.target, self.hand).expect("isometry keeps length")
    }
}

pub fn make_trajectory(entry: Point3<f64>, target: Point3<f64>, hand: Hand) -> Result<TrocarTrajectory, GeometryError> {
    TrocarTrajectory::new(entry, target, hand)
}

/// Solid right-circular cone truncated by a flat cap `length` mm from the apex.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Cone {
    pub apex: Point3<f64>,
    pub axis: Vector3<f64>,
    pub half_angle_deg: f64,
    pub length: f64,
}

/// Instrument working cone about a trocar pivot.
pub type DofCone = Cone;
/// Endoscope viewing cone.
pub type FovCone = Cone;

impl Cone {
    pub fn new(apex: Point3<f64>, axis: Vector3<f64>, half_angle_deg: f64, length: f64) -> Result<Self, GeometryError> {
        if !(0.0..90.0).contains(&half_angle_deg) {
            return Err(GeometryError::HalfAngle(half_angle_deg));
        }
        if !(length > 0.0 && length.is_finite()) {
            return Err(GeometryError::ConeLength(length));
        }
        let n = axis.norm();
        if !(n > 0.0) {
            return Err(GeometryError::ZeroVector);
        }
        Ok(Self {
            apex,
            axis: axis / n,
            half_angle_deg,
            length,
        })
    }

    pub fn base_radius(&self) -> f64 {
        self.length * self.half_angle_deg.to_radians().tan()
    }

    pub fn base_center(&self) -> Point3<f64> {
        self.apex + self.axis * self.length
    }

    pub fn analytic_volume(&self) -> f64 {
        let r = self.base_radius();
        std::f64::consts::PI * r * r * self.length / 3.0
    }

    /// Axial/radial coordinates of `p` relative to the apex.
    fn local(&self, p: &Point3<f64>) -> (f64, f64) {
        let u = p - self.apex;
        let t = u.dot(&self.axis);
        let radial = (u - self.axis * t).norm();
        (t, radial)
    }

    pub fn contains(&self, p: &Point3<f64>) -> bool {
        let (t, radial) = self.local(p);
        if t < -CONTAINMENT_EPS || t > self.length + CONTAINMENT_EPS {
            return false;
        }
        if t <= 0.0 && radial <= CONTAINMENT_EPS {
            return true;
        }
        radial.atan2(t) <= self.half_angle_deg.to_radians() + CONTAINMENT_EPS
    }

    /// Euclidean distance from `p` to the solid cone; zero inside.
    pub fn distance(&self, p: &Point3<f64>) -> f64 {
        let (t, r) = self.local(p);
        let base = self.base_radius();
        // Cross-section in the (axial, radial) half-plane is the triangle
        // (0,0), (L,0), (L,R); distance to it equals distance to the solid.
        let inside = (0.0..=self.length).contains(&t) && r <= t * self.half_angle_deg.to_radians().tan();
        if inside {
            return 0.0;
        }
        let q = nalgebra::Point2::new(t, r);
        let corners = [
            nalgebra::Point2::new(0.0, 0.0),
            nalgebra::Point2::new(self.length, 0.0),
            nalgebra::Point2::new(self.length, base),
        ];
        (0..3)
            .map(|k| point_segment_distance_2d(&q, &corners[k], &corners[(k + 1) % 3]))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn transformed(&self, iso: &Isometry3<f64>) -> Self {
        Self {
            apex: iso * self.apex,
            axis: iso * self.axis,
            ..*self
        }
    }
}

fn point_segment_distance_2d(p: &nalgebra::Point2<f64>, a: &nalgebra::Point2<f64>, b: &nalgebra::Point2<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let s = if len2 > 0.0 {
        ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p - (a + ab * s)).norm()
}

/// Working cone of an instrument: apex at the skin pivot, opening toward the target,
/// cut flat at the instrument reach.
pub fn dof_cone_of(traj: &TrocarTrajectory, half_angle_deg: f64, reach_mm: f64) -> Result<DofCone, GeometryError> {
    Cone::new(traj.entry(), traj.axis(), half_angle_deg, reach_mm)
}

pub fn cone_contains(cone: &Cone, p: &Point3<f64>) -> bool {
    cone.contains(p)
}

/// Closed, outward-wound polyhedral cone: lateral fan from the apex plus a base disk.
pub fn tessellate_cone(cone: &Cone, radial_segments: usize) -> Result<MeshModel, GeometryError> {
    let radius = cone.base_radius();
    if radial_segments < 3 || radius * radius * (radial_segments as f64) < 1e-5 {
        return Err(GeometryError::Tessellation {
            half_angle: cone.half_angle_deg,
            segments: radial_segments,
        });
    }
    let u = perpendicular_to(&cone.axis);
    let w = cone.axis.cross(&u);
    let center = cone.base_center();
    let mut vertices = Vec::with_capacity(radial_segments + 2);
    vertices.push(cone.apex);
    vertices.push(center);
    for i in 0..radial_segments {
        let theta = std::f64::consts::TAU * i as f64 / radial_segments as f64;
        vertices.push(center + (u * theta.cos() + w * theta.sin()) * radius);
    }
    let ring = |i: usize| (2 + i % radial_segments) as u32;
    let mut triangles = Vec::with_capacity(2 * radial_segments);
    for i in 0..radial_segments {
        triangles.push([0, ring(i + 1), ring(i)]);
        triangles.push([1, ring(i), ring(i + 1)]);
    }
    MeshModel::new("cone", vertices, triangles).map_err(|_| GeometryError::Tessellation {
        half_angle: cone.half_angle_deg,
        segments: radial_segments,
    })
}

/// Angle in degrees, in `[0, 180]`.
pub fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> Result<f64, GeometryError> {
    let (na, nb) = (a.norm(), b.norm());
    if !(na > 0.0 && nb > 0.0) {
        return Err(GeometryError::ZeroVector);
    }
    // atan2 form; better conditioned than acos near 0° and 180°.
    Ok(a.cross(b).norm().atan2(a.dot(b)).to_degrees())
}

/// Deterministic unit vector perpendicular to `v`, built from the world axis least
/// aligned with it.
pub fn perpendicular_to(v: &Vector3<f64>) -> Vector3<f64> {
    let v = v.normalize();
    let k = v.iamin();
    let mut e = Vector3::zeros();
    e[k] = 1.0;
    (e - v * v.dot(&e)).normalize()
}

/// Rigid endoscope: a straight tube with the lens at `tip` and an optical axis tilted
/// away from the tube's viewing direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    tip: Point3<f64>,
    tube_axis: Vector3<f64>,
    tube_length: f64,
    tilt_deg: f64,
    roll_deg: f64,
    reference: Vector3<f64>,
    fov_half_angle_deg: f64,
}

impl CameraPose {
    /// `tube_axis` points from the tip toward the handle. Tilt, roll and field of
    /// view take their defaults (30°, 0°, 60°).
    pub fn new(tip: Point3<f64>, tube_axis: Vector3<f64>, tube_length: f64) -> Result<Self, GeometryError> {
        let n = tube_axis.norm();
        if !(n > 0.0) {
            return Err(GeometryError::ZeroVector);
        }
        if !(tube_length > 0.0 && tube_length.is_finite()) {
            return Err(GeometryError::CameraPose(format!("tube length {tube_length}")));
        }
        let tube_axis = tube_axis / n;
        Ok(Self {
            tip,
            tube_axis,
            tube_length,
            tilt_deg: DEFAULT_TILT_DEG,
            roll_deg: 0.0,
            reference: perpendicular_to(&tube_axis),
            fov_half_angle_deg: DEFAULT_FOV_DEG / 2.0,
        })
    }

    pub fn with_tilt(mut self, tilt_deg: f64) -> Result<Self, GeometryError> {
        if !(0.0..90.0).contains(&tilt_deg) {
            return Err(GeometryError::CameraPose(format!("tilt {tilt_deg}°")));
        }
        self.tilt_deg = tilt_deg;
        Ok(self)
    }

    pub fn with_roll(mut self, roll_deg: f64) -> Self {
        self.roll_deg = roll_deg.rem_euclid(360.0);
        self
    }

    /// Full field-of-view angle; the cone half-angle is half of it.
    pub fn with_fov(mut self, fov_deg: f64) -> Result<Self, GeometryError> {
        if !(fov_deg > 0.0 && fov_deg < 180.0) {
            return Err(GeometryError::CameraPose(format!("field of view {fov_deg}°")));
        }
        self.fov_half_angle_deg = fov_deg / 2.0;
        Ok(self)
    }

    /// Sets the zero-roll tilt direction; it is projected perpendicular to the tube.
    pub fn with_reference(mut self, reference: Vector3<f64>) -> Result<Self, GeometryError> {
        let r = reference - self.tube_axis * self.tube_axis.dot(&reference);
        let n = r.norm();
        if !(n > 1e-9 * reference.norm().max(1.0)) {
            return Err(GeometryError::CameraPose("reference parallel to the tube".into()));
        }
        self.reference = r / n;
        Ok(self)
    }

    pub fn tip(&self) -> Point3<f64> {
        self.tip
    }
    pub fn tube_axis(&self) -> Vector3<f64> {
        self.tube_axis
    }
    pub fn tube_length(&self) -> f64 {
        self.tube_length
    }
    pub fn tilt_deg(&self) -> f64 {
        self.tilt_deg
    }
    pub fn roll_deg(&self) -> f64 {
        self.roll_deg
    }
    pub fn reference(&self) -> Vector3<f64> {
        self.reference
    }
    pub fn fov_half_angle_deg(&self) -> f64 {
        self.fov_half_angle_deg
    }
    pub fn fov_deg(&self) -> f64 {
        2.0 * self.fov_half_angle_deg
    }

    pub fn handle(&self) -> Point3<f64> {
        self.tip + self.tube_axis * self.tube_length
    }

    /// Direction the bare tube looks along (tip away from the handle).
    pub fn view_direction(&self) -> Vector3<f64> {
        -self.tube_axis
    }

    /// Unit vector the optical axis leans toward: the reference rolled about the tube.
    pub fn tilt_direction(&self) -> Vector3<f64> {
        let view = self.view_direction();
        let (s, c) = self.roll_deg.to_radians().sin_cos();
        self.reference * c + view.cross(&self.reference) * s
    }

    pub fn optical_axis(&self) -> Vector3<f64> {
        let (s, c) = self.tilt_deg.to_radians().sin_cos();
        (self.view_direction() * c + self.tilt_direction() * s).normalize()
    }

    pub fn fov_cone(&self, length: f64) -> Result<FovCone, GeometryError> {
        Cone::new(self.tip, self.optical_axis(), self.fov_half_angle_deg, length)
    }

    pub fn transformed(&self, iso: &Isometry3<f64>) -> Self {
        Self {
            tip: iso * self.tip,
            tube_axis: iso * self.tube_axis,
            reference: iso * self.reference,
            ..*self
        }
    }

    /// Pose whose tube passes through `entry`, with the tip `depth` mm past it and the
    /// optical axis through `target`. `roll_deg` picks which side of the entry-target
    /// line the tilt leans to, measured from [`perpendicular_to`] of that line.
    pub fn aimed_at(
        entry: Point3<f64>,
        target: Point3<f64>,
        depth: f64,
        tilt_deg: f64,
        roll_deg: f64,
        tube_length: f64,
    ) -> Result<Self, GeometryError> {
        let to_target = target - entry;
        let distance = to_target.norm();
        if !(distance > 0.0) {
            return Err(GeometryError::ZeroVector);
        }
        let w = to_target / distance;
        let tilt = tilt_deg.to_radians();
        let sin_at_target = depth * tilt.sin() / distance;
        if !(0.0..1.0).contains(&sin_at_target) || depth >= distance {
            return Err(GeometryError::AimUnreachable {
                distance,
                depth,
                tilt: tilt_deg,
            });
        }
        let lean_at_entry = tilt - sin_at_target.asin();
        let base = perpendicular_to(&w);
        let (rs, rc) = roll_deg.to_radians().sin_cos();
        let r0 = base * rc + w.cross(&base) * rs;
        let (es, ec) = lean_at_entry.sin_cos();
        let view = w * ec - r0 * es;
        let lean = w * es + r0 * ec;

        let pose = CameraPose::new(entry + view * depth, -view, tube_length)?.with_tilt(tilt_deg)?;
        // Express the lean direction as a roll from the pose's default reference.
        let reference = pose.reference;
        let roll = view.cross(&reference).dot(&lean).atan2(reference.dot(&lean));
        Ok(pose.with_roll(roll.to_degrees()))
    }
}

/// Perpendicular distance (mm) from `target` to the optical-axis ray; infinite when
/// the target lies behind the tip.
pub fn aim_error(camera: &CameraPose, target: &Point3<f64>) -> f64 {
    let axis = camera.optical_axis();
    let u = target - camera.tip();
    let t = u.dot(&axis);
    if t < 0.0 {
        return f64::INFINITY;
    }
    (u - axis * t).norm()
}

/// Serialized camera pose. Optional fields take the engine defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraPoseSpec {
    pub tip_mm: [f64; 3],
    pub tube_axis: [f64; 3],
    #[serde(default = "default_tube_length")]
    pub tube_length_mm: f64,
    #[serde(default = "default_tilt")]
    pub tilt_deg: f64,
    #[serde(default)]
    pub roll_deg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_axis: Option<[f64; 3]>,
    #[serde(default = "default_fov")]
    pub fov_deg: f64,
}

fn default_tube_length() -> f64 {
    DEFAULT_TUBE_LENGTH_MM
}
fn default_tilt() -> f64 {
    DEFAULT_TILT_DEG
}
fn default_fov() -> f64 {
    DEFAULT_FOV_DEG
}

impl TryFrom<&CameraPoseSpec> for CameraPose {
    type Error = GeometryError;

    fn try_from(spec: &CameraPoseSpec) -> Result<Self, Self::Error> {
        let mut pose = CameraPose::new(
            Point3::from(spec.tip_mm),
            Vector3::from(spec.tube_axis),
            spec.tube_length_mm,
        )?
        .with_tilt(spec.tilt_deg)?
        .with_fov(spec.fov_deg)?
        .with_roll(spec.roll_deg);
        if let Some(r) = spec.reference_axis {
            pose = pose.with_reference(Vector3::from(r))?;
        }
        Ok(pose)
    }
}

impl From<&CameraPose> for CameraPoseSpec {
    fn from(pose: &CameraPose) -> Self {
        CameraPoseSpec {
            tip_mm: pose.tip.into(),
            tube_axis: pose.tube_axis.into(),
            tube_length_mm: pose.tube_length,
            tilt_deg: pose.tilt_deg,
            roll_deg: pose.roll_deg,
            reference_axis: Some(pose.reference.into()),
            fov_deg: pose.fov_deg(),
        }
    }
}
