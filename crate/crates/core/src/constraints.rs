//! Placement rules for tool trocars and the endoscope, and the plan report that
//! combines them with the operable volume.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Isometry3, Point3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    aim_error, angle_between, dof_cone_of, tessellate_cone, CameraPose, Cone, DofCone, GeometryError, TrocarTrajectory,
    DEFAULT_DOF_HALF_ANGLE_DEG, DEFAULT_FOV_DEG, DEFAULT_FOV_LENGTH_MM, DEFAULT_RADIAL_SEGMENTS, DEFAULT_REACH_MM,
    DEFAULT_TILT_DEG, DEFAULT_TUBE_LENGTH_MM,
};
use crate::mesh::{MeshModel, Ray, Segment, SpatialIndex};
use crate::voxel::{LatticeCell, VoxelError, VoxelGrid, DEFAULT_SPACING_MM};

/// Absolute slack (mm or degrees) on rule thresholds, so that a value constructed to
/// sit exactly on a limit is not failed by rounding.
pub const THRESHOLD_SLACK: f64 = 1e-9;
/// Entry points farther than this from the skin surface are rejected.
pub const SKIN_CONTACT_MM: f64 = 1.0;
pub const ANGLE_BAND_DEG: (f64, f64) = (45.0, 75.0);

#[derive(Debug, Error)]
pub enum ConstraintError {
    #[error("scene has no skin mesh")]
    NoSkin,
    #[error("scene has {0} skin meshes; exactly one is allowed")]
    MultipleSkins(usize),
    #[error("{region} region lists triangle {index} but the skin has {count} triangles")]
    RegionIndex {
        region: &'static str,
        index: usize,
        count: usize,
    },
    #[error("convergent point lies outside the skin")]
    ConvergentOutside,
    #[error("entry point is {distance:.2} mm from the skin surface (limit {SKIN_CONTACT_MM} mm)")]
    EntryNotOnSkin { distance: f64 },
    #[error("camera tube does not cross the skin")]
    TubeMissesSkin,
    #[error("trajectory targets are {distance:.2} mm apart (limit {limit} mm)")]
    MismatchedTargets { distance: f64, limit: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Voxel(#[from] VoxelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Skin,
    Rib,
    Vertebra,
    Scapula,
    Trachea,
    Vasculature,
    Other,
}

impl Role {
    pub const ALL: [Role; 7] = [
        Role::Skin,
        Role::Rib,
        Role::Vertebra,
        Role::Scapula,
        Role::Trachea,
        Role::Vasculature,
        Role::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Skin => "skin",
            Role::Rib => "rib",
            Role::Vertebra => "vertebra",
            Role::Scapula => "scapula",
            Role::Trachea => "trachea",
            Role::Vasculature => "vasculature",
            Role::Other => "other",
        }
    }

    /// Bony meshes block instrument and camera paths.
    pub fn is_bony(self) -> bool {
        matches!(self, Role::Rib | Role::Vertebra | Role::Scapula)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown role `{s}`"))
    }
}

/// Tunable limits and model parameters. Serialized field names carry their units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanParams {
    pub snap_tolerance_mm: f64,
    pub reach_mm: f64,
    pub half_angle_deg: f64,
    pub fov_deg: f64,
    pub tilt_deg: f64,
    pub aim_tol_mm: f64,
    pub capsule_radius_mm: f64,
    pub spacing_mm: f64,
    pub fov_length_mm: f64,
    pub crowding_step_mm: f64,
    pub camera_depth_mm: f64,
    pub tube_length_mm: f64,
    pub radial_segments: usize,
    /// Intersect the operable volume with the inside of the skin.
    pub clip_to_skin: bool,
}

impl Default for PlanParams {
    fn default() -> Self {
        Self {
            snap_tolerance_mm: 10.0,
            reach_mm: DEFAULT_REACH_MM,
            half_angle_deg: DEFAULT_DOF_HALF_ANGLE_DEG,
            fov_deg: DEFAULT_FOV_DEG,
            tilt_deg: DEFAULT_TILT_DEG,
            aim_tol_mm: 5.0,
            capsule_radius_mm: 5.0,
            spacing_mm: DEFAULT_SPACING_MM,
            fov_length_mm: DEFAULT_FOV_LENGTH_MM,
            crowding_step_mm: 5.0,
            camera_depth_mm: 80.0,
            tube_length_mm: DEFAULT_TUBE_LENGTH_MM,
            radial_segments: DEFAULT_RADIAL_SEGMENTS,
            clip_to_skin: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SceneMesh {
    pub role: Role,
    index: SpatialIndex,
}

impl SceneMesh {
    pub fn name(&self) -> &str {
        self.index.mesh().name()
    }
    pub fn mesh(&self) -> &MeshModel {
        self.index.mesh()
    }
    pub fn index(&self) -> &SpatialIndex {
        &self.index
    }
}

/// Role-labelled meshes, the target, and the allowed entry regions on the skin.
///
/// `frame` maps the coordinates the scene was created in to its current coordinates.
/// Voxel grids are laid out in the original coordinates, so moving a scene rigidly
/// does not move the lattice relative to the anatomy.
#[derive(Debug, Clone)]
pub struct AnatomicalScene {
    meshes: Vec<SceneMesh>,
    skin: usize,
    convergent_point: Point3<f64>,
    tool_region: BTreeSet<usize>,
    camera_region: BTreeSet<usize>,
    frame: Isometry3<f64>,
}

impl AnatomicalScene {
    pub fn new(
        meshes: Vec<(Role, MeshModel)>,
        convergent_point: Point3<f64>,
        tool_region: impl IntoIterator<Item = usize>,
        camera_region: impl IntoIterator<Item = usize>,
    ) -> Result<Self, ConstraintError> {
        let skins: Vec<usize> = meshes
            .iter()
            .enumerate()
            .filter(|(_, (r, _))| *r == Role::Skin)
            .map(|(i, _)| i)
            .collect();
        let skin = match skins.as_slice() {
            [] => return Err(ConstraintError::NoSkin),
            [i] => *i,
            many => return Err(ConstraintError::MultipleSkins(many.len())),
        };
        let meshes: Vec<SceneMesh> = meshes
            .into_iter()
            .map(|(role, mesh)| SceneMesh {
                role,
                index: SpatialIndex::new(mesh),
            })
            .collect();
        let count = meshes[skin].mesh().triangle_count();
        let check = |region: &'static str, set: BTreeSet<usize>| match set.iter().find(|&&i| i >= count) {
            Some(&index) => Err(ConstraintError::RegionIndex { region, index, count }),
            None => Ok(set),
        };
        let tool_region = check("tool", tool_region.into_iter().collect())?;
        let camera_region = check("camera", camera_region.into_iter().collect())?;
        let skin_index = &meshes[skin].index;
        if skin_index.is_closed() && !skin_index.parity_inside(&convergent_point) {
            return Err(ConstraintError::ConvergentOutside);
        }
        Ok(Self {
            meshes,
            skin,
            convergent_point,
            tool_region,
            camera_region,
            frame: Isometry3::identity(),
        })
    }

    pub fn meshes(&self) -> &[SceneMesh] {
        &self.meshes
    }
    pub fn skin(&self) -> &SceneMesh {
        &self.meshes[self.skin]
    }
    pub fn convergent_point(&self) -> Point3<f64> {
        self.convergent_point
    }
    pub fn tool_region(&self) -> &BTreeSet<usize> {
        &self.tool_region
    }
    pub fn camera_region(&self) -> &BTreeSet<usize> {
        &self.camera_region
    }
    pub fn frame(&self) -> &Isometry3<f64> {
        &self.frame
    }

    pub fn bony(&self) -> impl Iterator<Item = &SceneMesh> {
        self.meshes.iter().filter(|m| m.role.is_bony())
    }

    /// Same anatomy moved by `iso`.
    pub fn transformed(&self, iso: &Isometry3<f64>) -> Self {
        Self {
            meshes: self
                .meshes
                .iter()
                .map(|m| SceneMesh {
                    role: m.role,
                    index: SpatialIndex::new(m.mesh().transformed(iso)),
                })
                .collect(),
            convergent_point: iso * self.convergent_point,
            frame: iso * self.frame,
            tool_region: self.tool_region.clone(),
            camera_region: self.camera_region.clone(),
            skin: self.skin,
        }
    }

    /// Skin triangle nearest to `p`, which must lie within [`SKIN_CONTACT_MM`].
    pub fn skin_triangle_at(&self, p: &Point3<f64>) -> Result<usize, ConstraintError> {
        match self.skin().index.closest_triangle(p) {
            Some((t, d)) if d <= SKIN_CONTACT_MM => Ok(t),
            Some((_, distance)) => Err(ConstraintError::EntryNotOnSkin { distance }),
            None => Err(ConstraintError::EntryNotOnSkin {
                distance: f64::INFINITY,
            }),
        }
    }

    /// Where the camera tube crosses the skin: the first crossing walking from the
    /// handle toward the tip.
    pub fn camera_entry(&self, cam: &CameraPose) -> Result<(Point3<f64>, usize), ConstraintError> {
        let ray = Ray::new(cam.handle(), cam.view_direction()).map_err(|_| ConstraintError::TubeMissesSkin)?;
        let hit = self
            .skin()
            .index
            .ray_intersect(&ray)
            .into_iter()
            .find(|h| h.distance <= cam.tube_length())
            .ok_or(ConstraintError::TubeMissesSkin)?;
        Ok((ray.at(hit.distance), hit.triangle))
    }

    fn path_blocked(&self, start: &Point3<f64>, end: &Point3<f64>, radius: f64) -> bool {
        let seg = Segment::new(*start, *end).with_radius(radius);
        self.bony().any(|m| m.index.segment_blocked(&seg))
    }
}

/// Outcome of one rule. `value` is `None` only when the measurement is not finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleResult {
    pub id: String,
    pub pass: bool,
    pub value: Option<f64>,
    pub unit: String,
    pub threshold: String,
}

impl RuleResult {
    fn new(id: impl Into<String>, pass: bool, value: f64, unit: &str, threshold: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            pass,
            value: value.is_finite().then_some(value),
            unit: unit.into(),
            threshold: threshold.into(),
        }
    }

    fn flag(id: impl Into<String>, pass: bool, threshold: impl Into<String>) -> Self {
        Self::new(id, pass, if pass { 1.0 } else { 0.0 }, "bool", threshold)
    }
}

fn at_most(value: f64, limit: f64) -> bool {
    value <= limit + THRESHOLD_SLACK
}

/// Endpoint snap: the placed point must be near the convergent point.
pub fn check_endpoint(p: &Point3<f64>, scene: &AnatomicalScene, params: &PlanParams) -> RuleResult {
    let d = (p - scene.convergent_point).norm();
    RuleResult::new(
        "endpoint",
        at_most(d, params.snap_tolerance_mm),
        d,
        "mm",
        format!("<= {} mm", params.snap_tolerance_mm),
    )
}

/// Length, entry region and bony obstruction for one instrument. Rule ids are prefixed
/// with the hand.
pub fn check_trajectory(
    traj: &TrocarTrajectory,
    scene: &AnatomicalScene,
    params: &PlanParams,
) -> Result<Vec<RuleResult>, ConstraintError> {
    let tri = scene.skin_triangle_at(&traj.entry())?;
    let hand = traj.hand().as_str();
    Ok(vec![
        RuleResult::new(
            format!("{hand}.length"),
            at_most(traj.length(), params.reach_mm),
            traj.length(),
            "mm",
            format!("<= {} mm", params.reach_mm),
        ),
        RuleResult::flag(
            format!("{hand}.region"),
            scene.tool_region.contains(&tri),
            "entry triangle in tool region",
        ),
        RuleResult::flag(
            format!("{hand}.obstruction"),
            !scene.path_blocked(&traj.entry(), &traj.target(), params.capsule_radius_mm),
            format!("{} mm capsule clear of bone", params.capsule_radius_mm),
        ),
    ])
}

/// Angle at the target between the two instruments. The 45°–75° band is advisory.
pub fn manipulation_angle(
    left: &TrocarTrajectory,
    right: &TrocarTrajectory,
    params: &PlanParams,
) -> Result<RuleResult, ConstraintError> {
    let gap = (left.target() - right.target()).norm();
    if gap > params.snap_tolerance_mm {
        return Err(ConstraintError::MismatchedTargets {
            distance: gap,
            limit: params.snap_tolerance_mm,
        });
    }
    let angle = angle_between(&(left.entry() - left.target()), &(right.entry() - right.target()))?;
    let (lo, hi) = ANGLE_BAND_DEG;
    Ok(RuleResult::new(
        "manipulation_angle",
        angle >= lo - THRESHOLD_SLACK && at_most(angle, hi),
        angle,
        "deg",
        format!("{lo}..={hi} deg (advisory)"),
    ))
}

/// Smallest distance from the segment to any cone, or 0 when the segment enters one.
///
/// Points are sampled every `step` mm. Between samples, cone distance is 1-Lipschitz
/// along the segment, so an interval whose end distances sum to more than its length
/// cannot touch a cone; other intervals are bisected down to `step / 16`.
pub fn segment_cone_clearance(start: &Point3<f64>, end: &Point3<f64>, cones: &[Cone], step: f64) -> f64 {
    let length = (end - start).norm();
    let n = ((length / step).ceil() as usize).max(1);
    let min_interval = step / 16.0;
    let probe = |p: &Point3<f64>| -> Option<f64> {
        if cones.iter().any(|c| c.contains(p)) {
            None
        } else {
            Some(cones.iter().map(|c| c.distance(p)).fold(f64::INFINITY, f64::min))
        }
    };
    let point = |s: f64| start + (end - start) * s;

    let mut samples = Vec::with_capacity(n + 1);
    for i in 0..=n {
        match probe(&point(i as f64 / n as f64)) {
            Some(d) => samples.push(d),
            None => return 0.0,
        }
    }
    let mut clearance = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let mut stack: Vec<(f64, f64, f64, f64)> = (0..n)
        .map(|i| {
            (
                i as f64 / n as f64,
                (i + 1) as f64 / n as f64,
                samples[i],
                samples[i + 1],
            )
        })
        .collect();
    while let Some((a, b, da, db)) = stack.pop() {
        let span = (b - a) * length;
        if da + db > span || span <= min_interval {
            continue;
        }
        let m = 0.5 * (a + b);
        match probe(&point(m)) {
            None => return 0.0,
            Some(dm) => {
                clearance = clearance.min(dm);
                stack.push((a, m, da, dm));
                stack.push((m, b, dm, db));
            }
        }
    }
    clearance
}

/// Aim, obstruction, entry region and crowding for the endoscope.
pub fn check_camera(
    cam: &CameraPose,
    scene: &AnatomicalScene,
    tool_cones: &[DofCone; 2],
    params: &PlanParams,
) -> Result<Vec<RuleResult>, ConstraintError> {
    let mut rules = camera_placement_rules(cam, scene, params)?;
    rules.push(crowding_rule(cam, tool_cones, params));
    Ok(rules)
}

/// The camera rules that do not depend on the instruments: aim, obstruction, region.
pub fn camera_placement_rules(
    cam: &CameraPose,
    scene: &AnatomicalScene,
    params: &PlanParams,
) -> Result<Vec<RuleResult>, ConstraintError> {
    let (_, tri) = scene.camera_entry(cam)?;
    let c = scene.convergent_point;
    let aim = aim_error(cam, &c);
    Ok(vec![
        RuleResult::new(
            "camera.aim",
            at_most(aim, params.aim_tol_mm),
            aim,
            "mm",
            format!("<= {} mm", params.aim_tol_mm),
        ),
        RuleResult::flag(
            "camera.obstruction",
            !scene.path_blocked(&cam.tip(), &c, params.capsule_radius_mm),
            format!("{} mm capsule tip to target clear of bone", params.capsule_radius_mm),
        ),
        RuleResult::flag(
            "camera.region",
            scene.camera_region.contains(&tri),
            "entry triangle in camera region",
        ),
    ])
}

/// Crowding: the whole tube, tip to handle, stays outside every tool cone.
pub fn crowding_rule(cam: &CameraPose, tool_cones: &[DofCone], params: &PlanParams) -> RuleResult {
    let clearance = segment_cone_clearance(&cam.tip(), &cam.handle(), tool_cones, params.crowding_step_mm);
    RuleResult::new(
        "camera.crowding",
        clearance > 0.0,
        clearance,
        "mm",
        "tube outside both tool cones",
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDistances {
    pub left_mm: f64,
    pub right_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub rules: Vec<RuleResult>,
    pub manipulation_angle_deg: f64,
    pub in_band: bool,
    pub operable_volume_l: f64,
    pub overall_valid: bool,
    pub trajectory_distances: TrajectoryDistances,
    pub overlap_cell_count: usize,
    pub spacing_mm: f64,
}

impl PlanReport {
    pub fn failed_rules(&self) -> impl Iterator<Item = &RuleResult> {
        self.rules.iter().filter(|r| !r.pass)
    }

    pub fn rule(&self, id: &str) -> Option<&RuleResult> {
        self.rules.iter().find(|r| r.id == id)
    }
}

/// All hard rules plus the advisory manipulation angle, without any voxel work.
#[derive(Debug, Clone)]
pub struct RuleCheck {
    pub rules: Vec<RuleResult>,
    pub angle: RuleResult,
}

impl RuleCheck {
    pub fn all_pass(&self) -> bool {
        self.rules.iter().all(|r| r.pass)
    }
}

pub fn tool_cones(
    left: &TrocarTrajectory,
    right: &TrocarTrajectory,
    params: &PlanParams,
) -> Result<[DofCone; 2], ConstraintError> {
    Ok([
        dof_cone_of(left, params.half_angle_deg, params.reach_mm)?,
        dof_cone_of(right, params.half_angle_deg, params.reach_mm)?,
    ])
}

pub fn check_rules(
    left: &TrocarTrajectory,
    right: &TrocarTrajectory,
    cam: &CameraPose,
    scene: &AnatomicalScene,
    params: &PlanParams,
) -> Result<RuleCheck, ConstraintError> {
    let angle = manipulation_angle(left, right, params)?;
    let mut rules = Vec::with_capacity(12);
    for traj in [left, right] {
        let mut endpoint = check_endpoint(&traj.target(), scene, params);
        endpoint.id = format!("{}.endpoint", traj.hand().as_str());
        rules.push(endpoint);
        rules.extend(check_trajectory(traj, scene, params)?);
    }
    rules.extend(check_camera(cam, scene, &tool_cones(left, right, params)?, params)?);
    Ok(RuleCheck { rules, angle })
}

/// The three cones whose overlap is the operable volume, in scene coordinates.
pub fn plan_cones(
    left: &TrocarTrajectory,
    right: &TrocarTrajectory,
    cam: &CameraPose,
    params: &PlanParams,
) -> Result<[Cone; 3], ConstraintError> {
    let [l, r] = tool_cones(left, right, params)?;
    Ok([l, r, cam.fov_cone(params.fov_length_mm)?])
}

/// Tessellated cone in the scene's original coordinates, ready for voxelization.
pub fn cone_mesh_local(
    cone: &Cone,
    scene: &AnatomicalScene,
    params: &PlanParams,
) -> Result<MeshModel, ConstraintError> {
    let local = cone.transformed(&scene.frame.inverse());
    Ok(tessellate_cone(&local, params.radial_segments)?)
}

/// Occupied lattice cells of one cone, in the scene's voxel frame.
pub fn cone_cells(
    cone: &Cone,
    scene: &AnatomicalScene,
    params: &PlanParams,
) -> Result<Vec<LatticeCell>, ConstraintError> {
    let mesh = cone_mesh_local(cone, scene, params)?;
    Ok(crate::voxel::solid_cells(&SpatialIndex::new(mesh), params.spacing_mm)?)
}

/// Occupied lattice cells of the skin interior, in the scene's voxel frame.
pub fn skin_cells(scene: &AnatomicalScene, params: &PlanParams) -> Result<Vec<LatticeCell>, ConstraintError> {
    let local = scene.skin().mesh().transformed(&scene.frame.inverse());
    Ok(crate::voxel::solid_cells(&SpatialIndex::new(local), params.spacing_mm)?)
}

/// Report plus the centres of the overlap cells in scene coordinates.
#[derive(Debug, Clone)]
pub struct PlanEvaluation {
    pub report: PlanReport,
    pub overlap_cells: Vec<Point3<f64>>,
}

pub fn evaluate_plan(
    left: &TrocarTrajectory,
    right: &TrocarTrajectory,
    cam: &CameraPose,
    scene: &AnatomicalScene,
    params: &PlanParams,
) -> Result<PlanReport, ConstraintError> {
    Ok(evaluate_plan_with_cells(left, right, cam, scene, params)?.report)
}

/// Runs every rule, then registers both tool cones and the camera cone in one grid
/// and measures the cells all three occupy.
pub fn evaluate_plan_with_cells(
    left: &TrocarTrajectory,
    right: &TrocarTrajectory,
    cam: &CameraPose,
    scene: &AnatomicalScene,
    params: &PlanParams,
) -> Result<PlanEvaluation, ConstraintError> {
    let check = check_rules(left, right, cam, scene, params)?;

    let mut solids: Vec<MeshModel> = plan_cones(left, right, cam, params)?
        .iter()
        .map(|c| cone_mesh_local(c, scene, params))
        .collect::<Result<_, _>>()?;
    if params.clip_to_skin {
        solids.push(scene.skin().mesh().transformed(&scene.frame.inverse()));
    }
    let refs: Vec<&MeshModel> = solids.iter().collect();
    let mut grid = VoxelGrid::build(&refs, params.spacing_mm)?;
    let mut ids = Vec::with_capacity(solids.len());
    for mesh in solids {
        ids.push(grid.add_solid(&SpatialIndex::new(mesh))?);
    }
    let local_cells = grid.export_overlap_cells(&ids)?;
    let overlap_cells: Vec<Point3<f64>> = local_cells.iter().map(|p| scene.frame * p).collect();

    let angle = check.angle.value.unwrap_or(f64::NAN);
    let report = PlanReport {
        overall_valid: check.all_pass(),
        manipulation_angle_deg: angle,
        in_band: check.angle.pass,
        operable_volume_l: overlap_cells.len() as f64 * grid.cell_volume_litres(),
        overlap_cell_count: overlap_cells.len(),
        spacing_mm: params.spacing_mm,
        trajectory_distances: TrajectoryDistances {
            left_mm: left.length(),
            right_mm: right.length(),
        },
        rules: check.rules,
    };
    Ok(PlanEvaluation { report, overlap_cells })
}
