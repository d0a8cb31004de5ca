//! JSON scene manifests and plan files.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use vats_core::constraints::{
    evaluate_plan_with_cells, AnatomicalScene, ConstraintError, PlanEvaluation, PlanParams, PlanReport, Role,
};
use vats_core::geometry::{CameraPose, CameraPoseSpec, GeometryError, Hand, TrocarTrajectory};
use vats_core::mesh::{load_obj, write_obj, MeshError};
use vats_core::phantom::{nominal_plan, synthetic_thorax};
use vats_core::{Point3, ENGINE_VERSION};

/// Relative manifest and plan paths are looked up under this directory when set.
pub const FIXTURE_ROOT_ENV: &str = "VATS_FIXTURE_ROOT";

#[derive(Debug, Error)]
pub enum FileError {
    #[error("cannot read `{path}`: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("`{path}` is not valid: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Scene(#[from] ConstraintError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshEntry {
    /// OBJ path, relative to the manifest.
    pub path: String,
    pub role: Role,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub meshes: Vec<MeshEntry>,
    pub convergent_point_mm: [f64; 3],
    pub tool_entry_region: Vec<usize>,
    pub camera_entry_region: Vec<usize>,
    #[serde(default)]
    pub defaults: PlanParams,
}

/// Applies [`FIXTURE_ROOT_ENV`] to relative paths that do not exist as given.
pub fn resolve(path: &Path) -> PathBuf {
    if path.is_relative() && !path.exists() {
        if let Some(root) = std::env::var_os(FIXTURE_ROOT_ENV) {
            return Path::new(&root).join(path);
        }
    }
    path.to_path_buf()
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, FileError> {
    let text = fs::read_to_string(path).map_err(|source| FileError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| FileError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), FileError> {
    fs::write(path, text).map_err(|source| FileError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// A manifest with its meshes loaded.
#[derive(Debug, Clone)]
pub struct LoadedScene {
    pub path: PathBuf,
    pub manifest: SceneManifest,
    pub scene: Arc<AnatomicalScene>,
}

impl LoadedScene {
    pub fn params(&self) -> PlanParams {
        self.manifest.defaults
    }
}

pub fn load_scene(path: &Path) -> Result<LoadedScene, FileError> {
    let path = resolve(path);
    let manifest: SceneManifest = read_json(&path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut meshes = Vec::with_capacity(manifest.meshes.len());
    for entry in &manifest.meshes {
        let mesh = load_obj(base.join(&entry.path))?.renamed(entry.name.clone());
        meshes.push((entry.role, mesh));
    }
    let scene = AnatomicalScene::new(
        meshes,
        Point3::from(manifest.convergent_point_mm),
        manifest.tool_entry_region.iter().copied(),
        manifest.camera_entry_region.iter().copied(),
    )?;
    Ok(LoadedScene {
        path,
        manifest,
        scene: Arc::new(scene),
    })
}

/// Placements of one plan. Both instruments target the scene's convergent point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub engine_version: String,
    /// Manifest the plan was made for, relative to the plan file.
    pub manifest: String,
    pub left_entry_mm: [f64; 3],
    pub right_entry_mm: [f64; 3],
    pub camera: CameraPoseSpec,
    /// Report at the time the plan was written.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<PlanReport>,
}

impl PlanFile {
    pub fn new(
        manifest: impl Into<String>,
        left: &TrocarTrajectory,
        right: &TrocarTrajectory,
        camera: &CameraPose,
        report: Option<PlanReport>,
    ) -> Self {
        Self {
            engine_version: ENGINE_VERSION.to_string(),
            manifest: manifest.into(),
            left_entry_mm: left.entry().into(),
            right_entry_mm: right.entry().into(),
            camera: CameraPoseSpec::from(camera),
            report,
        }
    }

    pub fn load(path: &Path) -> Result<Self, FileError> {
        read_json(&resolve(path))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn placements(
        &self,
        scene: &AnatomicalScene,
    ) -> Result<(TrocarTrajectory, TrocarTrajectory, CameraPose), FileError> {
        let c = scene.convergent_point();
        Ok((
            TrocarTrajectory::new(Point3::from(self.left_entry_mm), c, Hand::Left)?,
            TrocarTrajectory::new(Point3::from(self.right_entry_mm), c, Hand::Right)?,
            CameraPose::try_from(&self.camera)?,
        ))
    }

    pub fn evaluate(&self, scene: &AnatomicalScene, params: &PlanParams) -> Result<PlanEvaluation, FileError> {
        let (left, right, camera) = self.placements(scene)?;
        Ok(evaluate_plan_with_cells(&left, &right, &camera, scene, params)?)
    }

    /// Why the frozen report can no longer be trusted, if it cannot.
    pub fn staleness(&self, fresh: &PlanReport) -> Option<String> {
        let frozen = self.report.as_ref()?;
        if self.engine_version != ENGINE_VERSION {
            return Some(format!(
                "plan written by engine {}, running {}",
                self.engine_version, ENGINE_VERSION
            ));
        }
        let voxel = fresh.spacing_mm.powi(3) / vats_core::MM3_PER_LITRE;
        if frozen.spacing_mm != fresh.spacing_mm {
            return Some(format!(
                "frozen report used {} mm voxels, evaluated at {} mm",
                frozen.spacing_mm, fresh.spacing_mm
            ));
        }
        if (frozen.operable_volume_l - fresh.operable_volume_l).abs() > voxel + 1e-12
            || frozen.overall_valid != fresh.overall_valid
        {
            return Some("frozen report differs from re-evaluation".into());
        }
        None
    }
}

/// Writes the synthetic thorax: one OBJ per mesh, `manifest.json` and
/// `plan_nominal.json`.
pub fn write_phantom_fixtures(dir: &Path) -> Result<(), FileError> {
    fs::create_dir_all(dir).map_err(|source| FileError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let phantom = synthetic_thorax();
    let mut entries = Vec::new();
    for (role, mesh) in &phantom.meshes {
        let file = format!("{}.obj", mesh.name());
        let mut text = Vec::new();
        write_obj(mesh, &mut text).expect("write to memory");
        write_text(&dir.join(&file), &String::from_utf8(text).expect("ascii"))?;
        entries.push(MeshEntry {
            path: file,
            role: *role,
            name: mesh.name().to_string(),
        });
    }
    let manifest = SceneManifest {
        meshes: entries,
        convergent_point_mm: phantom.convergent_point.into(),
        tool_entry_region: phantom.tool_region.clone(),
        camera_entry_region: phantom.camera_region.clone(),
        defaults: PlanParams::default(),
    };
    let manifest_path = dir.join("manifest.json");
    write_text(
        &manifest_path,
        &(serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n"),
    )?;

    // Evaluate against the scene as re-read from disk, so the frozen report matches
    // what `validate` will compute.
    let loaded = load_scene(&manifest_path)?;
    let nominal = nominal_plan(&phantom)?;
    let report = evaluate_plan_with_cells(
        &nominal.left,
        &nominal.right,
        &nominal.camera,
        &loaded.scene,
        &loaded.params(),
    )?
    .report;
    let plan = PlanFile::new(
        "manifest.json",
        &nominal.left,
        &nominal.right,
        &nominal.camera,
        Some(report),
    );
    write_text(&dir.join("plan_nominal.json"), &(plan.to_json() + "\n"))
}
