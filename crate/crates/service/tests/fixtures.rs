use std::path::PathBuf;

use vats_service::files::{load_scene, write_phantom_fixtures, PlanFile};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

#[test]
fn bundled_fixtures_match_generator() {
    let dir = tempfile::tempdir().unwrap();
    write_phantom_fixtures(dir.path()).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    for name in names {
        let fresh = std::fs::read(dir.path().join(&name)).unwrap();
        let bundled = std::fs::read(fixtures().join(&name)).unwrap_or_default();
        assert!(
            fresh == bundled,
            "{name:?} differs; regenerate with `vats-plan phantom --out fixtures`"
        );
    }
}

#[test]
fn plan_round_trip_reproduces_frozen_report() {
    let scene = load_scene(&fixtures().join("manifest.json")).unwrap();
    let plan = PlanFile::load(&fixtures().join("plan_nominal.json")).unwrap();
    let text = plan.to_json();
    let back: PlanFile = serde_json::from_str(&text).unwrap();
    assert_eq!(back, plan);
    let eval = back.evaluate(&scene.scene, &scene.params()).unwrap();
    let frozen = plan.report.as_ref().unwrap();
    let voxel = frozen.spacing_mm.powi(3) / 1e6;
    assert!((eval.report.operable_volume_l - frozen.operable_volume_l).abs() <= voxel);
    assert!(plan.staleness(&eval.report).is_none());
}

#[test]
fn manifest_round_trips() {
    let scene = load_scene(&fixtures().join("manifest.json")).unwrap();
    let text = serde_json::to_string(&scene.manifest).unwrap();
    assert_eq!(
        serde_json::from_str::<vats_service::files::SceneManifest>(&text).unwrap(),
        scene.manifest
    );
    assert_eq!(scene.scene.meshes().len(), scene.manifest.meshes.len());
}
