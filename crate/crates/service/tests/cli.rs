use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use vats_service::files::{load_scene, PlanFile, SceneManifest};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn vats(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vats-plan"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

#[test]
fn validate_nominal_plan() {
    let out = vats(&[
        "validate",
        path(&fixtures().join("manifest.json")),
        path(&fixtures().join("plan_nominal.json")),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = stdout_json(&out);
    assert_eq!(report["overall_valid"], true);
    assert!(out.stderr.is_empty(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn validate_long_trajectory_fails() {
    let dir = tempfile::tempdir().unwrap();
    let mut plan = PlanFile::load(&fixtures().join("plan_nominal.json")).unwrap();
    let scene = load_scene(&fixtures().join("manifest.json")).unwrap();
    let c = scene.scene.convergent_point();
    // A skin vertex between 281 and 300 mm from the target.
    let entry = *scene
        .scene
        .skin()
        .mesh()
        .vertices()
        .iter()
        .find(|v| (281.0..300.0).contains(&(*v - c).norm()))
        .expect("far skin vertex");
    let expected = (entry - c).norm();
    plan.left_entry_mm = entry.into();
    plan.report = None;
    let plan_path = dir.path().join("long.json");
    std::fs::write(&plan_path, plan.to_json()).unwrap();

    let out = vats(&["validate", path(&fixtures().join("manifest.json")), path(&plan_path)]);
    assert_eq!(out.status.code(), Some(1));
    let report = stdout_json(&out);
    let rule = report["rules"]
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["id"] == "left.length")
        .unwrap()
        .clone();
    assert_eq!(rule["pass"], false);
    assert!((rule["value"].as_f64().unwrap() - expected).abs() < 1e-6);
    assert_eq!(report["overall_valid"], false);
}

#[test]
fn validate_missing_manifest() {
    let out = vats(&[
        "validate",
        "/nonexistent/manifest.json",
        path(&fixtures().join("plan_nominal.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn validate_warns_on_stale_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut plan = PlanFile::load(&fixtures().join("plan_nominal.json")).unwrap();
    plan.engine_version = "0.0.0".into();
    let plan_path = dir.path().join("old.json");
    std::fs::write(&plan_path, plan.to_json()).unwrap();
    let out = vats(&["validate", path(&fixtures().join("manifest.json")), path(&plan_path)]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stale"));
}

#[test]
fn fixture_root_env_resolves_relative_paths() {
    let out = Command::new(env!("CARGO_BIN_EXE_vats-plan"))
        .args(["validate", "manifest.json", "plan_nominal.json"])
        .env("VATS_FIXTURE_ROOT", fixtures())
        .current_dir(std::env::temp_dir())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn auto_plan_is_deterministic_and_stride_is_monotone() {
    let manifest = fixtures().join("manifest.json");
    let fine = vats(&["auto-plan", path(&manifest), "--stride", "1"]);
    assert_eq!(fine.status.code(), Some(0), "{}", String::from_utf8_lossy(&fine.stderr));
    let again = vats(&["auto-plan", path(&manifest), "--stride", "1"]);
    assert_eq!(fine.stdout, again.stdout);

    let coarse = vats(&["auto-plan", path(&manifest), "--stride", "4"]);
    assert_eq!(coarse.status.code(), Some(0));
    let v1 = stdout_json(&fine)["report"]["operable_volume_l"].as_f64().unwrap();
    let v4 = stdout_json(&coarse)["report"]["operable_volume_l"].as_f64().unwrap();
    assert!(v4 <= v1, "{v4} > {v1}");

    // The emitted plan validates.
    let dir = tempfile::tempdir().unwrap();
    let plan_path = dir.path().join("auto.json");
    std::fs::write(&plan_path, &fine.stdout).unwrap();
    let out = vats(&["validate", path(&manifest), path(&plan_path)]);
    assert_eq!(out.status.code(), Some(0));
    assert!(out.stderr.is_empty(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn auto_plan_with_empty_region_is_infeasible() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(fixtures().join("manifest.json")).unwrap();
    let mut manifest: SceneManifest = serde_json::from_str(&text).unwrap();
    manifest.tool_entry_region.clear();
    for m in &mut manifest.meshes {
        m.path = path(&fixtures().join(&m.path)).to_string();
    }
    let manifest_path = dir.path().join("empty.json");
    std::fs::write(&manifest_path, serde_json::to_string(&manifest).unwrap()).unwrap();

    let out = vats(&["auto-plan", path(&manifest_path)]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(stdout_json(&out)["triples"], 0);
}

#[test]
fn voxel_export_counts_match_volume() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("cells.csv");
    let out = vats(&[
        "voxel-export",
        path(&fixtures().join("manifest.json")),
        path(&fixtures().join("plan_nominal.json")),
        "--csv",
        path(&csv),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let summary = stdout_json(&out);
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x_mm,y_mm,z_mm"));
    let rows = lines.count() as u64;
    assert_eq!(summary["cell_count"].as_u64(), Some(rows));
    let spacing = summary["spacing_mm"].as_f64().unwrap();
    let volume = rows as f64 * spacing.powi(3) / 1e6;
    assert!((volume - summary["volume_l"].as_f64().unwrap()).abs() < 1e-12);
}

#[test]
fn spacing_flag_changes_resolution() {
    let out = vats(&[
        "voxel-export",
        path(&fixtures().join("manifest.json")),
        path(&fixtures().join("plan_nominal.json")),
        "--spacing",
        "7.5",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let summary = stdout_json(&out);
    assert_eq!(summary["spacing_mm"], 7.5);
    let v = summary["volume_l"].as_f64().unwrap();
    assert!((0.65..=1.37).contains(&v), "{v}");
}

#[test]
fn cli_report_matches_library_evaluation() {
    let out = vats(&[
        "validate",
        path(&fixtures().join("manifest.json")),
        path(&fixtures().join("plan_nominal.json")),
    ]);
    let scene = load_scene(&fixtures().join("manifest.json")).unwrap();
    let plan = PlanFile::load(&fixtures().join("plan_nominal.json")).unwrap();
    let eval = plan.evaluate(&scene.scene, &scene.params()).unwrap();
    assert_eq!(
        serde_json::to_string(&stdout_json(&out)).unwrap(),
        serde_json::to_string(&serde_json::to_value(&eval.report).unwrap()).unwrap()
    );
}
