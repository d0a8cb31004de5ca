use std::path::PathBuf;
use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;
use vats_core::geometry::CameraPoseSpec;
use vats_core::planner::{events_from_jsonl, ManualClock, Session};
use vats_service::api::{router, AppState};
use vats_service::files::{load_scene, PlanFile};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

struct Harness {
    app: Router,
    clock: ManualClock,
    plan: PlanFile,
}

fn harness() -> Harness {
    let scene = load_scene(&fixtures().join("manifest.json")).unwrap();
    let plan = PlanFile::load(&fixtures().join("plan_nominal.json")).unwrap();
    let clock = ManualClock::new(0);
    let params = scene.params();
    let app = router(AppState::with_clock(scene, params, Arc::new(clock.clone())));
    Harness { app, clock, plan }
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = call_raw(app, method, uri, body.map(|b| b.to_string())).await;
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, value)
}

async fn call_raw(app: &Router, method: Method, uri: &str, body: Option<String>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
}

async fn create(app: &Router) -> String {
    let (status, body) = call(app, Method::POST, "/api/sessions", None).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(body["state"], "setup");
    body["id"].as_str().unwrap().to_string()
}

fn entries(plan: &PlanFile) -> Value {
    json!({ "left_mm": plan.left_entry_mm, "right_mm": plan.right_entry_mm })
}

fn near_target() -> Value {
    let c = load_scene(&fixtures().join("manifest.json"))
        .unwrap()
        .manifest
        .convergent_point_mm;
    json!({ "left_mm": [c[0] + 3.0, c[1], c[2]], "right_mm": [c[0], c[1] - 4.0, c[2]] })
}

async fn walk_to_summary(h: &Harness, id: &str) {
    let base = format!("/api/sessions/{id}");
    let (s, b) = call(&h.app, Method::POST, &format!("{base}/endpoints"), Some(near_target())).await;
    assert_eq!((s, b["state"].as_str()), (StatusCode::OK, Some("tool_entries")), "{b}");
    h.clock.advance_ms(60_000);
    let (s, b) = call(&h.app, Method::POST, &format!("{base}/entries"), Some(entries(&h.plan))).await;
    assert_eq!((s, b["state"].as_str()), (StatusCode::OK, Some("tool_confirm")), "{b}");
    let (s, _) = call(&h.app, Method::POST, &format!("{base}/confirm"), None).await;
    assert_eq!(s, StatusCode::OK);
    h.clock.advance_ms(30_000);
    let (s, b) = call(
        &h.app,
        Method::POST,
        &format!("{base}/camera"),
        Some(json!(h.plan.camera)),
    )
    .await;
    assert_eq!(
        (s, b["state"].as_str()),
        (StatusCode::OK, Some("camera_confirm")),
        "{b}"
    );
    let (s, b) = call(&h.app, Method::POST, &format!("{base}/confirm"), None).await;
    assert_eq!((s, b["state"].as_str()), (StatusCode::OK, Some("summary")), "{b}");
}

#[tokio::test]
async fn health_and_scene() {
    let h = harness();
    let (s, b) = call(&h.app, Method::GET, "/api/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(b["status"], "ok");
    let (s, b) = call(&h.app, Method::GET, "/api/scene", None).await;
    assert_eq!(s, StatusCode::OK);
    let meshes = b["meshes"].as_array().unwrap();
    assert_eq!(meshes.iter().filter(|m| m["role"] == "skin").count(), 1);
    assert!(!b["tool_entry_region"].as_array().unwrap().is_empty());
    assert_eq!(b["convergent_point_mm"].as_array().unwrap().len(), 3);
    let (_, again) = call(&h.app, Method::GET, "/api/scene", None).await;
    assert_eq!(b, again);
}

#[tokio::test]
async fn unknown_session_is_404() {
    let h = harness();
    let (s, _) = call(&h.app, Method::GET, "/api/sessions/nope", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&h.app, Method::POST, "/api/sessions/nope/confirm", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn camera_before_tools_is_409() {
    let h = harness();
    let id = create(&h.app).await;
    let base = format!("/api/sessions/{id}");
    call(&h.app, Method::POST, &format!("{base}/endpoints"), Some(near_target())).await;
    let (s, _) = call(
        &h.app,
        Method::POST,
        &format!("{base}/camera"),
        Some(json!(h.plan.camera)),
    )
    .await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = call(&h.app, Method::GET, &format!("{base}/report"), None).await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test]
async fn malformed_payload_is_422() {
    let h = harness();
    let id = create(&h.app).await;
    let (s, _) = call_raw(
        &h.app,
        Method::POST,
        &format!("/api/sessions/{id}/endpoints"),
        Some("{\"left_mm\": 3}".into()),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = call_raw(
        &h.app,
        Method::POST,
        &format!("/api/sessions/{id}/submissions"),
        Some("not json".into()),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn rule_failure_is_reported_not_applied() {
    let h = harness();
    let id = create(&h.app).await;
    let far = json!({ "left_mm": [0.0, 0.0, 0.0], "right_mm": [0.0, 0.0, 0.0] });
    let (s, b) = call(
        &h.app,
        Method::POST,
        &format!("/api/sessions/{id}/endpoints"),
        Some(far),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(b["outcome"], "rejected");
    assert_eq!(b["state"], "tool_endpoints");
    assert!(b["rules"].as_array().unwrap().iter().any(|r| r["pass"] == false));
}

#[tokio::test]
async fn placements_are_idempotent() {
    let h = harness();
    let id = create(&h.app).await;
    let uri = format!("/api/sessions/{id}/endpoints");
    let (_, first) = call(&h.app, Method::POST, &uri, Some(near_target())).await;
    let uri = format!("/api/sessions/{id}/entries");
    let (_, a) = call(&h.app, Method::POST, &uri, Some(entries(&h.plan))).await;
    let (s, b) = call(&h.app, Method::POST, &uri, Some(entries(&h.plan))).await;
    assert_eq!(first["outcome"], "accepted");
    assert_eq!(a["outcome"], "accepted");
    assert_eq!(s, StatusCode::OK);
    assert_eq!(b["outcome"], "duplicate");
    assert_eq!(a["rules"], b["rules"]);
    assert_eq!(b["state"], "tool_confirm");
}

#[tokio::test]
async fn preview_leaves_state_alone() {
    let h = harness();
    let id = create(&h.app).await;
    let base = format!("/api/sessions/{id}");
    let body = json!({ "type": "endpoints", "left_mm": [0.0, 0.0, 0.0], "right_mm": [0.0, 0.0, 0.0] });
    let (s, b) = call(&h.app, Method::POST, &format!("{base}/preview"), Some(body)).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(b["pass"], false);
    let (_, b) = call(&h.app, Method::GET, &base, None).await;
    assert_eq!(b["state"], "setup");
}

#[tokio::test]
async fn walkthrough_matches_plan_file_evaluation() {
    let h = harness();
    let id = create(&h.app).await;
    walk_to_summary(&h, &id).await;

    let (s, body) = call(&h.app, Method::GET, &format!("/api/sessions/{id}/report"), None).await;
    assert_eq!(s, StatusCode::OK);
    let scene = load_scene(&fixtures().join("manifest.json")).unwrap();
    let eval = h.plan.evaluate(&scene.scene, &scene.params()).unwrap();
    assert_eq!(
        serde_json::to_string(&body["report"]).unwrap(),
        serde_json::to_string(&serde_json::to_value(&eval.report).unwrap()).unwrap()
    );
    let cells = body["overlap_cells_mm"].as_array().unwrap();
    assert_eq!(cells.len(), eval.report.overlap_cell_count);
    let volume = cells.len() as f64 * eval.report.spacing_mm.powi(3) / 1e6;
    assert!((volume - body["report"]["operable_volume_l"].as_f64().unwrap()).abs() < 1e-12);

    let (s, m) = call(&h.app, Method::GET, &format!("/api/sessions/{id}/metrics"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert!((m["tool_task_minutes"].as_f64().unwrap() - 1.0).abs() < 1e-9, "{m}");
    assert!((m["camera_task_minutes"].as_f64().unwrap() - 0.5).abs() < 1e-9, "{m}");
}

#[tokio::test]
async fn event_log_replays() {
    let h = harness();
    let id = create(&h.app).await;
    walk_to_summary(&h, &id).await;
    let (s, bytes) = call_raw(&h.app, Method::GET, &format!("/api/sessions/{id}/events"), None).await;
    assert_eq!(s, StatusCode::OK);
    let events = events_from_jsonl(std::str::from_utf8(&bytes).unwrap()).unwrap();
    assert!(events.len() >= 6);
    let scene = load_scene(&fixtures().join("manifest.json")).unwrap();
    let replayed = Session::replay(id, scene.scene.clone(), scene.params(), &events).unwrap();
    assert_eq!(replayed.state().to_string(), "summary");
}

#[tokio::test]
async fn generic_submission_route_accepts_tagged_payloads() {
    let h = harness();
    let id = create(&h.app).await;
    let uri = format!("/api/sessions/{id}/submissions");
    let (s, b) = call(&h.app, Method::POST, &uri, Some(json!({ "type": "begin" }))).await;
    assert_eq!((s, b["state"].as_str()), (StatusCode::OK, Some("tool_endpoints")));
    let (s, _) = call(&h.app, Method::POST, &uri, Some(json!({ "type": "confirm" }))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let pose: CameraPoseSpec = h.plan.camera.clone();
    let (s, _) = call(
        &h.app,
        Method::POST,
        &uri,
        Some(json!({ "type": "camera", "pose": pose })),
    )
    .await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test]
async fn concurrent_sessions_are_independent() {
    let h = harness();
    let a = create(&h.app).await;
    let b = create(&h.app).await;
    assert_ne!(a, b);
    walk_to_summary(&h, &a).await;
    let (_, sb) = call(&h.app, Method::GET, &format!("/api/sessions/{b}"), None).await;
    assert_eq!(sb["state"], "setup");
}
