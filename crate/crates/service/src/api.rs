//! HTTP JSON API for the browser planner. Lengths are millimetres, volumes litres,
//! angles degrees. Sessions live in memory and are lost on restart.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use serde_json::json;
use vats_core::constraints::{
    camera_placement_rules, check_endpoint, check_trajectory, crowding_rule, evaluate_plan_with_cells,
    manipulation_angle, tool_cones, ConstraintError, PlanParams, PlanReport, Role, RuleResult,
};
use vats_core::geometry::{CameraPose, CameraPoseSpec, Hand, TrocarTrajectory};
use vats_core::planner::{
    events_to_jsonl, metrics, Clock, PlannerError, Session, SessionState, Submission, SystemClock,
};
use vats_core::{Point3, ENGINE_VERSION};

use crate::files::LoadedScene;

#[derive(Clone)]
pub struct AppState {
    scene: Arc<LoadedScene>,
    params: PlanParams,
    clock: Arc<dyn Clock>,
    sessions: Arc<Mutex<HashMap<String, Arc<Mutex<Session>>>>>,
}

impl AppState {
    pub fn new(scene: LoadedScene, params: PlanParams) -> Self {
        Self::with_clock(scene, params, Arc::new(SystemClock))
    }

    pub fn with_clock(scene: LoadedScene, params: PlanParams, clock: Arc<dyn Clock>) -> Self {
        Self {
            scene: Arc::new(scene),
            params,
            clock,
            sessions: Arc::default(),
        }
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions
            .lock()
            .expect("session table poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("no session `{id}`")))
    }
}

#[derive(Debug)]
pub enum ApiError {
    NotFound(String),
    Conflict(String),
    Unprocessable(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, message) = match self {
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, m),
            ApiError::Conflict(m) => (StatusCode::CONFLICT, m),
            ApiError::Unprocessable(m) => (StatusCode::UNPROCESSABLE_ENTITY, m),
        };
        (status, Json(json!({ "error": message }))).into_response()
    }
}

impl From<PlannerError> for ApiError {
    fn from(e: PlannerError) -> Self {
        match e {
            PlannerError::WrongState { .. } => ApiError::Conflict(e.to_string()),
            other => ApiError::Unprocessable(other.to_string()),
        }
    }
}

impl From<ConstraintError> for ApiError {
    fn from(e: ConstraintError) -> Self {
        ApiError::Unprocessable(e.to_string())
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/scene", get(scene_geometry))
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/submissions", post(submit))
        .route("/api/sessions/{id}/endpoints", post(submit_endpoints))
        .route("/api/sessions/{id}/entries", post(submit_entries))
        .route("/api/sessions/{id}/camera", post(submit_camera))
        .route("/api/sessions/{id}/confirm", post(confirm))
        .route("/api/sessions/{id}/repeat", post(repeat))
        .route("/api/sessions/{id}/preview", post(preview))
        .route("/api/sessions/{id}/report", get(report))
        .route("/api/sessions/{id}/metrics", get(session_metrics))
        .route("/api/sessions/{id}/events", get(events))
        .with_state(state)
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "engine_version": ENGINE_VERSION }))
}

#[derive(Serialize)]
struct MeshGeometry<'a> {
    name: &'a str,
    role: Role,
    vertices: Vec<[f64; 3]>,
    triangles: &'a [[u32; 3]],
}

async fn scene_geometry(State(state): State<AppState>) -> Response {
    let scene = &state.scene.scene;
    let meshes: Vec<MeshGeometry> = scene
        .meshes()
        .iter()
        .map(|m| MeshGeometry {
            name: m.name(),
            role: m.role,
            vertices: m.mesh().vertices().iter().map(|v| [v.x, v.y, v.z]).collect(),
            triangles: m.mesh().triangles(),
        })
        .collect();
    Json(json!({
        "meshes": meshes,
        "convergent_point_mm": <[f64; 3]>::from(scene.convergent_point()),
        "tool_entry_region": scene.tool_region(),
        "camera_entry_region": scene.camera_region(),
        "params": state.params,
    }))
    .into_response()
}

fn session_view(s: &Session) -> serde_json::Value {
    let entry = |t: Option<&TrocarTrajectory>| t.map(|t| <[f64; 3]>::from(t.entry()));
    json!({
        "id": s.id(),
        "state": s.state(),
        "left_entry_mm": entry(s.left()),
        "right_entry_mm": entry(s.right()),
        "camera": s.camera().map(CameraPoseSpec::from),
        "tool_adjustments": s.tool_adjustments(),
        "camera_adjustments": s.camera_adjustments(),
    })
}

async fn create_session(State(state): State<AppState>) -> Response {
    let id = uuid::Uuid::new_v4().to_string();
    let session = Session::new(id.clone(), state.scene.scene.clone(), state.params, state.clock.clone());
    let view = session_view(&session);
    state
        .sessions
        .lock()
        .expect("session table poisoned")
        .insert(id, Arc::new(Mutex::new(session)));
    (StatusCode::CREATED, Json(view)).into_response()
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let session = state.session(&id)?;
    let view = session_view(&session.lock().expect("session poisoned"));
    Ok(Json(view).into_response())
}

fn parse<T: for<'de> serde::Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::Unprocessable(format!("malformed payload: {e}")))
}

fn apply(state: &AppState, id: &str, submission: Submission) -> Result<Response, ApiError> {
    let session = state.session(id)?;
    let mut s = session.lock().expect("session poisoned");
    match s.advance(submission) {
        Ok(a) => Ok(
            Json(json!({ "accepted": true, "state": a.state, "outcome": a.outcome, "rules": a.rules })).into_response(),
        ),
        Err(PlannerError::Rejected(rules)) => Ok(Json(json!({
            "accepted": false,
            "state": s.state(),
            "outcome": "rejected",
            "rules": rules,
        }))
        .into_response()),
        Err(e) => Err(e.into()),
    }
}

async fn submit(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    state.session(&id)?;
    let submission: Submission = parse(&body)?;
    apply(&state, &id, submission)
}

#[derive(serde::Deserialize)]
struct PointPair {
    left_mm: [f64; 3],
    right_mm: [f64; 3],
}

async fn submit_endpoints(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    state.session(&id)?;
    let p: PointPair = parse(&body)?;
    apply(
        &state,
        &id,
        Submission::Endpoints {
            left_mm: p.left_mm,
            right_mm: p.right_mm,
        },
    )
}

async fn submit_entries(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    state.session(&id)?;
    let p: PointPair = parse(&body)?;
    apply(
        &state,
        &id,
        Submission::Entries {
            left_mm: p.left_mm,
            right_mm: p.right_mm,
        },
    )
}

async fn submit_camera(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    state.session(&id)?;
    let pose: CameraPoseSpec = parse(&body)?;
    apply(&state, &id, Submission::Camera { pose })
}

async fn confirm(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    apply(&state, &id, Submission::Confirm)
}

async fn repeat(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    apply(&state, &id, Submission::Repeat)
}

/// Rule feedback for a placement without changing the session.
async fn preview(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let session = state.session(&id)?;
    let submission: Submission = parse(&body)?;
    let s = session.lock().expect("session poisoned");
    let scene = s.scene().clone();
    let params = *s.params();
    let c = scene.convergent_point();
    let rules: Vec<RuleResult> = match submission {
        Submission::Endpoints { left_mm, right_mm } => [(Hand::Left, left_mm), (Hand::Right, right_mm)]
            .into_iter()
            .map(|(hand, p)| {
                let mut r = check_endpoint(&Point3::from(p), &scene, &params);
                r.id = format!("{}.endpoint", hand.as_str());
                r
            })
            .collect(),
        Submission::Entries { left_mm, right_mm } => {
            let traj = |p: [f64; 3], hand| {
                TrocarTrajectory::new(Point3::from(p), c, hand).map_err(|e| ApiError::Unprocessable(e.to_string()))
            };
            let (left, right) = (traj(left_mm, Hand::Left)?, traj(right_mm, Hand::Right)?);
            let mut rules = check_trajectory(&left, &scene, &params)?;
            rules.extend(check_trajectory(&right, &scene, &params)?);
            rules.push(manipulation_angle(&left, &right, &params)?);
            rules
        }
        Submission::Camera { pose } => {
            let cam = CameraPose::try_from(&pose).map_err(|e| ApiError::Unprocessable(e.to_string()))?;
            let (Some(left), Some(right)) = (s.left(), s.right()) else {
                return Err(ApiError::Conflict(format!(
                    "camera preview needs confirmed tools (state {})",
                    s.state()
                )));
            };
            let mut rules = camera_placement_rules(&cam, &scene, &params)?;
            rules.push(crowding_rule(&cam, &tool_cones(left, right, &params)?, &params));
            rules
        }
        other => {
            return Err(ApiError::Unprocessable(format!(
                "`{}` has nothing to preview",
                other.kind()
            )));
        }
    };
    let pass = rules.iter().filter(|r| r.id != "manipulation_angle").all(|r| r.pass);
    Ok(Json(json!({ "pass": pass, "rules": rules })).into_response())
}

/// The final report plus overlap cell centres, evaluated by the same path as the CLI.
pub fn report_body(report: &PlanReport, cells: &[Point3<f64>]) -> serde_json::Value {
    let cells: Vec<[f64; 3]> = cells.iter().map(|p| [p.x, p.y, p.z]).collect();
    json!({ "report": report, "overlap_cells_mm": cells })
}

async fn report(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let session = state.session(&id)?;
    let s = session.lock().expect("session poisoned");
    if s.state() != SessionState::Summary {
        return Err(ApiError::Conflict(format!(
            "report is available in summary, session is in {}",
            s.state()
        )));
    }
    let (left, right, cam) = match (s.left(), s.right(), s.camera()) {
        (Some(l), Some(r), Some(c)) => (*l, *r, *c),
        _ => return Err(ApiError::Conflict("plan incomplete".into())),
    };
    let eval = evaluate_plan_with_cells(&left, &right, &cam, s.scene(), s.params())?;
    Ok(Json(report_body(&eval.report, &eval.overlap_cells)).into_response())
}

async fn session_metrics(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let session = state.session(&id)?;
    let m = metrics(&session.lock().expect("session poisoned"));
    Ok(Json(m).into_response())
}

async fn events(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let session = state.session(&id)?;
    let text = events_to_jsonl(session.lock().expect("session poisoned").events());
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], text).into_response())
}
