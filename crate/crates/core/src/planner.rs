//! Two-task planning sessions (instruments first, then the endoscope) and an
//! exhaustive search over candidate entry points.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use nalgebra::Point3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::constraints::{
    camera_placement_rules, check_endpoint, check_trajectory, cone_cells, crowding_rule, evaluate_plan,
    manipulation_angle, skin_cells, tool_cones, AnatomicalScene, ConstraintError, PlanParams, PlanReport, RuleResult,
};
use crate::geometry::{dof_cone_of, CameraPose, CameraPoseSpec, GeometryError, Hand, TrocarTrajectory};
use crate::voxel::{count_common_cells, LatticeCell};

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error("`{submission}` is not accepted in state {state}")]
    WrongState {
        state: SessionState,
        submission: &'static str,
    },
    #[error("placement rejected: {}", failed_ids(.0))]
    Rejected(Vec<RuleResult>),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("no feasible plan among {triples} candidate triples")]
    NoFeasiblePlan {
        triples: usize,
        failures: BTreeMap<String, usize>,
    },
    #[error("event log diverges from replay at event {seq}: {reason}")]
    ReplayDivergence { seq: u64, reason: String },
}

fn failed_ids(rules: &[RuleResult]) -> String {
    let ids: Vec<&str> = rules.iter().filter(|r| !r.pass).map(|r| r.id.as_str()).collect();
    ids.join(", ")
}

/// Millisecond time source for session timing.
pub trait Clock: Send + Sync + fmt::Debug {
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// Clock that only moves when told to. Clones share the same time.
#[derive(Debug, Default, Clone)]
pub struct ManualClock(Arc<AtomicU64>);

impl ManualClock {
    pub fn new(start_ms: u64) -> Self {
        Self(Arc::new(AtomicU64::new(start_ms)))
    }
    pub fn set_ms(&self, ms: u64) {
        self.0.store(ms, Ordering::SeqCst);
    }
    pub fn advance_ms(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Setup,
    ToolEndpoints,
    ToolEntries,
    ToolConfirm,
    CameraPlace,
    CameraConfirm,
    Summary,
}

impl SessionState {
    pub fn task(self) -> Option<Task> {
        match self {
            SessionState::ToolEndpoints | SessionState::ToolEntries | SessionState::ToolConfirm => Some(Task::Tools),
            SessionState::CameraPlace | SessionState::CameraConfirm => Some(Task::Camera),
            SessionState::Setup | SessionState::Summary => None,
        }
    }
}

impl fmt::Display for SessionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        f.write_str(s.as_ref().and_then(|v| v.as_str()).unwrap_or("?"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Tools,
    Camera,
}

/// One user action. Points are millimetres in scene coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Submission {
    Begin,
    Endpoints { left_mm: [f64; 3], right_mm: [f64; 3] },
    Entries { left_mm: [f64; 3], right_mm: [f64; 3] },
    Camera { pose: CameraPoseSpec },
    Confirm,
    Repeat,
}

impl Submission {
    pub fn kind(&self) -> &'static str {
        match self {
            Submission::Begin => "begin",
            Submission::Endpoints { .. } => "endpoints",
            Submission::Entries { .. } => "entries",
            Submission::Camera { .. } => "camera",
            Submission::Confirm => "confirm",
            Submission::Repeat => "repeat",
        }
    }

    fn is_placement(&self) -> bool {
        matches!(
            self,
            Submission::Endpoints { .. } | Submission::Entries { .. } | Submission::Camera { .. }
        )
    }

    /// SHA-256 of the canonical JSON encoding, hex.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("submission serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Accepted,
    Rejected,
    /// Same placement resubmitted in the state it led to; nothing changes.
    Duplicate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub seq: u64,
    pub timestamp_ms: u64,
    pub state_from: SessionState,
    pub state_to: SessionState,
    pub kind: String,
    pub outcome: Outcome,
    pub payload_digest: String,
    pub payload: Submission,
}

/// Result of one submission, with the rule feedback the user sees.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Advance {
    pub state: SessionState,
    pub outcome: Outcome,
    pub rules: Vec<RuleResult>,
}

#[derive(Debug, Clone)]
pub struct Session {
    id: String,
    scene: Arc<AnatomicalScene>,
    params: PlanParams,
    clock: Arc<dyn Clock>,
    state: SessionState,
    left: Option<TrocarTrajectory>,
    right: Option<TrocarTrajectory>,
    camera: Option<CameraPose>,
    report: Option<PlanReport>,
    events: Vec<SessionEvent>,
    tool_adjustments: u32,
    camera_adjustments: u32,
    last_accepted: Option<(String, SessionState, Vec<RuleResult>)>,
}

impl Session {
    pub fn new(id: impl Into<String>, scene: Arc<AnatomicalScene>, params: PlanParams, clock: Arc<dyn Clock>) -> Self {
        Self {
            id: id.into(),
            scene,
            params,
            clock,
            state: SessionState::Setup,
            left: None,
            right: None,
            camera: None,
            report: None,
            events: Vec::new(),
            tool_adjustments: 0,
            camera_adjustments: 0,
            last_accepted: None,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }
    pub fn scene(&self) -> &Arc<AnatomicalScene> {
        &self.scene
    }
    pub fn params(&self) -> &PlanParams {
        &self.params
    }
    pub fn state(&self) -> SessionState {
        self.state
    }
    pub fn left(&self) -> Option<&TrocarTrajectory> {
        self.left.as_ref()
    }
    pub fn right(&self) -> Option<&TrocarTrajectory> {
        self.right.as_ref()
    }
    pub fn camera(&self) -> Option<&CameraPose> {
        self.camera.as_ref()
    }
    pub fn report(&self) -> Option<&PlanReport> {
        self.report.as_ref()
    }
    pub fn events(&self) -> &[SessionEvent] {
        &self.events
    }
    pub fn tool_adjustments(&self) -> u32 {
        self.tool_adjustments
    }
    pub fn camera_adjustments(&self) -> u32 {
        self.camera_adjustments
    }

    /// Applies one submission. Every call is logged; on error the state is unchanged.
    pub fn advance(&mut self, submission: Submission) -> Result<Advance, PlannerError> {
        let now = self.clock.now_ms();
        if self.state == SessionState::Setup && matches!(submission, Submission::Endpoints { .. }) {
            // Placing endpoints on a fresh session starts the first task.
            self.advance_at(Submission::Begin, now)?;
        }
        self.advance_at(submission, now)
    }

    fn advance_at(&mut self, submission: Submission, now: u64) -> Result<Advance, PlannerError> {
        let digest = submission.digest();
        let from = self.state;
        if submission.is_placement() {
            if let Some((d, state, rules)) = &self.last_accepted {
                if *d == digest && *state == from {
                    let rules = rules.clone();
                    self.log(now, from, from, &submission, digest, Outcome::Duplicate);
                    return Ok(Advance {
                        state: from,
                        outcome: Outcome::Duplicate,
                        rules,
                    });
                }
            }
        }
        match self.apply(&submission) {
            Ok(rules) => {
                let to = self.state;
                self.last_accepted = Some((digest.clone(), to, rules.clone()));
                self.log(now, from, to, &submission, digest, Outcome::Accepted);
                Ok(Advance {
                    state: to,
                    outcome: Outcome::Accepted,
                    rules,
                })
            }
            Err(e) => {
                self.log(now, from, from, &submission, digest, Outcome::Rejected);
                Err(e)
            }
        }
    }

    fn log(
        &mut self,
        now: u64,
        from: SessionState,
        to: SessionState,
        sub: &Submission,
        digest: String,
        outcome: Outcome,
    ) {
        self.events.push(SessionEvent {
            seq: self.events.len() as u64,
            timestamp_ms: now,
            state_from: from,
            state_to: to,
            kind: sub.kind().to_string(),
            outcome,
            payload_digest: digest,
            payload: sub.clone(),
        });
    }

    /// Validates and applies; mutates only on success.
    fn apply(&mut self, submission: &Submission) -> Result<Vec<RuleResult>, PlannerError> {
        use SessionState as S;
        let wrong = || PlannerError::WrongState {
            state: self.state,
            submission: submission.kind(),
        };
        let c = self.scene.convergent_point();
        match (self.state, submission) {
            (S::Setup, Submission::Begin) => {
                self.state = S::ToolEndpoints;
                Ok(Vec::new())
            }
            (S::ToolEndpoints, Submission::Endpoints { left_mm, right_mm }) => {
                let mut rules = Vec::with_capacity(2);
                for (hand, p) in [(Hand::Left, left_mm), (Hand::Right, right_mm)] {
                    let mut r = check_endpoint(&Point3::from(*p), &self.scene, &self.params);
                    r.id = format!("{}.endpoint", hand.as_str());
                    rules.push(r);
                }
                require_all(&rules)?;
                self.state = S::ToolEntries;
                Ok(rules)
            }
            (S::ToolEntries, Submission::Entries { left_mm, right_mm }) => {
                // Endpoints snapped to the convergent point in the previous step.
                let left = TrocarTrajectory::new(Point3::from(*left_mm), c, Hand::Left)?;
                let right = TrocarTrajectory::new(Point3::from(*right_mm), c, Hand::Right)?;
                let mut rules = check_trajectory(&left, &self.scene, &self.params)?;
                rules.extend(check_trajectory(&right, &self.scene, &self.params)?);
                require_all(&rules)?;
                rules.push(manipulation_angle(&left, &right, &self.params)?);
                self.left = Some(left);
                self.right = Some(right);
                self.state = S::ToolConfirm;
                Ok(rules)
            }
            (S::ToolConfirm, Submission::Confirm) => {
                self.state = S::CameraPlace;
                Ok(Vec::new())
            }
            (S::ToolConfirm, Submission::Repeat) => {
                self.left = None;
                self.right = None;
                self.tool_adjustments += 1;
                self.state = S::ToolEndpoints;
                Ok(Vec::new())
            }
            (S::CameraPlace, Submission::Camera { pose }) => {
                let cam = CameraPose::try_from(pose)?;
                let (left, right) = self.tools().ok_or_else(wrong)?;
                let cones = tool_cones(&left, &right, &self.params)?;
                let mut rules = camera_placement_rules(&cam, &self.scene, &self.params)?;
                rules.push(crowding_rule(&cam, &cones, &self.params));
                require_all(&rules)?;
                self.camera = Some(cam);
                self.state = S::CameraConfirm;
                Ok(rules)
            }
            (S::CameraConfirm, Submission::Confirm) => {
                let (left, right) = self.tools().ok_or_else(wrong)?;
                let cam = self.camera.ok_or_else(wrong)?;
                let report = evaluate_plan(&left, &right, &cam, &self.scene, &self.params)?;
                let rules = report.rules.clone();
                self.report = Some(report);
                self.state = S::Summary;
                Ok(rules)
            }
            (S::CameraConfirm, Submission::Repeat) => {
                self.camera = None;
                self.camera_adjustments += 1;
                self.state = S::CameraPlace;
                Ok(Vec::new())
            }
            _ => Err(wrong()),
        }
    }

    fn tools(&self) -> Option<(TrocarTrajectory, TrocarTrajectory)> {
        Some((self.left?, self.right?))
    }

    /// Rebuilds a session by re-applying every logged payload at its logged time, and
    /// checks that each step reproduces the logged transition.
    pub fn replay(
        id: impl Into<String>,
        scene: Arc<AnatomicalScene>,
        params: PlanParams,
        events: &[SessionEvent],
    ) -> Result<Session, PlannerError> {
        let clock = ManualClock::new(0);
        let mut session = Session::new(id, scene, params, Arc::new(clock.clone()));
        for e in events {
            let diverged = |reason: String| PlannerError::ReplayDivergence { seq: e.seq, reason };
            if e.payload.digest() != e.payload_digest {
                return Err(diverged("payload digest mismatch".into()));
            }
            if session.state != e.state_from {
                return Err(diverged(format!(
                    "state is {}, log says {}",
                    session.state, e.state_from
                )));
            }
            let _ = session.advance_at(e.payload.clone(), e.timestamp_ms);
            let got = session.events.last().expect("advance logs");
            if got.state_to != e.state_to || got.outcome != e.outcome {
                return Err(diverged(format!(
                    "replay gave {:?} to {}, log says {:?} to {}",
                    got.outcome, got.state_to, e.outcome, e.state_to
                )));
            }
        }
        if let Some(last) = events.last() {
            clock.set_ms(last.timestamp_ms);
        }
        Ok(session)
    }
}

fn require_all(rules: &[RuleResult]) -> Result<(), PlannerError> {
    if rules.iter().all(|r| r.pass) {
        Ok(())
    } else {
        Err(PlannerError::Rejected(rules.to_vec()))
    }
}

/// One JSON object per line.
pub fn events_to_jsonl(events: &[SessionEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("event serializes"));
        out.push('\n');
    }
    out
}

pub fn events_from_jsonl(text: &str) -> Result<Vec<SessionEvent>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub tool_task_minutes: f64,
    pub camera_task_minutes: f64,
    pub tool_adjustments: u32,
    pub camera_adjustments: u32,
    pub left_distance_cm: Option<f64>,
    pub right_distance_cm: Option<f64>,
    pub manipulation_angle_deg: Option<f64>,
    pub operable_volume_l: Option<f64>,
}

/// Time per task and adjustment counts from the event log; final placements from the
/// accepted payloads.
pub fn metrics(session: &Session) -> SessionMetrics {
    let (tool_ms, camera_ms) = task_durations_ms(&session.events);
    let repeats = |task: Task| {
        session
            .events
            .iter()
            .filter(|e| e.outcome == Outcome::Accepted && e.kind == "repeat" && e.state_from.task() == Some(task))
            .count() as u32
    };
    let angle = session
        .tools()
        .and_then(|(l, r)| manipulation_angle(&l, &r, &session.params).ok())
        .and_then(|r| r.value);
    SessionMetrics {
        tool_task_minutes: tool_ms as f64 / 60_000.0,
        camera_task_minutes: camera_ms as f64 / 60_000.0,
        tool_adjustments: repeats(Task::Tools),
        camera_adjustments: repeats(Task::Camera),
        left_distance_cm: session.left.map(|t| t.length() / 10.0),
        right_distance_cm: session.right.map(|t| t.length() / 10.0),
        manipulation_angle_deg: angle,
        operable_volume_l: session.report.as_ref().map(|r| r.operable_volume_l),
    }
}

/// Milliseconds spent in each task's states, up to the last logged event.
pub fn task_durations_ms(events: &[SessionEvent]) -> (u64, u64) {
    let mut totals = (0u64, 0u64);
    let mut current: Option<(SessionState, u64)> = None;
    let mut add = |state: SessionState, ms: u64| match state.task() {
        Some(Task::Tools) => totals.0 += ms,
        Some(Task::Camera) => totals.1 += ms,
        None => {}
    };
    for e in events.iter().filter(|e| e.outcome == Outcome::Accepted) {
        if let Some((state, since)) = current {
            add(state, e.timestamp_ms.saturating_sub(since));
        }
        current = Some((e.state_to, e.timestamp_ms));
    }
    if let (Some((state, since)), Some(last)) = (current, events.last()) {
        add(state, last.timestamp_ms.saturating_sub(since));
    }
    totals
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Candidate {
    pub triangle: usize,
    pub point: Point3<f64>,
}

/// Entry-point candidates: centroids of the region triangles, optionally thinned to
/// every `stride`-th triangle in index order.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub tool: Vec<Candidate>,
    pub camera: Vec<Candidate>,
    pub stride: usize,
}

impl CandidateSet {
    pub fn from_scene(scene: &AnatomicalScene, stride: usize) -> Self {
        let stride = stride.max(1);
        let skin = scene.skin().mesh();
        let pick = |region: &std::collections::BTreeSet<usize>| {
            region
                .iter()
                .step_by(stride)
                .map(|&t| Candidate {
                    triangle: t,
                    point: skin.centroid(t),
                })
                .collect()
        };
        Self {
            tool: pick(scene.tool_region()),
            camera: pick(scene.camera_region()),
            stride,
        }
    }

    /// Number of (unordered tool pair, camera entry, roll) combinations searched.
    pub fn triple_count(&self) -> usize {
        let n = self.tool.len();
        n * n.saturating_sub(1) / 2 * self.camera.len() * CAMERA_ROLLS_DEG.len()
    }
}

pub const CAMERA_ROLLS_DEG: [f64; 4] = [0.0, 90.0, 180.0, 270.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AutoPlanOptions {
    /// Treat the manipulation-angle band as a hard constraint.
    pub require_in_band: bool,
}

impl Default for AutoPlanOptions {
    fn default() -> Self {
        Self { require_in_band: true }
    }
}

/// Indices into a [`CandidateSet`]: left and right tool entries, camera entry, roll.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct TripleIndex {
    pub left: usize,
    pub right: usize,
    pub camera: usize,
    pub roll: usize,
}

#[derive(Debug, Clone)]
pub struct AutoPlan {
    pub left: TrocarTrajectory,
    pub right: TrocarTrajectory,
    pub camera: CameraPose,
    pub report: PlanReport,
    pub choice: TripleIndex,
    pub triples: usize,
    pub feasible: usize,
    pub failures: BTreeMap<String, usize>,
}

struct ToolInfo {
    traj: Option<TrocarTrajectory>,
    /// Failed rule suffixes (`length`, `region`, ...).
    fails: Vec<String>,
    cells: Vec<LatticeCell>,
}

struct CameraInfo {
    pose: Option<CameraPose>,
    fails: Vec<String>,
    cells: Vec<LatticeCell>,
}

/// Camera pose the planner uses for a candidate entry and roll.
pub fn candidate_camera(
    scene: &AnatomicalScene,
    entry: &Point3<f64>,
    roll_deg: f64,
    params: &PlanParams,
) -> Result<CameraPose, GeometryError> {
    CameraPose::aimed_at(
        *entry,
        scene.convergent_point(),
        params.camera_depth_mm,
        params.tilt_deg,
        roll_deg,
        params.tube_length_mm,
    )?
    .with_fov(params.fov_deg)
}

/// Rule-feasible triple with the largest operable volume. Volumes are compared as
/// cell counts; ties go to the lexicographically smallest [`TripleIndex`].
pub fn auto_plan(
    scene: &AnatomicalScene,
    candidates: &CandidateSet,
    params: &PlanParams,
    options: AutoPlanOptions,
) -> Result<AutoPlan, PlannerError> {
    let c = scene.convergent_point();
    let clip: Option<Vec<LatticeCell>> = if params.clip_to_skin {
        Some(skin_cells(scene, params)?)
    } else {
        None
    };

    let tools: Vec<ToolInfo> = candidates
        .tool
        .par_iter()
        .map(|cand| -> Result<ToolInfo, PlannerError> {
            let Ok(traj) = TrocarTrajectory::new(cand.point, c, Hand::Left) else {
                return Ok(ToolInfo {
                    traj: None,
                    fails: vec!["length".into()],
                    cells: Vec::new(),
                });
            };
            let fails: Vec<String> = check_trajectory(&traj, scene, params)?
                .into_iter()
                .filter(|r| !r.pass)
                .map(|r| r.id.trim_start_matches("left.").to_string())
                .collect();
            let cells = if fails.is_empty() {
                let cone = dof_cone_of(&traj, params.half_angle_deg, params.reach_mm)?;
                cone_cells(&cone, scene, params)?
            } else {
                Vec::new()
            };
            Ok(ToolInfo {
                traj: Some(traj),
                fails,
                cells,
            })
        })
        .collect::<Result<_, _>>()?;

    let poses: Vec<(usize, usize)> = (0..candidates.camera.len())
        .flat_map(|k| (0..CAMERA_ROLLS_DEG.len()).map(move |r| (k, r)))
        .collect();
    let cameras: Vec<CameraInfo> = poses
        .par_iter()
        .map(|&(k, r)| -> Result<CameraInfo, PlannerError> {
            let Ok(pose) = candidate_camera(scene, &candidates.camera[k].point, CAMERA_ROLLS_DEG[r], params) else {
                return Ok(CameraInfo {
                    pose: None,
                    fails: vec!["camera.pose".into()],
                    cells: Vec::new(),
                });
            };
            let fails: Vec<String> = match camera_placement_rules(&pose, scene, params) {
                Ok(rules) => rules.into_iter().filter(|r| !r.pass).map(|r| r.id).collect(),
                Err(ConstraintError::TubeMissesSkin) => vec!["camera.region".into()],
                Err(e) => return Err(e.into()),
            };
            let cells = if fails.is_empty() {
                cone_cells(&pose.fov_cone(params.fov_length_mm)?, scene, params)?
            } else {
                Vec::new()
            };
            Ok(CameraInfo {
                pose: Some(pose),
                fails,
                cells,
            })
        })
        .collect::<Result<_, _>>()?;

    // crowded[camera pose][tool]: the scope tube enters that tool's cone.
    let crowded: Vec<Vec<bool>> = cameras
        .par_iter()
        .map(|cam| {
            tools
                .iter()
                .map(|t| match (cam.pose, t.traj) {
                    (Some(pose), Some(traj)) => dof_cone_of(&traj, params.half_angle_deg, params.reach_mm)
                        .map(|cone| !crowding_rule(&pose, &[cone], params).pass)
                        .unwrap_or(true),
                    _ => false,
                })
                .collect()
        })
        .collect();

    let n = tools.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    struct PairResult {
        failures: BTreeMap<String, usize>,
        feasible: usize,
        best: Option<(usize, usize)>,
    }
    let per_pair: Vec<PairResult> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let (ti, tj) = (&tools[i], &tools[j]);
            let mut failures: BTreeMap<String, usize> = BTreeMap::new();
            let mut tool_fails: Vec<String> = ti
                .fails
                .iter()
                .map(|f| format!("left.{f}"))
                .chain(tj.fails.iter().map(|f| format!("right.{f}")))
                .collect();
            if options.require_in_band {
                let in_band = match (ti.traj, tj.traj) {
                    (Some(l), Some(r)) => manipulation_angle(&l, &r, params).map(|a| a.pass).unwrap_or(false),
                    _ => true,
                };
                if !in_band {
                    tool_fails.push("manipulation_angle".into());
                }
            }
            let pair_cells = if tool_fails.is_empty() {
                let mut cells = intersect_cells(&ti.cells, &tj.cells);
                if let Some(clip) = &clip {
                    cells = intersect_cells(&cells, clip);
                }
                cells
            } else {
                Vec::new()
            };
            let mut feasible = 0;
            let mut best: Option<(usize, usize)> = None;
            for (p, cam) in cameras.iter().enumerate() {
                let crowding = cam.pose.is_some() && (crowded[p][i] || crowded[p][j]);
                if tool_fails.is_empty() && cam.fails.is_empty() && !crowding {
                    feasible += 1;
                    let count = count_common_cells(&[&pair_cells, &cam.cells]);
                    if best.is_none_or(|(bc, _)| count > bc) {
                        best = Some((count, p));
                    }
                    continue;
                }
                for f in tool_fails.iter().chain(cam.fails.iter()) {
                    *failures.entry(f.clone()).or_default() += 1;
                }
                if crowding {
                    *failures.entry("camera.crowding".into()).or_default() += 1;
                }
            }
            PairResult {
                failures,
                feasible,
                best,
            }
        })
        .collect();

    let mut failures: BTreeMap<String, usize> = BTreeMap::new();
    let mut feasible = 0;
    let mut best: Option<(usize, TripleIndex)> = None;
    for (&(i, j), r) in pairs.iter().zip(&per_pair) {
        for (k, v) in &r.failures {
            *failures.entry(k.clone()).or_default() += v;
        }
        feasible += r.feasible;
        if let Some((count, p)) = r.best {
            let (camera, roll) = poses[p];
            let idx = TripleIndex {
                left: i,
                right: j,
                camera,
                roll,
            };
            // Pairs are visited in lexicographic order, so strict improvement keeps
            // the smallest index among equal volumes.
            if best.is_none_or(|(bc, _)| count > bc) {
                best = Some((count, idx));
            }
        }
    }
    let triples = pairs.len() * poses.len();
    let Some((_, choice)) = best else {
        return Err(PlannerError::NoFeasiblePlan { triples, failures });
    };

    let left = TrocarTrajectory::new(candidates.tool[choice.left].point, c, Hand::Left)?;
    let right = TrocarTrajectory::new(candidates.tool[choice.right].point, c, Hand::Right)?;
    let camera = cameras[choice.camera * CAMERA_ROLLS_DEG.len() + choice.roll]
        .pose
        .expect("feasible camera has a pose");
    let report = evaluate_plan(&left, &right, &camera, scene, params)?;
    Ok(AutoPlan {
        left,
        right,
        camera,
        report,
        choice,
        triples,
        feasible,
        failures,
    })
}

/// Cells present in both lists; both sorted by (z, y, x).
fn intersect_cells(a: &[LatticeCell], b: &[LatticeCell]) -> Vec<LatticeCell> {
    let key = |c: &LatticeCell| (c[2], c[1], c[0]);
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < a.len() && j < b.len() {
        match key(&a[i]).cmp(&key(&b[j])) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}
