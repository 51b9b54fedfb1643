//! Live-play session server.
//!
//! A browser client plays the human; the server owns the grid state and
//! answers every human action with the configured assistant's action
//! (evaluation mode). Sessions are plain [`Session`] values behind a
//! per-session lock, so the same code drives offline replays and HTTP play.
//!
//! Endpoints:
//!
//! * `POST /sessions` with a [`CreateRequest`] body
//! * `POST /sessions/:id/step` with `{"human_action": int}`
//! * `GET /sessions/:id`
//! * `DELETE /sessions/:id`
//!
//! Errors are `{"error": code, "message": text}` with codes
//! `checkpoint_not_found` and `session_not_found` (404), `invalid_request`
//! and `invalid_action` (400), `episode_done` (409).

use std::collections::HashMap;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::{Path as UrlPath, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::{Any, CorsLayer};

use crate::agent::{argmax, per_action_rewards, AgentCheckpoint, AssistantCritic, RewardMode};
use crate::baselines::{ave_action, random_action, AveConfig, OracleLookahead};
use crate::contrastive::ReprParams;
use crate::error::Error;
use crate::features::Featurizer;
use crate::grid::{grid_step, GridConfig, GridFeaturizer, GridState, DEFAULT_HORIZON, NOOP, NUM_HUMAN_ACTIONS};
use crate::harness::{AssistantKind, HumanSpec};

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    /// Root that checkpoint references are resolved against.
    pub checkpoint_dir: PathBuf,
    pub idle_timeout: Duration,
    /// Allowed browser origin; `None` allows any.
    pub cors_origin: Option<String>,
    pub ave: AveConfig,
    /// Planner used only to build the exact-empowerment assistant.
    pub human: HumanSpec,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            checkpoint_dir: PathBuf::from("."),
            idle_timeout: Duration::from_secs(30 * 60),
            cors_origin: None,
            ave: AveConfig::default(),
            human: HumanSpec::default(),
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_request", message)
    }

    fn no_session(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "session_not_found", format!("no session {id}"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.code, "message": self.message}))).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Precondition(_) => Self::bad_request(e.to_string()),
            Error::Usage(_) => Self::new(StatusCode::CONFLICT, "episode_done", e.to_string()),
            Error::NotFound(_) => Self::new(StatusCode::NOT_FOUND, "checkpoint_not_found", e.to_string()),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
        }
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

fn default_size() -> usize {
    5
}

fn default_horizon() -> usize {
    DEFAULT_HORIZON
}

/// Session parameters. `seed` fixes both the goal (as the layout seed) and
/// the initial placement (as the episode seed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CreateRequest {
    pub seed: u64,
    pub num_blocks: usize,
    pub assistant: AssistantKind,
    #[serde(default)]
    pub checkpoint: Option<String>,
    #[serde(default = "default_size")]
    pub width: usize,
    #[serde(default = "default_size")]
    pub height: usize,
    #[serde(default)]
    pub goal_cell: Option<usize>,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
}

impl CreateRequest {
    pub fn new(seed: u64, num_blocks: usize, assistant: AssistantKind) -> Self {
        Self {
            seed,
            num_blocks,
            assistant,
            checkpoint: None,
            width: 5,
            height: 5,
            goal_cell: None,
            horizon: DEFAULT_HORIZON,
        }
    }

    pub fn grid_config(&self) -> crate::Result<GridConfig> {
        let c = match self.goal_cell {
            Some(g) => GridConfig::new(self.width, self.height, self.num_blocks, g, self.seed)?,
            None => GridConfig::from_seed(self.width, self.height, self.num_blocks, self.seed)?,
        };
        c.with_horizon(self.horizon)
    }
}

/// Loaded encoders and critic, shared read-only across sessions.
#[derive(Debug)]
pub struct Artifacts {
    pub repr: ReprParams,
    pub critic: AssistantCritic,
    pub reward_mode: RewardMode,
}

impl Artifacts {
    pub fn load(path: &Path) -> crate::Result<Self> {
        let (repr, critic, reward_mode) = AgentCheckpoint::load(path)?;
        Ok(Self {
            repr,
            critic,
            reward_mode,
        })
    }
}

enum Controller {
    Idle,
    Random,
    Ave(AveConfig),
    Oracle(Box<OracleLookahead>),
    Learned(Arc<Artifacts>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub human_action: usize,
    pub robot_action: usize,
}

/// Client-facing grid state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireState {
    pub width: usize,
    pub height: usize,
    pub human: usize,
    pub goal: usize,
    pub blocks: Vec<usize>,
    pub steps: usize,
    pub done: bool,
    pub last_robot_action: Option<usize>,
    pub diagnostics: Value,
}

pub struct Session {
    pub assistant: AssistantKind,
    pub config: GridConfig,
    pub initial: GridState,
    pub state: GridState,
    pub log: Vec<LogEntry>,
    pub created: Instant,
    pub last_active: Instant,
    last_robot_action: Option<usize>,
    diagnostics: Value,
    feat: GridFeaturizer,
    controller: Controller,
    rng: ChaCha8Rng,
}

impl Session {
    /// A session without HTTP plumbing; `artifacts` is required for the
    /// learned assistants and ignored otherwise.
    pub fn new(
        req: &CreateRequest,
        artifacts: Option<Arc<Artifacts>>,
        ave: AveConfig,
        human: &HumanSpec,
    ) -> crate::Result<Self> {
        let config = req.grid_config()?;
        let feat = GridFeaturizer::new(config.clone());
        let controller = match req.assistant {
            AssistantKind::None => Controller::Idle,
            AssistantKind::Random => Controller::Random,
            AssistantKind::Ave => {
                ave.validate()?;
                Controller::Ave(ave)
            }
            AssistantKind::OracleEmpowerment => {
                Controller::Oracle(Box::new(OracleLookahead::new(&config, &human.build()?, 0.9)?))
            }
            _ => {
                let a = artifacts.ok_or_else(|| Error::NotFound("learned assistants need a checkpoint".into()))?;
                if a.critic.q_net.input_dim() != feat.dim(false, false)
                    || a.critic.num_actions() != config.num_robot_actions()
                {
                    return Err(Error::Config("checkpoint does not match this grid".into()));
                }
                Controller::Learned(a)
            }
        };
        let initial = config.initial_state(req.seed);
        let now = Instant::now();
        Ok(Self {
            assistant: req.assistant,
            state: initial.clone(),
            initial,
            config,
            log: Vec::new(),
            created: now,
            last_active: now,
            last_robot_action: None,
            diagnostics: json!({"assistant": req.assistant.tag()}),
            feat,
            controller,
            rng: ChaCha8Rng::seed_from_u64(req.seed ^ 0x5E55_1011),
        })
    }

    fn robot_action(&mut self) -> crate::Result<(usize, Value)> {
        let s = &self.state;
        let mut diag = json!({"assistant": self.assistant.tag()});
        let a = match &self.controller {
            Controller::Idle => NOOP,
            Controller::Random => random_action(&self.config, &mut self.rng),
            Controller::Ave(c) => ave_action(s, &self.config, c, &mut self.rng)?,
            Controller::Oracle(o) => {
                let scores = o.scores(s)?;
                diag["lookahead_empowerment"] = json!(scores);
                argmax(&scores)
            }
            Controller::Learned(art) => {
                let q = art.critic.q_row(&self.feat.active(s, None, None));
                // the live human's policy is unknown; uniform weights over its actions
                let uniform = [1.0 / NUM_HUMAN_ACTIONS as f64; NUM_HUMAN_ACTIONS];
                let rewards = per_action_rewards(&art.repr, &self.feat, &self.config, s, &uniform, art.reward_mode)?;
                diag["q_values"] = json!(q);
                diag["per_action_reward"] = json!(rewards);
                argmax(&q)
            }
        };
        Ok((a, diag))
    }

    /// Applies one human action with the assistant's response. Leaves the
    /// state untouched on error.
    pub fn step(&mut self, human_action: usize) -> crate::Result<usize> {
        if self.state.done {
            return Err(Error::Usage("episode is done".into()));
        }
        if human_action >= NUM_HUMAN_ACTIONS {
            return Err(Error::Config(format!(
                "human action {human_action} out of range 0..{NUM_HUMAN_ACTIONS}"
            )));
        }
        let (a_r, diag) = self.robot_action()?;
        self.state = grid_step(&self.state, human_action, a_r, &self.config)?;
        self.log.push(LogEntry {
            human_action,
            robot_action: a_r,
        });
        self.last_robot_action = Some(a_r);
        self.diagnostics = diag;
        self.last_active = Instant::now();
        Ok(a_r)
    }

    /// The state reached by replaying the step log from the initial state.
    pub fn replay(&self) -> crate::Result<GridState> {
        self.log
            .iter()
            .try_fold(self.initial.clone(), |s, e| grid_step(&s, e.human_action, e.robot_action, &self.config))
    }

    pub fn wire(&self) -> WireState {
        WireState {
            width: self.config.width,
            height: self.config.height,
            human: self.state.human_cell,
            goal: self.config.goal_cell,
            blocks: self.state.block_cells.clone(),
            steps: self.state.steps_elapsed,
            done: self.state.done,
            last_robot_action: self.last_robot_action,
            diagnostics: self.diagnostics.clone(),
        }
    }
}

pub struct AppState {
    pub config: ServiceConfig,
    sessions: Mutex<HashMap<String, Arc<tokio::sync::Mutex<Session>>>>,
    artifacts: Mutex<HashMap<PathBuf, Arc<Artifacts>>>,
    ids: Mutex<ChaCha8Rng>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Arc<Self> {
        let seed = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos() as u64)
            .unwrap_or(0);
        Arc::new(Self {
            config,
            sessions: Mutex::new(HashMap::new()),
            artifacts: Mutex::new(HashMap::new()),
            ids: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        })
    }

    pub fn num_sessions(&self) -> usize {
        self.sessions.lock().expect("session map lock").len()
    }

    fn new_id(&self) -> String {
        let mut rng = self.ids.lock().expect("id lock");
        format!("{:016x}{:016x}", rng.next_u64(), rng.next_u64())
    }

    fn session(&self, id: &str) -> ApiResult<Arc<tokio::sync::Mutex<Session>>> {
        self.sessions
            .lock()
            .expect("session map lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::no_session(id))
    }

    /// Resolves a checkpoint reference under the checkpoint root. Absolute
    /// paths and `..` components are rejected.
    fn load_artifacts(&self, reference: &str) -> ApiResult<Arc<Artifacts>> {
        let rel = Path::new(reference);
        if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
            return Err(ApiError::bad_request("checkpoint must be a relative path without '..'"));
        }
        let path = self.config.checkpoint_dir.join(rel);
        if let Some(a) = self.artifacts.lock().expect("artifact lock").get(&path) {
            return Ok(a.clone());
        }
        if !path.is_file() {
            return Err(ApiError::new(
                StatusCode::NOT_FOUND,
                "checkpoint_not_found",
                format!("no checkpoint {reference}"),
            ));
        }
        let a = Arc::new(Artifacts::load(&path).map_err(|e| ApiError::bad_request(format!("unreadable checkpoint: {e}")))?);
        self.artifacts.lock().expect("artifact lock").insert(path, a.clone());
        Ok(a)
    }

    /// Drops sessions idle for longer than the timeout; returns how many.
    pub fn reap_expired(&self, now: Instant) -> usize {
        let mut map = self.sessions.lock().expect("session map lock");
        let before = map.len();
        let timeout = self.config.idle_timeout;
        // a session busy with a step is in use, so it is kept
        map.retain(|_, s| match s.try_lock() {
            Ok(s) => now.saturating_duration_since(s.last_active) <= timeout,
            Err(_) => true,
        });
        before - map.len()
    }
}

#[derive(Serialize, Deserialize)]
pub struct CreateResponse {
    pub session_id: String,
    pub state: WireState,
}

#[derive(Serialize, Deserialize)]
pub struct StepRequest {
    pub human_action: i64,
}

#[derive(Serialize, Deserialize)]
pub struct StepResponse {
    pub state: WireState,
    pub robot_action: usize,
    pub done: bool,
}

#[derive(Serialize, Deserialize)]
pub struct SessionResponse {
    pub session_id: String,
    pub assistant: AssistantKind,
    pub state: WireState,
    pub step_log: Vec<LogEntry>,
}

async fn create(State(app): State<Arc<AppState>>, body: axum::body::Bytes) -> ApiResult<(StatusCode, Json<CreateResponse>)> {
    let req: CreateRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("malformed request: {e}")))?;
    let artifacts = match (&req.checkpoint, req.assistant.is_learned()) {
        (Some(r), true) => Some(app.load_artifacts(r)?),
        (None, true) => {
            return Err(ApiError::new(
                StatusCode::NOT_FOUND,
                "checkpoint_not_found",
                "learned assistants need a checkpoint",
            ))
        }
        _ => None,
    };
    let session = Session::new(&req, artifacts, app.config.ave, &app.config.human)?;
    let id = app.new_id();
    let state = session.wire();
    app.sessions
        .lock()
        .expect("session map lock")
        .insert(id.clone(), Arc::new(tokio::sync::Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(CreateResponse { session_id: id, state })))
}

async fn step(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: axum::body::Bytes,
) -> ApiResult<Json<StepResponse>> {
    let session = app.session(&id)?;
    let req: StepRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("malformed request: {e}")))?;
    let mut s = session.lock().await;
    if s.state.done {
        return Err(ApiError::new(StatusCode::CONFLICT, "episode_done", "episode is done"));
    }
    let a_h = usize::try_from(req.human_action)
        .ok()
        .filter(|&a| a < NUM_HUMAN_ACTIONS)
        .ok_or_else(|| {
            ApiError::new(
                StatusCode::BAD_REQUEST,
                "invalid_action",
                format!("human_action must lie in 0..{NUM_HUMAN_ACTIONS}"),
            )
        })?;
    let robot_action = s.step(a_h)?;
    Ok(Json(StepResponse {
        state: s.wire(),
        robot_action,
        done: s.state.done,
    }))
}

async fn show(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionResponse>> {
    let session = app.session(&id)?;
    let mut s = session.lock().await;
    s.last_active = Instant::now();
    Ok(Json(SessionResponse {
        session_id: id,
        assistant: s.assistant,
        state: s.wire(),
        step_log: s.log.clone(),
    }))
}

async fn remove(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<StatusCode> {
    app.sessions
        .lock()
        .expect("session map lock")
        .remove(&id)
        .map(|_| StatusCode::NO_CONTENT)
        .ok_or_else(|| ApiError::no_session(&id))
}

pub fn router(app: Arc<AppState>) -> Router {
    let cors = CorsLayer::new().allow_methods(Any).allow_headers(Any);
    let cors = match app.config.cors_origin.as_deref().map(HeaderValue::from_str) {
        Some(Ok(origin)) => cors.allow_origin(origin),
        _ => cors.allow_origin(Any),
    };
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/:id", get(show).delete(remove))
        .route("/sessions/:id/step", post(step))
        .layer(cors)
        .with_state(app)
}

/// Serves until the process is stopped, reaping idle sessions in the
/// background.
pub async fn serve(addr: std::net::SocketAddr, config: ServiceConfig) -> crate::Result<()> {
    let app = AppState::new(config);
    let reaper = app.clone();
    tokio::spawn(async move {
        let period = (reaper.config.idle_timeout / 4).max(Duration::from_secs(1));
        let mut tick = tokio::time::interval(period);
        loop {
            tick.tick().await;
            let n = reaper.reap_expired(Instant::now());
            if n > 0 {
                log::info!("reaped {n} idle sessions");
            }
        }
    });
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(app)).await?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn session(kind: AssistantKind) -> Session {
        Session::new(&CreateRequest::new(7, 2, kind), None, AveConfig::default(), &HumanSpec::default()).unwrap()
    }

    #[test]
    fn initial_state_matches_the_shared_seeding() {
        let s = session(AssistantKind::Random);
        let config = GridConfig::from_seed(5, 5, 2, 7).unwrap();
        assert_eq!(s.state, config.initial_state(7));
        assert_eq!(s.config, config);
    }

    #[test]
    fn idle_assistant_passes_through() {
        let mut s = session(AssistantKind::None);
        let before = s.state.clone();
        let a = s.step(4).unwrap();
        assert_eq!(a, NOOP);
        assert_eq!(s.state, grid_step(&before, 4, NOOP, &s.config).unwrap());
    }

    #[test]
    fn bad_action_leaves_state_unchanged() {
        let mut s = session(AssistantKind::Random);
        let before = s.state.clone();
        assert!(matches!(s.step(9), Err(Error::Config(_))));
        assert_eq!(s.state, before);
        assert!(s.log.is_empty());
    }

    #[test]
    fn log_replays_to_the_current_state() {
        let mut s = session(AssistantKind::Ave);
        for a in [0, 1, 2, 3, 4, 1, 1, 3] {
            if s.state.done {
                break;
            }
            s.step(a).unwrap();
        }
        assert_eq!(s.replay().unwrap(), s.state);
    }

    #[test]
    fn learned_assistant_without_checkpoint_is_not_found() {
        let r = Session::new(
            &CreateRequest::new(1, 2, AssistantKind::Esr),
            None,
            AveConfig::default(),
            &HumanSpec::default(),
        );
        assert!(matches!(r, Err(Error::NotFound(_))));
    }

    #[test]
    fn idle_sessions_expire() {
        let app = AppState::new(ServiceConfig {
            idle_timeout: Duration::from_secs(10),
            ..Default::default()
        });
        let s = session(AssistantKind::None);
        let t0 = s.last_active;
        app.sessions
            .lock()
            .unwrap()
            .insert("a".into(), Arc::new(tokio::sync::Mutex::new(s)));
        assert_eq!(app.reap_expired(t0 + Duration::from_secs(5)), 0);
        assert_eq!(app.reap_expired(t0 + Duration::from_secs(11)), 1);
        assert_eq!(app.num_sessions(), 0);
    }
}
