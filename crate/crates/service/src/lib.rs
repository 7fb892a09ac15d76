//! Episode service: creates gated episodes, serves their state and event
//! stream, and routes operator interventions back into them.
//!
//! The routes and wire types are listed in [`stepgate_core::api`].

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::ws::rejection::WebSocketUpgradeRejection;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use stepgate_core::api::{ApiError, CreateEpisode, EnvKind, EpisodeCreated, EpisodeSummary, EventFrame, InterveneBody};
use stepgate_core::config::RunConfig;
use stepgate_core::controller::{
    run_episode, EpisodeEvent, EpisodeFailure, EpisodeObserver, EpisodeSetup, EpisodeState, EpisodeStatus, HubError,
    InterventionHub, InterventionResponse, InterventionSource, OracleSource, Source,
};
use stepgate_core::env::{DeviceBridge, Environment, SimApp, SimEnv};
use stepgate_core::{parse_action, Error, Instruction};
use tokio::net::TcpStream;
use tokio::sync::watch;
use tower_http::cors::CorsLayer;

/// Error reply with its status code.
#[derive(Debug)]
pub struct ApiFailure(StatusCode, ApiError);

impl ApiFailure {
    fn new(status: StatusCode, error: &str, message: impl Into<String>) -> Self {
        Self(status, ApiError { error: error.into(), message: message.into() })
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "validation", message)
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("no episode {id:?}"))
    }

    fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "conflict", message)
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "unprocessable", message)
    }
}

impl IntoResponse for ApiFailure {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

struct Log {
    state: EpisodeState,
    frames: Vec<EventFrame>,
}

/// Shared record of one episode: latest snapshot plus the full event log.
struct Episode {
    log: Mutex<Log>,
    last_seq: watch::Sender<u64>,
    hub: InterventionHub,
}

impl Episode {
    fn snapshot(&self) -> EpisodeState {
        self.log.lock().expect("episode lock").state.clone()
    }

    /// Frames after `since`, and whether the episode has finished.
    fn frames_since(&self, since: u64) -> (Vec<EventFrame>, bool) {
        let log = self.log.lock().expect("episode lock");
        let start = (since as usize).min(log.frames.len());
        (log.frames[start..].to_vec(), log.state.status.is_terminal())
    }
}

impl EpisodeObserver for Episode {
    fn on_event(&self, event: &EpisodeEvent, state: &EpisodeState) {
        let seq = {
            let mut log = self.log.lock().expect("episode lock");
            log.state = state.clone();
            let seq = log.frames.len() as u64 + 1;
            log.frames.push(EventFrame { seq, event: event.clone() });
            seq
        };
        self.last_seq.send_replace(seq);
    }
}

/// Service state shared by all handlers.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    config: RunConfig,
    instructions: HashMap<String, Instruction>,
    sim_app: Option<Arc<SimApp>>,
    episodes: RwLock<BTreeMap<String, Arc<Episode>>>,
    /// Episode currently holding the device, if any.
    device_lease: Mutex<Option<String>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(config: RunConfig) -> Result<Self, Error> {
        config.validate()?;
        let instructions = config.load_instructions()?.into_iter().map(|i| (i.id.clone(), i)).collect();
        let sim_app = match config.sim_app {
            Some(_) => Some(config.load_sim_app()?),
            None => None,
        };
        Ok(Self {
            inner: Arc::new(Inner {
                config,
                instructions,
                sim_app,
                episodes: RwLock::new(BTreeMap::new()),
                device_lease: Mutex::new(None),
                next_id: AtomicU64::new(1),
            }),
        })
    }

    fn episode(&self, id: &str) -> Result<Arc<Episode>, ApiFailure> {
        self.inner.episodes.read().expect("registry lock").get(id).cloned().ok_or_else(|| ApiFailure::not_found(id))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/episodes", post(create_episode).get(list_episodes))
        .route("/episodes/{id}", get(get_episode))
        .route("/episodes/{id}/events", get(events))
        .route("/episodes/{id}/intervene", post(intervene))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    tracing::info!(addr = ?listener.local_addr()?, "serving");
    axum::serve(listener, router(state)).await
}

fn json_body<T>(body: Result<Json<T>, axum::extract::rejection::JsonRejection>) -> Result<T, ApiFailure> {
    body.map(|Json(b)| b).map_err(|e| ApiFailure::bad_request(e.body_text()))
}

async fn create_episode(
    State(app): State<AppState>,
    body: Result<Json<CreateEpisode>, axum::extract::rejection::JsonRejection>,
) -> Result<(StatusCode, Json<EpisodeCreated>), ApiFailure> {
    let body = json_body(body)?;
    let inner = &app.inner;
    let cfg = &inner.config;
    let instruction = inner
        .instructions
        .get(&body.instruction_id)
        .cloned()
        .ok_or_else(|| ApiFailure::bad_request(format!("unknown instruction {:?}", body.instruction_id)))?;
    let gamma = body.gamma.unwrap_or(cfg.gamma);
    if !(0.0..=6.0).contains(&gamma) {
        return Err(ApiFailure::bad_request(format!("gamma must lie in [0, 6], got {gamma}")));
    }
    let mut caps = cfg.episode_caps();
    if let Some(max_steps) = body.max_steps {
        if max_steps == 0 {
            return Err(ApiFailure::bad_request("max_steps must be at least 1"));
        }
        caps.max_steps = max_steps;
    }
    let policy = cfg.backend(&body.policy_backend).map_err(|e| ApiFailure::bad_request(e.to_string()))?;
    let hub = InterventionHub::new();
    let source: Arc<dyn InterventionSource> = match &body.oracle_backend {
        Some(name) => {
            Arc::new(OracleSource::new(cfg.backend(name).map_err(|e| ApiFailure::bad_request(e.to_string()))?))
        }
        None => Arc::new(hub.clone()),
    };

    let episode_id = format!("ep-{:06}", inner.next_id.fetch_add(1, Ordering::Relaxed));
    let env_target = match body.env {
        EnvKind::Sim => {
            let app = inner.sim_app.clone().ok_or_else(|| ApiFailure::bad_request("no sim_app configured"))?;
            EnvTarget::Sim(app)
        }
        EnvKind::Device => {
            let addr = cfg.device.clone().ok_or_else(|| ApiFailure::bad_request("no device configured"))?;
            let mut lease = inner.device_lease.lock().expect("lease lock");
            if let Some(holder) = lease.as_ref() {
                return Err(ApiFailure::conflict(format!("device is leased by {holder}")));
            }
            *lease = Some(episode_id.clone());
            EnvTarget::Device(addr)
        }
    };

    let state = EpisodeState::new(episode_id.clone(), instruction.clone(), body.mode, gamma, caps.max_steps);
    let episode =
        Arc::new(Episode { log: Mutex::new(Log { state, frames: Vec::new() }), last_seq: watch::channel(0).0, hub });
    inner.episodes.write().expect("registry lock").insert(episode_id.clone(), episode.clone());

    let task_app = app.clone();
    let id = episode_id.clone();
    let mode = body.mode;
    tokio::spawn(async move {
        let leased = matches!(env_target, EnvTarget::Device(_));
        match env_target.open().await {
            Ok(mut env) => {
                let setup = EpisodeSetup {
                    episode_id: id.clone(),
                    instruction: &instruction,
                    mode,
                    gamma,
                    caps,
                    plan_item: None,
                };
                let result = run_episode(setup, &policy, env.as_mut(), source, episode.as_ref()).await;
                tracing::info!(episode = %id, status = ?result.state.status, "episode finished");
            }
            Err(e) => {
                let mut state = episode.snapshot();
                state.status = EpisodeStatus::Aborted;
                state.failure = Some(EpisodeFailure::Environment(e.to_string()));
                let event = EpisodeEvent::EpisodeFinished { status: state.status, failure: state.failure.clone() };
                episode.on_event(&event, &state);
            }
        }
        if leased {
            task_app.inner.device_lease.lock().expect("lease lock").take();
        }
    });

    Ok((StatusCode::ACCEPTED, Json(EpisodeCreated { episode_id })))
}

enum EnvTarget {
    Sim(Arc<SimApp>),
    Device(String),
}

impl EnvTarget {
    async fn open(self) -> Result<Box<dyn Environment>, std::io::Error> {
        Ok(match self {
            EnvTarget::Sim(app) => Box::new(SimEnv::new(app)),
            EnvTarget::Device(addr) => Box::new(DeviceBridge::new(TcpStream::connect(addr).await?)),
        })
    }
}

async fn list_episodes(State(app): State<AppState>) -> Json<Vec<EpisodeSummary>> {
    let episodes = app.inner.episodes.read().expect("registry lock");
    Json(
        episodes
            .iter()
            .map(|(id, e)| {
                let s = e.snapshot();
                EpisodeSummary { episode_id: id.clone(), instruction_id: s.instruction.id, status: s.status }
            })
            .collect(),
    )
}

async fn get_episode(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<EpisodeState>, ApiFailure> {
    Ok(Json(app.episode(&id)?.snapshot()))
}

#[derive(Debug, Deserialize)]
struct Since {
    #[serde(default)]
    since: u64,
}

async fn events(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<Since>,
    upgrade: Result<WebSocketUpgrade, WebSocketUpgradeRejection>,
) -> Result<Response, ApiFailure> {
    let episode = app.episode(&id)?;
    Ok(match upgrade {
        Ok(ws) => ws.on_upgrade(move |socket| stream_events(socket, episode, q.since)).into_response(),
        Err(_) => Json(episode.frames_since(q.since).0).into_response(),
    })
}

/// Sends every frame after `cursor`, following the episode until it ends.
async fn stream_events(mut socket: WebSocket, episode: Arc<Episode>, mut cursor: u64) {
    let mut seqs = episode.last_seq.subscribe();
    loop {
        let (frames, finished) = episode.frames_since(cursor);
        for frame in frames {
            cursor = frame.seq;
            let text = serde_json::to_string(&frame).expect("frames serialize");
            if socket.send(Message::Text(text.into())).await.is_err() {
                return;
            }
        }
        if finished {
            let _ = socket.send(Message::Close(None)).await;
            return;
        }
        tokio::select! {
            changed = seqs.changed() => if changed.is_err() { return },
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                _ => {}
            },
        }
    }
}

async fn intervene(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<InterveneBody>, axum::extract::rejection::JsonRejection>,
) -> Result<StatusCode, ApiFailure> {
    let episode = app.episode(&id)?;
    let body = json_body(body)?;
    let action = parse_action(&body.action).map_err(|e| ApiFailure::unprocessable(e.to_string()))?;
    let response = InterventionResponse { request_id: body.request_id, action, source: Source::Human };
    episode.hub.respond(response).map_err(|e| match e {
        HubError::Stale(_) => ApiFailure::conflict(e.to_string()),
        HubError::InvalidAction(_) => ApiFailure::unprocessable(e.to_string()),
    })?;
    Ok(StatusCode::NO_CONTENT)
}
