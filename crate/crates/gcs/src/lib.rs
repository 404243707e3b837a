//! HTTP and WebSocket front end for a running ground station.
//!
//! Every route goes through a [`GcsHandle`]; the service never touches swarm
//! state except by submitting operator commands.

use std::future::Future;
use std::io;
use std::net::SocketAddr;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use log::{debug, warn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use swarmlink_core::groundstation::{CommandOutcome, FeedPacer};
use swarmlink_core::messages::{OperatorCommand, UavAction};
use swarmlink_core::model::{FormationSpec, UavId, Vec3};
use swarmlink_core::vehicle::Setpoint;
use swarmlink_sim::live::{GcsHandle, LiveError};
use tokio::net::TcpListener;

pub const DEFAULT_BIND: &str = "127.0.0.1:8400";
pub const BIND_ENV: &str = "GCS_BIND";

/// How often each stream client looks for a new snapshot.
const FEED_POLL: Duration = Duration::from_millis(20);

/// `GCS_BIND` if set, otherwise [`DEFAULT_BIND`].
pub fn bind_from_env() -> Result<SocketAddr, String> {
    let raw = std::env::var(BIND_ENV).unwrap_or_else(|_| DEFAULT_BIND.to_string());
    raw.parse().map_err(|e| format!("{BIND_ENV}={raw:?}: {e}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwarmAction {
    ArmAll,
    TakeoffAll,
    OffboardAll,
    RtlAll,
    LandAll,
}

impl From<SwarmAction> for OperatorCommand {
    fn from(a: SwarmAction) -> Self {
        match a {
            SwarmAction::ArmAll => OperatorCommand::ArmAll,
            SwarmAction::TakeoffAll => OperatorCommand::TakeoffAll,
            SwarmAction::OffboardAll => OperatorCommand::EngageOffboardAll,
            SwarmAction::RtlAll => OperatorCommand::RtlAll,
            SwarmAction::LandAll => OperatorCommand::LandAll,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SwarmCommandBody {
    action: SwarmAction,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LeaderBody {
    id: UavId,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WaypointBody {
    position: Vec3,
    #[serde(default)]
    yaw: f64,
    #[serde(default)]
    speed_mps: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GimbalBody {
    target: Vec3,
}

#[derive(Deserialize)]
struct AuditQuery {
    #[serde(default)]
    since: u64,
}

#[derive(Debug)]
enum ApiError {
    BadRequest(String),
    NotFound(String),
    Unavailable(String),
    Rejected { command_id: u64, reason: String },
}

/// Status code for a ground-station rejection reason.
pub fn rejection_status(reason: &str) -> StatusCode {
    match reason {
        "unknown uav" => StatusCode::NOT_FOUND,
        "busy" => StatusCode::SERVICE_UNAVAILABLE,
        _ => StatusCode::BAD_REQUEST,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        match self {
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, Json(json!({ "error": m }))).into_response(),
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, Json(json!({ "error": m }))).into_response(),
            ApiError::Unavailable(m) => (StatusCode::SERVICE_UNAVAILABLE, Json(json!({ "error": m }))).into_response(),
            ApiError::Rejected { command_id, reason } => {
                (rejection_status(&reason), Json(json!({ "command_id": command_id, "reason": reason }))).into_response()
            }
        }
    }
}

impl From<LiveError> for ApiError {
    fn from(e: LiveError) -> Self {
        ApiError::Unavailable(e.to_string())
    }
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(e.to_string()))
}

fn path_uav(raw: &str) -> Result<UavId, ApiError> {
    raw.parse::<u16>().ok().and_then(|v| UavId::new(v).ok()).ok_or_else(|| ApiError::NotFound("unknown uav".into()))
}

/// Runs a blocking handle call off the async workers.
async fn blocking<T: Send + 'static>(
    h: &GcsHandle,
    f: impl FnOnce(&GcsHandle) -> Result<T, LiveError> + Send + 'static,
) -> Result<T, ApiError> {
    let h = h.clone();
    tokio::task::spawn_blocking(move || f(&h)).await.map_err(|e| ApiError::Unavailable(e.to_string()))?.map_err(Into::into)
}

async fn submit(h: &GcsHandle, cmd: OperatorCommand) -> Result<Response, ApiError> {
    debug!("operator command {}", cmd.name());
    match blocking(h, move |h| h.submit(cmd)).await? {
        CommandOutcome::Accepted { command_id, .. } => {
            Ok((StatusCode::ACCEPTED, Json(json!({ "command_id": command_id }))).into_response())
        }
        CommandOutcome::Rejected { command_id, reason } => Err(ApiError::Rejected { command_id, reason }),
    }
}

async fn get_swarm(State(h): State<GcsHandle>) -> Result<Response, ApiError> {
    let view = blocking(&h, |h| h.view()).await?;
    Ok(Json(view).into_response())
}

async fn post_formation(State(h): State<GcsHandle>, body: Bytes) -> Result<Response, ApiError> {
    let formation: FormationSpec = parse(&body)?;
    submit(&h, OperatorCommand::SetFormation { formation }).await
}

async fn post_swarm_command(State(h): State<GcsHandle>, body: Bytes) -> Result<Response, ApiError> {
    let b: SwarmCommandBody = parse(&body)?;
    submit(&h, b.action.into()).await
}

async fn post_leader(State(h): State<GcsHandle>, body: Bytes) -> Result<Response, ApiError> {
    let b: LeaderBody = parse(&body)?;
    submit(&h, OperatorCommand::SetLeader { id: b.id }).await
}

async fn post_waypoint(State(h): State<GcsHandle>, body: Bytes) -> Result<Response, ApiError> {
    let b: WaypointBody = parse(&body)?;
    let setpoint = Setpoint::new(b.position, b.yaw).map_err(|e| ApiError::BadRequest(e.to_string()))?;
    submit(&h, OperatorCommand::LeaderWaypoint { setpoint, speed_mps: b.speed_mps }).await
}

async fn post_uav_command(State(h): State<GcsHandle>, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let id = path_uav(&id)?;
    let command: UavAction = parse(&body)?;
    submit(&h, OperatorCommand::UavCommand { id, command }).await
}

async fn post_gimbal(State(h): State<GcsHandle>, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let id = path_uav(&id)?;
    let b: GimbalBody = parse(&body)?;
    submit(&h, OperatorCommand::GimbalPoint { id, target: b.target }).await
}

async fn get_audit(State(h): State<GcsHandle>, Query(q): Query<AuditQuery>) -> Result<Response, ApiError> {
    let entries = blocking(&h, move |h| h.audit_since(q.since)).await?;
    Ok(Json(entries).into_response())
}

async fn ws_state(State(h): State<GcsHandle>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| stream_state(socket, h))
}

/// Pushes paced snapshots until the client goes away.
async fn stream_state(mut socket: WebSocket, h: GcsHandle) {
    let start = Instant::now();
    let mut pacer = FeedPacer::new();
    let mut seen = None;
    let mut ticker = tokio::time::interval(FEED_POLL);
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
    loop {
        tokio::select! {
            _ = ticker.tick() => {}
            msg = socket.recv() => match msg {
                None | Some(Err(_)) | Some(Ok(Message::Close(_))) => return,
                Some(Ok(_)) => continue,
            },
        }
        let now = start.elapsed().as_micros() as u64;
        let feed = h.feed();
        if seen != Some(feed.version) {
            seen = Some(feed.version);
            if let Some(s) = feed.latest {
                pacer.offer(s, now);
            }
        }
        if let Some(item) = pacer.poll(now) {
            let text = serde_json::to_string(&item).expect("feed items always serialize");
            if socket.send(Message::Text(text.into())).await.is_err() {
                return;
            }
        }
    }
}

pub fn router(handle: GcsHandle) -> Router {
    Router::new()
        .route("/api/swarm", get(get_swarm))
        .route("/api/swarm/formation", post(post_formation))
        .route("/api/swarm/command", post(post_swarm_command))
        .route("/api/swarm/leader", post(post_leader))
        .route("/api/swarm/waypoint", post(post_waypoint))
        .route("/api/uav/{id}/command", post(post_uav_command))
        .route("/api/uav/{id}/gimbal", post(post_gimbal))
        .route("/api/audit", get(get_audit))
        .route("/ws/state", get(ws_state))
        .with_state(handle)
}

/// Serves the API on `listener` until `shutdown` resolves.
pub async fn serve(listener: TcpListener, handle: GcsHandle, shutdown: impl Future<Output = ()> + Send + 'static) -> io::Result<()> {
    if let Ok(addr) = listener.local_addr() {
        log::info!("ground station API on http://{addr}");
    }
    axum::serve(listener, router(handle)).with_graceful_shutdown(shutdown).await.inspect_err(|e| warn!("server stopped: {e}"))
}
