//! HTTP front end. Reads are served from the published read model; writes go
//! through the platform on the blocking pool so no request waits on a cycle.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use arena_core::{StageId, SubmissionId, TeamId};
use axum::body::Bytes;
use axum::extract::{ConnectInfo, DefaultBodyLimit, FromRequestParts, Path, Query, State};
use axum::http::header::{AUTHORIZATION, CACHE_CONTROL, CONTENT_TYPE, RETRY_AFTER};
use axum::http::request::Parts;
use axum::http::{HeaderMap, HeaderName, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use subtle::ConstantTimeEq;
use tower_http::services::ServeDir;

use crate::platform::{AdminAction, Arena, ArenaError, ErrorKind, RegisterRequest};
use crate::verification::BACKOFF_BASE;

pub const CHANNEL_HEADER: &str = "x-arena-channel";
pub const DIGEST_HEADER: &str = "x-content-sha256";
pub const SNAPSHOT_HEADER: &str = "x-snapshot-id";
pub const QUOTA_RESET_HEADER: &str = "x-quota-reset";

#[derive(Clone)]
pub struct AppState {
    arena: Arc<Arena>,
    organizer_token: Option<Arc<str>>,
}

pub enum Principal {
    Anonymous,
    Team(TeamId),
    Organizer,
}

pub struct ApiError {
    error: ArenaError,
    /// Quota reset in the official time zone, and seconds until then.
    reset: Option<(String, i64)>,
}

impl From<ArenaError> for ApiError {
    fn from(error: ArenaError) -> Self {
        Self { error, reset: None }
    }
}

fn err(kind: ErrorKind, message: &str) -> ApiError {
    ArenaError::new(kind, message).into()
}

pub fn status_of(kind: ErrorKind) -> StatusCode {
    match kind {
        ErrorKind::BadRequest => StatusCode::BAD_REQUEST,
        ErrorKind::Unauthorized => StatusCode::UNAUTHORIZED,
        ErrorKind::Forbidden => StatusCode::FORBIDDEN,
        ErrorKind::NotFound => StatusCode::NOT_FOUND,
        ErrorKind::Conflict => StatusCode::CONFLICT,
        ErrorKind::PayloadTooLarge => StatusCode::PAYLOAD_TOO_LARGE,
        ErrorKind::Unprocessable => StatusCode::UNPROCESSABLE_ENTITY,
        ErrorKind::QuotaExceeded => StatusCode::TOO_MANY_REQUESTS,
        ErrorKind::Internal => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = status_of(self.error.kind);
        if status.is_server_error() {
            tracing::error!(error = %self.error.message, "request failed");
        }
        let mut body = json!({ "error": self.error.message });
        let mut headers = HeaderMap::new();
        if let Some(reset) = self.error.reset_at {
            body["reset_at"] = json!(reset);
        }
        if let Some((local, wait)) = &self.reset {
            body["reset_local"] = json!(local);
            headers.insert(RETRY_AFTER, HeaderValue::from(*wait));
            if let Ok(v) = HeaderValue::from_str(local) {
                headers.insert(QUOTA_RESET_HEADER, v);
            }
        }
        (status, headers, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

impl FromRequestParts<AppState> for Principal {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> Result<Self, Self::Rejection> {
        let Some(value) = parts.headers.get(AUTHORIZATION) else { return Ok(Principal::Anonymous) };
        let token = value
            .to_str()
            .ok()
            .and_then(|v| v.strip_prefix("Bearer "))
            .map(str::trim)
            .ok_or_else(|| err(ErrorKind::Unauthorized, "expected a bearer credential"))?;
        if let Some(org) = &state.organizer_token {
            if bool::from(org.as_bytes().ct_eq(token.as_bytes())) {
                return Ok(Principal::Organizer);
            }
        }
        Ok(Principal::Team(state.arena.authenticate(token)?))
    }
}

impl Principal {
    fn team(self) -> ApiResult<TeamId> {
        match self {
            Principal::Team(t) => Ok(t),
            Principal::Anonymous => Err(err(ErrorKind::Unauthorized, "team credential required")),
            Principal::Organizer => Err(err(ErrorKind::Forbidden, "this route is for teams")),
        }
    }
}

/// Runs blocking platform work off the async workers.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ArenaError> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| err(ErrorKind::Internal, &e.to_string()))?
        .map_err(ApiError::from)
}

pub fn router(arena: Arc<Arena>, organizer_token: Option<String>, ui_dir: Option<PathBuf>) -> Router {
    let max_payload = arena.competition().config.stages.iter().map(|s| s.max_payload_bytes).max().unwrap_or(0);
    let public_dir = arena.data_dir().join("public");
    let state = AppState { arena, organizer_token: organizer_token.map(Arc::from) };
    let mut app = Router::new()
        .route("/api/competition", get(competition))
        .route("/api/register", post(register))
        .route("/api/submissions/{stage}", post(submit))
        .route("/api/submissions/{stage}/{id}", get(submission_status))
        .route("/api/leaderboard/{stage}", get(leaderboard))
        .route("/api/data/{file}", get(data))
        .route("/api/badges/{stage}", get(badges))
        .route("/api/quota/{stage}", get(quota))
        .route("/api/admin/{action}", post(admin))
        .nest_service("/public", ServeDir::new(public_dir))
        .layer(DefaultBodyLimit::max(usize::try_from(max_payload).unwrap_or(usize::MAX).saturating_add(64 * 1024)));
    if let Some(dir) = ui_dir {
        app = app.nest_service("/ui", ServeDir::new(dir));
    }
    app.with_state(state)
}

async fn competition(State(s): State<AppState>) -> Json<serde_json::Value> {
    Json(s.arena.competition_info())
}

async fn register(State(s): State<AppState>, Json(req): Json<RegisterRequest>) -> ApiResult<impl IntoResponse> {
    let arena = s.arena.clone();
    let resp = blocking(move || arena.register(req)).await?;
    Ok((StatusCode::CREATED, Json(resp)))
}

async fn submit(
    State(s): State<AppState>,
    ConnectInfo(addr): ConnectInfo<SocketAddr>,
    principal: Principal,
    Path(stage): Path<StageId>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Response> {
    let team = principal.team()?;
    let channel = headers.get(CHANNEL_HEADER).and_then(|v| v.to_str().ok()).map(str::to_string);
    let arena = s.arena.clone();
    let result = blocking(move || arena.submit(&team, &stage, &body, channel)).await;
    match result {
        Ok(receipt) => {
            tracing::info!(client = %addr, submission = %receipt.submission_id, "submission accepted");
            Ok((StatusCode::CREATED, Json(receipt)).into_response())
        }
        Err(mut e) => {
            tracing::info!(client = %addr, status = %status_of(e.error.kind), "submission refused");
            e.reset = e.error.reset_at.map(|r| {
                let wait = (r - s.arena.now()).num_seconds().max(0);
                (s.arena.competition().local(r).to_rfc3339(), wait)
            });
            Err(e)
        }
    }
}

async fn submission_status(
    State(s): State<AppState>,
    principal: Principal,
    Path((stage, id)): Path<(StageId, SubmissionId)>,
) -> ApiResult<impl IntoResponse> {
    let team = principal.team()?;
    Ok(Json(s.arena.submission_status(&team, &stage, id)?))
}

#[derive(Debug, Deserialize)]
struct BoardQuery {
    format: Option<String>,
    frozen: Option<String>,
}

async fn leaderboard(
    State(s): State<AppState>,
    principal: Principal,
    Path(stage): Path<StageId>,
    Query(q): Query<BoardQuery>,
) -> ApiResult<Response> {
    if q.frozen.is_some() && !s.arena.frozen_boards_public() && !matches!(principal, Principal::Organizer) {
        return Err(err(ErrorKind::Forbidden, "frozen boards are visible to organizers only"));
    }
    let p = s.arena.leaderboard(&stage, q.frozen.as_deref())?;
    let (content_type, body) = match q.format.as_deref().unwrap_or("json") {
        "json" => ("application/json", p.json.clone()),
        "csv" => ("text/csv; charset=utf-8", p.csv.clone()),
        other => return Err(err(ErrorKind::BadRequest, &format!("unknown format \"{other}\""))),
    };
    let headers = [
        (CONTENT_TYPE, HeaderValue::from_static(content_type)),
        (CACHE_CONTROL, HeaderValue::from_static("no-cache")),
        (HeaderName::from_static(SNAPSHOT_HEADER), HeaderValue::from(p.snapshot.snapshot_id)),
    ];
    Ok((headers, body).into_response())
}

async fn data(State(s): State<AppState>, principal: Principal, Path(file): Path<String>) -> ApiResult<Response> {
    let registered = !matches!(principal, Principal::Anonymous);
    let arena = s.arena.clone();
    let (bytes, digest) = blocking(move || arena.data_file(&file, registered)).await?;
    let headers = [
        (CONTENT_TYPE, HeaderValue::from_static("application/octet-stream")),
        (HeaderName::from_static(DIGEST_HEADER), HeaderValue::from_str(&digest).expect("hex digest")),
    ];
    Ok((headers, bytes).into_response())
}

async fn badges(State(s): State<AppState>, Path(stage): Path<StageId>) -> ApiResult<impl IntoResponse> {
    Ok(Json(s.arena.badges(&stage)?))
}

async fn quota(State(s): State<AppState>, principal: Principal, Path(stage): Path<StageId>) -> ApiResult<Response> {
    let team = principal.team()?;
    let q = s.arena.quota(&team, &stage)?;
    let resets_local = s.arena.competition().local(q.resets_at).to_rfc3339();
    let mut body = serde_json::to_value(q).expect("serializes");
    body["resets_local"] = json!(resets_local);
    Ok(Json(body).into_response())
}

async fn admin(
    State(s): State<AppState>,
    principal: Principal,
    Path(action): Path<String>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    if !matches!(principal, Principal::Organizer) {
        return Err(err(ErrorKind::Forbidden, "organizer credential required"));
    }
    let params: serde_json::Value = if body.iter().all(u8::is_ascii_whitespace) {
        serde_json::Value::Null
    } else {
        serde_json::from_slice(&body).map_err(|e| err(ErrorKind::BadRequest, &e.to_string()))?
    };
    let action = AdminAction::parse(&action, params)?;
    let arena = s.arena.clone();
    Ok(Json(blocking(move || arena.admin(action, "organizer")).await?))
}

/// Cycle period: the shortest configured stage cadence.
pub fn cycle_period(arena: &Arena) -> Duration {
    let secs = arena.competition().config.stages.iter().map(|s| s.aggregation_cadence_s).min().unwrap_or(60);
    Duration::from_secs(secs.max(1))
}

/// Runs the aggregation cycle and the verification worker until the
/// returned handles are aborted.
pub fn spawn_background(arena: Arc<Arena>) -> Vec<tokio::task::JoinHandle<()>> {
    let cycle = {
        let arena = arena.clone();
        let period = cycle_period(&arena);
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(period);
            tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
            loop {
                tick.tick().await;
                let a = arena.clone();
                match tokio::task::spawn_blocking(move || a.run_cycle()).await {
                    Ok(Ok(r)) if !r.published.is_empty() => tracing::info!(snapshots = ?r.published, "published"),
                    Ok(Ok(_)) => {}
                    Ok(Err(e)) => tracing::error!(error = %e, "aggregation cycle failed"),
                    Err(e) => tracing::error!(error = %e, "aggregation cycle panicked"),
                }
            }
        })
    };
    let verify = tokio::spawn(async move {
        let mut tick = tokio::time::interval(BACKOFF_BASE);
        tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            tick.tick().await;
            let a = arena.clone();
            match tokio::task::spawn_blocking(move || a.run_verification(None, false)).await {
                Ok(Ok(r)) if r.completed + r.failed > 0 => {
                    tracing::info!(completed = r.completed, failed = r.failed, "verification pass")
                }
                Ok(Ok(_)) => {}
                Ok(Err(e)) => tracing::error!(error = %e, "verification pass failed"),
                Err(e) => tracing::error!(error = %e, "verification pass panicked"),
            }
        }
    });
    vec![cycle, verify]
}

/// Serves `app` on `listener` with background work until `shutdown`
/// resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    arena: Arc<Arena>,
    app: Router,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let tasks = spawn_background(arena);
    let result = serve_http(listener, app, shutdown).await;
    for t in tasks {
        t.abort();
    }
    result
}

/// Serves `app` alone, without background work.
pub async fn serve_http(
    listener: tokio::net::TcpListener,
    app: Router,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, app.into_make_service_with_connect_info::<SocketAddr>())
        .with_graceful_shutdown(shutdown)
        .await
}
