//! HTTP/JSON API v1 over [`Service`].

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::events::IngestMode;
use crate::service::{Service, ServiceError};
use crate::time::Timestamp;
use crate::transparency::FrameResult;

pub const API_KEY_HEADER: &str = "x-api-key";

pub struct ApiError(ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status =
            StatusCode::from_u16(self.0.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        if status.is_server_error() {
            log::error!("{}", self.0);
        }
        (
            status,
            Json(serde_json::json!({ "error": self.0.to_string() })),
        )
            .into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn authorize(svc: &Service, headers: &HeaderMap) -> Result<(), Response> {
    let Some(expected) = &svc.config().api_key else {
        return Ok(());
    };
    match headers.get(API_KEY_HEADER).and_then(|v| v.to_str().ok()) {
        Some(k) if k == expected => Ok(()),
        _ => Err((
            StatusCode::UNAUTHORIZED,
            Json(serde_json::json!({ "error": "missing or wrong API key" })),
        )
            .into_response()),
    }
}

/// Frame response: the result plus its plain-text disclosure.
#[derive(Serialize)]
pub struct FrameResponse {
    #[serde(flatten)]
    pub result: FrameResult,
    pub disclosure_text: String,
}

#[derive(Deserialize)]
struct IngestParams {
    mode: Option<IngestMode>,
}

#[derive(Deserialize)]
struct OptOutBody {
    opt_out: bool,
}

async fn health(State(svc): State<Arc<Service>>) -> impl IntoResponse {
    Json(svc.health())
}

async fn ingest(
    State(svc): State<Arc<Service>>,
    headers: HeaderMap,
    Query(p): Query<IngestParams>,
    body: String,
) -> Response {
    if let Err(r) = authorize(&svc, &headers) {
        return r;
    }
    let mode = p.mode.unwrap_or(svc.config().ingest_mode);
    match svc.ingest(&body, mode, Timestamp::now()) {
        Ok(summary) => Json(summary).into_response(),
        Err(e) => ApiError(e).into_response(),
    }
}

async fn frame(
    State(svc): State<Arc<Service>>,
    headers: HeaderMap,
    Path(frame_id): Path<String>,
    Query(mut q): Query<BTreeMap<String, String>>,
) -> Response {
    if let Err(r) = authorize(&svc, &headers) {
        return r;
    }
    let Some(user) = q.remove("user") else {
        return ApiError(ServiceError::BadRequest(
            "missing `user` query parameter".into(),
        ))
        .into_response();
    };
    let result: ApiResult<FrameResponse> = svc
        .recommend(&frame_id, &user, &q, Timestamp::now())
        .map(|result| FrameResponse {
            disclosure_text: result.disclosure.render_text(),
            result,
        })
        .map_err(ApiError);
    match result {
        Ok(r) => Json(r).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn criteria(State(svc): State<Arc<Service>>, Path(frame_id): Path<String>) -> Response {
    match svc.criteria(&frame_id) {
        Ok(c) => Json(c).into_response(),
        Err(e) => ApiError(e).into_response(),
    }
}

async fn optout(
    State(svc): State<Arc<Service>>,
    headers: HeaderMap,
    Path(user): Path<String>,
    Json(body): Json<OptOutBody>,
) -> Response {
    if let Err(r) = authorize(&svc, &headers) {
        return r;
    }
    match svc.set_optout(&user, body.opt_out, Timestamp::now()) {
        Ok(c) => Json(c).into_response(),
        Err(e) => ApiError(e).into_response(),
    }
}

async fn export(
    State(svc): State<Arc<Service>>,
    headers: HeaderMap,
    Path(user): Path<String>,
) -> Response {
    if let Err(r) = authorize(&svc, &headers) {
        return r;
    }
    match svc.export_user_data(&user, Timestamp::now()) {
        Ok(body) => (
            [(axum::http::header::CONTENT_TYPE, "application/jsonl")],
            body,
        )
            .into_response(),
        Err(e) => ApiError(e).into_response(),
    }
}

async fn delete(
    State(svc): State<Arc<Service>>,
    headers: HeaderMap,
    Path(user): Path<String>,
) -> Response {
    if let Err(r) = authorize(&svc, &headers) {
        return r;
    }
    match svc.delete_user_data(&user, Timestamp::now()) {
        Ok(c) => Json(c).into_response(),
        Err(e) => ApiError(e).into_response(),
    }
}

async fn retrain(State(svc): State<Arc<Service>>, headers: HeaderMap) -> Response {
    if let Err(r) = authorize(&svc, &headers) {
        return r;
    }
    let result = tokio::task::spawn_blocking(move || svc.retrain(Timestamp::now())).await;
    match result {
        Ok(Ok(summary)) => Json(summary).into_response(),
        Ok(Err(e)) => ApiError(e).into_response(),
        Err(join) => (
            StatusCode::INTERNAL_SERVER_ERROR,
            Json(serde_json::json!({ "error": join.to_string() })),
        )
            .into_response(),
    }
}

pub fn router(svc: Arc<Service>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/events", post(ingest))
        .route("/v1/frames/{frame_id}", get(frame))
        .route("/v1/disclosure/{frame_id}", get(criteria))
        .route("/v1/users/{user_id}/optout", put(optout))
        .route("/v1/users/{user_id}/data", get(export).delete(delete))
        .route("/v1/admin/retrain", post(retrain))
        .with_state(svc)
}

/// Bind and serve until ctrl-c, retraining in the background when configured.
pub async fn serve(svc: Arc<Service>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(&svc.config().listen).await?;
    log::info!("listening on {}", listener.local_addr()?);
    if let Some(secs) = svc.config().retrain_interval_secs.filter(|s| *s > 0) {
        let trainer = svc.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(std::time::Duration::from_secs(secs));
            tick.tick().await;
            loop {
                tick.tick().await;
                let s = trainer.clone();
                match tokio::task::spawn_blocking(move || s.retrain(Timestamp::now())).await {
                    Ok(Err(e)) => log::error!("background retrain failed: {e}"),
                    Err(e) => log::error!("background retrain panicked: {e}"),
                    Ok(Ok(_)) => {}
                }
            }
        });
    }
    axum::serve(listener, router(svc))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
