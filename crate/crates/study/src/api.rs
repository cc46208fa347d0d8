use std::future::Future;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use crate::error::ServiceError;
use crate::schedule::StudySpec;
use crate::service::{ChoiceRequest, ExportedMatrix, NewSession, StudyService};

type Shared = State<Arc<StudyService>>;

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match self.kind() {
            "not_found" => StatusCode::NOT_FOUND,
            "conflict" | "empty_export" => StatusCode::CONFLICT,
            "contract" => StatusCode::UNPROCESSABLE_ENTITY,
            "invalid" => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            log::error!("{self}");
        }
        (status, Json(json!({ "error": self.kind(), "message": self.to_string() }))).into_response()
    }
}

type ApiResult<T> = Result<T, ServiceError>;

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn create_study(State(s): Shared, Json(spec): Json<StudySpec>) -> ApiResult<impl IntoResponse> {
    Ok((StatusCode::CREATED, Json(s.create_study(spec)?)))
}

async fn list_studies(State(s): Shared) -> impl IntoResponse {
    Json(s.list_studies())
}

async fn get_study(State(s): Shared, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(s.study_info(&id)?))
}

#[derive(Deserialize)]
struct ExportQuery {
    #[serde(default)]
    format: Option<String>,
}

async fn export(State(s): Shared, Path(id): Path<String>, Query(q): Query<ExportQuery>) -> ApiResult<Response> {
    let matrix = s.export_choice_matrix(&id)?;
    match q.format.as_deref() {
        None | Some("json") => Ok(Json(ExportedMatrix::from(&matrix)).into_response()),
        Some("csv") => Ok(([(header::CONTENT_TYPE, "text/csv")], matrix.to_csv()?).into_response()),
        Some(other) => Err(ServiceError::Contract(format!("unknown export format {other:?}"))),
    }
}

async fn trial_log(State(s): Shared, Path(id): Path<String>) -> ApiResult<Response> {
    let path = s.log_path(&id)?;
    let body = match path.exists() {
        true => std::fs::read(&path)?,
        false => Vec::new(),
    };
    Ok(([(header::CONTENT_TYPE, "text/csv")], body).into_response())
}

async fn image(State(s): Shared, Path((id, file)): Path<(String, String)>) -> ApiResult<Response> {
    let index = file
        .strip_suffix(".png")
        .and_then(|n| n.parse::<usize>().ok())
        .ok_or_else(|| ServiceError::NotFound(format!("image {file}")))?;
    let bytes = s.image(&id, index)?;
    Ok(([(header::CONTENT_TYPE, "image/png"), (header::CACHE_CONTROL, "no-store")], bytes.as_ref().clone()).into_response())
}

async fn create_session(State(s): Shared, Json(req): Json<NewSession>) -> ApiResult<impl IntoResponse> {
    Ok((StatusCode::CREATED, Json(s.create_session(req)?)))
}

async fn get_session(State(s): Shared, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(s.session_view(&id)?))
}

async fn next(State(s): Shared, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(s.next_pair(&id)?))
}

async fn choose(State(s): Shared, Path(id): Path<String>, Json(req): Json<ChoiceRequest>) -> ApiResult<impl IntoResponse> {
    Ok(Json(s.record_choice(&id, req)?))
}

async fn pause(State(s): Shared, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(s.pause(&id)?))
}

async fn resume(State(s): Shared, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(s.resume(&id)?))
}

pub fn router(service: Arc<StudyService>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/studies", post(create_study).get(list_studies))
        .route("/studies/{id}", get(get_study))
        .route("/studies/{id}/export", get(export))
        .route("/studies/{id}/log", get(trial_log))
        .route("/studies/{id}/images/{file}", get(image))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/next", get(next))
        .route("/sessions/{id}/choices", post(choose))
        .route("/sessions/{id}/pause", post(pause))
        .route("/sessions/{id}/resume", post(resume))
        .with_state(service)
}

/// Serve until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    service: Arc<StudyService>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(service)).with_graceful_shutdown(shutdown).await
}
