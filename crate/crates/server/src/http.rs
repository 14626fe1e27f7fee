use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{DefaultBodyLimit, Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use simhub_core::api::{
    CreateExperimentRequest, ExperimentFilter, StateQuery, API_PREFIX, FILENAME_HEADER,
};
use simhub_core::Phase;

use crate::error::ApiError;
use crate::manager::Manager;

/// Largest accepted input upload.
pub const MAX_UPLOAD_BYTES: usize = 1 << 30;

#[derive(Clone)]
struct AppState {
    manager: Arc<Manager>,
    token: Option<Arc<str>>,
}

pub fn router(manager: Arc<Manager>, token: Option<String>) -> Router {
    let state = AppState {
        manager,
        token: token.map(Arc::from),
    };
    let api = Router::new()
        .route("/systems", get(list_systems))
        .route("/backends", get(list_backends))
        .route("/experiments", post(create).get(list))
        .route("/experiments/{id}", get(experiment))
        .route("/experiments/{id}/config", put(configure))
        .route(
            "/experiments/{id}/inputs/{param}",
            post(upload).layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES)),
        )
        .route("/experiments/{id}/build", post(build))
        .route("/experiments/{id}/run", post(run))
        .route("/experiments/{id}/state", get(state_of))
        .route("/experiments/{id}/results", get(results))
        .route("/experiments/{id}/results/{key}", get(payload))
        .route("/experiments/{id}/log/{action}", get(log))
        .fallback(not_found)
        .route_layer(middleware::from_fn_with_state(state.clone(), auth))
        .with_state(state);
    Router::new().nest(API_PREFIX, api).fallback(not_found)
}

async fn auth(State(st): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &st.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == &**token);
        if !ok {
            return ApiError::new(StatusCode::UNAUTHORIZED, "Unauthorized", "missing or invalid bearer token")
                .into_response();
        }
    }
    next.run(req).await
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "NotFound", "no such endpoint")
}

type ApiResult<T> = Result<T, ApiError>;

fn json_body<T>(body: Result<Json<T>, JsonRejection>) -> ApiResult<T> {
    body.map(|Json(v)| v)
        .map_err(|e| ApiError::bad_request(e.body_text()))
}

fn query<T>(q: Result<Query<T>, QueryRejection>) -> ApiResult<T> {
    q.map(|Query(v)| v)
        .map_err(|e| ApiError::bad_request(e.body_text()))
}

async fn list_systems(State(st): State<AppState>) -> impl IntoResponse {
    Json(st.manager.list_systems().await)
}

async fn list_backends(State(st): State<AppState>) -> impl IntoResponse {
    Json(st.manager.list_backends())
}

async fn create(
    State(st): State<AppState>,
    body: Result<Json<CreateExperimentRequest>, JsonRejection>,
) -> ApiResult<impl IntoResponse> {
    let exp = st.manager.create(json_body(body)?).await?;
    Ok((StatusCode::CREATED, Json(exp)))
}

async fn list(
    State(st): State<AppState>,
    q: Result<Query<ExperimentFilter>, QueryRejection>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(st.manager.list(&query(q)?)))
}

async fn experiment(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(st.manager.get(&id)?))
}

async fn configure(
    State(st): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let text = std::str::from_utf8(&body)
        .map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, "InvalidSysCfg", "body is not UTF-8"))?;
    Ok(Json(st.manager.configure(&id, text).await?))
}

async fn upload(
    State(st): State<AppState>,
    Path((id, param)): Path<(String, String)>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let filename = headers
        .get(FILENAME_HEADER)
        .and_then(|v| v.to_str().ok())
        .ok_or_else(|| ApiError::bad_request(format!("missing {FILENAME_HEADER} header")))?;
    Ok(Json(st.manager.upload_input(&id, &param, filename, &body).await?))
}

async fn build(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok((StatusCode::ACCEPTED, Json(st.manager.start(&id, Phase::Build).await?)))
}

async fn run(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok((StatusCode::ACCEPTED, Json(st.manager.start(&id, Phase::Run).await?)))
}

async fn state_of(
    State(st): State<AppState>,
    Path(id): Path<String>,
    q: Result<Query<StateQuery>, QueryRejection>,
) -> ApiResult<impl IntoResponse> {
    let q = query(q)?;
    let timeout = Duration::from_millis(q.timeout_ms.unwrap_or(30_000));
    Ok(Json(st.manager.state(&id, q.wait_while, timeout).await?))
}

async fn results(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(st.manager.results(&id)?))
}

fn octets(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response()
}

async fn payload(
    State(st): State<AppState>,
    Path((id, key)): Path<(String, String)>,
) -> ApiResult<Response> {
    Ok(octets(st.manager.result_payload(&id, &key).await?))
}

async fn log(
    State(st): State<AppState>,
    Path((id, action)): Path<(String, String)>,
) -> ApiResult<Response> {
    let action: Phase = action.parse().map_err(|e: String| ApiError::new(StatusCode::NOT_FOUND, "NotFound", e))?;
    Ok(octets(st.manager.log(&id, action).await?))
}
