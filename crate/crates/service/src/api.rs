//! HTTP API under `/api/`. JSON bodies throughout; the schema is in
//! `docs/api.md` and its version is served at `/api/version`.

use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use ipdm_core::ingest::{self, NetworkStore};
use ipdm_core::train::{self, ModelParams};
use ipdm_core::Error;

use crate::jobs::{CancelError, JobKind, JobManager, JobSpec, JobState};
use crate::ops;

pub const API_VERSION: &str = "1";
/// Upper bound on analysis forecast horizons, in years.
pub const MAX_HORIZON: usize = 200;

pub struct AppState {
    pub store: NetworkStore,
    /// Directory searched for `params_<category>.ipdm` during analyses.
    pub params_dir: Option<PathBuf>,
    pub jobs: Arc<JobManager>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: serde_json::Value,
}

impl ApiError {
    fn new(status: StatusCode, msg: impl Into<String>) -> Self {
        Self { status, body: json!({ "error": msg.into() }) }
    }

    fn bad_request(msg: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, msg)
    }

    fn not_found(level: &str, id: &str) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            body: json!({ "error": format!("{level} not found: {id}"), "level": level, "id": id }),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::NotFound { level, id } => Self::not_found(level, &id),
            Error::InvalidInput(_)
            | Error::Schema { .. }
            | Error::IncompatibleConfig(_)
            | Error::Unidentifiable(_)
            | Error::ConstraintInfeasible(_) => Self::bad_request(e.to_string()),
            other => Self::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

/// JSON body parsing with schema violations reported as 400.
fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/version", get(version))
        .route("/api/bridges", get(bridges))
        .route("/api/bridges/{b}/categories", get(categories))
        .route("/api/bridges/{b}/categories/{s}/elements", get(elements))
        .route("/api/elements/{e}/series", get(series))
        .route("/api/analyses/deterioration", post(deterioration))
        .route("/api/jobs", post(submit_job).get(list_jobs))
        .route("/api/jobs/{id}", get(get_job).delete(cancel_job))
        .route("/api/jobs/{id}/result", get(job_result))
        .route("/api/jobs/{id}/result/{*file}", get(job_result_file))
        .with_state(state)
}

async fn version() -> Json<serde_json::Value> {
    Json(json!({ "api": API_VERSION, "service": env!("CARGO_PKG_VERSION") }))
}

async fn bridges(State(st): State<Arc<AppState>>) -> Json<Vec<String>> {
    Json(st.store.bridges.keys().cloned().collect())
}

async fn categories(State(st): State<Arc<AppState>>, UrlPath(b): UrlPath<String>) -> ApiResult<Json<Vec<String>>> {
    Ok(Json(ingest::find_bridge(&st.store, &b)?.categories.keys().cloned().collect()))
}

async fn elements(
    State(st): State<Arc<AppState>>,
    UrlPath((b, s)): UrlPath<(String, String)>,
) -> ApiResult<Json<Vec<ingest::ElementListing>>> {
    match ingest::navigate(&st.store, &[&b, &s])? {
        ingest::Listing::Elements(v) => Ok(Json(v)),
        _ => unreachable!("two-component path lists elements"),
    }
}

/// Resolves an element key: `bridge/category/element`, or `bridge/element`
/// when the element id is unique within the bridge.
fn resolve<'a>(store: &'a NetworkStore, key: &str) -> ApiResult<(String, String, &'a ingest::StoredElement)> {
    let parts: Vec<&str> = key.split('/').collect();
    match parts.as_slice() {
        [b, c, e] => Ok((b.to_string(), c.to_string(), ingest::find_element(store, b, c, e)?)),
        [b, e] => {
            let hits = ingest::find_in_bridge(store, b, e)?;
            if hits.len() > 1 {
                let cats: Vec<&str> = hits.iter().map(|h| h.0).collect();
                return Err(ApiError::bad_request(format!(
                    "element {e} of bridge {b} exists in several categories {cats:?}; use bridge/category/element"
                )));
            }
            Ok((b.to_string(), hits[0].0.to_string(), hits[0].1))
        }
        _ => Err(ApiError::bad_request(format!(
            "element key {key:?} must be bridge/category/element or bridge/element (percent-encode the slashes)"
        ))),
    }
}

async fn series(
    State(st): State<Arc<AppState>>,
    UrlPath(e): UrlPath<String>,
) -> ApiResult<Json<ipdm_core::dataset::ElementSeries>> {
    let (b, c, el) = resolve(&st.store, &e)?;
    Ok(Json(ingest::element_series(&b, &c, el)))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnalysisRequest {
    element: String,
    #[serde(default = "default_horizon")]
    horizon: usize,
    /// Parameter artifact on the server; defaults to the category's file in
    /// the params directory, then to default parameters.
    #[serde(default)]
    params: Option<PathBuf>,
}

fn default_horizon() -> usize {
    10
}

#[derive(Serialize)]
struct AnalysisResponse {
    #[serde(flatten)]
    analysis: ops::DeteriorationAnalysis,
    params_source: String,
}

/// Parameters for an analysis of an element in `category`.
pub fn analysis_params(
    store: &NetworkStore,
    params_dir: Option<&Path>,
    explicit: Option<&Path>,
    category: &str,
) -> ipdm_core::Result<(ModelParams, String)> {
    if let Some(p) = explicit {
        return Ok((train::load_params(p)?, p.display().to_string()));
    }
    if let Some(dir) = params_dir {
        let p = dir.join(train::params_file_name(category));
        if p.is_file() {
            return Ok((train::load_params(&p)?, p.display().to_string()));
        }
    }
    Ok((ops::default_params(store.scale), "default".into()))
}

async fn deterioration(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<AnalysisResponse>> {
    let req: AnalysisRequest = parse_body(&body)?;
    if req.horizon > MAX_HORIZON {
        return Err(ApiError::bad_request(format!("horizon {} exceeds {MAX_HORIZON}", req.horizon)));
    }
    let (b, c, el) = resolve(&st.store, &req.element)?;
    let (params, params_source) = analysis_params(&st.store, st.params_dir.as_deref(), req.params.as_deref(), &c)?;
    let series = ingest::element_series(&b, &c, el);
    let analysis = ops::analyze(&series, req.horizon, &params)?;
    Ok(Json(AnalysisResponse { analysis, params_source }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct JobRequest {
    kind: JobKind,
    #[serde(default)]
    config: serde_json::Value,
}

async fn submit_job(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let req: JobRequest = parse_body(&body)?;
    let spec = JobSpec::parse(req.kind, req.config.clone())
        .map_err(|e| ApiError::bad_request(format!("invalid {:?} config: {e}", req.kind)))?;
    let rec = st.jobs.submit(req.kind, req.config, spec)?;
    Ok((StatusCode::ACCEPTED, [(header::LOCATION, format!("/api/jobs/{}", rec.id))], Json(rec)).into_response())
}

async fn list_jobs(State(st): State<Arc<AppState>>) -> Json<Vec<crate::jobs::JobRecord>> {
    Json(st.jobs.list())
}

async fn get_job(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<crate::jobs::JobRecord>> {
    st.jobs.get(&id).map(Json).ok_or_else(|| ApiError::not_found("job", &id))
}

async fn cancel_job(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<crate::jobs::JobRecord>> {
    match st.jobs.cancel(&id) {
        Ok(r) => Ok(Json(r)),
        Err(CancelError::NotFound) => Err(ApiError::not_found("job", &id)),
        Err(CancelError::Finished(s)) => {
            Err(ApiError::new(StatusCode::CONFLICT, format!("job {id} already finished ({s:?})")))
        }
    }
}

fn done_job(st: &AppState, id: &str) -> ApiResult<crate::jobs::JobRecord> {
    let rec = st.jobs.get(id).ok_or_else(|| ApiError::not_found("job", id))?;
    if rec.state != JobState::Done {
        return Err(ApiError::new(StatusCode::CONFLICT, format!("job {id} has no result (state {:?})", rec.state)));
    }
    Ok(rec)
}

async fn job_result(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<serde_json::Value>> {
    let rec = done_job(&st, &id)?;
    Ok(Json(json!({ "id": rec.id, "location": rec.result, "files": rec.files })))
}

async fn job_result_file(
    State(st): State<Arc<AppState>>,
    UrlPath((id, file)): UrlPath<(String, String)>,
) -> ApiResult<Response> {
    let rec = done_job(&st, &id)?;
    let rel = Path::new(&file);
    if !rel.components().all(|c| matches!(c, Component::Normal(_))) {
        return Err(ApiError::bad_request(format!("invalid result path {file:?}")));
    }
    let dir = rec.result.expect("done implies a result location");
    let bytes = std::fs::read(dir.join(rel)).map_err(|_| ApiError::not_found("file", &file))?;
    let mime = match rel.extension().and_then(|e| e.to_str()) {
        Some("json") => "application/json",
        Some("csv") => "text/csv; charset=utf-8",
        Some("png") => "image/png",
        Some("ipdm") => "application/json",
        _ => "application/octet-stream",
    };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}
