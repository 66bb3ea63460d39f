//! Read-only HTTP API over a finished work directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::{Path as UrlPath, State};
use axum::http::{header, Method, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use geotrust_core::heatmap::render_heatmap_png;
use geotrust_core::pipeline::WorkDir;
use geotrust_core::report::Report;
use geotrust_core::uncertainty::PixelMetric;
use geotrust_core::Error;
use serde::Serialize;
use tower_http::cors::{Any, CorsLayer};
use tower_http::services::ServeDir;

use crate::error::{CliError, CliResult};

const PLACEHOLDER_PAGE: &str = "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>geotrust</title></head>\
<body><p>No dashboard assets configured. The API is under <a href=\"/api/report\">/api/report</a>.</p></body></html>\n";

struct Inner {
    report: Report,
    report_json: String,
    score_names: Vec<String>,
    work: WorkDir,
}

/// Immutable state shared by every request.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
    assets: Option<PathBuf>,
}

impl AppState {
    /// Loads `report.json` from the work directory; a missing report is an error.
    pub fn load(work_dir: impl Into<PathBuf>, assets: Option<PathBuf>) -> CliResult<Self> {
        let work_dir = work_dir.into();
        if !work_dir.is_dir() {
            return Err(Error::MissingStage(format!("work directory {}", work_dir.display())).into());
        }
        let work = WorkDir::new(work_dir)?;
        let path = work.report_path();
        let report_json = fs::read_to_string(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingStage(format!("report (expected {})", path.display()))
            } else {
                Error::Io { path: path.clone(), source: e }
            }
        })?;
        let report = Report::from_json(&report_json)?;
        report.check_integrity()?;
        let mut score_names: Vec<String> = Vec::new();
        for c in &report.curves {
            if !score_names.contains(&c.curve.score_name) {
                score_names.push(c.curve.score_name.clone());
            }
        }
        if let Some(dir) = &assets {
            if !dir.is_dir() {
                return Err(Error::Io {
                    path: dir.clone(),
                    source: std::io::Error::new(std::io::ErrorKind::NotFound, "assets directory not found"),
                }
                .into());
            }
        }
        Ok(Self {
            inner: Arc::new(Inner {
                report,
                report_json,
                score_names,
                work,
            }),
            assets,
        })
    }

    pub fn report(&self) -> &Report {
        &self.inner.report
    }
}

#[derive(Serialize)]
struct ApiError {
    error: String,
}

fn api_error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(ApiError { error: msg.into() })).into_response()
}

#[derive(Serialize)]
struct SceneSummary<'a> {
    scene_id: &'a str,
    f1: Option<f64>,
    scores: BTreeMap<&'a str, Option<f64>>,
    classifier_score: Option<f64>,
    classifier_score_attributes: Option<f64>,
    failure: Option<bool>,
    split: Option<&'static str>,
    discard: Option<bool>,
}

async fn get_report(State(state): State<AppState>) -> Response {
    (
        [(header::CONTENT_TYPE, "application/json")],
        state.inner.report_json.clone(),
    )
        .into_response()
}

async fn get_scenes(State(state): State<AppState>) -> Response {
    let inner = &state.inner;
    let rows: Vec<SceneSummary> = inner
        .report
        .scenes
        .iter()
        .map(|s| SceneSummary {
            scene_id: &s.scene_id,
            f1: s.feature("f1"),
            scores: inner
                .score_names
                .iter()
                .map(|n| (n.as_str(), s.feature(n)))
                .collect(),
            classifier_score: s.feature("classifier_score"),
            classifier_score_attributes: s.feature("classifier_score_attributes"),
            failure: s.fusion.as_ref().map(|f| f.failure),
            split: s.fusion.as_ref().map(|f| f.split.as_str()),
            discard: s.discard,
        })
        .collect();
    Json(rows).into_response()
}

async fn get_scene(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Response {
    match state.report().scene(&id) {
        Some(s) => Json(s).into_response(),
        None => api_error(StatusCode::NOT_FOUND, format!("unknown scene {id:?}")),
    }
}

async fn get_heatmap(
    State(state): State<AppState>,
    UrlPath((id, file)): UrlPath<(String, String)>,
) -> Response {
    let Some(metric) = file.strip_suffix(".png").and_then(|m| m.parse::<PixelMetric>().ok()) else {
        return api_error(StatusCode::NOT_FOUND, format!("unknown heatmap {file:?}"));
    };
    if state.report().scene(&id).is_none() {
        return api_error(StatusCode::NOT_FOUND, format!("unknown scene {id:?}"));
    }
    let rendered = tokio::task::spawn_blocking(move || heatmap_bytes(&state.inner.work, &id, metric)).await;
    match rendered {
        Ok(Ok(bytes)) => ([(header::CONTENT_TYPE, "image/png")], bytes).into_response(),
        Ok(Err(Error::Io { source, .. })) if source.kind() == std::io::ErrorKind::NotFound => {
            api_error(StatusCode::NOT_FOUND, "no maps stored for this scene")
        }
        Ok(Err(e)) => api_error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => api_error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

/// PNG of one stored metric map, scaled by the metric's upper bound.
pub fn heatmap_bytes(work: &WorkDir, scene_id: &str, metric: PixelMetric) -> geotrust_core::Result<Vec<u8>> {
    let maps = work.read_maps(scene_id)?;
    let dims = maps.dims();
    if dims.len() != 3 || dims[0] != PixelMetric::ALL.len() {
        return Err(Error::InvalidDims(dims.to_vec()));
    }
    let (h, w) = (dims[1], dims[2]);
    let idx = PixelMetric::ALL.iter().position(|&m| m == metric).expect("metric listed");
    let values = maps.to_f64_vec();
    render_heatmap_png(&values[idx * h * w..(idx + 1) * h * w], h, w, metric.upper_bound())
}

async fn placeholder() -> Html<&'static str> {
    Html(PLACEHOLDER_PAGE)
}

pub fn router(state: AppState) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(Any)
        .allow_methods([Method::GET, Method::HEAD]);
    let assets = state.assets.clone();
    let api = Router::new()
        .route("/report", get(get_report))
        .route("/scenes", get(get_scenes))
        .route("/scene/{id}", get(get_scene))
        .route("/scene/{id}/heatmap/{file}", get(get_heatmap))
        .fallback(|| async { api_error(StatusCode::NOT_FOUND, "not found") })
        .with_state(state);
    let app = Router::new().nest("/api", api);
    let app = match assets {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app.route("/", get(placeholder)),
    };
    app.layer(cors)
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(work_dir: &Path, addr: &str, assets: Option<PathBuf>) -> CliResult<()> {
    let state = AppState::load(work_dir, assets)?;
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|source| CliError::Bind {
        addr: addr.to_owned(),
        source,
    })?;
    if let Ok(local) = listener.local_addr() {
        eprintln!("serving {} on http://{local}", work_dir.display());
    }
    axum::serve(listener, router(state)).await.map_err(CliError::Server)
}
