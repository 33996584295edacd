//! HTTP API over a project directory, backing the calibration and QC UI.
//!
//! Every mutation builds the updated manifest, writes it with
//! temp-then-rename and only then publishes it in memory, so a failed write
//! leaves both the file and the served state unchanged. Mutations of one case
//! are serialized by a per-case lock.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::RwLock;

use super::project::{calibrate_case, segment_case, CaseRecord, CaseState, ProjectManifest, QcRating};
use super::{PipelineError, Segmenter};
use crate::geometry::CalibrationSpec;
use crate::metrics::{summarize, SummaryStats};

pub struct AppState {
    dir: PathBuf,
    manifest: RwLock<ProjectManifest>,
    case_locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
    segmenter: Option<Arc<Segmenter>>,
}

impl AppState {
    /// Loads the project and every model it lists.
    pub fn open(dir: &Path) -> Result<Arc<Self>, PipelineError> {
        let manifest = ProjectManifest::load(dir)?;
        let segmenter = manifest.segmenter(dir)?.map(Arc::new);
        Ok(Arc::new(Self {
            dir: dir.to_path_buf(),
            manifest: RwLock::new(manifest),
            case_locks: Mutex::new(HashMap::new()),
            segmenter,
        }))
    }

    fn case_lock(&self, id: &str) -> Arc<tokio::sync::Mutex<()>> {
        self.case_locks
            .lock()
            .expect("lock map poisoned")
            .entry(id.to_string())
            .or_default()
            .clone()
    }

    /// Applies `f` to a copy of the case, persists, then publishes.
    async fn update_case(
        &self,
        id: &str,
        f: impl FnOnce(&mut CaseRecord) -> Result<(), PipelineError>,
    ) -> Result<CaseRecord, PipelineError> {
        let mut guard = self.manifest.write().await;
        let mut next = guard.clone();
        let case = next
            .case_mut(id)
            .ok_or_else(|| PipelineError::NotFound(format!("case {id}")))?;
        f(case)?;
        let out = case.clone();
        next.save(&self.dir)?;
        *guard = next;
        Ok(out)
    }

    async fn get_case(&self, id: &str) -> Result<CaseRecord, PipelineError> {
        self.manifest
            .read()
            .await
            .case(id)
            .cloned()
            .ok_or_else(|| PipelineError::NotFound(format!("case {id}")))
    }
}

struct ApiError(PipelineError);

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            PipelineError::NotFound(_) => StatusCode::NOT_FOUND,
            PipelineError::Conflict(_) => StatusCode::CONFLICT,
            PipelineError::InvalidInput(_) | PipelineError::Geometry(_) | PipelineError::CalibrationMissing(_) => {
                StatusCode::BAD_REQUEST
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(self.0.to_json())).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn png_response(path: &Path) -> ApiResult<Response> {
    let bytes = std::fs::read(path).map_err(super::file_err(path))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, PipelineError> {
    serde_json::from_slice(body).map_err(|e| PipelineError::InvalidInput(format!("malformed body: {e}")))
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, PipelineError> + Send + 'static,
) -> Result<T, PipelineError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| PipelineError::InvalidInput(format!("worker failed: {e}")))?
}

async fn list_cases(State(s): State<Arc<AppState>>) -> Json<ProjectManifest> {
    Json(s.manifest.read().await.clone())
}

async fn get_case(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<CaseRecord>> {
    Ok(Json(s.get_case(&id).await?))
}

async fn case_image(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let case = s.get_case(&id).await?;
    let rel = case.rectified_path.unwrap_or(case.raw_path);
    png_response(&s.dir.join(rel))
}

async fn case_mask(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let case = s.get_case(&id).await?;
    let rel = case
        .prediction_path
        .ok_or_else(|| PipelineError::NotFound(format!("case {id} has no prediction")))?;
    png_response(&s.dir.join(rel))
}

/// Ruler points as sent by the UI; `mode` defaults to `ruler`.
fn calibration_spec(body: &Bytes) -> Result<CalibrationSpec, PipelineError> {
    let mut value: serde_json::Value = parse_body(body)?;
    if let Some(obj) = value.as_object_mut() {
        obj.entry("mode").or_insert_with(|| json!("ruler"));
    }
    serde_json::from_value(value).map_err(|e| PipelineError::InvalidInput(format!("malformed calibration: {e}")))
}

async fn post_calibration(
    State(s): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<serde_json::Value>> {
    let spec = calibration_spec(&body)?;
    let lock = s.case_lock(&id);
    let _held = lock.lock().await;
    let case = s.get_case(&id).await?;
    let settings = s.manifest.read().await.settings;
    let dir = s.dir.clone();
    let (sidecar, rel) = blocking(move || calibrate_case(&dir, &settings, &case, &spec)).await?;
    let record = s
        .update_case(&id, |c| {
            c.set_calibration(sidecar.clone(), rel);
            Ok(())
        })
        .await?;
    Ok(Json(json!({
        "spacing_mm": sidecar.source_spacing_mm,
        "rectified_spacing_mm": sidecar.spacing_mm,
        "case": record,
    })))
}

async fn post_segment(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<CaseRecord>> {
    let lock = s.case_lock(&id);
    let _held = lock.lock().await;
    let case = s.get_case(&id).await?;
    if case.state == CaseState::Raw {
        return Err(PipelineError::Conflict(format!("case {id} must be calibrated before segmentation")).into());
    }
    let segmenter = s
        .segmenter
        .clone()
        .ok_or_else(|| PipelineError::Conflict("the project has no model configured".into()))?;
    let settings = s.manifest.read().await.settings;
    let dir = s.dir.clone();
    let (rel, eval) = blocking(move || segment_case(&dir, &settings, &case, &segmenter)).await?;
    Ok(Json(s.update_case(&id, |c| c.set_prediction(rel, eval)).await?))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct QcBody {
    rating: QcRating,
    rater: String,
}

async fn post_qc(
    State(s): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<CaseRecord>> {
    let qc: QcBody = parse_body(&body)?;
    let lock = s.case_lock(&id);
    let _held = lock.lock().await;
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    Ok(Json(s.update_case(&id, |c| c.add_qc(qc.rating, qc.rater, now)).await?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectSummary {
    pub cases: usize,
    pub states: BTreeMap<String, usize>,
    pub qc: BTreeMap<String, usize>,
    /// Metric summary over evaluated cases; `null` until one exists.
    pub stats: Option<SummaryStats>,
}

pub fn project_summary(m: &ProjectManifest) -> ProjectSummary {
    let mut states = BTreeMap::new();
    let mut qc: BTreeMap<String, usize> = ["pass", "fail", "unrated"].iter().map(|k| (k.to_string(), 0)).collect();
    for c in &m.cases {
        *states.entry(variant(&c.state)).or_insert(0) += 1;
        *qc.entry(variant(&c.qc.rating)).or_insert(0) += 1;
    }
    let reports: Vec<_> = m.cases.iter().filter_map(|c| c.eval.clone()).collect();
    ProjectSummary {
        cases: m.cases.len(),
        states,
        qc,
        stats: summarize(&reports).ok(),
    }
}

/// Serialized name of a unit enum variant.
fn variant<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

async fn get_summary(State(s): State<Arc<AppState>>) -> Json<ProjectSummary> {
    Json(project_summary(&*s.manifest.read().await))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/cases", get(list_cases))
        .route("/cases/{id}", get(get_case))
        .route("/cases/{id}/image", get(case_image))
        .route("/cases/{id}/mask", get(case_mask))
        .route("/cases/{id}/calibration", post(post_calibration))
        .route("/cases/{id}/segment", post(post_segment))
        .route("/cases/{id}/qc", post(post_qc))
        .route("/summary", get(get_summary))
        .with_state(state)
}

/// Serves a project until the process is stopped.
pub async fn serve(dir: &Path, addr: SocketAddr) -> Result<(), PipelineError> {
    let state = AppState::open(dir)?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| PipelineError::InvalidInput(format!("cannot bind {addr}: {e}")))?;
    log::info!("serving {} on http://{addr}", dir.display());
    axum::serve(listener, router(state))
        .await
        .map_err(|e| PipelineError::InvalidInput(format!("server stopped: {e}")))
}
