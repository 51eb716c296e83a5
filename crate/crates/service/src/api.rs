//! HTTP API.
//!
//! | method | path | body | response |
//! |---|---|---|---|
//! | POST | `/sessions` | none | `{"id"}` |
//! | POST | `/sessions/{id}/project` | `{"image": base64 PNG, "class", "space"?, "steps"?}` | `{"hash", "z", "losses", "best_loss", …}` |
//! | POST | `/sessions/{id}/render` | recipe JSON | `{"image": data URI, "diagnostics", "timing"}` |
//! | GET | `/model/info` | | layer count, resolutions, classes, latent size |
//! | GET | `/healthz` | | `{"status", "bundle_loaded"}` |
//!
//! Errors are `{"error", "diagnostics"?}` with 400 for invalid input (with
//! JSON pointers), 404 for unknown sessions, 409 when a real base image has
//! not been projected in the session, and 503 without a loaded bundle.

use std::collections::HashMap;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use collage_core::collage::{EditRecipe, LayerDiagnostic};
use collage_core::image::{data_uri, decode_base64, decode_png, RefResolver};
use collage_core::trainer::Bundle;
use collage_core::{CollageError, Diagnostic};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::{Mutex, RwLock};

use crate::engine::{base_image_bytes, image_hash, project_image, render_recipe, ProjectOptions, Space, Timing};

/// Latent recovered for one uploaded image.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CachedProjection {
    pub class: usize,
    pub space: Space,
    pub z: Vec<f64>,
    pub losses: Vec<f64>,
    pub best_loss: f64,
    pub best_iteration: usize,
}

#[derive(Debug, Default)]
pub struct Session {
    /// Projections keyed by the SHA-256 of the uploaded PNG bytes.
    pub projections: HashMap<String, CachedProjection>,
    /// Last recipe rendered in this session.
    pub draft: Option<EditRecipe>,
}

pub struct AppState {
    bundle: Option<Arc<Bundle>>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    defaults: ProjectOptions,
}

impl AppState {
    pub fn new(bundle: Option<Bundle>, defaults: ProjectOptions) -> Arc<Self> {
        Arc::new(AppState { bundle: bundle.map(Arc::new), sessions: RwLock::new(HashMap::new()), defaults })
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/model/info", get(model_info))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/project", post(project))
        .route("/sessions/{id}/render", post(render))
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    diagnostics: Vec<Diagnostic>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into(), diagnostics: Vec::new() }
    }
}

impl From<CollageError> for ApiError {
    fn from(e: CollageError) -> Self {
        match e {
            CollageError::InvalidRecipe(d) => ApiError { status: StatusCode::BAD_REQUEST, message: "invalid recipe".into(), diagnostics: d },
            CollageError::Validation(_) | CollageError::Image(_) | CollageError::Parameter(_) => {
                ApiError::new(StatusCode::BAD_REQUEST, e.to_string())
            }
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if !self.diagnostics.is_empty() {
            body["diagnostics"] = json!(self.diagnostics);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn bundle(state: &AppState) -> ApiResult<Arc<Bundle>> {
    state.bundle.clone().ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no model bundle is loaded"))
}

async fn session(state: &AppState, id: &str) -> ApiResult<Arc<Mutex<Session>>> {
    state
        .sessions
        .read()
        .await
        .get(id)
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> collage_core::Result<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

async fn healthz(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "bundle_loaded": state.bundle.is_some() }))
}

async fn model_info(State(state): State<Arc<AppState>>) -> ApiResult<Json<serde_json::Value>> {
    Ok(Json(json!(bundle(&state)?.info())))
}

async fn create_session(State(state): State<Arc<AppState>>) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    bundle(&state)?;
    let id = uuid::Uuid::new_v4().to_string();
    state.sessions.write().await.insert(id.clone(), Arc::new(Mutex::new(Session::default())));
    Ok((StatusCode::CREATED, Json(json!({ "id": id }))))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProjectRequest {
    /// Base64 PNG, optionally as a data URI.
    image: String,
    class: usize,
    space: Option<Space>,
    steps: Option<usize>,
}

#[derive(Serialize)]
struct ProjectResponse {
    hash: String,
    cached: bool,
    #[serde(flatten)]
    projection: CachedProjection,
}

async fn project(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: String) -> ApiResult<Json<ProjectResponse>> {
    let bundle = bundle(&state)?;
    let session = session(&state, &id).await?;
    let req: ProjectRequest = parse_json(&body)?;
    let bytes = decode_base64(&req.image).map_err(|e| bad_field("/image", e))?;
    let image = decode_png(&bytes).map_err(|e| bad_field("/image", e))?;
    let opts = ProjectOptions { space: req.space.unwrap_or(state.defaults.space), steps: req.steps.unwrap_or(state.defaults.steps), ..state.defaults };
    let hash = image_hash(&bytes);

    let mut session = session.lock().await;
    if let Some(hit) = session.projections.get(&hash).filter(|p| p.class == req.class && p.space == opts.space) {
        return Ok(Json(ProjectResponse { hash, cached: true, projection: hit.clone() }));
    }
    let class = req.class;
    let p = blocking(move || project_image(&bundle, &image, class, &opts)).await?;
    let projection = CachedProjection { class, space: opts.space, z: p.z, losses: p.losses, best_loss: p.best_loss, best_iteration: p.best_iteration };
    session.projections.insert(hash.clone(), projection.clone());
    Ok(Json(ProjectResponse { hash, cached: false, projection }))
}

#[derive(Serialize)]
struct RenderResponse {
    /// `data:image/png;base64,…`.
    image: String,
    diagnostics: RenderDiagnostics,
    timing: Timing,
}

#[derive(Serialize)]
struct RenderDiagnostics {
    layers: Vec<LayerDiagnostic>,
}

async fn render(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: String) -> ApiResult<Json<RenderResponse>> {
    let bundle = bundle(&state)?;
    let session = session(&state, &id).await?;
    let recipe = EditRecipe::from_json(&body)?;
    let images = RefResolver::inline_only();

    let mut session = session.lock().await;
    let base_latent = match base_image_bytes(&recipe, &images) {
        None => None,
        Some(bytes) => {
            let bytes = bytes.map_err(|e| bad_field("/base/image_ref", e))?;
            let hit = session.projections.get(&image_hash(&bytes)).ok_or_else(|| {
                ApiError::new(StatusCode::CONFLICT, "the base image has not been projected in this session")
            })?;
            Some(hit.z.clone())
        }
    };
    let draft = recipe.clone();
    let out = blocking(move || render_recipe(&bundle, &recipe, &images, base_latent.as_deref())).await?;
    session.draft = Some(draft);
    Ok(Json(RenderResponse { image: data_uri(&out.png), diagnostics: RenderDiagnostics { layers: out.layers }, timing: out.timing }))
}

fn bad_field(pointer: &str, e: CollageError) -> ApiError {
    ApiError { status: StatusCode::BAD_REQUEST, message: e.to_string(), diagnostics: vec![Diagnostic::new(pointer, e.to_string())] }
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &str) -> ApiResult<T> {
    let de = &mut serde_json::Deserializer::from_str(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let pointer = collage_core::collage::pointer_from_path(&e.path().to_string());
        ApiError { status: StatusCode::BAD_REQUEST, message: e.inner().to_string(), diagnostics: vec![Diagnostic::new(pointer, e.inner().to_string())] }
    })
}
