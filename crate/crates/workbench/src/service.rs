//! HTTP service backing the annotation UI.
//!
//! | method | path                     | body / response                       |
//! |--------|--------------------------|---------------------------------------|
//! | GET    | `/api/project`           | [`ProjectInfo`]                       |
//! | GET    | `/api/images`            | `[{id, width, height}]` pending       |
//! | GET    | `/api/images/{id}`       | image bytes                           |
//! | GET    | `/api/labels`            | sorted label names                    |
//! | POST   | `/api/annotations`       | [`Annotation`] → `{cropsWritten, files}` |
//! | POST   | `/api/images/{id}/done`  | `{moved}`; repeating it is a no-op    |
//! | GET    | `/`                      | static UI bundle                      |
//!
//! Errors come back as `{"error": "..."}`. Annotation and done requests for
//! the same image are serialized.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fissura::imaging::ImageBuffer;
use serde::Serialize;
use tower_http::services::ServeDir;

use crate::annotate::{crops_from_path, Annotation, DEFAULT_CROPS_PER_SEGMENT};
use crate::error::{Result, WorkbenchError};
use crate::layout::{ProjectLayout, ProjectSummary};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Side of the saved crops.
    pub tile_size: u32,
    /// Directory holding the built UI; a placeholder page is served without it.
    pub ui_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            tile_size: 224,
            ui_dir: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ProjectInfo {
    #[serde(flatten)]
    pub summary: ProjectSummary,
    pub tile_size: u32,
    pub crops_per_segment: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ImageInfo {
    pub id: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct AnnotationResponse {
    pub crops_written: usize,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DoneResponse {
    pub moved: bool,
}

struct AppState {
    layout: ProjectLayout,
    config: ServiceConfig,
    locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
}

impl AppState {
    fn lock_for(&self, id: &str) -> Arc<tokio::sync::Mutex<()>> {
        let mut locks = self.locks.lock().expect("lock table poisoned");
        locks.entry(id.to_string()).or_default().clone()
    }
}

struct ApiError(WorkbenchError);

impl From<WorkbenchError> for ApiError {
    fn from(e: WorkbenchError) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        use fissura::Error as E;
        let status = match &self.0 {
            WorkbenchError::NotFound(_) => StatusCode::NOT_FOUND,
            WorkbenchError::Annotation(_) | WorkbenchError::Layout(_) => StatusCode::BAD_REQUEST,
            WorkbenchError::Core(
                E::WindowTooLarge { .. } | E::Config(_) | E::InvalidArgument(_),
            ) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = serde_json::json!({ "error": self.0.to_string() });
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T> + Send + 'static,
) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| WorkbenchError::Io(std::io::Error::other(e.to_string())))?
        .map_err(ApiError)
}

async fn project(State(s): State<Arc<AppState>>) -> ApiResult<Json<ProjectInfo>> {
    let st = s.clone();
    let summary = blocking(move || st.layout.summary()).await?;
    Ok(Json(ProjectInfo {
        summary,
        tile_size: s.config.tile_size,
        crops_per_segment: DEFAULT_CROPS_PER_SEGMENT,
    }))
}

async fn images(State(s): State<Arc<AppState>>) -> ApiResult<Json<Vec<ImageInfo>>> {
    blocking(move || {
        let mut out = Vec::new();
        for id in s.layout.pending_images()? {
            let path = s.layout.images_dir().join(&id);
            let (width, height) = image::ImageReader::open(&path)?
                .with_guessed_format()?
                .into_dimensions()?;
            out.push(ImageInfo { id, width, height });
        }
        Ok(out)
    })
    .await
    .map(Json)
}

async fn image_bytes(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    let path = s.layout.pending_image(&id)?;
    let bytes = tokio::fs::read(&path).await.map_err(WorkbenchError::from)?;
    let mime = match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        _ => "image/jpeg",
    };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

async fn labels(State(s): State<Arc<AppState>>) -> ApiResult<Json<Vec<String>>> {
    blocking(move || s.layout.labels()).await.map(Json)
}

async fn annotate(
    State(s): State<Arc<AppState>>,
    Json(a): Json<Annotation>,
) -> ApiResult<Json<AnnotationResponse>> {
    let lock = s.lock_for(&a.image_id);
    let _guard = lock.lock().await;
    let written = blocking(move || {
        let path = s.layout.pending_image(&a.image_id)?;
        // Check the label before decoding a possibly large image.
        s.layout.label_dir(&a.label)?;
        let image = ImageBuffer::open(&path)?;
        crops_from_path(&s.layout, &image, &a, s.config.tile_size)
    })
    .await?;
    let files = written
        .iter()
        .map(|p| {
            p.file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned()
        })
        .collect();
    Ok(Json(AnnotationResponse {
        crops_written: written.len(),
        files,
    }))
}

async fn done(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Json<DoneResponse>> {
    let lock = s.lock_for(&id);
    let _guard = lock.lock().await;
    let moved = blocking(move || s.layout.mark_done(&id)).await?;
    Ok(Json(DoneResponse { moved }))
}

const PLACEHOLDER: &str = "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>fissura</title></head>\n\
<body><h1>fissura annotation service</h1>\n\
<p>No UI bundle configured. Start the service with <code>--ui-dir</code> pointing at a built annotator, \
or use the JSON API under <code>/api</code>.</p></body></html>\n";

async fn placeholder() -> Html<&'static str> {
    Html(PLACEHOLDER)
}

pub fn router(layout: ProjectLayout, config: ServiceConfig) -> Router {
    let ui_dir = config.ui_dir.clone();
    let state = Arc::new(AppState {
        layout,
        config,
        locks: Mutex::new(HashMap::new()),
    });
    let api = Router::new()
        .route("/api/project", get(project))
        .route("/api/images", get(images))
        .route("/api/images/{id}", get(image_bytes))
        .route("/api/images/{id}/done", post(done))
        .route("/api/labels", get(labels))
        .route("/api/annotations", post(annotate))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(placeholder)),
    }
}

/// Binds `addr`; a busy port is reported as a startup error.
pub async fn bind(addr: SocketAddr) -> Result<tokio::net::TcpListener> {
    tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| WorkbenchError::Startup(format!("{addr}: {e}")))
}

/// Serves the project on an already bound listener until ctrl-c.
pub async fn serve(
    listener: tokio::net::TcpListener,
    layout: ProjectLayout,
    config: ServiceConfig,
) -> Result<()> {
    let app = router(layout, config);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
