//! HTTP API backing the review UI. Reads take a shared lock on the store;
//! every mutation goes through one writer task.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cellattr_core::annotator::{AnnotationRecord, Preprocessing, QualificationGate};
use cellattr_core::data::{augment_pixels, decode_image, encode_png, Pipeline};
use cellattr_core::explain::{grad_cam, overlay, CamModel};
use cellattr_core::models::{load_checkpoint, Cnn, Vit};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::{mpsc, oneshot};
use tower_http::services::ServeDir;

use crate::store::{ReviewBody, ReviewItem, ReviewStore, StatusCounts, StoreError};
use crate::workspace::{run_next_iteration, Workspace};

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    attribute: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            attribute: None,
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match &e {
            StoreError::NotFound(_) => StatusCode::NOT_FOUND,
            StoreError::Conflict { .. } => StatusCode::CONFLICT,
            StoreError::Invalid { .. } | StoreError::EmptyCorrection => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let attribute = match &e {
            StoreError::Invalid { attribute, .. } => Some(attribute.clone()),
            _ => None,
        };
        Self {
            status,
            message: e.to_string(),
            attribute,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if let Some(a) = self.attribute {
            body["attribute"] = json!(a);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct IterationStatus {
    pub running: Option<usize>,
    pub last_error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Stats {
    pub iteration: usize,
    pub counts: StatusCounts,
    pub gaa: Option<f64>,
    pub gate: Option<QualificationGate>,
    pub iteration_running: Option<usize>,
    pub last_error: Option<String>,
}

enum Command {
    Review {
        id: String,
        body: ReviewBody,
        reply: oneshot::Sender<Result<AnnotationRecord, StoreError>>,
    },
    StartIteration {
        reply: oneshot::Sender<ApiResult<usize>>,
    },
    IterationDone {
        result: Result<(), String>,
    },
}

struct Models {
    cnn: Cnn,
    vit: Vit,
    cnn_id: String,
    vit_id: String,
    preprocessing: Preprocessing,
}

#[derive(Clone)]
pub struct AppState {
    store: Arc<RwLock<ReviewStore>>,
    status: Arc<RwLock<IterationStatus>>,
    commands: mpsc::Sender<Command>,
    models: Arc<Mutex<Option<Arc<Models>>>>,
    cam_cache: Arc<Mutex<HashMap<(String, String, String), Vec<u8>>>>,
}

impl AppState {
    /// Opens the work directory and starts the writer task. Must be called
    /// inside a Tokio runtime.
    pub fn open(work_dir: &Path) -> Result<Self, StoreError> {
        let store = Arc::new(RwLock::new(ReviewStore::open(work_dir)?));
        let status = Arc::new(RwLock::new(IterationStatus::default()));
        let (tx, rx) = mpsc::channel(64);
        let state = Self {
            store,
            status,
            commands: tx,
            models: Arc::new(Mutex::new(None)),
            cam_cache: Arc::new(Mutex::new(HashMap::new())),
        };
        tokio::spawn(writer(state.clone(), rx));
        Ok(state)
    }

    async fn send<T>(&self, make: impl FnOnce(oneshot::Sender<T>) -> Command) -> ApiResult<T> {
        let (tx, rx) = oneshot::channel();
        self.commands
            .send(make(tx))
            .await
            .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "writer stopped"))?;
        rx.await.map_err(|_| {
            ApiError::new(
                StatusCode::SERVICE_UNAVAILABLE,
                "writer dropped the request",
            )
        })
    }
}

async fn writer(state: AppState, mut rx: mpsc::Receiver<Command>) {
    while let Some(cmd) = rx.recv().await {
        match cmd {
            Command::Review { id, body, reply } => {
                let result = state.store.write().expect("store lock").review(&id, &body);
                let _ = reply.send(result);
            }
            Command::StartIteration { reply } => {
                let _ = reply.send(start_iteration(&state));
            }
            Command::IterationDone { result } => {
                let work_dir = state.store.read().expect("store lock").work_dir.clone();
                let mut last_error = result.err();
                if last_error.is_none() {
                    match ReviewStore::open(&work_dir) {
                        Ok(s) => *state.store.write().expect("store lock") = s,
                        Err(e) => last_error = Some(e.to_string()),
                    }
                    *state.models.lock().expect("models lock") = None;
                }
                let mut status = state.status.write().expect("status lock");
                status.running = None;
                status.last_error = last_error;
            }
        }
    }
}

fn start_iteration(state: &AppState) -> ApiResult<usize> {
    if let Some(k) = state.status.read().expect("status lock").running {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("iteration {k} is already running"),
        ));
    }
    let (work_dir, current) = {
        let store = state.store.read().expect("store lock");
        (store.work_dir.clone(), store.iteration)
    };
    if !Workspace::exists(&work_dir) {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "work directory was not created by `iterate`; nothing to iterate",
        ));
    }
    let next = if crate::store::latest_iteration(&work_dir).is_some() {
        current + 1
    } else {
        0
    };
    *state.status.write().expect("status lock") = IterationStatus {
        running: Some(next),
        last_error: None,
    };
    let tx = state.commands.clone();
    tokio::spawn(async move {
        let result = tokio::task::spawn_blocking(move || run_next_iteration(&work_dir).map(|_| ()))
            .await
            .map_err(|e| e.to_string())
            .and_then(|r| r.map_err(|e| e.to_string()));
        let _ = tx.send(Command::IterationDone { result }).await;
    });
    Ok(next)
}

#[derive(Deserialize)]
struct Page {
    limit: Option<usize>,
    offset: Option<usize>,
}

async fn queue(State(s): State<AppState>, Query(p): Query<Page>) -> Json<Vec<ReviewItem>> {
    let store = s.store.read().expect("store lock");
    Json(store.queue(p.limit.unwrap_or(50), p.offset.unwrap_or(0)))
}

async fn record(
    State(s): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<AnnotationRecord>> {
    let store = s.store.read().expect("store lock");
    store
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| StoreError::NotFound(id).into())
}

fn load_image(s: &AppState, id: &str) -> ApiResult<cellattr_core::tensor::Tensor> {
    let path = s
        .store
        .read()
        .expect("store lock")
        .image_path(id)
        .ok_or_else(|| ApiError::from(StoreError::NotFound(id.to_string())))?;
    let bytes = std::fs::read(&path)
        .map_err(|e| ApiError::new(StatusCode::NOT_FOUND, format!("{}: {e}", path.display())))?;
    decode_image(&bytes)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn image(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let img = load_image(&s, &id)?;
    Ok(png(encode_png(&img)))
}

fn models(s: &AppState) -> ApiResult<Arc<Models>> {
    let mut slot = s.models.lock().expect("models lock");
    if let Some(m) = slot.as_ref() {
        return Ok(m.clone());
    }
    let run = s
        .store
        .read()
        .expect("store lock")
        .run
        .clone()
        .ok_or_else(|| {
            ApiError::new(
                StatusCode::NOT_FOUND,
                "no model run recorded for this work directory",
            )
        })?;
    let internal = |e: cellattr_core::models::CheckpointError| {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    };
    let cnn_ckpt = load_checkpoint(&run.cnn_checkpoint).map_err(internal)?;
    let vit_ckpt = load_checkpoint(&run.vit_checkpoint).map_err(internal)?;
    let (cnn_id, vit_id) = (cnn_ckpt.id().to_string(), vit_ckpt.id().to_string());
    let m = Arc::new(Models {
        cnn: cnn_ckpt.into_cnn().map_err(internal)?.0,
        vit: vit_ckpt.into_vit().map_err(internal)?.0,
        cnn_id,
        vit_id,
        preprocessing: run.preprocessing,
    });
    *slot = Some(m.clone());
    Ok(m)
}

fn render_cam(s: &AppState, id: &str, head: &str) -> ApiResult<Vec<u8>> {
    let record = s
        .store
        .read()
        .expect("store lock")
        .get(id)
        .cloned()
        .ok_or_else(|| ApiError::from(StoreError::NotFound(id.to_string())))?;
    let codec = s
        .store
        .read()
        .expect("store lock")
        .codec()
        .cloned()
        .ok_or_else(|| {
            ApiError::new(
                StatusCode::NOT_FOUND,
                "no model run recorded for this work directory",
            )
        })?;
    let (cell, attributes) = record.labels();
    let (vocab, value) = if head == "cell_type" {
        (Some(&codec.cell_types), Some(cell))
    } else {
        (codec.attribute(head), attributes.get(head).cloned())
    };
    let class = vocab
        .zip(value)
        .and_then(|(v, value)| v.encode(&value))
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown head `{head}`")))?;
    let m = models(s)?;
    let (model, ckpt, pipeline): (&dyn CamModel, &str, &Pipeline) = if head == "cell_type" {
        (&m.cnn, &m.cnn_id, &m.preprocessing.cnn)
    } else {
        (&m.vit, &m.vit_id, &m.preprocessing.vit)
    };
    let key = (ckpt.to_string(), id.to_string(), head.to_string());
    if let Some(hit) = s.cam_cache.lock().expect("cache lock").get(&key) {
        return Ok(hit.clone());
    }
    let img = load_image(s, id)?;
    let input = augment_pixels(&img, id, pipeline, 0, 0)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let map = grad_cam(model, &input, id, head, class)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let bytes = overlay(&map, &input)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    s.cam_cache
        .lock()
        .expect("cache lock")
        .insert(key, bytes.clone());
    Ok(bytes)
}

async fn cam(
    State(s): State<AppState>,
    UrlPath((id, head)): UrlPath<(String, String)>,
) -> ApiResult<Response> {
    let bytes = tokio::task::spawn_blocking(move || render_cam(&s, &id, &head))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(png(bytes))
}

async fn review(
    State(s): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(body): Json<ReviewBody>,
) -> ApiResult<Json<AnnotationRecord>> {
    let result = s.send(|reply| Command::Review { id, body, reply }).await?;
    Ok(Json(result?))
}

async fn stats(State(s): State<AppState>) -> Json<Stats> {
    let store = s.store.read().expect("store lock");
    let status = s.status.read().expect("status lock");
    Json(Stats {
        iteration: store.iteration,
        counts: store.counts(),
        gaa: store.run.as_ref().and_then(|r| r.gaa),
        gate: store.run.as_ref().map(|r| r.gate),
        iteration_running: status.running,
        last_error: status.last_error.clone(),
    })
}

async fn iterations(State(s): State<AppState>) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let k = s.send(|reply| Command::StartIteration { reply }).await??;
    Ok((StatusCode::ACCEPTED, Json(json!({ "iteration": k }))))
}

/// API routes, plus the review UI bundle when `ui_dir` is given.
pub fn router(state: AppState, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/queue", get(queue))
        .route("/api/records/{id}", get(record))
        .route("/api/records/{id}/review", post(review))
        .route("/api/images/{id}", get(image))
        .route("/api/cam/{id}/{head}", get(cam))
        .route("/api/stats", get(stats))
        .route("/api/iterations", post(iterations))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

pub async fn serve(
    work_dir: &Path,
    addr: SocketAddr,
    ui_dir: Option<PathBuf>,
) -> std::io::Result<()> {
    let state = AppState::open(work_dir).map_err(std::io::Error::other)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!(
        "serving {} on http://{}",
        work_dir.display(),
        listener.local_addr()?
    );
    axum::serve(listener, router(state, ui_dir)).await
}
