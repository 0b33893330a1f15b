//! HTTP API for palette extraction and style-transfer jobs.
//!
//! Routes:
//! - `POST /images` (multipart `image`) stores an upload and returns its ref
//! - `POST /palettes` (multipart `image`, optional `k`) extracts a palette
//! - `POST /jobs` submits a transfer job, `GET /jobs` lists them
//! - `GET /jobs/{id}`, `GET /jobs/{id}/image?iter=latest|final|N`
//! - `DELETE /jobs/{id}` cancels a job

mod error;
mod jobs;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::Ordering;
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cams_core::imaging::{decode_image, fit_within};
use cams_core::palette::{extract_palette, hex, DEFAULT_PALETTE_SIZE};
use cams_core::transfer::{AssociationMap, TransferConfig, TransferMode};
use cams_core::{FeatureExtractor, Image};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;

pub use error::ApiError;
use jobs::{JobHandle, JobRecord, JobSpec};
pub use jobs::{JobStatus, JobView, Progress};

pub const MAX_UPLOAD_BYTES: usize = 20 * 1024 * 1024;
/// Uploads are downscaled so their longer side is at most this.
pub const MAX_STORED_SIDE: usize = 2048;

#[derive(Clone)]
pub struct ServiceConfig {
    pub backbone: Arc<FeatureExtractor>,
    /// Number of jobs allowed to run at once.
    pub workers: usize,
    /// When set, finished jobs also write their artifacts here.
    pub data_dir: Option<PathBuf>,
    /// When set, files under this directory are served for unmatched paths.
    pub static_dir: Option<PathBuf>,
    pub max_upload_bytes: usize,
}

impl ServiceConfig {
    pub fn new(backbone: FeatureExtractor) -> Self {
        Self {
            backbone: Arc::new(backbone),
            workers: 1,
            data_dir: None,
            static_dir: None,
            max_upload_bytes: MAX_UPLOAD_BYTES,
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    cfg: ServiceConfig,
    images: Arc<RwLock<HashMap<String, Arc<Image>>>>,
    jobs: Arc<RwLock<HashMap<String, Arc<JobHandle>>>>,
    job_order: Arc<Mutex<Vec<String>>>,
    workers: Arc<Semaphore>,
}

impl AppState {
    pub fn new(cfg: ServiceConfig) -> Self {
        let workers = Arc::new(Semaphore::new(cfg.workers.max(1)));
        Self {
            cfg,
            images: Arc::default(),
            jobs: Arc::default(),
            job_order: Arc::default(),
            workers,
        }
    }

    fn image(&self, id: &str) -> Result<Arc<Image>, ApiError> {
        self.images
            .read()
            .expect("image store lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("unknown image ref '{id}'")))
    }

    fn job(&self, id: &str) -> Result<Arc<JobHandle>, ApiError> {
        self.jobs
            .read()
            .expect("job store lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("unknown job '{id}'")))
    }

    fn store_image(&self, img: Image) -> String {
        let id = uuid::Uuid::new_v4().simple().to_string();
        self.images
            .write()
            .expect("image store lock")
            .insert(id.clone(), Arc::new(img));
        id
    }
}

pub fn router(state: AppState) -> Router {
    let limit = state.cfg.max_upload_bytes;
    let static_dir = state.cfg.static_dir.clone();
    let api = Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/images", post(upload_image))
        .route("/palettes", post(palettes))
        .route("/jobs", post(submit_job).get(list_jobs))
        .route("/jobs/{id}", get(job_status).delete(cancel_job))
        .route("/jobs/{id}/image", get(job_image))
        .layer(DefaultBodyLimit::max(limit))
        .layer(CorsLayer::permissive())
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

pub async fn serve(addr: SocketAddr, cfg: ServiceConfig) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(AppState::new(cfg))).await
}

struct Upload {
    image: Option<Image>,
    k: Option<String>,
}

async fn read_upload(mut multipart: Multipart) -> Result<Upload, ApiError> {
    let mp_err = |e: axum::extract::multipart::MultipartError| {
        if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
            ApiError::TooLarge
        } else {
            ApiError::BadRequest(format!("bad multipart body: {}", e.body_text()))
        }
    };
    let mut up = Upload { image: None, k: None };
    while let Some(field) = multipart.next_field().await.map_err(mp_err)? {
        match field.name() {
            Some("image") | Some("file") => {
                let bytes = field.bytes().await.map_err(mp_err)?;
                let img = decode_image(&bytes, Some(MAX_STORED_SIDE))
                    .map_err(|e| ApiError::BadRequest(format!("not a PNG or JPEG image: {e}")))?;
                up.image = Some(img);
            }
            Some("k") => up.k = Some(field.text().await.map_err(mp_err)?),
            _ => {}
        }
    }
    Ok(up)
}

#[derive(Serialize)]
struct ImageRef {
    id: String,
    height: usize,
    width: usize,
}

async fn upload_image(State(state): State<AppState>, multipart: Multipart) -> Result<Json<ImageRef>, ApiError> {
    let up = read_upload(multipart).await?;
    let img = up
        .image
        .ok_or_else(|| ApiError::BadRequest("missing 'image' field".into()))?;
    let (height, width) = (img.height(), img.width());
    let id = state.store_image(img);
    Ok(Json(ImageRef { id, height, width }))
}

#[derive(Serialize)]
struct PaletteResponse {
    image_id: String,
    colors: Vec<[f64; 3]>,
    hex: Vec<String>,
    populations: Vec<f64>,
    degenerate: bool,
}

async fn palettes(State(state): State<AppState>, multipart: Multipart) -> Result<Json<PaletteResponse>, ApiError> {
    let up = read_upload(multipart).await?;
    let k = match up.k.as_deref().map(str::trim) {
        None | Some("") => DEFAULT_PALETTE_SIZE,
        Some(s) => s
            .parse::<usize>()
            .map_err(|_| ApiError::BadRequest(format!("k must be a positive integer, got '{s}'")))?,
    };
    if k == 0 {
        return Err(ApiError::BadRequest("k must be >= 1".into()));
    }
    let img = up
        .image
        .ok_or_else(|| ApiError::BadRequest("missing 'image' field".into()))?;
    let p = extract_palette(&img, k)?;
    let image_id = state.store_image(img);
    Ok(Json(PaletteResponse {
        image_id,
        hex: p.colors.iter().map(hex).collect(),
        colors: p.colors,
        populations: p.populations,
        degenerate: p.degenerate,
    }))
}

#[derive(Debug, Deserialize)]
struct JobRequest {
    content: String,
    style: String,
    #[serde(default)]
    config: Option<TransferConfig>,
    #[serde(default)]
    associations: Option<AssociationMap>,
    #[serde(default)]
    baseline: bool,
}

#[derive(Serialize)]
struct JobCreated {
    id: String,
    status: JobStatus,
}

fn fit(img: &Image, max_side: usize) -> Result<Image, ApiError> {
    let (h, w) = (img.height(), img.width());
    if h.max(w) <= max_side {
        return Ok(img.clone());
    }
    let (oh, ow) = fit_within(h, w, max_side);
    Ok(img.resized(oh, ow)?)
}

async fn submit_job(
    State(state): State<AppState>,
    body: Result<Json<JobRequest>, axum::extract::rejection::JsonRejection>,
) -> Result<(StatusCode, Json<JobCreated>), ApiError> {
    let Json(req) = body.map_err(|e| ApiError::BadRequest(e.body_text()))?;
    let mut config = req.config.unwrap_or_default();
    if req.associations.is_some() {
        config.associations = req.associations;
    }
    config.validate()?;
    let content = Arc::new(fit(&*state.image(&req.content)?, config.max_side)?);
    let style = Arc::new(fit(&*state.image(&req.style)?, config.max_side)?);
    let min = state.cfg.backbone.min_input();
    for img in [&content, &style] {
        if img.height() < min || img.width() < min {
            return Err(ApiError::BadRequest(format!(
                "image {}x{} is smaller than the backbone minimum {min}x{min}",
                img.height(),
                img.width()
            )));
        }
    }
    if config.mode == TransferMode::Manual && !req.baseline {
        let assoc = config.associations.as_ref().expect("validated");
        let pc = extract_palette(&content, config.palette_k)?;
        let ps = extract_palette(&style, config.palette_k)?;
        assoc.validate(pc.colors.len(), ps.colors.len())?;
    }
    let id = uuid::Uuid::new_v4().simple().to_string();
    let handle = Arc::new(JobHandle {
        record: Mutex::new(JobRecord {
            id: id.clone(),
            status: JobStatus::Queued,
            error: None,
            config: config.clone(),
            baseline: req.baseline,
            content_ref: req.content,
            style_ref: req.style,
            progress: Progress {
                iter: 0,
                total_iters: config.iterations,
                losses: None,
            },
            loss_history: Vec::new(),
            snapshots: Default::default(),
            final_png: None,
            palettes: None,
            wall_time_s: None,
        }),
        cancel: Default::default(),
    });
    state
        .jobs
        .write()
        .expect("job store lock")
        .insert(id.clone(), handle.clone());
    state.job_order.lock().expect("job order lock").push(id.clone());
    let spec = JobSpec {
        content,
        style,
        config,
        baseline: req.baseline,
    };
    tokio::spawn(jobs::run_job(
        handle,
        spec,
        state.cfg.backbone.clone(),
        state.workers.clone(),
        state.cfg.data_dir.clone(),
    ));
    Ok((
        StatusCode::ACCEPTED,
        Json(JobCreated {
            id,
            status: JobStatus::Queued,
        }),
    ))
}

async fn list_jobs(State(state): State<AppState>) -> Json<Vec<JobView>> {
    let order = state.job_order.lock().expect("job order lock").clone();
    let jobs = state.jobs.read().expect("job store lock");
    Json(order.iter().filter_map(|id| jobs.get(id)).map(|h| h.view()).collect())
}

async fn job_status(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<JobView>, ApiError> {
    Ok(Json(state.job(&id)?.view()))
}

async fn cancel_job(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<(StatusCode, Json<JobView>), ApiError> {
    let handle = state.job(&id)?;
    handle.cancel.store(true, Ordering::SeqCst);
    Ok((StatusCode::ACCEPTED, Json(handle.view())))
}

#[derive(Deserialize)]
struct ImageQuery {
    iter: Option<String>,
}

async fn job_image(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<ImageQuery>,
) -> Result<Response, ApiError> {
    let handle = state.job(&id)?;
    let png = {
        let rec = handle.record.lock().expect("job lock");
        let which = q.iter.as_deref().unwrap_or("latest");
        match which {
            "final" => rec
                .final_png
                .clone()
                .ok_or_else(|| ApiError::Conflict("job has not finished".into()))?,
            "latest" => rec
                .final_png
                .clone()
                .or_else(|| rec.snapshots.values().next_back().cloned())
                .ok_or_else(|| ApiError::Conflict("no snapshot available yet".into()))?,
            n => {
                let n: usize = n
                    .parse()
                    .map_err(|_| ApiError::BadRequest(format!("iter must be latest, final or a number, got '{n}'")))?;
                match rec.snapshots.get(&n) {
                    Some(p) => p.clone(),
                    None if rec.snapshots.is_empty() => {
                        return Err(ApiError::Conflict("no snapshot available yet".into()))
                    }
                    None => {
                        let have: Vec<usize> = rec.snapshots.keys().copied().collect();
                        return Err(ApiError::NotFound(format!(
                            "no snapshot at iteration {n}; have {have:?}"
                        )));
                    }
                }
            }
        }
    };
    Ok(([(header::CONTENT_TYPE, "image/png")], png.as_ref().clone()).into_response())
}
