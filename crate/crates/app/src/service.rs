//! Labeling service: scene browsing, segmentation, and polled fit jobs.

use crate::cli::ServeArgs;
use crate::error::AppError;
use crate::raster::fill_polygon;
use crate::segmenter::{SegmenterClient, SegmenterError};
use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use shapefit_core::fit::{fit_instances, ConfigEcho, FitConfig, FitError, FitHooks, FitMode, LabelsFile, Progress};
use shapefit_core::geom::Pose;
use shapefit_core::metrics::harness::PriorCache;
use shapefit_core::prior::{ShapeCode, ShapePrior, BANK_SIZE, DEFAULT_DIM};
use shapefit_core::render::{soft_silhouette, Mask, Rle};
use shapefit_core::scene::{load_scene, Prompt, Scene, SCENE_FILE};
use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use tokio::sync::Semaphore;

pub struct ServiceConfig {
    pub scenes_dir: PathBuf,
    pub prior: Arc<ShapePrior>,
    pub segmenter: Option<SegmenterClient>,
    pub workers: usize,
    pub fit: FitConfig,
    pub labels_dir: Option<PathBuf>,
}

pub struct AppState {
    cfg: ServiceConfig,
    scenes: Mutex<HashMap<String, Arc<Scene>>>,
    masks: Mutex<Vec<(String, Mask)>>,
    jobs: Mutex<JobStore>,
    workers: Arc<Semaphore>,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done { result: LabelsFile },
    Failed { reason: String },
}

#[derive(Debug, Clone)]
struct Job {
    scene_id: String,
    instance_id: u32,
    config: FitConfig,
    state: JobState,
    iteration: usize,
    energy_trace: Vec<f64>,
    current: Option<(Pose, ShapeCode)>,
    cancel: Arc<AtomicBool>,
}

impl Job {
    fn active(&self) -> bool {
        matches!(self.state, JobState::Queued | JobState::Running)
    }
}

#[derive(Default)]
struct JobStore {
    next: u64,
    jobs: HashMap<u64, Job>,
}

/// Snapshot returned by `GET /jobs/{id}`.
#[derive(Debug, Clone, Serialize)]
pub struct JobView {
    pub job_id: u64,
    pub scene_id: String,
    pub instance_id: u32,
    pub config_echo: ConfigEcho,
    #[serde(flatten)]
    pub state: JobState,
    pub iteration: usize,
    pub iterations: usize,
    pub energy_trace: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub silhouette_rle: Option<Rle>,
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn not_found(what: impl std::fmt::Display) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, format!("unknown {what}"))
}

fn unprocessable(m: impl std::fmt::Display) -> ApiError {
    ApiError(StatusCode::UNPROCESSABLE_ENTITY, m.to_string())
}

fn conflict(m: impl std::fmt::Display) -> ApiError {
    ApiError(StatusCode::CONFLICT, m.to_string())
}

fn internal(m: impl std::fmt::Display) -> ApiError {
    ApiError(StatusCode::INTERNAL_SERVER_ERROR, m.to_string())
}

type ApiResult<T> = Result<T, ApiError>;

impl AppState {
    pub fn new(cfg: ServiceConfig) -> Arc<Self> {
        let workers = Arc::new(Semaphore::new(cfg.workers.max(1)));
        Arc::new(Self {
            cfg,
            scenes: Mutex::new(HashMap::new()),
            masks: Mutex::new(Vec::new()),
            jobs: Mutex::new(JobStore::default()),
            workers,
        })
    }

    fn scene_ids(&self) -> Vec<String> {
        let Ok(rd) = std::fs::read_dir(&self.cfg.scenes_dir) else { return Vec::new() };
        let mut ids: Vec<String> = rd
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join(SCENE_FILE).is_file())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        ids.sort();
        ids
    }

    fn scene(&self, id: &str) -> ApiResult<Arc<Scene>> {
        if let Some(s) = self.scenes.lock().expect("scene cache").get(id) {
            return Ok(s.clone());
        }
        if !self.scene_ids().iter().any(|s| s == id) {
            return Err(not_found(format!("scene {id}")));
        }
        let s = Arc::new(load_scene(self.cfg.scenes_dir.join(id)).map_err(internal)?);
        self.scenes.lock().expect("scene cache").insert(id.to_string(), s.clone());
        Ok(s)
    }

    fn image_bytes(&self, id: &str, scene: &Scene) -> ApiResult<Vec<u8>> {
        let name = scene.image.as_ref().ok_or_else(|| not_found(format!("image for scene {id}")))?;
        std::fs::read(self.cfg.scenes_dir.join(id).join(name)).map_err(|_| not_found(format!("image for scene {id}")))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/scenes", get(list_scenes))
        .route("/scenes/{id}", get(scene_meta))
        .route("/scenes/{id}/image", get(scene_image))
        .route("/scenes/{id}/segment", post(segment))
        .route("/scenes/{id}/fit", post(start_fit))
        .route("/jobs/{id}", get(job_status).delete(cancel_job))
        .route("/jobs/{id}/result", get(job_result))
        .with_state(state)
}

fn meta(id: &str, s: &Scene) -> Value {
    json!({
        "id": id,
        "width": s.camera.width,
        "height": s.camera.height,
        "points": s.points.len(),
        "has_image": s.image.is_some(),
        "instances": s.instances.iter().map(|i| json!({"id": i.id, "has_mask": i.mask.is_some(), "prompt": i.prompt})).collect::<Vec<_>>(),
    })
}

async fn list_scenes(State(st): State<Arc<AppState>>) -> ApiResult<Json<Value>> {
    let mut out = Vec::new();
    for id in st.scene_ids() {
        let s = st.scene(&id)?;
        out.push(json!({ "id": id, "meta": meta(&id, &s) }));
    }
    Ok(Json(Value::Array(out)))
}

async fn scene_meta(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let s = st.scene(&id)?;
    Ok(Json(meta(&id, &s)))
}

async fn scene_image(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let s = st.scene(&id)?;
    let bytes = st.image_bytes(&id, &s)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

/// Prompt accepted by the segment endpoint.
#[derive(Debug, Clone, PartialEq)]
pub enum SegmentPrompt {
    Model(Prompt),
    Polygon(Vec<[f64; 2]>),
}

/// Strict parse of `{"prompt": {"points": ...} | {"box": ...} | {"polygon": ...}}`.
pub fn parse_segment_body(body: &[u8]) -> Result<SegmentPrompt, String> {
    let v: Value = serde_json::from_slice(body).map_err(|e| e.to_string())?;
    let p = v.get("prompt").and_then(Value::as_object).ok_or("missing prompt object")?;
    if p.len() != 1 {
        return Err("prompt needs exactly one of points, box, polygon".into());
    }
    let pairs = |x: &Value| -> Result<Vec<[f64; 2]>, String> {
        let arr: Vec<Vec<f64>> = serde_json::from_value(x.clone()).map_err(|e| e.to_string())?;
        arr.into_iter()
            .map(|q| match q.as_slice() {
                [u, v] if u.is_finite() && v.is_finite() => Ok([*u, *v]),
                _ => Err("each point must be [u, v]".to_string()),
            })
            .collect()
    };
    if let Some(x) = p.get("points") {
        let points = pairs(x)?;
        if points.is_empty() {
            return Err("points is empty".into());
        }
        return Ok(SegmentPrompt::Model(Prompt::Points { points }));
    }
    if let Some(x) = p.get("box") {
        let b: [f64; 4] = serde_json::from_value(x.clone()).map_err(|e| e.to_string())?;
        if !b.iter().all(|c| c.is_finite()) || b[2] <= b[0] || b[3] <= b[1] {
            return Err("box must be [u1, v1, u2, v2] with u1 < u2 and v1 < v2".into());
        }
        return Ok(SegmentPrompt::Model(Prompt::Box { bbox: b }));
    }
    if let Some(x) = p.get("polygon") {
        let poly = pairs(x)?;
        if poly.len() < 3 {
            return Err("polygon needs at least 3 vertices".into());
        }
        return Ok(SegmentPrompt::Polygon(poly));
    }
    Err("prompt needs one of points, box, polygon".into())
}

async fn segment(State(st): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let scene = st.scene(&id)?;
    let prompt = parse_segment_body(&body).map_err(unprocessable)?;
    let (w, h) = (scene.camera.width, scene.camera.height);
    let (mask, source, score) = match (prompt, &st.cfg.segmenter) {
        (SegmentPrompt::Polygon(poly), _) => (fill_polygon(&poly, w, h), "user", None),
        (SegmentPrompt::Model(p), Some(client)) => {
            let png = st.image_bytes(&id, &scene)?;
            match client.segment(&png, w, h, &p).await {
                Ok((m, score)) => (m, "external", Some(score)),
                Err(e @ SegmenterError::Unreachable(_)) | Err(e @ SegmenterError::BadResponse(_)) => {
                    return Err(ApiError(StatusCode::BAD_GATEWAY, e.to_string()))
                }
            }
        }
        (SegmentPrompt::Model(_), None) => return Err(unprocessable("no segmenter configured; send a polygon prompt")),
    };
    let rle = mask.to_rle();
    let mask_id = {
        let mut masks = st.masks.lock().expect("mask store");
        masks.push((id.clone(), mask));
        masks.len() - 1
    };
    Ok(Json(json!({ "mask_rle": rle, "source": source, "mask_id": mask_id, "score": score })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FitBody {
    instance_id: u32,
    #[serde(default)]
    instance_mask_rle: Option<Rle>,
    #[serde(default)]
    mask_id: Option<usize>,
    #[serde(default)]
    config: Option<Value>,
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o.clone(),
    }
}

/// Base configuration with JSON overrides applied field by field.
pub fn apply_overrides(base: &FitConfig, over: Option<&Value>) -> Result<FitConfig, String> {
    let Some(over) = over else { return Ok(*base) };
    if !over.is_object() {
        return Err("config must be an object".into());
    }
    let mut v = serde_json::to_value(base).expect("config serializes");
    merge(&mut v, over);
    let cfg: FitConfig = serde_json::from_value(v).map_err(|e| e.to_string())?;
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

async fn start_fit(State(st): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let scene = st.scene(&id)?;
    let req: FitBody = serde_json::from_slice(&body).map_err(unprocessable)?;
    let slot = scene.instances.iter().position(|i| i.id == req.instance_id).ok_or_else(|| not_found(format!("instance {}", req.instance_id)))?;
    let cfg = apply_overrides(&st.cfg.fit, req.config.as_ref()).map_err(unprocessable)?;
    let mask = match (req.instance_mask_rle, req.mask_id) {
        (Some(_), Some(_)) => return Err(unprocessable("give instance_mask_rle or mask_id, not both")),
        (Some(rle), None) => Some(rle.decode().map_err(unprocessable)?),
        (None, Some(m)) => {
            let masks = st.masks.lock().expect("mask store");
            let (sid, mask) = masks.get(m).ok_or_else(|| not_found(format!("mask {m}")))?;
            if *sid != id {
                return Err(unprocessable(format!("mask {m} belongs to scene {sid}")));
            }
            Some(mask.clone())
        }
        (None, None) => None,
    };
    let mut scene = (*scene).clone();
    if let Some(m) = mask {
        m.check_size(scene.camera.width, scene.camera.height).map_err(unprocessable)?;
        scene.instances[slot].mask = Some(m);
    }
    if scene.instances[slot].mask.is_none() {
        return Err(unprocessable(format!("instance {} has no mask", req.instance_id)));
    }
    let cancel = Arc::new(AtomicBool::new(false));
    let job_id = {
        let mut store = st.jobs.lock().expect("job store");
        if store.jobs.values().any(|j| j.active() && j.scene_id == id && j.instance_id == req.instance_id) {
            return Err(conflict(format!("a fit for instance {} of scene {id} is already running", req.instance_id)));
        }
        let jid = store.next;
        store.next += 1;
        store.jobs.insert(
            jid,
            Job {
                scene_id: id.clone(),
                instance_id: req.instance_id,
                config: cfg,
                state: JobState::Queued,
                iteration: 0,
                energy_trace: Vec::new(),
                current: None,
                cancel: cancel.clone(),
            },
        );
        jid
    };
    tokio::spawn(run_job(st.clone(), job_id, Arc::new(scene), req.instance_id, cfg, cancel));
    Ok(Json(json!({ "job_id": job_id })))
}

fn update(st: &AppState, job_id: u64, f: impl FnOnce(&mut Job)) {
    if let Some(j) = st.jobs.lock().expect("job store").jobs.get_mut(&job_id) {
        f(j);
    }
}

async fn run_job(st: Arc<AppState>, job_id: u64, scene: Arc<Scene>, instance_id: u32, cfg: FitConfig, cancel: Arc<AtomicBool>) {
    let Ok(_permit) = st.workers.clone().acquire_owned().await else { return };
    {
        let mut store = st.jobs.lock().expect("job store");
        let Some(j) = store.jobs.get_mut(&job_id) else { return };
        if !matches!(j.state, JobState::Queued) {
            return;
        }
        j.state = JobState::Running;
    }
    let worker = st.clone();
    let outcome = tokio::task::spawn_blocking(move || {
        let st = worker;
        let on_step = |p: &Progress| {
            update(&st, job_id, |j| {
                j.iteration = p.iteration;
                j.energy_trace.push(p.energy);
                j.current = Some((p.pose, p.code.clone()));
            })
        };
        let hooks = FitHooks { on_step: Some(&on_step), cancel: Some(&cancel) };
        fit_instances(&scene, &st.cfg.prior, &cfg, FitMode::Batched, hooks, Some(&[instance_id]))
    })
    .await;
    let state = match outcome {
        Ok(Ok(results)) => {
            let labels = LabelsFile::from_results(&results, &cfg);
            if let Some(dir) = &st.cfg.labels_dir {
                let path = dir.join(&scene_of(&st, job_id)).join(format!("{instance_id}.json"));
                if let Err(e) = path.parent().map_or(Ok(()), std::fs::create_dir_all).and_then(|_| std::fs::write(&path, labels.to_json())) {
                    eprintln!("could not write {}: {e}", path.display());
                }
            }
            JobState::Done { result: labels }
        }
        Ok(Err(FitError::Cancelled)) => JobState::Failed { reason: "cancelled".into() },
        Ok(Err(e)) => JobState::Failed { reason: e.to_string() },
        Err(e) => JobState::Failed { reason: format!("worker panicked: {e}") },
    };
    update(&st, job_id, |j| j.state = state);
}

fn scene_of(st: &AppState, job_id: u64) -> String {
    st.jobs.lock().expect("job store").jobs.get(&job_id).map(|j| j.scene_id.clone()).unwrap_or_default()
}

fn parse_job_id(s: &str) -> ApiResult<u64> {
    s.parse().map_err(|_| not_found(format!("job {s}")))
}

async fn job_status(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<JobView>> {
    let jid = parse_job_id(&id)?;
    let job = st.jobs.lock().expect("job store").jobs.get(&jid).cloned().ok_or_else(|| not_found(format!("job {id}")))?;
    let scene = st.scene(&job.scene_id)?;
    let silhouette_rle = match &job.current {
        Some((pose, code)) => {
            let (st2, pose, code, render) = (st.clone(), *pose, code.clone(), job.config.render);
            let cam = scene.camera.clone();
            tokio::task::spawn_blocking(move || soft_silhouette(&st2.cfg.prior, &code, &pose, &cam, &render).binarized().to_rle())
                .await
                .ok()
        }
        None => None,
    };
    Ok(Json(JobView {
        job_id: jid,
        scene_id: job.scene_id,
        instance_id: job.instance_id,
        config_echo: ConfigEcho::from_config(&job.config),
        state: job.state,
        iteration: job.iteration,
        iterations: job.config.iterations,
        energy_trace: job.energy_trace,
        silhouette_rle,
    }))
}

async fn job_result(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let jid = parse_job_id(&id)?;
    let state = st.jobs.lock().expect("job store").jobs.get(&jid).map(|j| j.state.clone()).ok_or_else(|| not_found(format!("job {id}")))?;
    match state {
        JobState::Done { result } => Ok(([(header::CONTENT_TYPE, "application/json")], result.to_json()).into_response()),
        JobState::Failed { reason } => Err(conflict(format!("job failed: {reason}"))),
        _ => Err(conflict("job has not finished")),
    }
}

async fn cancel_job(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let jid = parse_job_id(&id)?;
    let mut store = st.jobs.lock().expect("job store");
    let job = store.jobs.get_mut(&jid).ok_or_else(|| not_found(format!("job {id}")))?;
    match job.state {
        JobState::Queued => job.state = JobState::Failed { reason: "cancelled".into() },
        JobState::Running => job.cancel.store(true, Ordering::Relaxed),
        _ => return Err(conflict("job already finished")),
    }
    job.cancel.store(true, Ordering::Relaxed);
    Ok(Json(json!({ "job_id": jid, "cancelled": true })))
}

pub fn service_config(a: &ServeArgs) -> Result<ServiceConfig, AppError> {
    if !a.scenes.is_dir() {
        return Err(AppError::data(format!("{}: not a directory", a.scenes.display())));
    }
    let prior = match &a.prior {
        Some(p) => Arc::new(crate::cli::load_prior(p)?),
        None => PriorCache::default().get(BANK_SIZE, DEFAULT_DIM)?,
    };
    let segmenter = match a.segmenter.as_str() {
        "none" | "" => None,
        url => Some(SegmenterClient::new(url)),
    };
    Ok(ServiceConfig {
        scenes_dir: a.scenes.clone(),
        prior,
        segmenter,
        workers: a.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())),
        fit: FitConfig::default(),
        labels_dir: a.labels.clone(),
    })
}

pub fn serve_blocking(a: &ServeArgs) -> Result<(), AppError> {
    let cfg = service_config(a)?;
    let rt = tokio::runtime::Runtime::new().map_err(AppError::internal)?;
    let port = a.port;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await.map_err(|e| AppError::data(format!("port {port}: {e}")))?;
        eprintln!("serving on http://{}", listener.local_addr().map_err(AppError::internal)?);
        axum::serve(listener, router(AppState::new(cfg))).await.map_err(AppError::internal)
    })
}
