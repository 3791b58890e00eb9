//! HTTP job service.
//!
//! | verb | path                              | body / response                                    |
//! |------|-----------------------------------|----------------------------------------------------|
//! | GET  | `/health`                         | status, run directory, checkpoint versions          |
//! | GET  | `/v1/jobs`                        | every job, oldest first                             |
//! | POST | `/v1/jobs/generate`               | [`GenerateRequest`] -> 202 [`Submitted`]            |
//! | POST | `/v1/jobs/segment`                | [`SegmentRequest`] -> 202 [`Submitted`]             |
//! | POST | `/v1/jobs/export`                 | [`ExportRequest`] -> 202 [`Submitted`]              |
//! | GET  | `/v1/jobs/{id}`                   | [`Job`]                                             |
//! | GET  | `/v1/jobs/{id}/images/{index}`    | `image/png`                                         |
//! | GET  | `/v1/jobs/{id}/archive`           | `application/x-tar` (export jobs)                   |
//!
//! Errors are `{"error": {"code", "message", "field"?}}` with 400 for bad
//! requests, 404 for unknown jobs or images, 409 for results not ready yet
//! and 503 when a required checkpoint is missing.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use emojich::pipeline::{self, Artifact, ModelSlot, RunDir};
use emojich::sampler::SamplingConfig;
use emojich::segmentation;
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, Mutex};

use crate::jobs::{Job, JobKind, JobStatus, JobStore};

/// Largest batch a single generation request may ask for.
pub const MAX_BATCH: usize = 64;

#[derive(Clone, Debug)]
pub struct ServeConfig {
    pub run_dir: PathBuf,
    pub addr: String,
    pub workers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub caption: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub batch: Option<usize>,
    #[serde(default)]
    pub top_k: Option<usize>,
    #[serde(default)]
    pub top_p: Option<f64>,
    #[serde(default)]
    pub temperature: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentRequest {
    /// A finished generate job.
    pub generation_job: String,
    /// Image indices within it; all when empty.
    #[serde(default)]
    pub indices: Vec<usize>,
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub hard: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportRequest {
    pub name: String,
    /// Finished segment jobs; every sticker of each is included.
    pub segment_jobs: Vec<String>,
    #[serde(default)]
    pub side: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Submitted {
    pub job_id: String,
    pub status: JobStatus,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    field: Option<String>,
}

impl ApiError {
    fn bad(field: &str, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            code: "bad_request",
            message: message.into(),
            field: Some(field.into()),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            code: "not_found",
            message: message.into(),
            field: None,
        }
    }

    fn conflict(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::CONFLICT,
            code: "not_ready",
            message: message.into(),
            field: None,
        }
    }
}

impl From<emojich::Error> for ApiError {
    fn from(e: emojich::Error) -> Self {
        let (status, code) = match &e {
            emojich::Error::MissingArtifact { .. } => {
                (StatusCode::SERVICE_UNAVAILABLE, "unavailable")
            }
            emojich::Error::InvalidArgument(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self {
            status,
            code,
            message: e.to_string(),
            field: None,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = serde_json::json!({ "code": self.code, "message": self.message });
        if let Some(f) = self.field {
            body["field"] = f.into();
        }
        (self.status, Json(serde_json::json!({ "error": body }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Parses a JSON body, reporting the offending field path on failure.
fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> ApiResult<T> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let msg = inner.to_string();
        let field = if path != "." {
            path
        } else {
            // missing / unknown fields are reported at the parent level
            msg.split('`').nth(1).unwrap_or("body").to_string()
        };
        ApiError::bad(&field, msg)
    })
}

pub struct AppState {
    pub run: RunDir,
    pub store: JobStore,
    pub workers: usize,
    queue: mpsc::UnboundedSender<String>,
}

impl AppState {
    /// Opens the journal, re-queues unfinished jobs and starts `workers`
    /// worker tasks on the current runtime.
    pub fn open(run_dir: impl Into<PathBuf>, workers: usize) -> emojich::Result<Arc<Self>> {
        let run = RunDir::new(run_dir.into());
        let (store, requeue) = JobStore::open(run.path("jobs/journal.jsonl"))?;
        let (tx, rx) = mpsc::unbounded_channel();
        let state = Arc::new(Self {
            run,
            store,
            workers: workers.max(1),
            queue: tx,
        });
        for id in requeue {
            let _ = state.queue.send(id);
        }
        let rx = Arc::new(Mutex::new(rx));
        for _ in 0..state.workers {
            let rx = rx.clone();
            let st = state.clone();
            tokio::spawn(async move {
                loop {
                    let next = rx.lock().await.recv().await;
                    let Some(id) = next else { break };
                    run_job(st.clone(), id).await;
                }
            });
        }
        Ok(state)
    }

    fn enqueue(&self, kind: JobKind, request: serde_json::Value) -> ApiResult<Submitted> {
        let job = self.store.submit(kind, request)?;
        self.queue
            .send(job.id.clone())
            .map_err(|_| ApiError::from(emojich::Error::Contract("worker pool stopped".into())))?;
        Ok(Submitted {
            job_id: job.id,
            status: job.status,
        })
    }

    fn job(&self, id: &str) -> ApiResult<Job> {
        self.store
            .get(id)
            .ok_or_else(|| ApiError::not_found(format!("no job {id}")))
    }

    fn require(&self, slot: ModelSlot) -> ApiResult<()> {
        let path = self.run.checkpoint_path(slot);
        if path.is_file() {
            Ok(())
        } else {
            Err(emojich::Error::MissingArtifact {
                path,
                step: slot.producer().into(),
            }
            .into())
        }
    }

    /// A finished job of `kind` named in a request field.
    fn finished(&self, field: &str, id: &str, kind: JobKind) -> ApiResult<Job> {
        let job = self
            .store
            .get(id)
            .ok_or_else(|| ApiError::bad(field, format!("no job {id}")))?;
        if job.kind != kind {
            return Err(ApiError::bad(
                field,
                format!("job {id} is a {:?} job", job.kind),
            ));
        }
        if job.status != JobStatus::Done {
            return Err(ApiError::bad(field, format!("job {id} has not finished")));
        }
        Ok(job)
    }
}

async fn run_job(state: Arc<AppState>, id: String) {
    if let Err(e) = state.store.start(&id) {
        log::error!("cannot start job {id}: {e}");
        return;
    }
    let st = state.clone();
    let jid = id.clone();
    let outcome = tokio::task::spawn_blocking(move || execute(&st, &jid)).await;
    let recorded = match outcome {
        Ok(Ok((result, artifacts))) => state.store.finish(&id, result, artifacts),
        Ok(Err(e)) => state.store.fail(&id, &e.to_string()),
        Err(e) => state.store.fail(&id, &format!("job panicked: {e}")),
    };
    if let Err(e) = recorded {
        log::error!("cannot record outcome of job {id}: {e}");
    }
}

fn job_dir(state: &AppState, id: &str) -> PathBuf {
    state.run.path(format!("jobs/{id}"))
}

fn result_dir(job: &Job, key: &str) -> emojich::Result<String> {
    job.result
        .as_ref()
        .and_then(|r| r[key]["dir"].as_str())
        .map(String::from)
        .ok_or_else(|| emojich::Error::Contract(format!("job {} has no {key} directory", job.id)))
}

/// Runs one job through the shared pipeline.
fn execute(state: &AppState, id: &str) -> emojich::Result<(serde_json::Value, Vec<Artifact>)> {
    let job = state
        .store
        .get(id)
        .ok_or_else(|| emojich::Error::Contract(format!("job {id} vanished")))?;
    let run = &state.run;
    match job.kind {
        JobKind::Generate => {
            let req: GenerateRequest = serde_json::from_value(job.request.clone())?;
            let opts = pipeline::GenerateOptions {
                caption: req.caption.clone(),
                sampling: sampling_config(&req),
                model: ModelSlot::LmEmojich,
                out_dir: Some(job_dir(state, id)),
            };
            let out = pipeline::generate(run, &opts)?;
            let mut artifacts: Vec<Artifact> = Vec::new();
            let images: Vec<String> = out
                .records
                .iter()
                .map(|r| format!("{}/{}", out.dir, r.file))
                .collect();
            for (r, path) in out.records.iter().zip(&images) {
                artifacts.push(Artifact {
                    path: path.clone(),
                    sha256: r.sha256.clone(),
                    bytes: std::fs::metadata(run.path(path))
                        .map(|m| m.len())
                        .unwrap_or(0),
                });
            }
            artifacts.push(out.manifest.clone());
            Ok((
                serde_json::json!({ "generation": out, "images": images }),
                artifacts,
            ))
        }
        JobKind::Segment => {
            let req: SegmentRequest = serde_json::from_value(job.request.clone())?;
            let gen_job = state.store.get(&req.generation_job).ok_or_else(|| {
                emojich::Error::InvalidArgument(format!("no job {}", req.generation_job))
            })?;
            let dir = run.path(result_dir(&gen_job, "generation")?);
            let sources = pipeline::generation_sources(&dir, &req.indices)?;
            let opts = pipeline::SegmentOptions {
                threshold: req.threshold.unwrap_or(segmentation::DEFAULT_THRESHOLD),
                hard: req.hard.unwrap_or(true),
                out_dir: Some(job_dir(state, id)),
            };
            let out = pipeline::segment(run, &sources, &opts)?;
            let images: Vec<String> = out.records.iter().map(|r| r.rgba.path.clone()).collect();
            let artifacts = out
                .records
                .iter()
                .flat_map(|r| [r.mask.clone(), r.rgba.clone()])
                .collect();
            Ok((
                serde_json::json!({ "segment": out, "images": images }),
                artifacts,
            ))
        }
        JobKind::Export => {
            let req: ExportRequest = serde_json::from_value(job.request.clone())?;
            let mut records = Vec::new();
            for sid in &req.segment_jobs {
                let sj = state
                    .store
                    .get(sid)
                    .ok_or_else(|| emojich::Error::InvalidArgument(format!("no job {sid}")))?;
                records.extend(pipeline::load_segments(
                    &run.path(result_dir(&sj, "segment")?),
                )?);
            }
            let opts = pipeline::ExportOptions {
                name: req.name.clone(),
                side: req.side.unwrap_or(512),
            };
            let out = pipeline::export_pack(run, &records, &opts)?;
            let images: Vec<String> = out
                .pack
                .stickers
                .iter()
                .map(|s| format!("{}/{}", out.dir, s.file))
                .collect();
            let mut artifacts: Vec<Artifact> = out
                .pack
                .stickers
                .iter()
                .zip(&images)
                .map(|(s, p)| Artifact {
                    path: p.clone(),
                    sha256: s.sha256.clone(),
                    bytes: std::fs::metadata(run.path(p)).map(|m| m.len()).unwrap_or(0),
                })
                .collect();
            artifacts.push(out.archive.clone());
            Ok((
                serde_json::json!({ "pack": out, "images": images }),
                artifacts,
            ))
        }
    }
}

fn sampling_config(req: &GenerateRequest) -> SamplingConfig {
    let d = SamplingConfig::default();
    SamplingConfig {
        seed: req.seed.unwrap_or(d.seed),
        batch: req.batch.unwrap_or(d.batch),
        top_k: req.top_k.unwrap_or(d.top_k),
        top_p: req.top_p.unwrap_or(d.top_p),
        temperature: req.temperature.unwrap_or(d.temperature),
    }
}

fn validate_generate(req: &GenerateRequest) -> ApiResult<()> {
    if req.caption.trim().is_empty() {
        return Err(ApiError::bad("caption", "caption must not be empty"));
    }
    let cfg = sampling_config(req);
    if cfg.batch == 0 || cfg.batch > MAX_BATCH {
        return Err(ApiError::bad(
            "batch",
            format!("batch must lie in 1..={MAX_BATCH}"),
        ));
    }
    if cfg.top_k == 0 {
        return Err(ApiError::bad("top_k", "top_k must be at least 1"));
    }
    if !(cfg.top_p > 0.0 && cfg.top_p <= 1.0) {
        return Err(ApiError::bad("top_p", "top_p must lie in (0, 1]"));
    }
    if !(cfg.temperature.is_finite() && cfg.temperature > 0.0) {
        return Err(ApiError::bad("temperature", "temperature must be positive"));
    }
    Ok(())
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let jobs = state.store.list();
    let count = |s: JobStatus| jobs.iter().filter(|j| j.status == s).count();
    Json(serde_json::json!({
        "status": "ok",
        "version": env!("CARGO_PKG_VERSION"),
        "run_dir": state.run.root().display().to_string(),
        "workers": state.workers,
        "checkpoints": state.run.checkpoint_versions(),
        "jobs": { "queued": count(JobStatus::Queued), "running": count(JobStatus::Running) },
    }))
}

async fn list_jobs(State(state): State<Arc<AppState>>) -> Json<Vec<Job>> {
    Json(state.store.list())
}

async fn submit_generate(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<Submitted>)> {
    let req: GenerateRequest = parse_body(&body)?;
    validate_generate(&req)?;
    state.require(ModelSlot::Codec)?;
    state.require(ModelSlot::LmEmojich)?;
    let sub = state.enqueue(
        JobKind::Generate,
        serde_json::to_value(&req).expect("serializable"),
    )?;
    Ok((StatusCode::ACCEPTED, Json(sub)))
}

async fn submit_segment(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<Submitted>)> {
    let req: SegmentRequest = parse_body(&body)?;
    if let Some(t) = req.threshold {
        if !(0.0..=1.0).contains(&t) {
            return Err(ApiError::bad("threshold", "threshold must lie in [0, 1]"));
        }
    }
    let gen_job = state.finished("generation_job", &req.generation_job, JobKind::Generate)?;
    let batch = gen_job
        .result
        .as_ref()
        .and_then(|r| r["images"].as_array())
        .map_or(0, Vec::len);
    if let Some(&bad) = req.indices.iter().find(|&&i| i >= batch) {
        return Err(ApiError::bad(
            "indices",
            format!("index {bad} is outside the generation (size {batch})"),
        ));
    }
    let sub = state.enqueue(
        JobKind::Segment,
        serde_json::to_value(&req).expect("serializable"),
    )?;
    Ok((StatusCode::ACCEPTED, Json(sub)))
}

async fn submit_export(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<Submitted>)> {
    let req: ExportRequest = parse_body(&body)?;
    pipeline::validate_pack_name(&req.name).map_err(|e| ApiError::bad("name", e.to_string()))?;
    if req.segment_jobs.is_empty() {
        return Err(ApiError::bad(
            "segment_jobs",
            "select at least one segmented image",
        ));
    }
    if req.side == Some(0) || req.side.is_some_and(|s| s > 2048) {
        return Err(ApiError::bad("side", "side must lie in 1..=2048"));
    }
    for id in &req.segment_jobs {
        state.finished("segment_jobs", id, JobKind::Segment)?;
    }
    let sub = state.enqueue(
        JobKind::Export,
        serde_json::to_value(&req).expect("serializable"),
    )?;
    Ok((StatusCode::ACCEPTED, Json(sub)))
}

async fn get_job(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Json<Job>> {
    Ok(Json(state.job(&id)?))
}

fn done_job(state: &AppState, id: &str) -> ApiResult<Job> {
    let job = state.job(id)?;
    match job.status {
        JobStatus::Done => Ok(job),
        JobStatus::Failed => Err(ApiError::not_found(format!("job {id} failed"))),
        _ => Err(ApiError::conflict(format!("job {id} has not finished"))),
    }
}

async fn read_file(state: &AppState, rel: &str) -> ApiResult<Vec<u8>> {
    let path = state.run.path(rel);
    tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError::from(emojich::Error::io(path, e)))
}

async fn get_image(
    State(state): State<Arc<AppState>>,
    Path((id, index)): Path<(String, usize)>,
) -> ApiResult<Response> {
    let job = done_job(&state, &id)?;
    let rel = job
        .result
        .as_ref()
        .and_then(|r| r["images"].get(index))
        .and_then(|v| v.as_str())
        .ok_or_else(|| ApiError::not_found(format!("job {id} has no image {index}")))?
        .to_string();
    let bytes = read_file(&state, &rel).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn get_archive(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    let job = done_job(&state, &id)?;
    let result = job.result.as_ref();
    let rel = result
        .and_then(|r| r["pack"]["archive"]["path"].as_str())
        .ok_or_else(|| ApiError::not_found(format!("job {id} has no archive")))?
        .to_string();
    let name = result
        .and_then(|r| r["pack"]["pack"]["name"].as_str())
        .unwrap_or("pack")
        .to_string();
    let bytes = read_file(&state, &rel).await?;
    Ok((
        [
            (header::CONTENT_TYPE, "application/x-tar".to_string()),
            (
                header::CONTENT_DISPOSITION,
                format!("attachment; filename=\"{name}.tar\""),
            ),
        ],
        bytes,
    )
        .into_response())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/v1/jobs", get(list_jobs))
        .route("/v1/jobs/generate", post(submit_generate))
        .route("/v1/jobs/segment", post(submit_segment))
        .route("/v1/jobs/export", post(submit_export))
        .route("/v1/jobs/{id}", get(get_job))
        .route("/v1/jobs/{id}/images/{index}", get(get_image))
        .route("/v1/jobs/{id}/archive", get(get_archive))
        .with_state(state)
}

/// Binds `config.addr` and serves until Ctrl-C.
pub async fn serve(config: ServeConfig) -> emojich::Result<()> {
    let state = AppState::open(&config.run_dir, config.workers)?;
    let listener = tokio::net::TcpListener::bind(&config.addr)
        .await
        .map_err(|e| emojich::Error::io(&config.run_dir, e))?;
    let addr: SocketAddr = listener
        .local_addr()
        .map_err(|e| emojich::Error::io(&config.run_dir, e))?;
    log::info!("listening on http://{addr} with {} workers", state.workers);
    eprintln!("listening on http://{addr}");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| emojich::Error::io(&config.run_dir, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn body_errors_name_the_field() {
        let e = parse_body::<GenerateRequest>(&Bytes::from_static(b"{}")).unwrap_err();
        assert_eq!(e.field.as_deref(), Some("caption"));
        let e =
            parse_body::<GenerateRequest>(&Bytes::from_static(br#"{"caption":"a","top_p":"x"}"#))
                .unwrap_err();
        assert_eq!(e.field.as_deref(), Some("top_p"));
        let e =
            parse_body::<GenerateRequest>(&Bytes::from_static(br#"{"caption":"a","colour":1}"#))
                .unwrap_err();
        assert_eq!(e.field.as_deref(), Some("colour"));
        let e = parse_body::<GenerateRequest>(&Bytes::from_static(b"not json")).unwrap_err();
        assert_eq!(e.status, StatusCode::BAD_REQUEST);
    }

    #[test]
    fn generate_validation() {
        let ok = GenerateRequest {
            caption: "кот".into(),
            seed: None,
            batch: None,
            top_k: None,
            top_p: None,
            temperature: None,
        };
        assert!(validate_generate(&ok).is_ok());
        let cases = [
            (
                "caption",
                GenerateRequest {
                    caption: "  ".into(),
                    ..ok.clone()
                },
            ),
            (
                "batch",
                GenerateRequest {
                    batch: Some(0),
                    ..ok.clone()
                },
            ),
            (
                "batch",
                GenerateRequest {
                    batch: Some(MAX_BATCH + 1),
                    ..ok.clone()
                },
            ),
            (
                "top_k",
                GenerateRequest {
                    top_k: Some(0),
                    ..ok.clone()
                },
            ),
            (
                "top_p",
                GenerateRequest {
                    top_p: Some(1.5),
                    ..ok.clone()
                },
            ),
            (
                "temperature",
                GenerateRequest {
                    temperature: Some(0.0),
                    ..ok.clone()
                },
            ),
        ];
        for (field, req) in cases {
            assert_eq!(
                validate_generate(&req).unwrap_err().field.as_deref(),
                Some(field)
            );
        }
    }
}
