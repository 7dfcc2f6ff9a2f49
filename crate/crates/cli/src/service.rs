//! Local HTTP service: a FIFO generation worker behind a small JSON API.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;

use dragflow::conditions::Vocabulary;
use dragflow::imageio::{encode_png, frame_path};
use dragflow::unet::DragModel;
use dragflow::Tensor;

use crate::request::{generate, parse_request, prepare, write_artifacts, GenerationMeta, PreparedRequest};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    fn rank(self) -> u8 {
        match self {
            JobState::Queued => 0,
            JobState::Running => 1,
            JobState::Done | JobState::Failed => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub step: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub state: JobState,
    pub progress: Progress,
    pub artifacts: Vec<PathBuf>,
    pub frames: Vec<String>,
    pub seed: u64,
    pub unknown_words: Vec<String>,
    pub meta: Option<GenerationMeta>,
    pub error: Option<String>,
}

#[derive(Default)]
struct JobTable {
    next: u64,
    jobs: HashMap<String, JobRecord>,
}

type Jobs = Arc<RwLock<JobTable>>;

fn update(jobs: &Jobs, id: &str, f: impl FnOnce(&mut JobRecord)) {
    let mut table = jobs.write().expect("job table lock");
    if let Some(job) = table.jobs.get_mut(id) {
        let before = job.state;
        f(job);
        debug_assert!(job.state.rank() >= before.rank(), "job state regressed");
    }
}

struct Shared {
    model: Arc<DragModel>,
    vocab: Vocabulary,
    home: PathBuf,
    base_image: Tensor,
    jobs: Jobs,
    queue: mpsc::Sender<(String, PreparedRequest)>,
}

/// Handle to the running service state; clones share one worker and job table.
#[derive(Clone)]
pub struct App {
    shared: Arc<Shared>,
}

impl App {
    /// Starts the generation worker. Artifacts go under `home/jobs/<id>`.
    pub fn start(model: DragModel, vocab: Vocabulary, home: PathBuf, base_image: Tensor) -> Self {
        let model = Arc::new(model);
        let jobs: Jobs = Arc::default();
        let (tx, rx) = mpsc::channel::<(String, PreparedRequest)>();
        {
            let model = model.clone();
            let jobs = jobs.clone();
            let home = home.clone();
            std::thread::spawn(move || {
                for (id, prepared) in rx {
                    run_job(&model, &jobs, &home, &id, &prepared);
                }
            });
        }
        Self {
            shared: Arc::new(Shared {
                model,
                vocab,
                home,
                base_image,
                jobs,
                queue: tx,
            }),
        }
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/api/health", get(health))
            .route("/api/canvas", get(canvas))
            .route("/api/generate", post(submit))
            .route("/api/jobs/{id}", get(job))
            .route("/api/jobs/{id}/frames/{k}", get(frame))
            .with_state(self.clone())
    }

    pub fn job(&self, id: &str) -> Option<JobRecord> {
        self.shared.jobs.read().expect("job table lock").jobs.get(id).cloned()
    }

    pub fn job_dir(&self, id: &str) -> PathBuf {
        job_dir(&self.shared.home, id)
    }
}

fn job_dir(home: &Path, id: &str) -> PathBuf {
    home.join("jobs").join(id)
}

fn run_job(model: &DragModel, jobs: &Jobs, home: &Path, id: &str, prepared: &PreparedRequest) {
    update(jobs, id, |j| j.state = JobState::Running);
    let mut progress = |step: usize, total: usize| update(jobs, id, |j| j.progress = Progress { step, total });
    let result = generate(model, prepared, &mut progress).and_then(|g| {
        let paths = write_artifacts(&g, &job_dir(home, id))?;
        Ok((g, paths))
    });
    update(jobs, id, |j| match result {
        Ok((g, paths)) => {
            j.frames = (0..g.frames.shape()[0]).map(|k| format!("/api/jobs/{id}/frames/{k}")).collect();
            j.artifacts = paths;
            j.meta = Some(g.meta);
            j.state = JobState::Done;
        }
        Err(e) => {
            j.error = Some(e.to_string());
            j.state = JobState::Failed;
        }
    });
}

fn error(status: StatusCode, message: impl Into<String>, field: Option<&str>) -> Response {
    let mut body = json!({ "error": message.into() });
    if let Some(f) = field {
        body["field"] = json!(f);
    }
    (status, Json(body)).into_response()
}

async fn health(State(app): State<App>) -> Response {
    Json(json!({
        "status": "ok",
        "version": env!("CARGO_PKG_VERSION"),
        "parameters": app.shared.model.num_parameters(),
        "config": app.shared.model.config,
    }))
    .into_response()
}

async fn canvas(State(app): State<App>) -> Response {
    let cfg = &app.shared.model.config;
    match encode_png(&app.shared.base_image) {
        Ok(png) => Json(json!({
            "width": cfg.width,
            "height": cfg.height,
            "frames": cfg.frames,
            "image_png_base64": base64::engine::general_purpose::STANDARD.encode(png),
        }))
        .into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string(), None),
    }
}

async fn submit(State(app): State<App>, body: Bytes) -> Response {
    let s = &app.shared;
    let req = match parse_request(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.message, Some(&e.field)),
    };
    let prepared = match prepare(&req, &s.model, &s.vocab, rand::random()) {
        Ok(p) => p,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.message, Some(&e.field)),
    };
    let id = {
        let mut table = s.jobs.write().expect("job table lock");
        table.next += 1;
        let id = table.next.to_string();
        table.jobs.insert(
            id.clone(),
            JobRecord {
                id: id.clone(),
                state: JobState::Queued,
                progress: Progress {
                    step: 0,
                    total: s.model.config.timesteps,
                },
                artifacts: Vec::new(),
                frames: Vec::new(),
                seed: prepared.seed,
                unknown_words: prepared.unknown_words.clone(),
                meta: None,
                error: None,
            },
        );
        id
    };
    let seed = prepared.seed;
    let unknown = prepared.unknown_words.clone();
    if s.queue.send((id.clone(), prepared)).is_err() {
        update(&s.jobs, &id, |j| {
            j.state = JobState::Failed;
            j.error = Some("generation worker stopped".into());
        });
    }
    (
        StatusCode::ACCEPTED,
        Json(json!({ "job_id": id, "seed": seed, "unknown_words": unknown })),
    )
        .into_response()
}

async fn job(State(app): State<App>, UrlPath(id): UrlPath<String>) -> Response {
    match app.job(&id) {
        Some(j) => Json(j).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("unknown job {id}"), None),
    }
}

async fn frame(State(app): State<App>, UrlPath((id, k)): UrlPath<(String, usize)>) -> Response {
    let Some(j) = app.job(&id) else {
        return error(StatusCode::NOT_FOUND, format!("unknown job {id}"), None);
    };
    if j.state != JobState::Done {
        return error(StatusCode::NOT_FOUND, format!("job {id} has no frames yet"), None);
    }
    if k >= j.frames.len() {
        return error(StatusCode::NOT_FOUND, format!("job {id} has {} frames", j.frames.len()), None);
    }
    match std::fs::read(frame_path(&app.job_dir(&id), k, "png")) {
        Ok(bytes) => ([(header::CONTENT_TYPE, "image/png")], bytes).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string(), None),
    }
}

/// Serves `app` on `addr` until the process exits.
pub async fn serve(app: App, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app.router()).await
}
