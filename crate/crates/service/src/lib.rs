//! HTTP front end: decodes key sequences, records which candidate the user
//! picked, and exposes the labels derived from those picks.
//!
//! Every decode is logged as a [`SelectionEvent`] with a fresh request id
//! and no selection; a later `/api/select` appends a second event with the
//! same id. The log is an append-only JSON-lines file, so label export is a
//! fold over it and the in-memory request table can be rebuilt on restart.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use imeforge::feedback::{label_table, read_events, write_event, LabelRow, SelectionEvent, Window};
use imeforge::{Engine, Extension, KeyLayout, TaskKind, UserWord};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

pub const MAX_TOP_K: usize = 50;
pub const DEFAULT_RETENTION: Duration = Duration::from_secs(24 * 3600);

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("selection log {path}: {source}")]
    Log { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] imeforge::Error),
    #[error("cannot listen on {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("server error: {0}")]
    Serve(std::io::Error),
}

pub type Clock = Arc<dyn Fn() -> f64 + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0)
    })
}

struct Shown {
    event: SelectionEvent,
    selected: bool,
}

struct SelectionLog {
    path: PathBuf,
    file: File,
    fsync: bool,
    requests: HashMap<String, Shown>,
}

impl SelectionLog {
    fn open(path: &Path, fsync: bool, now: f64, retention: Duration) -> Result<Self, ServiceError> {
        let err = |source| ServiceError::Log {
            path: path.to_path_buf(),
            source,
        };
        let mut requests: HashMap<String, Shown> = HashMap::new();
        if path.exists() {
            let events = read_events(BufReader::new(File::open(path).map_err(err)?))?;
            let horizon = now - retention.as_secs_f64();
            for ev in events {
                let Some(id) = ev.request_id.clone() else { continue };
                if ev.selected.is_some() {
                    if let Some(shown) = requests.get_mut(&id) {
                        shown.selected = true;
                    }
                } else if ev.ts >= horizon {
                    requests.insert(id, Shown { event: ev, selected: false });
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(err)?;
        Ok(SelectionLog {
            path: path.to_path_buf(),
            file,
            fsync,
            requests,
        })
    }

    fn append(&mut self, ev: &SelectionEvent) -> std::io::Result<()> {
        let mut line = Vec::new();
        write_event(&mut line, ev).map_err(std::io::Error::other)?;
        self.file.write_all(&line)?;
        if self.fsync {
            self.file.sync_data()?;
        }
        Ok(())
    }

    fn expire(&mut self, now: f64, retention: Duration) {
        let horizon = now - retention.as_secs_f64();
        self.requests.retain(|_, s| s.event.ts >= horizon);
    }
}

pub struct AppState {
    engine: Arc<Engine>,
    log: Mutex<SelectionLog>,
    retention: Duration,
    clock: Clock,
}

#[derive(Debug, Clone)]
pub struct StateOptions {
    pub log_path: PathBuf,
    pub retention: Duration,
    pub fsync: bool,
}

impl StateOptions {
    pub fn new(log_path: impl Into<PathBuf>) -> Self {
        StateOptions {
            log_path: log_path.into(),
            retention: DEFAULT_RETENTION,
            fsync: true,
        }
    }
}

impl AppState {
    pub fn new(engine: Arc<Engine>, opts: &StateOptions, clock: Clock) -> Result<Arc<Self>, ServiceError> {
        let log = SelectionLog::open(&opts.log_path, opts.fsync, clock(), opts.retention)?;
        Ok(Arc::new(AppState {
            engine,
            log: Mutex::new(log),
            retention: opts.retention,
            clock,
        }))
    }

    /// Request ids currently accepted by `/api/select`.
    pub fn live_requests(&self) -> usize {
        let mut log = self.log.lock().expect("log lock");
        log.expire((self.clock)(), self.retention);
        log.requests.values().filter(|s| !s.selected).count()
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

impl From<imeforge::Error> for ApiError {
    fn from(e: imeforge::Error) -> Self {
        use imeforge::Error as E;
        let status = match &e {
            E::EmptyLattice(_) => StatusCode::UNPROCESSABLE_ENTITY,
            E::InvalidChunk { .. } | E::InvalidKey { .. } | E::Validation(_) | E::Config(_) | E::Parse { .. } => {
                StatusCode::BAD_REQUEST
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

fn default_top_k() -> usize {
    5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeRequest {
    pub keys: String,
    pub layout: String,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default)]
    pub context: Option<String>,
    #[serde(default)]
    pub profile: Option<Vec<String>>,
    #[serde(default)]
    pub user_words: Option<Vec<UserWord>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireCandidate {
    pub rank: usize,
    pub chars: String,
    pub pyseg: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResponse {
    pub request_id: String,
    pub candidates: Vec<WireCandidate>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectRequest {
    pub request_id: String,
    /// One-based rank of the chosen candidate.
    pub selected_rank: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelsResponse {
    pub rows: Vec<LabelRow>,
}

async fn handle_decode(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<DecodeResponse>, ApiError> {
    let req: DecodeRequest = parse_body(&body)?;
    let layout: KeyLayout = req.layout.parse()?;
    if req.keys.is_empty() {
        return Err(ApiError::bad_request("keys must not be empty"));
    }
    if !(1..=MAX_TOP_K).contains(&req.top_k) {
        return Err(ApiError::bad_request(format!("top_k must be within 1..={MAX_TOP_K}")));
    }
    let user_words = req.user_words.unwrap_or_default();
    for w in &user_words {
        w.validate()?;
    }
    let ext = Extension {
        context_text: req.context.filter(|c| !c.is_empty()),
        user_profile: req.profile.unwrap_or_default(),
        user_words,
    };
    let engine = state.engine.clone();
    let keys = req.keys.clone();
    let top_k = req.top_k;
    let candidates = tokio::task::spawn_blocking(move || engine.decode(&keys, layout, top_k, &ext))
        .await
        .map_err(|e| ApiError::internal(format!("decode task failed: {e}")))??;

    let request_id = uuid::Uuid::new_v4().to_string();
    let event = SelectionEvent {
        task: TaskKind::Fk2c,
        query: req.keys,
        answers: candidates.iter().map(|c| c.chars.clone()).collect(),
        selected: None,
        ts: (state.clock)(),
        request_id: Some(request_id.clone()),
    };
    {
        let mut log = state.log.lock().expect("log lock");
        log.append(&event)
            .map_err(|e| ApiError::internal(format!("cannot write {}: {e}", log.path.display())))?;
        log.expire(event.ts, state.retention);
        log.requests.insert(request_id.clone(), Shown { event, selected: false });
    }
    Ok(Json(DecodeResponse {
        request_id,
        candidates: candidates
            .into_iter()
            .enumerate()
            .map(|(i, c)| WireCandidate {
                rank: i + 1,
                pyseg: c.pyseg.display_tagged(),
                chars: c.chars,
                score: c.log_score,
            })
            .collect(),
    }))
}

async fn handle_select(State(state): State<Arc<AppState>>, body: Bytes) -> Result<StatusCode, ApiError> {
    let req: SelectRequest = parse_body(&body)?;
    let now = (state.clock)();
    let mut log = state.log.lock().expect("log lock");
    log.expire(now, state.retention);
    let Some(shown) = log.requests.get(&req.request_id) else {
        return Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown request id {:?}", req.request_id)));
    };
    if shown.selected {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("request {:?} already has a selection", req.request_id),
        ));
    }
    let count = shown.event.answers.len();
    if req.selected_rank == 0 || req.selected_rank > count {
        return Err(ApiError::bad_request(format!(
            "selected_rank {} outside 1..={count}",
            req.selected_rank
        )));
    }
    let event = SelectionEvent {
        selected: Some(req.selected_rank - 1),
        ts: now,
        ..shown.event.clone()
    };
    log.append(&event)
        .map_err(|e| ApiError::internal(format!("cannot write {}: {e}", log.path.display())))?;
    log.requests.get_mut(&req.request_id).expect("checked above").selected = true;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Debug, Deserialize)]
struct LabelsQuery {
    from: Option<f64>,
    to: Option<f64>,
}

async fn handle_labels(
    State(state): State<Arc<AppState>>,
    Query(q): Query<LabelsQuery>,
) -> Result<Json<LabelsResponse>, ApiError> {
    // holding the writer lock gives a consistent snapshot of the file
    let events = {
        let log = state.log.lock().expect("log lock");
        let file = File::open(&log.path).map_err(|e| ApiError::internal(e.to_string()))?;
        read_events(BufReader::new(file))?
    };
    let rows = label_table(&events, Window::new(q.from, q.to))?;
    Ok(Json(LabelsResponse { rows }))
}

async fn handle_health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({
        "status": "ok",
        "syllables": state.engine.lexicon().syllables().len(),
        "chars": state.engine.lexicon().char_count(),
    }))
}

/// API routes, plus static files from `static_dir` when given.
pub fn router(state: Arc<AppState>, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/decode", post(handle_decode))
        .route("/api/select", post(handle_select))
        .route("/api/labels", get(handle_labels))
        .route("/api/health", get(handle_health))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Flags for running the server. Each falls back to an `IMEFORGE_`
/// environment variable of the same name.
#[derive(Debug, Clone, clap::Args)]
pub struct ServeArgs {
    /// Port to listen on.
    #[arg(long, env = "IMEFORGE_PORT", default_value_t = 8080)]
    pub port: u16,
    /// Address to bind.
    #[arg(long, env = "IMEFORGE_HOST", default_value = "127.0.0.1")]
    pub host: String,
    /// Saved n-gram model; trains on the bundled corpus when absent.
    #[arg(long, env = "IMEFORGE_MODEL")]
    pub model: Option<PathBuf>,
    /// Directory holding syllables.txt and chars.tsv; bundled when absent.
    #[arg(long, env = "IMEFORGE_LEXICON")]
    pub lexicon: Option<PathBuf>,
    /// Append-only selection log (JSON lines).
    #[arg(long, env = "IMEFORGE_LOG_PATH", default_value = "selections.jsonl")]
    pub log_path: PathBuf,
    /// Built web UI to serve at /.
    #[arg(long, env = "IMEFORGE_STATIC_DIR")]
    pub static_dir: Option<PathBuf>,
    /// How long a decode's request id accepts a selection.
    #[arg(long, env = "IMEFORGE_RETENTION_HOURS", default_value_t = 24.0)]
    pub retention_hours: f64,
    /// Skip fsync after each log append.
    #[arg(long, env = "IMEFORGE_NO_FSYNC")]
    pub no_fsync: bool,
}

/// Loads the engine and serves until the process is stopped.
pub fn run(args: &ServeArgs) -> Result<(), ServiceError> {
    let engine = Arc::new(Engine::load(args.model.as_deref(), args.lexicon.as_deref())?);
    if !(args.retention_hours > 0.0 && args.retention_hours.is_finite()) {
        return Err(imeforge::Error::Config("retention must be a positive number of hours".into()).into());
    }
    let opts = StateOptions {
        log_path: args.log_path.clone(),
        retention: Duration::from_secs_f64(args.retention_hours * 3600.0),
        fsync: !args.no_fsync,
    };
    let state = AppState::new(engine, &opts, system_clock())?;
    let app = router(state, args.static_dir.as_deref());
    let addr = format!("{}:{}", args.host, args.port);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(ServiceError::Serve)?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|source| ServiceError::Bind { addr: addr.clone(), source })?;
        log::info!("listening on http://{addr}");
        axum::serve(listener, app).await.map_err(ServiceError::Serve)
    })
}
