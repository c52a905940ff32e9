//! HTTP JSON API over the run store, evaluation and triage.
//!
//! Reads:
//!
//! - `GET /runs?limit=&offset=`
//! - `GET /runs/{run_id}`, `/runs/{run_id}/report`, `/runs/{run_id}/errors`,
//!   `/runs/{run_id}/assignments`, `/runs/{run_id}/histogram`
//! - `GET /advertisers/{id}/profile?run=`
//! - `GET /advertisers/{id}/verdict?run=&hints=shown|hidden`
//! - `GET /labels`, `/triage/categories`, `/triage/assignments`,
//!   `/triage/revisions`, `/triage/audit`, `/health`
//!
//! Writes (JSON bodies, `content-type: application/json` required):
//!
//! - `POST /labels`
//! - `POST /triage/categories`
//! - `POST /triage/assignments`
//! - `POST /triage/revisions`
//!
//! Every verdict read records a hint exposure; a later label submission
//! without `hints_were_shown` inherits the most recent one. With
//! `hints=hidden` (the default) the LLM summary and products are left out.
//! Error bodies are described in [`error`].

pub mod error;

use std::io;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use acu_core::corpus::Label;
use acu_core::pipeline::{run_report, RunReport};
use acu_core::profiler::ContentProfile;
use acu_core::store::{Outcome, RunRecord, Store, StoreError};
use acu_core::triage::{
    self, ErrorCase, ErrorCategory, HoldoutFinding, NewAssignment, ReviewerLabel, RevisionLedgerEntry, TriageAssignment,
};
use axum::extract::{FromRequest, FromRequestParts, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

pub use error::{ApiError, ErrorBody};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceConfig {
    pub store_dir: PathBuf,
    pub bind: SocketAddr,
    /// Name of the environment variable holding the bearer token, if any.
    pub auth_token_env_var: Option<String>,
}

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("address {0} is already in use")]
    PortInUse(SocketAddr),
    #[error("store unavailable at {0}")]
    StoreUnavailable(PathBuf),
    #[error("environment variable {0} is not set")]
    MissingToken(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(FromRequest)]
#[from_request(via(axum::Json), rejection(ApiError))]
pub struct ApiJson<T>(pub T);

#[derive(FromRequestParts)]
#[from_request(via(axum::extract::Query), rejection(ApiError))]
pub struct ApiQuery<T>(pub T);

#[derive(FromRequestParts)]
#[from_request(via(axum::extract::Path), rejection(ApiError))]
pub struct ApiPath<T>(pub T);

#[derive(Clone)]
struct AppState {
    store: Arc<Store>,
    token: Option<Arc<str>>,
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Runs `f` on the blocking pool; store access is synchronous file I/O.
async fn with_store<T, F>(state: &AppState, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&Store) -> Result<T, ApiError> + Send + 'static,
{
    let store = state.store.clone();
    tokio::task::spawn_blocking(move || f(&store))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))?
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Page {
    pub limit: Option<usize>,
    pub offset: Option<usize>,
}

impl Page {
    fn apply<T>(&self, items: Vec<T>) -> Vec<T> {
        items
            .into_iter()
            .skip(self.offset.unwrap_or(0))
            .take(self.limit.unwrap_or(usize::MAX))
            .collect()
    }
}

async fn list_runs(State(s): State<AppState>, ApiQuery(page): ApiQuery<Page>) -> ApiResult<Vec<RunRecord>> {
    with_store(&s, move |store| Ok(page.apply(store.list_runs()?)))
        .await
        .map(Json)
}

async fn get_run(State(s): State<AppState>, ApiPath(run_id): ApiPath<String>) -> ApiResult<RunRecord> {
    with_store(&s, move |store| Ok(store.load_run(&run_id)?.record))
        .await
        .map(Json)
}

async fn get_report(State(s): State<AppState>, ApiPath(run_id): ApiPath<String>) -> ApiResult<RunReport> {
    with_store(&s, move |store| Ok(run_report(store, &run_id)?))
        .await
        .map(Json)
}

async fn get_errors(State(s): State<AppState>, ApiPath(run_id): ApiPath<String>) -> ApiResult<Vec<ErrorCase>> {
    with_store(&s, move |store| {
        let labels = store.run_labels(&run_id)?;
        Ok(triage::list_errors(store, &run_id, &labels)?)
    })
    .await
    .map(Json)
}

async fn get_current_assignments(
    State(s): State<AppState>,
    ApiPath(run_id): ApiPath<String>,
) -> ApiResult<BTreeMap<String, TriageAssignment>> {
    with_store(&s, move |store| Ok(triage::current_assignments(store, &run_id)?))
        .await
        .map(Json)
}

async fn get_histogram(
    State(s): State<AppState>,
    ApiPath(run_id): ApiPath<String>,
) -> ApiResult<BTreeMap<String, usize>> {
    with_store(&s, move |store| Ok(triage::category_histogram(store, &run_id)?))
        .await
        .map(Json)
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunQuery {
    pub run: Option<String>,
}

async fn get_profile(
    State(s): State<AppState>,
    ApiPath(advertiser_id): ApiPath<String>,
    ApiQuery(q): ApiQuery<RunQuery>,
) -> ApiResult<ContentProfile> {
    with_store(&s, move |store| {
        store.find_profile(&advertiser_id, q.run.as_deref())?.ok_or_else(|| {
            ApiError::not_found(
                "UnknownAdvertiser",
                format!("no profile stored for advertiser {advertiser_id}"),
            )
        })
    })
    .await
    .map(Json)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hints {
    Shown,
    #[default]
    Hidden,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerdictQuery {
    pub run: Option<String>,
    #[serde(default)]
    pub hints: Hints,
}

/// A stored outcome as shown to a reviewer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictView {
    pub run_id: String,
    pub advertiser_id: String,
    pub hints_shown: bool,
    /// `verdict`, `parse_error` or `backend_error`.
    pub outcome: String,
    pub decision: Option<Label>,
    pub rationale: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub advertiser_summary: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub products_services: Option<String>,
    pub failure: Option<String>,
}

impl VerdictView {
    pub fn new(run_id: &str, advertiser_id: &str, outcome: &Outcome, hints_shown: bool) -> Self {
        let mut view = Self {
            run_id: run_id.to_string(),
            advertiser_id: advertiser_id.to_string(),
            hints_shown,
            outcome: String::new(),
            decision: None,
            rationale: None,
            advertiser_summary: None,
            products_services: None,
            failure: None,
        };
        match outcome {
            Outcome::Verdict(v) => {
                view.outcome = "verdict".into();
                view.decision = Some(v.decision);
                view.rationale = Some(v.rationale.clone());
                if hints_shown {
                    view.advertiser_summary = Some(v.advertiser_summary.clone());
                    view.products_services = Some(v.products_services.clone());
                }
            }
            Outcome::ParseError(e) => {
                view.outcome = "parse_error".into();
                view.failure = Some(e.to_string());
            }
            Outcome::BackendError(f) => {
                view.outcome = "backend_error".into();
                view.failure = Some(format!("{}: {}", f.code, f.message));
            }
        }
        view
    }
}

fn find_outcome(store: &Store, advertiser_id: &str, run: Option<&str>) -> Result<(String, Outcome), ApiError> {
    let runs: Vec<String> = match run {
        Some(id) => vec![id.to_string()],
        None => store
            .list_runs()?
            .iter()
            .rev()
            .map(|r| r.run_id().to_string())
            .collect(),
    };
    for run_id in runs {
        if let Some(outcome) = store.read_outcome(&run_id, advertiser_id)? {
            return Ok((run_id, outcome));
        }
    }
    Err(ApiError::not_found(
        "NoVerdict",
        format!("no verdict recorded for advertiser {advertiser_id}"),
    ))
}

async fn get_verdict(
    State(s): State<AppState>,
    ApiPath(advertiser_id): ApiPath<String>,
    ApiQuery(q): ApiQuery<VerdictQuery>,
) -> ApiResult<VerdictView> {
    with_store(&s, move |store| {
        let (run_id, outcome) = find_outcome(store, &advertiser_id, q.run.as_deref())?;
        let shown = q.hints == Hints::Shown;
        triage::record_hint_exposure(store, &run_id, &advertiser_id, shown)?;
        Ok(VerdictView::new(&run_id, &advertiser_id, &outcome, shown))
    })
    .await
    .map(Json)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRequest {
    pub advertiser_id: String,
    pub label: Label,
    #[serde(default)]
    pub reviewer: String,
    pub hints_were_shown: Option<bool>,
}

async fn post_label(State(s): State<AppState>, ApiJson(req): ApiJson<LabelRequest>) -> Result<Response, ApiError> {
    let stored = with_store(&s, move |store| {
        Ok(triage::submit_label(
            store,
            &req.advertiser_id,
            req.label,
            &req.reviewer,
            req.hints_were_shown,
        )?)
    })
    .await?;
    Ok(created(stored))
}

async fn get_labels(State(s): State<AppState>, ApiQuery(page): ApiQuery<Page>) -> ApiResult<Vec<ReviewerLabel>> {
    with_store(&s, move |store| Ok(page.apply(triage::reviewer_labels(store)?)))
        .await
        .map(Json)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryRequest {
    pub title: String,
    #[serde(default)]
    pub description: String,
    pub created_in_revision: Option<u32>,
}

async fn post_category(
    State(s): State<AppState>,
    ApiJson(req): ApiJson<CategoryRequest>,
) -> Result<Response, ApiError> {
    let stored = with_store(&s, move |store| {
        Ok(triage::create_category(
            store,
            &req.title,
            &req.description,
            req.created_in_revision.unwrap_or(1),
        )?)
    })
    .await?;
    Ok(created(stored))
}

async fn get_categories(State(s): State<AppState>) -> ApiResult<Vec<ErrorCategory>> {
    with_store(&s, |store| Ok(triage::categories(store)?)).await.map(Json)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssignmentRequest {
    pub run_id: String,
    pub advertiser_id: String,
    pub category_id: String,
    #[serde(default)]
    pub note: String,
    pub reviewer_label: Option<Label>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentCreated {
    pub assignment_id: u64,
}

async fn post_assignment(
    State(s): State<AppState>,
    ApiJson(req): ApiJson<AssignmentRequest>,
) -> Result<Response, ApiError> {
    let assignment_id = with_store(&s, move |store| {
        Ok(triage::bin_error(
            store,
            NewAssignment {
                run_id: req.run_id,
                advertiser_id: req.advertiser_id,
                category_id: req.category_id,
                reviewer_note: req.note,
                reviewer_label: req.reviewer_label,
            },
        )?)
    })
    .await?;
    Ok(created(AssignmentCreated { assignment_id }))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssignmentQuery {
    pub run: Option<String>,
    pub limit: Option<usize>,
    pub offset: Option<usize>,
}

async fn get_assignments(
    State(s): State<AppState>,
    ApiQuery(q): ApiQuery<AssignmentQuery>,
) -> ApiResult<Vec<TriageAssignment>> {
    with_store(&s, move |store| {
        let all = triage::all_assignments(store)?;
        let filtered = match &q.run {
            Some(run) => all.into_iter().filter(|a| &a.run_id == run).collect(),
            None => all,
        };
        Ok(Page {
            limit: q.limit,
            offset: q.offset,
        }
        .apply(filtered))
    })
    .await
    .map(Json)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RevisionRequest {
    pub template_id: String,
    pub from_revision: u32,
    /// Defaults to `from_revision + 1`.
    pub to_revision: Option<u32>,
    pub addressed_category_ids: Vec<String>,
    #[serde(default)]
    pub change_note: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevisionRecorded {
    pub position: usize,
    pub entry: RevisionLedgerEntry,
}

async fn post_revision(
    State(s): State<AppState>,
    ApiJson(req): ApiJson<RevisionRequest>,
) -> Result<Response, ApiError> {
    let recorded = with_store(&s, move |store| {
        let mut entry = RevisionLedgerEntry::next(
            &req.template_id,
            req.from_revision,
            req.addressed_category_ids,
            &req.change_note,
        );
        if let Some(to) = req.to_revision {
            entry.to_revision = to;
        }
        let position = triage::record_revision(store, entry.clone())?;
        Ok(RevisionRecorded { position, entry })
    })
    .await?;
    Ok(created(recorded))
}

async fn get_revisions(State(s): State<AppState>) -> ApiResult<Vec<RevisionLedgerEntry>> {
    with_store(&s, |store| Ok(triage::revisions(store)?)).await.map(Json)
}

async fn get_audit(State(s): State<AppState>) -> ApiResult<Vec<HoldoutFinding>> {
    with_store(&s, |store| Ok(triage::audit_holdout(store)?))
        .await
        .map(Json)
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({"status": "ok"}))
}

fn created<T: Serialize>(body: T) -> Response {
    (StatusCode::CREATED, Json(body)).into_response()
}

async fn fallback() -> ApiError {
    ApiError::not_found("NotFound", "no such endpoint")
}

async fn method_not_allowed(req: Request, next: Next) -> Response {
    let resp = next.run(req).await;
    if resp.status() == StatusCode::METHOD_NOT_ALLOWED {
        return ApiError::new(
            StatusCode::METHOD_NOT_ALLOWED,
            "MethodNotAllowed",
            "method not allowed on this endpoint",
        )
        .into_response();
    }
    resp
}

async fn require_token(State(s): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &s.token {
        let ok = req.uri().path() == "/health"
            || req
                .headers()
                .get(header::AUTHORIZATION)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.strip_prefix("Bearer "))
                .is_some_and(|t| t == &**token);
        if !ok {
            return ApiError::new(
                StatusCode::UNAUTHORIZED,
                "Unauthorized",
                "missing or wrong bearer token",
            )
            .into_response();
        }
    }
    next.run(req).await
}

fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/runs", get(list_runs))
        .route("/runs/:run_id", get(get_run))
        .route("/runs/:run_id/report", get(get_report))
        .route("/runs/:run_id/errors", get(get_errors))
        .route("/runs/:run_id/assignments", get(get_current_assignments))
        .route("/runs/:run_id/histogram", get(get_histogram))
        .route("/advertisers/:id/profile", get(get_profile))
        .route("/advertisers/:id/verdict", get(get_verdict))
        .route("/labels", get(get_labels).post(post_label))
        .route("/triage/categories", get(get_categories).post(post_category))
        .route("/triage/assignments", get(get_assignments).post(post_assignment))
        .route("/triage/revisions", get(get_revisions).post(post_revision))
        .route("/triage/audit", get(get_audit))
        .fallback(fallback)
        .layer(middleware::from_fn(method_not_allowed))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state)
}

/// A running server. Dropping the handle leaves the server running until
/// the process exits; call [`ServerHandle::shutdown`] to stop it.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    task: JoinHandle<io::Result<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Stops accepting connections and waits for in-flight requests.
    pub async fn shutdown(mut self) -> io::Result<()> {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        self.join().await
    }

    /// Serves until SIGINT/ctrl-c, then shuts down gracefully.
    pub async fn run_until_signal(self) -> io::Result<()> {
        tokio::signal::ctrl_c().await?;
        tracing::info!("shutdown signal received");
        self.shutdown().await
    }

    async fn join(self) -> io::Result<()> {
        self.task.await.map_err(|e| io::Error::other(e.to_string()))?
    }
}

pub async fn serve(config: ServiceConfig) -> Result<ServerHandle, ServeError> {
    if !config.store_dir.is_dir() {
        return Err(ServeError::StoreUnavailable(config.store_dir));
    }
    let store = Store::open(&config.store_dir).map_err(|e| match e {
        StoreError::Unavailable(p) => ServeError::StoreUnavailable(p),
        _ => ServeError::StoreUnavailable(config.store_dir.clone()),
    })?;
    let token = match &config.auth_token_env_var {
        Some(var) => Some(Arc::<str>::from(
            std::env::var(var).map_err(|_| ServeError::MissingToken(var.clone()))?,
        )),
        None => None,
    };
    let listener = tokio::net::TcpListener::bind(config.bind)
        .await
        .map_err(|e| match e.kind() {
            io::ErrorKind::AddrInUse => ServeError::PortInUse(config.bind),
            _ => ServeError::Io(e),
        })?;
    let addr = listener.local_addr()?;
    let app = router(AppState {
        store: Arc::new(store),
        token,
    });
    let (stop, stopped) = oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = stopped.await;
            })
            .await
    });
    tracing::info!(%addr, "serving");
    Ok(ServerHandle {
        addr,
        stop: Some(stop),
        task,
    })
}
