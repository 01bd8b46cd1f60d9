//! HTTP service: periodic scope assessment over ACTIVE outages plus an
//! on-demand summary API. Summaries compose the same persisted
//! ScopeResult -> build_context -> generate path as the batch CLI.

use std::sync::{Arc, Mutex};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use outagekit::domain::{Incident, Outage};
use outagekit::eval::study_stats;
use outagekit::scope::{assess_scope, ComponentGraph, LinkRule, SimilarityModel};
use outagekit::store::Store;
use outagekit::summarize::generate;
use serde::{Deserialize, Serialize};

use crate::app::{self, AppError};
use crate::config::AppConfig;

pub struct ServiceState {
    pub store: Store,
    pub config: AppConfig,
    pub rules: Vec<LinkRule>,
    pub graph: ComponentGraph,
    pub model: SimilarityModel,
}

impl ServiceState {
    pub fn new(config: AppConfig) -> Result<Self, AppError> {
        let store = app::open_store(&config)?;
        let rules = app::load_rules(&config)?;
        let graph = app::build_graph(&store)?;
        let model = app::load_model(&config)?;
        Ok(ServiceState {
            store,
            config,
            rules,
            graph,
            model,
        })
    }

    /// Rebuilds graph and model from their sources of truth.
    pub fn reload(&mut self) -> Result<(), AppError> {
        self.graph = app::build_graph(&self.store)?;
        self.model = app::load_model(&self.config)?;
        self.rules = app::load_rules(&self.config)?;
        Ok(())
    }
}

/// Reassesses every ACTIVE outage and persists the new ScopeResult.
/// Per-outage failures are logged and skipped; the cycle never aborts
/// on one outage. Returns the number of outages reassessed.
pub fn run_assessment_cycle(state: &mut ServiceState) -> usize {
    let active: Vec<Outage> = state
        .store
        .outages()
        .filter(|o| o.state == outagekit::domain::OutageState::Active)
        .cloned()
        .collect();
    let mut reassessed = 0;
    for outage in active {
        match assess_scope(
            &outage,
            &state.store,
            &state.rules,
            &state.graph,
            &state.model,
            state.config.scope_window(),
            state.config.min_weight,
        ) {
            Ok(outcome) => {
                state.store.put_scope(outcome.scope);
                reassessed += 1;
            }
            Err(e) => {
                tracing::warn!(outage = %outage.id, error = %e, "assessment skipped");
            }
        }
    }
    if let Err(e) = state.store.flush() {
        tracing::warn!(error = %e, "flush after assessment cycle failed");
    }
    reassessed
}

type Shared = Arc<Mutex<ServiceState>>;

struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn not_found(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::NOT_FOUND,
            message: message.into(),
        }
    }

    fn conflict(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::CONFLICT,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(serde_json::json!({ "error": self.message })),
        )
            .into_response()
    }
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn stats(State(shared): State<Shared>) -> Result<Json<serde_json::Value>, ApiError> {
    let state = shared.lock().unwrap();
    let corpus = state.store.snapshot();
    let scopes: std::collections::BTreeMap<String, outagekit::scope::ScopeResult> = state
        .store
        .scopes()
        .map(|s| (s.outage_id.clone(), s.clone()))
        .collect();
    let scope_ref = (!scopes.is_empty()).then_some(&scopes);
    let stats = study_stats(&corpus, scope_ref, state.config.report_unit());
    serde_json::to_value(stats)
        .map(Json)
        .map_err(|e| ApiError::internal(e.to_string()))
}

#[derive(Serialize)]
struct IngestResponse {
    incidents: usize,
}

async fn post_incidents(
    State(shared): State<Shared>,
    Json(incidents): Json<Vec<Incident>>,
) -> Result<(StatusCode, Json<IngestResponse>), ApiError> {
    let mut state = shared.lock().unwrap();
    let count = incidents.len();
    let records = incidents.into_iter().map(outagekit::domain::Record::Incident);
    state.store.ingest_records(records);
    state
        .store
        .flush()
        .map_err(|e| ApiError::internal(e.to_string()))?;
    Ok((StatusCode::CREATED, Json(IngestResponse { incidents: count })))
}

async fn post_outages(
    State(shared): State<Shared>,
    Json(outage): Json<Outage>,
) -> Result<(StatusCode, Json<serde_json::Value>), ApiError> {
    let mut state = shared.lock().unwrap();
    let id = outage.id.clone();
    state
        .store
        .ingest_records([outagekit::domain::Record::Outage(outage)]);
    state
        .store
        .flush()
        .map_err(|e| ApiError::internal(e.to_string()))?;
    Ok((
        StatusCode::CREATED,
        Json(serde_json::json!({ "id": id })),
    ))
}

async fn get_scope(
    State(shared): State<Shared>,
    Path(id): Path<String>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let state = shared.lock().unwrap();
    if state.store.outage(&id).is_none() {
        return Err(ApiError::not_found(format!("unknown outage {id}")));
    }
    let scope = state
        .store
        .scope(&id)
        .ok_or_else(|| ApiError::conflict(format!("outage {id} has no assessed scope yet")))?;
    serde_json::to_value(scope)
        .map(Json)
        .map_err(|e| ApiError::internal(e.to_string()))
}

#[derive(Deserialize)]
struct SummaryRequest {
    mode: String,
    n: Option<usize>,
    use_title: Option<bool>,
}

#[derive(Serialize)]
struct SummaryCandidate {
    text: String,
    index: usize,
    /// Millisecond resolution so identical requests against a
    /// deterministic backend serialize byte-identically.
    latency_ms: u64,
}

#[derive(Serialize)]
struct SummaryResponse {
    outage_id: String,
    mode: String,
    candidates: Vec<SummaryCandidate>,
}

async fn post_summary(
    State(shared): State<Shared>,
    Path(id): Path<String>,
    Json(request): Json<SummaryRequest>,
) -> Result<Json<SummaryResponse>, ApiError> {
    let state = shared.lock().unwrap();
    let outage = state
        .store
        .outage(&id)
        .ok_or_else(|| ApiError::not_found(format!("unknown outage {id}")))?
        .clone();
    let scope = state
        .store
        .scope(&id)
        .ok_or_else(|| ApiError::conflict(format!("outage {id} has no assessed scope yet")))?
        .clone();
    let mode = app::parse_mode(&request.mode, request.use_title.unwrap_or(false))
        .map_err(|e| ApiError::bad_request(e.message().to_owned()))?;
    let n = request.n.unwrap_or(state.config.n_candidates);
    if n == 0 {
        return Err(ApiError::bad_request("n must be >= 1"));
    }

    let corpus = state.store.snapshot();
    let context = app::context_for_outage(&corpus, &scope, &outage, mode, state.config.max_chars)
        .map_err(|e| ApiError::conflict(e.message().to_owned()))?;
    let ir_train = match state.config.backend.kind {
        outagekit::backends::BackendKind::IrBaseline => {
            app::ir_examples(&state.store, &corpus, mode, state.config.max_chars)
        }
        _ => Vec::new(),
    };
    let backend = app::make_backend(&state.config.backend, ir_train)
        .map_err(|e| ApiError::internal(e.message().to_owned()))?;
    let candidates = generate(&context, backend.as_ref(), n, &state.config.generation)
        .map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(Json(SummaryResponse {
        outage_id: id,
        mode: request.mode,
        candidates: candidates
            .into_iter()
            .map(|c| SummaryCandidate {
                text: c.text,
                index: c.index,
                latency_ms: (c.latency_secs * 1000.0).round() as u64,
            })
            .collect(),
    }))
}

async fn admin_assess(State(shared): State<Shared>) -> Json<serde_json::Value> {
    let mut state = shared.lock().unwrap();
    let reassessed = run_assessment_cycle(&mut state);
    Json(serde_json::json!({ "reassessed": reassessed }))
}

async fn admin_reload(State(shared): State<Shared>) -> Result<Json<serde_json::Value>, ApiError> {
    let mut state = shared.lock().unwrap();
    state
        .reload()
        .map_err(|e| ApiError::internal(e.message().to_owned()))?;
    Ok(Json(serde_json::json!({ "reloaded": true })))
}

pub fn router(shared: Shared) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/stats", get(stats))
        .route("/incidents", post(post_incidents))
        .route("/outages", post(post_outages))
        .route("/outages/:id/scope", get(get_scope))
        .route("/outages/:id/summary", post(post_summary))
        .route("/admin/assess", post(admin_assess))
        .route("/admin/reload", post(admin_reload))
        .with_state(shared)
}

/// Runs the service until interrupted: one background assessment task
/// on the configured period, plus the API.
pub fn serve(config: AppConfig, addr_override: Option<String>) -> Result<(), AppError> {
    let addr = addr_override.unwrap_or_else(|| config.listen_addr.clone());
    let period = std::time::Duration::from_secs(config.assessment_period_secs);
    let state = ServiceState::new(config)?;
    let shared: Shared = Arc::new(Mutex::new(state));

    let runtime = tokio::runtime::Runtime::new()
        .map_err(|e| AppError::Data(format!("cannot start runtime: {e}")))?;
    runtime.block_on(async {
        let assess_state = shared.clone();
        tokio::spawn(async move {
            let mut ticker = tokio::time::interval(period);
            loop {
                ticker.tick().await;
                let state = assess_state.clone();
                let reassessed =
                    tokio::task::spawn_blocking(move || {
                        let mut state = state.lock().unwrap();
                        run_assessment_cycle(&mut state)
                    })
                    .await
                    .unwrap_or(0);
                tracing::info!(reassessed, "assessment cycle complete");
            }
        });

        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| AppError::Config(format!("cannot bind {addr}: {e}")))?;
        tracing::info!(%addr, "listening");
        axum::serve(listener, router(shared))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| AppError::Data(e.to_string()))
    })
}
