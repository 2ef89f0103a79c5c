//! HTTP API for operators and labelers; also serves the console bundle.
//!
//! Every request opens its own store connection on a blocking thread, so
//! the service holds no state besides the configured sessions.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;
use tracing::warn;

use crate::config::Config;
use crate::consensus::{is_doubt_iteration, ConsensusOutcome};
use crate::domain::{
    AudioId, ChunkId, GroupId, IterationId, LabelerId, NodeId, OntologyClass, Timestamp, Window,
};
use crate::engine::{run_iteration, EngineConfig, EngineError, IterationRequest};
use crate::iteration::{IterationRecord, SelectionPath, Strategy};
use crate::projection::{iteration_projection, ProjectedPoint};
use crate::store::{ChunkInput, HistogramFilter, Store, StoreError, Suggestion, TagCount};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Principal {
    Operator(String),
    Labeler { labeler_id: LabelerId, group_id: GroupId },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiSession {
    pub principal: Principal,
    pub expires_at: Option<Timestamp>,
}

pub struct AppState {
    config: Config,
    engine: EngineConfig,
    sessions: HashMap<String, ApiSession>,
}

impl AppState {
    pub fn new(config: Config) -> Self {
        let group_of: BTreeMap<u32, u32> = config
            .groups
            .iter()
            .flat_map(|g| g.labelers.iter().map(move |&l| (l, g.group_id)))
            .collect();
        let mut sessions = HashMap::new();
        for l in &config.labelers {
            let Some(&g) = group_of.get(&l.labeler_id) else {
                continue;
            };
            sessions.insert(
                l.token.clone(),
                ApiSession {
                    principal: Principal::Labeler {
                        labeler_id: LabelerId(l.labeler_id),
                        group_id: GroupId(g),
                    },
                    expires_at: l.expires_at,
                },
            );
        }
        for o in &config.operators {
            sessions.insert(
                o.token.clone(),
                ApiSession {
                    principal: Principal::Operator(o.name.clone()),
                    expires_at: o.expires_at,
                },
            );
        }
        Self {
            engine: config.engine(),
            config,
            sessions,
        }
    }

    fn session(&self, headers: &HeaderMap) -> Result<&ApiSession, ApiError> {
        let token = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "unauthenticated", "missing bearer token"))?;
        let s = self
            .sessions
            .get(token.trim())
            .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "unauthenticated", "unknown token"))?;
        if s.expires_at.is_some_and(|e| e <= Utc::now()) {
            return Err(ApiError::new(StatusCode::UNAUTHORIZED, "expired", "token expired"));
        }
        Ok(s)
    }

    fn operator(&self, headers: &HeaderMap) -> Result<(), ApiError> {
        match self.session(headers)?.principal {
            Principal::Operator(_) => Ok(()),
            _ => Err(ApiError::forbidden("operator role required")),
        }
    }

    fn labeler(&self, headers: &HeaderMap) -> Result<LabelerId, ApiError> {
        match self.session(headers)?.principal {
            Principal::Labeler { labeler_id, .. } => Ok(labeler_id),
            _ => Err(ApiError::forbidden("labeler role required")),
        }
    }

    /// Opens the store on a blocking thread and runs `f` against it.
    async fn with_store<T, F>(self: &Arc<Self>, f: F) -> Result<T, ApiError>
    where
        T: Send + 'static,
        F: FnOnce(&Store, &AppState) -> Result<T, ApiError> + Send + 'static,
    {
        let state = Arc::clone(self);
        tokio::task::spawn_blocking(move || {
            let store = Store::open(&state.config.storage_path)?;
            f(&store, &state)
        })
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                error: code.into(),
                message: message.into(),
            },
        }
    }

    fn forbidden(message: &str) -> Self {
        Self::new(StatusCode::FORBIDDEN, "forbidden", message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            warn!(error = %self.body.message, "request failed");
        }
        (self.status, Json(self.body)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        use StoreError::*;
        let (status, code) = match &e {
            UnknownAudio(_) | UnknownIteration(_) | UnknownChunk(_) | UnknownSuggestion(_) | UnknownTable(_) => {
                (StatusCode::NOT_FOUND, "not_found")
            }
            UnknownLabeler(_) => (StatusCode::FORBIDDEN, "unknown_labeler"),
            NotProposed(_) => (StatusCode::CONFLICT, "not_proposed"),
            WrongGroup { .. } => (StatusCode::CONFLICT, "wrong_group"),
            NotOpenDoubt(_) => (StatusCode::CONFLICT, "not_open_doubt"),
            DuplicateName(_) => (StatusCode::CONFLICT, "duplicate_name"),
            WindowBusy => (StatusCode::CONFLICT, "window_busy"),
            EmptyName | EmptyReplacement | Domain(_) | Consensus(_) | ForeignOutcome { .. } => {
                (StatusCode::UNPROCESSABLE_ENTITY, "invalid")
            }
            IncompatibleVersion { .. } | InjectedFault(_) | Corrupt(_) | Sqlite(_) | Io(_) => {
                (StatusCode::INTERNAL_SERVER_ERROR, "internal")
            }
        };
        Self::new(status, code, e.to_string())
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Store(s) => s.into(),
            EngineError::UnknownNode(_)
            | EngineError::EmptyWindow
            | EngineError::PoolExhausted
            | EngineError::InvalidBudget
            | EngineError::MissingSidecar(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_window", e.to_string()),
            EngineError::Committee(_) | EngineError::Classifier(_) => Self::internal(e.to_string()),
        }
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub iteration_id: IterationId,
    pub window: Window,
    pub created_at: Timestamp,
    pub labeling_index: u64,
    pub audio_count: usize,
    pub labeled_pct: f64,
    pub strategy: Strategy,
    pub path: SelectionPath,
    pub classifier_fallback: bool,
    pub budget: usize,
    pub n_ds: usize,
    pub set_index: usize,
    pub set_size: usize,
    pub proposals: usize,
    pub medoids: usize,
    pub provenance: BTreeMap<String, usize>,
    pub per_group: BTreeMap<String, usize>,
}

impl From<&IterationRecord> for IterationSummary {
    fn from(r: &IterationRecord) -> Self {
        let mut per_group = BTreeMap::new();
        for p in &r.proposals {
            let key = p.group_id.map_or_else(|| "none".to_string(), |g| g.to_string());
            *per_group.entry(key).or_default() += 1;
        }
        Self {
            iteration_id: r.iteration_id,
            window: r.window.clone(),
            created_at: r.created_at,
            labeling_index: r.labeling_index,
            audio_count: r.audio_count,
            labeled_pct: r.labeled_pct,
            strategy: r.strategy,
            path: r.path,
            classifier_fallback: r.classifier_fallback,
            budget: r.budget,
            n_ds: r.n_ds,
            set_index: r.set_index,
            set_size: r.set_size,
            proposals: r.proposals.len(),
            medoids: r.medoids.len(),
            provenance: r.provenance_counts().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            per_group,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct IterationBody {
    pub node: NodeId,
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    pub budget: Option<usize>,
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default)]
    pub seed: u64,
    pub iteration_id: Option<IterationId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorklistItem {
    pub rank: u32,
    pub audio_id: AudioId,
    pub filename: String,
    pub node_id: NodeId,
    pub recorded_at: Timestamp,
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Worklist {
    pub iteration_id: IterationId,
    pub labeler_id: LabelerId,
    pub items: Vec<WorklistItem>,
}

#[derive(Debug, Deserialize)]
pub struct LabelerQuery {
    pub labeler: Option<u32>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct AnnotationBody {
    pub audio_id: AudioId,
    pub chunks: Vec<ChunkInput>,
}

/// What a labeler sees after submitting: only the aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationStatus {
    pub audio_id: AudioId,
    pub agreement: f64,
    pub labeler_count: usize,
    pub stored: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusReport {
    pub iteration_id: IterationId,
    pub promoted: usize,
    pub undecided: usize,
    pub outcomes: Vec<ConsensusOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OntologyListing {
    pub classes: Vec<OntologyClass>,
    pub suggestions: Vec<Suggestion>,
}

#[derive(Debug, Deserialize)]
pub struct SuggestionBody {
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoubtItem {
    pub audio_id: AudioId,
    pub chunk_id: ChunkId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoubtList {
    /// The latest iteration is a doubt-resolution round.
    pub round_due: bool,
    pub items: Vec<DoubtItem>,
}

#[derive(Debug, Deserialize)]
pub struct ResolveBody {
    pub chunks: Vec<ChunkInput>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub iteration_id: IterationId,
    pub medoid_count: usize,
    pub points: Vec<ProjectedPoint>,
}

#[derive(Debug, Deserialize)]
pub struct ProjectionQuery {
    pub iteration: i64,
}

#[derive(Debug, Deserialize)]
pub struct HistogramQuery {
    pub top: Option<usize>,
    pub node: Option<String>,
    #[serde(default)]
    pub include_doubt: bool,
}

pub fn router(state: Arc<AppState>) -> Router {
    let console = state.config.console_dir.clone();
    let api = Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/iterations", get(list_iterations).post(create_iteration))
        .route("/iterations/{id}", get(get_iteration))
        .route("/iterations/{id}/proposals", get(proposals))
        .route("/iterations/{id}/consensus", post(consensus))
        .route("/annotations", post(annotate))
        .route("/ontology", get(ontology))
        .route("/ontology/suggestions", post(suggest))
        .route("/ontology/suggestions/{id}/approve", post(approve))
        .route("/ontology/suggestions/{id}/reject", post(reject))
        .route("/doubts", get(doubts))
        .route("/doubts/{chunk}/resolve", post(resolve))
        .route("/dashboard/projection", get(projection))
        .route("/dashboard/histogram", get(histogram))
        .with_state(state);
    match console {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Syncs configured labelers into the store, then binds and serves until
/// ctrl-c.
pub async fn serve(config: Config) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    config.open_store()?;
    let addr = std::net::SocketAddr::from(([0, 0, 0, 0], config.port));
    let app = router(Arc::new(AppState::new(config)));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

async fn list_iterations(State(st): State<Arc<AppState>>, headers: HeaderMap) -> ApiResult<Vec<IterationSummary>> {
    st.session(&headers)?;
    st.with_store(|store, _| {
        let mut out = Vec::new();
        for id in store.iteration_ids()? {
            if let Some(r) = store.iteration(id)? {
                out.push(IterationSummary::from(&r));
            }
        }
        Ok(out)
    })
    .await
    .map(Json)
}

async fn get_iteration(
    State(st): State<Arc<AppState>>,
    headers: HeaderMap,
    Path(id): Path<i64>,
) -> ApiResult<IterationSummary> {
    st.session(&headers)?;
    st.with_store(move |store, _| {
        let r = store
            .iteration(IterationId(id))?
            .ok_or_else(|| ApiError::not_found(format!("iteration {id}")))?;
        Ok(IterationSummary::from(&r))
    })
    .await
    .map(Json)
}

async fn create_iteration(
    State(st): State<Arc<AppState>>,
    headers: HeaderMap,
    Json(body): Json<IterationBody>,
) -> Result<(StatusCode, Json<IterationSummary>), ApiError> {
    st.operator(&headers)?;
    let window = Window::new(body.node, body.start, body.end)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_window", e.to_string()))?;
    let request = IterationRequest {
        iteration_id: body.iteration_id,
        window,
        budget: body.budget,
        strategy: body.strategy,
        seed: body.seed,
    };
    let summary = st
        .with_store(move |store, st| {
            let r = run_iteration(store, &request, &st.engine)?;
            Ok(IterationSummary::from(&r))
        })
        .await?;
    Ok((StatusCode::CREATED, Json(summary)))
}

async fn proposals(
    State(st): State<Arc<AppState>>,
    headers: HeaderMap,
    Path(id): Path<i64>,
    Query(q): Query<LabelerQuery>,
) -> ApiResult<Worklist> {
    let labeler = match (&st.session(&headers)?.principal, q.labeler) {
        (Principal::Labeler { labeler_id, .. }, None) => *labeler_id,
        (Principal::Labeler { labeler_id, .. }, Some(l)) if labeler_id.0 == l => *labeler_id,
        (Principal::Labeler { .. }, Some(_)) => return Err(ApiError::forbidden("labelers see only their own worklist")),
        (Principal::Operator(_), Some(l)) => LabelerId(l),
        (Principal::Operator(_), None) => {
            return Err(ApiError::new(StatusCode::BAD_REQUEST, "bad_request", "labeler parameter required"))
        }
    };
    st.with_store(move |store, _| {
        let iteration = IterationId(id);
        if !store.iteration_exists(iteration)? {
            return Err(ApiError::not_found(format!("iteration {id}")));
        }
        let mut items = Vec::new();
        for p in store.pending_for_labeler(iteration, labeler)? {
            let a = store
                .audio(&p.audio_id)?
                .ok_or_else(|| ApiError::internal(format!("proposal {} has no audio", p.audio_id)))?;
            items.push(WorklistItem {
                rank: p.rank,
                audio_id: p.audio_id,
                filename: a.filename,
                node_id: a.node_id,
                recorded_at: a.recorded_at,
                duration: a.duration,
            });
        }
        Ok(Worklist {
            iteration_id: iteration,
            labeler_id: labeler,
            items,
        })
    })
    .await
    .map(Json)
}

async fn consensus(State(st): State<Arc<AppState>>, headers: HeaderMap, Path(id): Path<i64>) -> ApiResult<ConsensusReport> {
    st.operator(&headers)?;
    st.with_store(move |store, _| {
        let iteration = IterationId(id);
        if !store.iteration_exists(iteration)? {
            return Err(ApiError::not_found(format!("iteration {id}")));
        }
        let outcomes = store.run_consensus(iteration)?;
        let promoted = outcomes.iter().filter(|o| o.medoid_class.is_some()).count();
        Ok(ConsensusReport {
            iteration_id: iteration,
            promoted,
            undecided: outcomes.len() - promoted,
            outcomes,
        })
    })
    .await
    .map(Json)
}

async fn annotate(
    State(st): State<Arc<AppState>>,
    headers: HeaderMap,
    Json(body): Json<AnnotationBody>,
) -> ApiResult<AnnotationStatus> {
    let labeler = st.labeler(&headers)?;
    st.with_store(move |store, _| {
        let o = store.submit_annotations(labeler, &body.audio_id, &body.chunks)?;
        Ok(AnnotationStatus {
            audio_id: o.audio_id,
            agreement: o.agreement,
            labeler_count: o.labeler_count,
            stored: body.chunks.len(),
        })
    })
    .await
    .map(Json)
}

async fn ontology(State(st): State<Arc<AppState>>, headers: HeaderMap) -> ApiResult<OntologyListing> {
    st.session(&headers)?;
    st.with_store(|store, _| {
        Ok(OntologyListing {
            classes: store.ontology()?.classes().cloned().collect(),
            suggestions: store.suggestions()?,
        })
    })
    .await
    .map(Json)
}

async fn suggest(
    State(st): State<Arc<AppState>>,
    headers: HeaderMap,
    Json(body): Json<SuggestionBody>,
) -> Result<(StatusCode, Json<Suggestion>), ApiError> {
    let labeler = st.labeler(&headers)?;
    let s = st
        .with_store(move |store, st| Ok(store.suggest_class(labeler, &body.name, st.config.auto_approve)?))
        .await?;
    Ok((StatusCode::CREATED, Json(s)))
}

async fn approve(State(st): State<Arc<AppState>>, headers: HeaderMap, Path(id): Path<i64>) -> ApiResult<OntologyClass> {
    st.operator(&headers)?;
    st.with_store(move |store, _| Ok(store.approve_suggestion(id)?)).await.map(Json)
}

async fn reject(State(st): State<Arc<AppState>>, headers: HeaderMap, Path(id): Path<i64>) -> Result<StatusCode, ApiError> {
    st.operator(&headers)?;
    st.with_store(move |store, _| Ok(store.reject_suggestion(id)?)).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn doubts(State(st): State<Arc<AppState>>, headers: HeaderMap) -> ApiResult<DoubtList> {
    let labeler = st.labeler(&headers)?;
    st.with_store(move |store, _| {
        Ok(DoubtList {
            round_due: is_doubt_iteration(store.iteration_count()?),
            items: store
                .doubt_worklist(labeler)?
                .into_iter()
                .map(|(audio_id, chunk_id)| DoubtItem { audio_id, chunk_id })
                .collect(),
        })
    })
    .await
    .map(Json)
}

async fn resolve(
    State(st): State<Arc<AppState>>,
    headers: HeaderMap,
    Path(chunk): Path<i64>,
    Json(body): Json<ResolveBody>,
) -> ApiResult<AnnotationStatus> {
    let labeler = st.labeler(&headers)?;
    st.with_store(move |store, _| {
        let o = store.resolve_doubt(ChunkId(chunk), labeler, &body.chunks)?;
        Ok(AnnotationStatus {
            audio_id: o.audio_id,
            agreement: o.agreement,
            labeler_count: o.labeler_count,
            stored: body.chunks.len(),
        })
    })
    .await
    .map(Json)
}

async fn projection(
    State(st): State<Arc<AppState>>,
    headers: HeaderMap,
    Query(q): Query<ProjectionQuery>,
) -> ApiResult<Projection> {
    st.session(&headers)?;
    st.with_store(move |store, _| {
        let id = IterationId(q.iteration);
        let points =
            iteration_projection(store, id)?.ok_or_else(|| ApiError::not_found(format!("iteration {}", q.iteration)))?;
        Ok(Projection {
            iteration_id: id,
            medoid_count: points.iter().filter(|p| p.role == crate::projection::Role::Medoid).count(),
            points,
        })
    })
    .await
    .map(Json)
}

async fn histogram(State(st): State<Arc<AppState>>, Query(q): Query<HistogramQuery>) -> ApiResult<Vec<TagCount>> {
    let filter = HistogramFilter {
        node_id: q.node.map(NodeId),
        include_doubt: q.include_doubt,
        include_superseded: false,
    };
    let top = q.top.unwrap_or(50);
    st.with_store(move |store, _| Ok(store.tag_frequency_histogram(top, &filter)?)).await.map(Json)
}
