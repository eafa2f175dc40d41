//! HTTP service, schema `v1`. All bodies are JSON.
//!
//! | method | path | body / query | response |
//! |---|---|---|---|
//! | POST | `/v1/sessions` | none | `201 {session_id, k}` |
//! | POST | `/v1/sessions/{id}/turns` | `{utterance}` | `{session_id, turn, utterance, response, state_marginal, argmax_state, top_responses}` |
//! | GET | `/v1/sessions/{id}` | | `{session_id, transcript}` |
//! | DELETE | `/v1/sessions/{id}` | | `204` |
//! | GET | `/v1/states` | | `{states: [{state, responses}]}` |
//! | GET | `/v1/states/{z}` | | `{state, responses}` |
//! | GET | `/v1/graph` | `min_edge_count`, `top_r` | the flow graph: `{min_edge_count, top_r, nodes, edges}` |
//! | GET | `/v1/meta` | | `{schema_version, k, vocab_size, config_hash, vocab_hash, beam, idle_timeout_secs, intent_classes}` |
//!
//! `top_responses` lists the argmax state's cached responses as
//! `{text, logprob, terminated}`. Errors are `{error}` with status 400
//! (malformed body or query, empty utterance), 404 (unknown or expired
//! session, unknown state) or 500. Sessions idle longer than the configured
//! timeout are dropped.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use log::info;
use lstn::corpus::{load_lexicon, EntityLexicon, Vocabulary};
use lstn::inference::{Responder, ResponseCache, Session, TranscriptEntry};
use lstn::interpret::{export_flow_graph, mine_intents, DialogFlowGraph, IntentClass};
use lstn::{Lstn, LstnError};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::commands::load_configured_corpus;
use crate::config::{GraphConfig, RunConfig, ServeConfig};
use crate::run_dir::{self, RunDir};

pub const SCHEMA_VERSION: &str = "v1";

struct Entry {
    session: Session,
    last_used: Instant,
}

/// Immutable model snapshot plus the live sessions.
pub struct AppState {
    pub model: Lstn,
    pub vocab: Vocabulary,
    pub cache: ResponseCache,
    pub lexicon: Option<EntityLexicon>,
    pub intents: Vec<IntentClass>,
    pub graph: GraphConfig,
    pub idle_timeout: Duration,
    sessions: Mutex<HashMap<String, Arc<Mutex<Entry>>>>,
}

impl AppState {
    pub fn new(
        model: Lstn,
        vocab: Vocabulary,
        cache: ResponseCache,
        lexicon: Option<EntityLexicon>,
        intents: Vec<IntentClass>,
        graph: GraphConfig,
        idle_timeout: Duration,
    ) -> Result<Self> {
        if cache.num_states() != model.num_states() {
            anyhow::bail!(
                "response cache has {} states but the model has {}",
                cache.num_states(),
                model.num_states()
            );
        }
        Ok(Self {
            model,
            vocab,
            cache,
            lexicon,
            intents,
            graph,
            idle_timeout,
            sessions: Mutex::new(HashMap::new()),
        })
    }

    /// Loads the run directory's model, vocabulary and cache. Intent classes
    /// come from `intents.jsonl` when present, else are mined from the
    /// configured corpus.
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let dir = RunDir::new(&cfg.paths.run_dir);
        let model = dir.load_model()?;
        let vocab = dir.load_vocab()?;
        let cache = dir.load_cache()?;
        let lexicon = cfg.paths.lexicon.as_deref().map(load_lexicon).transpose()?;
        let intents = if dir.exists(run_dir::INTENTS) {
            let p = dir.path(run_dir::INTENTS);
            dir.read(run_dir::INTENTS)?
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(serde_json::from_str)
                .collect::<std::result::Result<_, _>>()
                .with_context(|| format!("parsing {}", p.display()))?
        } else if cfg.paths.corpus.is_some() {
            mine_intents(&model, &load_configured_corpus(cfg)?.train, &vocab)?
        } else {
            Vec::new()
        };
        Self::new(
            model,
            vocab,
            cache,
            lexicon,
            intents,
            cfg.graph.clone(),
            Duration::from_secs(cfg.serve.idle_timeout_secs),
        )
    }

    fn responder(&self) -> Responder<'_> {
        Responder {
            model: &self.model,
            cache: &self.cache,
            vocab: &self.vocab,
            lexicon: self.lexicon.as_ref(),
        }
    }

    /// Drops sessions idle past the timeout; returns how many were dropped.
    pub fn expire_idle(&self) -> usize {
        let mut map = self.sessions.lock().expect("session map poisoned");
        let before = map.len();
        let timeout = self.idle_timeout;
        map.retain(|_, e| e.lock().map(|e| e.last_used.elapsed() <= timeout).unwrap_or(false));
        before - map.len()
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session map poisoned").len()
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Entry>>, ApiError> {
        self.expire_idle();
        self.sessions
            .lock()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown or expired session `{id}`")))
    }

    fn decoded(&self, z: usize) -> Result<Vec<ResponseView>, ApiError> {
        let list = self
            .cache
            .states
            .get(z)
            .ok_or_else(|| ApiError::not_found(format!("state {z} out of range (K = {})", self.cache.num_states())))?;
        list.iter()
            .map(|r| {
                Ok(ResponseView {
                    text: self.vocab.decode(&r.tokens)?.join(" "),
                    logprob: r.logprob,
                    terminated: r.terminated,
                })
            })
            .collect::<lstn::Result<_>>()
            .map_err(ApiError::from)
    }

    pub fn flow_graph(&self, min_edge_count: usize, top_r: usize) -> lstn::Result<DialogFlowGraph> {
        export_flow_graph(&self.intents, &self.cache, &self.vocab, min_edge_count, top_r)
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<LstnError> for ApiError {
    fn from(e: LstnError) -> Self {
        match e {
            LstnError::Argument(m) => Self::bad_request(m),
            other => Self::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseView {
    pub text: String,
    pub logprob: f64,
    pub terminated: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurnRequest {
    pub utterance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnResponse {
    pub session_id: String,
    pub turn: usize,
    pub utterance: String,
    pub response: String,
    pub state_marginal: Vec<f64>,
    pub argmax_state: usize,
    pub top_responses: Vec<ResponseView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub transcript: Vec<TranscriptEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateView {
    pub state: usize,
    pub responses: Vec<ResponseView>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphQuery {
    pub min_edge_count: Option<usize>,
    pub top_r: Option<usize>,
}

type Shared = Arc<AppState>;

async fn create_session(State(s): State<Shared>) -> impl IntoResponse {
    s.expire_idle();
    let id = uuid::Uuid::new_v4().to_string();
    let entry = Entry {
        session: Session::new(id.clone()),
        last_used: Instant::now(),
    };
    s.sessions
        .lock()
        .expect("session map poisoned")
        .insert(id.clone(), Arc::new(Mutex::new(entry)));
    (
        StatusCode::CREATED,
        Json(json!({ "session_id": id, "k": s.model.num_states() })),
    )
}

async fn post_turn(
    State(s): State<Shared>,
    UrlPath(id): UrlPath<String>,
    body: std::result::Result<Json<TurnRequest>, JsonRejection>,
) -> Result<Json<TurnResponse>, ApiError> {
    let entry = s.session(&id)?;
    let Json(req) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let mut e = entry.lock().expect("session poisoned");
    e.last_used = Instant::now();
    let t = s.responder().step(&mut e.session, &req.utterance)?.clone();
    Ok(Json(TurnResponse {
        session_id: id,
        turn: t.turn,
        utterance: t.user,
        response: t.response,
        top_responses: s.decoded(t.state)?,
        state_marginal: t.marginal,
        argmax_state: t.state,
    }))
}

async fn get_session(State(s): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Json<SessionView>, ApiError> {
    let entry = s.session(&id)?;
    let mut e = entry.lock().expect("session poisoned");
    e.last_used = Instant::now();
    Ok(Json(SessionView {
        session_id: id,
        transcript: e.session.transcript.clone(),
    }))
}

async fn delete_session(State(s): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<StatusCode, ApiError> {
    match s.sessions.lock().expect("session map poisoned").remove(&id) {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ApiError::not_found(format!("unknown or expired session `{id}`"))),
    }
}

async fn list_states(State(s): State<Shared>) -> Result<Json<Value>, ApiError> {
    let states = (0..s.cache.num_states())
        .map(|z| {
            Ok(StateView {
                state: z,
                responses: s.decoded(z)?,
            })
        })
        .collect::<Result<Vec<_>, ApiError>>()?;
    Ok(Json(json!({ "states": states })))
}

async fn get_state(State(s): State<Shared>, UrlPath(z): UrlPath<String>) -> Result<Json<StateView>, ApiError> {
    let z: usize = z
        .parse()
        .map_err(|_| ApiError::bad_request(format!("state `{z}` is not a non-negative integer")))?;
    Ok(Json(StateView {
        state: z,
        responses: s.decoded(z)?,
    }))
}

async fn get_graph(
    State(s): State<Shared>,
    q: std::result::Result<Query<GraphQuery>, QueryRejection>,
) -> Result<Json<DialogFlowGraph>, ApiError> {
    let Query(q) = q.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let graph = s.flow_graph(
        q.min_edge_count.unwrap_or(s.graph.min_edge_count),
        q.top_r.unwrap_or(s.graph.top_r),
    )?;
    Ok(Json(graph))
}

async fn get_meta(State(s): State<Shared>) -> Json<Value> {
    Json(json!({
        "schema_version": SCHEMA_VERSION,
        "k": s.model.num_states(),
        "vocab_size": s.vocab.len(),
        "config_hash": s.model.config().hash(),
        "vocab_hash": s.vocab.hash(),
        "beam": s.cache.beam,
        "idle_timeout_secs": s.idle_timeout.as_secs(),
        "intent_classes": s.intents.len(),
    }))
}

async fn fallback() -> ApiError {
    ApiError::not_found("no such endpoint")
}

pub fn router(state: Shared, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session).delete(delete_session))
        .route("/v1/sessions/{id}/turns", post(post_turn))
        .route("/v1/states", get(list_states))
        .route("/v1/states/{z}", get(get_state))
        .route("/v1/graph", get(get_graph))
        .route("/v1/meta", get(get_meta))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api.fallback(fallback),
    }
}

/// Binds and serves until interrupted, sweeping idle sessions periodically.
pub async fn serve(state: AppState, cfg: &ServeConfig) -> Result<()> {
    let state = Arc::new(state);
    let sweep_every = Duration::from_secs(cfg.idle_timeout_secs.clamp(1, 60));
    let sweeper = state.clone();
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(sweep_every);
        loop {
            tick.tick().await;
            let n = sweeper.expire_idle();
            if n > 0 {
                info!("expired {n} idle sessions");
            }
        }
    });
    let app = router(state, cfg.static_dir.as_deref());
    let addr = format!("{}:{}", cfg.host, cfg.port);
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    println!("serving on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .context("serving")
}
