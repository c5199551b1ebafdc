//! HTTP chat service: in-memory seeker sessions against one shared model.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ntrd_core::corpus::{ItemId, Role, Turn};
use ntrd_core::model::{Model, Reply};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

pub const MAX_MESSAGE_CHARS: usize = 1000;
/// Candidates listed per slot in a chat response.
pub const TOP_K: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemView {
    pub id: ItemId,
    pub title: String,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotView {
    /// Token index of the slot in `template`.
    pub position: usize,
    pub item: ItemView,
    /// Highest-probability candidates under the selector, best first.
    pub top_k: Vec<ItemView>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub session_id: String,
    pub text: String,
    pub template: Vec<String>,
    /// Filled items in slot order.
    pub items: Vec<ItemView>,
    pub slots: Vec<SlotView>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub role: Role,
    pub text: String,
    pub items: Vec<ItemView>,
    /// Tokenized form the model conditions on.
    pub tokens: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub checkpoint: String,
    pub created_at: u64,
    pub last_active: u64,
    pub history: Vec<HistoryEntry>,
}

#[derive(Clone, Debug, Deserialize)]
pub struct MessageBody {
    pub text: String,
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: ErrorDetail,
}

#[derive(Debug, Serialize)]
struct ErrorDetail {
    code: &'static str,
    message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }

    fn not_found(id: &str) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, "session_not_found", format!("no session {id}"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: ErrorDetail {
                code: self.code,
                message: self.message,
            },
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "invalid_body", r.body_text())
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Shared service state. The model is immutable; each session is locked
/// only while its history is read or appended.
pub struct AppState {
    model: Arc<Model>,
    checkpoint: String,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
}

impl AppState {
    pub fn new(model: Model, checkpoint: impl Into<String>) -> Self {
        AppState {
            model: Arc::new(model),
            checkpoint: checkpoint.into(),
            sessions: Mutex::new(HashMap::new()),
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions
            .lock()
            .expect("session map lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(id))
    }

    pub fn snapshot(&self) -> Vec<Session> {
        let map = self.sessions.lock().expect("session map lock");
        let mut out: Vec<Session> = map.values().map(|s| s.lock().expect("session lock").clone()).collect();
        out.sort_by(|a, b| a.id.cmp(&b.id));
        out
    }

    pub fn restore(&self, sessions: Vec<Session>) {
        let mut map = self.sessions.lock().expect("session map lock");
        for s in sessions {
            map.insert(s.id.clone(), Arc::new(Mutex::new(s)));
        }
    }

    pub fn save_sessions(&self, path: &Path) -> anyhow::Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(&self.snapshot())?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load_sessions(&self, path: &Path) -> anyhow::Result<usize> {
        let sessions: Vec<Session> = serde_json::from_slice(&std::fs::read(path)?)?;
        let n = sessions.len();
        self.restore(sessions);
        Ok(n)
    }

    fn item_view(&self, id: ItemId, probability: f64) -> ItemView {
        ItemView {
            id,
            title: self.model.catalog.title(id).unwrap_or_default().to_string(),
            probability,
        }
    }

    /// Builds the response payload for a reply.
    pub fn chat_response(&self, session_id: &str, reply: &Reply) -> ChatResponse {
        let slots: Vec<SlotView> = reply
            .slots
            .iter()
            .map(|s| {
                let mut order: Vec<usize> = (0..s.candidates.len()).collect();
                order.sort_by(|&a, &b| s.probabilities[b].total_cmp(&s.probabilities[a]).then(a.cmp(&b)));
                SlotView {
                    position: s.position,
                    item: self.item_view(s.item, s.probability()),
                    top_k: order
                        .into_iter()
                        .take(TOP_K)
                        .map(|i| self.item_view(s.candidates[i], s.probabilities[i]))
                        .collect(),
                }
            })
            .collect();
        ChatResponse {
            session_id: session_id.to_string(),
            text: reply.text.clone(),
            template: reply.template.clone(),
            items: slots.iter().map(|s| s.item.clone()).collect(),
            slots,
        }
    }
}

fn history_turns(model: &Model, history: &[HistoryEntry]) -> Vec<Turn> {
    history
        .iter()
        .map(|h| model.parse_turn(h.role, &h.tokens.join(" "), false))
        .collect()
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

#[derive(Serialize, Deserialize)]
pub struct Created {
    pub session_id: String,
}

async fn create_session(State(state): State<Arc<AppState>>) -> (StatusCode, Json<Created>) {
    let id = uuid::Uuid::new_v4().simple().to_string();
    let t = now();
    let session = Session {
        id: id.clone(),
        checkpoint: state.checkpoint.clone(),
        created_at: t,
        last_active: t,
        history: Vec::new(),
    };
    state
        .sessions
        .lock()
        .expect("session map lock")
        .insert(id.clone(), Arc::new(Mutex::new(session)));
    log::info!("created session {id}");
    (StatusCode::CREATED, Json(Created { session_id: id }))
}

async fn get_session(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<Session>, ApiError> {
    let s = state.session(&id)?;
    let snapshot = s.lock().expect("session lock").clone();
    Ok(Json(snapshot))
}

async fn delete_session(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<StatusCode, ApiError> {
    match state.sessions.lock().expect("session map lock").remove(&id) {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ApiError::not_found(&id)),
    }
}

async fn post_message(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<MessageBody>, JsonRejection>,
) -> Result<Json<ChatResponse>, ApiError> {
    let Json(body) = body?;
    let text = body.text.trim().to_string();
    if text.is_empty() {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "empty_message",
            "message text is empty",
        ));
    }
    let chars = text.chars().count();
    if chars > MAX_MESSAGE_CHARS {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "message_too_long",
            format!("message has {chars} characters, limit {MAX_MESSAGE_CHARS}"),
        ));
    }
    let session = state.session(&id)?;
    let worker_state = Arc::clone(&state);
    let response = tokio::task::spawn_blocking(move || -> Result<ChatResponse, ApiError> {
        // Holding the session lock across inference serializes messages
        // within one session while other sessions proceed.
        let mut s = session.lock().expect("session lock");
        let model = worker_state.model();
        let seeker = model.parse_turn(Role::Seeker, &text, true);
        let mut turns = history_turns(model, &s.history);
        turns.push(seeker.clone());
        let reply = model
            .reply(&turns)
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "inference_failed", e.to_string()))?;
        let response = worker_state.chat_response(&s.id, &reply);
        s.history.push(HistoryEntry {
            role: Role::Seeker,
            text,
            items: seeker.items().map(|i| worker_state.item_view(i, 1.0)).collect(),
            tokens: seeker.tokens.clone(),
        });
        s.history.push(HistoryEntry {
            role: Role::Recommender,
            text: reply.text.clone(),
            items: response.items.clone(),
            tokens: reply.tokens.clone(),
        });
        s.last_active = now();
        Ok(response)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "inference_failed", e.to_string()))??;
    Ok(Json(response))
}

async fn api_not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

/// Routes for the JSON API plus, when given, static files under `/`.
pub fn router(state: Arc<AppState>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/messages", post(post_message))
        .fallback(api_not_found);
    let app = Router::new()
        .route("/healthz", get(healthz))
        .nest("/api", api)
        .with_state(state);
    match static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app.fallback(api_not_found),
    }
}
