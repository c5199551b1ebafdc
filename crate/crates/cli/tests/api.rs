mod common;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use ntrd_cli::service::{router, AppState, ChatResponse, Session, MAX_MESSAGE_CHARS};
use ntrd_core::corpus::Role;
use ntrd_core::training::load_model;
use serde_json::{json, Value};
use tower::ServiceExt;

fn fresh_app() -> (Router, Arc<AppState>) {
    let path = common::trained_checkpoint();
    let state = Arc::new(AppState::new(load_model(path).unwrap(), path.display().to_string()));
    (router(Arc::clone(&state), None), state)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, value)
}

async fn new_session(app: &Router) -> String {
    let (status, body) = call(app, "POST", "/api/sessions", None).await;
    assert_eq!(status, StatusCode::CREATED);
    body["session_id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn health_endpoint() {
    let (app, _) = fresh_app();
    let (status, body) = call(&app, "GET", "/healthz", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ok");
}

#[tokio::test]
async fn create_then_fetch_empty_session() {
    let (app, _) = fresh_app();
    let id = new_session(&app).await;
    let (status, body) = call(&app, "GET", &format!("/api/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    let session: Session = serde_json::from_value(body).unwrap();
    assert_eq!(session.id, id);
    assert!(session.history.is_empty());
}

#[tokio::test]
async fn unknown_session_is_a_json_404() {
    let (app, _) = fresh_app();
    let (status, body) = call(&app, "POST", "/api/sessions/nope/messages", Some(json!({"text": "hi"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"]["code"], "session_not_found");
    let (status, body) = call(&app, "GET", "/api/sessions/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(body["error"]["message"].as_str().unwrap().contains("nope"));
    let (status, body) = call(&app, "GET", "/api/elsewhere", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"]["code"], "not_found");
}

#[tokio::test]
async fn rejects_bad_messages() {
    let (app, _) = fresh_app();
    let id = new_session(&app).await;
    let uri = format!("/api/sessions/{id}/messages");
    let long = "a".repeat(MAX_MESSAGE_CHARS + 1);
    let (status, body) = call(&app, "POST", &uri, Some(json!({ "text": long }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"]["code"], "message_too_long");
    let (status, body) = call(&app, "POST", &uri, Some(json!({ "text": "   " }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"]["code"], "empty_message");
    let (status, body) = call(&app, "POST", &uri, Some(json!({ "words": "hi" }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"]["code"], "invalid_body");
    // Exactly at the limit is accepted.
    let edge = "a ".repeat(MAX_MESSAGE_CHARS / 2);
    let (status, _) = call(
        &app,
        "POST",
        &uri,
        Some(json!({ "text": edge.trim_end().to_string() + "b" })),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn comedy_request_gets_a_comedy_item() {
    let (app, state) = fresh_app();
    let id = new_session(&app).await;
    let uri = format!("/api/sessions/{id}/messages");
    // Synthetic dialogues open with a greeting exchange before preferences.
    let (status, _) = call(&app, "POST", &uri, Some(json!({ "text": "hi !" }))).await;
    assert_eq!(status, StatusCode::OK);
    let (status, body) = call(&app, "POST", &uri, Some(json!({ "text": "i love comedy movies" }))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let reply: ChatResponse = serde_json::from_value(body).unwrap();
    assert_eq!(reply.session_id, id);
    assert!(!reply.items.is_empty(), "no item in {:?}", reply.template);
    let comedy = [1000u64, 1001];
    for item in &reply.items {
        assert!(
            comedy.contains(&item.id.0),
            "{} ({}) is not a comedy",
            item.id,
            item.title
        );
        assert!(reply.text.contains(&item.title));
        assert_eq!(state.model().catalog.title(item.id), Some(item.title.as_str()));
    }
    for slot in &reply.slots {
        assert_eq!(reply.template[slot.position], "[ITEM]");
        assert_eq!(slot.top_k[0].id, slot.item.id);
        assert!(slot.top_k.windows(2).all(|w| w[0].probability >= w[1].probability));
    }

    let (_, body) = call(&app, "GET", &format!("/api/sessions/{id}"), None).await;
    let session: Session = serde_json::from_value(body).unwrap();
    let roles: Vec<Role> = session.history.iter().map(|h| h.role).collect();
    assert_eq!(
        roles,
        vec![Role::Seeker, Role::Recommender, Role::Seeker, Role::Recommender]
    );
    assert_eq!(session.history[3].text, reply.text);
}

#[tokio::test]
async fn sessions_are_isolated_and_deletable() {
    let (app, state) = fresh_app();
    let a = new_session(&app).await;
    let b = new_session(&app).await;
    assert_ne!(a, b);
    for _ in 0..2 {
        let (status, _) = call(
            &app,
            "POST",
            &format!("/api/sessions/{a}/messages"),
            Some(json!({"text": "hi !"})),
        )
        .await;
        assert_eq!(status, StatusCode::OK);
    }
    let (_, body) = call(&app, "GET", &format!("/api/sessions/{b}"), None).await;
    assert!(body["history"].as_array().unwrap().is_empty());
    let (_, body) = call(&app, "GET", &format!("/api/sessions/{a}"), None).await;
    assert_eq!(body["history"].as_array().unwrap().len(), 4);

    let snapshot = state.snapshot();
    assert_eq!(snapshot.len(), 2);

    let (status, body) = call(&app, "DELETE", &format!("/api/sessions/{a}"), None).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    assert_eq!(body, Value::Null);
    let (status, _) = call(&app, "DELETE", &format!("/api/sessions/{a}"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "GET", &format!("/api/sessions/{b}"), None).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn sessions_survive_a_save_and_load() {
    let (app, state) = fresh_app();
    let id = new_session(&app).await;
    call(
        &app,
        "POST",
        &format!("/api/sessions/{id}/messages"),
        Some(json!({"text": "any horror ?"})),
    )
    .await;
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("sessions.json");
    state.save_sessions(&file).unwrap();

    let (app2, state2) = fresh_app();
    assert_eq!(state2.load_sessions(&file).unwrap(), 1);
    assert_eq!(state2.snapshot(), state.snapshot());
    let (status, body) = call(
        &app2,
        "POST",
        &format!("/api/sessions/{id}/messages"),
        Some(json!({"text": "thanks"})),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(state2.snapshot()[0].history.len(), 4);
}

#[tokio::test]
async fn identical_histories_get_identical_replies_after_restart() {
    let script = ["hi !", "i love horror movies", "thanks , bye !"];
    let mut runs = Vec::new();
    for _ in 0..2 {
        let (app, _) = fresh_app();
        let id = new_session(&app).await;
        let mut replies = Vec::new();
        for text in script {
            let (status, body) = call(&app, "POST", &format!("/api/sessions/{id}/messages"), Some(json!({ "text": text }))).await;
            assert_eq!(status, StatusCode::OK);
            let mut reply: ChatResponse = serde_json::from_value(body).unwrap();
            reply.session_id.clear();
            replies.push(reply);
        }
        runs.push(replies);
    }
    assert_eq!(runs[0], runs[1]);
}
