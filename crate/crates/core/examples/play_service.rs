//! Drives the live-play HTTP API in-process: create an AvE session, step it
//! with human moves, read the log back and delete it. The same JSON goes
//! over the wire when the server runs as `empower serve`.
//!
//! ```text
//! cargo run --example play_service
//! ```

use axum::body::Body;
use axum::http::{header, Method, Request};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use empower::service::{router, AppState, ServiceConfig};

async fn call(app: &std::sync::Arc<AppState>, method: Method, uri: &str, body: Option<Value>) -> Value {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header(header::CONTENT_TYPE, "application/json")
        .body(body.map_or_else(Body::empty, |v| Body::from(v.to_string())))
        .expect("valid request");
    let resp = router(app.clone()).oneshot(req).await.expect("infallible");
    let status = resp.status();
    let bytes = resp.into_body().collect().await.expect("body").to_bytes();
    let v = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    println!("{status} {uri}\n{}", serde_json::to_string(&v).unwrap_or_default());
    v
}

#[tokio::main(flavor = "current_thread")]
async fn main() {
    let app = AppState::new(ServiceConfig::default());
    let created = call(&app, Method::POST, "/sessions", Some(json!({"seed": 3, "num_blocks": 3, "assistant": "ave"}))).await;
    let id = created["session_id"].as_str().expect("session id").to_string();
    // right, right, down, down, stay
    for a in [1, 1, 3, 3, 4] {
        let r = call(&app, Method::POST, &format!("/sessions/{id}/step"), Some(json!({"human_action": a}))).await;
        if r["done"] == json!(true) {
            break;
        }
    }
    call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    // stepping an unknown session is a structured 404
    call(&app, Method::POST, "/sessions/nope/step", Some(json!({"human_action": 0}))).await;
    call(&app, Method::DELETE, &format!("/sessions/{id}"), None).await;
}
