use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use empower::agent::{argmax, train_esr, AgentCheckpoint, GridEnv, TrainConfig};
use empower::contrastive::ReprConfig;
use empower::features::Featurizer;
use empower::grid::{grid_step, GridConfig, GridFeaturizer, GridState, NOOP};
use empower::human::GridHuman;
use empower::service::{router, AppState, ServiceConfig};

async fn call(app: &Arc<AppState>, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = router(app.clone()).oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, value)
}

fn app_with(dir: &std::path::Path) -> Arc<AppState> {
    AppState::new(ServiceConfig {
        checkpoint_dir: dir.to_path_buf(),
        cors_origin: Some("http://localhost:5173".into()),
        ..ServiceConfig::default()
    })
}

fn wire_matches(state: &Value, s: &GridState) {
    assert_eq!(state["human"], json!(s.human_cell));
    assert_eq!(state["blocks"], json!(s.block_cells));
    assert_eq!(state["steps"], json!(s.steps_elapsed));
    assert_eq!(state["done"], json!(s.done));
}

/// Trains a two-epoch ESR assistant on the seed-7 layout and saves it as
/// `esr/ck.json` under `dir`.
fn tiny_checkpoint(dir: &std::path::Path) -> GridConfig {
    let config = GridConfig::from_seed(5, 5, 2, 7).unwrap();
    let mut env = GridEnv::new(config.clone(), GridHuman::new(5.0, 0.9), false).unwrap();
    let train = TrainConfig {
        epochs: 2,
        episodes_per_epoch: 2,
        repr_steps: 4,
        critic_steps: 4,
        repr: ReprConfig {
            hidden: vec![16],
            latent_dim: 8,
            batch_size: 16,
            ..ReprConfig::default()
        },
        critic_hidden: vec![16],
        critic_batch: 16,
        eval_episodes: 1,
        oracle_every: 0,
        ..TrainConfig::default()
    };
    let out = train_esr(&mut env, &train, 3, None).unwrap();
    std::fs::create_dir_all(dir.join("esr")).unwrap();
    AgentCheckpoint::new(&out.repr, &out.critic, train.reward_mode)
        .save(&dir.join("esr/ck.json"))
        .unwrap();
    config
}

#[tokio::test]
async fn create_step_show_delete() {
    let dir = tempfile::tempdir().unwrap();
    let app = app_with(dir.path());
    let (status, created) = call(&app, Method::POST, "/sessions", Some(json!({"seed": 7, "num_blocks": 2, "assistant": "none"}))).await;
    assert_eq!(status, StatusCode::CREATED);
    let id = created["session_id"].as_str().unwrap().to_string();
    let config = GridConfig::from_seed(5, 5, 2, 7).unwrap();
    let s0 = config.initial_state(7);
    wire_matches(&created["state"], &s0);
    assert_eq!(created["state"]["goal"], json!(config.goal_cell));
    assert_eq!(created["state"]["last_robot_action"], Value::Null);

    let (status, stepped) = call(&app, Method::POST, &format!("/sessions/{id}/step"), Some(json!({"human_action": 1}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(stepped["robot_action"], json!(NOOP));
    wire_matches(&stepped["state"], &grid_step(&s0, 1, NOOP, &config).unwrap());

    let (status, shown) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(shown["assistant"], json!("none"));
    assert_eq!(shown["step_log"], json!([{"human_action": 1, "robot_action": NOOP}]));

    let (status, _) = call(&app, Method::DELETE, &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    let (status, body) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], json!("session_not_found"));
}

#[tokio::test]
async fn same_seed_gives_same_state_and_new_ids() {
    let dir = tempfile::tempdir().unwrap();
    let app = app_with(dir.path());
    let req = json!({"seed": 7, "num_blocks": 2, "assistant": "random"});
    let (_, a) = call(&app, Method::POST, "/sessions", Some(req.clone())).await;
    let (_, b) = call(&app, Method::POST, "/sessions", Some(req)).await;
    assert_ne!(a["session_id"], b["session_id"]);
    assert_eq!(a["state"], b["state"]);
    assert_eq!(app.num_sessions(), 2);
}

#[tokio::test]
async fn error_codes() {
    let dir = tempfile::tempdir().unwrap();
    let app = app_with(dir.path());

    let (status, body) = call(&app, Method::POST, "/sessions", Some(json!({"seed": 1, "num_blocks": 2, "assistant": "esr", "checkpoint": "nope.json"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], json!("checkpoint_not_found"));
    let (status, body) = call(&app, Method::POST, "/sessions", Some(json!({"seed": 1, "num_blocks": 2, "assistant": "esr"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], json!("checkpoint_not_found"));
    for bad in ["../ck.json", "/etc/passwd"] {
        let (status, body) = call(&app, Method::POST, "/sessions", Some(json!({"seed": 1, "num_blocks": 2, "assistant": "esr", "checkpoint": bad}))).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{bad}");
        assert_eq!(body["error"], json!("invalid_request"));
    }
    let (status, body) = call(&app, Method::POST, "/sessions", Some(json!({"seed": 1, "num_blocks": 30, "assistant": "none"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"], json!("invalid_request"));
    let (status, _) = call(&app, Method::POST, "/sessions", Some(json!({"seed": "x"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, body) = call(&app, Method::POST, "/sessions/missing/step", Some(json!({"human_action": 0}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], json!("session_not_found"));

    let (_, created) = call(&app, Method::POST, "/sessions", Some(json!({"seed": 2, "num_blocks": 2, "assistant": "none", "horizon": 1}))).await;
    let id = created["session_id"].as_str().unwrap().to_string();
    for a in [-1, 5, 99] {
        let (status, body) = call(&app, Method::POST, &format!("/sessions/{id}/step"), Some(json!({"human_action": a}))).await;
        assert_eq!(status, StatusCode::BAD_REQUEST);
        assert_eq!(body["error"], json!("invalid_action"));
    }
    let (_, shown) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(shown["state"], created["state"], "invalid actions leave the state unchanged");

    let (status, stepped) = call(&app, Method::POST, &format!("/sessions/{id}/step"), Some(json!({"human_action": 0}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(stepped["done"], json!(true));
    let (status, body) = call(&app, Method::POST, &format!("/sessions/{id}/step"), Some(json!({"human_action": 0}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"], json!("episode_done"));
}

#[tokio::test]
async fn cors_header_names_the_ui_origin() {
    let dir = tempfile::tempdir().unwrap();
    let app = app_with(dir.path());
    let req = Request::builder()
        .method(Method::OPTIONS)
        .uri("/sessions")
        .header(header::ORIGIN, "http://localhost:5173")
        .header(header::ACCESS_CONTROL_REQUEST_METHOD, "POST")
        .body(Body::empty())
        .unwrap();
    let resp = router(app).oneshot(req).await.unwrap();
    assert_eq!(
        resp.headers().get(header::ACCESS_CONTROL_ALLOW_ORIGIN).unwrap(),
        "http://localhost:5173"
    );
}

#[tokio::test]
async fn scripted_esr_session_matches_offline_simulation() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_checkpoint(dir.path());
    let app = app_with(dir.path());
    let (status, created) = call(&app, Method::POST, "/sessions", Some(json!({"seed": 7, "num_blocks": 2, "assistant": "esr", "checkpoint": "esr/ck.json"}))).await;
    assert_eq!(status, StatusCode::CREATED, "{created}");
    let id = created["session_id"].as_str().unwrap().to_string();

    // offline: greedy critic over the same featurization and step function
    let (_, critic, _) = AgentCheckpoint::load(&dir.path().join("esr/ck.json")).unwrap();
    let feat = GridFeaturizer::new(config.clone());
    let mut s = config.initial_state(7);
    let script = [1, 3, 0, 2, 4, 1, 1, 3, 2, 0];
    let mut steps = 0;
    for &a_h in &script {
        if s.done {
            break;
        }
        let a_r = argmax(&critic.q_row(&feat.active(&s, None, None)));
        s = grid_step(&s, a_h, a_r, &config).unwrap();
        let (status, stepped) = call(&app, Method::POST, &format!("/sessions/{id}/step"), Some(json!({"human_action": a_h}))).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(stepped["robot_action"], json!(a_r));
        wire_matches(&stepped["state"], &s);
        let diag = &stepped["state"]["diagnostics"];
        assert_eq!(diag["per_action_reward"].as_array().unwrap().len(), config.num_robot_actions());
        assert_eq!(diag["q_values"].as_array().unwrap().len(), config.num_robot_actions());
        steps += 1;
    }
    assert!(steps > 0);
    let (_, shown) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(shown["step_log"].as_array().unwrap().len(), steps);
    wire_matches(&shown["state"], &s);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_steps_serialize() {
    let dir = tempfile::tempdir().unwrap();
    let app = app_with(dir.path());
    let (_, created) = call(&app, Method::POST, "/sessions", Some(json!({"seed": 9, "num_blocks": 2, "assistant": "random"}))).await;
    let id = created["session_id"].as_str().unwrap().to_string();
    let uri = format!("/sessions/{id}/step");
    let calls: Vec<_> = (0..4)
        .map(|i| {
            let (app, uri) = (app.clone(), uri.clone());
            tokio::spawn(async move { call(&app, Method::POST, &uri, Some(json!({"human_action": i % 5}))).await })
        })
        .collect();
    let mut ok = 0;
    for c in calls {
        let (status, _) = c.await.unwrap();
        ok += usize::from(status == StatusCode::OK);
        assert!(status == StatusCode::OK || status == StatusCode::CONFLICT);
    }
    let (_, shown) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    let log = shown["step_log"].as_array().unwrap();
    assert_eq!(log.len(), ok);

    let config = GridConfig::from_seed(5, 5, 2, 9).unwrap();
    let replayed = log.iter().fold(config.initial_state(9), |s, e| {
        grid_step(&s, e["human_action"].as_u64().unwrap() as usize, e["robot_action"].as_u64().unwrap() as usize, &config).unwrap()
    });
    wire_matches(&shown["state"], &replayed);
}
