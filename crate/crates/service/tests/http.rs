use std::path::Path;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;

use explainer_core::config::{ExplainerConfig, LlmSettings};
use explainer_core::querygen::LEFT_QUESTION;
use explainer_core::trace::{load_trace, RecordedTree};
use explainer_service::{router, AppState};

fn app(dir: &Path) -> Router {
    let config = ExplainerConfig::default();
    let client = LlmSettings::default().client().unwrap();
    router(AppState::new(config, client, dir))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = call_raw(app, method, uri, body).await;
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

async fn call_raw(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
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
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
}

async fn session(app: &Router, budget: u64) -> String {
    let (status, v) = call(app, "POST", "/sessions", Some(json!({ "planner": { "iteration_budget": budget, "seed": 4 } }))).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    assert_eq!(v["state"], 0);
    assert_eq!(v["params"]["iteration_budget"], budget);
    assert_eq!(v["params"]["gamma"], 0.99);
    v["session_id"].as_str().unwrap().to_string()
}

fn assert_error(v: &Value, code: &str) {
    assert_eq!(v["code"], code, "{v}");
    assert!(v["message"].is_string());
    assert!(v.get("details").is_some());
}

#[tokio::test]
async fn health_reports_model() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (status, v) = call(&app, "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["model"], "deterministic-double");
}

#[tokio::test]
async fn steps_persist_traces_and_advance() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = session(&app, 300).await;
    let mut state = 0;
    for k in 0..3u64 {
        let (status, v) = call(&app, "POST", &format!("/sessions/{id}/step"), None).await;
        if status == StatusCode::CONFLICT {
            break;
        }
        assert_eq!(status, StatusCode::OK, "{v}");
        assert_eq!(v["decision_step"], k);
        assert_eq!(v["root_state"], state);
        assert_eq!(v["new_state"], v["sampled_outcome"]["next_state"]);
        assert_eq!(v["trace_ref"]["file"], format!("step_{k}.tree"));
        let tree = load_trace(&dir.path().join(&id).join(format!("step_{k}.tree"))).unwrap();
        assert_eq!(tree.metadata.decision_step, k);
        assert_eq!(tree.metadata.chosen_action.index() as u64, v["chosen_action"].as_u64().unwrap());
        assert_ne!(tree.metadata.created_at, explainer_core::mcts::UNSET_TIMESTAMP);
        state = v["new_state"].as_u64().unwrap();
        if v["terminal"] == true {
            break;
        }
    }
    let (status, v) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["state"], state);
    let steps = v["steps"].as_array().unwrap();
    assert!(!steps.is_empty());
    assert_eq!(v["next_decision_step"], steps.len());
    assert_eq!(steps[0]["revisions"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn tree_view_applies_filters_and_raw_matches_file() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = session(&app, 500).await;
    call(&app, "POST", &format!("/sessions/{id}/step"), None).await;
    let file = dir.path().join(&id).join("step_0.tree");
    let tree: RecordedTree = load_trace(&file).unwrap();

    let (status, v) = call(&app, "GET", &format!("/sessions/{id}/trees/0"), None).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["depth_limit"], 3);
    let expected = tree.nodes.iter().filter(|n| n.depth <= 3).count();
    assert_eq!(v["shown_nodes"], expected);
    assert_eq!(v["total_nodes"], tree.nodes.len());

    let (_, v) = call(&app, "GET", &format!("/sessions/{id}/trees/0?depth=1&min_visits=1000"), None).await;
    assert_eq!(v["shown_nodes"], 1);
    assert!(v["nodes"][0]["hidden_children"].as_u64().unwrap() > 0);
    let edges = v["edges"].as_array().unwrap();
    assert!(edges.iter().all(|e| e["risk"].as_f64().is_some_and(|r| (0.0..=1.0).contains(&r))));

    let (status, raw) = call_raw(&app, "GET", &format!("/sessions/{id}/trees/0/raw"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(raw, std::fs::read(&file).unwrap());

    let (status, v) = call(&app, "GET", &format!("/sessions/{id}/trees/0?bogus=1"), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_error(&v, "InvalidRequest");
}

#[tokio::test]
async fn general_question_on_fresh_step_is_answered() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = session(&app, 200).await;
    call(&app, "POST", &format!("/sessions/{id}/step"), None).await;
    let (status, v) = call(
        &app,
        "POST",
        &format!("/sessions/{id}/ask"),
        Some(json!({ "decision_step": 0, "question": "What is the agent planning to do here?" })),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["verdict"]["answerable"], true);
    assert_eq!(v["expansion_performed"], false);
    assert_eq!(v["intent"]["question_type"], "general");
    assert_eq!(v["rev"], 0);
    assert!(v["report"]["answer_text"].as_str().is_some_and(|t| !t.is_empty()));
    assert!(v.get("tree").is_none());
}

#[tokio::test]
async fn left_counterfactual_expands_into_a_new_revision() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    // Twelve simulations cannot give any root edge ten visits.
    let id = session(&app, 12).await;
    call(&app, "POST", &format!("/sessions/{id}/step"), None).await;
    let ask = json!({ "decision_step": 0, "question": LEFT_QUESTION, "rev": 0 });

    let (status, first) = call(&app, "POST", &format!("/sessions/{id}/ask"), Some(ask.clone())).await;
    assert_eq!(status, StatusCode::OK, "{first}");
    assert_eq!(first["initial_verdict"]["answerable"], false);
    assert_eq!(first["expansion_performed"], true);
    assert_eq!(first["verdict"]["answerable"], true);
    assert_eq!((first["base_rev"].clone(), first["rev"].clone()), (json!(0), json!(1)));
    assert_eq!(first["trace_ref"]["file"], "step_0.rev1.tree");
    assert_eq!(first["expansions"][0]["budget"], 500);
    assert_eq!(first["report"]["grounding"]["all_passed"], true, "{}", first["report"]["answer_text"]);
    assert!(first["report"]["evidence"]["expansion_note"].is_string());

    // The planned trace is untouched and both revisions are addressable.
    let rev0 = load_trace(&dir.path().join(&id).join("step_0.tree")).unwrap();
    assert_eq!(rev0.root().unwrap().visits, 12);
    let rev1 = load_trace(&dir.path().join(&id).join("step_0.rev1.tree")).unwrap();
    assert_eq!(rev1.metadata.expansions.len(), 1);
    let (_, v) = call(&app, "GET", &format!("/sessions/{id}/trees/0?rev=0"), None).await;
    assert_eq!(v["nodes"][0]["visits"], 12);
    assert_eq!(v["revisions"], 2);

    // Asking again about revision 0 reuses revision 1 and answers identically.
    let (_, second) = call(&app, "POST", &format!("/sessions/{id}/ask"), Some(ask)).await;
    assert_eq!(second, first);
    let (_, v) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(v["steps"][0]["revisions"].as_array().unwrap().len(), 2);

    // The latest revision already holds the evidence.
    let (_, third) = call(
        &app,
        "POST",
        &format!("/sessions/{id}/ask"),
        Some(json!({ "decision_step": 0, "question": LEFT_QUESTION })),
    )
    .await;
    assert_eq!(third["base_rev"], 1);
    assert_eq!(third["expansion_performed"], false);
    assert_eq!(third["report"]["answer_text"], first["report"]["answer_text"]);
}

#[tokio::test]
async fn concurrent_asks_share_one_revision() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = session(&app, 12).await;
    call(&app, "POST", &format!("/sessions/{id}/step"), None).await;
    let body = json!({ "decision_step": 0, "question": LEFT_QUESTION, "rev": 0 });
    let uri = format!("/sessions/{id}/ask");
    let handles: Vec<_> = (0..4)
        .map(|_| {
            let (app, uri, body) = (app.clone(), uri.clone(), body.clone());
            tokio::spawn(async move { call(&app, "POST", &uri, Some(body)).await })
        })
        .collect();
    for h in handles {
        let (status, v) = h.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        assert_eq!(v["rev"], 1);
    }
    let (_, v) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(v["steps"][0]["revisions"].as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn finished_episode_refuses_more_steps() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (_, v) = call(
        &app,
        "POST",
        "/sessions",
        Some(json!({ "map": "SG", "planner": { "iteration_budget": 50 }, "env_seed": 1 })),
    )
    .await;
    let id = v["session_id"].as_str().unwrap().to_string();
    let mut finished = false;
    for _ in 0..200 {
        let (status, v) = call(&app, "POST", &format!("/sessions/{id}/step"), None).await;
        assert_eq!(status, StatusCode::OK, "{v}");
        if v["terminal"] == true {
            finished = true;
            break;
        }
    }
    assert!(finished);
    let (status, v) = call(&app, "POST", &format!("/sessions/{id}/step"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_error(&v, "EpisodeFinished");
}

#[tokio::test]
async fn errors_use_the_shared_body() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (status, v) = call(&app, "GET", "/sessions/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_error(&v, "SessionNotFound");
    let (status, v) = call(&app, "POST", "/sessions/nope/step", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_error(&v, "SessionNotFound");

    let id = session(&app, 30).await;
    let (status, v) = call(
        &app,
        "POST",
        &format!("/sessions/{id}/ask"),
        Some(json!({ "decision_step": 0, "question": "Why?" })),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_error(&v, "StepNotFound");

    call(&app, "POST", &format!("/sessions/{id}/step"), None).await;
    let (status, v) = call(&app, "GET", &format!("/sessions/{id}/trees/0?rev=3"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_error(&v, "RevisionNotFound");
    let (status, v) = call(&app, "GET", &format!("/sessions/{id}/trees/4"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_error(&v, "StepNotFound");

    let (status, v) = call(&app, "POST", &format!("/sessions/{id}/ask"), Some(json!({ "question": "Why?" }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_error(&v, "InvalidRequest");
    let (status, v) = call(
        &app,
        "POST",
        &format!("/sessions/{id}/ask"),
        Some(json!({ "decision_step": 0, "question": "  " })),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_error(&v, "EmptyQuestion");

    for bad in [json!({ "map": "SXG" }), json!({ "planner": { "gamma": 2.0 } }), json!({ "colour": 1 })] {
        let (status, v) = call(&app, "POST", "/sessions", Some(bad)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST);
        assert_error(&v, "InvalidRequest");
    }
}
