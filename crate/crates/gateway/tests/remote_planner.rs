mod common;

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use common::{start, TestServer};
use serde_json::{json, Value};
use wayfinder_gateway::{Config, ConfigLayer};

type Reply = Box<dyn Fn(&str, &Value, usize) -> (u16, String) + Send + Sync>;

#[derive(Default)]
struct Seen {
    calls: HashMap<String, usize>,
    auth: Vec<Option<String>>,
    bodies: Vec<Value>,
}

#[derive(Clone)]
struct Mock {
    reply: Arc<Reply>,
    seen: Arc<Mutex<Seen>>,
}

fn op_of(system: &str) -> &'static str {
    [
        ("Split", "decompose"),
        ("Ask", "questions"),
        ("Write", "module"),
        ("Summarize", "summary"),
        ("Propose", "propose"),
        ("Classify", "classify"),
    ]
    .into_iter()
    .find(|(p, _)| system.starts_with(p))
    .map(|(_, op)| op)
    .unwrap_or("unknown")
}

async fn completions(State(m): State<Mock>, headers: HeaderMap, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    let system = body["messages"][0]["content"].as_str().unwrap_or_default().to_string();
    let user: Value = serde_json::from_str(body["messages"][1]["content"].as_str().unwrap_or("null")).unwrap_or(Value::Null);
    let op = op_of(&system);
    let n = {
        let mut s = m.seen.lock().unwrap();
        s.auth.push(headers.get("authorization").map(|v| v.to_str().unwrap().to_string()));
        s.bodies.push(body.clone());
        let c = s.calls.entry(op.to_string()).or_default();
        *c += 1;
        *c
    };
    let (status, content) = (m.reply)(op, &user, n);
    let envelope = json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": content}}]});
    (StatusCode::from_u16(status).unwrap(), Json(envelope))
}

async fn mock(reply: Reply) -> (String, Arc<Mutex<Seen>>) {
    let seen = Arc::new(Mutex::new(Seen::default()));
    let state = Mock { reply: Arc::new(reply), seen: Arc::clone(&seen) };
    let app = Router::new().route("/v1/chat/completions", post(completions)).with_state(state);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (format!("http://{addr}/v1/chat/completions"), seen)
}

/// A planner that behaves: used as the base for the fault cases.
fn sane(op: &str, _user: &Value) -> String {
    match op {
        "decompose" => json!({"subgoals": ["Buying milk"]}),
        "questions" => json!({"questions": [{"text": "Do you have a preferred type of milk?", "context_key": "milk_type"}]}),
        "module" => json!({"kind": "Exploration", "directive": "Search for low-priced fat-free milk on Amazon", "context_keys": ["milk_type"]}),
        "summary" => json!({"narrative": "Found fat-free milk on Amazon."}),
        "propose" => json!({"suggestions": [
            {"kind": "ProposedModule", "text": "Also search Walmart?", "module_kind": "Exploration", "directive": "Search for fat-free milk on Walmart"},
            {"kind": "TerminationOffer", "text": "That seems enough, shall I stop?"}
        ]}),
        "classify" => json!({"kind": "context", "items": [{"key": "milk_type", "value": "fat-free milk"}]}),
        _ => json!({}),
    }
    .to_string()
}

async fn server(endpoint: &str, key_env: &str, dir: &std::path::Path) -> TestServer {
    let layer = ConfigLayer {
        data_dir: Some(dir.to_path_buf()),
        corpus: Some("milk".into()),
        backend: Some("remote".into()),
        planner: wayfinder_gateway::config::PlannerLayer {
            endpoint: Some(endpoint.into()),
            model: Some("test-model".into()),
            api_key_env: Some(key_env.into()),
            timeout_secs: Some(5),
            max_retries: Some(2),
        },
        ..Default::default()
    };
    let cfg: Config = Config::resolve(&[&layer]).unwrap();
    start(cfg).await
}

async fn create(s: &TestServer) -> (u16, Value) {
    s.post("/sessions", json!({"goal": "Buy milk for me", "backend": "remote"})).await
}

#[tokio::test(flavor = "multi_thread")]
async fn a_remote_session_runs_a_loop_and_never_logs_the_key() {
    let secret = "sk-test-4f1c9a0b7e";
    std::env::set_var("WAYFINDER_TEST_KEY_LOOP", secret);
    let (endpoint, seen) = mock(Box::new(|op, user, _| (200, sane(op, user)))).await;
    let dir = tempfile::tempdir().unwrap();
    let s = server(&endpoint, "WAYFINDER_TEST_KEY_LOOP", dir.path()).await;

    let (status, created) = create(&s).await;
    assert_eq!(status, 201, "{created}");
    assert_eq!(created["backend"], "remote");
    let id = created["session_id"].as_str().unwrap().to_string();
    let fb = format!("/sessions/{id}/feedback");

    // free text goes through the classifier
    let (status, body) = s.post(&fb, json!({"text": "fat-free please"})).await;
    assert_eq!(status, 200, "{body}");
    let (status, body) = s.post(&fb, json!({"kind": "decision"})).await;
    assert_eq!(status, 200, "{body}");
    s.settle(&id).await;
    let snap = s.snapshot(&id).await;
    assert_eq!(snap["phase"], "DecisionPhase");
    assert_eq!(snap["state"]["modules"][0]["directive"], "Search for low-priced fat-free milk on Amazon");
    assert!(!snap["state"]["kb"]["findings"].as_array().unwrap().is_empty());
    let offer = snap["state"]["suggestions"]
        .as_array()
        .unwrap()
        .iter()
        .find(|s| s["kind"] == "TerminationOffer")
        .unwrap()["id"]
        .clone();
    assert_eq!(s.post(&fb, json!({"accepted_suggestion_id": offer})).await.0, 200);
    assert_eq!(s.snapshot(&id).await["phase"], "GoalDone");

    let seen = seen.lock().unwrap();
    for op in ["decompose", "questions", "classify", "module", "summary", "propose"] {
        assert_eq!(seen.calls.get(op), Some(&1), "{op}");
    }
    assert!(seen.auth.iter().all(|a| a.as_deref() == Some(&format!("Bearer {secret}")[..])));
    for b in &seen.bodies {
        assert_eq!(b["model"], "test-model");
        assert_eq!(b["temperature"], 0);
        assert!(!b.to_string().contains(secret));
    }
    for entry in std::fs::read_dir(dir.path()).unwrap() {
        let text = std::fs::read_to_string(entry.unwrap().path()).unwrap();
        assert!(!text.contains(secret));
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn malformed_output_is_retried() {
    let (endpoint, seen) = mock(Box::new(|op, user, n| match (op, n) {
        ("decompose", 1) => (200, "Sure! Here are the subgoals: buying milk".into()),
        ("decompose", 2) => (200, json!({"subgoals": []}).to_string()),
        ("module", 1) => (200, json!({"kind": "Exploitation", "directive": "x"}).to_string()),
        _ => (200, sane(op, user)),
    }))
    .await;
    let dir = tempfile::tempdir().unwrap();
    let s = server(&endpoint, "WAYFINDER_TEST_KEY_UNSET_1", dir.path()).await;
    let (status, created) = create(&s).await;
    assert_eq!(status, 201, "{created}");
    let id = created["session_id"].as_str().unwrap().to_string();
    // an explicit kind the first reply ignores
    let (status, body) = s.post(&format!("/sessions/{id}/feedback"), json!({"kind": "decision", "module_kind": "Exploration"})).await;
    assert_eq!(status, 200, "{body}");
    s.settle(&id).await;
    let snap = s.snapshot(&id).await;
    assert_eq!(snap["state"]["modules"][0]["kind"], "Exploration");
    let seen = seen.lock().unwrap();
    assert_eq!(seen.calls["decompose"], 3);
    assert_eq!(seen.calls["module"], 2);
    // no key configured: no authorization header
    assert!(seen.auth.iter().all(Option::is_none));
}

#[tokio::test(flavor = "multi_thread")]
async fn persistently_malformed_classification_falls_back_to_a_directive() {
    let (endpoint, seen) = mock(Box::new(|op, user, _| match op {
        "classify" => (200, json!({"kind": "shrug"}).to_string()),
        _ => (200, sane(op, user)),
    }))
    .await;
    let dir = tempfile::tempdir().unwrap();
    let s = server(&endpoint, "WAYFINDER_TEST_KEY_UNSET_2", dir.path()).await;
    let id = create(&s).await.1["session_id"].as_str().unwrap().to_string();
    let (status, body) = s.post(&format!("/sessions/{id}/feedback"), json!({"text": "look on Amazon"})).await;
    assert_eq!(status, 200, "{body}");
    assert_eq!(body["warnings"].as_array().unwrap().len(), 1);
    s.settle(&id).await;
    let events = s.gateway.session(&id).unwrap().durable_events(0);
    let kinds: Vec<&str> = events.iter().map(|e| e.kind().as_str()).collect();
    let i = kinds.iter().position(|k| *k == "ErrorNoted").unwrap();
    assert_eq!(kinds[i + 1..i + 3], ["FeedbackReceived", "ModuleGenerated"]);
    let note: Value = serde_json::from_str(&events[i].to_line()).unwrap();
    assert_eq!(note["payload"]["code"], "MALFORMED_RESPONSE");
    let fb: Value = serde_json::from_str(&events[i + 1].to_line()).unwrap();
    assert_eq!(fb["payload"]["feedback"]["payload"]["kind"], "decision");
    assert_eq!(fb["payload"]["feedback"]["payload"]["directive"], "look on Amazon");
    assert_eq!(seen.lock().unwrap().calls["classify"], 3);
}

#[tokio::test(flavor = "multi_thread")]
async fn an_unreachable_planner_fails_creation_and_stores_nothing() {
    let dir = tempfile::tempdir().unwrap();
    // a port nothing listens on
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let s = server(&format!("http://127.0.0.1:{port}/v1/chat/completions"), "WAYFINDER_TEST_KEY_UNSET_3", dir.path()).await;
    let (status, body) = create(&s).await;
    assert_eq!((status, body["error"]["code"].as_str()), (503, Some("BACKEND_FAILURE")));
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    assert_eq!(s.get("/sessions").await.1, json!([]));
}

#[tokio::test(flavor = "multi_thread")]
async fn a_failing_planner_mid_session_leaves_a_question_not_a_crash() {
    let (endpoint, _seen) = mock(Box::new(|op, user, _| match op {
        "module" => (500, "{}".into()),
        _ => (200, sane(op, user)),
    }))
    .await;
    let dir = tempfile::tempdir().unwrap();
    let s = server(&endpoint, "WAYFINDER_TEST_KEY_UNSET_4", dir.path()).await;
    let id = create(&s).await.1["session_id"].as_str().unwrap().to_string();
    let (status, body) = s.post(&format!("/sessions/{id}/feedback"), json!({"kind": "decision"})).await;
    assert_eq!(status, 200, "{body}");
    let snap = s.snapshot(&id).await;
    assert_eq!(snap["phase"], "ContextGathering");
    assert_eq!(snap["executing"], false);
    let kinds: Vec<String> =
        s.gateway.session(&id).unwrap().durable_events(0).iter().map(|e| e.kind().to_string()).collect();
    assert!(kinds.ends_with(&["FeedbackReceived".into(), "ErrorNoted".into(), "QuestionsPosed".into()]), "{kinds:?}");
}
