#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};
use wayfinder_core::replay::Step;
use wayfinder_core::{Clock, FixedClock, RawFeedback};
use wayfinder_gateway::service::AgentLayer;
use wayfinder_gateway::{http, Config, ConfigLayer, Gateway};

pub struct TestServer {
    pub addr: SocketAddr,
    pub gateway: Arc<Gateway>,
    pub client: reqwest::Client,
    task: tokio::task::JoinHandle<()>,
}

impl Drop for TestServer {
    fn drop(&mut self) {
        self.task.abort();
    }
}

pub fn config(dir: &Path) -> Config {
    let layer = ConfigLayer { data_dir: Some(dir.to_path_buf()), ..Default::default() };
    Config::resolve(&[&layer]).unwrap()
}

pub async fn start(cfg: Config) -> TestServer {
    start_with(cfg, Arc::new(FixedClock::default()), None).await
}

pub async fn start_with(cfg: Config, clock: Arc<dyn Clock>, layer: Option<AgentLayer>) -> TestServer {
    let mut gw = Gateway::new(cfg, clock).unwrap();
    if let Some(l) = layer {
        gw = gw.with_agent_layer(l);
    }
    let gateway = Arc::new(gw);
    gateway.recover().await.unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let app = http::router(Arc::clone(&gateway));
    let task = tokio::spawn(async move {
        axum::serve(listener, app).await.unwrap();
    });
    TestServer { addr, gateway, client: reqwest::Client::new(), task }
}

impl TestServer {
    pub fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }

    pub async fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let r = self.client.post(self.url(path)).json(&body).send().await.unwrap();
        let status = r.status().as_u16();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    pub async fn post_keyed(&self, path: &str, body: Value, key: &str) -> (u16, Value) {
        let r = self.client.post(self.url(path)).header("Idempotency-Key", key).json(&body).send().await.unwrap();
        let status = r.status().as_u16();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    pub async fn get(&self, path: &str) -> (u16, Value) {
        let r = self.client.get(self.url(path)).send().await.unwrap();
        let status = r.status().as_u16();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    pub async fn create(&self, goal: &str, corpus: &str) -> String {
        let (status, body) = self.post("/sessions", json!({"goal": goal, "backend": "scripted", "corpus": corpus})).await;
        assert_eq!(status, 201, "{body}");
        body["session_id"].as_str().unwrap().to_string()
    }

    pub async fn snapshot(&self, id: &str) -> Value {
        let (status, body) = self.get(&format!("/sessions/{id}")).await;
        assert_eq!(status, 200, "{body}");
        body
    }

    /// Wait for any running module to finish.
    pub async fn settle(&self, id: &str) {
        tokio::time::timeout(Duration::from_secs(10), self.gateway.settle(id)).await.expect("module finished").unwrap();
    }

    /// Turn a scenario step into a request body, resolving `accept` by text
    /// against the session's open suggestions.
    pub async fn step_body(&self, id: &str, step: &Step) -> Value {
        let mut raw: RawFeedback = step.feedback.clone();
        if let Some(text) = &step.accept {
            let snap = self.snapshot(id).await;
            let state = &snap["state"];
            let open: Vec<u64> = state["open_suggestions"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
            let found = state["suggestions"]
                .as_array()
                .unwrap()
                .iter()
                .find(|s| open.contains(&s["id"].as_u64().unwrap()) && s["text"].as_str() == Some(text.as_str()))
                .unwrap_or_else(|| panic!("no open suggestion {text:?}"));
            raw.accepted_suggestion_id = Some(serde_json::from_value(found["id"].clone()).unwrap());
        }
        serde_json::to_value(raw).unwrap()
    }

    /// Drive a bundled scenario's steps through the HTTP API.
    pub async fn drive(&self, id: &str, scenario: &str) {
        let s = wayfinder_core::bundled::scenario(scenario).unwrap().unwrap();
        for step in &s.steps {
            let body = self.step_body(id, step).await;
            let (status, resp) = self.post(&format!("/sessions/{id}/feedback"), body).await;
            assert_eq!(status, 200, "{resp}");
            self.settle(id).await;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SseEvent {
    pub id: Option<String>,
    pub event: String,
    pub data: String,
}

/// Read SSE frames until `stop` says so or `limit` passes.
pub async fn read_sse(
    resp: &mut reqwest::Response,
    limit: Duration,
    stop: impl Fn(&[SseEvent]) -> bool,
) -> Vec<SseEvent> {
    let mut buf = String::new();
    let mut out = Vec::new();
    let deadline = tokio::time::Instant::now() + limit;
    loop {
        while let Some(pos) = buf.find("\n\n") {
            let frame: String = buf.drain(..pos + 2).collect();
            let mut ev = SseEvent { id: None, event: "message".into(), data: String::new() };
            let mut has_data = false;
            for line in frame.lines() {
                if let Some(v) = line.strip_prefix("id:") {
                    ev.id = Some(v.trim().to_string());
                } else if let Some(v) = line.strip_prefix("event:") {
                    ev.event = v.trim().to_string();
                } else if let Some(v) = line.strip_prefix("data:") {
                    if has_data {
                        ev.data.push('\n');
                    }
                    ev.data.push_str(v.strip_prefix(' ').unwrap_or(v));
                    has_data = true;
                }
            }
            if has_data {
                out.push(ev);
                if stop(&out) {
                    return out;
                }
            }
        }
        match tokio::time::timeout_at(deadline, resp.chunk()).await {
            Ok(Ok(Some(bytes))) => buf.push_str(&String::from_utf8_lossy(&bytes)),
            _ => return out,
        }
    }
}

/// Events of the headless golden replay of a bundled scenario.
pub fn golden(name: &str) -> Vec<wayfinder_core::SessionEvent> {
    let s = wayfinder_core::bundled::scenario(name).unwrap().unwrap();
    let world = wayfinder_core::bundled::corpus(s.corpus.as_deref().unwrap()).unwrap().unwrap();
    let r = wayfinder_core::replay::run_scripted(
        &s,
        Arc::new(world),
        wayfinder_core::ExplorationBudget::default(),
        Arc::new(FixedClock::default()),
    );
    assert!(r.passed());
    r.events
}
