use std::time::Duration;

use futures::StreamExt;
use photoloop_core::api::{CreatedSession, OptimizeAccepted, SessionState};
use photoloop_core::{ImageBuffer, Status};
use photoloop_service::{serve, ServiceConfig};
use reqwest::{multipart, Client, StatusCode};
use serde_json::{json, Value};

struct Server {
    url: String,
    http: Client,
    _data: tempfile::TempDir,
}

impl Server {
    async fn start() -> Self {
        Self::start_with(ServiceConfig::default()).await
    }

    async fn start_with(config: ServiceConfig) -> Self {
        let data = tempfile::tempdir().unwrap();
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let config = ServiceConfig {
            data_dir: data.path().to_path_buf(),
            ..config
        };
        tokio::spawn(serve(listener, config, std::future::pending()));
        Server {
            url,
            http: Client::new(),
            _data: data,
        }
    }

    fn at(&self, path: &str) -> String {
        format!("{}{path}", self.url)
    }

    async fn upload(&self, bytes: Vec<u8>, abn: bool) -> reqwest::Response {
        let form = multipart::Form::new().part("image", multipart::Part::bytes(bytes).file_name("in.png"));
        self.http
            .post(self.at(&format!("/sessions?abn={abn}")))
            .multipart(form)
            .send()
            .await
            .unwrap()
    }

    async fn create(&self) -> CreatedSession {
        let resp = self.upload(photo(), true).await;
        assert_eq!(resp.status(), StatusCode::CREATED);
        resp.json().await.unwrap()
    }

    async fn state(&self, id: &str) -> SessionState {
        self.http.get(self.at(&format!("/sessions/{id}"))).send().await.unwrap().json().await.unwrap()
    }

    async fn wait_until_idle(&self, id: &str) -> SessionState {
        for _ in 0..600 {
            let s = self.state(id).await;
            if s.status != Status::Optimizing {
                return s;
            }
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
        panic!("optimisation did not finish");
    }
}

fn photo() -> Vec<u8> {
    ImageBuffer::from_fn(96, 64, |x, y| {
        let t = 0.15 + 0.2 * x as f64 / 95.0;
        [t, t * 0.9 + 0.05 * (y % 7) as f64 / 6.0, t * 0.8]
    })
    .encode_png()
    .unwrap()
}

#[tokio::test]
async fn create_and_inspect() {
    let server = Server::start().await;
    let created = server.create().await;
    assert!(created.initial_score > 1.0 && created.initial_score < 10.0);
    let state = server.state(&created.id).await;
    assert_eq!(state.status, Status::Idle);
    assert_eq!((state.width, state.height), (96, 64));
    assert_eq!(state.history.len(), 1);
    assert!(state.k.is_zero());

    let resp = server.http.get(server.at("/sessions/nope")).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::NOT_FOUND);
    let body: Value = resp.json().await.unwrap();
    assert!(body["error"].is_string());
}

#[tokio::test]
async fn rejects_undecodable_uploads() {
    let server = Server::start().await;
    let resp = server.upload(b"definitely not an image".to_vec(), true).await;
    assert_eq!(resp.status(), StatusCode::UNSUPPORTED_MEDIA_TYPE);
    let resp = server.http.post(server.at("/sessions")).send().await.unwrap();
    assert!(resp.status().is_client_error());
}

#[tokio::test]
async fn params_are_validated_atomically() {
    let server = Server::start().await;
    let id = server.create().await.id;
    let url = server.at(&format!("/sessions/{id}/params"));

    let resp = server.http.patch(&url).json(&json!({"set": {"sat": 0.2, "nld": -0.5}})).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
    assert!(server.state(&id).await.k.is_zero());

    let resp = server.http.patch(&url).json(&json!({"set": {"blur": 0.2}})).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);

    let resp = server.http.patch(&url).json(&json!({"set": {"sat": 0.2}, "fix": ["sat"], "gamma": 0.3})).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let state: SessionState = resp.json().await.unwrap();
    assert_eq!(state.k.get(photoloop_core::FilterId::Sat), 0.2);
    assert!(state.k.is_fixed(photoloop_core::FilterId::Sat));
    assert_eq!(state.gamma, 0.3);
}

#[tokio::test]
async fn optimise_stream_and_render() {
    let server = Server::start().await;
    let id = server.create().await.id;
    let resp = server
        .http
        .post(server.at(&format!("/sessions/{id}/optimize")))
        .json(&json!({"steps": 5}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::ACCEPTED);
    let accepted: OptimizeAccepted = resp.json().await.unwrap();
    assert_eq!(accepted.steps, 5);

    let resp = server
        .http
        .get(server.at(&format!("/sessions/{id}/events?after={}", accepted.events_after)))
        .send()
        .await
        .unwrap();
    assert!(resp.headers()[reqwest::header::CONTENT_TYPE].to_str().unwrap().starts_with("text/event-stream"));
    let mut body = resp.bytes_stream();
    let mut text = String::new();
    let mut kinds = vec![];
    let mut preview_url = None;
    'read: while let Some(chunk) = tokio::time::timeout(Duration::from_secs(30), body.next()).await.unwrap() {
        text.push_str(&String::from_utf8_lossy(&chunk.unwrap()));
        while let Some(end) = text.find("\n\n") {
            let frame: String = text.drain(..end + 2).collect();
            let Some(data) = frame.lines().find_map(|l| l.strip_prefix("data:")) else { continue };
            let ev: Value = serde_json::from_str(data.trim()).unwrap();
            let kind = ev["type"].as_str().unwrap().to_string();
            if kind == "preview_ready" && preview_url.is_none() {
                preview_url = ev["url"].as_str().map(String::from);
            }
            let done = kind == "status_changed" && ev["status"] != "optimizing";
            kinds.push(kind);
            if done {
                break 'read;
            }
        }
    }
    assert_eq!(kinds.iter().filter(|k| *k == "iteration_done").count(), 5);
    assert_eq!(kinds.first().map(String::as_str), Some("status_changed"));

    let state = server.wait_until_idle(&id).await;
    assert_eq!(state.status, Status::Done);
    assert_eq!(state.history.len(), 6);
    let iterations: Vec<usize> = state.history.iter().map(|r| r.iteration).collect();
    assert!(iterations.windows(2).all(|w| w[0] < w[1]));

    let resp = server.http.get(server.at(&preview_url.unwrap())).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let preview = ImageBuffer::decode(&resp.bytes().await.unwrap()).unwrap();
    assert_eq!((preview.width(), preview.height()), (224, 224));

    let resp = server.http.get(server.at(&format!("/sessions/{id}/render"))).send().await.unwrap();
    assert_eq!(resp.headers()[reqwest::header::CONTENT_TYPE], "image/png");
    let first = resp.bytes().await.unwrap();
    let second = server.http.get(server.at(&format!("/sessions/{id}/render"))).send().await.unwrap().bytes().await.unwrap();
    assert_eq!(first, second);
    assert_eq!(ImageBuffer::decode(&first).unwrap().width(), 96);

    let resp = server.http.get(server.at(&format!("/sessions/{id}/previews/9999"))).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn concurrent_runs_are_rejected_and_stop_works() {
    let mut config = ServiceConfig::default();
    config.defaults.optimizer.early_stop = None;
    let server = Server::start_with(config).await;
    let id = server.create().await.id;
    server
        .http
        .patch(server.at(&format!("/sessions/{id}/params")))
        .json(&json!({"gamma": 0.1}))
        .send()
        .await
        .unwrap();
    let optimize = server.at(&format!("/sessions/{id}/optimize"));
    let resp = server.http.post(&optimize).json(&json!({"steps": 100000})).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::ACCEPTED);
    let resp = server.http.post(&optimize).json(&json!({"steps": 5})).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::CONFLICT);
    let resp = server.http.post(server.at(&format!("/sessions/{id}/persist"))).json(&json!({"name": "busy"})).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::CONFLICT);

    let resp = server.http.post(server.at(&format!("/sessions/{id}/stop"))).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let state = server.wait_until_idle(&id).await;
    assert_eq!(state.status, Status::Idle);
    assert!(state.history.len() < 100001);
}

#[tokio::test]
async fn persist_and_load_round_trip() {
    let server = Server::start().await;
    let id = server.create().await.id;
    server
        .http
        .patch(server.at(&format!("/sessions/{id}/params")))
        .json(&json!({"set": {"bri": 0.25}}))
        .send()
        .await
        .unwrap();
    let before = server.state(&id).await;

    let persist = server.at(&format!("/sessions/{id}/persist"));
    for bad in ["../escape", "/abs", "a/b", ""] {
        let resp = server.http.post(&persist).json(&json!({"name": bad})).send().await.unwrap();
        assert_eq!(resp.status(), StatusCode::BAD_REQUEST, "{bad}");
    }
    let resp = server.http.post(&persist).json(&json!({"name": "saved"})).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::NO_CONTENT);

    let load = server.at("/sessions/load");
    let resp = server.http.post(&load).json(&json!({"name": "saved"})).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::CONFLICT);
    let resp = server.http.post(&load).json(&json!({"name": "missing"})).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::NOT_FOUND);

    let other = Server::start().await;
    let dir = server._data.path().join("saved");
    let target = other._data.path().join("copy");
    std::fs::create_dir(&target).unwrap();
    for entry in std::fs::read_dir(&dir).unwrap() {
        let entry = entry.unwrap();
        std::fs::copy(entry.path(), target.join(entry.file_name())).unwrap();
    }
    let resp = other.http.post(other.at("/sessions/load")).json(&json!({"name": "copy"})).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::CREATED);
    let loaded: SessionState = resp.json().await.unwrap();
    assert_eq!(loaded.k, before.k);
    assert_eq!(loaded.history, before.history);

    let a = server.http.get(server.at(&format!("/sessions/{id}/render"))).send().await.unwrap().bytes().await.unwrap();
    let b = other.http.get(other.at(&format!("/sessions/{id}/render"))).send().await.unwrap().bytes().await.unwrap();
    assert_eq!(a, b);

    std::fs::write(target.join("session.json"), "{\"schema_version\": 1}").unwrap();
    let resp = other.http.post(other.at("/sessions/load")).json(&json!({"name": "copy"})).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn events_resume_from_last_event_id() {
    let server = Server::start().await;
    let id = server.create().await.id;
    let url = server.at(&format!("/sessions/{id}/params"));
    for v in [0.1, 0.2] {
        server.http.patch(&url).json(&json!({"set": {"con": v}})).send().await.unwrap();
    }
    let resp = server
        .http
        .get(server.at(&format!("/sessions/{id}/events")))
        .header("Last-Event-ID", "2")
        .send()
        .await
        .unwrap();
    let mut body = resp.bytes_stream();
    let chunk = tokio::time::timeout(Duration::from_secs(10), body.next()).await.unwrap().unwrap().unwrap();
    let text = String::from_utf8_lossy(&chunk);
    let first_id = text.lines().find_map(|l| l.strip_prefix("id:")).unwrap().trim().parse::<u64>().unwrap();
    assert_eq!(first_id, 3);
}
