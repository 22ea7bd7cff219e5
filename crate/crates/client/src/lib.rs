//! Async client for the photoloop session service.
//!
//! ```no_run
//! # async fn demo(png: Vec<u8>) -> Result<(), photoloop_client::ClientError> {
//! use photoloop_client::Client;
//! let client = Client::new("http://127.0.0.1:8080")?;
//! let created = client.create_session(png, true).await?;
//! let run = client.optimize(&created.id, Some(50)).await?;
//! let events = client.wait_for_run(&created.id, run.events_after).await?;
//! let png = client.render(&created.id).await?;
//! # Ok(()) }
//! ```

mod sse;

use futures::{Stream, StreamExt};
use photoloop_core::api::{
    CreatedSession, ErrorBody, EventKind, OptimizeAccepted, OptimizeRequest, ParamsPatch, PersistRequest,
    SessionEvent, SessionState,
};
use photoloop_core::session::Status;
use reqwest::{multipart, Response, StatusCode};
use serde::de::DeserializeOwned;

pub use sse::SseParser;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("http: {0}")]
    Http(#[from] reqwest::Error),
    #[error("invalid base url `{0}`")]
    Url(String),
    #[error("{status}: {message}")]
    Api { status: StatusCode, message: String },
    #[error("malformed event: {0}")]
    Event(String),
    #[error("event stream ended before the run finished")]
    StreamEnded,
}

pub type Result<T, E = ClientError> = std::result::Result<T, E>;

#[derive(Clone, Debug)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

async fn check(resp: Response) -> Result<Response> {
    let status = resp.status();
    if status.is_success() {
        return Ok(resp);
    }
    let text = resp.text().await.unwrap_or_default();
    let message = serde_json::from_str::<ErrorBody>(&text).map(|b| b.error).unwrap_or(text);
    Err(ClientError::Api { status, message })
}

async fn json<T: DeserializeOwned>(resp: Response) -> Result<T> {
    Ok(check(resp).await?.json().await?)
}

impl Client {
    pub fn new(base: impl Into<String>) -> Result<Self> {
        let base = base.into().trim_end_matches('/').to_string();
        if !(base.starts_with("http://") || base.starts_with("https://")) {
            return Err(ClientError::Url(base));
        }
        Ok(Client {
            base,
            http: reqwest::Client::new(),
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    pub async fn create_session(&self, image: Vec<u8>, abn: bool) -> Result<CreatedSession> {
        let form = multipart::Form::new().part("image", multipart::Part::bytes(image).file_name("image"));
        let resp = self
            .http
            .post(self.url("/sessions"))
            .query(&[("abn", abn)])
            .multipart(form)
            .send()
            .await?;
        json(resp).await
    }

    pub async fn session(&self, id: &str) -> Result<SessionState> {
        json(self.http.get(self.url(&format!("/sessions/{id}"))).send().await?).await
    }

    pub async fn set_params(&self, id: &str, patch: &ParamsPatch) -> Result<SessionState> {
        json(self.http.patch(self.url(&format!("/sessions/{id}/params"))).json(patch).send().await?).await
    }

    pub async fn optimize(&self, id: &str, steps: Option<usize>) -> Result<OptimizeAccepted> {
        let body = OptimizeRequest { steps };
        json(self.http.post(self.url(&format!("/sessions/{id}/optimize"))).json(&body).send().await?).await
    }

    pub async fn stop(&self, id: &str) -> Result<SessionState> {
        json(self.http.post(self.url(&format!("/sessions/{id}/stop"))).send().await?).await
    }

    pub async fn render(&self, id: &str) -> Result<Vec<u8>> {
        let resp = check(self.http.get(self.url(&format!("/sessions/{id}/render"))).send().await?).await?;
        Ok(resp.bytes().await?.to_vec())
    }

    /// Fetch a preview by the URL carried in a `preview_ready` event.
    pub async fn preview(&self, url: &str) -> Result<Vec<u8>> {
        let resp = check(self.http.get(self.url(url)).send().await?).await?;
        Ok(resp.bytes().await?.to_vec())
    }

    pub async fn persist(&self, id: &str, name: &str) -> Result<()> {
        let body = PersistRequest { name: name.into() };
        check(self.http.post(self.url(&format!("/sessions/{id}/persist"))).json(&body).send().await?).await?;
        Ok(())
    }

    pub async fn load(&self, name: &str) -> Result<SessionState> {
        let body = PersistRequest { name: name.into() };
        json(self.http.post(self.url("/sessions/load")).json(&body).send().await?).await
    }

    /// Event stream of a session, starting after sequence number `after`.
    pub async fn events(&self, id: &str, after: u64) -> Result<impl Stream<Item = Result<SessionEvent>>> {
        let resp = self
            .http
            .get(self.url(&format!("/sessions/{id}/events")))
            .query(&[("after", after)])
            .send()
            .await?;
        let body = check(resp).await?.bytes_stream();
        let stream = futures::stream::unfold(
            (body, SseParser::default(), std::collections::VecDeque::<String>::new()),
            |(mut body, mut parser, mut ready)| async move {
                loop {
                    if let Some(data) = ready.pop_front() {
                        let item = serde_json::from_str::<SessionEvent>(&data)
                            .map_err(|e| ClientError::Event(format!("{e}: {data}")));
                        return Some((item, (body, parser, ready)));
                    }
                    match body.next().await {
                        Some(Ok(chunk)) => ready.extend(parser.feed(&chunk)),
                        Some(Err(e)) => return Some((Err(e.into()), (body, parser, ready))),
                        None => return None,
                    }
                }
            },
        );
        Ok(stream)
    }

    /// Collect the events of one run, from `events_after` up to and
    /// including the status change that ends it.
    pub async fn wait_for_run(&self, id: &str, events_after: u64) -> Result<Vec<SessionEvent>> {
        let stream = self.events(id, events_after).await?;
        futures::pin_mut!(stream);
        let mut out = Vec::new();
        while let Some(ev) = stream.next().await {
            let ev = ev?;
            let done = matches!(&ev.kind, EventKind::StatusChanged { status, .. } if *status != Status::Optimizing);
            out.push(ev);
            if done {
                return Ok(out);
            }
        }
        Err(ClientError::StreamEnded)
    }
}
