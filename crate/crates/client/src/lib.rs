//! Client for the episode service.
//!
//! [`EventStream`] reconnects from its cursor when the socket drops and
//! drops frames it has already yielded, so callers see each event once and
//! in order.

use futures_util::{SinkExt, StreamExt};
use reqwest::{Method, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;
use stepgate_core::api::{ApiError, CreateEpisode, EpisodeCreated, EpisodeSummary, EventFrame, InterveneBody};
use stepgate_core::controller::{EpisodeEvent, EpisodeState};
use stepgate_core::Action;
use thiserror::Error;
use tokio_tungstenite::tungstenite::Message;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),
    #[error("service replied {status}: {}", .error.message)]
    Api { status: u16, error: ApiError },
    #[error("event stream: {0}")]
    Stream(String),
}

impl ClientError {
    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Self { base: base.into().trim_end_matches('/').to_string(), http: reqwest::Client::new() }
    }

    async fn send(
        &self,
        method: Method,
        path: &str,
        body: Option<&impl Serialize>,
    ) -> Result<reqwest::Response, ClientError> {
        let mut req = self.http.request(method, format!("{}{path}", self.base));
        if let Some(body) = body {
            req = req.json(body);
        }
        let resp = req.send().await?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status().as_u16();
        let text = resp.text().await?;
        let error = serde_json::from_str(&text).unwrap_or_else(|_| ApiError { error: "http".into(), message: text });
        Err(ClientError::Api { status, error })
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        Ok(self.send(Method::GET, path, None::<&()>).await?.json().await?)
    }

    pub async fn create_episode(&self, body: &CreateEpisode) -> Result<String, ClientError> {
        let resp = self.send(Method::POST, "/episodes", Some(body)).await?;
        Ok(resp.json::<EpisodeCreated>().await?.episode_id)
    }

    pub async fn list_episodes(&self) -> Result<Vec<EpisodeSummary>, ClientError> {
        self.get("/episodes").await
    }

    pub async fn episode(&self, id: &str) -> Result<EpisodeState, ClientError> {
        self.get(&format!("/episodes/{id}")).await
    }

    /// Events recorded so far after `since`, without subscribing.
    pub async fn events(&self, id: &str, since: u64) -> Result<Vec<EventFrame>, ClientError> {
        self.get(&format!("/episodes/{id}/events?since={since}")).await
    }

    /// Answers a pending intervention with an action in grammar form.
    pub async fn intervene_raw(&self, id: &str, request_id: &str, action: &str) -> Result<(), ClientError> {
        let body = InterveneBody { request_id: request_id.into(), action: action.into() };
        let resp = self.send(Method::POST, &format!("/episodes/{id}/intervene"), Some(&body)).await?;
        debug_assert_eq!(resp.status(), StatusCode::NO_CONTENT);
        Ok(())
    }

    pub async fn intervene(&self, id: &str, request_id: &str, action: &Action) -> Result<(), ClientError> {
        self.intervene_raw(id, request_id, &action.to_string()).await
    }

    /// Subscribes to an episode's events after `since`.
    pub fn subscribe(&self, id: &str, since: u64) -> EventStream {
        let ws_base = self.base.replacen("http", "ws", 1);
        EventStream { url: format!("{ws_base}/episodes/{id}/events"), cursor: since, socket: None, finished: false }
    }
}

type Socket = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

/// Ordered, deduplicated events of one episode.
pub struct EventStream {
    url: String,
    cursor: u64,
    socket: Option<Socket>,
    finished: bool,
}

/// Reconnect attempts without progress before giving up.
const MAX_RECONNECTS: usize = 3;

impl EventStream {
    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    /// Next unseen event; `None` once the episode has finished.
    pub async fn next(&mut self) -> Option<Result<EventFrame, ClientError>> {
        let mut attempts = 0;
        while !self.finished {
            let socket = match self.socket.as_mut() {
                Some(s) => s,
                None => {
                    let url = format!("{}?since={}", self.url, self.cursor);
                    match tokio_tungstenite::connect_async(url).await {
                        Ok((s, _)) => self.socket.insert(s),
                        Err(e) => return Some(Err(ClientError::Stream(e.to_string()))),
                    }
                }
            };
            match socket.next().await {
                Some(Ok(Message::Text(text))) => {
                    let frame: EventFrame = match serde_json::from_str(text.as_str()) {
                        Ok(f) => f,
                        Err(e) => return Some(Err(ClientError::Stream(format!("bad frame: {e}")))),
                    };
                    if frame.seq <= self.cursor {
                        continue;
                    }
                    self.cursor = frame.seq;
                    self.finished = matches!(frame.event, EpisodeEvent::EpisodeFinished { .. });
                    return Some(Ok(frame));
                }
                Some(Ok(Message::Ping(payload))) => {
                    let _ = socket.send(Message::Pong(payload)).await;
                }
                Some(Ok(_)) => {}
                Some(Err(_)) | None => {
                    self.socket = None;
                    attempts += 1;
                    if attempts > MAX_RECONNECTS {
                        return Some(Err(ClientError::Stream("connection lost".into())));
                    }
                }
            }
        }
        None
    }

    /// Drains the stream, returning every remaining event.
    pub async fn collect(mut self) -> Result<Vec<EventFrame>, ClientError> {
        let mut out = Vec::new();
        while let Some(frame) = self.next().await {
            out.push(frame?);
        }
        Ok(out)
    }
}
