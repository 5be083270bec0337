//! Async client for `navtoken-server`.

use reqwest::{Method, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use navtoken_core::cache::CacheStats;
use navtoken_core::sim::{SimConfig, SimRun};
use navtoken_core::wire::*;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("{message} ({status})")]
    Api { status: u16, kind: ErrorKind, message: String },
    #[error("transport: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("undecodable response: {0}")]
    Decode(String),
}

impl ClientError {
    pub fn kind(&self) -> Option<ErrorKind> {
        match self {
            Self::Api { kind, .. } => Some(*kind),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    http: reqwest::Client,
    base: String,
}

impl Client {
    /// `base` is the server root, e.g. `http://127.0.0.1:7878`.
    pub fn new(base: impl Into<String>) -> Self {
        Self::with_http(reqwest::Client::new(), base)
    }

    pub fn with_http(http: reqwest::Client, base: impl Into<String>) -> Self {
        let base = base.into().trim_end_matches('/').to_string();
        Self { http, base }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn send(&self, method: Method, path: &str, body: Option<&(impl Serialize + ?Sized)>) -> Result<reqwest::Response> {
        let mut req = self.http.request(method, format!("{}{path}", self.base));
        if let Some(body) = body {
            req = req.json(body);
        }
        let resp = req.send().await?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status();
        let text = resp.text().await?;
        Err(match serde_json::from_str::<ErrorBody>(&text) {
            Ok(b) => ClientError::Api { status: status.as_u16(), kind: b.kind, message: b.message },
            Err(_) => ClientError::Api { status: status.as_u16(), kind: fallback_kind(status), message: text },
        })
    }

    async fn call<T: DeserializeOwned>(&self, method: Method, path: &str, body: Option<&(impl Serialize + ?Sized)>) -> Result<T> {
        let bytes = self.send(method, path, body).await?.bytes().await?;
        serde_json::from_slice(&bytes).map_err(|e| ClientError::Decode(e.to_string()))
    }

    async fn post<B: Serialize + ?Sized, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        self.call(Method::POST, path, Some(body)).await
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        self.call(Method::GET, path, None::<&()>).await
    }

    pub async fn health(&self) -> Result<Health> {
        self.get("/health").await
    }

    pub async fn solve(&self, req: &SolveRequest) -> Result<SolveResponse> {
        self.post("/v1/plan/solve", req).await
    }

    pub async fn table(&self, req: &TableRequest) -> Result<TableResponse> {
        self.post("/v1/plan/table", req).await
    }

    pub async fn draw(&self, req: &DrawRequest) -> Result<DrawResponse> {
        self.post("/v1/plan/draw", req).await
    }

    pub async fn organize(&self, req: &OrganizeRequest) -> Result<OrganizeResponse> {
        self.post("/v1/organize", req).await
    }

    pub async fn simulate(&self, cfg: &SimConfig) -> Result<SimRun> {
        self.post("/v1/simulate", cfg).await
    }

    pub async fn eval(&self, req: &EvalRequest) -> Result<EvalResponse> {
        self.post("/v1/eval", req).await
    }

    pub async fn fit_alpha(&self, req: &FitAlphaRequest) -> Result<FitAlphaResponse> {
        self.post("/v1/fit-alpha", req).await
    }

    pub async fn cache_stats(&self) -> Result<CacheStats> {
        self.get("/v1/cache/stats").await
    }

    pub async fn cache_keys(&self) -> Result<Vec<String>> {
        self.get("/v1/cache/keys").await
    }

    pub async fn cache_put(&self, episode: &str, t: u32, camera: u16, tokens: &CacheTokens) -> Result<()> {
        self.send(Method::PUT, &entry_path(episode, t, camera), Some(tokens)).await?;
        Ok(())
    }

    pub async fn cache_get(&self, episode: &str, t: u32, camera: u16) -> Result<CacheTokens> {
        self.get(&entry_path(episode, t, camera)).await
    }

    pub async fn create_session(&self, req: &SessionRequest) -> Result<SessionCreated> {
        self.post("/v1/sessions", req).await
    }

    pub async fn step(&self, session: u64, step: &StepRequest) -> Result<StepResponse> {
        self.post(&format!("/v1/sessions/{session}/steps"), step).await
    }

    pub async fn delete_session(&self, session: u64) -> Result<()> {
        self.send(Method::DELETE, &format!("/v1/sessions/{session}"), None::<&()>).await?;
        Ok(())
    }
}

fn entry_path(episode: &str, t: u32, camera: u16) -> String {
    let mut seg = String::with_capacity(episode.len());
    for b in episode.bytes() {
        if b.is_ascii_alphanumeric() || b"-._~".contains(&b) {
            seg.push(b as char);
        } else {
            seg.push_str(&format!("%{b:02X}"));
        }
    }
    format!("/v1/cache/entries/{seg}/{t}/{camera}")
}

fn fallback_kind(status: StatusCode) -> ErrorKind {
    match status {
        StatusCode::NOT_FOUND => ErrorKind::NotFound,
        StatusCode::CONFLICT => ErrorKind::Conflict,
        StatusCode::UNPROCESSABLE_ENTITY => ErrorKind::InfeasibleBudget,
        s if s.is_client_error() => ErrorKind::InvalidRequest,
        _ => ErrorKind::Internal,
    }
}
