//! HTTP client for the EvalAPI. Used by the campaign runner and by the
//! cascaded backend, which drives a delegate service through it.

use std::time::{Duration, Instant};

use reqwest::{Method, RequestBuilder, Response};
use serde::de::DeserializeOwned;

use crate::api::{
    BackendView, CreateExperimentRequest, ErrorBody, ExperimentFilter, ExperimentPage,
    StateQuery, StateView, SystemSummary, API_PREFIX, FILENAME_HEADER,
};
use crate::format::syscfg_to_json;
use crate::model::{Experiment, ExperimentId, ExperimentState, Phase, ResultIndex, SysCfg};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("cannot reach {url}: {detail}")]
    Unreachable { url: String, detail: String },
    #[error("HTTP {status} {}: {}", .body.error, .body.detail)]
    Api { status: u16, body: ErrorBody },
    #[error("unexpected response from {url}: {detail}")]
    Decode { url: String, detail: String },
    #[error("gave up waiting for {id} to leave {state}")]
    WaitTimeout { id: ExperimentId, state: ExperimentState },
}

impl ClientError {
    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            _ => None,
        }
    }

    pub fn code(&self) -> Option<&str> {
        match self {
            ClientError::Api { body, .. } => Some(&body.error),
            _ => None,
        }
    }
}

/// Exponential polling schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Backoff {
    pub initial: Duration,
    pub max: Duration,
}

impl Default for Backoff {
    fn default() -> Self {
        Self {
            initial: Duration::from_millis(100),
            max: Duration::from_secs(5),
        }
    }
}

impl Backoff {
    pub fn delays(self) -> impl Iterator<Item = Duration> {
        std::iter::successors(Some(self.initial), move |d| Some((*d * 2).min(self.max)))
    }
}

#[derive(Clone, Debug)]
pub struct EvalApiClient {
    base: String,
    token: Option<String>,
    http: reqwest::Client,
}

impl EvalApiClient {
    /// `base_url` is the service root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base_url: &str, token: Option<String>) -> Result<Self, url::ParseError> {
        url::Url::parse(base_url)?;
        let http = reqwest::Client::builder()
            .pool_max_idle_per_host(64)
            .build()
            .expect("static client configuration");
        Ok(Self {
            base: base_url.trim_end_matches('/').to_string(),
            token,
            http,
        })
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{API_PREFIX}{path}", self.base)
    }

    fn request(&self, method: Method, path: &str) -> RequestBuilder {
        let rb = self.http.request(method, self.url(path));
        match &self.token {
            Some(t) => rb.bearer_auth(t),
            None => rb,
        }
    }

    async fn send(&self, rb: RequestBuilder) -> Result<Response, ClientError> {
        let req = rb.build().map_err(|e| ClientError::Decode {
            url: self.base.clone(),
            detail: e.to_string(),
        })?;
        let url = req.url().to_string();
        let resp = self
            .http
            .execute(req)
            .await
            .map_err(|e| ClientError::Unreachable {
                url: url.clone(),
                detail: error_chain(&e),
            })?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status();
        let bytes = resp.bytes().await.unwrap_or_default();
        let body = serde_json::from_slice::<ErrorBody>(&bytes).unwrap_or_else(|_| ErrorBody {
            error: status
                .canonical_reason()
                .unwrap_or("HttpError")
                .replace(' ', ""),
            detail: String::from_utf8_lossy(&bytes).into_owned(),
        });
        Err(ClientError::Api {
            status: status.as_u16(),
            body,
        })
    }

    async fn json<T: DeserializeOwned>(&self, rb: RequestBuilder) -> Result<T, ClientError> {
        let resp = self.send(rb).await?;
        let url = resp.url().to_string();
        let bytes = resp.bytes().await.map_err(|e| ClientError::Unreachable {
            url: url.clone(),
            detail: error_chain(&e),
        })?;
        serde_json::from_slice(&bytes).map_err(|e| ClientError::Decode {
            url,
            detail: e.to_string(),
        })
    }

    async fn bytes(&self, rb: RequestBuilder) -> Result<Vec<u8>, ClientError> {
        let resp = self.send(rb).await?;
        let url = resp.url().to_string();
        resp.bytes()
            .await
            .map(|b| b.to_vec())
            .map_err(|e| ClientError::Unreachable {
                url,
                detail: error_chain(&e),
            })
    }

    pub async fn list_systems(&self) -> Result<Vec<SystemSummary>, ClientError> {
        self.json(self.request(Method::GET, "/systems")).await
    }

    pub async fn list_backends(&self) -> Result<Vec<BackendView>, ClientError> {
        self.json(self.request(Method::GET, "/backends")).await
    }

    pub async fn create_experiment(
        &self,
        req: &CreateExperimentRequest,
    ) -> Result<Experiment, ClientError> {
        self.json(self.request(Method::POST, "/experiments").json(req))
            .await
    }

    pub async fn list_experiments(
        &self,
        filter: &ExperimentFilter,
    ) -> Result<ExperimentPage, ClientError> {
        self.json(self.request(Method::GET, "/experiments").query(filter))
            .await
    }

    pub async fn experiment(&self, id: &ExperimentId) -> Result<Experiment, ClientError> {
        self.json(self.request(Method::GET, &format!("/experiments/{id}")))
            .await
    }

    pub async fn configure(&self, id: &ExperimentId, cfg: &SysCfg) -> Result<Experiment, ClientError> {
        self.json(
            self.request(Method::PUT, &format!("/experiments/{id}/config"))
                .json(&syscfg_to_json(cfg)),
        )
        .await
    }

    pub async fn upload_input(
        &self,
        id: &ExperimentId,
        param: &str,
        filename: &str,
        bytes: Vec<u8>,
    ) -> Result<Experiment, ClientError> {
        self.json(
            self.request(Method::POST, &format!("/experiments/{id}/inputs/{param}"))
                .header(FILENAME_HEADER, filename)
                .header(reqwest::header::CONTENT_TYPE, "application/octet-stream")
                .body(bytes),
        )
        .await
    }

    pub async fn build(&self, id: &ExperimentId) -> Result<StateView, ClientError> {
        self.json(self.request(Method::POST, &format!("/experiments/{id}/build")))
            .await
    }

    pub async fn run(&self, id: &ExperimentId) -> Result<StateView, ClientError> {
        self.json(self.request(Method::POST, &format!("/experiments/{id}/run")))
            .await
    }

    pub async fn start(&self, id: &ExperimentId, action: Phase) -> Result<StateView, ClientError> {
        match action {
            Phase::Build => self.build(id).await,
            Phase::Run => self.run(id).await,
        }
    }

    pub async fn state(&self, id: &ExperimentId, query: &StateQuery) -> Result<StateView, ClientError> {
        self.json(
            self.request(Method::GET, &format!("/experiments/{id}/state"))
                .query(query),
        )
        .await
    }

    pub async fn results(&self, id: &ExperimentId) -> Result<ResultIndex, ClientError> {
        self.json(self.request(Method::GET, &format!("/experiments/{id}/results")))
            .await
    }

    pub async fn result_payload(&self, id: &ExperimentId, key: &str) -> Result<Vec<u8>, ClientError> {
        self.bytes(self.request(Method::GET, &format!("/experiments/{id}/results/{key}")))
            .await
    }

    pub async fn log(&self, id: &ExperimentId, action: Phase) -> Result<Vec<u8>, ClientError> {
        self.bytes(self.request(Method::GET, &format!("/experiments/{id}/log/{action}")))
            .await
    }

    /// Polls with `backoff` until the state differs from `state`.
    pub async fn poll_while(
        &self,
        id: &ExperimentId,
        state: ExperimentState,
        backoff: Backoff,
        deadline: Option<Instant>,
    ) -> Result<StateView, ClientError> {
        let mut delays = backoff.delays();
        loop {
            let view = self.state(id, &StateQuery::default()).await?;
            if view.state != state {
                return Ok(view);
            }
            let mut delay = delays.next().unwrap_or(backoff.max);
            if let Some(d) = deadline {
                let left = d.saturating_duration_since(Instant::now());
                if left.is_zero() {
                    return Err(ClientError::WaitTimeout { id: id.clone(), state });
                }
                delay = delay.min(left);
            }
            tokio::time::sleep(delay).await;
        }
    }

    /// Waits via the service's long-poll until the state differs from `state`.
    pub async fn wait_while(
        &self,
        id: &ExperimentId,
        state: ExperimentState,
        deadline: Option<Instant>,
    ) -> Result<StateView, ClientError> {
        const SLICE: Duration = Duration::from_secs(20);
        loop {
            let slice = match deadline {
                Some(d) => {
                    let left = d.saturating_duration_since(Instant::now());
                    if left.is_zero() {
                        return Err(ClientError::WaitTimeout { id: id.clone(), state });
                    }
                    left.min(SLICE)
                }
                None => SLICE,
            };
            let q = StateQuery {
                wait_while: Some(state),
                timeout_ms: Some(slice.as_millis() as u64),
            };
            let view = self.state(id, &q).await?;
            if view.state != state {
                return Ok(view);
            }
        }
    }
}

fn error_chain(e: &dyn std::error::Error) -> String {
    let mut s = e.to_string();
    let mut src = e.source();
    while let Some(inner) = src {
        s.push_str(": ");
        s.push_str(&inner.to_string());
        src = inner.source();
    }
    s
}
