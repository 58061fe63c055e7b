//! JSON-over-HTTP scoring protocol and its blocking client.
//!
//! Endpoints, relative to the configured base URL:
//!
//! * `GET  /v1/info` returns [`WireInfo`].
//! * `POST /v1/score` takes a [`WireScoreRequest`] and returns a
//!   [`WireScoreResponse`], or a [`WireErrorBody`] with a 4xx/5xx status.
//! * `POST /v1/score/batch` takes a [`WireBatchRequest`] and returns a
//!   [`WireBatchResponse`]. Items are matched to requests by `id`.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    BackendDescriptor, BackendKind, ContinuationScore, ScoreRequest, ScoringBackend, ScoringError, TokenScore,
};

/// Environment variable consulted when no backend URL is given explicitly.
pub const BACKEND_URL_ENV: &str = "GEO_ERASURE_BACKEND_URL";

pub const INFO_PATH: &str = "/v1/info";
pub const SCORE_PATH: &str = "/v1/score";
pub const BATCH_PATH: &str = "/v1/score/batch";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireInfo {
    pub model_label: String,
    pub supports_temperature: bool,
    pub supports_full_logits: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bos_convention: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireScoreRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub prompt: String,
    pub continuation: String,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireToken {
    pub text: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireScoreResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub tokens: Vec<WireToken>,
    pub total_logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireError {
    /// One of `precondition`, `capability`, `zero_probability`, `backend`.
    pub kind: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireErrorBody {
    pub error: WireError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireBatchRequest {
    pub requests: Vec<WireScoreRequest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireBatchItem {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<WireToken>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_logprob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<WireError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireBatchResponse {
    pub responses: Vec<WireBatchItem>,
}

impl From<&ScoringError> for WireError {
    fn from(err: &ScoringError) -> Self {
        let (kind, message, context, token) = match err {
            ScoringError::Precondition(m) => ("precondition", m.clone(), None, None),
            ScoringError::Capability(m) => ("capability", m.clone(), None, None),
            ScoringError::ZeroProbability { context, token } => (
                "zero_probability",
                err.to_string(),
                Some(context.clone()),
                Some(token.clone()),
            ),
            ScoringError::Transport(m) | ScoringError::Backend(m) => ("backend", m.clone(), None, None),
        };
        WireError {
            kind: kind.to_string(),
            message,
            context,
            token,
        }
    }
}

impl From<WireError> for ScoringError {
    fn from(err: WireError) -> Self {
        match err.kind.as_str() {
            "precondition" => ScoringError::Precondition(err.message),
            "capability" => ScoringError::Capability(err.message),
            "zero_probability" => ScoringError::ZeroProbability {
                context: err.context.unwrap_or_default(),
                token: err.token.unwrap_or_default(),
            },
            _ => ScoringError::Backend(err.message),
        }
    }
}

impl WireScoreResponse {
    pub fn from_score(id: Option<String>, score: &ContinuationScore) -> Self {
        WireScoreResponse {
            id,
            tokens: score
                .token_scores
                .iter()
                .map(|t| WireToken {
                    text: t.token_text.clone(),
                    logprob: t.logprob,
                })
                .collect(),
            total_logprob: score.total_logprob,
        }
    }
}

fn into_score(
    request: &ScoreRequest,
    tokens: Vec<WireToken>,
    total_logprob: f64,
) -> Result<ContinuationScore, ScoringError> {
    let score = ContinuationScore::new(
        &request.prompt,
        &request.continuation,
        tokens
            .into_iter()
            .map(|t| TokenScore {
                token_text: t.text,
                logprob: t.logprob,
            })
            .collect(),
    )?;
    if (score.total_logprob - total_logprob).abs() > 1e-6 {
        return Err(ScoringError::Backend(format!(
            "server total {total_logprob} disagrees with token sum {}",
            score.total_logprob
        )));
    }
    Ok(score)
}

#[derive(Debug, Clone)]
pub struct WireClientConfig {
    pub base_url: String,
    /// Retries after the first attempt, transport errors only.
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub timeout: Duration,
    pub batch_size: usize,
}

impl WireClientConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        WireClientConfig {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            max_retries: 3,
            initial_backoff: Duration::from_millis(50),
            timeout: Duration::from_secs(60),
            batch_size: 64,
        }
    }

    /// Uses [`BACKEND_URL_ENV`] when `explicit` is `None`.
    pub fn from_env_or(explicit: Option<&str>) -> Option<Self> {
        explicit
            .map(str::to_string)
            .or_else(|| std::env::var(BACKEND_URL_ENV).ok().filter(|s| !s.is_empty()))
            .map(WireClientConfig::new)
    }
}

/// Blocking client for a scoring server. Safe to share across threads.
pub struct WireClient {
    http: reqwest::blocking::Client,
    config: WireClientConfig,
    descriptor: BackendDescriptor,
    next_id: AtomicU64,
}

impl std::fmt::Debug for WireClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WireClient")
            .field("base_url", &self.config.base_url)
            .field("descriptor", &self.descriptor)
            .finish()
    }
}

impl WireClient {
    /// Connects and reads the server's capabilities; fails if the endpoint
    /// is unreachable.
    pub fn connect(config: WireClientConfig) -> Result<Self, ScoringError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| ScoringError::Backend(format!("http client: {e}")))?;
        let url = format!("{}{INFO_PATH}", config.base_url);
        let info: WireInfo = with_retries(&config, || {
            let resp = http.get(&url).send().map_err(transport)?;
            decode(resp)
        })?;
        Ok(WireClient {
            http,
            descriptor: BackendDescriptor {
                backend_kind: BackendKind::WireClient,
                model_label: info.model_label,
                supports_temperature: info.supports_temperature,
                supports_full_logits: info.supports_full_logits,
                bos_convention: info.bos_convention,
            },
            config,
            next_id: AtomicU64::new(0),
        })
    }

    pub fn base_url(&self) -> &str {
        &self.config.base_url
    }

    fn fresh_id(&self) -> String {
        format!("req-{}", self.next_id.fetch_add(1, Ordering::Relaxed))
    }

    fn post<Req: Serialize, Resp: for<'de> Deserialize<'de>>(
        &self,
        path: &str,
        body: &Req,
    ) -> Result<Resp, ScoringError> {
        let url = format!("{}{path}", self.config.base_url);
        with_retries(&self.config, || {
            let resp = self.http.post(&url).json(body).send().map_err(transport)?;
            decode(resp)
        })
    }

    fn score_chunk(&self, requests: &[ScoreRequest]) -> Vec<Result<ContinuationScore, ScoringError>> {
        let ids: Vec<String> = requests.iter().map(|_| self.fresh_id()).collect();
        let body = WireBatchRequest {
            requests: requests
                .iter()
                .zip(&ids)
                .map(|(r, id)| WireScoreRequest {
                    id: Some(id.clone()),
                    prompt: r.prompt.clone(),
                    continuation: r.continuation.clone(),
                    temperature: r.temperature,
                })
                .collect(),
        };
        let response: WireBatchResponse = match self.post(BATCH_PATH, &body) {
            Ok(r) => r,
            Err(e) => return requests.iter().map(|_| Err(e.clone())).collect(),
        };
        let mut by_id: HashMap<String, WireBatchItem> = response
            .responses
            .into_iter()
            .map(|item| (item.id.clone(), item))
            .collect();
        requests
            .iter()
            .zip(&ids)
            .map(|(request, id)| {
                let item = by_id
                    .remove(id)
                    .ok_or_else(|| ScoringError::Backend(format!("no response for request {id}")))?;
                if let Some(err) = item.error {
                    return Err(err.into());
                }
                match (item.tokens, item.total_logprob) {
                    (Some(tokens), Some(total)) => into_score(request, tokens, total),
                    _ => Err(ScoringError::Backend(format!(
                        "response {id} has neither tokens nor an error"
                    ))),
                }
            })
            .collect()
    }
}

impl ScoringBackend for WireClient {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn score(&self, request: &ScoreRequest) -> Result<ContinuationScore, ScoringError> {
        super::validate_request(&self.descriptor, request)?;
        let id = self.fresh_id();
        let body = WireScoreRequest {
            id: Some(id.clone()),
            prompt: request.prompt.clone(),
            continuation: request.continuation.clone(),
            temperature: request.temperature,
        };
        let resp: WireScoreResponse = self.post(SCORE_PATH, &body)?;
        if resp.id.as_deref() != Some(id.as_str()) {
            return Err(ScoringError::Backend(format!(
                "response id {:?} does not match request {id}",
                resp.id
            )));
        }
        into_score(request, resp.tokens, resp.total_logprob)
    }

    fn score_batch(&self, requests: &[ScoreRequest]) -> Vec<Result<ContinuationScore, ScoringError>> {
        requests
            .chunks(self.config.batch_size.max(1))
            .flat_map(|chunk| self.score_chunk(chunk))
            .collect()
    }
}

fn transport(err: reqwest::Error) -> ScoringError {
    ScoringError::Transport(err.to_string())
}

fn decode<T: for<'de> Deserialize<'de>>(resp: reqwest::blocking::Response) -> Result<T, ScoringError> {
    let status = resp.status();
    if status.is_success() {
        return resp
            .json::<T>()
            .map_err(|e| ScoringError::Backend(format!("malformed response: {e}")));
    }
    if matches!(status.as_u16(), 502..=504) {
        return Err(ScoringError::Transport(format!("server returned {status}")));
    }
    let text = resp.text().unwrap_or_default();
    match serde_json::from_str::<WireErrorBody>(&text) {
        Ok(body) => Err(body.error.into()),
        Err(_) => Err(ScoringError::Backend(format!("server returned {status}: {text}"))),
    }
}

fn with_retries<T>(
    config: &WireClientConfig,
    mut attempt: impl FnMut() -> Result<T, ScoringError>,
) -> Result<T, ScoringError> {
    let mut backoff = config.initial_backoff;
    let mut tries = 0;
    loop {
        match attempt() {
            Err(e) if e.is_retryable() && tries < config.max_retries => {
                log::warn!("retrying after transport error: {e}");
                std::thread::sleep(backoff);
                backoff *= 2;
                tries += 1;
            }
            other => return other,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unreachable_endpoint_is_a_transport_error() {
        let mut cfg = WireClientConfig::new("http://127.0.0.1:9");
        cfg.max_retries = 1;
        cfg.initial_backoff = Duration::from_millis(1);
        let err = WireClient::connect(cfg).unwrap_err();
        assert!(matches!(err, ScoringError::Transport(_)), "{err}");
    }

    #[test]
    fn retries_stop_on_non_transport_errors() {
        let cfg = WireClientConfig {
            initial_backoff: Duration::from_millis(1),
            ..WireClientConfig::new("http://unused")
        };
        let mut calls = 0;
        let r: Result<(), _> = with_retries(&cfg, || {
            calls += 1;
            Err(ScoringError::Capability("no".into()))
        });
        assert!(r.is_err());
        assert_eq!(calls, 1);

        let mut calls = 0;
        let r: Result<(), _> = with_retries(&cfg, || {
            calls += 1;
            Err(ScoringError::Transport("down".into()))
        });
        assert!(r.is_err());
        assert_eq!(calls, 4);
    }

    #[test]
    fn errors_survive_the_wire() {
        let cases = [
            ScoringError::Precondition("p".into()),
            ScoringError::Capability("c".into()),
            ScoringError::ZeroProbability {
                context: "ctx".into(),
                token: "tok".into(),
            },
        ];
        for err in cases {
            let back: ScoringError = WireError::from(&err).into();
            assert_eq!(std::mem::discriminant(&back), std::mem::discriminant(&err));
        }
    }

    #[test]
    fn trailing_slash_is_trimmed() {
        assert_eq!(WireClientConfig::new("http://h:1/").base_url, "http://h:1");
    }
}
