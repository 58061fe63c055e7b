//! Serves a [`ScoringBackend`] over the JSON wire protocol understood by
//! [`geo_erasure::scoring::WireClient`].
//!
//! Scoring is synchronous, so each request body is handled on tokio's
//! blocking pool.

use std::io;
use std::net::{SocketAddr, ToSocketAddrs};
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use geo_erasure::scoring::wire::{
    WireBatchItem, WireBatchRequest, WireBatchResponse, WireError, WireErrorBody, WireInfo, WireScoreRequest,
    WireScoreResponse, BATCH_PATH, INFO_PATH, SCORE_PATH,
};
use geo_erasure::scoring::{validate_request, ContinuationScore, ScoreRequest, ScoringBackend, ScoringError};
use tokio::sync::oneshot;

type Backend = Arc<dyn ScoringBackend>;

pub fn router(backend: Backend) -> Router {
    Router::new()
        .route(INFO_PATH, get(info))
        .route(SCORE_PATH, post(score))
        .route(BATCH_PATH, post(score_batch))
        .with_state(backend)
}

struct ErrorResponse(StatusCode, WireError);

impl IntoResponse for ErrorResponse {
    fn into_response(self) -> Response {
        (self.0, Json(WireErrorBody { error: self.1 })).into_response()
    }
}

impl From<ScoringError> for ErrorResponse {
    fn from(err: ScoringError) -> Self {
        let status = match err {
            ScoringError::Precondition(_) => StatusCode::BAD_REQUEST,
            ScoringError::Capability(_) | ScoringError::ZeroProbability { .. } => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            ScoringError::Transport(_) => StatusCode::BAD_GATEWAY,
            ScoringError::Backend(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ErrorResponse(status, WireError::from(&err))
    }
}

impl From<JsonRejection> for ErrorResponse {
    fn from(rejection: JsonRejection) -> Self {
        ScoringError::Precondition(format!("malformed request body: {}", rejection.body_text())).into()
    }
}

async fn info(State(backend): State<Backend>) -> Json<WireInfo> {
    let d = backend.descriptor();
    Json(WireInfo {
        model_label: d.model_label.clone(),
        supports_temperature: d.supports_temperature,
        supports_full_logits: d.supports_full_logits,
        bos_convention: d.bos_convention.clone(),
    })
}

fn to_request(w: &WireScoreRequest) -> ScoreRequest {
    ScoreRequest {
        prompt: w.prompt.clone(),
        continuation: w.continuation.clone(),
        temperature: w.temperature,
    }
}

fn score_one(backend: &Backend, request: &ScoreRequest) -> Result<ContinuationScore, ScoringError> {
    validate_request(backend.descriptor(), request)?;
    backend.score(request)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ErrorResponse> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ScoringError::Backend(format!("scoring task failed: {e}")).into())
}

async fn score(
    State(backend): State<Backend>,
    body: Result<Json<WireScoreRequest>, JsonRejection>,
) -> Result<Json<WireScoreResponse>, ErrorResponse> {
    let Json(wire) = body?;
    let request = to_request(&wire);
    let score = blocking(move || score_one(&backend, &request)).await??;
    Ok(Json(WireScoreResponse::from_score(wire.id, &score)))
}

async fn score_batch(
    State(backend): State<Backend>,
    body: Result<Json<WireBatchRequest>, JsonRejection>,
) -> Result<Json<WireBatchResponse>, ErrorResponse> {
    let Json(batch) = body?;
    let responses = blocking(move || {
        let requests: Vec<ScoreRequest> = batch.requests.iter().map(to_request).collect();
        // invalid items fail individually; the rest go to the backend together
        let checks: Vec<Result<(), ScoringError>> = requests
            .iter()
            .map(|r| validate_request(backend.descriptor(), r))
            .collect();
        let valid: Vec<ScoreRequest> = requests
            .iter()
            .zip(&checks)
            .filter(|(_, c)| c.is_ok())
            .map(|(r, _)| r.clone())
            .collect();
        let mut scored = backend.score_batch(&valid).into_iter();
        batch
            .requests
            .iter()
            .zip(checks)
            .enumerate()
            .map(|(i, (wire, check))| {
                let id = wire.id.clone().unwrap_or_else(|| i.to_string());
                let result = check.and_then(|_| {
                    scored
                        .next()
                        .unwrap_or_else(|| Err(ScoringError::Backend("backend dropped a result".into())))
                });
                match result {
                    Ok(score) => {
                        let r = WireScoreResponse::from_score(None, &score);
                        WireBatchItem {
                            id,
                            tokens: Some(r.tokens),
                            total_logprob: Some(r.total_logprob),
                            error: None,
                        }
                    }
                    Err(e) => WireBatchItem {
                        id,
                        tokens: None,
                        total_logprob: None,
                        error: Some(WireError::from(&e)),
                    },
                }
            })
            .collect()
    })
    .await?;
    Ok(Json(WireBatchResponse { responses }))
}

/// A server running on its own thread; stops when dropped.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<io::Result<()>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Stops accepting connections and waits for the server thread.
    pub fn shutdown(mut self) -> io::Result<()> {
        self.stop()
    }

    fn stop(&mut self) -> io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t
                .join()
                .unwrap_or_else(|_| Err(io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Err(e) = self.stop() {
            log::error!("server stopped with an error: {e}");
        }
    }
}

fn runtime() -> io::Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build()
}

/// Binds `addr` (port 0 picks a free port) and serves on a background thread.
pub fn spawn(backend: Backend, addr: impl ToSocketAddrs) -> io::Result<ServerHandle> {
    let listener = std::net::TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let bound = listener.local_addr()?;
    let rt = runtime()?;
    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener)?;
            axum::serve(listener, router(backend))
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await
        })
    });
    Ok(ServerHandle {
        addr: bound,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

/// Serves until the process is killed. `on_bound` sees the bound address.
pub fn run(backend: Backend, addr: impl ToSocketAddrs, on_bound: impl FnOnce(SocketAddr)) -> io::Result<()> {
    let listener = std::net::TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    on_bound(listener.local_addr()?);
    runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::from_std(listener)?;
        axum::serve(listener, router(backend)).await
    })
}
