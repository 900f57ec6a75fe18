//! HTTP front end over a shared, read-only model.

use std::io;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ccead_core::infer::{CorrectionRequest, Corrector, InferError, MAX_TEXT_CHARS};
use ccead_core::model::Model;
use ccead_core::train::Checkpoint;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::Result;

pub struct AppState {
    corrector: Corrector,
    checkpoint_sha256: String,
    timeout: Duration,
    requests: AtomicU64,
    failures: AtomicU64,
}

impl AppState {
    pub fn new(model: Model, checkpoint_sha256: String, timeout: Duration) -> Arc<Self> {
        Arc::new(Self {
            corrector: Corrector::new(model),
            checkpoint_sha256,
            timeout,
            requests: AtomicU64::new(0),
            failures: AtomicU64::new(0),
        })
    }

    pub fn from_checkpoint_bytes(bytes: &[u8], timeout: Duration) -> Result<Arc<Self>> {
        let model = Checkpoint::from_bytes(bytes)?.model;
        Ok(Self::new(
            model,
            hex::encode(Sha256::digest(bytes)),
            timeout,
        ))
    }

    pub fn model(&self) -> &Model {
        self.corrector.model()
    }

    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }
}

/// SHA-256 over every parameter value and the vocabulary.
pub fn model_digest(model: &Model) -> String {
    let mut h = Sha256::new();
    model.params.visit(&mut |name, t| {
        h.update(name.as_bytes());
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    });
    h.update(model.vocab.to_text().as_bytes());
    hex::encode(h.finalize())
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

async fn correct(
    State(state): State<Arc<AppState>>,
    body: Result<Json<CorrectionRequest>, JsonRejection>,
) -> Response {
    let id = state.requests.fetch_add(1, Ordering::Relaxed) + 1;
    let Json(req) = match body {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    let len = req.text.chars().count();
    if len > MAX_TEXT_CHARS {
        return error(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("text has {len} characters; the limit is {MAX_TEXT_CHARS}"),
        );
    }
    let worker = {
        let state = state.clone();
        tokio::task::spawn_blocking(move || state.corrector.correct(&req))
    };
    match tokio::time::timeout(state.timeout, worker).await {
        Err(_) => error(StatusCode::SERVICE_UNAVAILABLE, "decode timed out"),
        Ok(Ok(Ok(resp))) => Json(resp).into_response(),
        Ok(Ok(Err(InferError::TooLong { len }))) => error(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("text has {len} characters; the limit is {MAX_TEXT_CHARS}"),
        ),
        Ok(result) => {
            state.failures.fetch_add(1, Ordering::Relaxed);
            match result {
                Ok(Err(e)) => log::error!("request {id}: {e}"),
                Err(e) => log::error!("request {id}: worker failed: {e}"),
                Ok(Ok(_)) => unreachable!(),
            }
            error(
                StatusCode::INTERNAL_SERVER_ERROR,
                format!("internal error {id:08x}"),
            )
        }
    }
}

async fn healthz() -> &'static str {
    "ok"
}

async fn version(State(state): State<Arc<AppState>>) -> Response {
    Json(json!({
        "name": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "api": "v1",
        "model_sha256": state.checkpoint_sha256,
        "parameters": state.model().params.num_parameters(),
        "word_window": state.model().config.word_window,
        "requests": state.requests(),
        "failures": state.failures.load(Ordering::Relaxed),
    }))
    .into_response()
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/v1/correct", post(correct))
        .route("/healthz", get(healthz))
        .route("/version", get(version))
        .with_state(state)
}

/// Binds `addr` and serves until Ctrl-C.
pub async fn serve(state: Arc<AppState>, addr: &str) -> io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
