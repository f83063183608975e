//! JSON-over-HTTP front end for [`MemoryEngine`].
//!
//! | method | path                           | body / result                    |
//! |--------|--------------------------------|----------------------------------|
//! | POST   | `/v1/context`                  | `TurnRequest` -> `MemoryContext` |
//! | POST   | `/v1/turns`                    | `TurnRequest` + `assistant_text` -> `TurnReceipt` |
//! | GET    | `/v1/sessions/{id}/summary`    | `SummaryRecord`                  |
//! | GET    | `/v1/users/{name}/persona`     | `PersonaGraph`                   |
//! | GET    | `/healthz`                     | store and provider status        |
//!
//! Errors are `{"error": ..., "kind": ...}` with status 400 (validation),
//! 404 (unknown id), 500 (storage) or 502 (provider).

use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use kgmem_core::graph::GraphError;
use kgmem_core::{EngineError, MemoryEngine, TurnRequest};

#[derive(Debug, Clone, Deserialize)]
pub struct TurnBody {
    #[serde(flatten)]
    pub request: TurnRequest,
    pub assistant_text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub store: String,
    pub provider: String,
    pub embed_dim: usize,
    pub index_entries: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub kind: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            kind,
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let (status, kind) = match &e {
            EngineError::Validation(_) => (StatusCode::BAD_REQUEST, "validation"),
            EngineError::Provider(_) | EngineError::Graph(GraphError::Provider(_)) => {
                (StatusCode::BAD_GATEWAY, "provider")
            }
            EngineError::Corruption { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "corruption"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "storage"),
        };
        Self::new(status, kind, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "validation", e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            log::error!("{}: {}", self.kind, self.message);
        }
        let body = ErrorBody {
            error: self.message,
            kind: self.kind.to_string(),
        };
        (self.status, Json(body)).into_response()
    }
}

type AppState = Arc<MemoryEngine>;

/// Run blocking engine work off the async workers.
async fn blocking<T, F>(engine: &AppState, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&MemoryEngine) -> Result<T, EngineError> + Send + 'static,
{
    let engine = engine.clone();
    tokio::task::spawn_blocking(move || f(&engine))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

async fn context(
    State(engine): State<AppState>,
    body: Result<Json<TurnRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(request) = body?;
    let ctx = blocking(&engine, move |e| e.retrieve_context(&request)).await?;
    Ok(Json(ctx).into_response())
}

async fn turns(
    State(engine): State<AppState>,
    body: Result<Json<TurnBody>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(body) = body?;
    let receipt = blocking(&engine, move |e| e.record_turn(&body.request, &body.assistant_text)).await?;
    Ok(Json(receipt).into_response())
}

async fn summary(State(engine): State<AppState>, Path(session_id): Path<String>) -> Result<Response, ApiError> {
    let id = session_id.clone();
    match blocking(&engine, move |e| e.get_summary(&id)).await? {
        Some(record) => Ok(Json(record).into_response()),
        None => Err(ApiError::not_found(format!("no summary for session {session_id}"))),
    }
}

async fn persona(State(engine): State<AppState>, Path(user_name): Path<String>) -> Result<Response, ApiError> {
    let name = user_name.clone();
    let found = blocking(&engine, move |e| {
        if !e.has_user_history(&name)? {
            return Ok(None);
        }
        e.get_persona(&name).map(Some)
    })
    .await?;
    match found {
        Some(graph) => Ok(Json(graph).into_response()),
        None => Err(ApiError::not_found(format!("unknown user {user_name}"))),
    }
}

async fn healthz(State(engine): State<AppState>) -> Response {
    let probe = blocking(&engine, |e| Ok(e.store().message_count()?)).await;
    let store = match probe {
        Ok(_) => "ok".to_string(),
        Err(e) => format!("error: {}", e.message),
    };
    let healthy = store == "ok";
    let body = Health {
        status: if healthy { "ok" } else { "degraded" }.to_string(),
        store,
        provider: engine.provider().kind().to_string(),
        embed_dim: engine.provider().dimension(),
        index_entries: engine.index().len(),
    };
    let status = if healthy {
        StatusCode::OK
    } else {
        StatusCode::SERVICE_UNAVAILABLE
    };
    (status, Json(body)).into_response()
}

pub fn router(engine: Arc<MemoryEngine>) -> Router {
    Router::new()
        .route("/v1/context", post(context))
        .route("/v1/turns", post(turns))
        .route("/v1/sessions/{id}/summary", get(summary))
        .route("/v1/users/{name}/persona", get(persona))
        .route("/healthz", get(healthz))
        .with_state(engine)
}

/// Serve until Ctrl-C.
pub async fn serve(engine: Arc<MemoryEngine>, bind: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind)
        .await
        .map_err(|e| anyhow::anyhow!("binding {bind}: {e}"))?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(engine.clone()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    engine.index().sync()?;
    Ok(())
}
