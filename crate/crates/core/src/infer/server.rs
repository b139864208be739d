use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;

use super::chat::{chat, ChatReply, ChatRequest};
use crate::error::{Error, Result};
use crate::model::ModelBundle;

struct ApiError(Error);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match self.0 {
            Error::Input(_)
            | Error::Role(_)
            | Error::EmptyAnswer(_)
            | Error::ContextLength { .. }
            | Error::Pairing { .. }
            | Error::Image(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "error": self.0.to_string() }))).into_response()
    }
}

async fn chat_handler(
    State(bundle): State<Arc<ModelBundle>>,
    Json(request): Json<ChatRequest>,
) -> std::result::Result<Json<ChatReply>, ApiError> {
    // Decoding is CPU-bound; keep it off the async workers.
    let reply = tokio::task::spawn_blocking(move || chat(&bundle, &request))
        .await
        .map_err(|e| ApiError(Error::Input(format!("worker failed: {e}"))))?
        .map_err(ApiError)?;
    Ok(Json(reply))
}

/// `POST /v1/chat` and `GET /healthz` over a shared read-only bundle.
pub fn router(bundle: Arc<ModelBundle>) -> Router {
    Router::new()
        .route("/v1/chat", post(chat_handler))
        .route("/healthz", get(|| async { "ok" }))
        .with_state(bundle)
}

/// Binds `addr` and serves until the process ends.
pub async fn serve(bundle: Arc<ModelBundle>, addr: SocketAddr) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(bundle)).await?;
    Ok(())
}
