//! Curation HTTP API over a [`CurationStore`].
//!
//! | method | path | body / reply |
//! |---|---|---|
//! | GET | `/health` | `{"status":"ok","version":v}` |
//! | GET | `/tree` | perception tree JSON |
//! | GET | `/leaves/{id}/sentences` | sentences held by node `id` (ids may contain `/`) |
//! | POST | `/edits` | tree edit plus `base_version`; replies with the new tree |
//! | GET | `/edits` | edits accepted since the base tree |
//!
//! Errors reply `{"error": msg}`: 404 unknown node, 409 stale version
//! (adds `current_version`), 422 invalid edit or body.

use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use radforge::curation::{CurationStore, EditSubmission, SubmitError};
use serde_json::json;

type Shared = Arc<CurationStore>;

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

async fn health(State(store): State<Shared>) -> Response {
    Json(json!({ "status": "ok", "version": store.version() })).into_response()
}

async fn tree(State(store): State<Shared>) -> Response {
    Json(store.tree()).into_response()
}

async fn leaf_sentences(State(store): State<Shared>, Path(rest): Path<String>) -> Response {
    let Some(id) = rest.strip_suffix("/sentences") else {
        return error(StatusCode::NOT_FOUND, format!("no route for /leaves/{rest}"));
    };
    match store.sentences(id) {
        Some(s) => Json(s).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("unknown node {id}")),
    }
}

async fn list_edits(State(store): State<Shared>) -> Response {
    Json(store.edits()).into_response()
}

async fn post_edit(State(store): State<Shared>, body: Result<Json<EditSubmission>, JsonRejection>) -> Response {
    let submission = match body {
        Ok(Json(s)) => s,
        Err(e) => return error(StatusCode::UNPROCESSABLE_ENTITY, e.body_text()),
    };
    match store.submit(&submission) {
        Ok(tree) => Json(tree).into_response(),
        Err(e @ SubmitError::Conflict { current_version, .. }) => (
            StatusCode::CONFLICT,
            Json(json!({ "error": e.to_string(), "current_version": current_version })),
        )
            .into_response(),
        Err(SubmitError::Invalid(msg)) => error(StatusCode::UNPROCESSABLE_ENTITY, msg),
        Err(SubmitError::Persist(e)) => {
            log::error!("persisting edit failed: {e}");
            error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
        }
    }
}

pub fn router(store: Shared) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/tree", get(tree))
        .route("/leaves/{*rest}", get(leaf_sentences))
        .route("/edits", get(list_edits).post(post_edit))
        .with_state(store)
}

/// Serves until the listener fails or `shutdown` resolves.
pub async fn serve(
    store: Shared,
    listener: tokio::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(store))
        .with_graceful_shutdown(shutdown)
        .await
}
