//! HTTP + JSON surface of the store.
//!
//! | method | path | body | reply |
//! |---|---|---|---|
//! | POST | `/sessions` | `{rater_id, batch_size}` | `SessionInfo` |
//! | GET | `/sessions/{id}` | | `SessionInfo` |
//! | GET | `/sessions/{id}/tasks` | | `[StimulusPayload]` |
//! | POST | `/sessions/{id}/ratings` | `{query_id, rating_a, rating_b}` | `SubmitAck` |
//! | GET | `/progress` | | `Progress` |
//! | POST | `/queries` | `[PairQuery]` | `EnqueueAck` |
//! | GET | `/responses` | | `[PairResponse]` |
//!
//! Errors come back as `{"error": kind, "message": text}` with 404, 422, 409
//! or 500.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use perceptscore_core::evaluators::{PairQuery, PairResponse};
use serde_json::json;
use tokio::sync::oneshot;
use tower_http::cors::CorsLayer;

use crate::store::{
    CreateSession, EnqueueAck, Progress, RatingStore, ServiceError, SessionInfo, StimulusPayload, SubmitAck,
    SubmitRating,
};

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let (status, kind) = match &self {
            ServiceError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            ServiceError::Validation(_) => (StatusCode::UNPROCESSABLE_ENTITY, "validation"),
            ServiceError::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            ServiceError::Journal(_) => (StatusCode::INTERNAL_SERVER_ERROR, "journal"),
        };
        (status, Json(json!({"error": kind, "message": self.to_string()}))).into_response()
    }
}

type Shared = State<Arc<RatingStore>>;
type Reply<T> = Result<Json<T>, ServiceError>;

async fn create_session(State(store): Shared, Json(req): Json<CreateSession>) -> Result<(StatusCode, Json<SessionInfo>), ServiceError> {
    let info = store.create_session(&req.rater_id, req.batch_size)?;
    Ok((StatusCode::CREATED, Json(info)))
}

async fn session(State(store): Shared, Path(id): Path<String>) -> Reply<SessionInfo> {
    store.session(&id).map(Json)
}

async fn tasks(State(store): Shared, Path(id): Path<String>) -> Reply<Vec<StimulusPayload>> {
    store.tasks(&id).map(Json)
}

async fn submit(State(store): Shared, Path(id): Path<String>, Json(req): Json<SubmitRating>) -> Reply<SubmitAck> {
    store.submit_rating(&id, &req).map(Json)
}

async fn progress(State(store): Shared) -> Json<Progress> {
    Json(store.progress())
}

async fn enqueue(State(store): Shared, Json(queries): Json<Vec<PairQuery>>) -> Reply<EnqueueAck> {
    store.enqueue(&queries).map(Json)
}

async fn responses(State(store): Shared) -> Json<Vec<PairResponse>> {
    Json(store.responses())
}

pub fn router(store: Arc<RatingStore>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session))
        .route("/sessions/{id}/tasks", get(tasks))
        .route("/sessions/{id}/ratings", post(submit))
        .route("/progress", get(progress))
        .route("/queries", post(enqueue))
        .route("/responses", get(responses))
        .layer(CorsLayer::permissive())
        .with_state(store)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    store: Arc<RatingStore>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(store)).with_graceful_shutdown(shutdown).await
}

/// Blocking entry point: binds `addr` and serves until the process exits.
pub fn run_blocking(addr: SocketAddr, store: Arc<RatingStore>) -> std::io::Result<()> {
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        serve(listener, store, std::future::pending()).await
    })
}

/// A server running on its own thread and runtime.
pub struct BackgroundServer {
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<std::io::Result<()>>>,
}

impl BackgroundServer {
    /// Binds `addr` (port 0 picks a free port) and starts serving.
    pub fn start(addr: SocketAddr, store: Arc<RatingStore>) -> std::io::Result<Self> {
        let std_listener = std::net::TcpListener::bind(addr)?;
        std_listener.set_nonblocking(true)?;
        let addr = std_listener.local_addr()?;
        let (tx, rx) = oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_all()
                .build()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(std_listener)?;
                serve(listener, store, async {
                    let _ = rx.await;
                })
                .await
            })
        });
        Ok(BackgroundServer {
            addr,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) -> std::io::Result<()> {
        self.shutdown_inner()
    }

    fn shutdown_inner(&mut self) -> std::io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(std::io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        let _ = self.shutdown_inner();
    }
}
