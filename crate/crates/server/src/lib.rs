//! HTTP/JSON service over the navtoken engine.
//!
//! Bodies are the types in [`navtoken_core::wire`]. Errors come back as
//! [`ErrorBody`](navtoken_core::wire::ErrorBody) with a status that follows
//! the error kind.

use std::collections::HashMap;
use std::future::Future;
use std::io;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::routing::{get, post, put};
use axum::Router;
use parking_lot::Mutex;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

use navtoken_core::cache::{CacheError, CacheStore};

pub mod error;
pub mod features;
mod routes;
pub mod session;

pub use error::ApiError;
use session::Session;

/// Shared state behind every handler.
#[derive(Clone, Default)]
pub struct AppState {
    inner: Arc<Inner>,
}

#[derive(Default)]
struct Inner {
    cache: Option<Arc<CacheStore>>,
    sessions: Mutex<HashMap<u64, Arc<Mutex<Session>>>>,
    next_session: AtomicU64,
}

impl AppState {
    pub fn new(cache: Option<CacheStore>) -> Self {
        Self { inner: Arc::new(Inner { cache: cache.map(Arc::new), ..Inner::default() }) }
    }

    pub fn cache(&self) -> Option<&Arc<CacheStore>> {
        self.inner.cache.as_ref()
    }

    fn insert_session(&self, session: Session) -> u64 {
        let id = self.inner.next_session.fetch_add(1, Ordering::Relaxed) + 1;
        self.inner.sessions.lock().insert(id, Arc::new(Mutex::new(session)));
        id
    }

    fn session(&self, id: u64) -> Option<Arc<Mutex<Session>>> {
        self.inner.sessions.lock().get(&id).cloned()
    }

    fn remove_session(&self, id: u64) -> bool {
        self.inner.sessions.lock().remove(&id).is_some()
    }
}

/// Opens the store at `path`, creating it when missing.
pub fn open_cache(path: impl AsRef<Path>, dim: usize) -> Result<CacheStore, CacheError> {
    let path = path.as_ref();
    if path.exists() {
        CacheStore::open_expecting(path, dim)
    } else {
        CacheStore::create(path, dim)
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(routes::health))
        .route("/v1/plan/solve", post(routes::solve))
        .route("/v1/plan/table", post(routes::table))
        .route("/v1/plan/draw", post(routes::draw))
        .route("/v1/organize", post(routes::organize))
        .route("/v1/simulate", post(routes::simulate))
        .route("/v1/eval", post(routes::eval))
        .route("/v1/fit-alpha", post(routes::fit_alpha))
        .route("/v1/cache/stats", get(routes::cache_stats))
        .route("/v1/cache/keys", get(routes::cache_keys))
        .route("/v1/cache/entries/{episode}/{t}/{cam}", put(routes::cache_put).get(routes::cache_get))
        .route("/v1/sessions", post(routes::create_session))
        .route("/v1/sessions/{id}/steps", post(routes::session_step))
        .route("/v1/sessions/{id}", axum::routing::delete(routes::delete_session))
        .with_state(state)
}

pub async fn serve(listener: TcpListener, state: AppState, shutdown: impl Future<Output = ()> + Send + 'static) -> io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

/// A server running on a background task.
pub struct Spawned {
    pub addr: SocketAddr,
    pub handle: JoinHandle<io::Result<()>>,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
}

impl Spawned {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub async fn shutdown(mut self) -> io::Result<()> {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        self.handle.await.map_err(io::Error::other)?
    }
}

/// Binds `127.0.0.1` on an ephemeral port and serves in the background.
pub async fn spawn(state: AppState) -> io::Result<Spawned> {
    let listener = TcpListener::bind(("127.0.0.1", 0)).await?;
    let addr = listener.local_addr()?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let handle = tokio::spawn(serve(listener, state, async {
        let _ = rx.await;
    }));
    Ok(Spawned { addr, handle, stop: Some(tx) })
}

/// Cache location reported by `/health`.
pub(crate) fn cache_path(state: &AppState) -> Option<PathBuf> {
    state.cache().map(|c| c.path().to_path_buf())
}
