//! HTTP JSON API over one bundle's difficulty analysis.
//!
//! Every GET that serves derived data answers `409 not_computed` until a
//! computation has finished. Responses carry the session revision in the
//! `x-difflens-revision` header; errors are `{"code", "message", "details"}`.

pub mod error;
pub mod routes;
pub mod session;

use std::net::SocketAddr;
use std::sync::Arc;

pub use error::ApiError;
pub use routes::{router, REVISION_HEADER};
pub use session::{ComputeOutcome, ComputeState, Session, SessionOptions};

/// Binds `addr` and serves until Ctrl-C. `on_bound` receives the actual address.
pub async fn serve(session: Arc<Session>, addr: SocketAddr, on_bound: impl FnOnce(SocketAddr)) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    on_bound(listener.local_addr()?);
    axum::serve(listener, router(session))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
