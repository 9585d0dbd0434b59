//! HTTP surface: public browsing and download, authenticated
//! contributions and requests, ARK resolution, moderation and health.

pub mod admin;
pub mod auth;
pub mod contribute;
pub mod error;
pub mod public;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::DefaultBodyLimit;
use axum::routing::{get, post};
use axum::Router;
use chrono::NaiveDate;
use heritage_core::{Config, Store};
use heritage_ingest::Ingestor;
use heritage_orchestrator::Layout;
use parking_lot::Mutex;

pub use auth::{AuthContext, StaticKeyVerifier, TokenVerifier};
pub use error::{ApiError, ApiResult};

pub struct AppState {
    pub store: Store,
    pub config: Arc<Config>,
    pub verifier: Arc<dyn TokenVerifier>,
    pub ingestor: Arc<Ingestor>,
    pub layout: Layout,
    /// Images accepted per client address per UTC day.
    pub uploads: Mutex<HashMap<(String, NaiveDate), u32>>,
}

impl AppState {
    /// State with the static-key verifier from `auth.static_key`.
    pub fn new(store: Store, config: Arc<Config>) -> Self {
        let verifier = Arc::new(StaticKeyVerifier::new(&config.auth.static_key));
        Self::with_verifier(store, config, verifier)
    }

    pub fn with_verifier(store: Store, config: Arc<Config>, verifier: Arc<dyn TokenVerifier>) -> Self {
        Self {
            ingestor: Arc::new(Ingestor::from_config(&config)),
            layout: Layout::from_config(&config),
            uploads: Mutex::new(HashMap::new()),
            store,
            config,
            verifier,
        }
    }
}

/// Runs blocking store work off the async executor.
pub(crate) async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker task failed: {e}")))?
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(public::healthz))
        .route("/api/sites", get(public::list_sites))
        .route("/api/sites/{id}", get(public::site_detail))
        .route("/api/sites/{id}/model", get(public::model))
        .route("/ark:/{naan}/{name}", get(public::ark_redirect))
        .route("/api/ark/{naan}/{name}", get(public::ark_metadata))
        .route(
            "/api/contributions",
            post(contribute::contribute).layer(DefaultBodyLimit::disable()),
        )
        .route("/api/requests/site", post(contribute::site_request))
        .route("/api/requests/highres", post(contribute::highres_request))
        .route("/api/admin/moderation", get(admin::moderation_queue))
        .route("/api/admin/moderation/{image_id}", post(admin::moderate_image))
        .route("/api/admin/sites/{id}/complete", post(admin::complete_site))
        .route("/api/admin/runs", post(admin::start_run))
        .with_state(state)
}

/// Serves until the process receives Ctrl-C.
pub async fn serve(state: Arc<AppState>, bind: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state).into_make_service_with_connect_info::<SocketAddr>())
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
