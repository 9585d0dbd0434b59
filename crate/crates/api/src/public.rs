//! Endpoints that need no authentication. Responses carry no contributor
//! names or emails.

use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::header::{CACHE_CONTROL, CONTENT_TYPE, ETAG, IF_NONE_MATCH, LOCATION};
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use heritage_core::ark::parse;
use heritage_core::{Error, Resolution, RunRecord, SiteId, SiteRecord, Tx};
use serde::Deserialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{ApiError, ApiResult};
use crate::{blocking, AppState};

pub const DEFAULT_LIMIT: usize = 50;
pub const MAX_LIMIT: usize = 500;
pub const GLB_MIME: &str = "model/gltf-binary";

pub async fn healthz(State(st): State<Arc<AppState>>) -> Json<Value> {
    let store = st.store.clone();
    let (db_ok, depth) = tokio::task::spawn_blocking(move || (store.ping(), heritage_orchestrator::queue::depth(&store)))
        .await
        .unwrap_or((false, Err(Error::Config("health probe aborted".into()))));
    let ok = db_ok && depth.is_ok();
    Json(json!({
        "status": if ok { "ok" } else { "degraded" },
        "queue_depth": depth.unwrap_or(0),
        "db_ok": db_ok,
    }))
}

fn run_summary(r: &RunRecord) -> Value {
    json!({
        "id": r.id.0,
        "state": r.state,
        "created_at": r.created_at,
        "ended_at": r.ended_at,
        "ark": r.ark.as_ref().map(|a| a.to_string()),
        "registered_views": r.report.registered_views.map(|v| json!({"registered": v.registered, "total": v.total})),
        "error": r.error,
    })
}

fn site_summary(tx: &Tx<'_>, s: &SiteRecord) -> Result<Value, Error> {
    let runs = tx.runs_for_site(s.id)?;
    let latest = runs.iter().max_by_key(|r| r.id.0);
    let published = tx.latest_published_run(s.id)?;
    Ok(json!({
        "id": s.id.0,
        "verbose_id": s.verbose_id,
        "name": s.meta.name,
        "completed": s.completed,
        "status": s.status,
        "latest_run": latest.map(run_summary),
        "model_available": published.is_some(),
    }))
}

#[derive(Debug, Deserialize)]
pub struct ListQuery {
    #[serde(default)]
    pub q: String,
    pub limit: Option<usize>,
    #[serde(default)]
    pub offset: usize,
}

pub async fn list_sites(State(st): State<Arc<AppState>>, Query(q): Query<ListQuery>) -> ApiResult<Json<Value>> {
    let limit = q.limit.unwrap_or(DEFAULT_LIMIT).clamp(1, MAX_LIMIT);
    let store = st.store.clone();
    blocking(move || {
        let v = store.read(|tx| {
            let all = tx.search_sites(&q.q)?;
            let total = all.len();
            let items = all
                .iter()
                .skip(q.offset)
                .take(limit)
                .map(|s| site_summary(tx, s))
                .collect::<Result<Vec<_>, _>>()?;
            let next = (q.offset + limit < total).then_some(q.offset + limit);
            Ok::<_, Error>(json!({"items": items, "total": total, "next_offset": next}))
        })?;
        Ok(Json(v))
    })
    .await
}

pub async fn site_detail(State(st): State<Arc<AppState>>, Path(id): Path<i64>) -> ApiResult<Json<Value>> {
    let store = st.store.clone();
    blocking(move || {
        let v = store.read(|tx| {
            let s = tx.site(SiteId(id))?;
            let mut v = site_summary(tx, &s)?;
            v["description"] = json!(s.meta.description);
            v["location"] = json!({
                "country": s.meta.country,
                "state": s.meta.state,
                "district": s.meta.district,
                "locality": s.meta.locality,
            });
            let published = tx.latest_published_run(s.id)?;
            v["ark"] = json!(published.as_ref().and_then(|r| r.ark.as_ref()).map(|a| a.to_string()));
            v["published_run"] = json!(published.as_ref().map(run_summary));
            Ok::<_, Error>(v)
        })?;
        Ok(Json(v))
    })
    .await
}

fn etag_matches(headers: &HeaderMap, etag: &str) -> bool {
    headers
        .get_all(IF_NONE_MATCH)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|v| v.split(','))
        .map(|t| t.trim().trim_start_matches("W/"))
        .any(|t| t == etag || t == "*")
}

/// Latest published artifact, checked against the digest recorded at
/// publication before it is served.
pub async fn model(State(st): State<Arc<AppState>>, Path(id): Path<i64>, headers: HeaderMap) -> ApiResult<Response> {
    let store = st.store.clone();
    let (run, bytes) = blocking(move || {
        let run = store.read(|tx| {
            tx.site(SiteId(id))?;
            tx.latest_published_run(SiteId(id))
        })?;
        let Some(run) = run else {
            return Err(ApiError::new(StatusCode::NOT_FOUND, "NO_MODEL", format!("site {id} has no published model")));
        };
        let path = run.artifact_path.clone().unwrap_or_default();
        let bytes = std::fs::read(&path).map_err(|e| ApiError::internal(format!("artifact unreadable: {e}")))?;
        Ok((run, bytes))
    })
    .await?;
    let digest = hex::encode(Sha256::digest(&bytes));
    if run.artifact_sha256.as_deref() != Some(digest.as_str()) {
        tracing::error!(run = %run.id, "artifact digest mismatch");
        return Err(ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            "ARTIFACT_INTEGRITY",
            "stored artifact does not match its recorded digest",
        ));
    }
    let etag = format!("\"{digest}\"");
    let etag_value = HeaderValue::from_str(&etag).expect("hex etag");
    let cache = HeaderValue::from_static("public, no-cache");
    if etag_matches(&headers, &etag) {
        return Ok((StatusCode::NOT_MODIFIED, [(ETAG, etag_value), (CACHE_CONTROL, cache)]).into_response());
    }
    Ok((
        StatusCode::OK,
        [(CONTENT_TYPE, HeaderValue::from_static(GLB_MIME)), (ETAG, etag_value), (CACHE_CONTROL, cache)],
        bytes,
    )
        .into_response())
}

async fn resolve(st: &AppState, naan: String, name: String) -> ApiResult<Resolution> {
    let ark = parse(&format!("ark:/{naan}/{name}")).map_err(Error::from)?;
    let store = st.store.clone();
    blocking(move || Ok(store.read(|tx| tx.resolve_ark(&ark))?)).await
}

fn gone(entry: &heritage_core::ArkEntry) -> ApiError {
    ApiError::new(StatusCode::GONE, "ARCHIVED", format!("{} refers to an archived model", entry.ark))
        .with_detail(json!({"ark": entry.ark.to_string()}))
}

pub async fn ark_redirect(
    State(st): State<Arc<AppState>>,
    Path((naan, name)): Path<(String, String)>,
) -> ApiResult<Response> {
    match resolve(&st, naan, name).await? {
        Resolution::Live(entry) => {
            let Some(target) = entry.target.as_deref() else {
                return Err(ApiError::new(StatusCode::NOT_FOUND, "UNBOUND", format!("{} has no target yet", entry.ark)));
            };
            let loc = HeaderValue::from_str(target).map_err(|_| ApiError::internal("target is not a valid header"))?;
            Ok((StatusCode::FOUND, [(LOCATION, loc)]).into_response())
        }
        Resolution::Gone(entry) => Err(gone(&entry)),
    }
}

pub async fn ark_metadata(
    State(st): State<Arc<AppState>>,
    Path((naan, name)): Path<(String, String)>,
) -> ApiResult<Json<Value>> {
    match resolve(&st, naan, name).await? {
        Resolution::Live(entry) => {
            let metadata: Value = serde_json::from_str(&entry.metadata).unwrap_or(Value::Null);
            Ok(Json(json!({
                "ark": entry.ark.to_string(),
                "target": entry.target,
                "metadata": metadata,
                "created_at": entry.created_at,
            })))
        }
        Resolution::Gone(entry) => Err(gone(&entry)),
    }
}
