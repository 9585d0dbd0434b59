//! Operator endpoints behind the admin token list.

use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::Json;
use heritage_core::{ImageId, ImageRecord, SafetyState, SiteId};
use heritage_orchestrator::{moderate, request_run, ModerationAction};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::auth::Admin;
use crate::error::ApiResult;
use crate::{blocking, AppState};

fn image_summary(i: &ImageRecord) -> Value {
    json!({
        "id": i.id.0,
        "site_id": i.site_id.0,
        "contribution_id": i.contribution_id.0,
        "filename": i.filename,
        "width": i.width,
        "height": i.height,
        "safety": i.safety,
        "label": i.label,
        "created_at": i.created_at,
    })
}

pub async fn moderation_queue(State(st): State<Arc<AppState>>, _: Admin) -> ApiResult<Json<Value>> {
    let store = st.store.clone();
    blocking(move || {
        let items = store.read(|tx| tx.images_with_safety(SafetyState::Moderation))?;
        Ok(Json(json!({"items": items.iter().map(image_summary).collect::<Vec<_>>()})))
    })
    .await
}

#[derive(Debug, Deserialize)]
pub struct ModerationBody {
    pub action: String,
}

pub async fn moderate_image(
    State(st): State<Arc<AppState>>,
    _: Admin,
    Path(image_id): Path<i64>,
    Json(body): Json<ModerationBody>,
) -> ApiResult<Json<Value>> {
    let action: ModerationAction = body.action.parse()?;
    let st2 = st.clone();
    blocking(move || {
        let img = moderate(&st2.store, &st2.config, ImageId(image_id), action)?;
        Ok(Json(image_summary(&img)))
    })
    .await
}

pub async fn complete_site(State(st): State<Arc<AppState>>, _: Admin, Path(id): Path<i64>) -> ApiResult<Json<Value>> {
    let store = st.store.clone();
    blocking(move || {
        let s = store.mark_completed(SiteId(id))?;
        Ok(Json(json!({"id": s.id.0, "verbose_id": s.verbose_id, "completed": s.completed})))
    })
    .await
}

#[derive(Debug, Deserialize)]
pub struct RunBody {
    pub site_id: i64,
}

/// Creates a QUEUED run and its EXECUTE_RUN job.
pub async fn start_run(
    State(st): State<Arc<AppState>>,
    _: Admin,
    Json(body): Json<RunBody>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let st2 = st.clone();
    let run = blocking(move || Ok(request_run(&st2.store, &st2.config, SiteId(body.site_id))?)).await?;
    Ok((
        StatusCode::ACCEPTED,
        Json(json!({"run_id": run.id.0, "site_id": run.site_id.0, "state": run.state})),
    ))
}

