//! Authenticated writes: image contributions and operator requests.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::{ConnectInfo, FromRequestParts, Multipart, State};
use axum::http::request::Parts;
use axum::http::StatusCode;
use axum::Json;
use heritage_core::{Error, ImageId, NewImage, SiteId};
use heritage_ingest::sha256_hex;
use heritage_orchestrator::preprocess::preprocess_payload;
use heritage_orchestrator::queue::{enqueue_in, JobKind};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::auth::User;
use crate::error::{ApiError, ApiResult};
use crate::{blocking, AppState};

pub const SITE_FIELD: &str = "site_id";
pub const IMAGES_FIELD: &str = "images";

/// Client address from the connection, or "unknown" when served without
/// one (in-process tests).
pub struct ClientIp(pub String);

impl<S: Send + Sync> FromRequestParts<S> for ClientIp {
    type Rejection = std::convert::Infallible;

    async fn from_request_parts(parts: &mut Parts, _: &S) -> Result<Self, Self::Rejection> {
        let ip = parts
            .extensions
            .get::<ConnectInfo<SocketAddr>>()
            .map(|c| c.0.ip().to_string())
            .unwrap_or_else(|| "unknown".into());
        Ok(ClientIp(ip))
    }
}

struct Staged {
    filename: String,
    path: PathBuf,
}

/// Temporary upload directory removed on drop.
struct Staging(PathBuf);

impl Drop for Staging {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

fn bad_request(message: impl Into<String>) -> ApiError {
    ApiError::new(StatusCode::BAD_REQUEST, "BAD_MULTIPART", message)
}

/// Streams every part to disk, enforcing the per-part size cap.
async fn stage_parts(st: &AppState, mut form: Multipart, dir: &Path) -> ApiResult<(Option<String>, Vec<Staged>)> {
    use tokio::io::AsyncWriteExt;

    let max = st.config.upload.max_bytes;
    let mut site = None;
    let mut staged = Vec::new();
    while let Some(mut field) = form.next_field().await.map_err(|e| bad_request(e.to_string()))? {
        match field.name() {
            Some(SITE_FIELD) => site = Some(field.text().await.map_err(|e| bad_request(e.to_string()))?),
            Some(IMAGES_FIELD) | Some("images[]") => {
                let filename = field.file_name().unwrap_or("unnamed").to_owned();
                let path = dir.join(format!("part-{}", staged.len()));
                let mut file = tokio::fs::File::create(&path)
                    .await
                    .map_err(|e| ApiError::internal(e.to_string()))?;
                let mut written = 0u64;
                while let Some(chunk) = field.chunk().await.map_err(|e| bad_request(e.to_string()))? {
                    written += chunk.len() as u64;
                    if written > max {
                        return Err(ApiError::new(
                            StatusCode::PAYLOAD_TOO_LARGE,
                            "PAYLOAD_TOO_LARGE",
                            format!("{filename} exceeds {max} bytes"),
                        ));
                    }
                    file.write_all(&chunk).await.map_err(|e| ApiError::internal(e.to_string()))?;
                }
                file.flush().await.map_err(|e| ApiError::internal(e.to_string()))?;
                staged.push(Staged { filename, path });
            }
            _ => {}
        }
    }
    Ok((site, staged))
}

/// Per-address daily cap on accepted images; reserves `n` slots.
fn reserve(st: &AppState, ip: &str, n: u32) -> ApiResult<()> {
    let day = st.store.now().date_naive();
    let cap = st.config.upload.per_ip_daily;
    let mut map = st.uploads.lock();
    map.retain(|(_, d), _| *d == day);
    let used = map.entry((ip.to_owned(), day)).or_insert(0);
    if *used + n > cap {
        return Err(ApiError::new(
            StatusCode::TOO_MANY_REQUESTS,
            "UPLOAD_CAP",
            format!("daily upload cap of {cap} images reached"),
        ));
    }
    *used += n;
    Ok(())
}

pub async fn contribute(
    State(st): State<Arc<AppState>>,
    ClientIp(ip): ClientIp,
    User(user): User,
    form: Multipart,
) -> ApiResult<(StatusCode, Json<Value>)> {
    if !user.verified {
        return Err(ApiError::forbidden("contributing requires a verified account"));
    }
    let staging_dir = st
        .layout
        .root
        .join("staging")
        .join(format!("{}-{}", std::process::id(), next_staging_id()));
    tokio::fs::create_dir_all(&staging_dir)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?;
    let staging = Staging(staging_dir);
    let (site, staged) = stage_parts(&st, form, &staging.0).await?;
    let site_id: i64 = site
        .as_deref()
        .map(str::trim)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| ApiError::unprocessable("VALIDATION", "site_id is required"))?;
    let site_id = SiteId(site_id);

    let (email, name) = (user.email.clone(), user.name.clone());
    let st2 = st.clone();
    let (accepted, rejected) = blocking(move || {
        // refuse early so a completed site or banned account costs no decoding
        st2.store.read(|tx| {
            let site = tx.site(site_id)?;
            if site.completed {
                return Err(Error::SiteCompleted(site_id.0));
            }
            if let Some(c) = tx.contributor_by_email(&user.email)? {
                if c.banned {
                    return Err(Error::ContributorBanned(c.id.0));
                }
            }
            Ok(())
        })?;
        let dest = st2.layout.images_dir(site_id);
        std::fs::create_dir_all(&dest).map_err(Error::from)?;
        let mut accepted = Vec::new();
        let mut rejected = Vec::new();
        for part in &staged {
            let bytes = std::fs::read(&part.path).map_err(Error::from)?;
            match st2.ingestor.decode(&bytes) {
                Ok(img) => {
                    let digest = sha256_hex(&bytes);
                    let path = dest.join(format!("{digest}.jpg"));
                    std::fs::rename(&part.path, &path)
                        .or_else(|_| std::fs::copy(&part.path, &path).map(|_| ()))
                        .map_err(Error::from)?;
                    accepted.push(NewImage {
                        filename: part.filename.clone(),
                        stored_path: path.display().to_string(),
                        byte_size: bytes.len() as u64,
                        width: img.width,
                        height: img.height,
                        exif_present: img.exif_present(),
                        sha256: digest,
                    });
                }
                Err(e) => rejected.push(json!({"filename": part.filename, "reason": e.code(), "message": e.to_string()})),
            }
        }
        Ok((accepted, rejected))
    })
    .await?;
    if accepted.is_empty() {
        return Err(
            ApiError::unprocessable("NO_DECODABLE_IMAGES", "no part was a decodable JPEG")
                .with_detail(json!({"rejected": rejected})),
        );
    }
    reserve(&st, &ip, accepted.len() as u32)?;

    let st2 = st.clone();
    let (contribution, ids) = blocking(move || {
        let max_attempts = st2.config.queue.max_attempts;
        let r = st2.store.write(|tx| {
            let who = tx.upsert_contributor(&email, &name)?;
            let c = tx.record_contribution(site_id, who.id, accepted)?;
            for &id in &c.image_ids {
                enqueue_in(tx, JobKind::PreprocessImage, &preprocess_payload(id), 0, max_attempts)?;
            }
            Ok::<_, Error>((c.id.0, c.image_ids))
        })?;
        Ok(r)
    })
    .await?;
    Ok((
        StatusCode::ACCEPTED,
        Json(json!({
            "contribution_id": contribution,
            "accepted_count": ids.len(),
            "image_ids": ids.iter().map(|i: &ImageId| i.0).collect::<Vec<_>>(),
            "rejected": rejected,
        })),
    ))
}

fn next_staging_id() -> u64 {
    use std::sync::atomic::{AtomicU64, Ordering};
    static NEXT: AtomicU64 = AtomicU64::new(0);
    NEXT.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Deserialize)]
pub struct SiteRequest {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub location: String,
    #[serde(default)]
    pub note: String,
}

/// Stores a request for a new site for operator review.
pub async fn site_request(
    State(st): State<Arc<AppState>>,
    User(user): User,
    Json(req): Json<SiteRequest>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    if req.name.trim().is_empty() {
        return Err(ApiError::unprocessable("VALIDATION", "name must not be empty"));
    }
    let store = st.store.clone();
    let rec = blocking(move || {
        let body = json!({
            "name": req.name.trim(),
            "location": req.location.trim(),
            "note": req.note,
            "requested_by": user.subject,
        });
        Ok(store.write(|tx| tx.add_request("site", body))?)
    })
    .await?;
    Ok((StatusCode::ACCEPTED, Json(json!({"id": rec.id, "kind": rec.kind, "created_at": rec.created_at}))))
}

#[derive(Debug, Deserialize)]
pub struct HighresRequest {
    pub site_id: i64,
    #[serde(default)]
    pub contact: String,
}

/// Queues a request for the undecimated output of the site's latest
/// published run.
pub async fn highres_request(
    State(st): State<Arc<AppState>>,
    User(user): User,
    Json(req): Json<HighresRequest>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let st2 = st.clone();
    let rec = blocking(move || {
        let r = st2.store.write(|tx| {
            let site = tx.site(SiteId(req.site_id))?;
            if req.contact.trim().is_empty() {
                return Err(Error::Validation("contact must not be empty".into()));
            }
            let run = tx.latest_published_run(site.id)?;
            let raw = run.as_ref().map(|r| st2.layout.artifact_dir(r.id).join("raw").display().to_string());
            let body = json!({
                "site_id": site.id.0,
                "run_id": run.as_ref().map(|r| r.id.0),
                "raw_artifact": raw,
                "contact": req.contact.trim(),
                "requested_by": user.subject,
            });
            tx.add_request("highres", body)
        })?;
        Ok(r)
    })
    .await?;
    Ok((StatusCode::ACCEPTED, Json(json!({"id": rec.id, "kind": rec.kind, "created_at": rec.created_at}))))
}
