#![allow(dead_code)]

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use chrono::{TimeZone, Utc};
use heritage_api::{router, AppState, AuthContext, StaticKeyVerifier};
use heritage_core::{Config, ManualClock, ReconOptions, SiteMetadata, SiteRecord, Store};
use heritage_ingest::synth::{self, Kind};
use heritage_orchestrator::{build_worker, SyntheticBackend, Worker};
use http_body_util::BodyExt;
use serde_json::Value;
use tempfile::TempDir;
use tower::ServiceExt;

pub const KEY: &str = "test-signing-key";
pub const ADMIN: &str = "admin-token-1";
pub const BOUNDARY: &str = "----heritage-test-boundary";

pub struct App {
    pub dir: TempDir,
    pub clock: ManualClock,
    pub store: Store,
    pub config: Arc<Config>,
    pub state: Arc<AppState>,
    pub router: Router,
}

pub struct Reply {
    pub status: StatusCode,
    pub headers: axum::http::HeaderMap,
    pub bytes: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes).unwrap_or(Value::Null)
    }

    pub fn text(&self) -> String {
        String::from_utf8_lossy(&self.bytes).into_owned()
    }
}

pub fn app() -> App {
    app_with(|_| {})
}

pub fn app_with(tweak: impl FnOnce(&mut Config)) -> App {
    let dir = tempfile::tempdir().unwrap();
    let mut c = Config::default();
    c.storage.root = dir.path().join("data");
    c.archive.root = dir.path().join("archive");
    c.archive.backup_root = dir.path().join("backups");
    c.ingest.min_short_side = 64;
    c.auth.static_key = KEY.into();
    c.auth.admin_tokens = vec![ADMIN.into()];
    tweak(&mut c);
    let config = Arc::new(c);
    let clock = ManualClock::new(Utc.with_ymd_and_hms(2024, 5, 1, 8, 0, 0).unwrap());
    let store = Store::open(dir.path().join("store.sqlite"), Arc::new(clock.clone())).unwrap();
    let state = Arc::new(AppState::new(store.clone(), config.clone()));
    let router = router(state.clone());
    App {
        dir,
        clock,
        store,
        config,
        state,
        router,
    }
}

pub fn claims(n: u32) -> AuthContext {
    AuthContext {
        subject: format!("sub-{n}"),
        email: format!("contributor{n}@example.org"),
        name: format!("Contributor Number{n}"),
        verified: true,
        exp: None,
    }
}

pub fn token(c: &AuthContext) -> String {
    StaticKeyVerifier::new(KEY).issue(c)
}

pub fn user_token(n: u32) -> String {
    token(&claims(n))
}

pub fn jpeg(seed: u64) -> Vec<u8> {
    synth::jpeg(Kind::Clean, seed, 96, 72)
}

pub fn png() -> Vec<u8> {
    let mut out = std::io::Cursor::new(Vec::new());
    image::RgbImage::from_pixel(80, 80, image::Rgb([10, 20, 30]))
        .write_to(&mut out, image::ImageFormat::Png)
        .unwrap();
    out.into_inner()
}

pub enum Part<'a> {
    Text(&'a str, String),
    File(&'a str, String, Vec<u8>),
}

pub fn multipart(parts: &[Part<'_>]) -> Vec<u8> {
    let mut b = Vec::new();
    for p in parts {
        b.extend_from_slice(format!("--{BOUNDARY}\r\n").as_bytes());
        match p {
            Part::Text(name, v) => {
                b.extend_from_slice(format!("Content-Disposition: form-data; name=\"{name}\"\r\n\r\n").as_bytes());
                b.extend_from_slice(v.as_bytes());
            }
            Part::File(name, file, data) => {
                b.extend_from_slice(
                    format!(
                        "Content-Disposition: form-data; name=\"{name}\"; filename=\"{file}\"\r\nContent-Type: image/jpeg\r\n\r\n"
                    )
                    .as_bytes(),
                );
                b.extend_from_slice(data);
            }
        }
        b.extend_from_slice(b"\r\n");
    }
    b.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    b
}

/// Multipart body with `site_id` and one `images` part per blob.
pub fn upload_body(site: i64, images: &[(String, Vec<u8>)]) -> Vec<u8> {
    let mut parts = vec![Part::Text("site_id", site.to_string())];
    parts.extend(images.iter().map(|(n, d)| Part::File("images", n.clone(), d.clone())));
    multipart(&parts)
}

pub fn images(n: usize, seed: u64) -> Vec<(String, Vec<u8>)> {
    (0..n).map(|i| (format!("IMG_{i:04}.jpg"), jpeg(seed * 1000 + i as u64))).collect()
}

impl App {
    pub fn site(&self, name: &str) -> SiteRecord {
        self.store
            .create_site(
                SiteMetadata {
                    country: "India".into(),
                    state: "Gujarat".into(),
                    ..SiteMetadata::named(name)
                },
                ReconOptions {
                    texture_side: 128,
                    ..ReconOptions::default()
                },
            )
            .unwrap()
    }

    pub fn worker(&self, id: &str) -> Worker {
        build_worker(id, self.store.clone(), self.config.clone(), Arc::new(SyntheticBackend)).unwrap()
    }

    pub async fn send(&self, req: Request<Body>) -> Reply {
        let resp = self.router.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let headers = resp.headers().clone();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
        Reply { status, headers, bytes }
    }

    pub async fn get(&self, uri: &str) -> Reply {
        self.send(Request::get(uri).body(Body::empty()).unwrap()).await
    }

    pub async fn get_auth(&self, uri: &str, token: &str) -> Reply {
        self.send(
            Request::get(uri)
                .header("authorization", format!("Bearer {token}"))
                .body(Body::empty())
                .unwrap(),
        )
        .await
    }

    pub async fn post_json(&self, uri: &str, token: Option<&str>, body: Value) -> Reply {
        let mut b = Request::builder()
            .method(Method::POST)
            .uri(uri)
            .header("content-type", "application/json");
        if let Some(t) = token {
            b = b.header("authorization", format!("Bearer {t}"));
        }
        self.send(b.body(Body::from(body.to_string())).unwrap()).await
    }

    pub async fn upload(&self, token: Option<&str>, body: Vec<u8>) -> Reply {
        let mut b = Request::builder()
            .method(Method::POST)
            .uri("/api/contributions")
            .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"));
        if let Some(t) = token {
            b = b.header("authorization", format!("Bearer {t}"));
        }
        self.send(b.body(Body::from(body)).unwrap()).await
    }

    /// Drains the queue with one worker on a blocking thread.
    pub async fn drain(&self) {
        let w = self.worker("test-worker");
        tokio::task::spawn_blocking(move || w.run_until_idle(500).unwrap())
            .await
            .unwrap();
    }
}
