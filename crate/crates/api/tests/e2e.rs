mod common;

use axum::http::{Request, StatusCode};
use common::*;
use heritage_core::ark::{parse, ArkName, ALPHABET};
use heritage_core::{RunId, RunState};
use heritage_orchestrator::{Disposition, JobKind};
use serde_json::{json, Value};

async fn publish(a: &App, site: i64, seed: u64) -> Value {
    let r = a.upload(Some(&user_token(1)), upload_body(site, &images(12, seed))).await;
    assert_eq!(r.status, StatusCode::ACCEPTED, "{}", r.text());
    let r = a.upload(Some(&user_token(2)), upload_body(site, &images(10, seed + 1))).await;
    assert_eq!(r.status, StatusCode::ACCEPTED);
    a.drain().await;
    let run = a.post_json("/api/admin/runs", Some(ADMIN), json!({"site_id": site})).await;
    assert_eq!(run.status, StatusCode::ACCEPTED, "{}", run.text());
    a.drain().await;
    a.get(&format!("/api/sites/{site}")).await.json()
}

fn ark_path(ark: &str) -> String {
    let a = parse(ark).unwrap();
    format!("/ark:/{}/{}", a.naan, a.name())
}

#[tokio::test(flavor = "multi_thread")]
async fn contribution_to_published_model() {
    let a = app();
    let s = a.site("Rani ki Vav");
    let started = std::time::Instant::now();
    let detail = publish(&a, s.id.0, 10).await;
    assert!(started.elapsed() < std::time::Duration::from_secs(120));

    assert_eq!(detail["model_available"], true);
    assert_eq!(detail["published_run"]["state"], "PUBLISHED");
    assert_eq!(detail["published_run"]["registered_views"], json!({"registered": 22, "total": 22}));
    let ark = detail["ark"].as_str().unwrap().to_owned();

    let model = a.get(&format!("/api/sites/{}/model", s.id)).await;
    assert_eq!(model.status, StatusCode::OK);
    assert_eq!(&model.bytes[..4], b"glTF");
    assert_eq!(model.headers["content-type"], "model/gltf-binary");
    let etag = model.headers["etag"].to_str().unwrap().to_owned();
    assert_eq!(etag, format!("\"{}\"", heritage_ingest::sha256_hex(&model.bytes)));
    let cached = a
        .send(
            Request::get(format!("/api/sites/{}/model", s.id))
                .header("if-none-match", &etag)
                .body(axum::body::Body::empty())
                .unwrap(),
        )
        .await;
    assert_eq!(cached.status, StatusCode::NOT_MODIFIED);
    assert!(cached.bytes.is_empty());

    let redirect = a.get(&ark_path(&ark)).await;
    assert_eq!(redirect.status, StatusCode::FOUND);
    let location = redirect.headers["location"].to_str().unwrap();
    assert!(location.ends_with(&s.verbose_id), "{location}");

    let parsed = parse(&ark).unwrap();
    let name = parsed.name();
    let hyphenated = format!("/ark:/{}/{}-{}", parsed.naan, &name[..4], &name[4..]);
    assert_eq!(a.get(&hyphenated).await.status, StatusCode::FOUND);

    let meta = a.get(&format!("/api/ark/{}/{}", parsed.naan, name)).await.json();
    assert_eq!(meta["ark"], ark);
    assert_eq!(meta["target"], location);
    assert!(meta["metadata"].is_object());

    // redelivering every job twice leaves the state alone
    let before = a.store.export_state().unwrap();
    let w = a.worker("late");
    for job in w.queue.all_jobs().unwrap() {
        for _ in 0..2 {
            let d = w.handle(&job);
            assert!(matches!(d, Disposition::Done(_)), "{:?} {d:?}", job.kind);
        }
    }
    assert_eq!(a.store.export_state().unwrap(), before);
    assert_eq!(a.store.read(|tx| tx.ark_entries()).unwrap().len(), 1);

    // tampering with the artifact is caught before serving
    let run = a.store.run(RunId(detail["published_run"]["id"].as_i64().unwrap())).unwrap();
    std::fs::write(run.artifact_path.unwrap(), b"not a model").unwrap();
    let r = a.get(&format!("/api/sites/{}/model", s.id)).await;
    assert_eq!((r.status, r.json()["code"].clone()), (StatusCode::INTERNAL_SERVER_ERROR, json!("ARTIFACT_INTEGRITY")));
}

#[tokio::test(flavor = "multi_thread")]
async fn ark_errors() {
    let a = app();
    let s = a.site("Adalaj");
    let detail = publish(&a, s.id.0, 20).await;
    let ark = parse(detail["ark"].as_str().unwrap()).unwrap();
    let name = ark.name();
    let (body, check) = name.split_at(name.len() - 1);
    let other = ALPHABET.iter().map(|&b| b as char).find(|c| c.to_string() != check).unwrap();
    let r = a.get(&format!("/ark:/{}/{body}{other}", ark.naan)).await;
    assert_eq!((r.status, r.json()["code"].clone()), (StatusCode::BAD_REQUEST, json!("BAD_CHECK")));

    let r = a.get(&format!("/ark:/{}/t1AB", ark.naan)).await;
    assert_eq!((r.status, r.json()["code"].clone()), (StatusCode::BAD_REQUEST, json!("MALFORMED")));

    let unknown = ArkName::new(&ark.naan, "t1", "bcdfghjkmnpq").unwrap();
    let r = a.get(&format!("/ark:/{}/{}", unknown.naan, unknown.name())).await;
    assert_eq!((r.status, r.json()["code"].clone()), (StatusCode::NOT_FOUND, json!("UNKNOWN_ARK")));
}

#[tokio::test(flavor = "multi_thread")]
async fn superseded_model_ark_is_gone() {
    let a = app();
    let s = a.site("Dholavira");
    let first = publish(&a, s.id.0, 30).await;
    let old = first["ark"].as_str().unwrap().to_owned();
    a.clock.advance(chrono::Duration::days(30));
    let run = a.post_json("/api/admin/runs", Some(ADMIN), json!({"site_id": s.id.0})).await;
    assert_eq!(run.status, StatusCode::ACCEPTED);
    a.drain().await;
    let newer = a.get(&format!("/api/sites/{}", s.id)).await.json()["ark"].as_str().unwrap().to_owned();
    assert_ne!(old, newer);

    a.clock.advance(chrono::Duration::days(a.config.maintenance.archive_days + 1));
    a.drain().await;
    let r = a.get(&ark_path(&old)).await;
    assert_eq!((r.status, r.json()["code"].clone()), (StatusCode::GONE, json!("ARCHIVED")));
    assert_eq!(a.get(&ark_path(&newer)).await.status, StatusCode::FOUND);
    assert_eq!(a.get(&format!("/api/sites/{}/model", s.id)).await.status, StatusCode::OK);
}

#[tokio::test(flavor = "multi_thread")]
async fn public_responses_never_expose_contributors() {
    let a = app();
    let s = a.site("Privacy");
    let detail = publish(&a, s.id.0, 40).await;
    let ark = parse(detail["ark"].as_str().unwrap()).unwrap();
    let mut bodies = vec![
        a.get("/api/sites").await.text(),
        a.get("/api/sites?q=priv").await.text(),
        a.get(&format!("/api/sites/{}", s.id)).await.text(),
        a.get(&format!("/api/ark/{}/{}", ark.naan, ark.name())).await.text(),
        a.get("/healthz").await.text(),
    ];
    bodies.push(String::from_utf8_lossy(&a.get(&format!("/api/sites/{}/model", s.id)).await.bytes).into_owned());
    for n in 1..=2 {
        let c = claims(n);
        for b in &bodies {
            assert!(!b.contains(&c.email), "email leaked: {b}");
            assert!(!b.contains(&c.name), "name leaked: {b}");
            assert!(!b.contains("example.org"));
        }
    }
    let preprocess = a
        .worker("w")
        .queue
        .all_jobs()
        .unwrap()
        .into_iter()
        .filter(|j| j.kind == JobKind::PreprocessImage)
        .count();
    assert_eq!(preprocess, 22);
    assert!(a.store.read(|tx| tx.runs()).unwrap().iter().all(|r| r.state == RunState::Published));
}
