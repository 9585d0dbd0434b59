mod common;

use axum::http::StatusCode;
use common::*;
use heritage_core::{ImageLabel, RunState, SafetyState};
use serde_json::json;

#[tokio::test]
async fn health_reports_store_and_queue() {
    let a = app();
    let r = a.get("/healthz").await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.json(), json!({"status": "ok", "queue_depth": 0, "db_ok": true}));
}

#[tokio::test]
async fn site_search_and_paging() {
    let a = app();
    a.site("Somanatha Temple");
    a.site("Chennakeshava Temple");
    a.site("Hampi Stepwell");
    let r = a.get("/api/sites?q=soma").await.json();
    assert_eq!(r["items"].as_array().unwrap().len(), 1);
    assert_eq!(r["items"][0]["name"], "Somanatha Temple");
    assert_eq!(r["items"][0]["latest_run"], serde_json::Value::Null);

    let all = a.get("/api/sites").await.json();
    assert_eq!(all["total"], 3);
    assert_eq!(all["next_offset"], serde_json::Value::Null);

    let page = a.get("/api/sites?limit=2").await.json();
    assert_eq!(page["items"].as_array().unwrap().len(), 2);
    assert_eq!(page["next_offset"], 2);
    let rest = a.get("/api/sites?limit=2&offset=2").await.json();
    assert_eq!(rest["items"].as_array().unwrap().len(), 1);
    assert_eq!(rest["next_offset"], serde_json::Value::Null);

    assert_eq!(a.get("/api/sites/999").await.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn unpublished_model_is_404_with_error_payload() {
    let a = app();
    let s = a.site("Unpublished");
    let r = a.get(&format!("/api/sites/{}/model", s.id)).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    let body = r.json();
    assert_eq!(body["code"], "NO_MODEL");
    assert!(body["message"].is_string());
    assert!(body.as_object().unwrap().contains_key("detail"));
}

#[tokio::test]
async fn contribution_accepts_jpegs_and_queues_preprocessing() {
    let a = app();
    let s = a.site("Upload");
    let r = a.upload(Some(&user_token(1)), upload_body(s.id.0, &images(20, 1))).await;
    assert_eq!(r.status, StatusCode::ACCEPTED, "{}", r.text());
    let body = r.json();
    assert_eq!(body["accepted_count"], 20);
    assert_eq!(body["rejected"], json!([]));
    let depth = a.get("/healthz").await.json()["queue_depth"].as_u64().unwrap();
    assert_eq!(depth, 20);

    // durable before the response: a fresh connection sees it
    let reopened = heritage_core::Store::open(a.dir.path().join("store.sqlite"), std::sync::Arc::new(a.clock.clone())).unwrap();
    let imgs = reopened.read(|tx| tx.images_for_site(s.id)).unwrap();
    assert_eq!(imgs.len(), 20);
    assert!(imgs.iter().all(|i| std::path::Path::new(&i.stored_path).exists()));
}

#[tokio::test]
async fn png_part_is_rejected_alone() {
    let a = app();
    let s = a.site("Mixed");
    let mut parts = images(3, 2);
    parts.insert(1, ("diagram.png".into(), png()));
    let r = a.upload(Some(&user_token(1)), upload_body(s.id.0, &parts)).await;
    assert_eq!(r.status, StatusCode::ACCEPTED);
    let body = r.json();
    assert_eq!(body["accepted_count"], 3);
    assert_eq!(body["rejected"][0]["filename"], "diagram.png");
    assert_eq!(body["rejected"][0]["reason"], "UNSUPPORTED_FORMAT");

    let only_png = a.upload(Some(&user_token(1)), upload_body(s.id.0, &[("x.png".into(), png())])).await;
    assert_eq!(only_png.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(only_png.json()["code"], "NO_DECODABLE_IMAGES");
}

#[tokio::test]
async fn contribution_auth_errors() {
    let a = app();
    let s = a.site("Guarded");
    let body = || upload_body(s.id.0, &images(1, 3));
    assert_eq!(a.upload(None, body()).await.status, StatusCode::UNAUTHORIZED);
    let forged = heritage_api::StaticKeyVerifier::new("wrong").issue(&claims(1));
    let r = a.upload(Some(&forged), body()).await;
    assert_eq!((r.status, r.json()["code"].clone()), (StatusCode::UNAUTHORIZED, json!("UNAUTHENTICATED")));

    let mut unverified = claims(2);
    unverified.verified = false;
    assert_eq!(a.upload(Some(&token(&unverified)), body()).await.status, StatusCode::FORBIDDEN);

    let c = a.store.upsert_contributor(&claims(3).email, "x").unwrap();
    a.store.write(|tx| tx.set_banned(c.id, true, Some("spam".into()))).unwrap();
    let r = a.upload(Some(&user_token(3)), body()).await;
    assert_eq!((r.status, r.json()["code"].clone()), (StatusCode::FORBIDDEN, json!("CONTRIBUTOR_BANNED")));
}

#[tokio::test]
async fn contribution_validation_errors() {
    let a = app_with(|c| {
        c.upload.max_bytes = 4096;
        c.upload.per_ip_daily = 3;
    });
    let s = a.site("Limits");
    let t = user_token(1);
    let big = vec![(String::from("big.jpg"), synth_big())];
    let r = a.upload(Some(&t), upload_body(s.id.0, &big)).await;
    assert_eq!(r.status, StatusCode::PAYLOAD_TOO_LARGE);

    let r = a.upload(Some(&t), upload_body(9999, &images(1, 4))).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    let r = a.upload(Some(&t), multipart(&[Part::File("images", "a.jpg".into(), jpeg(1))])).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);

    assert_eq!(a.upload(Some(&t), upload_body(s.id.0, &images(3, 5))).await.status, StatusCode::ACCEPTED);
    let r = a.upload(Some(&t), upload_body(s.id.0, &images(1, 6))).await;
    assert_eq!((r.status, r.json()["code"].clone()), (StatusCode::TOO_MANY_REQUESTS, json!("UPLOAD_CAP")));
    a.clock.advance(chrono::Duration::days(1));
    assert_eq!(a.upload(Some(&t), upload_body(s.id.0, &images(1, 6))).await.status, StatusCode::ACCEPTED);
}

fn synth_big() -> Vec<u8> {
    heritage_ingest::synth::jpeg(heritage_ingest::synth::Kind::Noisy, 1, 256, 256)
}

#[tokio::test]
async fn completed_site_refuses_contributions() {
    let a = app();
    let s = a.site("Finished");
    let uri = format!("/api/admin/sites/{}/complete", s.id);
    let r = a.post_json(&uri, Some(ADMIN), json!({})).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.json()["completed"], true);
    assert_eq!(a.post_json(&uri, Some(ADMIN), json!({})).await.status, StatusCode::CONFLICT);
    let r = a.upload(Some(&user_token(1)), upload_body(s.id.0, &images(2, 7))).await;
    assert_eq!((r.status, r.json()["code"].clone()), (StatusCode::CONFLICT, json!("SITE_COMPLETED")));
}

#[tokio::test]
async fn site_and_highres_requests() {
    let a = app();
    let s = a.site("Requested");
    let t = user_token(1);
    let ok = json!({"name": "Modhera Sun Temple", "location": "Gujarat", "note": "stepwell too"});
    assert_eq!(a.post_json("/api/requests/site", Some(&t), ok.clone()).await.status, StatusCode::ACCEPTED);
    assert_eq!(a.post_json("/api/requests/site", None, ok).await.status, StatusCode::UNAUTHORIZED);
    let empty = a.post_json("/api/requests/site", Some(&t), json!({"name": " "})).await;
    assert_eq!(empty.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(a.store.read(|tx| tx.sites()).unwrap().len() == 1, "no site auto-created");

    let hr = |site: i64, contact: &str| json!({"site_id": site, "contact": contact});
    assert_eq!(
        a.post_json("/api/requests/highres", Some(&t), hr(s.id.0, "me@example.org")).await.status,
        StatusCode::ACCEPTED
    );
    assert_eq!(a.post_json("/api/requests/highres", Some(&t), hr(999, "x")).await.status, StatusCode::NOT_FOUND);
    assert_eq!(
        a.post_json("/api/requests/highres", Some(&t), hr(s.id.0, "")).await.status,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    let stored = a.store.read(|tx| tx.requests("highres")).unwrap();
    assert_eq!(stored.len(), 1);
    assert_eq!(stored[0].body["raw_artifact"], serde_json::Value::Null);
}

#[tokio::test]
async fn admin_endpoints_need_admin_token() {
    let a = app();
    let s = a.site("Admin");
    assert_eq!(a.get("/api/admin/moderation").await.status, StatusCode::UNAUTHORIZED);
    assert_eq!(a.get_auth("/api/admin/moderation", "nonsense").await.status, StatusCode::UNAUTHORIZED);
    assert_eq!(a.get_auth("/api/admin/moderation", &user_token(1)).await.status, StatusCode::FORBIDDEN);
    assert_eq!(a.get_auth("/api/admin/moderation", ADMIN).await.status, StatusCode::OK);
    let r = a.post_json("/api/admin/runs", Some(&user_token(1)), json!({"site_id": s.id.0})).await;
    assert_eq!(r.status, StatusCode::FORBIDDEN);
    let r = a.post_json("/api/admin/runs", Some(ADMIN), json!({"site_id": s.id.0})).await;
    assert_eq!(r.status, StatusCode::ACCEPTED);
    assert_eq!(r.json()["state"], "QUEUED");
    let again = a.post_json("/api/admin/runs", Some(ADMIN), json!({"site_id": s.id.0})).await;
    assert_eq!((again.status, again.json()["code"].clone()), (StatusCode::CONFLICT, json!("RUN_ALREADY_ACTIVE")));
}

#[tokio::test]
async fn inconclusive_image_goes_to_moderation_and_never_into_a_run() {
    let imgs = images(22, 8);
    let doubtful = heritage_ingest::sha256_hex(&imgs[0].1);
    let rejected_digest = heritage_ingest::sha256_hex(&imgs[1].1);
    let a = app_with(|c| {
        c.safety.scores.insert(doubtful.clone(), 0.5);
        c.safety.scores.insert(rejected_digest.clone(), 0.5);
    });
    let s = a.site("Moderation");
    let r = a.upload(Some(&user_token(1)), upload_body(s.id.0, &imgs)).await;
    assert_eq!(r.json()["accepted_count"], 22);
    a.drain().await;

    let queue = a.get_auth("/api/admin/moderation", ADMIN).await.json();
    let items = queue["items"].as_array().unwrap();
    assert_eq!(items.len(), 2);
    let doubtful_id = items.iter().find(|i| i["filename"] == "IMG_0000.jpg").unwrap()["id"].as_i64().unwrap();
    let reject_id = items.iter().find(|i| i["filename"] == "IMG_0001.jpg").unwrap()["id"].as_i64().unwrap();

    let bad = a.post_json(&format!("/api/admin/moderation/{reject_id}"), Some(ADMIN), json!({"action": "ban"})).await;
    assert_eq!(bad.status, StatusCode::UNPROCESSABLE_ENTITY);
    let r = a.post_json(&format!("/api/admin/moderation/{reject_id}"), Some(ADMIN), json!({"action": "reject"})).await;
    assert_eq!(r.json()["safety"], "UNSAFE");
    let twice = a.post_json(&format!("/api/admin/moderation/{reject_id}"), Some(ADMIN), json!({"action": "reject"})).await;
    assert_eq!(twice.status, StatusCode::CONFLICT);

    // a run before approval leaves the doubtful image out
    let run = a.post_json("/api/admin/runs", Some(ADMIN), json!({"site_id": s.id.0})).await.json();
    a.drain().await;
    let first = a.store.run(heritage_core::RunId(run["run_id"].as_i64().unwrap())).unwrap();
    assert_eq!(first.state, RunState::Published, "{:?}", first.error);
    assert_eq!(first.image_ids_used.len(), 20);

    let r = a.post_json(&format!("/api/admin/moderation/{doubtful_id}"), Some(ADMIN), json!({"action": "approve"})).await;
    assert_eq!(r.json()["safety"], "SAFE");
    a.drain().await;
    let img = a.store.image(heritage_core::ImageId(doubtful_id)).unwrap();
    assert_eq!((img.safety, img.label), (SafetyState::Safe, ImageLabel::Good));
    let run = a.post_json("/api/admin/runs", Some(ADMIN), json!({"site_id": s.id.0})).await.json();
    a.drain().await;
    let second = a.store.run(heritage_core::RunId(run["run_id"].as_i64().unwrap())).unwrap();
    assert_eq!(second.image_ids_used.len(), 21);
    assert!(second.image_ids_used.contains(&heritage_core::ImageId(doubtful_id)));

    for r in a.store.read(|tx| tx.runs()).unwrap() {
        assert!(!r.image_ids_used.contains(&heritage_core::ImageId(reject_id)));
    }
}
