mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use chrono::Duration;
use common::env;
use heritage_core::{NewImage, Resolution, RunState};
use heritage_orchestrator::periodic::{PeriodicSpec, ARCHIVE, BACKUP, PRUNE};
use heritage_orchestrator::{request_run, JobKind, Scheduler};
use serde_json::json;

fn periodic_jobs(w: &heritage_orchestrator::Worker) -> Vec<String> {
    w.queue
        .all_jobs()
        .unwrap()
        .into_iter()
        .filter(|j| j.kind == JobKind::Periodic)
        .map(|j| j.payload["name"].as_str().unwrap().to_owned())
        .collect()
}

#[test]
fn due_task_fires_once_across_workers() {
    let e = env();
    let (a, b) = (e.worker("a"), e.worker("b"));
    let sa = a.scheduler.clone().unwrap();
    let sb = b.scheduler.clone().unwrap();
    let first = sa.tick("a").unwrap();
    assert_eq!(first, [PRUNE, ARCHIVE, BACKUP]);
    assert!(sb.tick("b").unwrap().is_empty());
    assert!(sa.tick("a").unwrap().is_empty());

    // several missed intervals collapse into one firing
    e.advance(5 * 86_400);
    let threads: Vec<_> = [sa, sb]
        .into_iter()
        .enumerate()
        .map(|(i, s)| std::thread::spawn(move || s.tick(&format!("t{i}")).unwrap().len()))
        .collect();
    let fired: usize = threads.into_iter().map(|t| t.join().unwrap()).sum();
    assert_eq!(fired, 3);
    let mut names = periodic_jobs(&a);
    names.sort();
    assert_eq!(names, ["archive", "archive", "backup", "backup", "prune", "prune"]);
}

#[test]
fn custom_task_runs_once_per_interval() {
    let e = env();
    let count = Arc::new(AtomicUsize::new(0));
    let c = count.clone();
    let mut s = Scheduler::new(e.store.clone(), e.config.clone());
    s.schedule_periodic(PeriodicSpec {
        name: "count".into(),
        interval: Duration::seconds(120),
        task: Arc::new(move |_| {
            c.fetch_add(1, Ordering::SeqCst);
            Ok(json!({}))
        }),
    })
    .unwrap();
    let too_fast = PeriodicSpec {
        name: "fast".into(),
        interval: Duration::seconds(59),
        task: Arc::new(|_| Ok(json!({}))),
    };
    assert!(s.schedule_periodic(too_fast).is_err());
    let mut w = e.worker("w");
    w.scheduler = Some(Arc::new(s));
    for _ in 0..10 {
        w.run_until_idle(10).unwrap();
        e.advance(30);
    }
    // 300 s elapsed: fires at 0, 120 and 240
    assert_eq!(count.load(Ordering::SeqCst), 3);
    let log = e.store.read(|tx| tx.task_log("count")).unwrap();
    assert_eq!(log.len(), 3);
}

#[test]
fn prune_removes_only_stale_unfinished_uploads() {
    let e = env();
    let site = e.site("Prune");
    let who = e.store.upsert_contributor("p@example.org", "P").unwrap();
    let finished = e.upload(&site, 1, 2, 1);
    let path = e.image_path("orphan");
    std::fs::write(&path, b"partial").unwrap();
    let orphan = e
        .store
        .write(|tx| {
            let c = tx.begin_contribution(site.id, who.id)?;
            tx.add_image(
                c.id,
                NewImage {
                    filename: "orphan.jpg".into(),
                    stored_path: path.display().to_string(),
                    byte_size: 7,
                    width: 0,
                    height: 0,
                    exif_present: false,
                    sha256: String::new(),
                },
            )
        })
        .unwrap();
    let w = e.worker("w");
    w.run_until_idle(10).unwrap();
    assert!(e.store.image(orphan.id).is_ok(), "too fresh to prune");

    e.advance(8 * 86_400);
    w.run_until_idle(10).unwrap();
    assert!(e.store.image(orphan.id).is_err());
    assert!(!path.exists());
    for id in finished {
        assert!(e.store.image(id).is_ok());
    }
    let log = e.store.read(|tx| tx.task_log(PRUNE)).unwrap();
    assert_eq!(log.last().unwrap().detail["image_ids"], json!([orphan.id.0]));
}

#[test]
fn archive_moves_superseded_runs_only() {
    let e = env();
    let site = e.site("Archive");
    e.good_images(&site, 1, 20, 3);
    let w = e.worker("w");
    let old = request_run(&e.store, &e.config, site.id).unwrap().id;
    w.run_until_idle(10).unwrap();
    e.advance(100 * 86_400);
    let new = request_run(&e.store, &e.config, site.id).unwrap().id;
    w.run_until_idle(10).unwrap();
    let old_rec = e.store.run(old).unwrap();
    assert_eq!(old_rec.state, RunState::Published);
    let old_path = std::path::PathBuf::from(old_rec.artifact_path.clone().unwrap());
    assert!(old_path.exists());

    e.advance(200 * 86_400);
    w.run_until_idle(10).unwrap();
    assert_eq!(e.store.run(old).unwrap().state, RunState::Published, "not old enough yet");

    e.advance(100 * 86_400);
    w.run_until_idle(10).unwrap();
    let archived = e.store.run(old).unwrap();
    assert_eq!(archived.state, RunState::Archived);
    let moved = std::path::PathBuf::from(archived.artifact_path.unwrap());
    assert!(moved.starts_with(&e.config.archive.root));
    assert!(moved.exists() && !old_path.exists());
    assert_eq!(
        heritage_orchestrator::backend::sha256_hex(&std::fs::read(&moved).unwrap()),
        archived.artifact_sha256.unwrap()
    );
    let resolution = e.store.read(|tx| tx.resolve_ark(archived.ark.as_ref().unwrap())).unwrap();
    assert!(matches!(resolution, Resolution::Gone(_)));

    let latest = e.store.run(new).unwrap();
    assert_eq!(latest.state, RunState::Published, "the newest publication stays live");
    let resolution = e.store.read(|tx| tx.resolve_ark(latest.ark.as_ref().unwrap())).unwrap();
    assert!(matches!(resolution, Resolution::Live(_)));
}

#[test]
fn backup_writes_a_readable_copy() {
    let e = env();
    let site = e.site("Backup");
    let w = e.worker("w");
    w.run_until_idle(10).unwrap();
    let log = e.store.read(|tx| tx.task_log(BACKUP)).unwrap();
    let path = log[0].detail["path"].as_str().unwrap().to_owned();
    let copy = heritage_core::Store::open(&path, Arc::new(e.clock.clone())).unwrap();
    assert_eq!(copy.site(site.id).unwrap().meta.name, "Backup");
}
