mod common;

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration as StdDuration;

use common::{env, env_with, Env};
use heritage_core::{RunId, RunState, SiteStatus, StageStatus};
use heritage_mesh::read_glb;
use heritage_orchestrator::backend::synthetic_vertices;
use heritage_orchestrator::pipeline::{ARTIFACT_NAME, INSUFFICIENT_INPUT, STAGE_FAILED};
use heritage_orchestrator::plan::plan_stages;
use heritage_orchestrator::preprocess::preprocess_payload;
use heritage_orchestrator::{request_run, spawn_pool, JobKind, JobState, Step, SubprocessBackend, STAGES};

fn publish(e: &Env, images: usize, seed: u64) -> heritage_core::RunRecord {
    let site = e.site(&format!("Temple {seed}"));
    e.good_images(&site, 2, images / 2, seed);
    let run = request_run(&e.store, &e.config, site.id).unwrap();
    e.worker("w1").run_until_idle(10).unwrap();
    e.store.run(run.id).unwrap()
}

#[test]
fn synthetic_run_publishes_artifact_and_ark() {
    let e = env();
    let r = publish(&e, 20, 1);
    assert_eq!(r.state, RunState::Published, "{:?}", r.error);
    let path = r.artifact_path.clone().unwrap();
    assert!(path.ends_with(ARTIFACT_NAME));
    let glb = std::fs::read(&path).unwrap();
    assert_eq!(heritage_orchestrator::backend::sha256_hex(&glb), r.artifact_sha256.clone().unwrap());
    let contents = read_glb(&glb).unwrap();
    assert!(!contents.indices.is_empty());
    assert!(contents.texture_jpeg.is_some());

    let report = r.report.compression.unwrap();
    assert_eq!(report.vertices_before, synthetic_vertices(20));
    assert!(report.vertices_after < report.vertices_before);
    assert_eq!(r.report.registered_views.unwrap().registered, 20);

    let ark = r.ark.clone().unwrap();
    assert!(ark.is_valid());
    let entry = e.store.read(|tx| tx.ark_entry(&ark)).unwrap();
    assert_eq!(entry.run_id, Some(r.id));
    let site = e.store.site(r.site_id).unwrap();
    assert_eq!(entry.target.as_deref(), Some(format!("/sites/{}", site.verbose_id).as_str()));
    let meta: serde_json::Value = serde_json::from_str(&entry.metadata).unwrap();
    assert_eq!(meta["contributor_count"], 2);
    assert_eq!(meta["run_id"], r.id.0);
    assert_eq!(meta["license"], "CC BY-NC-ND 4.0");
    assert_eq!(site.status, SiteStatus::Live);
}

#[test]
fn same_inputs_give_identical_artifacts() {
    let a = publish(&env(), 20, 7);
    let b = publish(&env(), 20, 7);
    let c = publish(&env(), 20, 8);
    assert_eq!(a.artifact_sha256, b.artifact_sha256);
    assert_ne!(a.artifact_sha256, c.artifact_sha256);
}

#[test]
fn no_good_images_fails_before_any_stage() {
    let e = env();
    let site = e.site("Empty");
    e.upload(&site, 1, 3, 2);
    let run = request_run(&e.store, &e.config, site.id).unwrap();
    let steps = e.worker("w").run_until_idle(10).unwrap();
    let r = e.store.run(run.id).unwrap();
    assert_eq!(r.state, RunState::Failed, "{steps:#?}");
    assert!(r.error.as_deref().unwrap().starts_with(INSUFFICIENT_INPUT), "{:?}", r.error);
    assert!(r.stage_log.is_empty());
    assert!(r.ark.is_none());
    assert_eq!(e.store.site(site.id).unwrap().status, SiteStatus::Live);
}

#[test]
fn failing_subprocess_stage_fails_the_run() {
    let e = env();
    let site = e.site("Subprocess");
    e.good_images(&site, 1, 20, 3);
    let mut backend = SubprocessBackend::from_config(&e.config);
    for (name, _) in STAGES {
        let cmd = if name == "DepthMapEstimation" { "echo depth >&2; exit 3" } else { "touch {output_dir}/done" };
        backend = backend.with_stage(name, cmd, 30);
    }
    let run = request_run(&e.store, &e.config, site.id).unwrap();
    e.worker_with("w", Arc::new(backend)).run_until_idle(5).unwrap();
    let r = e.store.run(run.id).unwrap();
    assert_eq!(r.state, RunState::Failed);
    let err = r.error.unwrap();
    assert!(err.starts_with(&format!("{STAGE_FAILED}(DepthMapEstimation, EXIT_3)")), "{err}");
    let last = r.stage_log.last().unwrap();
    assert_eq!((last.stage.as_str(), last.status), ("DepthMapEstimation", StageStatus::Failed));
    assert!(r.stage_log[..r.stage_log.len() - 1].iter().all(|s| s.status == StageStatus::Ok));
    assert!(e.store.read(|tx| tx.ark_entries()).unwrap().is_empty());
    assert_eq!(e.store.site(site.id).unwrap().status, SiteStatus::Error);
}

#[test]
fn seventeen_images_register_sixteen() {
    let e = env_with(|c| c.run.min_images = 10);
    let site = e.site("Seventeen");
    e.good_images(&site, 1, 17, 4);
    let run = request_run(&e.store, &e.config, site.id).unwrap();
    e.worker("w").run_until_idle(5).unwrap();
    let r = e.store.run(run.id).unwrap();
    assert_eq!(r.state, RunState::Published);
    let v = r.report.registered_views.unwrap();
    assert_eq!((v.registered, v.total), (16, 17));
    assert_eq!(v.to_string(), "16 / 17");
}

#[test]
fn redelivered_job_changes_nothing() {
    let e = env();
    let r = publish(&e, 20, 5);
    let before = e.store.export_state().unwrap();
    let w = e.worker("late");
    let job = w.queue.all_jobs().unwrap().into_iter().find(|j| j.kind == JobKind::ExecuteRun).unwrap();
    assert_eq!(job.state, JobState::Done);
    for _ in 0..2 {
        let d = w.handle(&job);
        assert!(matches!(d, heritage_orchestrator::Disposition::Done(_)), "{d:?}");
    }
    assert_eq!(e.store.export_state().unwrap(), before);
    assert_eq!(e.store.read(|tx| tx.ark_entries()).unwrap().len(), 1);
    let again = request_run(&e.store, &e.config, r.site_id).unwrap();
    assert_ne!(again.id, r.id, "a published run does not block a new one");
}

#[test]
fn stage_log_is_a_prefix_of_the_plan() {
    let e = env();
    let r = publish(&e, 20, 6);
    let plan = plan_stages(&e.store.site(r.site_id).unwrap());
    let enabled: Vec<_> = plan.stages.iter().filter(|s| s.enabled).map(|s| s.name.clone()).collect();
    let logged: Vec<_> = r.stage_log.iter().map(|s| s.stage.clone()).collect();
    assert_eq!(logged, enabled);
    let states: Vec<_> = r.history.iter().map(|h| h.to).collect();
    assert_eq!(
        states,
        [RunState::Preprocessing, RunState::Reconstructing, RunState::Postprocessing, RunState::Published]
    );
}

#[test]
fn every_published_run_has_exactly_one_bound_ark() {
    let e = env_with(|c| c.run.min_images = 4);
    let mut runs = Vec::new();
    for s in 0..3u64 {
        let site = e.site(&format!("Site {s}"));
        e.good_images(&site, 1, 4, 20 + s);
        runs.push(request_run(&e.store, &e.config, site.id).unwrap().id);
        e.good_images(&site, 1, 1, 30 + s);
    }
    e.worker("w").run_until_idle(20).unwrap();
    let arks = e.store.read(|tx| tx.ark_entries()).unwrap();
    for id in &runs {
        let r = e.store.run(*id).unwrap();
        assert_eq!(r.state, RunState::Published);
        let bound: Vec<_> = arks.iter().filter(|a| a.run_id == Some(*id)).collect();
        assert_eq!(bound.len(), 1);
        assert_eq!(Some(&bound[0].ark), r.ark.as_ref());
    }
    assert_eq!(arks.len(), runs.len());
}

#[test]
fn busy_site_is_released_until_the_lease_lapses() {
    let e = env();
    let site = e.site("Contested");
    e.good_images(&site, 1, 20, 9);
    let lease = format!("site:{}", site.id);
    let ttl = chrono::Duration::seconds(e.config.queue.visibility_timeout as i64);
    assert!(e.store.write(|tx| tx.try_acquire_lease(&lease, "elsewhere", ttl)).unwrap());
    let run = request_run(&e.store, &e.config, site.id).unwrap();
    let w = e.worker("w");
    let step = std::iter::from_fn(|| w.step().unwrap())
        .find(|s| !matches!(s, Step::Acked(j, _) if j.kind == JobKind::Periodic))
        .unwrap();
    assert!(matches!(step, Step::Released(_)), "{step:?}");
    assert_eq!(e.store.run(run.id).unwrap().state, RunState::Queued);
    let job = w.queue.all_jobs().unwrap().into_iter().find(|j| j.kind == JobKind::ExecuteRun).unwrap();
    assert_eq!(job.attempts, 0, "a busy site costs no attempt");
    e.advance(e.config.queue.visibility_timeout as i64 + 1);
    w.run_until_idle(5).unwrap();
    assert_eq!(e.store.run(run.id).unwrap().state, RunState::Published);
}

#[test]
fn pool_runs_sites_in_parallel() {
    let e = env();
    let mut ids: Vec<RunId> = Vec::new();
    for s in 0..3u64 {
        let site = e.site(&format!("Parallel {s}"));
        e.good_images(&site, 1, 20, 40 + s);
        ids.push(request_run(&e.store, &e.config, site.id).unwrap().id);
    }
    let stop = Arc::new(AtomicBool::new(false));
    let workers = (0..3).map(|i| Arc::new(e.worker(&format!("p{i}")))).collect();
    let handles = spawn_pool(workers, stop.clone(), StdDuration::from_millis(10));
    let deadline = std::time::Instant::now() + StdDuration::from_secs(120);
    while ids.iter().any(|&id| !e.store.run(id).unwrap().state.is_terminal()) {
        assert!(std::time::Instant::now() < deadline, "pool did not finish");
        std::thread::sleep(StdDuration::from_millis(20));
    }
    stop.store(true, Ordering::Relaxed);
    for h in handles {
        h.join().unwrap();
    }
    for id in ids {
        assert_eq!(e.store.run(id).unwrap().state, RunState::Published);
    }
}

#[test]
fn preprocess_labels_uploads_and_auto_triggers_a_run() {
    let e = env_with(|c| c.run.auto_trigger_image_count = 20);
    let site = e.site("Auto");
    let ids = e.upload(&site, 1, 20, 11);
    let w = e.worker("w");
    for id in &ids {
        w.queue.enqueue(JobKind::PreprocessImage, preprocess_payload(*id)).unwrap();
    }
    w.run_until_idle(50).unwrap();
    for id in &ids {
        let img = e.store.image(*id).unwrap();
        assert_eq!(img.label, heritage_core::ImageLabel::Good, "{:?} {:?}", img.safety, img.iqa);
    }
    let runs = e.store.read(|tx| tx.runs_for_site(site.id)).unwrap();
    assert_eq!(runs.len(), 1);
    assert_eq!(runs[0].state, RunState::Published);
    assert_eq!(runs[0].image_ids_used.len(), 20);
}

#[test]
fn stage_timeout_retries_then_fails() {
    let e = env_with(|c| c.queue.max_attempts = 2);
    let site = e.site("Slow");
    e.good_images(&site, 1, 20, 12);
    let mut backend = SubprocessBackend::from_config(&e.config);
    for (name, _) in STAGES {
        let (cmd, t) = if name == "FeatureExtraction" { ("sleep 5", 1) } else { ("true", 30) };
        backend = backend.with_stage(name, cmd, t);
    }
    let run = request_run(&e.store, &e.config, site.id).unwrap();
    let w = e.worker_with("w", Arc::new(backend));
    let first = w.run_until_idle(10).unwrap();
    assert!(
        first.iter().any(|s| matches!(s, Step::Retried(j, _) if j.kind == JobKind::ExecuteRun)),
        "{first:?}"
    );
    let mid = e.store.run(run.id).unwrap();
    assert_eq!(mid.state, RunState::Reconstructing);
    assert_eq!(mid.stage_log.last().unwrap().status, StageStatus::TimedOut);
    e.advance(30);
    w.run_until_idle(10).unwrap();
    let r = e.store.run(run.id).unwrap();
    assert_eq!(r.state, RunState::Failed);
    assert_eq!(r.error.as_deref(), Some("TIMEOUT(FeatureExtraction)"));
}

#[test]
fn moderation_decisions() {
    use heritage_core::{Error, SafetyState};
    use heritage_orchestrator::{moderate, ModerationAction};
    let e = env();
    let site = e.site("Moderated");
    let ids = e.upload(&site, 1, 3, 13);
    e.store
        .write(|tx| {
            for &id in &ids[..2] {
                tx.set_image_safety(id, SafetyState::Moderation)?;
            }
            Ok::<_, Error>(())
        })
        .unwrap();
    let approved = moderate(&e.store, &e.config, ids[0], "approve".parse().unwrap()).unwrap();
    assert_eq!(approved.safety, SafetyState::Safe);
    let rejected = moderate(&e.store, &e.config, ids[1], ModerationAction::Reject).unwrap();
    assert_eq!(rejected.safety, SafetyState::Unsafe);
    assert!(matches!(
        moderate(&e.store, &e.config, ids[2], ModerationAction::Approve),
        Err(Error::Conflict(_))
    ));
    assert!("maybe".parse::<ModerationAction>().is_err());

    // approval queues quality labeling
    let w = e.worker("w");
    w.run_until_idle(10).unwrap();
    assert_eq!(e.store.image(ids[0]).unwrap().label, heritage_core::ImageLabel::Good);
    assert_eq!(e.store.image(ids[1]).unwrap().label, heritage_core::ImageLabel::Unlabeled);
}
