//! Reconstruction-run execution.
//!
//! Every step persists its result before the next begins, so a run picked
//! up again after a crash resumes at the first stage not logged `Ok`.
//! Writes are fenced by the per-site lease: a worker that lost it aborts
//! instead of interleaving with the new holder.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use chrono::Duration;
use heritage_core::ark::mint;
use heritage_core::{
    Config, Error, ImageId, RunEvent, RunId, RunRecord, RunState, SiteRecord, SiteStatus, StageLogEntry, StageStatus,
    Store, Tx,
};
use heritage_mesh::{parse_obj, postprocess, GlbOptions, PostprocessOptions, TriangleMesh};
use serde_json::json;

use crate::backend::{find_mesh, sha256_hex, Backend, StageContext, StageOutcome};
use crate::plan::{plan_stages, StagePlan};

pub const INSUFFICIENT_INPUT: &str = "INSUFFICIENT_INPUT";
pub const INPUT_UNAVAILABLE: &str = "INPUT_UNAVAILABLE";
pub const STAGE_FAILED: &str = "STAGE_FAILED";
pub const TIMEOUT: &str = "TIMEOUT";
pub const POSTPROCESS_FAILED: &str = "POSTPROCESS_FAILED";
pub const ARTIFACT_NAME: &str = "model.glb";

/// Filesystem layout under `storage.root`.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
    pub archive_root: PathBuf,
    pub backup_root: PathBuf,
}

impl Layout {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            root: cfg.storage.root.clone(),
            archive_root: cfg.archive.root.clone(),
            backup_root: cfg.archive.backup_root.clone(),
        }
    }

    pub fn images_dir(&self, site: heritage_core::SiteId) -> PathBuf {
        self.root.join("images").join(format!("site-{site}"))
    }

    pub fn run_dir(&self, run: RunId) -> PathBuf {
        self.root.join("runs").join(format!("run-{run}"))
    }

    pub fn artifact_dir(&self, run: RunId) -> PathBuf {
        self.root.join("artifacts").join(format!("run-{run}"))
    }

    pub fn archived_dir(&self, run: RunId) -> PathBuf {
        self.archive_root.join(format!("run-{run}"))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error(transparent)]
    Store(#[from] Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("stage {stage} timed out")]
    StageTimedOut { stage: String },
    #[error("site lease lost to another worker")]
    LeaseLost,
}

impl ExecError {
    /// Errors worth another delivery of the job.
    pub fn retryable(&self) -> bool {
        !matches!(self, ExecError::Store(Error::NotFound { .. }))
    }
}

#[derive(Debug, Clone)]
pub enum ExecOutcome {
    Published(RunRecord),
    Failed(RunRecord),
    /// Already PUBLISHED, FAILED or ARCHIVED; nothing was done.
    Unchanged(RunRecord),
    /// Another worker holds the site.
    Busy,
}

pub struct Executor {
    pub store: Store,
    pub config: Arc<Config>,
    pub backend: Arc<dyn Backend>,
    pub layout: Layout,
}

/// A site drops to ERROR only from PROCESSING; a run that failed before
/// touching it leaves it as it was.
fn mark_site_error(tx: &Tx<'_>, site: heritage_core::SiteId) -> Result<(), Error> {
    if tx.site(site)?.status == SiteStatus::Processing {
        tx.set_site_status(site, SiteStatus::Error)?;
    }
    Ok(())
}

fn site_lease(site: heritage_core::SiteId) -> String {
    format!("site:{site}")
}

/// Replaces `dst` with a copy of every file directly inside `src`.
fn copy_flat(src: &Path, dst: &Path) -> std::io::Result<u64> {
    if dst.exists() {
        fs::remove_dir_all(dst)?;
    }
    fs::create_dir_all(dst)?;
    let mut total = 0;
    for e in fs::read_dir(src)? {
        let e = e?;
        if e.file_type()?.is_file() {
            total += fs::copy(e.path(), dst.join(e.file_name()))?;
        }
    }
    Ok(total)
}

/// Writes through a temporary name so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)
}

impl Executor {
    pub fn new(store: Store, config: Arc<Config>, backend: Arc<dyn Backend>) -> Self {
        let layout = Layout::from_config(&config);
        Self {
            store,
            config,
            backend,
            layout,
        }
    }

    fn lease_ttl(&self) -> Duration {
        Duration::seconds(self.config.queue.visibility_timeout.max(1) as i64)
    }

    /// Runs `f` in a write transaction that first renews the site lease.
    fn fenced<T>(&self, site: heritage_core::SiteId, owner: &str, f: impl FnOnce(&Tx<'_>) -> Result<T, Error>) -> Result<T, ExecError> {
        self.store.write(|tx| {
            if !tx.try_acquire_lease(&site_lease(site), owner, self.lease_ttl())? {
                return Ok(Err(ExecError::LeaseLost));
            }
            f(tx).map(Ok)
        })?
    }

    fn update_run(
        &self,
        run: &RunRecord,
        owner: &str,
        f: impl FnOnce(&Tx<'_>, &mut RunRecord) -> Result<(), Error>,
    ) -> Result<RunRecord, ExecError> {
        self.fenced(run.site_id, owner, |tx| {
            let mut r = tx.run(run.id)?;
            f(tx, &mut r)?;
            tx.put_run(&r)?;
            Ok(r)
        })
    }

    fn fail(&self, run: &RunRecord, owner: &str, message: String) -> Result<ExecOutcome, ExecError> {
        let r = self.update_run(run, owner, |tx, r| {
            r.apply(RunEvent::Fail { message }, tx.now())?;
            mark_site_error(tx, r.site_id)?;
            Ok(())
        })?;
        self.release(&r, owner)?;
        Ok(ExecOutcome::Failed(r))
    }

    fn release(&self, run: &RunRecord, owner: &str) -> Result<(), ExecError> {
        self.store.write(|tx| tx.release_lease(&site_lease(run.site_id), owner))?;
        Ok(())
    }

    /// Fails a run from outside the executor (dead-lettered job, final
    /// timeout). A terminal run is left alone.
    pub fn fail_run(&self, id: RunId, message: &str) -> Result<Option<RunRecord>, Error> {
        self.store.write(|tx| {
            let mut r = tx.run(id)?;
            if r.state.is_terminal() {
                return Ok(None);
            }
            r.apply(RunEvent::Fail { message: message.to_owned() }, tx.now())?;
            tx.put_run(&r)?;
            mark_site_error(tx, r.site_id)?;
            Ok(Some(r))
        })
    }

    fn plan_path(&self, run: RunId) -> PathBuf {
        self.layout.run_dir(run).join("plan.json")
    }

    fn load_plan(&self, run: RunId) -> Result<StagePlan, ExecError> {
        let bytes = fs::read(self.plan_path(run))?;
        serde_json::from_slice(&bytes).map_err(|e| ExecError::Store(e.into()))
    }

    /// Drives a run from wherever it stands to a terminal state.
    /// `heartbeat` is called between stages so the caller can extend its
    /// job claim.
    pub fn execute_run(&self, id: RunId, owner: &str, heartbeat: &mut dyn FnMut()) -> Result<ExecOutcome, ExecError> {
        let res = self.drive(id, owner, heartbeat);
        if let Err(e) = &res {
            if !matches!(e, ExecError::LeaseLost) {
                if let Ok(run) = self.store.run(id) {
                    let _ = self.release(&run, owner);
                }
            }
        }
        res
    }

    fn drive(&self, id: RunId, owner: &str, heartbeat: &mut dyn FnMut()) -> Result<ExecOutcome, ExecError> {
        let mut run = self.store.run(id)?;
        if run.state.is_terminal() {
            return Ok(ExecOutcome::Unchanged(run));
        }
        let acquired = self
            .store
            .write(|tx| tx.try_acquire_lease(&site_lease(run.site_id), owner, self.lease_ttl()))?;
        if !acquired {
            return Ok(ExecOutcome::Busy);
        }
        let site = self.store.site(run.site_id)?;

        if run.state == RunState::Queued {
            match self.start(&run, owner)? {
                Ok(r) => run = r,
                Err(failed) => return Ok(failed),
            }
        }
        if run.state == RunState::Preprocessing {
            if let Err(missing) = self.assemble(&run, &site) {
                return self.fail(&run, owner, format!("{INPUT_UNAVAILABLE}: {missing}"));
            }
            run = self.update_run(&run, owner, |tx, r| r.apply(RunEvent::StartReconstruct, tx.now()))?;
        }
        if run.state == RunState::Reconstructing {
            match self.reconstruct(&run, owner, heartbeat)? {
                Ok(r) => run = r,
                Err(failed) => return Ok(failed),
            }
        }
        if run.state == RunState::Postprocessing {
            heartbeat();
            return self.finish(&run, &site, owner);
        }
        Ok(ExecOutcome::Unchanged(run))
    }

    /// QUEUED → PREPROCESSING with the image set fixed, or FAILED when the
    /// site lacks enough GOOD images.
    fn start(&self, run: &RunRecord, owner: &str) -> Result<Result<RunRecord, ExecOutcome>, ExecError> {
        let min = self.config.run.min_images;
        let mut short = None;
        let r = self.update_run(run, owner, |tx, r| {
            let good = tx.good_images_for_site(r.site_id)?;
            if good.len() < min.max(1) {
                let msg = format!("{INSUFFICIENT_INPUT}: {} GOOD images, {} required", good.len(), min.max(1));
                short = Some(msg.clone());
                mark_site_error(tx, r.site_id)?;
                return r.apply(RunEvent::Fail { message: msg }, tx.now());
            }
            let mut contributions: Vec<_> = good.iter().map(|i| i.contribution_id).collect();
            contributions.sort();
            contributions.dedup();
            r.image_ids_used = good.iter().map(|i| i.id).collect();
            r.contribution_ids_used = contributions;
            r.apply(RunEvent::StartPreprocess, tx.now())?;
            tx.set_site_status(r.site_id, SiteStatus::Processing)?;
            Ok(())
        })?;
        if short.is_some() {
            self.release(&r, owner)?;
            return Ok(Err(ExecOutcome::Failed(r)));
        }
        Ok(Ok(r))
    }

    /// Copies the run's images into its workspace and freezes the plan.
    fn assemble(&self, run: &RunRecord, site: &SiteRecord) -> Result<(), String> {
        let dir = self.layout.run_dir(run.id).join("images");
        fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        for &img in &run.image_ids_used {
            let rec = self.store.image(img).map_err(|e| e.to_string())?;
            let dst = dir.join(format!("{img}.jpg"));
            fs::copy(&rec.stored_path, &dst).map_err(|e| format!("image {img} at {}: {e}", rec.stored_path))?;
        }
        let plan = plan_stages(site);
        let text = serde_json::to_vec_pretty(&plan).map_err(|e| e.to_string())?;
        write_atomic(&self.plan_path(run.id), &text).map_err(|e| e.to_string())
    }

    fn image_digests(&self, ids: &[ImageId]) -> Result<Vec<String>, Error> {
        let mut d = ids
            .iter()
            .map(|&i| self.store.image(i).map(|r| r.sha256))
            .collect::<Result<Vec<_>, _>>()?;
        d.sort();
        Ok(d)
    }

    fn reconstruct(
        &self,
        run: &RunRecord,
        owner: &str,
        heartbeat: &mut dyn FnMut(),
    ) -> Result<Result<RunRecord, ExecOutcome>, ExecError> {
        let plan = self.load_plan(run.id)?;
        let digests = self.image_digests(&run.image_ids_used)?;
        let run_dir = self.layout.run_dir(run.id);
        let images_dir = run_dir.join("images");
        let mut run = run.clone();
        let mut input = images_dir.clone();
        for stage in plan.stages.iter().filter(|s| s.enabled) {
            let out = run_dir.join(&stage.name);
            if run.stage_done(&stage.name) {
                input = out;
                continue;
            }
            heartbeat();
            if out.exists() {
                fs::remove_dir_all(&out)?;
            }
            fs::create_dir_all(&out)?;
            let ctx = StageContext {
                run_id: run.id,
                stage,
                images_dir: &images_dir,
                input_dir: &input,
                output_dir: &out,
                image_digests: &digests,
                seed: self.config.run.seed,
            };
            let t0 = Instant::now();
            let outcome = self.backend.run_stage(&ctx);
            let ms = t0.elapsed().as_millis() as u64;
            let (status, message) = match &outcome {
                StageOutcome::Ok { message, .. } => (StageStatus::Ok, message.clone()),
                StageOutcome::Failed { code, message } => (StageStatus::Failed, format!("{code}: {message}")),
                StageOutcome::TimedOut { after } => (StageStatus::TimedOut, format!("after {} ms", after.as_millis())),
            };
            run = self.update_run(&run, owner, |tx, r| {
                r.log_stage(StageLogEntry {
                    stage: stage.name.clone(),
                    status,
                    duration_ms: ms,
                    message: message.clone(),
                    at: tx.now(),
                });
                if let StageOutcome::Ok { registered: Some(v), .. } = &outcome {
                    r.report.registered_views = Some(*v);
                }
                Ok(())
            })?;
            match outcome {
                StageOutcome::Ok { .. } => input = out,
                StageOutcome::Failed { code, message } => {
                    let msg = format!("{STAGE_FAILED}({}, {code}): {message}", stage.name);
                    return Ok(Err(self.fail(&run, owner, msg)?));
                }
                StageOutcome::TimedOut { .. } => {
                    return Err(ExecError::StageTimedOut {
                        stage: stage.name.clone(),
                    })
                }
            }
        }
        let r = self.update_run(&run, owner, |tx, r| r.apply(RunEvent::StartPostprocess, tx.now()))?;
        Ok(Ok(r))
    }

    /// Post-processes the final mesh, then mints, binds and publishes in one
    /// transaction.
    fn finish(&self, run: &RunRecord, site: &SiteRecord, owner: &str) -> Result<ExecOutcome, ExecError> {
        let plan = self.load_plan(run.id)?;
        let last = plan.stages.last().map(|s| s.name.clone()).unwrap_or_default();
        let mesh_dir = self.layout.run_dir(run.id).join(&last);
        let t0 = Instant::now();
        let built = match self.build_artifact(run, site, &mesh_dir) {
            Ok(b) => b,
            Err(msg) => return self.fail(run, owner, format!("{POSTPROCESS_FAILED}: {msg}")),
        };
        let ms = t0.elapsed().as_millis() as u64;
        let (artifact, digest, report) = built;
        let cfg = &self.config.ark;
        let target = format!("{}{}", self.config.server.site_page_prefix, site.verbose_id);
        let r = self.fenced(run.site_id, owner, |tx| {
            let mut r = tx.run(run.id)?;
            let contributors: std::collections::BTreeSet<i64> = r
                .contribution_ids_used
                .iter()
                .map(|&c| tx.contribution(c).map(|c| c.contributor_id.0))
                .collect::<Result<_, _>>()?;
            let ark = mint(&cfg.naan, &cfg.shoulder, cfg.blade_len, &mut rand::thread_rng(), &mut tx.ark_registry(Some(r.id)))?;
            let metadata = json!({
                "site_name": site.meta.name,
                "verbose_id": site.verbose_id,
                "run_id": r.id.0,
                "published_at": tx.now(),
                "contributor_count": contributors.len(),
                "license": cfg.license,
            });
            tx.bind_ark(&ark, &metadata, &target)?;
            r.report.compression = Some(report);
            r.report.postprocess_ms = Some(ms);
            r.apply(
                RunEvent::Publish {
                    artifact_path: artifact.display().to_string(),
                    artifact_sha256: digest.clone(),
                    ark,
                },
                tx.now(),
            )?;
            tx.put_run(&r)?;
            tx.set_site_status(r.site_id, SiteStatus::Live)?;
            tx.release_lease(&site_lease(r.site_id), owner)?;
            Ok(r)
        })?;
        tracing::info!(run = %r.id, ark = ?r.ark.as_ref().map(|a| a.to_string()), "published");
        Ok(ExecOutcome::Published(r))
    }

    fn build_artifact(
        &self,
        run: &RunRecord,
        site: &SiteRecord,
        mesh_dir: &Path,
    ) -> Result<(PathBuf, String, heritage_core::CompressionReport), String> {
        let obj_path = find_mesh(mesh_dir).ok_or_else(|| format!("no mesh in {}", mesh_dir.display()))?;
        let obj = fs::read(&obj_path).map_err(|e| e.to_string())?;
        let loader = |name: &str| fs::read(mesh_dir.join(name)).ok();
        let model = parse_obj::<f32>(&obj, &loader).map_err(|e| format!("{}: {e}", e.code()))?;
        let art_dir = self.layout.artifact_dir(run.id);
        let raw_bytes = copy_flat(mesh_dir, &art_dir.join("raw")).map_err(|e| e.to_string())?;
        let raw_bytes = raw_bytes.saturating_sub(fs::metadata(mesh_dir.join("manifest.json")).map(|m| m.len()).unwrap_or(0));

        let o = &site.recon_options;
        let mut mesh: TriangleMesh<f32> = model.mesh;
        if o.denoise {
            mesh = heritage_mesh::denoise(&mesh, o.denoise_lmd, o.denoise_eta);
        }
        let opts = PostprocessOptions {
            factor: o.simplification_factor,
            texture_side: o.texture_side,
            glb: GlbOptions::default(),
        };
        let out = if o.resample {
            let resampled = heritage_mesh::resample(&mesh, o.simplification_factor);
            postprocess(&resampled, raw_bytes, &PostprocessOptions { factor: 1.0, ..opts })
        } else {
            postprocess(&mesh, raw_bytes, &opts)
        }
        .map_err(|e| format!("{}: {e}", e.code()))?;
        let mut report = out.report;
        report.vertices_before = mesh.vertex_count();
        report.faces_before = mesh.face_count();
        let path = art_dir.join(ARTIFACT_NAME);
        write_atomic(&path, &out.glb).map_err(|e| e.to_string())?;
        Ok((path, sha256_hex(&out.glb), report))
    }
}
