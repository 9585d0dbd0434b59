//! Periodic maintenance.
//!
//! A tick fires a task when its interval has elapsed since the last fire.
//! The due check, the leadership lease (twice the interval) and the new
//! fire time commit together, and the firing is queued as a PERIODIC job,
//! so one due tick yields one job however many workers tick. Missed ticks
//! coalesce into one.

use std::collections::HashMap;
use std::fs;
use std::sync::Arc;

use chrono::{DateTime, Duration, Utc};
use heritage_core::clock::to_millis;
use heritage_core::{Config, Error, RunEvent, RunState, Store};
use serde_json::{json, Value};

use crate::pipeline::Layout;
use crate::queue::{enqueue_in, JobKind};

pub const MIN_INTERVAL_SECS: i64 = 60;
pub const PRUNE: &str = "prune";
pub const ARCHIVE: &str = "archive";
pub const BACKUP: &str = "backup";

pub type TaskFn = Arc<dyn Fn(&TaskContext<'_>) -> Result<Value, Error> + Send + Sync>;

pub struct TaskContext<'a> {
    pub store: &'a Store,
    pub config: &'a Config,
    pub layout: &'a Layout,
    /// The tick this execution belongs to.
    pub tick: DateTime<Utc>,
}

#[derive(Clone)]
pub struct PeriodicSpec {
    pub name: String,
    pub interval: Duration,
    pub task: TaskFn,
}

#[derive(Clone)]
pub struct Scheduler {
    store: Store,
    config: Arc<Config>,
    layout: Layout,
    specs: Vec<PeriodicSpec>,
}

impl Scheduler {
    pub fn new(store: Store, config: Arc<Config>) -> Self {
        let layout = Layout::from_config(&config);
        Self {
            store,
            config,
            layout,
            specs: Vec::new(),
        }
    }

    /// Scheduler with prune, archive and backup registered at their
    /// configured intervals.
    pub fn with_builtins(store: Store, config: Arc<Config>) -> Result<Self, Error> {
        let m = config.maintenance.clone();
        let mut s = Self::new(store, config);
        s.schedule_periodic(PeriodicSpec {
            name: PRUNE.into(),
            interval: Duration::seconds(m.prune_interval as i64),
            task: Arc::new(prune),
        })?;
        s.schedule_periodic(PeriodicSpec {
            name: ARCHIVE.into(),
            interval: Duration::seconds(m.archive_interval as i64),
            task: Arc::new(archive),
        })?;
        s.schedule_periodic(PeriodicSpec {
            name: BACKUP.into(),
            interval: Duration::seconds(m.backup_interval as i64),
            task: Arc::new(backup),
        })?;
        Ok(s)
    }

    pub fn schedule_periodic(&mut self, spec: PeriodicSpec) -> Result<(), Error> {
        if spec.interval < Duration::seconds(MIN_INTERVAL_SECS) {
            return Err(Error::Validation(format!(
                "periodic task {} needs an interval of at least {MIN_INTERVAL_SECS} s",
                spec.name
            )));
        }
        if self.specs.iter().any(|s| s.name == spec.name) {
            return Err(Error::Conflict(format!("periodic task {} already registered", spec.name)));
        }
        self.specs.push(spec);
        Ok(())
    }

    pub fn names(&self) -> Vec<&str> {
        self.specs.iter().map(|s| s.name.as_str()).collect()
    }

    /// Queues every due task. Returns the names queued by this caller.
    pub fn tick(&self, owner: &str) -> Result<Vec<String>, Error> {
        let mut fired = Vec::new();
        for spec in &self.specs {
            let queued = self.store.write(|tx| {
                let now = tx.now();
                if tx.last_fire(&spec.name)?.is_some_and(|last| now < last + spec.interval) {
                    return Ok(false);
                }
                if !tx.try_acquire_lease(&format!("periodic:{}", spec.name), owner, spec.interval * 2)? {
                    return Ok(false);
                }
                tx.set_last_fire(&spec.name, now)?;
                let payload = json!({"name": spec.name, "tick": to_millis(now)});
                enqueue_in(tx, JobKind::Periodic, &payload, 1, self.config.queue.max_attempts)?;
                Ok::<_, Error>(true)
            })?;
            if queued {
                fired.push(spec.name.clone());
            }
        }
        Ok(fired)
    }

    /// Executes one firing and records it in the task log.
    pub fn run_task(&self, name: &str, tick: DateTime<Utc>) -> Result<Value, Error> {
        let spec = self
            .specs
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::not_found("periodic task", name))?;
        let started = self.store.now();
        let ctx = TaskContext {
            store: &self.store,
            config: &self.config,
            layout: &self.layout,
            tick,
        };
        let detail = (spec.task)(&ctx)?;
        self.store.write(|tx| tx.log_task(name, started, detail.clone()))?;
        Ok(detail)
    }
}

/// Deletes PENDING images older than `maintenance.prune_days` whose upload
/// never completed, with their files.
pub fn prune(ctx: &TaskContext<'_>) -> Result<Value, Error> {
    let cutoff = ctx.store.now() - Duration::days(ctx.config.maintenance.prune_days);
    let deleted = ctx.store.write(|tx| {
        let stale = tx.stale_pending_images(cutoff)?;
        for img in &stale {
            tx.delete_unfinished_image(img.id)?;
        }
        Ok::<_, Error>(stale)
    })?;
    for img in &deleted {
        let _ = fs::remove_file(&img.stored_path);
    }
    Ok(json!({"deleted": deleted.len(), "image_ids": deleted.iter().map(|i| i.id.0).collect::<Vec<_>>()}))
}

/// Moves PUBLISHED runs that ended more than `maintenance.archive_days`
/// ago and have been superseded by a newer published run of their site to
/// ARCHIVED, relocating their artifacts under `archive.root`.
pub fn archive(ctx: &TaskContext<'_>) -> Result<Value, Error> {
    let cutoff = ctx.store.now() - Duration::days(ctx.config.maintenance.archive_days);
    let runs = ctx.store.read(|tx| tx.runs_in_state(RunState::Published))?;
    let mut latest: HashMap<i64, i64> = HashMap::new();
    for r in &runs {
        let e = latest.entry(r.site_id.0).or_insert(r.id.0);
        *e = (*e).max(r.id.0);
    }
    let mut archived = Vec::new();
    for r in runs {
        let old = r.ended_at.is_some_and(|t| t < cutoff);
        if !old || latest.get(&r.site_id.0) == Some(&r.id.0) {
            continue;
        }
        let src = ctx.layout.artifact_dir(r.id);
        let dst = ctx.layout.archived_dir(r.id);
        if src.exists() {
            if let Some(parent) = dst.parent() {
                fs::create_dir_all(parent)?;
            }
            if dst.exists() {
                fs::remove_dir_all(&dst)?;
            }
            move_dir(&src, &dst)?;
        }
        let new_path = r
            .artifact_path
            .as_deref()
            .and_then(|p| std::path::Path::new(p).file_name())
            .map(|f| dst.join(f).display().to_string());
        ctx.store.write(|tx| {
            let mut cur = tx.run(r.id)?;
            if cur.state != RunState::Published {
                return Ok(());
            }
            cur.apply(RunEvent::Archive { artifact_path: new_path.clone() }, tx.now())?;
            tx.put_run(&cur)
        })?;
        archived.push(r.id.0);
    }
    Ok(json!({"archived": archived.len(), "run_ids": archived}))
}

fn move_dir(src: &std::path::Path, dst: &std::path::Path) -> std::io::Result<()> {
    if fs::rename(src, dst).is_ok() {
        return Ok(());
    }
    // different filesystem
    fs::create_dir_all(dst)?;
    for e in fs::read_dir(src)? {
        let e = e?;
        let to = dst.join(e.file_name());
        if e.file_type()?.is_dir() {
            move_dir(&e.path(), &to)?;
        } else {
            fs::copy(e.path(), &to)?;
        }
    }
    fs::remove_dir_all(src)
}

/// Writes a consistent copy of the store under `archive.backup_root`, one
/// file per tick.
pub fn backup(ctx: &TaskContext<'_>) -> Result<Value, Error> {
    fs::create_dir_all(&ctx.layout.backup_root)?;
    let path = ctx
        .layout
        .backup_root
        .join(format!("store-{}.sqlite", ctx.tick.format("%Y%m%dT%H%M%SZ")));
    if path.exists() {
        fs::remove_file(&path)?;
    }
    ctx.store.backup_to(&path)?;
    let bytes = fs::metadata(&path)?.len();
    Ok(json!({"path": path.display().to_string(), "bytes": bytes}))
}
