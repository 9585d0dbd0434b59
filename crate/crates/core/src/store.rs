//! Transactional persistence.
//!
//! Every record lives in its own table as a JSON document plus the columns
//! needed for lookups and constraints. Mutations run inside `BEGIN
//! IMMEDIATE` transactions, which serializes writers across threads and
//! processes sharing the database file; that is what resolves the
//! completion-vs-contribution race and the one-active-run-per-site rule.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration as StdDuration;

use chrono::{DateTime, Duration, Utc};
use parking_lot::Mutex;
use rusqlite::{params, Connection, OptionalExtension, TransactionBehavior};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::ark::{ArkError, ArkName, ArkRegistry};
use crate::clock::{from_millis, to_millis, SharedClock, SystemClock};
use crate::domain::*;
use crate::error::{Error, Result};

const SCHEMA: &str = r#"
CREATE TABLE IF NOT EXISTS sites (
    id INTEGER PRIMARY KEY,
    verbose_id TEXT NOT NULL UNIQUE,
    completed INTEGER NOT NULL DEFAULT 0,
    archived INTEGER NOT NULL DEFAULT 0,
    doc TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS contributors (
    id INTEGER PRIMARY KEY,
    email TEXT NOT NULL UNIQUE,
    doc TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS contributions (
    id INTEGER PRIMARY KEY,
    site_id INTEGER NOT NULL REFERENCES sites(id),
    contributor_id INTEGER NOT NULL REFERENCES contributors(id),
    complete INTEGER NOT NULL DEFAULT 0,
    doc TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS images (
    id INTEGER PRIMARY KEY,
    contribution_id INTEGER NOT NULL REFERENCES contributions(id),
    site_id INTEGER NOT NULL REFERENCES sites(id),
    safety TEXT NOT NULL,
    label TEXT NOT NULL,
    created_at INTEGER NOT NULL,
    doc TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS images_by_site ON images(site_id, label);
CREATE TABLE IF NOT EXISTS runs (
    id INTEGER PRIMARY KEY,
    site_id INTEGER NOT NULL REFERENCES sites(id),
    state TEXT NOT NULL,
    doc TEXT NOT NULL
);
CREATE UNIQUE INDEX IF NOT EXISTS one_active_run_per_site ON runs(site_id)
    WHERE state NOT IN ('PUBLISHED', 'FAILED', 'ARCHIVED');
CREATE TABLE IF NOT EXISTS arks (
    name TEXT PRIMARY KEY,
    naan TEXT NOT NULL,
    run_id INTEGER UNIQUE REFERENCES runs(id),
    target TEXT,
    metadata TEXT NOT NULL DEFAULT '{}',
    created_at INTEGER NOT NULL,
    doc TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS requests (
    id INTEGER PRIMARY KEY,
    kind TEXT NOT NULL,
    created_at INTEGER NOT NULL,
    doc TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS jobs (
    id INTEGER PRIMARY KEY,
    kind TEXT NOT NULL,
    payload TEXT NOT NULL,
    idem_key TEXT NOT NULL UNIQUE,
    priority INTEGER NOT NULL DEFAULT 0,
    attempts INTEGER NOT NULL DEFAULT 0,
    max_attempts INTEGER NOT NULL,
    not_before INTEGER NOT NULL,
    state TEXT NOT NULL,
    claimed_by TEXT,
    lease_until INTEGER,
    last_error TEXT,
    created_at INTEGER NOT NULL
);
CREATE INDEX IF NOT EXISTS jobs_ready ON jobs(state, priority, id);
CREATE TABLE IF NOT EXISTS leases (
    name TEXT PRIMARY KEY,
    owner TEXT NOT NULL,
    expires_at INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS periodic (
    name TEXT PRIMARY KEY,
    last_fire INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS task_log (
    id INTEGER PRIMARY KEY,
    name TEXT NOT NULL,
    started_at INTEGER NOT NULL,
    finished_at INTEGER NOT NULL,
    detail TEXT NOT NULL
);
"#;

/// Bound on `_2`, `_3`, ... suffixes tried for a colliding verbose id.
pub const MAX_VERBOSE_SUFFIX: usize = 1000;

#[derive(Clone)]
pub struct Store {
    inner: Arc<Inner>,
}

struct Inner {
    conn: Mutex<Connection>,
    clock: SharedClock,
    path: Option<PathBuf>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("path", &self.inner.path).finish()
    }
}

impl Store {
    pub fn open(path: impl AsRef<Path>, clock: SharedClock) -> Result<Self> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let conn = Connection::open(path)?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        conn.pragma_update(None, "synchronous", "FULL")?;
        Self::init(conn, clock, Some(path.to_owned()))
    }

    pub fn open_in_memory(clock: SharedClock) -> Result<Self> {
        Self::init(Connection::open_in_memory()?, clock, None)
    }

    /// In-memory store on the system clock.
    pub fn ephemeral() -> Result<Self> {
        Self::open_in_memory(Arc::new(SystemClock))
    }

    fn init(conn: Connection, clock: SharedClock, path: Option<PathBuf>) -> Result<Self> {
        conn.busy_timeout(StdDuration::from_secs(10))?;
        conn.pragma_update(None, "foreign_keys", "ON")?;
        conn.execute_batch(SCHEMA)?;
        Ok(Self {
            inner: Arc::new(Inner {
                conn: Mutex::new(conn),
                clock,
                path,
            }),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.inner.path.as_deref()
    }

    pub fn clock(&self) -> &SharedClock {
        &self.inner.clock
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.inner.clock.now()
    }

    /// Runs `f` in an immediate (write-locking) transaction; commits on `Ok`.
    pub fn write<T, E>(&self, f: impl FnOnce(&Tx<'_>) -> std::result::Result<T, E>) -> std::result::Result<T, E>
    where
        E: From<Error>,
    {
        let mut conn = self.inner.conn.lock();
        let txn = conn
            .transaction_with_behavior(TransactionBehavior::Immediate)
            .map_err(Error::from)?;
        let tx = Tx {
            conn: &txn,
            now: self.inner.clock.now(),
        };
        let out = f(&tx)?;
        txn.commit().map_err(Error::from)?;
        Ok(out)
    }

    /// Runs `f` in a deferred transaction, giving a consistent snapshot.
    pub fn read<T, E>(&self, f: impl FnOnce(&Tx<'_>) -> std::result::Result<T, E>) -> std::result::Result<T, E>
    where
        E: From<Error>,
    {
        let mut conn = self.inner.conn.lock();
        let txn = conn
            .transaction_with_behavior(TransactionBehavior::Deferred)
            .map_err(Error::from)?;
        let tx = Tx {
            conn: &txn,
            now: self.inner.clock.now(),
        };
        let out = f(&tx)?;
        txn.commit().map_err(Error::from)?;
        Ok(out)
    }

    pub fn ping(&self) -> bool {
        let conn = self.inner.conn.lock();
        conn.query_row("SELECT 1", [], |r| r.get::<_, i64>(0)).is_ok()
    }

    /// Consistent copy of the whole database into a new file.
    pub fn backup_to(&self, dest: &Path) -> Result<()> {
        if let Some(dir) = dest.parent() {
            std::fs::create_dir_all(dir)?;
        }
        if dest.exists() {
            std::fs::remove_file(dest)?;
        }
        let conn = self.inner.conn.lock();
        conn.execute("VACUUM INTO ?1", params![dest.to_string_lossy()])?;
        Ok(())
    }

    // Convenience wrappers for single-statement use.

    pub fn create_site(&self, meta: SiteMetadata, opts: ReconOptions) -> Result<SiteRecord> {
        self.write(|tx| tx.create_site(meta, opts))
    }

    pub fn site(&self, id: SiteId) -> Result<SiteRecord> {
        self.read(|tx| tx.site(id))
    }

    pub fn search_sites(&self, query: &str) -> Result<Vec<SiteRecord>> {
        self.read(|tx| tx.search_sites(query))
    }

    pub fn upsert_contributor(&self, email: &str, name: &str) -> Result<ContributorRecord> {
        self.write(|tx| tx.upsert_contributor(email, name))
    }

    pub fn record_contribution(&self, site: SiteId, contributor: ContributorId, images: Vec<NewImage>) -> Result<ContributionRecord> {
        self.write(|tx| tx.record_contribution(site, contributor, images))
    }

    pub fn mark_completed(&self, site: SiteId) -> Result<SiteRecord> {
        self.write(|tx| tx.mark_completed(site))
    }

    pub fn image(&self, id: ImageId) -> Result<ImageRecord> {
        self.read(|tx| tx.image(id))
    }

    pub fn run(&self, id: RunId) -> Result<RunRecord> {
        self.read(|tx| tx.run(id))
    }

    pub fn create_run(&self, site: SiteId) -> Result<RunRecord> {
        self.write(|tx| tx.create_run(site))
    }

    pub fn transition_run(&self, id: RunId, event: RunEvent) -> Result<RunRecord> {
        self.write(|tx| tx.transition_run(id, event))
    }

    pub fn export_state(&self) -> Result<serde_json::Value> {
        self.read(|tx| tx.export_state())
    }
}

/// A stored ARK with its binding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArkEntry {
    pub ark: ArkName,
    pub run_id: Option<RunId>,
    pub target: Option<String>,
    /// Metadata document exactly as bound.
    pub metadata: String,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Resolution {
    Live(ArkEntry),
    /// The run behind the identifier was archived.
    Gone(ArkEntry),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: i64,
    pub kind: String,
    pub created_at: DateTime<Utc>,
    pub body: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLogEntry {
    pub id: i64,
    pub name: String,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub detail: serde_json::Value,
}

/// Operations available inside one transaction.
pub struct Tx<'a> {
    conn: &'a Connection,
    now: DateTime<Utc>,
}

fn doc<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string(v)?)
}

fn undoc<T: DeserializeOwned>(s: String) -> Result<T> {
    Ok(serde_json::from_str(&s)?)
}

fn is_unique_violation(e: &rusqlite::Error) -> bool {
    matches!(
        e,
        rusqlite::Error::SqliteFailure(f, _) if f.code == rusqlite::ErrorCode::ConstraintViolation
    )
}

impl<'a> Tx<'a> {
    pub fn conn(&self) -> &Connection {
        self.conn
    }

    /// Transaction timestamp; constant for the whole transaction.
    pub fn now(&self) -> DateTime<Utc> {
        self.now
    }

    fn one_doc<T: DeserializeOwned>(&self, sql: &str, id: i64, entity: &'static str) -> Result<T> {
        let s: Option<String> = self
            .conn
            .query_row(sql, params![id], |r| r.get(0))
            .optional()?;
        undoc(s.ok_or_else(|| Error::not_found(entity, id))?)
    }

    fn docs<T: DeserializeOwned>(&self, sql: &str, p: impl rusqlite::Params) -> Result<Vec<T>> {
        let mut stmt = self.conn.prepare(sql)?;
        let rows = stmt.query_map(p, |r| r.get::<_, String>(0))?;
        let mut out = Vec::new();
        for row in rows {
            out.push(undoc(row?)?);
        }
        Ok(out)
    }

    // ---- sites ----

    pub fn create_site(&self, meta: SiteMetadata, opts: ReconOptions) -> Result<SiteRecord> {
        if meta.name.trim().is_empty() {
            return Err(Error::Validation("site name must not be empty".into()));
        }
        if meta.location_parts().iter().all(|p| p.trim().is_empty()) {
            return Err(Error::Validation("at least one location field is required".into()));
        }
        opts.validate()?;
        let base = derive_verbose_id(&meta);
        if base.is_empty() {
            return Err(Error::Validation("name and location yield an empty verbose id".into()));
        }
        let mut site = SiteRecord {
            id: SiteId(0),
            meta,
            verbose_id: String::new(),
            recon_options: opts,
            status: SiteStatus::Live,
            completed: false,
            archived: false,
            created_at: self.now,
            updated_at: self.now,
        };
        for n in 1..=MAX_VERBOSE_SUFFIX {
            let candidate = if n == 1 { base.clone() } else { format!("{base}_{n}") };
            let inserted = self.conn.execute(
                "INSERT OR IGNORE INTO sites (verbose_id, doc) VALUES (?1, '{}')",
                params![candidate],
            )?;
            if inserted == 1 {
                site.id = SiteId(self.conn.last_insert_rowid());
                site.verbose_id = candidate;
                self.put_site(&site)?;
                return Ok(site);
            }
        }
        Err(Error::DuplicateVerboseId(base))
    }

    fn put_site(&self, s: &SiteRecord) -> Result<()> {
        self.conn.execute(
            "UPDATE sites SET verbose_id = ?2, completed = ?3, archived = ?4, doc = ?5 WHERE id = ?1",
            params![s.id.0, s.verbose_id, s.completed, s.archived, doc(s)?],
        )?;
        Ok(())
    }

    pub fn site(&self, id: SiteId) -> Result<SiteRecord> {
        self.one_doc("SELECT doc FROM sites WHERE id = ?1", id.0, "site")
    }

    pub fn site_by_verbose_id(&self, verbose_id: &str) -> Result<SiteRecord> {
        let s: Option<String> = self
            .conn
            .query_row("SELECT doc FROM sites WHERE verbose_id = ?1", params![verbose_id], |r| r.get(0))
            .optional()?;
        undoc(s.ok_or_else(|| Error::not_found("site", verbose_id))?)
    }

    pub fn sites(&self) -> Result<Vec<SiteRecord>> {
        self.docs("SELECT doc FROM sites ORDER BY id", [])
    }

    /// Case-insensitive substring match over verbose id and name, ordered
    /// by name then id. Archived sites are excluded.
    pub fn search_sites(&self, query: &str) -> Result<Vec<SiteRecord>> {
        let q = query.trim().to_lowercase();
        let mut out: Vec<SiteRecord> = self
            .docs::<SiteRecord>("SELECT doc FROM sites WHERE archived = 0", [])?
            .into_iter()
            .filter(|s| q.is_empty() || s.verbose_id.to_lowercase().contains(&q) || s.meta.name.to_lowercase().contains(&q))
            .collect();
        out.sort_by(|a, b| a.meta.name.cmp(&b.meta.name).then(a.id.cmp(&b.id)));
        Ok(out)
    }

    pub fn update_recon_options(&self, id: SiteId, opts: ReconOptions) -> Result<SiteRecord> {
        opts.validate()?;
        let mut s = self.site(id)?;
        s.recon_options = opts;
        s.updated_at = self.now;
        self.put_site(&s)?;
        Ok(s)
    }

    pub fn mark_completed(&self, id: SiteId) -> Result<SiteRecord> {
        let mut s = self.site(id)?;
        if s.completed {
            return Err(Error::Conflict(format!("site {id} is already completed")));
        }
        s.completed = true;
        s.updated_at = self.now;
        self.put_site(&s)?;
        Ok(s)
    }

    pub fn set_site_status(&self, id: SiteId, status: SiteStatus) -> Result<SiteRecord> {
        let mut s = self.site(id)?;
        if s.status == status {
            return Ok(s);
        }
        if !s.status.can_become(status) {
            return Err(Error::Validation(format!("site status {} cannot become {}", s.status, status)));
        }
        s.status = status;
        s.updated_at = self.now;
        self.put_site(&s)?;
        Ok(s)
    }

    // ---- contributors ----

    pub fn upsert_contributor(&self, email: &str, name: &str) -> Result<ContributorRecord> {
        let email = email.trim().to_lowercase();
        if email.is_empty() {
            return Err(Error::Validation("contributor email must not be empty".into()));
        }
        if let Some(mut c) = self.contributor_by_email(&email)? {
            if c.name != name {
                c.name = name.to_owned();
                self.put_contributor(&c)?;
            }
            return Ok(c);
        }
        self.conn.execute(
            "INSERT INTO contributors (email, doc) VALUES (?1, '{}')",
            params![email],
        )?;
        let c = ContributorRecord {
            id: ContributorId(self.conn.last_insert_rowid()),
            email,
            name: name.to_owned(),
            banned: false,
            ban_reason: None,
        };
        self.put_contributor(&c)?;
        Ok(c)
    }

    fn put_contributor(&self, c: &ContributorRecord) -> Result<()> {
        self.conn.execute(
            "UPDATE contributors SET doc = ?2 WHERE id = ?1",
            params![c.id.0, doc(c)?],
        )?;
        Ok(())
    }

    pub fn contributor(&self, id: ContributorId) -> Result<ContributorRecord> {
        self.one_doc("SELECT doc FROM contributors WHERE id = ?1", id.0, "contributor")
    }

    pub fn contributor_by_email(&self, email: &str) -> Result<Option<ContributorRecord>> {
        let s: Option<String> = self
            .conn
            .query_row(
                "SELECT doc FROM contributors WHERE email = ?1",
                params![email.trim().to_lowercase()],
                |r| r.get(0),
            )
            .optional()?;
        s.map(undoc).transpose()
    }

    pub fn set_banned(&self, id: ContributorId, banned: bool, reason: Option<String>) -> Result<ContributorRecord> {
        let mut c = self.contributor(id)?;
        c.banned = banned;
        c.ban_reason = if banned { reason } else { None };
        self.put_contributor(&c)?;
        Ok(c)
    }

    // ---- contributions ----

    fn check_can_contribute(&self, site: SiteId, contributor: ContributorId) -> Result<()> {
        let s = self.site(site)?;
        if s.completed {
            return Err(Error::SiteCompleted(site.0));
        }
        if self.contributor(contributor)?.banned {
            return Err(Error::ContributorBanned(contributor.0));
        }
        Ok(())
    }

    /// Opens a staged upload; images attach with `add_image` and become
    /// visible to processing once `finalize_contribution` commits.
    pub fn begin_contribution(&self, site: SiteId, contributor: ContributorId) -> Result<ContributionRecord> {
        self.check_can_contribute(site, contributor)?;
        self.conn.execute(
            "INSERT INTO contributions (site_id, contributor_id, complete, doc) VALUES (?1, ?2, 0, '{}')",
            params![site.0, contributor.0],
        )?;
        let c = ContributionRecord {
            id: ContributionId(self.conn.last_insert_rowid()),
            site_id: site,
            contributor_id: contributor,
            started_at: self.now,
            submitted_at: None,
            image_ids: Vec::new(),
        };
        self.put_contribution(&c)?;
        Ok(c)
    }

    fn put_contribution(&self, c: &ContributionRecord) -> Result<()> {
        self.conn.execute(
            "UPDATE contributions SET complete = ?2, doc = ?3 WHERE id = ?1",
            params![c.id.0, c.is_complete(), doc(c)?],
        )?;
        Ok(())
    }

    pub fn contribution(&self, id: ContributionId) -> Result<ContributionRecord> {
        self.one_doc("SELECT doc FROM contributions WHERE id = ?1", id.0, "contribution")
    }

    pub fn contributions_for_site(&self, site: SiteId) -> Result<Vec<ContributionRecord>> {
        self.docs("SELECT doc FROM contributions WHERE site_id = ?1 ORDER BY id", params![site.0])
    }

    pub fn add_image(&self, contribution: ContributionId, img: NewImage) -> Result<ImageRecord> {
        let mut c = self.contribution(contribution)?;
        if c.is_complete() {
            return Err(Error::Validation(format!("contribution {contribution} is already finalized")));
        }
        self.conn.execute(
            "INSERT INTO images (contribution_id, site_id, safety, label, created_at, doc) VALUES (?1, ?2, 'PENDING', 'UNLABELED', ?3, '{}')",
            params![contribution.0, c.site_id.0, to_millis(self.now)],
        )?;
        let rec = ImageRecord {
            id: ImageId(self.conn.last_insert_rowid()),
            contribution_id: contribution,
            site_id: c.site_id,
            filename: img.filename,
            stored_path: img.stored_path,
            byte_size: img.byte_size,
            width: img.width,
            height: img.height,
            exif_present: img.exif_present,
            sha256: img.sha256,
            safety: SafetyState::Pending,
            label: ImageLabel::Unlabeled,
            iqa: None,
            created_at: self.now,
        };
        self.put_image(&rec)?;
        c.image_ids.push(rec.id);
        self.put_contribution(&c)?;
        Ok(rec)
    }

    pub fn finalize_contribution(&self, id: ContributionId) -> Result<ContributionRecord> {
        let mut c = self.contribution(id)?;
        if c.is_complete() {
            return Ok(c);
        }
        self.check_can_contribute(c.site_id, c.contributor_id)?;
        if c.image_ids.is_empty() {
            return Err(Error::EmptyContribution);
        }
        c.submitted_at = Some(self.now);
        self.put_contribution(&c)?;
        Ok(c)
    }

    /// Contribution plus its images in one step.
    pub fn record_contribution(&self, site: SiteId, contributor: ContributorId, images: Vec<NewImage>) -> Result<ContributionRecord> {
        if images.is_empty() {
            self.check_can_contribute(site, contributor)?;
            return Err(Error::EmptyContribution);
        }
        let c = self.begin_contribution(site, contributor)?;
        for img in images {
            self.add_image(c.id, img)?;
        }
        self.finalize_contribution(c.id)
    }

    // ---- images ----

    fn put_image(&self, i: &ImageRecord) -> Result<()> {
        if i.label == ImageLabel::Good && i.safety != SafetyState::Safe {
            return Err(Error::Validation(format!("image {} labeled GOOD without SAFE verdict", i.id)));
        }
        self.conn.execute(
            "UPDATE images SET safety = ?2, label = ?3, doc = ?4 WHERE id = ?1",
            params![i.id.0, i.safety.as_str(), i.label.as_str(), doc(i)?],
        )?;
        Ok(())
    }

    pub fn image(&self, id: ImageId) -> Result<ImageRecord> {
        self.one_doc("SELECT doc FROM images WHERE id = ?1", id.0, "image")
    }

    pub fn images_for_site(&self, site: SiteId) -> Result<Vec<ImageRecord>> {
        self.docs("SELECT doc FROM images WHERE site_id = ?1 ORDER BY id", params![site.0])
    }

    pub fn images_with_safety(&self, safety: SafetyState) -> Result<Vec<ImageRecord>> {
        self.docs("SELECT doc FROM images WHERE safety = ?1 ORDER BY id", params![safety.as_str()])
    }

    pub fn all_images(&self) -> Result<Vec<ImageRecord>> {
        self.docs("SELECT doc FROM images ORDER BY id", [])
    }

    /// GOOD images of finalized contributions: the default run input set.
    pub fn good_images_for_site(&self, site: SiteId) -> Result<Vec<ImageRecord>> {
        self.docs(
            "SELECT i.doc FROM images i JOIN contributions c ON c.id = i.contribution_id
             WHERE i.site_id = ?1 AND i.label = 'GOOD' AND i.safety = 'SAFE' AND c.complete = 1
             ORDER BY i.id",
            params![site.0],
        )
    }

    pub fn set_image_safety(&self, id: ImageId, safety: SafetyState) -> Result<ImageRecord> {
        let mut i = self.image(id)?;
        i.safety = safety;
        if safety != SafetyState::Safe {
            i.label = ImageLabel::Unlabeled;
        }
        self.put_image(&i)?;
        Ok(i)
    }

    pub fn set_image_label(&self, id: ImageId, label: ImageLabel, report: Option<IqaReport>) -> Result<ImageRecord> {
        let mut i = self.image(id)?;
        i.label = label;
        i.iqa = report;
        self.put_image(&i)?;
        Ok(i)
    }

    /// PENDING images older than `cutoff` in uploads that were never finalized.
    pub fn stale_pending_images(&self, cutoff: DateTime<Utc>) -> Result<Vec<ImageRecord>> {
        self.docs(
            "SELECT i.doc FROM images i JOIN contributions c ON c.id = i.contribution_id
             WHERE i.safety = 'PENDING' AND c.complete = 0 AND i.created_at < ?1 ORDER BY i.id",
            params![to_millis(cutoff)],
        )
    }

    /// Hard-deletes an image of an unfinished upload, and the upload itself
    /// once it has no images left.
    pub fn delete_unfinished_image(&self, id: ImageId) -> Result<()> {
        let img = self.image(id)?;
        let mut c = self.contribution(img.contribution_id)?;
        if c.is_complete() {
            return Err(Error::Validation(format!("image {id} belongs to a finalized contribution")));
        }
        self.conn.execute("DELETE FROM images WHERE id = ?1", params![id.0])?;
        c.image_ids.retain(|&i| i != id);
        if c.image_ids.is_empty() {
            self.conn.execute("DELETE FROM contributions WHERE id = ?1", params![c.id.0])?;
        } else {
            self.put_contribution(&c)?;
        }
        Ok(())
    }

    // ---- runs ----

    pub fn create_run(&self, site: SiteId) -> Result<RunRecord> {
        self.site(site)?;
        let res = self.conn.execute(
            "INSERT INTO runs (site_id, state, doc) VALUES (?1, 'QUEUED', '{}')",
            params![site.0],
        );
        match res {
            Ok(_) => {}
            Err(e) if is_unique_violation(&e) => return Err(Error::RunAlreadyActive(site.0)),
            Err(e) => return Err(e.into()),
        }
        let run = RunRecord {
            id: RunId(self.conn.last_insert_rowid()),
            site_id: site,
            state: RunState::Queued,
            created_at: self.now,
            started_at: None,
            ended_at: None,
            image_ids_used: Vec::new(),
            contribution_ids_used: Vec::new(),
            stage_log: Vec::new(),
            history: Vec::new(),
            artifact_path: None,
            artifact_sha256: None,
            ark: None,
            error: None,
            report: RunReport::default(),
        };
        self.put_run(&run)?;
        Ok(run)
    }

    /// Persists a run, refusing to change an ARK that is already set.
    pub fn put_run(&self, r: &RunRecord) -> Result<()> {
        if r.id.0 != 0 {
            let stored: Option<String> = self
                .conn
                .query_row("SELECT doc FROM runs WHERE id = ?1", params![r.id.0], |row| row.get(0))
                .optional()?;
            if let Some(prev) = stored.filter(|s| s != "{}") {
                let prev: RunRecord = undoc(prev)?;
                if prev.ark.is_some() && prev.ark != r.ark {
                    return Err(Error::Validation(format!("ARK of run {} is immutable", r.id)));
                }
            }
        }
        let published = r.state == RunState::Published;
        if published && (r.ark.is_none() || r.artifact_path.is_none()) {
            return Err(Error::Validation(format!("run {} published without ARK and artifact", r.id)));
        }
        if !published && r.state != RunState::Archived && r.ark.is_some() {
            return Err(Error::Validation(format!("run {} carries an ARK but is {}", r.id, r.state)));
        }
        let res = self.conn.execute(
            "UPDATE runs SET state = ?2, doc = ?3 WHERE id = ?1",
            params![r.id.0, r.state.as_str(), doc(r)?],
        );
        match res {
            Ok(_) => Ok(()),
            Err(e) if is_unique_violation(&e) => Err(Error::RunAlreadyActive(r.site_id.0)),
            Err(e) => Err(e.into()),
        }
    }

    pub fn run(&self, id: RunId) -> Result<RunRecord> {
        self.one_doc("SELECT doc FROM runs WHERE id = ?1", id.0, "run")
    }

    pub fn runs_for_site(&self, site: SiteId) -> Result<Vec<RunRecord>> {
        self.docs("SELECT doc FROM runs WHERE site_id = ?1 ORDER BY id", params![site.0])
    }

    pub fn runs(&self) -> Result<Vec<RunRecord>> {
        self.docs("SELECT doc FROM runs ORDER BY id", [])
    }

    pub fn runs_in_state(&self, state: RunState) -> Result<Vec<RunRecord>> {
        self.docs("SELECT doc FROM runs WHERE state = ?1 ORDER BY id", params![state.as_str()])
    }

    pub fn active_run(&self, site: SiteId) -> Result<Option<RunRecord>> {
        Ok(self
            .docs::<RunRecord>(
                "SELECT doc FROM runs WHERE site_id = ?1 AND state NOT IN ('PUBLISHED', 'FAILED', 'ARCHIVED')",
                params![site.0],
            )?
            .into_iter()
            .next())
    }

    pub fn latest_published_run(&self, site: SiteId) -> Result<Option<RunRecord>> {
        Ok(self
            .docs::<RunRecord>(
                "SELECT doc FROM runs WHERE site_id = ?1 AND state = 'PUBLISHED' ORDER BY id DESC LIMIT 1",
                params![site.0],
            )?
            .into_iter()
            .next())
    }

    pub fn transition_run(&self, id: RunId, event: RunEvent) -> Result<RunRecord> {
        let mut r = self.run(id)?;
        r.apply(event, self.now)?;
        self.put_run(&r)?;
        Ok(r)
    }

    // ---- arks ----

    /// Registry view that reserves names for `run` inside this transaction.
    pub fn ark_registry(&self, run: Option<RunId>) -> TxArkRegistry<'_, 'a> {
        TxArkRegistry { tx: self, run }
    }

    pub fn insert_ark(&self, ark: &ArkName, run: Option<RunId>) -> Result<bool> {
        let n = self.conn.execute(
            "INSERT OR IGNORE INTO arks (name, naan, run_id, created_at, doc) VALUES (?1, ?2, ?3, ?4, ?5)",
            params![ark.to_string(), ark.naan, run.map(|r| r.0), to_millis(self.now), doc(ark)?],
        );
        match n {
            Ok(n) => Ok(n == 1),
            Err(e) if is_unique_violation(&e) => Ok(false),
            Err(e) => Err(e.into()),
        }
    }

    pub fn ark_entry(&self, ark: &ArkName) -> Result<ArkEntry> {
        self.conn
            .query_row(
                "SELECT doc, run_id, target, metadata, created_at FROM arks WHERE name = ?1",
                params![ark.to_string()],
                |r| {
                    Ok((
                        r.get::<_, String>(0)?,
                        r.get::<_, Option<i64>>(1)?,
                        r.get::<_, Option<String>>(2)?,
                        r.get::<_, String>(3)?,
                        r.get::<_, i64>(4)?,
                    ))
                },
            )
            .optional()?
            .map(|(d, run, target, metadata, created)| {
                Ok(ArkEntry {
                    ark: undoc(d)?,
                    run_id: run.map(RunId),
                    target,
                    metadata,
                    created_at: from_millis(created),
                })
            })
            .unwrap_or_else(|| Err(ArkError::Unknown(ark.to_string()).into()))
    }

    pub fn ark_entries(&self) -> Result<Vec<ArkEntry>> {
        let names: Vec<String> = self.docs("SELECT doc FROM arks ORDER BY created_at, name", [])
            .map(|v: Vec<ArkName>| v.into_iter().map(|a| a.to_string()).collect())?;
        names
            .iter()
            .map(|n| self.ark_entry(&crate::ark::parse(n)?))
            .collect()
    }

    /// Sets the redirect target (write-once) and the metadata document.
    pub fn bind_ark(&self, ark: &ArkName, metadata: &serde_json::Value, target: &str) -> Result<ArkEntry> {
        let entry = self.ark_entry(ark)?;
        if entry.target.is_some() {
            return Err(ArkError::AlreadyBound(ark.to_string()).into());
        }
        self.conn.execute(
            "UPDATE arks SET target = ?2, metadata = ?3 WHERE name = ?1",
            params![ark.to_string(), target, serde_json::to_string(metadata)?],
        )?;
        self.ark_entry(ark)
    }

    pub fn update_ark_metadata(&self, ark: &ArkName, metadata: &serde_json::Value) -> Result<ArkEntry> {
        self.ark_entry(ark)?;
        self.conn.execute(
            "UPDATE arks SET metadata = ?2 WHERE name = ?1",
            params![ark.to_string(), serde_json::to_string(metadata)?],
        )?;
        self.ark_entry(ark)
    }

    pub fn resolve_ark(&self, ark: &ArkName) -> Result<Resolution> {
        let entry = self.ark_entry(ark)?;
        let archived = match entry.run_id {
            Some(run) => self.run(run)?.state == RunState::Archived,
            None => false,
        };
        Ok(if archived { Resolution::Gone(entry) } else { Resolution::Live(entry) })
    }

    // ---- operator requests ----

    pub fn add_request(&self, kind: &str, body: serde_json::Value) -> Result<RequestRecord> {
        self.conn.execute(
            "INSERT INTO requests (kind, created_at, doc) VALUES (?1, ?2, ?3)",
            params![kind, to_millis(self.now), serde_json::to_string(&body)?],
        )?;
        Ok(RequestRecord {
            id: self.conn.last_insert_rowid(),
            kind: kind.to_owned(),
            created_at: self.now,
            body,
        })
    }

    pub fn requests(&self, kind: &str) -> Result<Vec<RequestRecord>> {
        let mut stmt = self
            .conn
            .prepare("SELECT id, created_at, doc FROM requests WHERE kind = ?1 ORDER BY id")?;
        let rows = stmt.query_map(params![kind], |r| {
            Ok((r.get::<_, i64>(0)?, r.get::<_, i64>(1)?, r.get::<_, String>(2)?))
        })?;
        let mut out = Vec::new();
        for row in rows {
            let (id, at, body) = row?;
            out.push(RequestRecord {
                id,
                kind: kind.to_owned(),
                created_at: from_millis(at),
                body: serde_json::from_str(&body)?,
            });
        }
        Ok(out)
    }

    // ---- leases and periodic bookkeeping ----

    /// Takes or renews a named lease. Returns false while another owner
    /// holds an unexpired lease.
    pub fn try_acquire_lease(&self, name: &str, owner: &str, ttl: Duration) -> Result<bool> {
        let held: Option<(String, i64)> = self
            .conn
            .query_row(
                "SELECT owner, expires_at FROM leases WHERE name = ?1",
                params![name],
                |r| Ok((r.get(0)?, r.get(1)?)),
            )
            .optional()?;
        if let Some((holder, expires)) = held {
            if holder != owner && expires > to_millis(self.now) {
                return Ok(false);
            }
        }
        self.conn.execute(
            "INSERT INTO leases (name, owner, expires_at) VALUES (?1, ?2, ?3)
             ON CONFLICT(name) DO UPDATE SET owner = excluded.owner, expires_at = excluded.expires_at",
            params![name, owner, to_millis(self.now + ttl)],
        )?;
        Ok(true)
    }

    pub fn release_lease(&self, name: &str, owner: &str) -> Result<()> {
        self.conn.execute(
            "DELETE FROM leases WHERE name = ?1 AND owner = ?2",
            params![name, owner],
        )?;
        Ok(())
    }

    pub fn last_fire(&self, name: &str) -> Result<Option<DateTime<Utc>>> {
        Ok(self
            .conn
            .query_row("SELECT last_fire FROM periodic WHERE name = ?1", params![name], |r| r.get::<_, i64>(0))
            .optional()?
            .map(from_millis))
    }

    pub fn set_last_fire(&self, name: &str, at: DateTime<Utc>) -> Result<()> {
        self.conn.execute(
            "INSERT INTO periodic (name, last_fire) VALUES (?1, ?2)
             ON CONFLICT(name) DO UPDATE SET last_fire = excluded.last_fire",
            params![name, to_millis(at)],
        )?;
        Ok(())
    }

    pub fn log_task(&self, name: &str, started_at: DateTime<Utc>, detail: serde_json::Value) -> Result<TaskLogEntry> {
        self.conn.execute(
            "INSERT INTO task_log (name, started_at, finished_at, detail) VALUES (?1, ?2, ?3, ?4)",
            params![name, to_millis(started_at), to_millis(self.now), serde_json::to_string(&detail)?],
        )?;
        Ok(TaskLogEntry {
            id: self.conn.last_insert_rowid(),
            name: name.to_owned(),
            started_at,
            finished_at: self.now,
            detail,
        })
    }

    pub fn task_log(&self, name: &str) -> Result<Vec<TaskLogEntry>> {
        let mut stmt = self.conn.prepare(
            "SELECT id, started_at, finished_at, detail FROM task_log WHERE name = ?1 ORDER BY id",
        )?;
        let rows = stmt.query_map(params![name], |r| {
            Ok((r.get::<_, i64>(0)?, r.get::<_, i64>(1)?, r.get::<_, i64>(2)?, r.get::<_, String>(3)?))
        })?;
        let mut out = Vec::new();
        for row in rows {
            let (id, s, f, d) = row?;
            out.push(TaskLogEntry {
                id,
                name: name.to_owned(),
                started_at: from_millis(s),
                finished_at: from_millis(f),
                detail: serde_json::from_str(&d)?,
            });
        }
        Ok(out)
    }

    // ---- snapshots ----

    /// Every domain record, ordered by key. Queue bookkeeping is excluded.
    pub fn export_state(&self) -> Result<serde_json::Value> {
        let table = |sql: &str| -> Result<Vec<serde_json::Value>> { self.docs(sql, []) };
        let arks: Vec<ArkEntry> = self.ark_entries()?;
        let mut requests = self.requests("site")?;
        requests.extend(self.requests("highres")?);
        Ok(serde_json::json!({
            "sites": table("SELECT doc FROM sites ORDER BY id")?,
            "contributors": table("SELECT doc FROM contributors ORDER BY id")?,
            "contributions": table("SELECT doc FROM contributions ORDER BY id")?,
            "images": table("SELECT doc FROM images ORDER BY id")?,
            "runs": table("SELECT doc FROM runs ORDER BY id")?,
            "arks": arks,
            "requests": requests,
        }))
    }
}

pub struct TxArkRegistry<'t, 'a> {
    tx: &'t Tx<'a>,
    run: Option<RunId>,
}

impl ArkRegistry for TxArkRegistry<'_, '_> {
    type Error = Error;

    fn try_register(&mut self, ark: &ArkName) -> Result<bool> {
        self.tx.insert_ark(ark, self.run)
    }
}
