//! At-least-once job queue over the shared store.
//!
//! Claims take a visibility lease; a job whose lease lapses without an ack
//! becomes claimable again, or dead once its attempts are used up. The
//! idempotency key (kind, payload digest) makes enqueueing a duplicate a
//! no-op that returns the existing job.

use chrono::{DateTime, Duration, Utc};
use heritage_core::clock::{from_millis, to_millis};
use heritage_core::config::QueueConfig;
use heritage_core::{Error, Result, Store, Tx};
use rusqlite::{params, OptionalExtension, Row};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backend::sha256_hex;

pub const BACKOFF_BASE_SECS: i64 = 30;
pub const BACKOFF_CAP_SECS: i64 = 15 * 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobKind {
    PreprocessImage,
    ExecuteRun,
    Periodic,
}

impl JobKind {
    pub fn as_str(self) -> &'static str {
        match self {
            JobKind::PreprocessImage => "PREPROCESS_IMAGE",
            JobKind::ExecuteRun => "EXECUTE_RUN",
            JobKind::Periodic => "PERIODIC",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [JobKind::PreprocessImage, JobKind::ExecuteRun, JobKind::Periodic]
            .into_iter()
            .find(|k| k.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Ready,
    Claimed,
    Done,
    Dead,
}

impl JobState {
    fn as_str(self) -> &'static str {
        match self {
            JobState::Ready => "ready",
            JobState::Claimed => "claimed",
            JobState::Done => "done",
            JobState::Dead => "dead",
        }
    }

    fn parse(s: &str) -> Self {
        match s {
            "claimed" => JobState::Claimed,
            "done" => JobState::Done,
            "dead" => JobState::Dead,
            _ => JobState::Ready,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobEnvelope {
    pub id: i64,
    pub kind: JobKind,
    pub payload: Value,
    pub priority: i64,
    pub attempts: u32,
    pub max_attempts: u32,
    pub not_before: DateTime<Utc>,
    pub state: JobState,
    pub claimed_by: Option<String>,
    pub lease_until: Option<DateTime<Utc>>,
    pub last_error: Option<String>,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Enqueued {
    pub id: i64,
    /// False when an identical job already existed.
    pub created: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NackOutcome {
    Requeued { not_before: DateTime<Utc> },
    Dead,
    /// The caller no longer held the claim.
    Stale,
}

const COLUMNS: &str =
    "id, kind, payload, priority, attempts, max_attempts, not_before, state, claimed_by, lease_until, last_error, created_at";

fn envelope(r: &Row<'_>) -> rusqlite::Result<JobEnvelope> {
    let kind: String = r.get(1)?;
    let payload: String = r.get(2)?;
    let state: String = r.get(7)?;
    Ok(JobEnvelope {
        id: r.get(0)?,
        kind: JobKind::parse(&kind).unwrap_or(JobKind::Periodic),
        payload: serde_json::from_str(&payload).unwrap_or(Value::Null),
        priority: r.get(3)?,
        attempts: r.get(4)?,
        max_attempts: r.get(5)?,
        not_before: from_millis(r.get(6)?),
        state: JobState::parse(&state),
        claimed_by: r.get(8)?,
        lease_until: r.get::<_, Option<i64>>(9)?.map(from_millis),
        last_error: r.get(10)?,
        created_at: from_millis(r.get(11)?),
    })
}

/// Delay before retry `attempts` (1-based): 30 s doubling, capped at 15 min.
pub fn backoff(attempts: u32) -> Duration {
    let exp = attempts.saturating_sub(1).min(20);
    Duration::seconds((BACKOFF_BASE_SECS << exp).min(BACKOFF_CAP_SECS))
}

pub fn idempotency_key(kind: JobKind, payload: &Value) -> String {
    format!("{}:{}", kind.as_str(), sha256_hex(payload.to_string().as_bytes()))
}

/// Inserts a job inside an open transaction, so it commits atomically with
/// whatever record change made it necessary.
pub fn enqueue_in(tx: &Tx<'_>, kind: JobKind, payload: &Value, priority: i64, max_attempts: u32) -> Result<Enqueued> {
    let key = idempotency_key(kind, payload);
    let now = to_millis(tx.now());
    let inserted = tx.conn().execute(
        "INSERT INTO jobs (kind, payload, idem_key, priority, attempts, max_attempts, not_before, state, created_at)
         VALUES (?1, ?2, ?3, ?4, 0, ?5, ?6, 'ready', ?6)
         ON CONFLICT(idem_key) DO NOTHING",
        params![kind.as_str(), payload.to_string(), key, priority, max_attempts.max(1), now],
    )?;
    if inserted == 1 {
        return Ok(Enqueued {
            id: tx.conn().last_insert_rowid(),
            created: true,
        });
    }
    let id = tx
        .conn()
        .query_row("SELECT id FROM jobs WHERE idem_key = ?1", params![key], |r| r.get(0))?;
    Ok(Enqueued { id, created: false })
}

#[derive(Debug, Clone)]
pub struct Queue {
    store: Store,
    pub visibility: Duration,
    pub max_attempts: u32,
}

impl Queue {
    pub fn new(store: Store, cfg: &QueueConfig) -> Self {
        Self {
            store,
            visibility: Duration::seconds(cfg.visibility_timeout as i64),
            max_attempts: cfg.max_attempts.max(1),
        }
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn enqueue(&self, kind: JobKind, payload: Value) -> Result<Enqueued> {
        self.enqueue_with_priority(kind, payload, 0)
    }

    pub fn enqueue_with_priority(&self, kind: JobKind, payload: Value, priority: i64) -> Result<Enqueued> {
        self.store
            .write(|tx| enqueue_in(tx, kind, &payload, priority, self.max_attempts))
    }

    /// Returns lapsed claims to the queue or the dead set.
    fn expire(tx: &Tx<'_>) -> Result<()> {
        let now = to_millis(tx.now());
        tx.conn().execute(
            "UPDATE jobs SET state = 'dead', claimed_by = NULL, lease_until = NULL,
                 last_error = COALESCE(last_error, 'visibility timeout')
             WHERE state = 'claimed' AND lease_until <= ?1 AND attempts >= max_attempts",
            params![now],
        )?;
        tx.conn().execute(
            "UPDATE jobs SET state = 'ready', claimed_by = NULL, lease_until = NULL, not_before = ?1
             WHERE state = 'claimed' AND lease_until <= ?1",
            params![now],
        )?;
        Ok(())
    }

    /// Highest priority first, FIFO within a priority.
    pub fn claim(&self, worker: &str) -> Result<Option<JobEnvelope>> {
        self.store.write(|tx| {
            Self::expire(tx)?;
            let now = to_millis(tx.now());
            let id: Option<i64> = tx
                .conn()
                .query_row(
                    "SELECT id FROM jobs WHERE state = 'ready' AND not_before <= ?1
                     ORDER BY priority DESC, id ASC LIMIT 1",
                    params![now],
                    |r| r.get(0),
                )
                .optional()?;
            let Some(id) = id else { return Ok(None) };
            tx.conn().execute(
                "UPDATE jobs SET state = 'claimed', claimed_by = ?2, lease_until = ?3, attempts = attempts + 1
                 WHERE id = ?1",
                params![id, worker, to_millis(tx.now() + self.visibility)],
            )?;
            Self::job_in(tx, id).map(Some)
        })
    }

    fn job_in(tx: &Tx<'_>, id: i64) -> Result<JobEnvelope> {
        tx.conn()
            .query_row(&format!("SELECT {COLUMNS} FROM jobs WHERE id = ?1"), params![id], envelope)
            .optional()?
            .ok_or_else(|| Error::not_found("job", id))
    }

    fn holds(tx: &Tx<'_>, id: i64, worker: &str) -> Result<bool> {
        let n: i64 = tx.conn().query_row(
            "SELECT COUNT(*) FROM jobs WHERE id = ?1 AND state = 'claimed' AND claimed_by = ?2",
            params![id, worker],
            |r| r.get(0),
        )?;
        Ok(n == 1)
    }

    /// Completes a claim. A worker whose claim lapsed gets `false`.
    pub fn ack(&self, id: i64, worker: &str) -> Result<bool> {
        self.store.write(|tx| {
            Ok(tx.conn().execute(
                "UPDATE jobs SET state = 'done', lease_until = NULL
                 WHERE id = ?1 AND state = 'claimed' AND claimed_by = ?2",
                params![id, worker],
            )? == 1)
        })
    }

    /// Gives a claim back after a failure. With no explicit delay the
    /// exponential backoff applies.
    pub fn nack(&self, id: i64, worker: &str, delay: Option<Duration>, error: &str) -> Result<NackOutcome> {
        self.store.write(|tx| {
            if !Self::holds(tx, id, worker)? {
                return Ok(NackOutcome::Stale);
            }
            let job = Self::job_in(tx, id)?;
            if job.attempts >= job.max_attempts {
                tx.conn().execute(
                    "UPDATE jobs SET state = 'dead', claimed_by = NULL, lease_until = NULL, last_error = ?2 WHERE id = ?1",
                    params![id, error],
                )?;
                return Ok(NackOutcome::Dead);
            }
            let at = tx.now() + delay.unwrap_or_else(|| backoff(job.attempts));
            tx.conn().execute(
                "UPDATE jobs SET state = 'ready', claimed_by = NULL, lease_until = NULL, not_before = ?2, last_error = ?3
                 WHERE id = ?1",
                params![id, to_millis(at), error],
            )?;
            Ok(NackOutcome::Requeued { not_before: at })
        })
    }

    /// Returns a claim without spending an attempt, for work that could not
    /// start (for example, another worker holds the site).
    pub fn release(&self, id: i64, worker: &str, delay: Duration) -> Result<bool> {
        self.store.write(|tx| {
            Ok(tx.conn().execute(
                "UPDATE jobs SET state = 'ready', claimed_by = NULL, lease_until = NULL, not_before = ?3,
                     attempts = MAX(attempts - 1, 0)
                 WHERE id = ?1 AND state = 'claimed' AND claimed_by = ?2",
                params![id, worker, to_millis(tx.now() + delay)],
            )? == 1)
        })
    }

    /// Pushes the visibility lease forward for a long-running claim.
    pub fn extend(&self, id: i64, worker: &str) -> Result<bool> {
        self.store.write(|tx| {
            Ok(tx.conn().execute(
                "UPDATE jobs SET lease_until = ?3 WHERE id = ?1 AND state = 'claimed' AND claimed_by = ?2",
                params![id, worker, to_millis(tx.now() + self.visibility)],
            )? == 1)
        })
    }

    /// Makes a finished or dead job deliverable again. Dead jobs get their
    /// attempts back.
    pub fn replay(&self, id: i64) -> Result<bool> {
        self.store.write(|tx| {
            Ok(tx.conn().execute(
                "UPDATE jobs SET state = 'ready', not_before = ?2, claimed_by = NULL, lease_until = NULL,
                     attempts = CASE WHEN state = 'dead' THEN 0 ELSE attempts END
                 WHERE id = ?1 AND state IN ('done', 'dead')",
                params![id, to_millis(tx.now())],
            )? == 1)
        })
    }

    pub fn job(&self, id: i64) -> Result<JobEnvelope> {
        self.store.read(|tx| Self::job_in(tx, id))
    }

    pub fn jobs_in_state(&self, state: JobState) -> Result<Vec<JobEnvelope>> {
        self.store.read(|tx| {
            let mut stmt = tx
                .conn()
                .prepare(&format!("SELECT {COLUMNS} FROM jobs WHERE state = ?1 ORDER BY id"))?;
            let rows = stmt.query_map(params![state.as_str()], envelope)?;
            Ok(rows.collect::<rusqlite::Result<Vec<_>>>()?)
        })
    }

    pub fn all_jobs(&self) -> Result<Vec<JobEnvelope>> {
        self.store.read(|tx| {
            let mut stmt = tx.conn().prepare(&format!("SELECT {COLUMNS} FROM jobs ORDER BY id"))?;
            let rows = stmt.query_map([], envelope)?;
            Ok(rows.collect::<rusqlite::Result<Vec<_>>>()?)
        })
    }

    pub fn dead_letters(&self) -> Result<Vec<JobEnvelope>> {
        self.jobs_in_state(JobState::Dead)
    }

    /// Jobs not yet finished: ready or claimed.
    pub fn depth(&self) -> Result<usize> {
        depth(&self.store)
    }
}

pub fn depth(store: &Store) -> Result<usize> {
    store.read(|tx| {
        let n: i64 = tx.conn().query_row(
            "SELECT COUNT(*) FROM jobs WHERE state IN ('ready', 'claimed')",
            [],
            |r| r.get(0),
        )?;
        Ok(n as usize)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use heritage_core::clock::Clock;
    use heritage_core::ManualClock;
    use serde_json::json;
    use std::sync::Arc;

    fn queue(max_attempts: u32) -> (Queue, ManualClock) {
        let clock = ManualClock::epoch();
        let store = Store::open_in_memory(Arc::new(clock.clone())).unwrap();
        let cfg = QueueConfig {
            visibility_timeout: 60,
            max_attempts,
        };
        (Queue::new(store, &cfg), clock)
    }

    #[test]
    fn enqueue_then_claim_returns_payload() {
        let (q, _) = queue(3);
        let e = q.enqueue(JobKind::ExecuteRun, json!({"run_id": 4})).unwrap();
        assert!(e.created);
        let j = q.claim("w").unwrap().unwrap();
        assert_eq!((j.id, j.payload.clone(), j.attempts), (e.id, json!({"run_id": 4}), 1));
        assert!(q.claim("w2").unwrap().is_none());
        assert!(q.ack(j.id, "w").unwrap());
        assert_eq!(q.job(j.id).unwrap().state, JobState::Done);
    }

    #[test]
    fn duplicates_collapse() {
        let (q, _) = queue(3);
        let a = q.enqueue(JobKind::PreprocessImage, json!({"image_id": 1})).unwrap();
        let b = q.enqueue(JobKind::PreprocessImage, json!({"image_id": 1})).unwrap();
        assert_eq!(a.id, b.id);
        assert!(!b.created);
        let c = q.enqueue(JobKind::ExecuteRun, json!({"image_id": 1})).unwrap();
        assert_ne!(a.id, c.id);
    }

    #[test]
    fn visibility_timeout_redelivers() {
        let (q, clock) = queue(3);
        q.enqueue(JobKind::ExecuteRun, json!({"run_id": 1})).unwrap();
        let j = q.claim("a").unwrap().unwrap();
        clock.advance(Duration::seconds(59));
        assert!(q.claim("b").unwrap().is_none());
        clock.advance(Duration::seconds(1));
        let again = q.claim("b").unwrap().unwrap();
        assert_eq!((again.id, again.attempts), (j.id, 2));
        assert!(!q.ack(j.id, "a").unwrap(), "lapsed claim cannot ack");
        assert!(q.ack(j.id, "b").unwrap());
    }

    #[test]
    fn three_nacks_dead_letter() {
        let (q, clock) = queue(3);
        q.enqueue(JobKind::ExecuteRun, json!({"run_id": 1})).unwrap();
        let mut delays = Vec::new();
        for _ in 0..3 {
            let j = q.claim("w").unwrap().unwrap();
            match q.nack(j.id, "w", None, "boom").unwrap() {
                NackOutcome::Requeued { not_before } => {
                    delays.push((not_before - clock.now()).num_seconds());
                    clock.set(not_before);
                }
                NackOutcome::Dead => delays.push(-1),
                NackOutcome::Stale => panic!(),
            }
        }
        assert_eq!(delays, vec![30, 60, -1]);
        assert_eq!(q.dead_letters().unwrap().len(), 1);
        assert!(q.claim("w").unwrap().is_none());
        assert!(q.replay(q.dead_letters().unwrap()[0].id).unwrap());
        assert_eq!(q.claim("w").unwrap().unwrap().attempts, 1);
    }

    #[test]
    fn lapsed_final_attempt_goes_dead() {
        let (q, clock) = queue(1);
        q.enqueue(JobKind::ExecuteRun, json!({"run_id": 1})).unwrap();
        q.claim("w").unwrap().unwrap();
        clock.advance(Duration::seconds(61));
        assert!(q.claim("w").unwrap().is_none());
        assert_eq!(q.dead_letters().unwrap()[0].last_error.as_deref(), Some("visibility timeout"));
    }

    #[test]
    fn backoff_schedule() {
        let secs: Vec<i64> = (1..=7).map(|a| backoff(a).num_seconds()).collect();
        assert_eq!(secs, vec![30, 60, 120, 240, 480, 900, 900]);
        assert_eq!(backoff(u32::MAX).num_seconds(), 900);
    }

    #[test]
    fn priority_then_fifo() {
        let (q, _) = queue(3);
        let a = q.enqueue(JobKind::PreprocessImage, json!({"image_id": 1})).unwrap();
        let b = q.enqueue(JobKind::PreprocessImage, json!({"image_id": 2})).unwrap();
        let c = q.enqueue_with_priority(JobKind::Periodic, json!({"name": "x"}), 5).unwrap();
        let order: Vec<i64> = (0..3).map(|_| q.claim("w").unwrap().unwrap().id).collect();
        assert_eq!(order, vec![c.id, a.id, b.id]);
    }

    #[test]
    fn release_keeps_attempts_and_delays() {
        let (q, clock) = queue(3);
        q.enqueue(JobKind::ExecuteRun, json!({"run_id": 1})).unwrap();
        let j = q.claim("w").unwrap().unwrap();
        assert!(q.release(j.id, "w", Duration::seconds(10)).unwrap());
        assert!(q.claim("w").unwrap().is_none());
        clock.advance(Duration::seconds(10));
        assert_eq!(q.claim("w").unwrap().unwrap().attempts, 1);
        assert_eq!(q.depth().unwrap(), 1);
    }

    #[derive(Debug, Clone)]
    enum Op {
        Enqueue(u8),
        Claim(usize),
        Ack(usize),
        Nack(usize),
        Advance(i64),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0u8..6).prop_map(Op::Enqueue),
            (0usize..3).prop_map(Op::Claim),
            (0usize..3).prop_map(Op::Ack),
            (0usize..3).prop_map(Op::Nack),
            (0i64..4000).prop_map(Op::Advance),
        ]
    }

    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn jobs_are_never_lost_or_doubly_completed(ops in proptest::collection::vec(op(), 1..60)) {
            let (q, clock) = queue(3);
            let workers = ["w0", "w1", "w2"];
            let mut held: Vec<Option<i64>> = vec![None; 3];
            let mut payloads = std::collections::BTreeSet::new();
            let mut acked = std::collections::BTreeSet::new();
            for op in ops {
                match op {
                    Op::Enqueue(k) => {
                        q.enqueue(JobKind::PreprocessImage, json!({"image_id": k})).unwrap();
                        payloads.insert(k);
                    }
                    Op::Claim(w) => {
                        if let Some(j) = q.claim(workers[w]).unwrap() {
                            prop_assert!(!acked.contains(&j.id), "completed job redelivered");
                            held[w] = Some(j.id);
                        }
                    }
                    Op::Ack(w) => {
                        if let Some(id) = held[w].take() {
                            if q.ack(id, workers[w]).unwrap() {
                                prop_assert!(acked.insert(id));
                            }
                        }
                    }
                    Op::Nack(w) => {
                        if let Some(id) = held[w].take() {
                            q.nack(id, workers[w], None, "x").unwrap();
                        }
                    }
                    Op::Advance(s) => clock.advance(Duration::seconds(s)),
                }
                let jobs = q.all_jobs().unwrap();
                prop_assert_eq!(jobs.len(), payloads.len());
                for j in &jobs {
                    prop_assert!(j.attempts <= j.max_attempts);
                    prop_assert!(j.state != JobState::Claimed || (j.claimed_by.is_some() && j.lease_until.is_some()));
                    prop_assert_eq!(j.state == JobState::Done, acked.contains(&j.id));
                }
            }
            // drain: everything ends done or dead
            for _ in 0..50 {
                clock.advance(Duration::hours(1));
                while let Some(j) = q.claim("drain").unwrap() {
                    q.ack(j.id, "drain").unwrap();
                }
            }
            for j in q.all_jobs().unwrap() {
                prop_assert!(matches!(j.state, JobState::Done | JobState::Dead), "{:?}", j);
            }
        }
    }
}
