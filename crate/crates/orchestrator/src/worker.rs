//! Job dispatch.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use chrono::{Duration, TimeZone, Utc};
use heritage_core::{Config, Error, ImageId, RunId, Store};
use heritage_ingest::Ingestor;

use crate::pipeline::{ExecError, ExecOutcome, Executor, TIMEOUT};
use crate::periodic::Scheduler;
use crate::preprocess::{preprocess_image, PreprocessOutcome};
use crate::queue::{backoff, JobEnvelope, JobKind, NackOutcome, Queue};

/// Delay before a job whose site is busy is offered again.
pub const BUSY_DELAY_SECS: i64 = 30;

#[derive(Debug, Clone, PartialEq)]
pub enum Disposition {
    Done(String),
    Retry { delay: Option<Duration>, error: String },
    Release { delay: Duration },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    Acked(JobEnvelope, String),
    Retried(JobEnvelope, NackOutcome),
    Released(JobEnvelope),
    /// The claim lapsed while the handler ran; another worker owns it now.
    Lost(JobEnvelope),
}

pub struct Worker {
    pub id: String,
    pub queue: Queue,
    pub executor: Arc<Executor>,
    pub ingestor: Arc<Ingestor>,
    pub scheduler: Option<Arc<Scheduler>>,
    pub config: Arc<Config>,
}

fn payload_id(job: &JobEnvelope, key: &str) -> Result<i64, String> {
    job.payload[key]
        .as_i64()
        .ok_or_else(|| format!("job {} payload lacks {key}", job.id))
}

impl Worker {
    pub fn new(
        id: impl Into<String>,
        store: Store,
        config: Arc<Config>,
        executor: Arc<Executor>,
        ingestor: Arc<Ingestor>,
        scheduler: Option<Arc<Scheduler>>,
    ) -> Self {
        Self {
            id: id.into(),
            queue: Queue::new(store, &config.queue),
            executor,
            ingestor,
            scheduler,
            config,
        }
    }

    pub fn store(&self) -> &Store {
        self.queue.store()
    }

    /// Runs the handler for a job without touching its queue state.
    pub fn handle(&self, job: &JobEnvelope) -> Disposition {
        let last_try = job.attempts >= job.max_attempts;
        match job.kind {
            JobKind::ExecuteRun => {
                let run = match payload_id(job, "run_id") {
                    Ok(r) => RunId(r),
                    Err(e) => return Disposition::Done(e),
                };
                let mut heartbeat = || {
                    let _ = self.queue.extend(job.id, &self.id);
                };
                match self.executor.execute_run(run, &self.id, &mut heartbeat) {
                    Ok(ExecOutcome::Published(r)) => Disposition::Done(format!("run {} published", r.id)),
                    Ok(ExecOutcome::Failed(r)) => Disposition::Done(format!("run {} failed", r.id)),
                    Ok(ExecOutcome::Unchanged(r)) => Disposition::Done(format!("run {} already {}", r.id, r.state)),
                    Ok(ExecOutcome::Busy) => Disposition::Release {
                        delay: Duration::seconds(BUSY_DELAY_SECS),
                    },
                    Err(e) if !e.retryable() => Disposition::Done(e.to_string()),
                    Err(e) if last_try => {
                        let msg = match &e {
                            ExecError::StageTimedOut { stage } => format!("{TIMEOUT}({stage})"),
                            other => other.to_string(),
                        };
                        match self.executor.fail_run(run, &msg) {
                            Ok(_) => Disposition::Done(msg),
                            Err(err) => Disposition::Retry {
                                delay: None,
                                error: err.to_string(),
                            },
                        }
                    }
                    Err(e) => Disposition::Retry {
                        delay: None,
                        error: e.to_string(),
                    },
                }
            }
            JobKind::PreprocessImage => {
                let id = match payload_id(job, "image_id") {
                    Ok(i) => ImageId(i),
                    Err(e) => return Disposition::Done(e),
                };
                match preprocess_image(self.store(), &self.ingestor, &self.config, id) {
                    Ok(PreprocessOutcome::Raced) => Disposition::Retry {
                        delay: Some(Duration::zero()),
                        error: "image changed while scoring".into(),
                    },
                    Ok(o) => Disposition::Done(format!("{o:?}")),
                    Err(Error::NotFound { .. }) => Disposition::Done(format!("image {id} is gone")),
                    Err(e) => Disposition::Retry {
                        delay: None,
                        error: e.to_string(),
                    },
                }
            }
            JobKind::Periodic => {
                let Some(s) = &self.scheduler else {
                    return Disposition::Release {
                        delay: Duration::seconds(60),
                    };
                };
                let name = job.payload["name"].as_str().unwrap_or_default();
                let tick = job.payload["tick"]
                    .as_i64()
                    .and_then(|ms| Utc.timestamp_millis_opt(ms).single())
                    .unwrap_or_else(|| self.store().now());
                match s.run_task(name, tick) {
                    Ok(detail) => Disposition::Done(detail.to_string()),
                    Err(Error::NotFound { .. }) => Disposition::Done(format!("unknown periodic task {name:?}")),
                    Err(e) => Disposition::Retry {
                        delay: None,
                        error: e.to_string(),
                    },
                }
            }
        }
    }

    /// Fails runs whose EXECUTE_RUN job was dead-lettered.
    pub fn reap(&self) -> Result<Vec<RunId>, Error> {
        let mut failed = Vec::new();
        for job in self.queue.dead_letters()? {
            if job.kind != JobKind::ExecuteRun {
                continue;
            }
            let Ok(id) = payload_id(&job, "run_id") else { continue };
            let why = format!("DEAD_LETTER: {}", job.last_error.as_deref().unwrap_or("attempts exhausted"));
            if self.executor.fail_run(RunId(id), &why)?.is_some() {
                failed.push(RunId(id));
            }
        }
        Ok(failed)
    }

    fn settle(&self, job: JobEnvelope, d: Disposition) -> Result<Step, Error> {
        Ok(match d {
            Disposition::Done(note) => {
                if self.queue.ack(job.id, &self.id)? {
                    Step::Acked(job, note)
                } else {
                    Step::Lost(job)
                }
            }
            Disposition::Retry { delay, error } => match self.queue.nack(job.id, &self.id, delay, &error)? {
                NackOutcome::Stale => Step::Lost(job),
                o => Step::Retried(job, o),
            },
            Disposition::Release { delay } => {
                if self.queue.release(job.id, &self.id, delay)? {
                    Step::Released(job)
                } else {
                    Step::Lost(job)
                }
            }
        })
    }

    /// One scheduler tick, at most one job and one reap pass.
    pub fn step(&self) -> Result<Option<Step>, Error> {
        if let Some(s) = &self.scheduler {
            s.tick(&self.id)?;
        }
        // claiming expires lapsed claims, so reap afterwards
        let claimed = self.queue.claim(&self.id)?;
        self.reap()?;
        let Some(job) = claimed else {
            return Ok(None);
        };
        let d = self.handle(&job);
        if let Disposition::Retry { error, .. } = &d {
            tracing::warn!(job = job.id, kind = job.kind.as_str(), %error, "job failed");
        }
        self.settle(job, d).map(Some)
    }

    /// Steps until no job is ready, up to `max_steps`.
    pub fn run_until_idle(&self, max_steps: usize) -> Result<Vec<Step>, Error> {
        let mut steps = Vec::new();
        while steps.len() < max_steps {
            match self.step()? {
                Some(s) => steps.push(s),
                None => break,
            }
        }
        Ok(steps)
    }
}

/// Runs each worker on its own thread until `stop` is set. A panicking
/// handler leaves its job claimed, to be redelivered after the visibility
/// timeout, and the thread carries on.
pub fn spawn_pool(workers: Vec<Arc<Worker>>, stop: Arc<AtomicBool>, idle: std::time::Duration) -> Vec<JoinHandle<()>> {
    workers
        .into_iter()
        .map(|w| {
            let stop = stop.clone();
            std::thread::spawn(move || {
                while !stop.load(Ordering::Relaxed) {
                    match catch_unwind(AssertUnwindSafe(|| w.step())) {
                        Ok(Ok(Some(_))) => {}
                        Ok(Ok(None)) => std::thread::sleep(idle),
                        Ok(Err(e)) => {
                            tracing::error!(worker = %w.id, error = %e, "worker step failed");
                            std::thread::sleep(idle);
                        }
                        Err(_) => tracing::error!(worker = %w.id, "handler panicked; job left for redelivery"),
                    }
                }
            })
        })
        .collect()
}

pub fn backoff_for(job: &JobEnvelope) -> Duration {
    backoff(job.attempts)
}
