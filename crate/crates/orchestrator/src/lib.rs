//! Job queue, reconstruction runs and periodic maintenance.

pub mod backend;
pub mod periodic;
pub mod pipeline;
pub mod plan;
pub mod preprocess;
pub mod queue;
pub mod worker;

use std::sync::Arc;

use heritage_core::config::BackendKind;
use heritage_core::{Config, Store};
use heritage_ingest::Ingestor;

pub use backend::{Backend, StageContext, StageOutcome, SubprocessBackend, SyntheticBackend};
pub use periodic::{PeriodicSpec, Scheduler};
pub use pipeline::{ExecError, ExecOutcome, Executor, Layout};
pub use plan::{plan_stages, PlannedStage, StagePlan, STAGES};
pub use preprocess::{moderate, preprocess_image, request_run, ModerationAction, PreprocessOutcome};
pub use queue::{JobEnvelope, JobKind, JobState, NackOutcome, Queue};
pub use worker::{spawn_pool, Disposition, Step, Worker};

pub fn backend_from_config(cfg: &Config) -> Arc<dyn Backend> {
    match cfg.backend.kind {
        BackendKind::Synthetic => Arc::new(SyntheticBackend),
        BackendKind::Subprocess => Arc::new(SubprocessBackend::from_config(cfg)),
    }
}

/// Wires a worker from configuration with the given backend.
pub fn build_worker(id: &str, store: Store, config: Arc<Config>, backend: Arc<dyn Backend>) -> Result<Worker, heritage_core::Error> {
    let executor = Arc::new(Executor::new(store.clone(), config.clone(), backend));
    let ingestor = Arc::new(Ingestor::from_config(&config));
    let scheduler = Arc::new(Scheduler::with_builtins(store.clone(), config.clone())?);
    Ok(Worker::new(id, store, config, executor, ingestor, Some(scheduler)))
}
