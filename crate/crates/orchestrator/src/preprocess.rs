//! Per-image preprocessing and the record changes that feed it: moderation
//! decisions and run requests.

use heritage_core::{Config, Error, ImageId, ImageLabel, RunRecord, SafetyState, SiteId, Store, Tx};
use heritage_ingest::Ingestor;
use serde_json::json;

use crate::queue::{enqueue_in, JobKind};

#[derive(Debug, Clone, PartialEq)]
pub enum PreprocessOutcome {
    /// Nothing to do: already labeled, rejected or awaiting moderation.
    Unchanged,
    Updated {
        safety: SafetyState,
        label: ImageLabel,
        note: Option<String>,
    },
    /// The image changed state while it was being scored; the result was
    /// dropped.
    Raced,
}

pub fn preprocess_payload(image: ImageId) -> serde_json::Value {
    json!({"image_id": image.0})
}

/// Gates safety when PENDING and labels quality when SAFE and UNLABELED.
/// Scoring happens outside the transaction; the write only lands if the
/// image is still in the state that was scored.
pub fn preprocess_image(
    store: &Store,
    ingestor: &Ingestor,
    cfg: &Config,
    id: ImageId,
) -> Result<PreprocessOutcome, Error> {
    let img = store.image(id)?;
    let due = match img.safety {
        SafetyState::Pending => true,
        SafetyState::Safe => img.label == ImageLabel::Unlabeled,
        SafetyState::Unsafe | SafetyState::Moderation => false,
    };
    if !due {
        return Ok(PreprocessOutcome::Unchanged);
    }
    let bytes = std::fs::read(&img.stored_path).unwrap_or_default();
    let p = ingestor.process(&bytes, img.safety);
    store.write(|tx| {
        let now = tx.image(id)?;
        if now.safety != img.safety || now.label != img.label {
            return Ok(PreprocessOutcome::Raced);
        }
        if p.safety != now.safety {
            tx.set_image_safety(id, p.safety)?;
        }
        if p.label != ImageLabel::Unlabeled {
            tx.set_image_label(id, p.label, p.iqa.clone())?;
        }
        if p.label == ImageLabel::Good {
            maybe_auto_trigger(tx, cfg, now.site_id)?;
        }
        Ok(PreprocessOutcome::Updated {
            safety: p.safety,
            label: p.label,
            note: p.note.clone(),
        })
    })
}

/// Creates a run when the site has gathered `run.auto_trigger_image_count`
/// GOOD images that no earlier run used, and nothing is active.
fn maybe_auto_trigger(tx: &Tx<'_>, cfg: &Config, site: SiteId) -> Result<(), Error> {
    let threshold = cfg.run.auto_trigger_image_count;
    if threshold == 0 || tx.active_run(site)?.is_some() || tx.site(site)?.archived {
        return Ok(());
    }
    let used: std::collections::HashSet<ImageId> = tx
        .runs_for_site(site)?
        .into_iter()
        .flat_map(|r| r.image_ids_used)
        .collect();
    let fresh = tx
        .good_images_for_site(site)?
        .into_iter()
        .filter(|i| !used.contains(&i.id))
        .count();
    if fresh >= threshold.max(cfg.run.min_images) {
        request_run_in(tx, cfg, site)?;
    }
    Ok(())
}

pub fn run_payload(run: heritage_core::RunId) -> serde_json::Value {
    json!({"run_id": run.0})
}

pub fn request_run_in(tx: &Tx<'_>, cfg: &Config, site: SiteId) -> Result<RunRecord, Error> {
    let run = tx.create_run(site)?;
    enqueue_in(tx, JobKind::ExecuteRun, &run_payload(run.id), 0, cfg.queue.max_attempts)?;
    Ok(run)
}

/// Creates a QUEUED run and its EXECUTE_RUN job atomically.
pub fn request_run(store: &Store, cfg: &Config, site: SiteId) -> Result<RunRecord, Error> {
    store.write(|tx| request_run_in(tx, cfg, site))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModerationAction {
    Approve,
    Reject,
}

impl std::str::FromStr for ModerationAction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "approve" => Ok(Self::Approve),
            "reject" => Ok(Self::Reject),
            other => Err(Error::Validation(format!("unknown action {other:?}"))),
        }
    }
}

/// Resolves a MODERATION image. Approval makes it SAFE and queues it for
/// quality labeling; rejection makes it UNSAFE for good.
pub fn moderate(store: &Store, cfg: &Config, id: ImageId, action: ModerationAction) -> Result<heritage_core::ImageRecord, Error> {
    store.write(|tx| {
        let img = tx.image(id)?;
        if img.safety != SafetyState::Moderation {
            return Err(Error::Conflict(format!("image {id} is {}, not MODERATION", img.safety)));
        }
        match action {
            ModerationAction::Approve => {
                let rec = tx.set_image_safety(id, SafetyState::Safe)?;
                let payload = json!({"image_id": id.0, "after": "approve"});
                enqueue_in(tx, JobKind::PreprocessImage, &payload, 0, cfg.queue.max_attempts)?;
                Ok(rec)
            }
            ModerationAction::Reject => tx.set_image_safety(id, SafetyState::Unsafe),
        }
    })
}
