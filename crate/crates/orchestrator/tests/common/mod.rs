#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use chrono::{Duration, TimeZone, Utc};
use heritage_core::{
    Config, ImageId, ImageLabel, ManualClock, NewImage, ReconOptions, SafetyState, SiteMetadata, SiteRecord, Store,
};
use heritage_ingest::synth::{self, Kind};
use heritage_orchestrator::{build_worker, Backend, SyntheticBackend, Worker};
use tempfile::TempDir;

pub struct Env {
    pub dir: TempDir,
    pub clock: ManualClock,
    pub store: Store,
    pub config: Arc<Config>,
}

pub fn config_in(dir: &std::path::Path) -> Config {
    let mut c = Config::default();
    c.storage.root = dir.join("data");
    c.archive.root = dir.join("archive");
    c.archive.backup_root = dir.join("backups");
    c.ingest.min_short_side = 64;
    c
}

pub fn env() -> Env {
    env_with(|_| {})
}

pub fn env_with(tweak: impl FnOnce(&mut Config)) -> Env {
    let dir = tempfile::tempdir().unwrap();
    let mut config = config_in(dir.path());
    tweak(&mut config);
    let clock = ManualClock::new(Utc.with_ymd_and_hms(2024, 3, 1, 9, 0, 0).unwrap());
    let store = Store::open(dir.path().join("store.sqlite"), Arc::new(clock.clone())).unwrap();
    Env {
        dir,
        clock,
        store,
        config: Arc::new(config),
    }
}

/// Small-texture options so a synthetic run stays quick.
pub fn quick_options() -> ReconOptions {
    ReconOptions {
        texture_side: 128,
        ..ReconOptions::default()
    }
}

impl Env {
    pub fn worker(&self, id: &str) -> Worker {
        self.worker_with(id, Arc::new(SyntheticBackend))
    }

    pub fn worker_with(&self, id: &str, backend: Arc<dyn Backend>) -> Worker {
        build_worker(id, self.store.clone(), self.config.clone(), backend).unwrap()
    }

    pub fn site(&self, name: &str) -> SiteRecord {
        self.store
            .create_site(
                SiteMetadata {
                    state: "Gujarat".into(),
                    ..SiteMetadata::named(name)
                },
                quick_options(),
            )
            .unwrap()
    }

    pub fn image_path(&self, tag: &str) -> PathBuf {
        let dir = self.config.storage.root.join("uploads");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(format!("{tag}.jpg"))
    }

    /// Uploads `n` images per contributor, each a distinct small JPEG, left
    /// PENDING.
    pub fn upload(&self, site: &SiteRecord, contributors: usize, n: usize, seed: u64) -> Vec<ImageId> {
        let mut ids = Vec::new();
        for c in 0..contributors {
            let who = self
                .store
                .upsert_contributor(&format!("c{c}@example.org"), &format!("Contributor {c}"))
                .unwrap();
            let imgs = (0..n)
                .map(|i| {
                    let s = seed * 10_000 + (c * n + i) as u64;
                    let bytes = synth::jpeg(Kind::Clean, s, 96, 72);
                    let path = self.image_path(&format!("s{}-{s}", site.id));
                    std::fs::write(&path, &bytes).unwrap();
                    NewImage {
                        filename: format!("IMG_{s}.jpg"),
                        stored_path: path.display().to_string(),
                        byte_size: bytes.len() as u64,
                        width: 96,
                        height: 72,
                        exif_present: true,
                        sha256: heritage_ingest::sha256_hex(&bytes),
                    }
                })
                .collect();
            let contribution = self.store.record_contribution(site.id, who.id, imgs).unwrap();
            ids.extend(contribution.image_ids);
        }
        ids
    }

    /// Uploads and marks every image SAFE and GOOD directly.
    pub fn good_images(&self, site: &SiteRecord, contributors: usize, n: usize, seed: u64) -> Vec<ImageId> {
        let ids = self.upload(site, contributors, n, seed);
        self.store
            .write(|tx| {
                for &id in &ids {
                    tx.set_image_safety(id, SafetyState::Safe)?;
                    tx.set_image_label(id, ImageLabel::Good, None)?;
                }
                Ok::<_, heritage_core::Error>(())
            })
            .unwrap();
        ids
    }

    pub fn advance(&self, secs: i64) {
        self.clock.advance(Duration::seconds(secs));
    }
}
