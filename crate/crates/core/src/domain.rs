use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::ark::ArkName;
use crate::error::{Error, Result};

macro_rules! id_type {
    ($($name:ident),*) => {$(
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub i64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                self.0.fmt(f)
            }
        }
    )*};
}

id_type!(SiteId, ContributorId, ContributionId, ImageId, RunId);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SiteStatus {
    Live,
    Processing,
    Error,
}

impl SiteStatus {
    pub fn can_become(self, next: SiteStatus) -> bool {
        use SiteStatus::*;
        matches!(
            (self, next),
            (Live, Processing) | (Processing, Live) | (Processing, Error) | (Error, Processing)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation {
    pub x_deg: f64,
    pub y_deg: f64,
    pub z_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconOptions {
    pub center_image: Option<ImageId>,
    pub orientation_override: Option<Rotation>,
    pub denoise: bool,
    pub resample: bool,
    pub simplification_factor: f64,
    pub min_observation_angle: f64,
    pub texture_side: u32,
    pub denoise_lmd: f64,
    pub denoise_eta: f64,
}

impl Default for ReconOptions {
    fn default() -> Self {
        Self {
            center_image: None,
            orientation_override: None,
            denoise: false,
            resample: false,
            simplification_factor: 0.3,
            min_observation_angle: 30.0,
            texture_side: 2048,
            denoise_lmd: 2.0,
            denoise_eta: 1.5,
        }
    }
}

impl ReconOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.simplification_factor > 0.0 && self.simplification_factor <= 1.0) {
            return Err(Error::Validation(format!(
                "simplification_factor {} outside (0, 1]",
                self.simplification_factor
            )));
        }
        if !(0.0..90.0).contains(&self.min_observation_angle) {
            return Err(Error::Validation(format!(
                "min_observation_angle {} outside [0, 90)",
                self.min_observation_angle
            )));
        }
        if self.texture_side == 0 || !self.texture_side.is_power_of_two() {
            return Err(Error::Validation(format!(
                "texture_side {} is not a positive power of two",
                self.texture_side
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SiteMetadata {
    pub name: String,
    pub description: String,
    pub country: String,
    pub state: String,
    pub district: String,
    pub locality: String,
}

impl SiteMetadata {
    pub fn named(name: &str) -> Self {
        Self {
            name: name.to_owned(),
            ..Default::default()
        }
    }

    pub fn location_parts(&self) -> [&str; 4] {
        [&self.locality, &self.district, &self.state, &self.country]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteRecord {
    pub id: SiteId,
    #[serde(flatten)]
    pub meta: SiteMetadata,
    pub verbose_id: String,
    pub recon_options: ReconOptions,
    pub status: SiteStatus,
    pub completed: bool,
    pub archived: bool,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

/// Lowercased, ASCII-folded, underscore-joined name and location.
pub fn derive_verbose_id(meta: &SiteMetadata) -> String {
    let parts = std::iter::once(meta.name.as_str()).chain(meta.location_parts());
    let mut words = Vec::new();
    for part in parts {
        let folded = deunicode::deunicode(part).to_lowercase();
        words.extend(
            folded
                .split(|c: char| !c.is_ascii_alphanumeric())
                .filter(|w| !w.is_empty())
                .map(str::to_owned),
        );
    }
    words.join("_")
}

/// Only the two identity-provider fields are retained about a person.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributorRecord {
    pub id: ContributorId,
    pub email: String,
    pub name: String,
    pub banned: bool,
    pub ban_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionRecord {
    pub id: ContributionId,
    pub site_id: SiteId,
    pub contributor_id: ContributorId,
    pub started_at: DateTime<Utc>,
    /// Set when the upload is finalized.
    pub submitted_at: Option<DateTime<Utc>>,
    pub image_ids: Vec<ImageId>,
}

impl ContributionRecord {
    pub fn is_complete(&self) -> bool {
        self.submitted_at.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SafetyState {
    Pending,
    Safe,
    Unsafe,
    Moderation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ImageLabel {
    Unlabeled,
    Good,
    Bad,
}

macro_rules! str_enum {
    ($ty:ident { $($variant:ident => $s:literal),* $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($ty::$variant => $s),* }
            }
        }

        impl std::str::FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($ty::$variant),)*
                    other => Err(Error::Validation(format!(concat!("unknown ", stringify!($ty), " {}"), other))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

str_enum!(SafetyState { Pending => "PENDING", Safe => "SAFE", Unsafe => "UNSAFE", Moderation => "MODERATION" });
str_enum!(ImageLabel { Unlabeled => "UNLABELED", Good => "GOOD", Bad => "BAD" });
str_enum!(SiteStatus { Live => "LIVE", Processing => "PROCESSING", Error => "ERROR" });

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IqaThresholds {
    pub dr_min: f64,
    pub cnr_min: f64,
    pub nr_min: f64,
}

impl Default for IqaThresholds {
    fn default() -> Self {
        Self {
            dr_min: 100.0,
            cnr_min: 17.5,
            nr_min: 0.6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IqaReport {
    pub dynamic_range: f64,
    pub cnr: f64,
    pub nr_score: f64,
    pub thresholds_used: IqaThresholds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: ImageId,
    pub contribution_id: ContributionId,
    pub site_id: SiteId,
    pub filename: String,
    pub stored_path: String,
    pub byte_size: u64,
    pub width: u32,
    pub height: u32,
    pub exif_present: bool,
    pub sha256: String,
    pub safety: SafetyState,
    pub label: ImageLabel,
    pub iqa: Option<IqaReport>,
    pub created_at: DateTime<Utc>,
}

/// Fields supplied when an image is attached to a contribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewImage {
    pub filename: String,
    pub stored_path: String,
    pub byte_size: u64,
    pub width: u32,
    pub height: u32,
    pub exif_present: bool,
    pub sha256: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RunState {
    Queued,
    Preprocessing,
    Reconstructing,
    Postprocessing,
    Published,
    Failed,
    Archived,
}

str_enum!(RunState {
    Queued => "QUEUED",
    Preprocessing => "PREPROCESSING",
    Reconstructing => "RECONSTRUCTING",
    Postprocessing => "POSTPROCESSING",
    Published => "PUBLISHED",
    Failed => "FAILED",
    Archived => "ARCHIVED",
});

impl RunState {
    pub const ALL: [RunState; 7] = [
        RunState::Queued,
        RunState::Preprocessing,
        RunState::Reconstructing,
        RunState::Postprocessing,
        RunState::Published,
        RunState::Failed,
        RunState::Archived,
    ];

    /// Terminal for the purpose of the one-active-run-per-site rule.
    pub fn is_terminal(self) -> bool {
        matches!(self, RunState::Published | RunState::Failed | RunState::Archived)
    }

    pub fn is_edge(self, to: RunState) -> bool {
        use RunState::*;
        match (self, to) {
            (Queued, Preprocessing)
            | (Preprocessing, Reconstructing)
            | (Reconstructing, Postprocessing)
            | (Postprocessing, Published)
            | (Published, Archived)
            | (Failed, Archived) => true,
            (from, Failed) => !from.is_terminal(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum RunEvent {
    StartPreprocess,
    StartReconstruct,
    StartPostprocess,
    Publish {
        artifact_path: String,
        artifact_sha256: String,
        ark: ArkName,
    },
    Fail {
        message: String,
    },
    Archive {
        artifact_path: Option<String>,
    },
}

impl RunEvent {
    pub fn name(&self) -> &'static str {
        match self {
            RunEvent::StartPreprocess => "start_preprocess",
            RunEvent::StartReconstruct => "start_reconstruct",
            RunEvent::StartPostprocess => "start_postprocess",
            RunEvent::Publish { .. } => "publish",
            RunEvent::Fail { .. } => "fail",
            RunEvent::Archive { .. } => "archive",
        }
    }

    pub fn target(&self) -> RunState {
        match self {
            RunEvent::StartPreprocess => RunState::Preprocessing,
            RunEvent::StartReconstruct => RunState::Reconstructing,
            RunEvent::StartPostprocess => RunState::Postprocessing,
            RunEvent::Publish { .. } => RunState::Published,
            RunEvent::Fail { .. } => RunState::Failed,
            RunEvent::Archive { .. } => RunState::Archived,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StageStatus {
    Ok,
    Failed,
    TimedOut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLogEntry {
    pub stage: String,
    pub status: StageStatus,
    pub duration_ms: u64,
    pub message: String,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateChange {
    pub from: RunState,
    pub to: RunState,
    pub event: String,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisteredViews {
    pub registered: u32,
    pub total: u32,
}

impl fmt::Display for RegisteredViews {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} / {}", self.registered, self.total)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub input_bytes: u64,
    pub output_bytes: u64,
    pub ratio: f64,
    pub vertices_before: usize,
    pub vertices_after: usize,
    pub faces_before: usize,
    pub faces_after: usize,
}

impl CompressionReport {
    pub fn size_ratio(input_bytes: u64, output_bytes: u64) -> f64 {
        if input_bytes == 0 {
            0.0
        } else {
            1.0 - output_bytes as f64 / input_bytes as f64
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub registered_views: Option<RegisteredViews>,
    pub compression: Option<CompressionReport>,
    pub postprocess_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub id: RunId,
    pub site_id: SiteId,
    pub state: RunState,
    pub created_at: DateTime<Utc>,
    pub started_at: Option<DateTime<Utc>>,
    pub ended_at: Option<DateTime<Utc>>,
    pub image_ids_used: Vec<ImageId>,
    pub contribution_ids_used: Vec<ContributionId>,
    pub stage_log: Vec<StageLogEntry>,
    pub history: Vec<StateChange>,
    pub artifact_path: Option<String>,
    pub artifact_sha256: Option<String>,
    pub ark: Option<ArkName>,
    pub error: Option<String>,
    pub report: RunReport,
}

impl RunRecord {
    /// Applies an event, enforcing the transition graph and the
    /// published-iff-ark invariant.
    pub fn apply(&mut self, event: RunEvent, at: DateTime<Utc>) -> Result<()> {
        let from = self.state;
        let to = event.target();
        if !from.is_edge(to) {
            return Err(Error::IllegalTransition {
                from,
                event: event.name().to_owned(),
            });
        }
        let name = event.name().to_owned();
        match event {
            RunEvent::StartPreprocess => self.started_at = Some(at),
            RunEvent::Publish {
                artifact_path,
                artifact_sha256,
                ark,
            } => {
                if self.ark.as_ref().is_some_and(|a| *a != ark) {
                    return Err(Error::Validation(format!("run {} already carries an ARK", self.id)));
                }
                self.artifact_path = Some(artifact_path);
                self.artifact_sha256 = Some(artifact_sha256);
                self.ark = Some(ark);
                self.ended_at = Some(at);
            }
            RunEvent::Fail { message } => {
                self.error = Some(message);
                self.ended_at = Some(at);
            }
            RunEvent::Archive { artifact_path } => {
                if artifact_path.is_some() {
                    self.artifact_path = artifact_path;
                }
            }
            RunEvent::StartReconstruct | RunEvent::StartPostprocess => {}
        }
        self.state = to;
        self.history.push(StateChange { from, to, event: name, at });
        Ok(())
    }

    /// Records a stage outcome, replacing an earlier entry for the same stage.
    pub fn log_stage(&mut self, entry: StageLogEntry) {
        match self.stage_log.iter_mut().find(|e| e.stage == entry.stage) {
            Some(existing) => *existing = entry,
            None => self.stage_log.push(entry),
        }
    }

    pub fn stage_done(&self, stage: &str) -> bool {
        self.stage_log
            .iter()
            .any(|e| e.stage == stage && e.status == StageStatus::Ok)
    }
}
