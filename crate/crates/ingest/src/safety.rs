//! Content-safety gate: local filter first, external client on inconclusive.

use std::collections::{HashMap, HashSet};

use heritage_core::config::SafetyConfig;
use heritage_core::SafetyState;
use serde::{Deserialize, Serialize};

use crate::DecodedImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SafetyOutcome {
    Safe,
    Unsafe,
    Inconclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VerdictSource {
    Local,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyVerdict {
    pub outcome: SafetyOutcome,
    pub source: VerdictSource,
    pub score: f64,
}

impl SafetyVerdict {
    /// Persisted state; anything still inconclusive goes to moderation.
    pub fn state(&self) -> SafetyState {
        match self.outcome {
            SafetyOutcome::Safe => SafetyState::Safe,
            SafetyOutcome::Unsafe => SafetyState::Unsafe,
            SafetyOutcome::Inconclusive => SafetyState::Moderation,
        }
    }
}

/// Maps an unsafety score in [0,1] to an outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SafetyBands {
    pub safe_ceiling: f64,
    pub unsafe_floor: f64,
}

impl SafetyBands {
    pub fn outcome(&self, score: f64) -> SafetyOutcome {
        if score.is_nan() {
            SafetyOutcome::Inconclusive
        } else if score < self.safe_ceiling {
            SafetyOutcome::Safe
        } else if score > self.unsafe_floor {
            SafetyOutcome::Unsafe
        } else {
            SafetyOutcome::Inconclusive
        }
    }
}

impl Default for SafetyBands {
    fn default() -> Self {
        Self {
            safe_ceiling: 0.3,
            unsafe_floor: 0.8,
        }
    }
}

pub trait LocalSafetyFilter: Send + Sync {
    fn classify(&self, image: &DecodedImage) -> SafetyVerdict;
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("external safety service unavailable: {0}")]
pub struct ExternalUnavailable(pub String);

/// Remote classifier; the wire protocol belongs to the adapter.
pub trait ExternalSafetyClient: Send + Sync {
    fn check(&self, bytes: &[u8]) -> Result<(SafetyOutcome, f64), ExternalUnavailable>;
}

/// Deterministic filter keyed by content digest: a denylist plus a score
/// map, everything else gets `default_score`.
#[derive(Debug, Clone)]
pub struct StubSafetyFilter {
    pub bands: SafetyBands,
    pub denylist: HashSet<String>,
    pub scores: HashMap<String, f64>,
    pub default_score: f64,
}

impl StubSafetyFilter {
    pub fn from_config(cfg: &SafetyConfig) -> Self {
        Self {
            bands: SafetyBands {
                safe_ceiling: cfg.safe_ceiling,
                unsafe_floor: cfg.unsafe_floor,
            },
            denylist: cfg.denylist.iter().map(|s| s.to_lowercase()).collect(),
            scores: cfg.scores.iter().map(|(k, v)| (k.to_lowercase(), *v)).collect(),
            default_score: cfg.default_score,
        }
    }

    pub fn score_of(&self, digest: &str) -> f64 {
        if self.denylist.contains(digest) {
            return 1.0;
        }
        self.scores.get(digest).copied().unwrap_or(self.default_score)
    }
}

impl Default for StubSafetyFilter {
    fn default() -> Self {
        Self {
            bands: SafetyBands::default(),
            denylist: HashSet::new(),
            scores: HashMap::new(),
            default_score: 0.0,
        }
    }
}

impl LocalSafetyFilter for StubSafetyFilter {
    fn classify(&self, image: &DecodedImage) -> SafetyVerdict {
        let score = self.score_of(&image.source_hash);
        SafetyVerdict {
            outcome: self.bands.outcome(score),
            source: VerdictSource::Local,
            score,
        }
    }
}

pub fn classify_safety(
    bytes: &[u8],
    image: &DecodedImage,
    local: &dyn LocalSafetyFilter,
    external: Option<&dyn ExternalSafetyClient>,
) -> SafetyVerdict {
    let verdict = local.classify(image);
    if verdict.outcome != SafetyOutcome::Inconclusive {
        return verdict;
    }
    match external.map(|c| c.check(bytes)) {
        Some(Ok((outcome, score))) => SafetyVerdict {
            outcome,
            source: VerdictSource::External,
            score,
        },
        // outage or no client: stays inconclusive and lands in moderation
        _ => verdict,
    }
}
