//! No-reference scoring and GOOD/BAD labelling.

use heritage_core::config::{DrMode, IqaConfig};
use heritage_core::{ImageLabel, IqaReport, IqaThresholds, Real};

use crate::metrics::{self, LumaImage};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("no-reference scorer failed: {0}")]
pub struct ScorerFailure(pub String);

/// Pluggable no-reference quality model; output in [0,1].
pub trait NrScorer: Send + Sync {
    fn score(&self, image: &LumaImage) -> Result<f64, ScorerFailure>;
}

/// Logistic of the Laplacian variance: detail-poor rasters score near 0,
/// busy ones near 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaplacianProxy {
    pub midpoint: f64,
    pub slope: f64,
}

impl Default for LaplacianProxy {
    fn default() -> Self {
        Self {
            midpoint: 100.0,
            slope: 0.05,
        }
    }
}

impl LaplacianProxy {
    pub fn eval<S: Real>(&self, image: &LumaImage) -> S {
        let v = metrics::laplacian_variance::<S>(image);
        metrics::logistic(S::lit(self.slope) * (v - S::lit(self.midpoint)))
    }
}

impl NrScorer for LaplacianProxy {
    fn score(&self, image: &LumaImage) -> Result<f64, ScorerFailure> {
        Ok(self.eval::<f64>(image))
    }
}

pub fn score_no_reference(image: &LumaImage, scorer: &dyn NrScorer) -> Result<f64, ScorerFailure> {
    let s = scorer.score(image)?;
    if !(0.0..=1.0).contains(&s) {
        return Err(ScorerFailure(format!("score {s} outside [0,1]")));
    }
    Ok(s)
}

/// GOOD iff every metric meets its threshold.
pub fn label_image(report: &IqaReport, t: &IqaThresholds) -> ImageLabel {
    if report.dynamic_range >= t.dr_min && report.cnr >= t.cnr_min && report.nr_score >= t.nr_min {
        ImageLabel::Good
    } else {
        ImageLabel::Bad
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Assessment {
    Labeled(ImageLabel, IqaReport),
    /// Scorer failed; a moderator decides.
    Moderation(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IqaSettings {
    pub thresholds: IqaThresholds,
    pub dr_mode: DrMode,
}

impl IqaSettings {
    pub fn from_config(cfg: &IqaConfig) -> Self {
        Self {
            thresholds: cfg.thresholds(),
            dr_mode: cfg.dr_mode,
        }
    }
}

impl Default for IqaSettings {
    fn default() -> Self {
        Self {
            thresholds: IqaThresholds::default(),
            dr_mode: DrMode::Percentile,
        }
    }
}

pub fn measure(image: &LumaImage, settings: &IqaSettings, scorer: &dyn NrScorer) -> Result<IqaReport, ScorerFailure> {
    Ok(IqaReport {
        dynamic_range: metrics::dynamic_range::<f64>(image, settings.dr_mode),
        cnr: metrics::cnr::<f64>(image),
        nr_score: score_no_reference(image, scorer)?,
        thresholds_used: settings.thresholds,
    })
}

pub fn assess(image: &LumaImage, settings: &IqaSettings, scorer: &dyn NrScorer) -> Assessment {
    match measure(image, settings, scorer) {
        Ok(r) => Assessment::Labeled(label_image(&r, &settings.thresholds), r),
        Err(e) => Assessment::Moderation(e.to_string()),
    }
}
