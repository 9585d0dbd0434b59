//! Server-side image intake: JPEG validation, EXIF, the content-safety gate
//! and reference-free quality labelling.

pub mod exif;
pub mod jpeg;
pub mod metrics;
pub mod quality;
pub mod safety;
pub mod synth;

use std::sync::Arc;

use heritage_core::{Config, ImageLabel, IqaReport, SafetyState};
use sha2::{Digest, Sha256};

pub use exif::Exif;
pub use metrics::LumaImage;
pub use quality::{assess, label_image, Assessment, IqaSettings, LaplacianProxy, NrScorer, ScorerFailure};
pub use safety::{
    classify_safety, ExternalSafetyClient, LocalSafetyFilter, SafetyOutcome, SafetyVerdict, StubSafetyFilter, VerdictSource,
};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IngestError {
    #[error("unsupported format ({0}); JPEG expected")]
    UnsupportedFormat(String),
    #[error("corrupt JPEG: {0}")]
    Corrupt(String),
    #[error("image {width}x{height} is below the {min}px short-side floor")]
    TooSmall { width: u32, height: u32, min: u32 },
}

impl IngestError {
    pub fn code(&self) -> &'static str {
        match self {
            IngestError::UnsupportedFormat(_) => "UNSUPPORTED_FORMAT",
            IngestError::Corrupt(_) => "CORRUPT",
            IngestError::TooSmall { .. } => "TOO_SMALL",
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedImage {
    /// 8-bit RGB, row-major.
    pub pixels: Vec<u8>,
    pub width: u32,
    pub height: u32,
    pub exif: Option<Exif>,
    pub source_hash: String,
}

impl DecodedImage {
    pub fn luma(&self) -> LumaImage {
        LumaImage::from_rgb(self.width as usize, self.height as usize, &self.pixels)
    }

    pub fn exif_present(&self) -> bool {
        self.exif.is_some()
    }
}

/// Structure walk, size floor, then full pixel decode.
pub fn decode_and_validate(bytes: &[u8], min_short_side: u32) -> Result<DecodedImage, IngestError> {
    let info = jpeg::inspect(bytes)?;
    if info.width.min(info.height) < min_short_side {
        return Err(IngestError::TooSmall {
            width: info.width,
            height: info.height,
            min: min_short_side,
        });
    }
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Jpeg)
        .map_err(|e| IngestError::Corrupt(e.to_string()))?
        .to_rgb8();
    if (img.width(), img.height()) != (info.width, info.height) {
        return Err(IngestError::Corrupt("decoded size differs from frame header".into()));
    }
    // an unreadable TIFF block is treated as absent EXIF, not a bad image
    let exif = info.exif_payload.and_then(|r| exif::parse_app1(&bytes[r]).ok());
    Ok(DecodedImage {
        width: img.width(),
        height: img.height(),
        pixels: img.into_raw(),
        exif,
        source_hash: sha256_hex(bytes),
    })
}

/// Outcome of running one image through the gate and the labeller.
#[derive(Debug, Clone, PartialEq)]
pub struct Processed {
    pub safety: SafetyState,
    pub verdict: Option<SafetyVerdict>,
    pub label: ImageLabel,
    pub iqa: Option<IqaReport>,
    pub note: Option<String>,
}

/// Configured safety gate plus quality labeller.
#[derive(Clone)]
pub struct Ingestor {
    pub min_short_side: u32,
    pub iqa: IqaSettings,
    pub local: Arc<dyn LocalSafetyFilter>,
    pub external: Option<Arc<dyn ExternalSafetyClient>>,
    pub scorer: Arc<dyn NrScorer>,
}

impl std::fmt::Debug for Ingestor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Ingestor")
            .field("min_short_side", &self.min_short_side)
            .field("iqa", &self.iqa)
            .field("external", &self.external.is_some())
            .finish()
    }
}

impl Ingestor {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            min_short_side: cfg.ingest.min_short_side,
            iqa: IqaSettings::from_config(&cfg.iqa),
            local: Arc::new(StubSafetyFilter::from_config(&cfg.safety)),
            external: None,
            scorer: Arc::new(LaplacianProxy {
                midpoint: cfg.iqa.nr_midpoint,
                slope: cfg.iqa.nr_slope,
            }),
        }
    }

    pub fn with_external(mut self, client: Arc<dyn ExternalSafetyClient>) -> Self {
        self.external = Some(client);
        self
    }

    pub fn decode(&self, bytes: &[u8]) -> Result<DecodedImage, IngestError> {
        decode_and_validate(bytes, self.min_short_side)
    }

    /// Runs the gate when `current` is PENDING, then labels SAFE images.
    /// Images already in MODERATION or UNSAFE are left as they are.
    pub fn process(&self, bytes: &[u8], current: SafetyState) -> Processed {
        let decoded = match self.decode(bytes) {
            Ok(d) => d,
            Err(e) => {
                return Processed {
                    safety: if current == SafetyState::Pending { SafetyState::Moderation } else { current },
                    verdict: None,
                    label: ImageLabel::Unlabeled,
                    iqa: None,
                    note: Some(format!("{}: {e}", e.code())),
                }
            }
        };
        let (safety, verdict) = match current {
            SafetyState::Pending => {
                let v = classify_safety(bytes, &decoded, self.local.as_ref(), self.external.as_deref());
                (v.state(), Some(v))
            }
            s => (s, None),
        };
        if safety != SafetyState::Safe {
            return Processed {
                safety,
                verdict,
                label: ImageLabel::Unlabeled,
                iqa: None,
                note: None,
            };
        }
        match assess(&decoded.luma(), &self.iqa, self.scorer.as_ref()) {
            Assessment::Labeled(label, report) => Processed {
                safety,
                verdict,
                label,
                iqa: Some(report),
                note: None,
            },
            Assessment::Moderation(why) => Processed {
                safety: SafetyState::Moderation,
                verdict,
                label: ImageLabel::Unlabeled,
                iqa: None,
                note: Some(why),
            },
        }
    }
}
