//! Reconstruction stage planning.

use std::collections::BTreeMap;

use heritage_core::SiteRecord;
use serde::{Deserialize, Serialize};

/// Every node the pipeline knows, in execution order, with its group.
pub const STAGES: [(&str, StageGroup); 15] = [
    ("CameraInit", StageGroup::FeatureMatching),
    ("FeatureExtraction", StageGroup::FeatureMatching),
    ("ImageMatching", StageGroup::FeatureMatching),
    ("FeatureMatching", StageGroup::FeatureMatching),
    ("StructureFromMotion", StageGroup::FeatureMatching),
    ("SfMTransform", StageGroup::FeatureMatching),
    ("PrepareDenseScene", StageGroup::DepthAndMeshing),
    ("DepthMapEstimation", StageGroup::DepthAndMeshing),
    ("DepthMapFilter", StageGroup::DepthAndMeshing),
    ("Meshing", StageGroup::DepthAndMeshing),
    ("MeshFiltering", StageGroup::MeshProcessing),
    ("MeshDecimate", StageGroup::MeshProcessing),
    ("MeshDenoising", StageGroup::MeshProcessing),
    ("MeshResampling", StageGroup::MeshProcessing),
    ("Texturing", StageGroup::MeshProcessing),
];

pub const FINAL_STAGE: &str = "Texturing";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StageGroup {
    FeatureMatching,
    DepthAndMeshing,
    MeshProcessing,
}

pub fn group_of(stage: &str) -> Option<StageGroup> {
    STAGES.iter().find(|(n, _)| *n == stage).map(|(_, g)| *g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedStage {
    pub name: String,
    pub params: BTreeMap<String, String>,
    pub enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stages: Vec<PlannedStage>,
}

impl StagePlan {
    pub fn get(&self, name: &str) -> Option<&PlannedStage> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.stages.iter().map(|s| s.name.as_str()).collect()
    }

    pub fn param(&self, stage: &str, key: &str) -> Option<&str> {
        self.get(stage).and_then(|s| s.params.get(key)).map(String::as_str)
    }
}

fn fmt_num(v: f64) -> String {
    format!("{v}")
}

/// Builds the plan for a site: non-default node parameters plus the site's
/// reconstruction overrides.
pub fn plan_stages(site: &SiteRecord) -> StagePlan {
    let o = &site.recon_options;
    let mut stages = Vec::with_capacity(STAGES.len());
    for (name, _) in STAGES {
        let mut params = BTreeMap::new();
        match name {
            "SfMTransform" => {
                if let Some(img) = o.center_image {
                    params.insert("method".into(), "from_single_camera".into());
                    params.insert("centerImage".into(), img.to_string());
                } else {
                    params.insert("method".into(), "auto_from_cameras".into());
                }
                if let Some(r) = o.orientation_override {
                    params.insert("manualTransform.rotation".into(), format!("{},{},{}", r.x_deg, r.y_deg, r.z_deg));
                }
            }
            "Meshing" => {
                params.insert("estimateSpaceMinObservationAngle".into(), fmt_num(o.min_observation_angle));
            }
            "MeshFiltering" => {
                params.insert("keepLargestMeshOnly".into(), "1".into());
            }
            "MeshDecimate" => {
                params.insert("simplificationFactor".into(), fmt_num(o.simplification_factor));
            }
            "MeshDenoising" => {
                if !o.denoise {
                    continue;
                }
                params.insert("lmd".into(), fmt_num(o.denoise_lmd));
                params.insert("eta".into(), fmt_num(o.denoise_eta));
            }
            "MeshResampling" => {
                if !o.resample {
                    continue;
                }
                params.insert("simplificationFactor".into(), fmt_num(o.simplification_factor));
            }
            "Texturing" => {
                params.insert("textureSide".into(), o.texture_side.to_string());
            }
            _ => {}
        }
        stages.push(PlannedStage {
            name: name.to_owned(),
            params,
            enabled: true,
        });
    }
    StagePlan { stages }
}
