//! Deployment configuration.
//!
//! Keys are dotted (`iqa.dr_min`, `queue.visibility_timeout`, ...) and map
//! one-to-one onto the TOML file sections. Any leaf can be overridden from
//! the environment as `TIRTHA_` followed by the uppercased key with dots
//! replaced by underscores, e.g. `TIRTHA_IQA_DR_MIN=90`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::IqaThresholds;
use crate::error::{Error, Result};

pub const ENV_PREFIX: &str = "TIRTHA_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DrMode {
    #[default]
    Percentile,
    Minmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Synthetic,
    Subprocess,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StorageConfig {
    pub root: PathBuf,
    /// Empty means `<root>/platform.sqlite3`.
    pub db: String,
}

impl Default for StorageConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("./data"),
            db: String::new(),
        }
    }
}

impl StorageConfig {
    pub fn db_path(&self) -> PathBuf {
        if self.db.is_empty() {
            self.root.join("platform.sqlite3")
        } else {
            PathBuf::from(&self.db)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IqaConfig {
    pub dr_min: f64,
    pub cnr_min: f64,
    pub nr_min: f64,
    pub dr_mode: DrMode,
    /// Laplacian variance at which the proxy no-reference score is 0.5.
    pub nr_midpoint: f64,
    pub nr_slope: f64,
}

impl Default for IqaConfig {
    fn default() -> Self {
        let t = IqaThresholds::default();
        Self {
            dr_min: t.dr_min,
            cnr_min: t.cnr_min,
            nr_min: t.nr_min,
            dr_mode: DrMode::Percentile,
            nr_midpoint: 100.0,
            nr_slope: 0.05,
        }
    }
}

impl IqaConfig {
    pub fn thresholds(&self) -> IqaThresholds {
        IqaThresholds {
            dr_min: self.dr_min,
            cnr_min: self.cnr_min,
            nr_min: self.nr_min,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    pub min_short_side: u32,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self { min_short_side: 1080 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SafetyConfig {
    pub safe_ceiling: f64,
    pub unsafe_floor: f64,
    /// SHA-256 hex digests that are always unsafe.
    pub denylist: Vec<String>,
    /// Fixed local scores by SHA-256 hex digest; unknown images score `default_score`.
    pub scores: BTreeMap<String, f64>,
    pub default_score: f64,
    pub external_timeout_ms: u64,
}

impl Default for SafetyConfig {
    fn default() -> Self {
        Self {
            safe_ceiling: 0.3,
            unsafe_floor: 0.8,
            denylist: Vec::new(),
            scores: BTreeMap::new(),
            default_score: 0.0,
            external_timeout_ms: 5_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub min_images: usize,
    /// Zero disables automatic run triggering.
    pub auto_trigger_image_count: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            min_images: 20,
            auto_trigger_image_count: 0,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueueConfig {
    /// Seconds a claimed job stays invisible before redelivery.
    pub visibility_timeout: u64,
    pub max_attempts: u32,
}

impl Default for QueueConfig {
    fn default() -> Self {
        Self {
            visibility_timeout: 1800,
            max_attempts: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct StageCommand {
    pub cmd: String,
    /// Zero falls back to `backend.default_timeout`.
    pub timeout: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub stage: BTreeMap<String, StageCommand>,
    pub default_timeout: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Synthetic,
            stage: BTreeMap::new(),
            default_timeout: 3600,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaintenanceConfig {
    pub prune_days: i64,
    pub archive_days: i64,
    pub prune_interval: u64,
    pub archive_interval: u64,
    pub backup_interval: u64,
}

impl Default for MaintenanceConfig {
    fn default() -> Self {
        Self {
            prune_days: 7,
            archive_days: 365,
            prune_interval: 86_400,
            archive_interval: 86_400,
            backup_interval: 86_400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchiveConfig {
    pub root: PathBuf,
    pub backup_root: PathBuf,
}

impl Default for ArchiveConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("./archive"),
            backup_root: PathBuf::from("./backups"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UploadConfig {
    pub max_bytes: u64,
    pub per_ip_daily: u32,
}

impl Default for UploadConfig {
    fn default() -> Self {
        Self {
            max_bytes: 32 * 1024 * 1024,
            per_ip_daily: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArkConfig {
    pub naan: String,
    pub shoulder: String,
    pub blade_len: usize,
    pub license: String,
}

impl Default for ArkConfig {
    fn default() -> Self {
        Self {
            // Reserved test NAAN; deployments set their own.
            naan: "99999".into(),
            shoulder: crate::ark::DEFAULT_SHOULDER.into(),
            blade_len: crate::ark::DEFAULT_BLADE_LEN,
            license: "CC BY-NC-ND 4.0".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct AuthConfig {
    /// Shared secret for the static-key token verifier.
    pub static_key: String,
    pub admin_tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub bind: String,
    pub site_page_prefix: String,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            site_page_prefix: "/sites/".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Config {
    pub storage: StorageConfig,
    pub iqa: IqaConfig,
    pub ingest: IngestConfig,
    pub safety: SafetyConfig,
    pub run: RunConfig,
    pub queue: QueueConfig,
    pub backend: BackendConfig,
    pub maintenance: MaintenanceConfig,
    pub archive: ArchiveConfig,
    pub upload: UploadConfig,
    pub ark: ArkConfig,
    pub auth: AuthConfig,
    pub server: ServerConfig,
}

impl Config {
    /// Reads the TOML file (if any), then applies `TIRTHA_*` overrides from
    /// the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let base = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                Self::from_toml(&text)?
            }
            None => Self::default(),
        };
        let cfg = base.with_env(std::env::vars())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.safety;
        if !(0.0..=1.0).contains(&s.safe_ceiling) || !(0.0..=1.0).contains(&s.unsafe_floor) || s.safe_ceiling > s.unsafe_floor {
            return Err(Error::Config("safety.safe_ceiling must not exceed safety.unsafe_floor".into()));
        }
        if self.queue.max_attempts == 0 {
            return Err(Error::Config("queue.max_attempts must be positive".into()));
        }
        if self.queue.visibility_timeout == 0 {
            return Err(Error::Config("queue.visibility_timeout must be positive".into()));
        }
        crate::ark::ArkName::new(&self.ark.naan, &self.ark.shoulder, &"0".repeat(self.ark.blade_len.max(crate::ark::MIN_BLADE_LEN)))
            .map_err(|e| Error::Config(format!("ark: {e}")))?;
        Ok(())
    }

    /// Applies overrides for every leaf key present in the current config.
    pub fn with_env<I>(self, vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let env: BTreeMap<String, String> = vars
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        if env.is_empty() {
            return Ok(self);
        }
        let mut tree = toml::Value::try_from(&self).map_err(|e| Error::Config(e.to_string()))?;
        override_leaves(&mut tree, &mut Vec::new(), &env)?;
        tree.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    /// Every dotted leaf key, in file order.
    pub fn keys(&self) -> Vec<String> {
        let tree = toml::Value::try_from(self).expect("config serializes");
        let mut out = Vec::new();
        collect_keys(&tree, &mut Vec::new(), &mut out);
        out
    }
}

pub fn env_name(dotted: &str) -> String {
    format!("{ENV_PREFIX}{}", dotted.to_uppercase().replace('.', "_"))
}

fn collect_keys(v: &toml::Value, path: &mut Vec<String>, out: &mut Vec<String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, child) in t {
                path.push(k.clone());
                collect_keys(child, path, out);
                path.pop();
            }
        }
        _ => out.push(path.join(".")),
    }
}

fn override_leaves(v: &mut toml::Value, path: &mut Vec<String>, env: &BTreeMap<String, String>) -> Result<()> {
    if let toml::Value::Table(t) = v {
        for (k, child) in t.iter_mut() {
            path.push(k.clone());
            override_leaves(child, path, env)?;
            path.pop();
        }
        return Ok(());
    }
    let dotted = path.join(".");
    let raw = env
        .get(&env_name(&dotted))
        .or_else(|| env.get(&format!("{ENV_PREFIX}{}", dotted.to_uppercase())));
    let Some(raw) = raw else { return Ok(()) };
    let bad = |what: &str| Error::Config(format!("{}: expected {what}, got {raw:?}", env_name(&dotted)));
    *v = match v {
        toml::Value::Integer(_) => toml::Value::Integer(raw.trim().parse().map_err(|_| bad("integer"))?),
        toml::Value::Float(_) => toml::Value::Float(raw.trim().parse().map_err(|_| bad("number"))?),
        toml::Value::Boolean(_) => toml::Value::Boolean(raw.trim().parse().map_err(|_| bad("boolean"))?),
        toml::Value::Array(_) => toml::Value::Array(
            raw.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| toml::Value::String(s.to_owned()))
                .collect(),
        ),
        _ => toml::Value::String(raw.clone()),
    };
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_thresholds() {
        let c = Config::default();
        assert_eq!(c.iqa.thresholds(), IqaThresholds { dr_min: 100.0, cnr_min: 17.5, nr_min: 0.6 });
        assert_eq!(c.ingest.min_short_side, 1080);
        assert_eq!((c.safety.safe_ceiling, c.safety.unsafe_floor), (0.3, 0.8));
        assert_eq!(c.run.min_images, 20);
        assert_eq!(c.queue.max_attempts, 3);
        assert_eq!(c.maintenance.prune_days, 7);
        assert_eq!(c.upload.max_bytes, 32 * 1024 * 1024);
        assert_eq!(c.upload.per_ip_daily, 500);
        c.validate().unwrap();
    }

    #[test]
    fn normative_keys_exist() {
        let keys = Config::default().keys();
        for k in [
            "iqa.dr_min", "iqa.cnr_min", "iqa.nr_min", "iqa.dr_mode", "ingest.min_short_side",
            "safety.safe_ceiling", "safety.unsafe_floor", "run.min_images", "queue.visibility_timeout",
            "backend.kind", "maintenance.prune_days", "maintenance.archive_days", "archive.root",
            "upload.max_bytes", "upload.per_ip_daily", "run.auto_trigger_image_count",
        ] {
            assert!(keys.iter().any(|x| x == k), "missing {k}");
        }
    }

    #[test]
    fn env_overrides() {
        let env = vec![
            ("TIRTHA_IQA_DR_MIN".to_string(), "90".to_string()),
            ("TIRTHA_IQA_DR_MODE".to_string(), "minmax".to_string()),
            ("TIRTHA_RUN_MIN_IMAGES".to_string(), "5".to_string()),
            ("TIRTHA_AUTH_ADMIN_TOKENS".to_string(), "a, b".to_string()),
            ("UNRELATED".to_string(), "1".to_string()),
        ];
        let c = Config::default().with_env(env).unwrap();
        assert_eq!(c.iqa.dr_min, 90.0);
        assert_eq!(c.iqa.dr_mode, DrMode::Minmax);
        assert_eq!(c.run.min_images, 5);
        assert_eq!(c.auth.admin_tokens, vec!["a", "b"]);
        let err = Config::default().with_env(vec![("TIRTHA_RUN_MIN_IMAGES".into(), "many".into())]);
        assert!(err.is_err());
    }

    #[test]
    fn toml_file_with_stage_commands() {
        let c = Config::from_toml(
            r#"
            [backend]
            kind = "subprocess"
            [backend.stage.DepthMapEstimation]
            cmd = "exit 3"
            timeout = 5
            [iqa]
            cnr_min = 20.0
            "#,
        )
        .unwrap();
        assert_eq!(c.backend.kind, BackendKind::Subprocess);
        assert_eq!(c.backend.stage["DepthMapEstimation"].cmd, "exit 3");
        assert_eq!(c.iqa.cnr_min, 20.0);
        assert_eq!(c.iqa.dr_min, 100.0);
        assert_eq!(Config::from_toml(&c.to_toml()).unwrap(), c);
    }
}
