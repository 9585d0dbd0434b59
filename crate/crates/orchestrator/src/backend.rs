//! Stage executors: a deterministic synthetic stand-in and a subprocess
//! runner driven by command templates.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use heritage_core::config::{BackendKind, StageCommand};
use heritage_core::{Config, RegisteredViews, RunId};
use heritage_mesh::generate::{bumps, ring_sphere, texture};
use heritage_mesh::{write_mtl, write_obj, Mesh32};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::plan::{PlannedStage, FINAL_STAGE};

pub const MANIFEST: &str = "manifest.json";
pub const MESH_FILE: &str = "mesh.obj";
pub const MTL_FILE: &str = "mesh.mtl";
pub const TEXTURE_FILE: &str = "texture.png";

/// Columns of the synthetic sphere; rows are twice the image count.
pub const SYNTH_COLS: usize = 64;

pub struct StageContext<'a> {
    pub run_id: RunId,
    pub stage: &'a PlannedStage,
    /// Images assembled for the run.
    pub images_dir: &'a Path,
    /// Output of the previous stage, or `images_dir` for the first.
    pub input_dir: &'a Path,
    pub output_dir: &'a Path,
    /// Sorted SHA-256 digests of the run's images.
    pub image_digests: &'a [String],
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StageOutcome {
    Ok {
        message: String,
        registered: Option<RegisteredViews>,
    },
    Failed {
        code: String,
        message: String,
    },
    TimedOut {
        after: Duration,
    },
}

pub trait Backend: Send + Sync {
    fn kind(&self) -> BackendKind;
    fn run_stage(&self, ctx: &StageContext<'_>) -> StageOutcome;
}

fn failed(code: &str, message: impl Into<String>) -> StageOutcome {
    StageOutcome::Failed {
        code: code.to_owned(),
        message: message.into(),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// `n` minus one when `n` is a multiple of 17.
pub fn synthetic_registered(n: usize) -> RegisteredViews {
    let lost = usize::from(n > 0 && n % 17 == 0);
    RegisteredViews {
        registered: (n - lost) as u32,
        total: n as u32,
    }
}

/// Vertex count of the synthetic mesh for `n` images.
pub fn synthetic_vertices(n: usize) -> usize {
    2 * n.max(1) * SYNTH_COLS
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SyntheticBackend;

impl SyntheticBackend {
    fn chain_digest(ctx: &StageContext<'_>) -> Result<String, String> {
        let upstream = match fs::read(ctx.input_dir.join(MANIFEST)) {
            Ok(bytes) => {
                let v: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| e.to_string())?;
                v["digest"].as_str().unwrap_or_default().to_owned()
            }
            Err(_) => sha256_hex(ctx.image_digests.join("\n").as_bytes()),
        };
        let material = json!({
            "stage": ctx.stage.name,
            "params": ctx.stage.params,
            "seed": ctx.seed,
            "upstream": upstream,
        });
        Ok(sha256_hex(material.to_string().as_bytes()))
    }

    fn emit_mesh(ctx: &StageContext<'_>, digest: &str) -> std::io::Result<()> {
        let n = ctx.image_digests.len().max(1);
        let local_seed = u64::from_str_radix(&digest[..16], 16).unwrap_or(ctx.seed);
        let side: u32 = ctx
            .stage
            .params
            .get("textureSide")
            .and_then(|s| s.parse().ok())
            .unwrap_or(2048);
        let mesh: Mesh32 = ring_sphere(2 * n, SYNTH_COLS, bumps(local_seed, 0.05));
        let tex = texture(local_seed, side);
        fs::write(ctx.output_dir.join(MESH_FILE), write_obj(&mesh, Some((MTL_FILE, "surface"))))?;
        fs::write(ctx.output_dir.join(MTL_FILE), write_mtl("surface", TEXTURE_FILE))?;
        let png = tex.to_png().map_err(|e| std::io::Error::other(e.to_string()))?;
        fs::write(ctx.output_dir.join(TEXTURE_FILE), png)?;
        Ok(())
    }
}

impl Backend for SyntheticBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Synthetic
    }

    fn run_stage(&self, ctx: &StageContext<'_>) -> StageOutcome {
        let digest = match Self::chain_digest(ctx) {
            Ok(d) => d,
            Err(e) => return failed("BAD_MANIFEST", e),
        };
        let n = ctx.image_digests.len();
        let registered = (ctx.stage.name == "StructureFromMotion").then(|| synthetic_registered(n));
        let mut manifest = json!({
            "stage": ctx.stage.name,
            "params": ctx.stage.params,
            "images": n,
            "digest": digest,
        });
        if let Some(r) = registered {
            manifest["registered_views"] = json!({"registered": r.registered, "total": r.total});
        }
        if ctx.stage.name == FINAL_STAGE {
            if let Err(e) = Self::emit_mesh(ctx, &digest) {
                return failed("IO", e.to_string());
            }
            manifest["mesh"] = json!(MESH_FILE);
        }
        if let Err(e) = fs::write(ctx.output_dir.join(MANIFEST), manifest.to_string()) {
            return failed("IO", e.to_string());
        }
        StageOutcome::Ok {
            message: format!("digest {}", &digest[..12]),
            registered,
        }
    }
}

/// Runs `sh -c <template>` per stage. Templates may use `{input_dir}`,
/// `{output_dir}`, `{images_dir}` and `{param:<key>}`.
#[derive(Debug, Clone, Default)]
pub struct SubprocessBackend {
    pub templates: BTreeMap<String, StageCommand>,
    pub default_timeout: Duration,
}

impl SubprocessBackend {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            templates: cfg.backend.stage.clone(),
            default_timeout: Duration::from_secs(cfg.backend.default_timeout),
        }
    }

    pub fn with_stage(mut self, stage: &str, cmd: &str, timeout_secs: u64) -> Self {
        self.templates.insert(
            stage.to_owned(),
            StageCommand {
                cmd: cmd.to_owned(),
                timeout: timeout_secs,
            },
        );
        self
    }
}

/// Fills placeholders; an unknown `{param:*}` key is an error.
pub fn render_template(template: &str, ctx: &StageContext<'_>) -> Result<String, String> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let Some(close) = rest[open..].find('}') else {
            out.push_str(&rest[open..]);
            return Ok(out);
        };
        let key = &rest[open + 1..open + close];
        let value = match key {
            "input_dir" => ctx.input_dir.display().to_string(),
            "output_dir" => ctx.output_dir.display().to_string(),
            "images_dir" => ctx.images_dir.display().to_string(),
            k if k.starts_with("param:") => ctx
                .stage
                .params
                .get(&k["param:".len()..])
                .cloned()
                .ok_or_else(|| format!("stage {} has no parameter {:?}", ctx.stage.name, &k[6..]))?,
            _ => rest[open..open + close + 1].to_owned(),
        };
        out.push_str(&value);
        rest = &rest[open + close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

impl Backend for SubprocessBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Subprocess
    }

    fn run_stage(&self, ctx: &StageContext<'_>) -> StageOutcome {
        let Some(t) = self.templates.get(&ctx.stage.name) else {
            return failed("NO_TEMPLATE", format!("no command configured for {}", ctx.stage.name));
        };
        let cmd = match render_template(&t.cmd, ctx) {
            Ok(c) => c,
            Err(e) => return failed("BAD_TEMPLATE", e),
        };
        let timeout = if t.timeout > 0 {
            Duration::from_secs(t.timeout)
        } else {
            self.default_timeout
        };
        run_with_timeout(&cmd, ctx.output_dir, timeout)
    }
}

fn run_with_timeout(cmd: &str, dir: &Path, timeout: Duration) -> StageOutcome {
    let log = match fs::File::create(dir.join("stage.log")) {
        Ok(f) => f,
        Err(e) => return failed("IO", e.to_string()),
    };
    let err = match log.try_clone() {
        Ok(f) => f,
        Err(e) => return failed("IO", e.to_string()),
    };
    let child = Command::new("sh")
        .arg("-c")
        .arg(cmd)
        .current_dir(dir)
        .stdin(Stdio::null())
        .stdout(log)
        .stderr(err)
        .spawn();
    let mut child = match child {
        Ok(c) => c,
        Err(e) => return failed("SPAWN", e.to_string()),
    };
    let start = Instant::now();
    loop {
        match child.try_wait() {
            Ok(Some(status)) if status.success() => {
                return StageOutcome::Ok {
                    message: format!("exit 0 in {} ms", start.elapsed().as_millis()),
                    registered: None,
                }
            }
            Ok(Some(status)) => {
                let code = status.code().map_or("SIGNAL".to_owned(), |c| format!("EXIT_{c}"));
                let tail = fs::read_to_string(dir.join("stage.log")).unwrap_or_default();
                let tail: String = tail.chars().rev().take(400).collect::<Vec<_>>().into_iter().rev().collect();
                return failed(&code, tail.trim().to_owned());
            }
            Ok(None) if start.elapsed() >= timeout => {
                let _ = child.kill();
                let _ = child.wait();
                return StageOutcome::TimedOut { after: start.elapsed() };
            }
            Ok(None) => std::thread::sleep(Duration::from_millis(20)),
            Err(e) => return failed("WAIT", e.to_string()),
        }
    }
}

/// First `.obj` in a directory, by name.
pub fn find_mesh(dir: &Path) -> Option<PathBuf> {
    let mut objs: Vec<PathBuf> = fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("obj")))
        .collect();
    objs.sort();
    objs.into_iter().next()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stage(name: &str, params: &[(&str, &str)]) -> PlannedStage {
        PlannedStage {
            name: name.into(),
            params: params.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            enabled: true,
        }
    }

    #[test]
    fn registered_rule() {
        assert_eq!(synthetic_registered(17), RegisteredViews { registered: 16, total: 17 });
        assert_eq!(synthetic_registered(20), RegisteredViews { registered: 20, total: 20 });
        assert_eq!(synthetic_registered(34).registered, 33);
        assert_eq!(synthetic_vertices(20), 2560);
    }

    #[test]
    fn template_rendering() {
        let st = stage("Meshing", &[("estimateSpaceMinObservationAngle", "30")]);
        let ctx = StageContext {
            run_id: RunId(1),
            stage: &st,
            images_dir: Path::new("/i"),
            input_dir: Path::new("/in"),
            output_dir: Path::new("/out"),
            image_digests: &[],
            seed: 1,
        };
        let s = render_template("mesh --in {input_dir} --out {output_dir} -a {param:estimateSpaceMinObservationAngle} {x}", &ctx).unwrap();
        assert_eq!(s, "mesh --in /in --out /out -a 30 {x}");
        assert!(render_template("{param:nope}", &ctx).is_err());
    }

    #[test]
    fn subprocess_exit_and_timeout() {
        let dir = tempfile::tempdir().unwrap();
        let st = stage("DepthMapEstimation", &[]);
        let ctx = StageContext {
            run_id: RunId(1),
            stage: &st,
            images_dir: dir.path(),
            input_dir: dir.path(),
            output_dir: dir.path(),
            image_digests: &[],
            seed: 1,
        };
        let b = SubprocessBackend::default().with_stage("DepthMapEstimation", "echo boom >&2; exit 3", 10);
        match b.run_stage(&ctx) {
            StageOutcome::Failed { code, message } => {
                assert_eq!(code, "EXIT_3");
                assert!(message.contains("boom"));
            }
            o => panic!("{o:?}"),
        }
        let b = SubprocessBackend::default().with_stage("DepthMapEstimation", "sleep 5", 1);
        assert!(matches!(b.run_stage(&ctx), StageOutcome::TimedOut { .. }));
        let b = SubprocessBackend::default().with_stage("DepthMapEstimation", "touch {output_dir}/done", 10);
        assert!(matches!(b.run_stage(&ctx), StageOutcome::Ok { .. }));
        assert!(dir.path().join("done").exists());
        assert!(matches!(SubprocessBackend::default().run_stage(&ctx), StageOutcome::Failed { .. }));
    }
}
