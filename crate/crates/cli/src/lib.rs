//! Command-line entry points for the platform.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use heritage_core::ark;
use heritage_core::config::BackendKind;
use heritage_core::{Config, RunId, Store, SystemClock};
use heritage_mesh::{parse_obj, postprocess, PostprocessOptions};
use heritage_orchestrator::{backend_from_config, build_worker, request_run, spawn_pool};
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "heritage", version, about = "Crowdsourced heritage site reconstruction")]
pub struct Cli {
    /// TOML configuration; TIRTHA_* variables override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Runs the HTTP API.
    Serve {
        #[arg(long)]
        bind: Option<String>,
    },
    /// Runs queue workers until interrupted.
    Worker {
        #[arg(long, default_value_t = 1)]
        concurrency: usize,
    },
    #[command(subcommand)]
    Pipeline(PipelineCmd),
    #[command(subcommand)]
    Ark(ArkCmd),
    #[command(subcommand)]
    Mesh(MeshCmd),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BackendArg {
    Synthetic,
    Subprocess,
}

#[derive(Debug, Subcommand)]
pub enum PipelineCmd {
    /// Requests a run for a site and executes the queue inline.
    Run {
        #[arg(long)]
        site: String,
        #[arg(long, value_enum)]
        backend: Option<BackendArg>,
    },
    Status {
        #[arg(long)]
        run: i64,
    },
}

#[derive(Debug, Subcommand)]
pub enum ArkCmd {
    /// Mints and registers a fresh, unbound name.
    Mint {
        #[arg(long)]
        naan: Option<String>,
        #[arg(long)]
        shoulder: Option<String>,
    },
    Validate { ark: String },
}

#[derive(Debug, Subcommand)]
pub enum MeshCmd {
    /// OBJ (with optional MTL texture) to decimated GLB.
    Convert {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        factor: f64,
        #[arg(long, default_value_t = 2048)]
        texture_side: u32,
    },
}

pub fn load_config(path: Option<&Path>) -> anyhow::Result<Config> {
    Ok(Config::load(path)?)
}

pub fn open_store(cfg: &Config) -> anyhow::Result<Store> {
    std::fs::create_dir_all(&cfg.storage.root)
        .with_context(|| format!("creating {}", cfg.storage.root.display()))?;
    Ok(Store::open(cfg.storage.db_path(), Arc::new(SystemClock))?)
}

/// Executes a command and returns the process exit code.
pub fn run(cli: Cli, out: &mut dyn Write) -> anyhow::Result<i32> {
    let mut cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Serve { bind } => {
            let bind = bind.unwrap_or_else(|| cfg.server.bind.clone());
            let store = open_store(&cfg)?;
            let state = Arc::new(heritage_api::AppState::new(store, Arc::new(cfg)));
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(heritage_api::serve(state, &bind))?;
            Ok(0)
        }
        Command::Worker { concurrency } => {
            let store = open_store(&cfg)?;
            let cfg = Arc::new(cfg);
            let backend = backend_from_config(&cfg);
            let workers = (0..concurrency.max(1))
                .map(|i| build_worker(&format!("worker-{}-{i}", std::process::id()), store.clone(), cfg.clone(), backend.clone()).map(Arc::new))
                .collect::<Result<Vec<_>, _>>()?;
            let stop = Arc::new(AtomicBool::new(false));
            let handles = spawn_pool(workers, stop.clone(), Duration::from_millis(500));
            tracing::info!(concurrency, "workers started");
            let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
            rt.block_on(tokio::signal::ctrl_c())?;
            stop.store(true, std::sync::atomic::Ordering::Relaxed);
            for h in handles {
                let _ = h.join();
            }
            Ok(0)
        }
        Command::Pipeline(PipelineCmd::Run { site, backend }) => {
            if let Some(b) = backend {
                cfg.backend.kind = match b {
                    BackendArg::Synthetic => BackendKind::Synthetic,
                    BackendArg::Subprocess => BackendKind::Subprocess,
                };
            }
            let store = open_store(&cfg)?;
            let cfg = Arc::new(cfg);
            let site = store.read(|tx| tx.site_by_verbose_id(&site))?;
            let run = request_run(&store, &cfg, site.id)?;
            let worker = build_worker("cli", store.clone(), cfg.clone(), backend_from_config(&cfg))?;
            let mut rec = store.run(run.id)?;
            while !rec.state.is_terminal() {
                if worker.run_until_idle(10_000)?.is_empty() {
                    std::thread::sleep(Duration::from_millis(200));
                }
                rec = store.run(run.id)?;
            }
            writeln!(out, "{}", serde_json::to_string_pretty(&rec)?)?;
            Ok(if rec.state == heritage_core::RunState::Published { 0 } else { 2 })
        }
        Command::Pipeline(PipelineCmd::Status { run }) => {
            let store = open_store(&cfg)?;
            let rec = store.run(RunId(run))?;
            writeln!(out, "{}", serde_json::to_string_pretty(&rec)?)?;
            Ok(0)
        }
        Command::Ark(ArkCmd::Mint { naan, shoulder }) => {
            let naan = naan.unwrap_or_else(|| cfg.ark.naan.clone());
            let shoulder = shoulder.unwrap_or_else(|| cfg.ark.shoulder.clone());
            let store = open_store(&cfg)?;
            let name = store.write(|tx| {
                ark::mint(&naan, &shoulder, cfg.ark.blade_len, &mut rand::thread_rng(), &mut tx.ark_registry(None))
            })?;
            writeln!(out, "{name}")?;
            Ok(0)
        }
        Command::Ark(ArkCmd::Validate { ark }) => Ok(validate(&ark, out)?),
        Command::Mesh(MeshCmd::Convert { input, output, factor, texture_side }) => {
            let report = convert(&input, &output, factor, texture_side)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
            Ok(0)
        }
    }
}

/// Prints the normalised name, or the failure code, and returns 0 or 1.
pub fn validate(s: &str, out: &mut dyn Write) -> std::io::Result<i32> {
    match ark::parse(s) {
        Ok(a) => {
            writeln!(out, "{}", json!({"valid": true, "ark": a.to_string(), "naan": a.naan, "name": a.name()}))?;
            Ok(0)
        }
        Err(e) => {
            let code = heritage_core::Error::from(e.clone()).code();
            writeln!(out, "{}", json!({"valid": false, "code": code, "message": e.to_string()}))?;
            Ok(1)
        }
    }
}

pub fn convert(input: &Path, output: &Path, factor: f64, texture_side: u32) -> anyhow::Result<heritage_core::CompressionReport> {
    if !(0.0..=1.0).contains(&factor) || factor == 0.0 {
        bail!("factor must be in (0, 1]");
    }
    let bytes = std::fs::read(input).with_context(|| format!("reading {}", input.display()))?;
    let dir = input.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut input_bytes = bytes.len() as u64;
    let sizes = std::cell::Cell::new(0u64);
    let loader = |name: &str| {
        let b = std::fs::read(dir.join(name)).ok()?;
        sizes.set(sizes.get() + b.len() as u64);
        Some(b)
    };
    let model = parse_obj::<f32>(&bytes, &loader)?;
    input_bytes += sizes.get();
    let opts = PostprocessOptions {
        factor,
        texture_side,
        ..PostprocessOptions::default()
    };
    let done = postprocess(&model.mesh, input_bytes, &opts)?;
    std::fs::write(output, &done.glb).with_context(|| format!("writing {}", output.display()))?;
    Ok(done.report)
}
