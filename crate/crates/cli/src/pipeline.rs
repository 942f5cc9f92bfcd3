//! The pipeline stages behind the subcommands. Each stage derives its own
//! seed from the root seed and the stage name.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use unlearnlab::checkpoint::{encode, save_checkpoint};
use unlearnlab::eval::{eval_prompts, generate_videos, reference_embedding, EvalReport, RunMeta};
use unlearnlab::prompt::ConceptId;
use unlearnlab::rng::derive_seed;
use unlearnlab::train::train_base;
use unlearnlab::unlearn::{metrics_csv, run_unlearning, UnlearnOutcome};
use unlearnlab::world::{train_detector, DetectorParams, ToyVideo};
use unlearnlab::{Error, ParamStore, Result};

use crate::config::{ConfigError, RunConfig};

pub const BASE_FILE: &str = "base.ckpt";
pub const DETECTOR_FILE: &str = "detector.ckpt";
pub const ADAPTER_FILE: &str = "adapters.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const BASE_LOSS_FILE: &str = "base_loss.csv";

fn config_err(e: ConfigError) -> Error {
    Error::InvalidArgument(e.0)
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| io(path, e))
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

pub fn base_stage(cfg: &RunConfig) -> Result<(ParamStore<f32>, Vec<f64>)> {
    train_base(
        &cfg.model_config(),
        &cfg.path_spec(),
        &cfg.base_train_config(),
        derive_seed(cfg.seed, "base"),
    )
}

pub fn detector_stage(cfg: &RunConfig) -> Result<DetectorParams> {
    train_detector(cfg.detector_samples, &cfg.detector_config(), derive_seed(cfg.seed, "detector"))
}

pub fn unlearn_stage(cfg: &RunConfig, base: &ParamStore<f32>) -> Result<UnlearnOutcome<f32>> {
    run_unlearning(&cfg.model_config(), base, &cfg.unlearn_config().map_err(config_err)?)
}

/// Videos for every evaluation prompt; both models share prompts and noise.
pub fn eval_videos(cfg: &RunConfig, base: &ParamStore<f32>, adapters: Option<&ParamStore<f32>>) -> Result<Vec<Vec<ToyVideo>>> {
    let ecfg = cfg.eval_config();
    let seed = derive_seed(cfg.seed, "eval");
    let prompts = eval_prompts(ecfg.prompts_per_concept, seed)?;
    generate_videos(&cfg.model_config(), base, adapters, &cfg.path_spec(), &prompts, &ecfg, seed)
}

pub fn references(cfg: &RunConfig, det: &DetectorParams) -> Result<Vec<Vec<f64>>> {
    let seed = derive_seed(cfg.seed, "references");
    ConceptId::all()
        .map(|c| reference_embedding(det, c, cfg.reference_renders, derive_seed(seed, &c.name())))
        .collect()
}

/// SHA-256 of a store's checkpoint bytes, as hex.
pub fn store_id(store: &ParamStore<f32>) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = encode(store)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub fn report(
    cfg: &RunConfig,
    det: &DetectorParams,
    base: &ParamStore<f32>,
    adapters: &ParamStore<f32>,
    base_videos: &[Vec<ToyVideo>],
) -> Result<EvalReport> {
    let target = cfg.target_concept().map_err(config_err)?;
    let meta = RunMeta {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        base_checkpoint: store_id(base)?,
        adapter_checkpoint: store_id(adapters)?,
        erased: target.name(),
        preserve: cfg.preserve_concept().map_err(config_err)?.name(),
    };
    let unlearned = eval_videos(cfg, base, Some(adapters))?;
    EvalReport::build(meta, det, target, base_videos, &unlearned, &references(cfg, det)?)
}

pub fn losses_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(s, "{i},{l}").expect("string");
    }
    s
}

/// Files written by a full run.
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub base: PathBuf,
    pub detector: PathBuf,
    pub adapters: PathBuf,
    pub metrics: PathBuf,
    pub report_json: PathBuf,
    pub report_csv: PathBuf,
}

impl RunFiles {
    pub fn in_dir(out: &Path) -> Self {
        RunFiles {
            base: out.join(BASE_FILE),
            detector: out.join(DETECTOR_FILE),
            adapters: out.join(ADAPTER_FILE),
            metrics: out.join(METRICS_FILE),
            report_json: out.join("report.json"),
            report_csv: out.join("report.csv"),
        }
    }
}

/// Base training, detector, unlearning and evaluation into `out`.
pub fn full_run(cfg: &RunConfig, out: &Path) -> Result<(RunFiles, EvalReport)> {
    let files = RunFiles::in_dir(out);
    let (base, losses) = base_stage(cfg)?;
    save_in(&base, &files.base)?;
    write_file(&out.join(BASE_LOSS_FILE), losses_csv(&losses))?;
    let det = detector_stage(cfg)?;
    save_in(&det.to_store(), &files.detector)?;
    let outcome = unlearn_stage(cfg, &base)?;
    save_in(&outcome.adapters, &files.adapters)?;
    write_file(&files.metrics, metrics_csv(&outcome.metrics))?;
    let base_videos = eval_videos(cfg, &base, None)?;
    let report = report(cfg, &det, &base, &outcome.adapters, &base_videos)?;
    report.write(out)?;
    Ok((files, report))
}

pub fn save_in(store: &ParamStore<f32>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    save_checkpoint(store, path)
}
