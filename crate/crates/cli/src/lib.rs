//! `unlearnlab` command line: configuration, artifacts and subcommands.

pub mod config;
pub mod pipeline;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use unlearnlab::augment::{augment_grammar, augment_llm};
use unlearnlab::checkpoint::load_checkpoint;
use unlearnlab::mmdit::Model;
use unlearnlab::paths::{sample, GuidanceSpec};
use unlearnlab::prompt::{ConceptId, PromptTokens};
use unlearnlab::rng::derive_seed;
use unlearnlab::unlearn::metrics_csv;
use unlearnlab::world::{from_model_space, write_ppm_frames, DetectorParams};
use unlearnlab::{verify, Error, ParamStore};

use config::{ConfigError, RunConfig};
use pipeline::*;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "unlearnlab", version, about = "Concept erasure on a tiny video diffusion transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured root seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the base model and write base.ckpt.
    TrainBase(Common),
    /// Train the frame classifier and write detector.ckpt.
    TrainDetector(Common),
    /// Train adapters that erase the target concept.
    Unlearn {
        #[command(flatten)]
        common: Common,
        /// Base checkpoint (default: <out>/base.ckpt).
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Generate videos for a prompt and dump PPM frames.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: Option<PathBuf>,
        /// Adapter checkpoint; omit to sample the base model.
        #[arg(long)]
        adapters: Option<PathBuf>,
        /// Prompt text, e.g. "red stripes on black"; defaults to the target concept.
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Evaluate base against unlearned generations; writes report.json/csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        adapters: Option<PathBuf>,
        #[arg(long)]
        detector: Option<PathBuf>,
    },
    /// Run the analytic identity and gradient suites.
    VerifyMath(Common),
    /// Write augmented prompts for a concept.
    AugmentPrompts {
        #[command(flatten)]
        common: Common,
        /// Concept such as red-stripes (default: the configured target).
        #[arg(long)]
        concept: Option<String>,
        #[arg(long, default_value_t = 20)]
        n: usize,
        /// Ask the configured [llm] endpoint instead of the grammar.
        #[arg(long)]
        llm: bool,
    },
    /// All stages in order: base, detector, unlearning, evaluation.
    Pipeline(Common),
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.0)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "config error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Loads the config and applies `--seed` and `--out`.
pub fn resolve(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn or_out(p: &Option<PathBuf>, cfg: &RunConfig, file: &str) -> PathBuf {
    p.clone().unwrap_or_else(|| cfg.out.join(file))
}

fn load(path: &Path) -> CliResult<ParamStore<f32>> {
    Ok(load_checkpoint(path)?)
}

/// Parses `argv` (program name first), runs the command and returns the
/// exit code. Output goes to stdout, diagnostics to stderr.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{e}");
            match e {
                CliError::Usage(_) => EXIT_USAGE,
                CliError::Runtime(_) => EXIT_RUNTIME,
            }
        }
    }
}

fn execute(cmd: Command) -> CliResult<i32> {
    match cmd {
        Command::TrainBase(c) => {
            let cfg = resolve(&c)?;
            let (base, losses) = base_stage(&cfg)?;
            let path = cfg.out.join(BASE_FILE);
            save_in(&base, &path)?;
            write_file(&cfg.out.join(BASE_LOSS_FILE), losses_csv(&losses))?;
            println!("wrote {} (final loss {:.4})", path.display(), losses.last().copied().unwrap_or(f64::NAN));
        }
        Command::TrainDetector(c) => {
            let cfg = resolve(&c)?;
            let det = detector_stage(&cfg)?;
            let path = cfg.out.join(DETECTOR_FILE);
            save_in(&det.to_store(), &path)?;
            println!("wrote {} (held-out accuracy {:.4})", path.display(), det.heldout_accuracy);
        }
        Command::Unlearn { common, base } => {
            let cfg = resolve(&common)?;
            cfg.unlearn_config()?;
            let base = load(&or_out(&base, &cfg, BASE_FILE))?;
            let outcome = unlearn_stage(&cfg, &base)?;
            save_in(&outcome.adapters, &cfg.out.join(ADAPTER_FILE))?;
            write_file(&cfg.out.join(METRICS_FILE), metrics_csv(&outcome.metrics))?;
            if let Some(m) = outcome.metrics.last() {
                println!("unlearned {} in {} steps, final loss {:.4}", cfg.target, outcome.metrics.len(), m.loss_total);
            }
        }
        Command::Sample {
            common,
            base,
            adapters,
            prompt,
            count,
        } => {
            let cfg = resolve(&common)?;
            let base = load(&or_out(&base, &cfg, BASE_FILE))?;
            let adapters = adapters.as_deref().map(load).transpose()?;
            let prompt = match prompt {
                Some(text) => PromptTokens::parse(&text).map_err(|e| CliError::Usage(format!("prompt: {e}")))?,
                None => PromptTokens::bare(cfg.target_concept()?),
            };
            let mcfg = cfg.model_config();
            let model = Model::new(&mcfg, &base, adapters.as_ref());
            let dir = cfg.out.join("samples");
            let seed = derive_seed(cfg.seed, "sample");
            for i in 0..count {
                let x = sample(&model, &cfg.path_spec(), &prompt, &GuidanceSpec::cfg(cfg.cfg_scale), cfg.sample_steps, derive_seed(seed, &i.to_string()))?;
                write_ppm_frames(&from_model_space(&x), &dir, i)?;
            }
            println!("wrote {count} videos for \"{prompt}\" to {}", dir.display());
        }
        Command::Eval {
            common,
            base,
            adapters,
            detector,
        } => {
            let cfg = resolve(&common)?;
            cfg.unlearn_config()?;
            let base = load(&or_out(&base, &cfg, BASE_FILE))?;
            let adapters = load(&or_out(&adapters, &cfg, ADAPTER_FILE))?;
            let det = DetectorParams::from_store(load(&or_out(&detector, &cfg, DETECTOR_FILE))?)?;
            let base_videos = eval_videos(&cfg, &base, None)?;
            let r = report(&cfg, &det, &base, &adapters, &base_videos)?;
            r.write(&cfg.out)?;
            print_report(&r);
        }
        Command::VerifyMath(c) => {
            let cfg = resolve(&c)?;
            let rows = verify::run_all(cfg.seed);
            let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
            for r in &rows {
                let mark = if r.pass { "pass" } else { "FAIL" };
                println!("{:<width$}  {mark}  {:>7.3}s  {}", r.name, r.seconds, r.detail);
            }
            if rows.iter().any(|r| !r.pass) {
                return Ok(EXIT_RUNTIME);
            }
        }
        Command::AugmentPrompts { common, concept, n, llm } => {
            let cfg = resolve(&common)?;
            let concept = match concept {
                Some(s) => ConceptId::parse(&s).map_err(|e| CliError::Usage(format!("concept: {e}")))?,
                None => cfg.target_concept()?,
            };
            let lines: Vec<String> = if llm {
                let endpoint = cfg
                    .llm
                    .as_ref()
                    .ok_or_else(|| CliError::Usage("llm: --llm needs an [llm] table in the config".into()))?;
                augment_llm(endpoint, &concept.to_string().replace('-', " "), n)?
            } else {
                augment_grammar(concept, n, derive_seed(cfg.seed, "augment-prompts"))?
                    .iter()
                    .map(|p| p.to_string())
                    .collect()
            };
            let mut text = lines.join("\n");
            text.push('\n');
            write_file(&cfg.out.join(format!("prompts-{concept}.txt")), &text)?;
            print!("{text}");
        }
        Command::Pipeline(c) => {
            let cfg = resolve(&c)?;
            cfg.unlearn_config()?;
            let (_, r) = full_run(&cfg, &cfg.out)?;
            print_report(&r);
        }
    }
    Ok(EXIT_OK)
}

fn print_report(r: &unlearnlab::eval::EvalReport) {
    println!("{:<14} {:>6} {:>6}", "concept", "base", "after");
    for c in &r.concepts {
        println!("{:<14} {:>6.3} {:>6.3}", c.concept, c.base_rate, c.unlearned_rate);
    }
    for t in &r.topk {
        println!(
            "k={}: ESR {:.3} -> {:.3}, PSR {:.3} -> {:.3}",
            t.k, t.base_esr, t.unlearned_esr, t.base_psr, t.unlearned_psr
        );
    }
}
