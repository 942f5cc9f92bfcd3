//! Run configuration: a flat TOML file plus an optional `[llm]` table.
//! Every key has a default, unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unlearnlab::augment::LlmEndpointConfig;
use unlearnlab::eval::EvalConfig;
use unlearnlab::mmdit::ModelConfig;
use unlearnlab::paths::{PathSpec, VPredSchedule};
use unlearnlab::prompt::ConceptId;
use unlearnlab::train::BaseTrainConfig;
use unlearnlab::unlearn::{Preset, UnlearnConfig};
use unlearnlab::world::DetectorConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathKind {
    RectifiedFlow,
    VPrediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub path: PathKind,

    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    pub adapter_rank: usize,

    pub base_steps: usize,
    pub base_batch: usize,
    pub base_lr: f64,
    pub base_warmup: usize,

    pub detector_samples: usize,
    pub detector_steps: usize,

    pub target: String,
    pub preserve: String,
    pub preset: Preset,
    /// Override the preset's values when set.
    pub eta: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub augment: bool,
    pub lambda: f64,
    pub pseudo_steps: usize,
    pub pseudo_cfg: f64,

    pub eval_prompts: usize,
    pub sample_steps: usize,
    pub cfg_scale: f64,
    pub reference_renders: usize,

    pub llm: Option<LlmEndpointConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let b = BaseTrainConfig::default();
        let d = DetectorConfig::default();
        let e = EvalConfig::default();
        let u = UnlearnConfig::new(
            ConceptId::from_index(0).expect("in range"),
            ConceptId::from_index(1).expect("in range"),
            PathSpec::RectifiedFlow,
        );
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            path: PathKind::RectifiedFlow,
            dim: m.dim,
            heads: m.heads,
            layers: m.layers,
            mlp_hidden: m.mlp_hidden,
            adapter_rank: m.adapter_rank,
            base_steps: b.steps,
            base_batch: b.batch,
            base_lr: b.lr,
            base_warmup: b.warmup,
            detector_samples: 4800,
            detector_steps: d.steps,
            target: "red-stripes".into(),
            preserve: "green-stripes".into(),
            preset: Preset::Nudity,
            eta: None,
            alpha: None,
            beta: None,
            lr: u.lr,
            steps: u.steps,
            batch: u.batch,
            augment: u.augment,
            lambda: u.lambda,
            pseudo_steps: u.pseudo_steps,
            pseudo_cfg: u.pseudo_cfg,
            eval_prompts: e.prompts_per_concept,
            sample_steps: e.sample_steps,
            cfg_scale: e.cfg_scale,
            reference_renders: e.reference_renders,
            llm: None,
        }
    }
}

/// A configuration problem; the message starts with the offending key.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn key_err(key: &str, why: impl std::fmt::Display) -> ConfigError {
    ConfigError(format!("{key}: {why}"))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model_config()
            .validate()
            .map_err(|e| ConfigError(format!("model: {e}")))?;
        self.unlearn_config()?
            .validate()
            .map_err(|e| ConfigError(strip_prefix(&e.to_string())))?;
        for (k, v) in [
            ("base_steps", self.base_steps),
            ("base_batch", self.base_batch),
            ("detector_steps", self.detector_steps),
            ("eval_prompts", self.eval_prompts),
            ("sample_steps", self.sample_steps),
            ("reference_renders", self.reference_renders),
        ] {
            if v == 0 {
                return Err(key_err(k, "must be at least 1"));
            }
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(key_err("base_lr", format!("must be positive, got {}", self.base_lr)));
        }
        if self.detector_samples < 600 {
            return Err(key_err("detector_samples", "must be at least 600 (50 per concept)"));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(key_err("cfg_scale", format!("must be >= 0, got {}", self.cfg_scale)));
        }
        if let PathSpec::VPrediction(s) = self.path_spec() {
            if self.sample_steps > s.len() {
                return Err(key_err("sample_steps", format!("exceeds schedule length {}", s.len())));
            }
        }
        Ok(())
    }

    pub fn path_spec(&self) -> PathSpec {
        match self.path {
            PathKind::RectifiedFlow => PathSpec::RectifiedFlow,
            PathKind::VPrediction => PathSpec::VPrediction(VPredSchedule::desk_default()),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            heads: self.heads,
            layers: self.layers,
            mlp_hidden: self.mlp_hidden,
            adapter_rank: self.adapter_rank,
            ..ModelConfig::default()
        }
    }

    pub fn base_train_config(&self) -> BaseTrainConfig {
        BaseTrainConfig {
            steps: self.base_steps,
            batch: self.base_batch,
            lr: self.base_lr,
            warmup: self.base_warmup,
            ..BaseTrainConfig::default()
        }
    }

    pub fn detector_config(&self) -> DetectorConfig {
        DetectorConfig {
            steps: self.detector_steps,
            ..DetectorConfig::default()
        }
    }

    pub fn target_concept(&self) -> Result<ConceptId, ConfigError> {
        ConceptId::parse(&self.target).map_err(|e| key_err("target", strip_prefix(&e.to_string())))
    }

    pub fn preserve_concept(&self) -> Result<ConceptId, ConfigError> {
        ConceptId::parse(&self.preserve).map_err(|e| key_err("preserve", strip_prefix(&e.to_string())))
    }

    /// Preset values first, then any explicit `eta`/`alpha`/`beta`.
    pub fn unlearn_config(&self) -> Result<UnlearnConfig, ConfigError> {
        let mut u = UnlearnConfig::new(self.target_concept()?, self.preserve_concept()?, self.path_spec())
            .with_preset(self.preset);
        u.eta = self.eta.unwrap_or(u.eta);
        u.alpha = self.alpha.unwrap_or(u.alpha);
        u.beta = self.beta.unwrap_or(u.beta);
        u.lr = self.lr;
        u.steps = self.steps;
        u.batch = self.batch;
        u.augment = self.augment;
        u.lambda = self.lambda;
        u.pseudo_steps = self.pseudo_steps;
        u.pseudo_cfg = self.pseudo_cfg;
        u.seed = unlearnlab::rng::derive_seed(self.seed, "unlearn");
        Ok(u)
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            prompts_per_concept: self.eval_prompts,
            sample_steps: self.sample_steps,
            cfg_scale: self.cfg_scale,
            reference_renders: self.reference_renders,
        }
    }

    /// SHA-256 of the canonical TOML form, as hex.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn strip_prefix(msg: &str) -> String {
    msg.strip_prefix("invalid argument: ").unwrap_or(msg).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_takes_defaults() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        let u = c.unlearn_config().unwrap();
        assert_eq!((u.eta, u.alpha, u.beta), (3.0, 5.0, 5.0));
    }

    #[test]
    fn overrides_and_presets() {
        let c = RunConfig::from_toml("preset = \"face\"\nbeta = 0.0\ntarget = \"blue-cross\"\n").unwrap();
        let u = c.unlearn_config().unwrap();
        assert_eq!((u.eta, u.alpha, u.beta), (5.0, 5.0, 0.0));
        assert_eq!(u.target.name(), "blue-cross");
    }

    #[test]
    fn errors_name_the_key() {
        let e = RunConfig::from_toml("lr = -0.1").unwrap_err().0;
        assert!(e.starts_with("lr"), "{e}");
        let e = RunConfig::from_toml("foo = 1").unwrap_err().0;
        assert!(e.contains("foo"), "{e}");
        let e = RunConfig::from_toml("target = \"red-hexagon\"").unwrap_err().0;
        assert!(e.starts_with("target"), "{e}");
        let e = RunConfig::from_toml("preserve = \"red-stripes\"").unwrap_err().0;
        assert!(e.starts_with("preserve"), "{e}");
        let e = RunConfig::from_toml("[llm]\nbase_url = \"http://x\"\nmodel = \"m\"").unwrap_err().0;
        assert!(e.contains("api_key_env"), "{e}");
        let e = RunConfig::from_toml("dim = 63").unwrap_err().0;
        assert!(e.starts_with("model"), "{e}");
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let b = RunConfig { seed: 1, ..a.clone() };
        assert_eq!(a.hash(), RunConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
