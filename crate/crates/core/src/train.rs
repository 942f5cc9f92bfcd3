//! Base-model training on the concept world.
//!
//! Each example is a rendered video in model space, a prompt describing it,
//! a path time and a noise draw. Prompts mix three forms: the null prompt
//! (so the model also learns the unconditional field), the bare concept,
//! and grammar-augmented prompts whose context the render honours.

use serde::{Deserialize, Serialize};

use crate::augment::AugmentGrammar;
use crate::autodiff::{forward_backward, Graph};
use crate::error::{Error, Result};
use crate::mmdit::{forward_graph, init_model, patchify, ModelConfig};
use crate::optim::Adam;
use crate::paths::PathSpec;
use crate::prompt::{ConceptId, PromptTokens, NUM_CONCEPTS};
use crate::rng::{derive_seed, SeededRng};
use crate::tensor::{ParamStore, Tensor};
use crate::world::{render_prompt, to_model_space};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseTrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Peak learning rate, reached after `warmup` steps and then decayed
    /// along a cosine to a tenth of its value.
    pub lr: f64,
    pub warmup: usize,
    /// Probability of replacing the prompt by the null prompt.
    pub null_prob: f64,
    /// Probability of the bare `[color, shape]` prompt.
    pub bare_prob: f64,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        BaseTrainConfig {
            steps: 2000,
            batch: 16,
            lr: 5e-3,
            warmup: 100,
            null_prob: 0.1,
            bare_prob: 0.2,
        }
    }
}

/// Mean-square regression of the path target; returns the loss per step.
pub fn train_base(
    model: &ModelConfig,
    path: &PathSpec,
    cfg: &BaseTrainConfig,
    seed: u64,
) -> Result<(ParamStore<f32>, Vec<f64>)> {
    if cfg.steps == 0 || cfg.batch == 0 {
        return Err(Error::InvalidArgument("steps and batch must be positive".into()));
    }
    let mut params = init_model::<f32>(model, derive_seed(seed, "base-init"))?;
    let mut rng = SeededRng::new(derive_seed(seed, "base-data"));
    let grammar = AugmentGrammar::default();
    let mut opt = Adam::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        opt.lr = lr_at(cfg, step);
        let mut patches = Vec::with_capacity(cfg.batch * model.sample_len());
        let mut targets = Vec::with_capacity(cfg.batch * model.sample_len());
        let mut prompts = Vec::with_capacity(cfg.batch);
        let mut times = Vec::with_capacity(cfg.batch);
        for i in 0..cfg.batch {
            let concept = ConceptId::from_index((step * cfg.batch + i) % NUM_CONCEPTS).expect("in range");
            let described = if rng.bernoulli(cfg.bare_prob) {
                PromptTokens::bare(concept)
            } else {
                grammar.sample(concept, &mut rng)
            };
            let video = render_prompt(&described, rng.next_u64())?;
            let x = to_model_space(&video);
            let prompt = if rng.bernoulli(cfg.null_prob) {
                PromptTokens::null()
            } else {
                described
            };
            let at = path.at_fraction(rng.uniform());
            let eps = rng.normal_tensor::<f32>(x.shape(), 1.0)?;
            let (xt, target) = path.training_pair(&x, &eps, at)?;
            patches.extend_from_slice(patchify(model, &xt)?.data());
            targets.extend_from_slice(patchify(model, &target)?.data());
            prompts.push(prompt);
            times.push(path.model_time(at)?);
        }
        let shape = vec![cfg.batch * model.visual_tokens(), model.patch_dim()];
        let patches = Tensor::new(shape.clone(), patches)?;
        let targets = Tensor::new(shape, targets)?;
        let refs: Vec<&PromptTokens> = prompts.iter().collect();
        let (loss, grads) = forward_backward(&params, |g: &mut Graph<f32>, vars| {
            let x = g.constant(patches);
            let y = g.constant(targets);
            let out = forward_graph(g, model, vars, None, x, &refs, &times, false)?;
            let d = g.sub(out.prediction, y)?;
            let sq = g.mul(d, d)?;
            g.mean(sq)
        })?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("base training loss at step {step}")));
        }
        opt.step(&mut params, &grads)?;
        losses.push(loss);
    }
    Ok((params, losses))
}

pub fn lr_at(cfg: &BaseTrainConfig, step: usize) -> f64 {
    let warm = ((step + 1) as f64 / cfg.warmup.max(1) as f64).min(1.0);
    let progress = step as f64 / cfg.steps.max(1) as f64;
    let decay = 0.1 + 0.45 * (1.0 + (std::f64::consts::PI * progress).cos());
    cfg.lr * warm * decay
}
