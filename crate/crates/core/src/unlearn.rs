//! Adapter-only concept erasure.
//!
//! Each step draws prompts for the target concept, generates pseudo data by
//! partially denoising noise with the frozen model, and regresses the
//! adapted model's conditional prediction onto the negatively guided
//! target `v_u - eta (v_c - v_u)`. Two regularizers keep the edit small:
//! adapter outputs outside the concept's attention mask are penalized, and
//! predictions on a preservation concept are tied to the frozen model.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentGrammar;
use crate::autodiff::{Graph, Var, VarMap};
use crate::error::{Error, Result};
use crate::mmdit::{
    bind, extract_concept_mask, forward_graph, init_adapters, patchify, AttentionCapture, ConceptMask, Model,
    ModelConfig,
};
use crate::optim::Adam;
use crate::paths::{partial_denoise, GuidanceSpec, PathSpec};
use crate::prompt::{ConceptId, PromptTokens};
use crate::rng::{derive_seed, SeededRng};
use crate::tensor::{Element, ParamStore, Tensor};

/// `v_u - eta (v_c - v_u)`. Negative `eta` is accepted here (`eta = -1`
/// gives `v_c`); configs reject it.
pub fn negative_velocity_target<E: Element>(v_uncond: &Tensor<E>, v_cond: &Tensor<E>, eta: f64) -> Result<Tensor<E>> {
    if v_uncond.shape() != v_cond.shape() {
        return Err(Error::shape("negative_velocity_target", v_uncond.shape(), v_cond.shape()));
    }
    if eta == 0.0 {
        return Ok(v_uncond.clone());
    }
    v_uncond.affine2(1.0 + eta, v_cond, -eta, "negative_velocity_target")
}

fn mean_square_diff<E: Element>(a: &Tensor<E>, b: &Tensor<E>, op: &'static str) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum();
    Ok(s / a.len() as f64)
}

pub fn unlearn_loss<E: Element>(v_neg: &Tensor<E>, v_pred: &Tensor<E>) -> Result<f64> {
    mean_square_diff(v_neg, v_pred, "unlearn_loss")
}

/// Mean over layers of the mean square of `o^l * (1 - M)`; each output is
/// `[tokens, width]` with one row per mask entry.
pub fn localization_loss<E: Element>(adapter_outputs: &[Tensor<E>], mask: &ConceptMask) -> Result<f64> {
    if adapter_outputs.is_empty() {
        return Err(Error::InvalidArgument("no adapter outputs".into()));
    }
    let mut total = 0.0;
    for o in adapter_outputs {
        if o.rank() != 2 || o.shape()[0] != mask.len() {
            return Err(Error::shape("localization_loss", o.shape(), &[mask.len()]));
        }
        let w = o.shape()[1];
        let mut s = 0.0;
        for (row, &keep) in o.data().chunks(w).zip(mask.bits()) {
            if !keep {
                s += row.iter().map(|x| x.as_f64().powi(2)).sum::<f64>();
            }
        }
        total += s / o.len() as f64;
    }
    Ok(total / adapter_outputs.len() as f64)
}

pub fn preservation_loss<E: Element>(v_unlearned: &Tensor<E>, v_frozen: &Tensor<E>) -> Result<f64> {
    mean_square_diff(v_unlearned, v_frozen, "preservation_loss")
}

pub fn total_loss(l_unlearn: f64, l_loc: f64, l_pre: f64, alpha: f64, beta: f64) -> Result<f64> {
    if ![l_unlearn, l_loc, l_pre, alpha, beta].iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("total_loss inputs".into()));
    }
    Ok(l_unlearn + alpha * l_loc + beta * l_pre)
}

fn graph_mse<E: Element>(g: &mut Graph<E>, pred: Var, target: Var) -> Result<Var> {
    let d = g.sub(pred, target)?;
    let sq = g.mul(d, d)?;
    g.mean(sq)
}

/// Graph form of [`localization_loss`] over a batch: each output holds
/// `masks.len()` samples of `mask.len()` rows each.
pub fn localization_loss_graph<E: Element>(g: &mut Graph<E>, outputs: &[Var], masks: &[ConceptMask]) -> Result<Var> {
    if outputs.is_empty() || masks.is_empty() {
        return Err(Error::InvalidArgument("localization loss needs outputs and masks".into()));
    }
    let width = g.shape(outputs[0])[1];
    let mut comp = Vec::new();
    for m in masks {
        comp.extend_from_slice(m.complement::<E>(width).data());
    }
    let comp = g.constant(Tensor::new(vec![comp.len() / width, width], comp)?);
    let mut acc: Option<Var> = None;
    for &o in outputs {
        let rows = g.shape(o)[0];
        // outputs may carry preservation samples after the target ones
        let o = g.slice(o, 0, 0, g.shape(comp)[0].min(rows))?;
        let masked = g.mul(o, comp)?;
        let sq = g.mul(masked, masked)?;
        let l = g.mean(sq)?;
        acc = Some(match acc {
            Some(a) => g.add(a, l)?,
            None => l,
        });
    }
    g.scale(acc.expect("nonempty"), 1.0 / outputs.len() as f64)
}

/// Named starting points for eta, alpha and beta.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// eta 3, alpha = beta = 5.
    Nudity,
    /// eta 5, alpha = beta = 5.
    Face,
    /// eta 7, alpha 1, beta 0.
    VPrediction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlearnConfig {
    pub eta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub path: PathSpec,
    pub target: ConceptId,
    pub preserve: ConceptId,
    /// Train on grammar-augmented prompts rather than the bare concept.
    pub augment: bool,
    /// Mask threshold as a fraction of the top relevance score.
    pub lambda: f64,
    pub pseudo_steps: usize,
    pub pseudo_cfg: f64,
    /// Pseudo-data times are drawn uniformly from this fraction of the path.
    pub t_range: (f64, f64),
}

impl UnlearnConfig {
    pub fn new(target: ConceptId, preserve: ConceptId, path: PathSpec) -> Self {
        UnlearnConfig {
            eta: 3.0,
            alpha: 5.0,
            beta: 5.0,
            lr: 1e-3,
            steps: 300,
            batch: 4,
            seed: 0,
            path,
            target,
            preserve,
            augment: true,
            lambda: 0.5,
            pseudo_steps: 16,
            pseudo_cfg: 4.0,
            t_range: (0.1, 0.9),
        }
    }

    pub fn with_preset(mut self, preset: Preset) -> Self {
        (self.eta, self.alpha, self.beta) = match preset {
            Preset::Nudity => (3.0, 5.0, 5.0),
            Preset::Face => (5.0, 5.0, 5.0),
            Preset::VPrediction => (7.0, 1.0, 0.0),
        };
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, why: String| Err(Error::InvalidArgument(format!("{k}: {why}")));
        for (k, v) in [("eta", self.eta), ("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(k, format!("must be a finite value >= 0, got {v}"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("must be positive, got {}", self.lr));
        }
        if self.steps == 0 {
            return bad("steps", "must be at least 1".into());
        }
        if self.batch == 0 {
            return bad("batch", "must be at least 1".into());
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return bad("lambda", format!("must lie in (0, 1], got {}", self.lambda));
        }
        if self.pseudo_steps == 0 {
            return bad("pseudo_steps", "must be at least 1".into());
        }
        if !(self.pseudo_cfg >= 0.0 && self.pseudo_cfg.is_finite()) {
            return bad("pseudo_cfg", format!("must be >= 0, got {}", self.pseudo_cfg));
        }
        let (lo, hi) = self.t_range;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return bad("t_range", format!("need 0 < lo <= hi < 1, got ({lo}, {hi})"));
        }
        if self.target == self.preserve {
            return bad("preserve", "must differ from the target concept".into());
        }
        if let PathSpec::VPrediction(s) = &self.path {
            if self.pseudo_steps > s.len() {
                return bad("pseudo_steps", format!("exceeds schedule length {}", s.len()));
            }
        }
        Ok(())
    }
}

/// One row of the metrics file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub step: usize,
    pub loss_unlearn: f64,
    pub loss_loc: f64,
    pub loss_pre: f64,
    pub loss_total: f64,
}

pub const METRICS_HEADER: &str = "step,loss_unlearn,loss_loc,loss_pre,loss_total";

pub fn metrics_csv(rows: &[TrainMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(s, "{},{},{},{},{}", r.step, r.loss_unlearn, r.loss_loc, r.loss_pre, r.loss_total).expect("string");
    }
    s
}

/// Everything one step regresses on, in patch space, with frozen targets
/// already evaluated. Preservation fields are empty when `beta = 0`.
#[derive(Clone)]
pub struct UnlearnBatch<E> {
    /// `[batch * visual_tokens, patch_dim]`.
    pub x_t: Tensor<E>,
    pub prompts: Vec<PromptTokens>,
    pub times: Vec<f64>,
    pub v_neg: Tensor<E>,
    pub pre_x_t: Option<Tensor<E>>,
    pub pre_prompts: Vec<PromptTokens>,
    pub pre_times: Vec<f64>,
    pub pre_frozen: Option<Tensor<E>>,
}

/// Where the localization mask comes from.
#[derive(Debug, Clone)]
pub enum MaskSource {
    /// Thresholded attention of the adapted forward pass itself.
    Attention { lambda: f64 },
    /// Given per target sample.
    Fixed(Vec<ConceptMask>),
}

/// Graph nodes of the objective plus the masks used.
pub struct Objective {
    pub total: Var,
    pub unlearn: Var,
    pub loc: Var,
    pub pre: Option<Var>,
    pub masks: Vec<ConceptMask>,
}

/// Row-wise concatenation of `[rows, width]` matrices.
fn stack<E: Element>(parts: &[Tensor<E>], width: usize) -> Result<Tensor<E>> {
    let mut data = Vec::new();
    for p in parts {
        if p.len() % width != 0 {
            return Err(Error::shape("stack", p.shape(), &[width]));
        }
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![data.len() / width, width], data)
}

/// Batched forward pass without gradients, in patch space.
pub fn predict_patches<E: Element>(
    cfg: &ModelConfig,
    base: &ParamStore<E>,
    adapters: Option<&ParamStore<E>>,
    x: &Tensor<E>,
    prompts: &[PromptTokens],
    times: &[f64],
) -> Result<Tensor<E>> {
    let mut g = Graph::new();
    let bv = bind(&mut g, base, false);
    let av = adapters.map(|a| bind(&mut g, a, false));
    let xv = g.constant(x.clone());
    let refs: Vec<&PromptTokens> = prompts.iter().collect();
    let out = forward_graph(&mut g, cfg, &bv, av.as_ref(), xv, &refs, times, false)?;
    Ok(g.value(out.prediction).clone())
}

/// Records `L_unlearn + alpha L_loc + beta L_pre` on `g`. The base weights
/// should be bound as constants; only `adapters` are meant to be tracked.
#[allow(clippy::too_many_arguments)]
pub fn objective<E: Element>(
    g: &mut Graph<E>,
    cfg: &ModelConfig,
    base: &VarMap,
    adapters: &VarMap,
    batch: &UnlearnBatch<E>,
    alpha: f64,
    beta: f64,
    masks: &MaskSource,
) -> Result<Objective> {
    let b = batch.prompts.len();
    let nv = cfg.visual_tokens();
    let with_pre = beta > 0.0 && batch.pre_x_t.is_some();
    let mut x = batch.x_t.clone();
    let mut prompts: Vec<&PromptTokens> = batch.prompts.iter().collect();
    let mut times = batch.times.clone();
    if with_pre {
        let px = batch.pre_x_t.as_ref().expect("checked");
        x = stack(&[x, px.clone()], cfg.patch_dim())?;
        prompts.extend(batch.pre_prompts.iter());
        times.extend_from_slice(&batch.pre_times);
    }
    let capture = matches!(masks, MaskSource::Attention { .. });
    let xv = g.constant(x);
    let out = forward_graph(g, cfg, base, Some(adapters), xv, &prompts, &times, capture)?;

    let pred = g.slice(out.prediction, 0, 0, b * nv)?;
    let target = g.constant(batch.v_neg.clone());
    let unlearn = graph_mse(g, pred, target)?;

    let masks = match masks {
        MaskSource::Fixed(m) => {
            if m.len() != b || m.iter().any(|m| m.len() != nv) {
                return Err(Error::InvalidArgument(format!("need {b} masks over {nv} tokens")));
            }
            m.clone()
        }
        MaskSource::Attention { lambda } => {
            let mut ms = Vec::with_capacity(b);
            for (i, p) in batch.prompts.iter().enumerate() {
                let cap = AttentionCapture::<E> {
                    attention: out.attention[i].clone(),
                    adapter_outputs: Vec::new(),
                    text_tokens: cfg.max_text,
                };
                ms.push(extract_concept_mask(&cap, p.concept_positions(), *lambda)?);
            }
            ms
        }
    };
    let loc = localization_loss_graph(g, &out.adapter_outputs, &masks)?;

    let mut total = g.scale(loc, alpha)?;
    total = g.add(unlearn, total)?;
    let mut pre = None;
    if with_pre {
        let rows = batch.pre_prompts.len() * nv;
        let p = g.slice(out.prediction, 0, b * nv, rows)?;
        let frozen = batch
            .pre_frozen
            .clone()
            .ok_or_else(|| Error::InvalidArgument("preservation batch lacks frozen targets".into()))?;
        let f = g.constant(frozen);
        let l = graph_mse(g, p, f)?;
        let scaled = g.scale(l, beta)?;
        total = g.add(total, scaled)?;
        pre = Some(l);
    }
    Ok(Objective {
        total,
        unlearn,
        loc,
        pre,
        masks,
    })
}

/// Loss values and adapter gradients for one batch.
pub fn objective_gradients<E: Element>(
    cfg: &ModelConfig,
    base: &ParamStore<E>,
    adapters: &ParamStore<E>,
    batch: &UnlearnBatch<E>,
    alpha: f64,
    beta: f64,
    masks: &MaskSource,
) -> Result<(TrainMetrics, ParamStore<E>)> {
    let mut g = Graph::new();
    let bv = bind(&mut g, base, false);
    let av = bind(&mut g, adapters, true);
    let obj = objective(&mut g, cfg, &bv, &av, batch, alpha, beta, masks)?;
    let scalar = |g: &Graph<E>, v: Var| g.value(v).data()[0].as_f64();
    let m = TrainMetrics {
        step: 0,
        loss_unlearn: scalar(&g, obj.unlearn),
        loss_loc: scalar(&g, obj.loc),
        loss_pre: obj.pre.map_or(0.0, |v| scalar(&g, v)),
        loss_total: scalar(&g, obj.total),
    };
    let grads = g.backward(obj.total)?;
    let store = adapters
        .iter()
        .map(|(name, t)| (name.clone(), grads.get_or_zeros(av[name], t)))
        .collect();
    Ok((m, store))
}

fn draw_prompt(cfg: &UnlearnConfig, grammar: &AugmentGrammar, concept: ConceptId, rng: &mut SeededRng) -> PromptTokens {
    if cfg.augment {
        grammar.sample_split(concept, false, rng)
    } else {
        PromptTokens::bare(concept)
    }
}

/// Pseudo `x_t` for `prompt` at a random time, plus the model time.
fn pseudo_point<E: Element>(
    model: &Model<E>,
    cfg: &UnlearnConfig,
    prompt: &PromptTokens,
    rng: &mut SeededRng,
) -> Result<(Tensor<E>, f64)> {
    let (lo, hi) = cfg.t_range;
    let at = cfg.path.at_fraction(rng.uniform_range(lo, hi));
    let guidance = GuidanceSpec::cfg(cfg.pseudo_cfg);
    let x = partial_denoise(model, &cfg.path, prompt, &guidance, at, cfg.pseudo_steps, rng.next_u64())?;
    Ok((patchify(model.cfg, &x)?, cfg.path.model_time(at)?))
}

/// Draws prompts and pseudo data and evaluates the frozen targets.
pub fn build_batch<E: Element>(
    model_cfg: &ModelConfig,
    base: &ParamStore<E>,
    cfg: &UnlearnConfig,
    grammar: &AugmentGrammar,
    rng: &mut SeededRng,
) -> Result<UnlearnBatch<E>> {
    let frozen = Model::new(model_cfg, base, None);
    let (nv, pd) = (model_cfg.visual_tokens(), model_cfg.patch_dim());
    let mut xs = Vec::with_capacity(cfg.batch);
    let mut prompts = Vec::with_capacity(cfg.batch);
    let mut times = Vec::with_capacity(cfg.batch);
    for _ in 0..cfg.batch {
        let p = draw_prompt(cfg, grammar, cfg.target, rng);
        let (x, t) = pseudo_point(&frozen, cfg, &p, rng)?;
        xs.push(x);
        prompts.push(p);
        times.push(t);
    }
    let x_t = stack(&xs, pd)?;
    // frozen v_u and v_c in one pass
    let mut both: Vec<PromptTokens> = vec![PromptTokens::null(); cfg.batch];
    both.extend(prompts.iter().cloned());
    let doubled = stack(&[x_t.clone(), x_t.clone()], pd)?;
    let times2: Vec<f64> = times.iter().chain(times.iter()).copied().collect();
    let v = predict_patches(model_cfg, base, None, &doubled, &both, &times2)?;
    let half = cfg.batch * nv * pd;
    let v_u = Tensor::new(vec![cfg.batch * nv, pd], v.data()[..half].to_vec())?;
    let v_c = Tensor::new(vec![cfg.batch * nv, pd], v.data()[half..].to_vec())?;
    let v_neg = negative_velocity_target(&v_u, &v_c, cfg.eta)?;

    let (mut pre_x_t, mut pre_prompts, mut pre_times, mut pre_frozen) = (None, Vec::new(), Vec::new(), None);
    if cfg.beta > 0.0 {
        let mut pxs = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let p = draw_prompt(cfg, grammar, cfg.preserve, rng);
            let (x, t) = pseudo_point(&frozen, cfg, &p, rng)?;
            pxs.push(x);
            pre_prompts.push(p);
            pre_times.push(t);
        }
        let px = stack(&pxs, pd)?;
        pre_frozen = Some(predict_patches(model_cfg, base, None, &px, &pre_prompts, &pre_times)?);
        pre_x_t = Some(px);
    }
    Ok(UnlearnBatch {
        x_t,
        prompts,
        times,
        v_neg,
        pre_x_t,
        pre_prompts,
        pre_times,
        pre_frozen,
    })
}

/// One optimizer update of the adapters. The base store is only read.
pub fn unlearn_step<E: Element>(
    model_cfg: &ModelConfig,
    base: &ParamStore<E>,
    adapters: &mut ParamStore<E>,
    opt: &mut Adam,
    cfg: &UnlearnConfig,
    grammar: &AugmentGrammar,
    rng: &mut SeededRng,
    step: usize,
) -> Result<TrainMetrics> {
    let batch = build_batch(model_cfg, base, cfg, grammar, rng)?;
    let masks = MaskSource::Attention { lambda: cfg.lambda };
    let (mut m, grads) = objective_gradients(model_cfg, base, adapters, &batch, cfg.alpha, cfg.beta, &masks)?;
    if ![m.loss_unlearn, m.loss_loc, m.loss_pre, m.loss_total].iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite(format!(
            "unlearning loss at step {step}: unlearn {} loc {} pre {}",
            m.loss_unlearn, m.loss_loc, m.loss_pre
        )));
    }
    opt.step(adapters, &grads)?;
    m.step = step;
    Ok(m)
}

/// Trained adapters and the per-step metrics.
#[derive(Clone)]
pub struct UnlearnOutcome<E> {
    pub adapters: ParamStore<E>,
    pub metrics: Vec<TrainMetrics>,
}

pub fn run_unlearning<E: Element>(
    model_cfg: &ModelConfig,
    base: &ParamStore<E>,
    cfg: &UnlearnConfig,
) -> Result<UnlearnOutcome<E>> {
    cfg.validate()?;
    model_cfg.validate()?;
    let mut adapters = init_adapters::<E>(model_cfg, derive_seed(cfg.seed, "adapters"))?;
    let mut rng = SeededRng::new(derive_seed(cfg.seed, "unlearn"));
    let mut opt = Adam::new(cfg.lr);
    let grammar = AugmentGrammar::default();
    let mut metrics = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        metrics.push(unlearn_step(model_cfg, base, &mut adapters, &mut opt, cfg, &grammar, &mut rng, step)?);
    }
    Ok(UnlearnOutcome { adapters, metrics })
}
