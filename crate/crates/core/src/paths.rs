//! Generative paths: the v-prediction noise schedule, the rectified-flow
//! linear path, conversions between score / noise / velocity
//! parameterizations, and a deterministic guided sampler.
//!
//! Conventions used throughout:
//!
//! * Rectified flow: `x_t = (1 - t) x + t eps` with `t = 0` at the data and
//!   `t = 1` at the noise; the target velocity is `u = eps - x`.
//! * v-prediction: `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps` and
//!   `v = sqrt(ab_t) eps - sqrt(1 - ab_t) x0`.

use crate::error::{Error, Result};
use crate::prompt::PromptTokens;
use crate::rng::sample_standard_normal;
use crate::tensor::{Element, Tensor};

/// Discrete variance schedule with cumulative products `ab_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct VPredSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl VPredSchedule {
    /// Betas spaced linearly from `beta_start` to `beta_end` over `steps`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidArgument("schedule needs at least 2 steps".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut acc = 1.0;
        let alpha_bar = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(VPredSchedule { betas, alpha_bar })
    }

    /// 50 steps, betas 2e-3..0.4: the usual 1e-4..2e-2 range rescaled by
    /// 1000/50 so that `ab` at the last step is close to zero.
    pub fn desk_default() -> Self {
        Self::linear(50, 2e-3, 0.4).expect("valid constants")
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar.get(t).copied().ok_or_else(|| {
            Error::InvalidArgument(format!("step {t} outside schedule of length {}", self.len()))
        })
    }
}

/// Which generative parameterization a model was trained with.
#[derive(Debug, Clone, PartialEq)]
pub enum PathSpec {
    VPrediction(VPredSchedule),
    RectifiedFlow,
}

/// A location on a path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PathTime {
    /// Continuous rectified-flow time in `[0, 1]`.
    Flow(f64),
    /// Discrete v-prediction step index.
    Step(usize),
    /// The data end (`t = 0` for flows, the predicted `x0` for v-prediction).
    Clean,
}

impl PathSpec {
    pub fn name(&self) -> &'static str {
        match self {
            PathSpec::VPrediction(_) => "v-prediction",
            PathSpec::RectifiedFlow => "rectified-flow",
        }
    }

    pub fn noise_end(&self) -> PathTime {
        match self {
            PathSpec::VPrediction(s) => PathTime::Step(s.len() - 1),
            PathSpec::RectifiedFlow => PathTime::Flow(1.0),
        }
    }

    /// Time value fed to the network, in `(0, 1]` except at the data end.
    pub fn model_time(&self, at: PathTime) -> Result<f64> {
        match (self, at) {
            (PathSpec::RectifiedFlow, PathTime::Flow(t)) if (0.0..=1.0).contains(&t) => Ok(t),
            (PathSpec::VPrediction(s), PathTime::Step(k)) if k < s.len() => {
                Ok((k + 1) as f64 / s.len() as f64)
            }
            (_, PathTime::Clean) => Ok(0.0),
            _ => Err(Error::InvalidArgument(format!("{at:?} is not a point on a {} path", self.name()))),
        }
    }

    /// Maps a fraction `u` of the path (0 = data, 1 = noise) to a path time.
    pub fn at_fraction(&self, u: f64) -> PathTime {
        let u = u.clamp(0.0, 1.0);
        match self {
            PathSpec::RectifiedFlow => PathTime::Flow(u),
            PathSpec::VPrediction(s) => {
                PathTime::Step(((u * (s.len() - 1) as f64).round() as usize).min(s.len() - 1))
            }
        }
    }

    /// Noisy sample and regression target for training pair `(x, eps)`.
    pub fn training_pair<E: Element>(
        &self,
        x: &Tensor<E>,
        eps: &Tensor<E>,
        at: PathTime,
    ) -> Result<(Tensor<E>, Tensor<E>)> {
        match (self, at) {
            (PathSpec::RectifiedFlow, PathTime::Flow(t)) => {
                let xt = rf_interpolate(x, eps, t)?;
                let u = eps.sub(x)?;
                Ok((xt, u))
            }
            (PathSpec::VPrediction(s), PathTime::Step(k)) => vpred_add_noise(x, eps, k, s),
            _ => Err(Error::InvalidArgument(format!("{at:?} is not a training time on a {} path", self.name()))),
        }
    }
}

/// `(1 - t) x + t eps`.
pub fn rf_interpolate<E: Element>(x: &Tensor<E>, eps: &Tensor<E>, t: f64) -> Result<Tensor<E>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("t = {t} outside [0, 1]")));
    }
    if t == 0.0 {
        if x.shape() != eps.shape() {
            return Err(Error::shape("rf_interpolate", x.shape(), eps.shape()));
        }
        return Ok(x.clone());
    }
    if t == 1.0 {
        if x.shape() != eps.shape() {
            return Err(Error::shape("rf_interpolate", x.shape(), eps.shape()));
        }
        return Ok(eps.clone());
    }
    x.affine2(1.0 - t, eps, t, "rf_interpolate")
}

/// Forward noising at step `t`; returns `(x_t, v_target)`.
pub fn vpred_add_noise<E: Element>(
    x0: &Tensor<E>,
    eps: &Tensor<E>,
    t: usize,
    s: &VPredSchedule,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let ab = s.alpha_bar(t)?;
    let (a, sig) = (ab.sqrt(), (1.0 - ab).sqrt());
    let xt = x0.affine2(a, eps, sig, "vpred_add_noise")?;
    let v = eps.affine2(a, x0, -sig, "vpred_add_noise")?;
    Ok((xt, v))
}

/// Flow velocity from a score on the Gaussian path `N((1-t) x, t^2 I)`:
/// `u = -t/(1-t) * score - x_t/(1-t)`.
pub fn rf_velocity_from_score<E: Element>(score: &Tensor<E>, x_t: &Tensor<E>, t: f64) -> Result<Tensor<E>> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Singular(format!("score/velocity equivalence undefined at t = {t}")));
    }
    score.affine2(-t / (1.0 - t), x_t, -1.0 / (1.0 - t), "rf_velocity_from_score")
}

/// What a v-prediction network output denotes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parameterization {
    Velocity,
    Noise,
    Score,
}

/// Exact conversion between velocity, noise and score at step `t`:
///
/// ```text
/// eps   = sqrt(1-ab) x_t + sqrt(ab) v
/// v     = (eps - sqrt(1-ab) x_t) / sqrt(ab)
/// score = -eps / sqrt(1-ab)
/// ```
pub fn vpred_conversions<E: Element>(
    value: &Tensor<E>,
    kind_in: Parameterization,
    kind_out: Parameterization,
    x_t: &Tensor<E>,
    t: usize,
    s: &VPredSchedule,
) -> Result<Tensor<E>> {
    if value.shape() != x_t.shape() {
        return Err(Error::shape("vpred_conversions", value.shape(), x_t.shape()));
    }
    if kind_in == kind_out {
        return Ok(value.clone());
    }
    let ab = s.alpha_bar(t)?;
    let (a, sig) = (ab.sqrt(), (1.0 - ab).sqrt());
    let uses_score = kind_in == Parameterization::Score || kind_out == Parameterization::Score;
    if uses_score && sig == 0.0 {
        return Err(Error::Singular(format!("score undefined where alpha_bar = 1 (step {t})")));
    }
    if kind_out == Parameterization::Velocity && a == 0.0 {
        return Err(Error::Singular(format!("velocity undefined where alpha_bar = 0 (step {t})")));
    }
    let eps = match kind_in {
        Parameterization::Noise => value.clone(),
        Parameterization::Velocity => x_t.affine2(sig, value, a, "vpred_conversions")?,
        Parameterization::Score => value.scale(-sig),
    };
    match kind_out {
        Parameterization::Noise => Ok(eps),
        Parameterization::Velocity => eps.affine2(1.0 / a, x_t, -sig / a, "vpred_conversions"),
        Parameterization::Score => Ok(eps.scale(-1.0 / sig)),
    }
}

/// A network predicting the path's regression target.
pub trait VelocityField<E: Element> {
    /// Shape of one sample.
    fn sample_shape(&self) -> Vec<usize>;

    /// Prediction at `x_t` under `prompt`; `time` comes from
    /// [`PathSpec::model_time`].
    fn predict(&self, x_t: &Tensor<E>, prompt: &PromptTokens, time: f64) -> Result<Tensor<E>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidanceMode {
    None,
    Cfg,
    NegativePrompt,
}

/// How conditional and reference predictions are combined while sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceSpec {
    mode: GuidanceMode,
    scale: f64,
    negative_prompt: Option<PromptTokens>,
}

impl GuidanceSpec {
    pub fn none() -> Self {
        GuidanceSpec {
            mode: GuidanceMode::None,
            scale: 1.0,
            negative_prompt: None,
        }
    }

    pub fn cfg(scale: f64) -> Self {
        GuidanceSpec {
            mode: GuidanceMode::Cfg,
            scale,
            negative_prompt: None,
        }
    }

    pub fn negative_prompt(scale: f64, negative: PromptTokens) -> Self {
        GuidanceSpec {
            mode: GuidanceMode::NegativePrompt,
            scale,
            negative_prompt: Some(negative),
        }
    }

    pub fn new(mode: GuidanceMode, scale: f64, negative_prompt: Option<PromptTokens>) -> Result<Self> {
        if !scale.is_finite() {
            return Err(Error::InvalidArgument("guidance scale must be finite".into()));
        }
        if mode == GuidanceMode::NegativePrompt && negative_prompt.is_none() {
            return Err(Error::InvalidArgument("negative-prompt guidance needs a negative prompt".into()));
        }
        Ok(GuidanceSpec {
            mode,
            scale,
            negative_prompt,
        })
    }

    pub fn mode(&self) -> GuidanceMode {
        self.mode
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// `none`: cond; `cfg`: uncond + s (cond - uncond);
    /// `negative_prompt`: neg + s (cond - neg). A scale of exactly 1 returns
    /// the conditional prediction without evaluating the reference branch.
    pub fn predict<E: Element, M: VelocityField<E> + ?Sized>(
        &self,
        model: &M,
        x_t: &Tensor<E>,
        prompt: &PromptTokens,
        time: f64,
    ) -> Result<Tensor<E>> {
        let cond = model.predict(x_t, prompt, time)?;
        if self.mode == GuidanceMode::None || self.scale == 1.0 {
            return Ok(cond);
        }
        let reference_prompt = match self.mode {
            GuidanceMode::Cfg => PromptTokens::null(),
            GuidanceMode::NegativePrompt => self
                .negative_prompt
                .clone()
                .expect("validated at construction"),
            GuidanceMode::None => unreachable!(),
        };
        let reference = model.predict(x_t, &reference_prompt, time)?;
        reference.affine2(1.0 - self.scale, &cond, self.scale, "guidance")
    }
}

fn rf_target(at: PathTime) -> Result<f64> {
    match at {
        PathTime::Flow(t) if (0.0..=1.0).contains(&t) => Ok(t),
        PathTime::Clean => Ok(0.0),
        other => Err(Error::InvalidArgument(format!("{other:?} is not a rectified-flow time"))),
    }
}

/// Integrates from `noise` (at the noise end) towards the data end and stops
/// at `target`. Rectified flow takes uniform Euler steps `t_i = 1 - i/steps`
/// (the last step truncated at `target`); v-prediction takes deterministic
/// DDIM steps over `steps` evenly spaced indices.
pub fn denoise_from<E: Element, M: VelocityField<E> + ?Sized>(
    model: &M,
    path: &PathSpec,
    prompt: &PromptTokens,
    guidance: &GuidanceSpec,
    noise: Tensor<E>,
    target: PathTime,
    steps: usize,
) -> Result<Tensor<E>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("sampler needs at least one step".into()));
    }
    let mut x = noise;
    match path {
        PathSpec::RectifiedFlow => {
            let stop = rf_target(target)?;
            let mut t = 1.0;
            for i in 0..steps {
                if t <= stop {
                    break;
                }
                let next = (steps - i - 1) as f64 / steps as f64;
                let to = next.max(stop);
                let u = guidance.predict(model, &x, prompt, t)?;
                x = x
                    .affine2(1.0, &u, -(t - to), "euler step")?
                    .ensure_finite(|| format!("sampler step {i} (t = {t})"))?;
                t = to;
            }
        }
        PathSpec::VPrediction(s) => {
            let n = s.len();
            if steps > n {
                return Err(Error::InvalidArgument(format!("{steps} steps exceed schedule length {n}")));
            }
            let stop = match target {
                PathTime::Step(k) if k < n => Some(k),
                PathTime::Clean => None,
                other => {
                    return Err(Error::InvalidArgument(format!("{other:?} is not a v-prediction step")))
                }
            };
            let grid: Vec<usize> = (0..steps).map(|i| (steps - i) * n / steps - 1).collect();
            let mut cur = n - 1;
            for i in 0..steps {
                if Some(cur) == stop {
                    break;
                }
                let next = grid.get(i + 1).copied();
                let to = match (next, stop) {
                    (Some(j), Some(k)) if j < k => Some(k),
                    (None, Some(k)) => Some(k),
                    (j, _) => j,
                };
                let time = path.model_time(PathTime::Step(cur))?;
                let v = guidance.predict(model, &x, prompt, time)?;
                let ab = s.alpha_bar(cur)?;
                let (a, sig) = (ab.sqrt(), (1.0 - ab).sqrt());
                let x0 = x.affine2(a, &v, -sig, "ddim step")?;
                let eps = x.affine2(sig, &v, a, "ddim step")?;
                let ab_to = match to {
                    Some(j) => s.alpha_bar(j)?,
                    None => 1.0,
                };
                x = x0
                    .affine2(ab_to.sqrt(), &eps, (1.0 - ab_to).sqrt(), "ddim step")?
                    .ensure_finite(|| format!("sampler step {i} (index {cur})"))?;
                match to {
                    Some(j) => cur = j,
                    None => break,
                }
            }
        }
    }
    Ok(x)
}

/// Runs the sampler from `sample_standard_normal(shape, seed)` to `target`.
pub fn partial_denoise<E: Element, M: VelocityField<E> + ?Sized>(
    model: &M,
    path: &PathSpec,
    prompt: &PromptTokens,
    guidance: &GuidanceSpec,
    target: PathTime,
    steps: usize,
    seed: u64,
) -> Result<Tensor<E>> {
    let noise = sample_standard_normal(&model.sample_shape(), seed)?;
    denoise_from(model, path, prompt, guidance, noise, target, steps)
}

/// Full sampling to the data end.
pub fn sample<E: Element, M: VelocityField<E> + ?Sized>(
    model: &M,
    path: &PathSpec,
    prompt: &PromptTokens,
    guidance: &GuidanceSpec,
    steps: usize,
    seed: u64,
) -> Result<Tensor<E>> {
    partial_denoise(model, path, prompt, guidance, PathTime::Clean, steps, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(v: f64) -> Tensor<f64> {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn rf_interpolate_examples() {
        assert_eq!(rf_interpolate(&t1(1.0), &t1(0.0), 0.25).unwrap().data(), &[0.75]);
        assert_eq!(rf_interpolate(&t1(2.0), &t1(-1.0), 0.5).unwrap().data(), &[0.5]);
        let x = t1(0.3);
        let e = t1(-1.7);
        assert_eq!(rf_interpolate(&x, &e, 0.0).unwrap(), x);
        assert_eq!(rf_interpolate(&x, &e, 1.0).unwrap(), e);
        assert!(rf_interpolate(&x, &Tensor::zeros(vec![2]).unwrap(), 0.5).is_err());
    }

    fn schedule_with(ab: f64) -> VPredSchedule {
        // two-step schedule whose first cumulative product is `ab`
        VPredSchedule {
            betas: vec![1.0 - ab, 0.5],
            alpha_bar: vec![ab, ab * 0.5],
        }
    }

    #[test]
    fn vpred_add_noise_example() {
        let s = schedule_with(0.64);
        let (xt, v) = vpred_add_noise(&t1(1.0), &t1(0.5), 0, &s).unwrap();
        assert!((xt.data()[0] - 1.1).abs() < 1e-15);
        assert!((v.data()[0] + 0.2).abs() < 1e-15);
        let (xt, v) = vpred_add_noise(&t1(0.0), &t1(0.0), 0, &s).unwrap();
        assert_eq!((xt.data()[0], v.data()[0]), (0.0, 0.0));
    }

    #[test]
    fn vpred_no_noise_limit() {
        let s = schedule_with(1.0 - 1e-14);
        let (xt, v) = vpred_add_noise(&t1(0.7), &t1(-0.4), 0, &s).unwrap();
        assert!((xt.data()[0] - 0.7).abs() < 1e-6);
        assert!((v.data()[0] + 0.4).abs() < 1e-6);
    }

    #[test]
    fn conversions_example() {
        let s = schedule_with(0.64);
        let (xt, v) = (t1(1.1), t1(-0.2));
        let eps = vpred_conversions(&v, Parameterization::Velocity, Parameterization::Noise, &xt, 0, &s).unwrap();
        assert!((eps.data()[0] - 0.5).abs() < 1e-12);
        let score = vpred_conversions(&v, Parameterization::Velocity, Parameterization::Score, &xt, 0, &s).unwrap();
        assert!((score.data()[0] + 0.5 / 0.6).abs() < 1e-12);
        let same = vpred_conversions(&v, Parameterization::Score, Parameterization::Score, &xt, 0, &s).unwrap();
        assert_eq!(same, v);
    }

    #[test]
    fn score_singular_at_unit_alpha_bar() {
        let s = VPredSchedule {
            betas: vec![0.0, 0.1],
            alpha_bar: vec![1.0, 0.9],
        };
        let r = vpred_conversions(&t1(0.1), Parameterization::Velocity, Parameterization::Score, &t1(1.0), 0, &s);
        assert!(matches!(r, Err(Error::Singular(_))));
    }

    #[test]
    fn rf_velocity_examples() {
        // x* = 1, eps = 0, t = 0.5: score of N((1-t) x*, t^2) at x_t = 0.5 is 0
        let u = rf_velocity_from_score(&t1(0.0), &t1(0.5), 0.5).unwrap();
        assert!((u.data()[0] + 1.0).abs() < 1e-15);
        // x* = 0, eps = 1: x_t = 0.5, score = -(0.5 - 0)/0.25 = -2
        let u = rf_velocity_from_score(&t1(-2.0), &t1(0.5), 0.5).unwrap();
        assert!((u.data()[0] - 1.0).abs() < 1e-15);
        assert_eq!(rf_velocity_from_score(&t1(0.0), &t1(0.0), 0.3).unwrap().data(), &[0.0]);
        assert!(matches!(rf_velocity_from_score(&t1(0.0), &t1(0.0), 0.0), Err(Error::Singular(_))));
        assert!(matches!(rf_velocity_from_score(&t1(0.0), &t1(0.0), 1.0), Err(Error::Singular(_))));
    }

    #[test]
    fn schedule_invariants() {
        for s in [VPredSchedule::desk_default(), VPredSchedule::linear(50, 1e-4, 2e-2).unwrap()] {
            let ab = s.alpha_bars();
            assert!(ab.windows(2).all(|w| w[1] < w[0]));
            assert!(ab.iter().all(|&a| a > 0.0 && a <= 1.0));
            assert!(ab[0] > 0.99);
        }
        assert!(*VPredSchedule::desk_default().alpha_bars().last().unwrap() < 1e-3);
    }

    #[test]
    fn negative_prompt_mode_requires_prompt() {
        assert!(GuidanceSpec::new(GuidanceMode::NegativePrompt, 2.0, None).is_err());
        assert!(GuidanceSpec::new(GuidanceMode::Cfg, f64::NAN, None).is_err());
    }
}
