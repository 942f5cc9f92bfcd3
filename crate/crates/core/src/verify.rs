//! Analytic-oracle suites behind `verify-math` and the acceptance checks.
//! Each suite returns a row with the measured worst case.

use std::time::Instant;

use crate::autodiff::Graph;
use crate::error::Result;
use crate::eval::{esr_psr_from_table, ClassTable};
use crate::gradcheck::{compare_gradients, finite_difference_gradient};
use crate::mmdit::{bind, init_adapters, init_model, ConceptMask, Model, ModelConfig};
use crate::paths::{
    rf_interpolate, rf_velocity_from_score, sample, vpred_add_noise, vpred_conversions, GuidanceSpec, Parameterization,
    PathSpec, VPredSchedule, VelocityField,
};
use crate::prompt::{Color, ConceptId, PromptTokens, Shape};
use crate::rng::SeededRng;
use crate::tensor::{relative_error, ParamStore, Tensor};
use crate::unlearn::{
    build_batch, negative_velocity_target, objective, objective_gradients, predict_patches, MaskSource,
    UnlearnBatch, UnlearnConfig,
};

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
    pub seconds: f64,
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> SuiteResult {
    let start = Instant::now();
    let (pass, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    SuiteResult {
        name,
        pass,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Closed-form score of `N((1 - t) x, t^2)` at `x_t`.
fn gaussian_score(x_t: f64, x: f64, t: f64) -> f64 {
    -(x_t - (1.0 - t) * x) / (t * t)
}

/// Velocity from the closed-form score against `eps - x`.
pub fn score_velocity_suite(draws: usize, seed: u64) -> SuiteResult {
    timed("score-to-velocity identity", || {
        let mut rng = SeededRng::new(seed);
        let mut worst = 0.0f64;
        for _ in 0..draws {
            let x = rng.normal();
            let e = rng.normal();
            let t = rng.uniform_range(0.05, 0.95);
            let xt = rf_interpolate(&Tensor::scalar(x), &Tensor::scalar(e), t)?;
            let score = Tensor::scalar(gaussian_score(xt.data()[0], x, t));
            let u = rf_velocity_from_score(&score, &xt, t)?;
            worst = worst.max(relative_error(u.data()[0], e - x));
        }
        Ok((worst < 1e-6, format!("{draws} draws, max rel err {worst:.2e}")))
    })
}

/// `score = -eps / sqrt(1 - ab)` and round trips among v, eps and score.
pub fn vpred_suite(draws: usize, seed: u64) -> SuiteResult {
    use Parameterization::*;
    timed("v-prediction conversions", || {
        let s = VPredSchedule::desk_default();
        let mut rng = SeededRng::new(seed);
        let mut worst = 0.0f64;
        for _ in 0..draws {
            let x0 = rng.normal();
            let e = rng.normal();
            let k = rng.below(s.len());
            let (xt, v) = vpred_add_noise(&Tensor::scalar(x0), &Tensor::scalar(e), k, &s)?;
            let ab = s.alpha_bar(k)?;
            let eps = vpred_conversions(&v, Velocity, Noise, &xt, k, &s)?;
            let score = vpred_conversions(&v, Velocity, Score, &xt, k, &s)?;
            worst = worst.max(relative_error(eps.data()[0], e));
            worst = worst.max(relative_error(score.data()[0], -e / (1.0 - ab).sqrt()));
            for (a, b, start) in [(Velocity, Noise, &v), (Velocity, Score, &v), (Noise, Score, &eps)] {
                let there = vpred_conversions(start, a, b, &xt, k, &s)?;
                let back = vpred_conversions(&there, b, a, &xt, k, &s)?;
                worst = worst.max(relative_error(back.data()[0], start.data()[0]));
            }
        }
        Ok((worst < 1e-6, format!("{draws} draws, max rel err {worst:.2e}")))
    })
}

/// Small two-layer model used by the gradient and degenerate suites.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        frames: 2,
        channels: 3,
        height: 4,
        width: 4,
        patch: 2,
        dim: 16,
        heads: 2,
        layers: 2,
        mlp_hidden: 32,
        adapter_rank: 4,
        ..ModelConfig::default()
    }
}

fn perturbed(store: &ParamStore<f64>, std: f64, seed: u64) -> Result<ParamStore<f64>> {
    let mut rng = SeededRng::new(seed);
    store
        .iter()
        .map(|(n, t)| Ok((n.clone(), t.add(&rng.normal_tensor(t.shape(), std)?)?)))
        .collect()
}

fn toy_batch(cfg: &ModelConfig, base: &ParamStore<f64>, seed: u64) -> Result<UnlearnBatch<f64>> {
    let target = ConceptId::new(Shape::Square, Color::Red);
    let preserve = ConceptId::new(Shape::Disk, Color::Blue);
    let mut ucfg = UnlearnConfig::new(target, preserve, PathSpec::RectifiedFlow);
    ucfg.batch = 2;
    ucfg.pseudo_steps = 4;
    let mut rng = SeededRng::new(seed);
    build_batch(cfg, base, &ucfg, &crate::augment::AugmentGrammar::default(), &mut rng)
}

/// Analytic adapter gradients of each loss term and of the weighted total
/// against central differences.
pub fn gradient_suite(seed: u64) -> SuiteResult {
    timed("loss gradients vs finite differences", || {
        let cfg = toy_config();
        // nonzero modulation so every branch of the blocks is live
        let base = perturbed(&init_model::<f64>(&cfg, seed)?, 0.05, seed ^ 1)?;
        let adapters = perturbed(&init_adapters::<f64>(&cfg, seed)?, 0.3, seed ^ 2)?;
        let batch = toy_batch(&cfg, &base, seed)?;
        let masks = MaskSource::Fixed(
            (0..batch.prompts.len())
                .map(|i| ConceptMask::new((0..cfg.visual_tokens()).map(|j| (i + j) % 3 == 0).collect()))
                .collect::<Result<_>>()?,
        );
        let mut lines = Vec::new();
        let mut pass = true;
        for (name, term) in [("unlearn", 0), ("loc", 1), ("pre", 2), ("total", 3)] {
            let eval = |p: &ParamStore<f64>, analytic: bool| -> Result<(f64, Option<ParamStore<f64>>)> {
                let mut g = Graph::new();
                let bv = bind(&mut g, &base, false);
                let av = bind(&mut g, p, analytic);
                let obj = objective(&mut g, &cfg, &bv, &av, &batch, 0.7, 1.3, &masks)?;
                let out = match term {
                    0 => obj.unlearn,
                    1 => obj.loc,
                    2 => obj.pre.expect("beta > 0"),
                    _ => obj.total,
                };
                let v = g.value(out).data()[0];
                if !analytic {
                    return Ok((v, None));
                }
                let grads = g.backward(out)?;
                let store = p.iter().map(|(n, t)| (n.clone(), grads.get_or_zeros(av[n], t))).collect();
                Ok((v, Some(store)))
            };
            let (_, analytic) = eval(&adapters, true)?;
            let numeric = finite_difference_gradient(|p| Ok(eval(p, false)?.0), &adapters, 1e-5)?;
            let report = compare_gradients(&analytic.expect("requested"), &numeric, 1e-3)?;
            pass &= report.pass;
            lines.push(format!("{name} {:.1e}", report.worst()));
        }
        Ok((pass, format!("max rel err: {}", lines.join(", "))))
    })
}

/// Zero-adapter identities, the eta = 0 target and unit-scale guidance.
pub fn degenerate_suite(seed: u64) -> SuiteResult {
    timed("degenerate cases", || {
        let cfg = toy_config();
        let base = perturbed(&init_model::<f64>(&cfg, seed)?, 0.05, seed ^ 1)?;
        let adapters = init_adapters::<f64>(&cfg, seed)?;
        let batch = toy_batch(&cfg, &base, seed)?;
        let (m, _) = objective_gradients(&cfg, &base, &adapters, &batch, 5.0, 5.0, &MaskSource::Attention { lambda: 0.5 })?;
        let zero_regs = m.loss_loc == 0.0 && m.loss_pre == 0.0;

        let prompt = batch.prompts[0].clone();
        let nv = cfg.visual_tokens();
        let x = Tensor::new(vec![nv, cfg.patch_dim()], batch.x_t.data()[..nv * cfg.patch_dim()].to_vec())?;
        let t = batch.times[0];
        let v_u = predict_patches(&cfg, &base, None, &x, &[PromptTokens::null()], &[t])?;
        let v_c = predict_patches(&cfg, &base, None, &x, std::slice::from_ref(&prompt), &[t])?;
        let eta0 = negative_velocity_target(&v_u, &v_c, 0.0)?;
        let eta0_ok = eta0.data().iter().zip(v_u.data()).all(|(a, b)| a.to_bits() == b.to_bits());

        let model = Model::new(&cfg, &base, None);
        let path = PathSpec::RectifiedFlow;
        let plain = sample(&model, &path, &prompt, &GuidanceSpec::none(), 6, seed)?;
        let unit = sample(&model, &path, &prompt, &GuidanceSpec::cfg(1.0), 6, seed)?;
        let cfg_ok = plain.data().iter().zip(unit.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        Ok((
            zero_regs && eta0_ok && cfg_ok,
            format!(
                "L_loc {} L_pre {}; eta=0 bitwise {eta0_ok}; cfg 1 bitwise {cfg_ok}",
                m.loss_loc, m.loss_pre
            ),
        ))
    })
}

/// Exact rectified flow of a single datum: `u = (x_t - x*) / t`.
struct SingleDatum {
    datum: Vec<f64>,
}

impl VelocityField<f64> for SingleDatum {
    fn sample_shape(&self) -> Vec<usize> {
        vec![self.datum.len()]
    }

    fn predict(&self, x_t: &Tensor<f64>, _: &PromptTokens, t: f64) -> Result<Tensor<f64>> {
        let data = x_t.data().iter().zip(&self.datum).map(|(x, d)| (x - d) / t).collect();
        Tensor::new(x_t.shape().to_vec(), data)
    }
}

pub fn sampler_suite(seed: u64) -> SuiteResult {
    timed("one-step sampler exactness", || {
        let mut rng = SeededRng::new(seed);
        let mut worst = 0.0f64;
        for trial in 0..20 {
            let field = SingleDatum {
                datum: (0..16).map(|_| rng.normal() * 2.0).collect(),
            };
            let p = PromptTokens::null();
            let x = sample(&field, &PathSpec::RectifiedFlow, &p, &GuidanceSpec::none(), 1, seed + trial)?;
            for (a, b) in x.data().iter().zip(&field.datum) {
                worst = worst.max((a - b).abs());
            }
        }
        Ok((worst < 1e-12, format!("max abs err {worst:.1e}")))
    })
}

/// A hand-built classification table with known ESR/PSR, then top-k
/// nesting on random tables.
pub fn metric_suite(seed: u64) -> SuiteResult {
    timed("ESR/PSR semantics", || {
        let table: ClassTable = vec![
            vec![vec![0.6, 0.3, 0.1], vec![0.2, 0.5, 0.3], vec![0.3, 0.3, 0.4], vec![0.1, 0.1, 0.8]],
            vec![vec![0.1, 0.8, 0.1], vec![0.5, 0.4, 0.1]],
            vec![vec![0.2, 0.3, 0.5], vec![0.1, 0.2, 0.7], vec![0.3, 0.5, 0.2], vec![0.0, 0.4, 0.6]],
        ];
        // erased concept 0 is top-1 in 1 of 4 frames and top-2 in 3 of 4;
        // concept 1 is top-1 in 1 of 2 and top-2 in both, concept 2 is top-1
        // and top-2 in 3 of 4
        let mut ok = esr_psr_from_table(&table, 0, 1)? == (0.75, 0.625);
        ok &= esr_psr_from_table(&table, 0, 2)? == (0.25, 0.875);
        let mut rng = SeededRng::new(seed);
        for _ in 0..200 {
            let n = 2 + rng.below(11);
            let t: ClassTable = (0..n)
                .map(|_| (0..1 + rng.below(6)).map(|_| (0..n).map(|_| rng.uniform()).collect()).collect())
                .collect();
            let erased = rng.below(n);
            let mut prev = esr_psr_from_table(&t, erased, 1)?;
            for k in 2..=n {
                let cur = esr_psr_from_table(&t, erased, k)?;
                ok &= cur.0 <= prev.0 && cur.1 >= prev.1;
                prev = cur;
            }
        }
        Ok((ok, "hand table exact; nesting over 200 random tables".into()))
    })
}

/// All suites in a fixed order.
pub fn run_all(seed: u64) -> Vec<SuiteResult> {
    vec![
        score_velocity_suite(1000, seed),
        vpred_suite(1000, seed),
        gradient_suite(seed),
        degenerate_suite(seed),
        sampler_suite(seed),
        metric_suite(seed),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes() {
        for r in run_all(7) {
            println!("{} {}: {}", r.pass, r.name, r.detail);
            assert!(r.pass, "{}: {}", r.name, r.detail);
        }
    }
}
