//! Model construction, forward-pass and mask contracts.

use proptest::prelude::*;
use unlearnlab::mmdit::{
    extract_concept_mask, forward, init_adapters, init_model, mask_from_scores, ModelConfig,
};
use unlearnlab::prompt::{Color, ConceptId, PromptTokens, Shape};
use unlearnlab::rng::SeededRng;
use unlearnlab::Tensor;

fn small() -> ModelConfig {
    ModelConfig {
        dim: 16,
        heads: 2,
        mlp_hidden: 32,
        adapter_rank: 4,
        ..ModelConfig::default()
    }
}

fn prompt() -> PromptTokens {
    PromptTokens::bare(ConceptId::new(Shape::Cross, Color::Blue))
}

#[test]
fn init_is_deterministic_and_counted() {
    for cfg in [ModelConfig::default(), small()] {
        let a = init_model::<f32>(&cfg, 5).unwrap();
        let b = init_model::<f32>(&cfg, 5).unwrap();
        assert_eq!(a.iter().collect::<Vec<_>>(), b.iter().collect::<Vec<_>>());
        assert_eq!(a.numel(), cfg.param_count());
        let ad = init_adapters::<f32>(&cfg, 5).unwrap();
        assert_eq!(ad.numel(), cfg.adapter_param_count());
        for (name, t) in ad.iter() {
            if name.ends_with(".up") {
                assert!(t.data().iter().all(|&x| x == 0.0), "{name}");
            }
        }
        assert_ne!(init_model::<f32>(&cfg, 6).unwrap().require("out.w").unwrap(), a.require("out.w").unwrap());
    }
    // enumerated by hand for the default config
    assert_eq!(ModelConfig::default().param_count(), 1344 + 512 + 768 + 64 + 4096 + 8320 + 4096 + 2 * (16384 + 64 + 16384 + 128 + 64 + 24576 + 384) + 780 + 8192 + 128);
}

#[test]
fn zero_adapters_are_an_exact_identity() {
    let cfg = small();
    let base = init_model::<f32>(&cfg, 1).unwrap();
    let ad = init_adapters::<f32>(&cfg, 2).unwrap();
    let x = SeededRng::new(3).normal_tensor::<f32>(&cfg.sample_shape(), 1.0).unwrap();
    let (plain, _) = forward(&cfg, &base, None, &x, &prompt(), 0.4, false).unwrap();
    let (with, cap) = forward(&cfg, &base, Some(&ad), &x, &prompt(), 0.4, true).unwrap();
    assert_eq!(plain.shape(), x.shape());
    assert_eq!(plain, with);
    let cap = cap.unwrap();
    assert_eq!(cap.adapter_outputs.len(), cfg.layers);
    for o in &cap.adapter_outputs {
        assert_eq!(o.shape(), &[cfg.visual_tokens(), cfg.dim]);
        assert!(o.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn nonzero_adapters_change_only_what_follows_them() {
    let cfg = small();
    let mut base = init_model::<f64>(&cfg, 1).unwrap();
    let mut ad = init_adapters::<f64>(&cfg, 2).unwrap();
    let mut rng = SeededRng::new(9);
    // adaLN-zero gates start closed, so open them or the adapters read zeros
    for (_, t) in base.iter_mut() {
        let noise = rng.normal_tensor(t.shape(), 0.1).unwrap();
        *t = t.add(&noise).unwrap();
    }
    for (_, t) in ad.iter_mut() {
        *t = rng.normal_tensor(t.shape(), 0.3).unwrap();
    }
    let x = rng.normal_tensor::<f64>(&cfg.sample_shape(), 1.0).unwrap();
    let (a, ca) = forward(&cfg, &base, None, &x, &prompt(), 0.7, true).unwrap();
    let (b, cb) = forward(&cfg, &base, Some(&ad), &x, &prompt(), 0.7, true).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() > 1e-6);
    // first-layer attention precedes every adapter
    assert_eq!(ca.unwrap().attention[0], cb.unwrap().attention[0]);
}

#[test]
fn captured_attention_rows_are_distributions() {
    let cfg = ModelConfig::default();
    let base = init_model::<f32>(&cfg, 4).unwrap();
    let x = SeededRng::new(8).normal_tensor::<f32>(&cfg.sample_shape(), 1.0).unwrap();
    let (_, cap) = forward(&cfg, &base, None, &x, &prompt(), 0.9, true).unwrap();
    let cap = cap.unwrap();
    assert_eq!(cap.attention.len(), cfg.layers);
    for layer in &cap.attention {
        assert_eq!(layer.len(), cfg.heads);
        for a in layer {
            assert_eq!(a.shape(), &[72, 72]);
            for row in a.data().chunks(72) {
                assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-5);
            }
        }
    }
    let m = extract_concept_mask(&cap, prompt().concept_positions(), 0.5).unwrap();
    assert_eq!(m.len(), 64);
    assert!(m.count() >= 1);
    let again = forward(&cfg, &base, None, &x, &prompt(), 0.9, true).unwrap().1.unwrap();
    assert_eq!(extract_concept_mask(&again, &[0, 1], 0.5).unwrap(), m);
}

#[test]
fn rejects_bad_inputs() {
    let cfg = small();
    let base = init_model::<f32>(&cfg, 1).unwrap();
    let x = Tensor::<f32>::zeros(vec![4, 3, 8, 7]).unwrap();
    assert!(forward(&cfg, &base, None, &x, &prompt(), 0.5, false).is_err());
}

proptest! {
    #[test]
    fn lowering_lambda_never_removes_tokens(
        scores in prop::collection::vec(0.0f64..1.0, 1..80),
        l1 in 0.01f64..1.0,
        l2 in 0.01f64..1.0,
    ) {
        let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
        let a = mask_from_scores(&scores, lo).unwrap();
        let b = mask_from_scores(&scores, hi).unwrap();
        for (x, y) in a.bits().iter().zip(b.bits()) {
            prop_assert!(*x || !*y);
        }
    }
}
