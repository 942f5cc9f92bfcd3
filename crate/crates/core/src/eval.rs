//! Detector-based evaluation: generation rates, ESR-k / PSR-k and
//! embedding similarity, plus the report files.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentGrammar;
use crate::error::{Error, Result};
use crate::mmdit::{Model, ModelConfig};
use crate::paths::{sample, GuidanceSpec, PathSpec};
use crate::prompt::{ConceptId, PromptTokens, NUM_CONCEPTS};
use crate::rng::{derive_seed, SeededRng};
use crate::tensor::ParamStore;
use crate::world::{argmax, classify_frames, embed, random_scene, synth_sample, DetectorParams, ToyVideo};

/// Fraction of frames whose top class is `target`.
pub fn erasure_rate(det: &DetectorParams, videos: &[ToyVideo], target: ConceptId) -> Result<f64> {
    if videos.is_empty() {
        return Err(Error::InvalidArgument("erasure_rate needs at least one video".into()));
    }
    let mut hits = 0usize;
    let mut frames = 0usize;
    for v in videos {
        for p in classify_frames(det, v)? {
            hits += (argmax(&p) == target.index()) as usize;
            frames += 1;
        }
    }
    Ok(hits as f64 / frames as f64)
}

/// True when fewer than `k` classes score strictly higher than `class`.
pub fn in_top_k(probs: &[f64], class: usize, k: usize) -> bool {
    let p = probs[class];
    probs.iter().filter(|&&q| q > p).count() < k
}

/// Per-frame class probabilities, grouped by the concept that was prompted.
pub type ClassTable = Vec<Vec<Vec<f64>>>;

pub fn classify_table(det: &DetectorParams, videos: &[Vec<ToyVideo>]) -> Result<ClassTable> {
    videos
        .iter()
        .map(|vs| {
            let mut frames = Vec::new();
            for v in vs {
                frames.extend(classify_frames(det, v)?);
            }
            Ok(frames)
        })
        .collect()
}

/// `(ESR-k, PSR-k)`: one minus the erased concept's top-k accuracy, and
/// the mean top-k accuracy over every other concept.
pub fn esr_psr_from_table(table: &ClassTable, erased: usize, k: usize) -> Result<(f64, f64)> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if table.len() < 2 || erased >= table.len() {
        return Err(Error::InvalidArgument(format!(
            "table of {} concepts cannot erase concept {erased}",
            table.len()
        )));
    }
    let acc = |c: usize| -> Result<f64> {
        let frames = &table[c];
        if frames.is_empty() {
            return Err(Error::InvalidArgument(format!("concept {c} has no frames")));
        }
        if let Some(f) = frames.iter().find(|f| f.len() != table.len()) {
            return Err(Error::InvalidArgument(format!("frame has {} scores for {} classes", f.len(), table.len())));
        }
        Ok(frames.iter().filter(|f| in_top_k(f, c, k)).count() as f64 / frames.len() as f64)
    };
    let esr = 1.0 - acc(erased)?;
    let mut psr = 0.0;
    for c in (0..table.len()).filter(|&c| c != erased) {
        psr += acc(c)?;
    }
    Ok((esr, psr / (table.len() - 1) as f64))
}

pub fn esr_psr(det: &DetectorParams, videos: &[Vec<ToyVideo>], erased: ConceptId, k: usize) -> Result<(f64, f64)> {
    esr_psr_from_table(&classify_table(det, videos)?, erased.index(), k)
}

/// Mean cosine between unit vectors and a unit reference.
pub fn concept_similarity(embeddings: &[Vec<f64>], reference: &[f64]) -> Result<f64> {
    if embeddings.is_empty() {
        return Err(Error::InvalidArgument("no embeddings".into()));
    }
    let unit = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-6;
    if !unit(reference) || !embeddings.iter().all(|e| unit(e)) {
        return Err(Error::InvalidArgument("embeddings must have unit norm".into()));
    }
    let mut s = 0.0;
    for e in embeddings {
        if e.len() != reference.len() {
            return Err(Error::InvalidArgument("embedding lengths differ".into()));
        }
        s += e.iter().zip(reference).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok((s / embeddings.len() as f64).clamp(-1.0, 1.0))
}

/// Unit-norm mean embedding of `n` clean renders of `concept`.
pub fn reference_embedding(det: &DetectorParams, concept: ConceptId, n: usize, seed: u64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one render".into()));
    }
    let mut rng = SeededRng::new(seed);
    let mut mean = Vec::new();
    for _ in 0..n {
        let (spec, ctx) = random_scene(concept, &mut rng);
        let (v, _) = synth_sample(spec, ctx, rng.next_u64());
        let e = embed(det, &v)?;
        mean.resize(e.len(), 0.0);
        for (m, x) in mean.iter_mut().zip(e) {
            *m += x;
        }
    }
    let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(mean.into_iter().map(|x| x / norm).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub prompts_per_concept: usize,
    pub sample_steps: usize,
    pub cfg_scale: f64,
    pub reference_renders: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            prompts_per_concept: 20,
            sample_steps: 16,
            cfg_scale: 4.0,
            reference_renders: 32,
        }
    }
}

/// `n` distinct held-out augmented prompts per concept.
pub fn eval_prompts(n: usize, seed: u64) -> Result<Vec<Vec<PromptTokens>>> {
    let grammar = AugmentGrammar::default();
    ConceptId::all()
        .map(|c| {
            let mut rng = SeededRng::new(derive_seed(seed, &format!("eval-prompts/{c}")));
            let mut seen = BTreeSet::new();
            let mut out = Vec::with_capacity(n);
            let budget = grammar.capacity() * 64;
            for _ in 0..budget {
                if out.len() == n {
                    break;
                }
                let p = grammar.sample_split(c, true, &mut rng);
                if seen.insert(p.clone()) {
                    out.push(p);
                }
            }
            if out.len() < n {
                return Err(Error::InvalidArgument(format!("only {} held-out prompts for {c}", out.len())));
            }
            Ok(out)
        })
        .collect()
}

/// One video per prompt. The noise for prompt `j` of concept `c` depends
/// only on `(seed, c, j)`, so two models evaluated with the same seed see
/// the same starting noise.
pub fn generate_videos(
    model_cfg: &ModelConfig,
    base: &ParamStore<f32>,
    adapters: Option<&ParamStore<f32>>,
    path: &PathSpec,
    prompts: &[Vec<PromptTokens>],
    cfg: &EvalConfig,
    seed: u64,
) -> Result<Vec<Vec<ToyVideo>>> {
    let model = Model::new(model_cfg, base, adapters);
    let guidance = GuidanceSpec::cfg(cfg.cfg_scale);
    prompts
        .iter()
        .enumerate()
        .map(|(c, ps)| {
            ps.iter()
                .enumerate()
                .map(|(j, p)| {
                    let noise_seed = derive_seed(seed, &format!("eval-noise/{c}/{j}"));
                    let x = sample(&model, path, p, &guidance, cfg.sample_steps, noise_seed)?;
                    Ok(crate::world::from_model_space(&x))
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub seed: u64,
    pub config_hash: String,
    pub base_checkpoint: String,
    pub adapter_checkpoint: String,
    pub erased: String,
    pub preserve: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptRow {
    pub concept: String,
    pub base_rate: f64,
    pub unlearned_rate: f64,
    pub base_similarity: f64,
    pub unlearned_similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub k: usize,
    pub base_esr: f64,
    pub unlearned_esr: f64,
    pub base_psr: f64,
    pub unlearned_psr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: RunMeta,
    pub concepts: Vec<ConceptRow>,
    pub topk: Vec<TopK>,
    /// Erased-concept rate of the base model minus that of the unlearned one.
    pub reduction: f64,
}

pub const TOP_K: [usize; 2] = [1, 3];

impl EvalReport {
    /// Builds the report from both models' videos of every concept.
    pub fn build(
        meta: RunMeta,
        det: &DetectorParams,
        erased: ConceptId,
        base_videos: &[Vec<ToyVideo>],
        unlearned_videos: &[Vec<ToyVideo>],
        references: &[Vec<f64>],
    ) -> Result<Self> {
        if base_videos.len() != NUM_CONCEPTS || unlearned_videos.len() != NUM_CONCEPTS || references.len() != NUM_CONCEPTS {
            return Err(Error::InvalidArgument(format!("evaluation needs all {NUM_CONCEPTS} concepts")));
        }
        let mut concepts = Vec::with_capacity(NUM_CONCEPTS);
        for c in ConceptId::all() {
            let i = c.index();
            let sim = |vs: &[ToyVideo]| -> Result<f64> {
                let e = vs.iter().map(|v| embed(det, v)).collect::<Result<Vec<_>>>()?;
                concept_similarity(&e, &references[i])
            };
            concepts.push(ConceptRow {
                concept: c.name(),
                base_rate: erasure_rate(det, &base_videos[i], c)?,
                unlearned_rate: erasure_rate(det, &unlearned_videos[i], c)?,
                base_similarity: sim(&base_videos[i])?,
                unlearned_similarity: sim(&unlearned_videos[i])?,
            });
        }
        let bt = classify_table(det, base_videos)?;
        let ut = classify_table(det, unlearned_videos)?;
        let mut topk = Vec::new();
        for k in TOP_K {
            let (base_esr, base_psr) = esr_psr_from_table(&bt, erased.index(), k)?;
            let (unlearned_esr, unlearned_psr) = esr_psr_from_table(&ut, erased.index(), k)?;
            topk.push(TopK {
                k,
                base_esr,
                unlearned_esr,
                base_psr,
                unlearned_psr,
            });
        }
        let row = &concepts[erased.index()];
        let reduction = row.base_rate - row.unlearned_rate;
        Ok(EvalReport {
            meta,
            concepts,
            topk,
            reduction,
        })
    }

    pub fn row(&self, c: ConceptId) -> &ConceptRow {
        &self.concepts[c.index()]
    }

    pub fn psr(&self, k: usize) -> Option<f64> {
        self.topk.iter().find(|t| t.k == k).map(|t| t.unlearned_psr)
    }

    /// Pretty JSON with keys in sorted order.
    pub fn to_json(&self) -> Result<String> {
        let v = serde_json::to_value(self)?;
        let mut s = serde_json::to_string_pretty(&v)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("concept,base_rate,unlearned_rate,base_similarity,unlearned_similarity\n");
        for r in &self.concepts {
            writeln!(
                s,
                "{},{},{},{},{}",
                r.concept, r.base_rate, r.unlearned_rate, r.base_similarity, r.unlearned_similarity
            )
            .expect("string");
        }
        s
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let j = dir.join("report.json");
        std::fs::write(&j, self.to_json()?).map_err(|e| Error::io(&j, e))?;
        let c = dir.join("report.csv");
        std::fs::write(&c, self.to_csv()).map_err(|e| Error::io(&c, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn onehot(n: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        v
    }

    #[test]
    fn top_k_counts_strictly_greater() {
        let p = [0.1, 0.4, 0.4, 0.1];
        assert!(in_top_k(&p, 1, 1));
        assert!(in_top_k(&p, 2, 1));
        assert!(!in_top_k(&p, 0, 1));
        assert!(!in_top_k(&p, 0, 2));
        assert!(in_top_k(&p, 0, 3));
    }

    #[test]
    fn hand_computed_table() {
        // 3 classes, erase class 0
        let table = vec![
            vec![vec![0.7, 0.2, 0.1], vec![0.2, 0.5, 0.3], vec![0.1, 0.3, 0.6], vec![0.3, 0.6, 0.1]],
            vec![vec![0.1, 0.8, 0.1], vec![0.5, 0.4, 0.1]],
            vec![vec![0.2, 0.3, 0.5], vec![0.1, 0.2, 0.7], vec![0.3, 0.5, 0.2], vec![0.0, 0.4, 0.6]],
        ];
        // concept 0 is top-1 in 1 of 4 frames and top-2 in 2 of 4
        let (esr, psr) = esr_psr_from_table(&table, 0, 1).unwrap();
        assert_eq!(esr, 0.75);
        // top-1: concept 1 in 1 of 2, concept 2 in 3 of 4
        assert_eq!(psr, (0.5 + 0.75) / 2.0);
        let (esr, psr) = esr_psr_from_table(&table, 0, 2).unwrap();
        // top-2: concept 1 in both, concept 2 still in 3 of 4
        assert_eq!(esr, 0.5);
        assert_eq!(psr, (1.0 + 0.75) / 2.0);
        let full = vec![vec![onehot(3, 1)], vec![onehot(3, 1)], vec![onehot(3, 2)]];
        assert_eq!(esr_psr_from_table(&full, 0, 1).unwrap(), (1.0, 1.0));
        assert!(esr_psr_from_table(&full, 0, 0).is_err());
        assert!(esr_psr_from_table(&vec![vec![onehot(3, 1)], vec![]], 0, 1).is_err());
    }

    #[test]
    fn similarity_examples() {
        let a = vec![1.0, 0.0];
        assert_eq!(concept_similarity(std::slice::from_ref(&a), &a).unwrap(), 1.0);
        assert_eq!(concept_similarity(&[vec![0.0, 1.0]], &a).unwrap(), 0.0);
        assert!(concept_similarity(&[vec![2.0, 0.0]], &a).is_err());
    }

    fn report() -> EvalReport {
        EvalReport {
            meta: RunMeta {
                seed: 7,
                config_hash: "ab12".into(),
                base_checkpoint: "base.ckpt".into(),
                adapter_checkpoint: "adapters.ckpt".into(),
                erased: "red-square".into(),
                preserve: "blue-disk".into(),
            },
            concepts: ConceptId::all()
                .map(|c| ConceptRow {
                    concept: c.name(),
                    base_rate: 0.1 * (c.index() % 3) as f64,
                    unlearned_rate: 1.0 / 3.0,
                    base_similarity: -0.25,
                    unlearned_similarity: 0.123456789,
                })
                .collect(),
            topk: vec![TopK {
                k: 1,
                base_esr: 0.2,
                unlearned_esr: 0.9,
                base_psr: 0.7,
                unlearned_psr: 0.65,
            }],
            reduction: 0.1 - 1.0 / 3.0,
        }
    }

    #[test]
    fn report_files() {
        let r = report();
        let j = r.to_json().unwrap();
        assert_eq!(EvalReport::from_json(&j).unwrap(), r);
        assert_eq!(j, r.to_json().unwrap());
        assert!(j.find("\"concepts\"").unwrap() < j.find("\"meta\"").unwrap());
        assert_eq!(r.to_csv().lines().count(), NUM_CONCEPTS + 1);
        let dir = tempfile::tempdir().unwrap();
        r.write(dir.path()).unwrap();
        let a = std::fs::read(dir.path().join("report.json")).unwrap();
        r.write(dir.path()).unwrap();
        assert_eq!(a, std::fs::read(dir.path().join("report.json")).unwrap());
    }

    fn random_table(seed: u64, classes: usize) -> ClassTable {
        let mut rng = SeededRng::new(seed);
        (0..classes)
            .map(|_| (0..5).map(|_| (0..classes).map(|_| rng.uniform()).collect()).collect())
            .collect()
    }

    proptest! {
        #[test]
        fn topk_nesting(seed in 0u64..10_000, erased in 0usize..6) {
            let t = random_table(seed, 6);
            let mut prev = esr_psr_from_table(&t, erased, 1).unwrap();
            for k in 2..=6 {
                let cur = esr_psr_from_table(&t, erased, k).unwrap();
                prop_assert!(cur.0 <= prev.0 && cur.1 >= prev.1);
                prev = cur;
            }
            prop_assert_eq!(prev, (0.0, 1.0));
        }
    }
}
