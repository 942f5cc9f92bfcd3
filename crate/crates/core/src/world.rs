//! The synthetic concept world: procedurally rendered tiny videos, a
//! per-frame concept detector, and the detector's embedding.
//!
//! A video is `[F, 3, 8, 8]` with values in `[0, 1]`. The object is a 4x4
//! glyph in one of three pure colours, placed at a quadrant corner over a
//! flat background and optionally drifting one pixel per frame.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::autodiff::{lookup, Graph};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::prompt::{Background, Color, ConceptId, Modifier, Motion, Position, PromptTokens, Shape, Token};
use crate::rng::SeededRng;
use crate::tensor::{ParamStore, Tensor};

pub const FRAMES: usize = 4;
pub const CHANNELS: usize = 3;
pub const SIDE: usize = 8;
pub const GLYPH: usize = 4;
pub const FRAME_LEN: usize = CHANNELS * SIDE * SIDE;
pub const VIDEO_SHAPE: [usize; 4] = [FRAMES, CHANNELS, SIDE, SIDE];
pub const NUM_CLASSES: usize = crate::prompt::NUM_CONCEPTS;
pub const EMBED_DIM: usize = 16;
const HIDDEN: usize = 64;
const DIM_FACTOR: f32 = 0.6;

/// A rendered video, `[F, C, H, W]` in `[0, 1]`.
pub type ToyVideo = Tensor<f32>;

/// Concept identity plus motion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConceptSpec {
    pub shape: Shape,
    pub color: Color,
    pub motion: Motion,
}

impl ConceptSpec {
    pub fn new(concept: ConceptId, motion: Motion) -> Self {
        ConceptSpec {
            shape: concept.shape,
            color: concept.color,
            motion,
        }
    }

    pub fn concept(&self) -> ConceptId {
        ConceptId::new(self.shape, self.color)
    }
}

/// Scene parameters around the concept. A missing position is drawn from
/// the seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Context {
    pub background: Background,
    pub position: Option<Position>,
    pub modifier: Modifier,
}

impl Default for Context {
    fn default() -> Self {
        Context {
            background: Background::Black,
            position: None,
            modifier: Modifier::Bright,
        }
    }
}

fn glyph(shape: Shape) -> [[bool; GLYPH]; GLYPH] {
    let rows: [&str; GLYPH] = match shape {
        Shape::Square => ["####", "#..#", "#..#", "####"],
        Shape::Cross => ["#..#", ".##.", ".##.", "#..#"],
        Shape::Disk => [".##.", "####", "####", ".##."],
        Shape::Stripes => ["####", "....", "####", "...."],
    };
    let mut g = [[false; GLYPH]; GLYPH];
    for (r, row) in rows.iter().enumerate() {
        for (c, ch) in row.bytes().enumerate() {
            g[r][c] = ch == b'#';
        }
    }
    g
}

pub fn color_rgb(color: Color) -> [f32; 3] {
    match color {
        Color::Red => [1.0, 0.0, 0.0],
        Color::Green => [0.0, 1.0, 0.0],
        Color::Blue => [0.0, 0.0, 1.0],
    }
}

pub fn background_rgb(bg: Background) -> [f32; 3] {
    match bg {
        Background::Black => [0.0, 0.0, 0.0],
        Background::Gray => [0.5, 0.5, 0.5],
        Background::Purple => [0.5, 0.0, 0.5],
        Background::Teal => [0.0, 0.5, 0.5],
    }
}

/// Top-left glyph corner in frame 0. Drifting objects start on the side
/// that leaves room for `FRAMES - 1` one-pixel moves.
fn start_corner(position: Position, motion: Motion) -> (usize, usize) {
    let far = SIDE - GLYPH;
    let (top, left) = match position {
        Position::TopLeft => (true, true),
        Position::TopRight => (true, false),
        Position::BottomLeft => (false, true),
        Position::BottomRight => (false, false),
    };
    let slack = SIDE - GLYPH - (FRAMES - 1);
    let row = if top { 0 } else { far };
    let col = if left { 0 } else { far };
    match motion {
        Motion::Static => (row, col),
        Motion::DriftRight => (row, if left { 0 } else { slack }),
        Motion::DriftDown => (if top { 0 } else { slack }, col),
    }
}

/// Renders the video and its full prompt
/// `[color, shape, background, position, motion, modifier]`.
pub fn synth_sample(spec: ConceptSpec, context: Context, seed: u64) -> (ToyVideo, PromptTokens) {
    let position = context
        .position
        .unwrap_or_else(|| Position::ALL[SeededRng::new(seed).below(Position::ALL.len())]);
    let g = glyph(spec.shape);
    let mut fg = color_rgb(spec.color);
    if context.modifier == Modifier::Dim {
        fg.iter_mut().for_each(|c| *c *= DIM_FACTOR);
    }
    let bg = background_rgb(context.background);
    let (r0, c0) = start_corner(position, spec.motion);
    let mut data = vec![0.0f32; FRAMES * FRAME_LEN];
    for f in 0..FRAMES {
        let (dr, dc) = match spec.motion {
            Motion::Static => (0, 0),
            Motion::DriftRight => (0, f),
            Motion::DriftDown => (f, 0),
        };
        for y in 0..SIDE {
            for x in 0..SIDE {
                let inside = y >= r0 + dr && y < r0 + dr + GLYPH && x >= c0 + dc && x < c0 + dc + GLYPH;
                let on = inside && g[y - r0 - dr][x - c0 - dc];
                let rgb = if on { fg } else { bg };
                for (ch, v) in rgb.iter().enumerate() {
                    data[((f * CHANNELS + ch) * SIDE + y) * SIDE + x] = *v;
                }
            }
        }
    }
    let prompt = PromptTokens::from_tokens(&[
        Token::Color(spec.color),
        Token::Shape(spec.shape),
        Token::Background(context.background),
        Token::Position(position),
        Token::Motion(spec.motion),
        Token::Modifier(context.modifier),
    ])
    .expect("six tokens fit");
    (Tensor::new(VIDEO_SHAPE.to_vec(), data).expect("sized"), prompt)
}

/// A uniformly random scene for `concept`.
pub fn random_scene(concept: ConceptId, rng: &mut SeededRng) -> (ConceptSpec, Context) {
    let motion = Motion::ALL[rng.below(Motion::ALL.len())];
    let ctx = Context {
        background: Background::ALL[rng.below(Background::ALL.len())],
        position: Some(Position::ALL[rng.below(Position::ALL.len())]),
        modifier: Modifier::ALL[rng.below(Modifier::ALL.len())],
    };
    (ConceptSpec::new(concept, motion), ctx)
}

/// Rendered scene for the concept, motion and context named in `prompt`;
/// unnamed fields are drawn from `seed`.
pub fn render_prompt(prompt: &PromptTokens, seed: u64) -> Result<ToyVideo> {
    let concept = prompt
        .concept()
        .ok_or_else(|| Error::InvalidArgument(format!("prompt `{prompt}` does not name one concept")))?;
    let mut rng = SeededRng::new(seed);
    let (mut spec, mut ctx) = random_scene(concept, &mut rng);
    for t in prompt.tokens() {
        match t {
            Token::Background(b) => ctx.background = b,
            Token::Position(p) => ctx.position = Some(p),
            Token::Motion(m) => spec.motion = m,
            Token::Modifier(m) => ctx.modifier = m,
            _ => {}
        }
    }
    Ok(synth_sample(spec, ctx, seed).0)
}

/// `2 v - 1`: the generative model works in `[-1, 1]`.
pub fn to_model_space(v: &ToyVideo) -> Tensor<f32> {
    v.map(|x| 2.0 * x - 1.0)
}

/// Inverse of [`to_model_space`], clamped to `[0, 1]`.
pub fn from_model_space(x: &Tensor<f32>) -> ToyVideo {
    x.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}

fn check_video(v: &ToyVideo) -> Result<()> {
    if v.shape() != VIDEO_SHAPE {
        return Err(Error::shape("detector", v.shape(), &VIDEO_SHAPE));
    }
    Ok(())
}

/// Frozen per-frame classifier `192 -> 64 -> 16 -> 12` (GELU between
/// layers). The 16-wide pre-activation is the embedding.
#[derive(Clone)]
pub struct DetectorParams {
    pub weights: ParamStore<f32>,
    pub heldout_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Std of the Gaussian pixel noise added to training frames.
    pub noise: f64,
    pub heldout_fraction: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            steps: 6000,
            batch: 64,
            lr: 3e-3,
            noise: 0.15,
            heldout_fraction: 0.2,
        }
    }
}

pub const DETECTOR_MIN_ACCURACY: f64 = 0.95;

fn detector_init(seed: u64) -> Result<ParamStore<f32>> {
    let mut rng = SeededRng::new(seed);
    let mut p = ParamStore::new();
    for (i, (fi, fo)) in [(FRAME_LEN, HIDDEN), (HIDDEN, EMBED_DIM), (EMBED_DIM, NUM_CLASSES)]
        .into_iter()
        .enumerate()
    {
        p.insert(format!("det.w{i}"), rng.normal_tensor(&[fi, fo], 1.0 / (fi as f64).sqrt())?);
        p.insert(format!("det.b{i}"), Tensor::zeros(vec![fo])?);
    }
    Ok(p)
}

/// Logits `[n, 12]` and embeddings `[n, 16]` for `n` stacked frames.
fn detector_graph(
    g: &mut Graph<f32>,
    vars: &crate::autodiff::VarMap,
    frames: Tensor<f32>,
) -> Result<(crate::autodiff::Var, crate::autodiff::Var)> {
    let x = g.constant(frames);
    let mut h = x;
    let mut emb = x;
    for i in 0..3 {
        let w = lookup(vars, &format!("det.w{i}"))?;
        let b = lookup(vars, &format!("det.b{i}"))?;
        let z = g.matmul(h, w)?;
        let z = g.add(z, b)?;
        if i == 1 {
            emb = z;
        }
        h = if i < 2 { g.gelu(z)? } else { z };
    }
    Ok((h, emb))
}

struct Frames {
    data: Vec<f32>,
    labels: Vec<usize>,
}

fn render_frames(n_videos: usize, seed: u64) -> Frames {
    let mut rng = SeededRng::new(seed);
    let mut data = Vec::with_capacity(n_videos * FRAMES * FRAME_LEN);
    let mut labels = Vec::with_capacity(n_videos * FRAMES);
    for i in 0..n_videos {
        // balanced over the concept grid
        let concept = ConceptId::from_index(i % NUM_CLASSES).expect("in range");
        let (spec, ctx) = random_scene(concept, &mut rng);
        let (v, _) = synth_sample(spec, ctx, rng.next_u64());
        data.extend_from_slice(v.data());
        labels.extend(std::iter::repeat_n(concept.index(), FRAMES));
    }
    Frames { data, labels }
}

/// Trains the detector on `n_samples` rendered videos (balanced over
/// concepts), holding out a fraction for the accuracy check.
pub fn train_detector(n_samples: usize, cfg: &DetectorConfig, seed: u64) -> Result<DetectorParams> {
    if n_samples < NUM_CLASSES * 50 {
        return Err(Error::InvalidArgument(format!(
            "n_samples = {n_samples} < {} (50 per concept)",
            NUM_CLASSES * 50
        )));
    }
    let n_held = ((n_samples as f64 * cfg.heldout_fraction).round() as usize).max(NUM_CLASSES);
    let n_train = n_samples - n_held;
    let train = render_frames(n_train, crate::rng::derive_seed(seed, "detector-train"));
    let held = render_frames(n_held, crate::rng::derive_seed(seed, "detector-heldout"));
    let mut rng = SeededRng::new(crate::rng::derive_seed(seed, "detector-batches"));
    let mut params = detector_init(crate::rng::derive_seed(seed, "detector-init"))?;
    let mut opt = Adam::new(cfg.lr);
    let n_frames = train.labels.len();
    for _ in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch * FRAME_LEN);
        let mut labels = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let i = rng.below(n_frames);
            batch.extend(
                train.data[i * FRAME_LEN..(i + 1) * FRAME_LEN]
                    .iter()
                    .map(|&p| p + (rng.normal() * cfg.noise) as f32),
            );
            labels.push(train.labels[i]);
        }
        let frames = Tensor::new(vec![cfg.batch, FRAME_LEN], batch)?;
        let (_, grads) = crate::autodiff::forward_backward(&params, |g, vars| {
            let (logits, _) = detector_graph(g, vars, frames)?;
            g.cross_entropy(logits, &labels)
        })?;
        opt.step(&mut params, &grads)?;
    }
    let mut det = DetectorParams {
        weights: params,
        heldout_accuracy: 0.0,
    };
    let probs = det.frame_probabilities(Tensor::new(vec![held.labels.len(), FRAME_LEN], held.data)?)?;
    let correct = probs
        .iter()
        .zip(&held.labels)
        .filter(|(p, &l)| argmax(p) == l)
        .count();
    det.heldout_accuracy = correct as f64 / held.labels.len() as f64;
    if det.heldout_accuracy < DETECTOR_MIN_ACCURACY {
        return Err(Error::DetectorAccuracy {
            accuracy: det.heldout_accuracy,
            required: DETECTOR_MIN_ACCURACY,
        });
    }
    Ok(det)
}

pub fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

impl DetectorParams {
    fn run(&self, frames: Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut g = Graph::new();
        let vars = crate::mmdit::bind(&mut g, &self.weights, false);
        let (logits, emb) = detector_graph(&mut g, &vars, frames)?;
        Ok((g.value(logits).clone(), g.value(emb).clone()))
    }

    fn frame_probabilities(&self, frames: Tensor<f32>) -> Result<Vec<Vec<f64>>> {
        let (logits, _) = self.run(frames)?;
        Ok(logits
            .data()
            .chunks(NUM_CLASSES)
            .map(|row| {
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
                let e: Vec<f64> = row.iter().map(|&x| (x as f64 - max).exp()).collect();
                let z: f64 = e.iter().sum();
                e.into_iter().map(|x| x / z).collect()
            })
            .collect())
    }

    /// Stores the held-out accuracy next to the weights for checkpointing.
    pub fn to_store(&self) -> ParamStore<f32> {
        let mut s = self.weights.clone();
        s.insert("det.heldout_accuracy", Tensor::scalar(self.heldout_accuracy as f32));
        s
    }

    pub fn from_store(mut s: ParamStore<f32>) -> Result<Self> {
        let acc = s
            .iter()
            .find(|(n, _)| n.as_str() == "det.heldout_accuracy")
            .map(|(_, t)| t.data()[0] as f64)
            .unwrap_or(0.0);
        s = s.iter().filter(|(n, _)| n.as_str() != "det.heldout_accuracy").map(|(n, t)| (n.clone(), t.clone())).collect();
        for i in 0..3 {
            s.require(&format!("det.w{i}"))?;
            s.require(&format!("det.b{i}"))?;
        }
        Ok(DetectorParams {
            weights: s,
            heldout_accuracy: acc,
        })
    }
}

/// One probability vector over concept ids per frame.
pub fn classify_frames(d: &DetectorParams, v: &ToyVideo) -> Result<Vec<Vec<f64>>> {
    check_video(v)?;
    d.frame_probabilities(v.reshape(vec![FRAMES, FRAME_LEN])?)
}

/// Unit-norm mean of the per-frame embeddings.
pub fn embed(d: &DetectorParams, v: &ToyVideo) -> Result<Vec<f64>> {
    check_video(v)?;
    let (_, emb) = d.run(v.reshape(vec![FRAMES, FRAME_LEN])?)?;
    let mut mean = vec![0.0f64; EMBED_DIM];
    for row in emb.data().chunks(EMBED_DIM) {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x as f64 / FRAMES as f64;
        }
    }
    let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::NonFinite("zero embedding".into()));
    }
    Ok(mean.into_iter().map(|x| x / norm).collect())
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Writes one binary PPM per frame as `sample{idx}_f{frame}.ppm`.
pub fn write_ppm_frames(v: &ToyVideo, dir: &Path, idx: usize) -> Result<Vec<PathBuf>> {
    check_video(v)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(FRAMES);
    for f in 0..FRAMES {
        let path = dir.join(format!("sample{idx}_f{f}.ppm"));
        let mut bytes = format!("P6\n{SIDE} {SIDE}\n255\n").into_bytes();
        for y in 0..SIDE {
            for x in 0..SIDE {
                for ch in 0..CHANNELS {
                    let p = v.data()[((f * CHANNELS + ch) * SIDE + y) * SIDE + x];
                    bytes.push((255.0 * p.clamp(0.0, 1.0)).round() as u8);
                }
            }
        }
        let mut file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        file.write_all(&bytes).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}
