//! A tiny multimodal diffusion transformer.
//!
//! Text tokens (learned embeddings) and visual tokens (2x2 spatial patches
//! of each frame) are concatenated and processed by pre-norm blocks with
//! full attention over the joint sequence. A global conditioning vector
//! (time embedding plus a projection of the mean prompt embedding) sets a
//! per-sample shift, scale and gate around every attention and MLP branch,
//! zero-initialized so each block starts as the identity. Optional adapters
//! sit on the output of each attention layer and act on visual rows only:
//!
//! ```text
//! a_vis <- a_vis + o,   o = up(down(a_vis))
//! ```
//!
//! where `a_vis` is the gated attention output for the visual tokens, added
//! to the residual stream afterwards. `up` starts at zero, so a fresh
//! adapter set leaves the output unchanged. The output head predicts the path target per patch.
//!
//! Parameter names (`d` = dim, `P` = patch values, `h` = MLP width):
//!
//! | name | shape |
//! |---|---|
//! | `text.embed` | `[vocab, d]` |
//! | `text.pos` | `[max_text, d]` |
//! | `vis.patch.w`, `vis.patch.b` | `[P, d]`, `[d]` |
//! | `vis.pos` | `[visual_tokens, d]` |
//! | `time.w1`, `time.b1`, `time.w2`, `time.b2` | `[d, d]`, `[d]`, `[d, d]`, `[d]` |
//! | `text.pool` | `[d, d]` |
//! | `blocks.{l}.mod.w`, `blocks.{l}.mod.b` | `[d, 6d]`, `[6d]` |
//! | `out.mod.w`, `out.mod.b` | `[d, 2d]`, `[2d]` |
//! | `blocks.{l}.attn.{wq,wk,wv,wo}`, `blocks.{l}.attn.bo` | `[d, d]`, `[d]` |
//! | `blocks.{l}.mlp.w1`, `.b1`, `.w2`, `.b2` | `[d, h]`, `[h]`, `[h, d]`, `[d]` |
//! | `out.w`, `out.b` | `[d, P]`, `[P]` |
//!
//! Adapters: `adapter.{l}.down` `[d, r]` and `adapter.{l}.up` `[r, d]`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{lookup, Graph, Var, VarMap};
use crate::error::{Error, Result};
use crate::paths::VelocityField;
use crate::prompt::{PromptTokens, MAX_TEXT_TOKENS, VOCAB_SIZE};
use crate::rng::SeededRng;
use crate::tensor::{Element, ParamStore, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Spatial patch side; patches span one frame.
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    pub vocab: usize,
    pub max_text: usize,
    pub adapter_rank: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frames: 4,
            channels: 3,
            height: 8,
            width: 8,
            patch: 2,
            dim: 64,
            heads: 4,
            layers: 2,
            mlp_hidden: 128,
            vocab: VOCAB_SIZE,
            max_text: MAX_TEXT_TOKENS,
            adapter_rank: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |why: String| Err(Error::InvalidArgument(format!("model config: {why}")));
        let dims = [
            self.frames,
            self.channels,
            self.height,
            self.width,
            self.patch,
            self.dim,
            self.heads,
            self.layers,
            self.mlp_hidden,
            self.adapter_rank,
        ];
        if dims.contains(&0) {
            return bad("all dimensions must be positive".into());
        }
        if !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return bad(format!("{}x{} not divisible by patch {}", self.height, self.width, self.patch));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if !self.dim.is_multiple_of(2) {
            return bad("dim must be even for the time embedding".into());
        }
        if self.vocab < VOCAB_SIZE || self.max_text < MAX_TEXT_TOKENS {
            return bad(format!("vocab >= {VOCAB_SIZE} and max_text >= {MAX_TEXT_TOKENS} required"));
        }
        Ok(())
    }

    pub fn sample_shape(&self) -> Vec<usize> {
        vec![self.frames, self.channels, self.height, self.width]
    }

    pub fn sample_len(&self) -> usize {
        self.frames * self.channels * self.height * self.width
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn tokens_per_frame(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn visual_tokens(&self) -> usize {
        self.frames * self.tokens_per_frame()
    }

    pub fn total_tokens(&self) -> usize {
        self.max_text + self.visual_tokens()
    }

    /// Base parameter count:
    ///
    /// ```text
    /// vocab d + max_text d + (P d + d) + N_v d + 2 (d^2 + d) + d^2
    ///   + layers (4 d^2 + d + 2 d h + h + d + 6 d^2 + 6 d) + d P + P + 2 d^2 + 2 d
    /// ```
    pub fn param_count(&self) -> usize {
        let (d, h, p) = (self.dim, self.mlp_hidden, self.patch_dim());
        self.vocab * d
            + self.max_text * d
            + p * d
            + d
            + self.visual_tokens() * d
            + 2 * (d * d + d)
            + d * d
            + self.layers * (4 * d * d + d + 2 * d * h + h + d + 6 * d * d + 6 * d)
            + d * p
            + p
            + 2 * d * d
            + 2 * d
    }

    /// `layers * 2 d r`.
    pub fn adapter_param_count(&self) -> usize {
        self.layers * 2 * self.dim * self.adapter_rank
    }
}

/// Base weights: Gaussian with std `1/sqrt(fan_in)` for projections
/// (halved for the two residual outputs of each block), std 0.5 for token
/// and position tables, zero biases, a zero output bias and zero modulation
/// weights.
pub fn init_model<E: Element>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<E>> {
    cfg.validate()?;
    let mut rng = SeededRng::new(seed);
    let (d, h, p) = (cfg.dim, cfg.mlp_hidden, cfg.patch_dim());
    let mut s = ParamStore::new();
    let mut gauss = |s: &mut ParamStore<E>, name: String, shape: &[usize], std: f64| -> Result<()> {
        s.insert(name, rng.normal_tensor(shape, std)?);
        Ok(())
    };
    let fan = |n: usize| 1.0 / (n as f64).sqrt();
    gauss(&mut s, "text.embed".into(), &[cfg.vocab, d], 0.5)?;
    gauss(&mut s, "text.pos".into(), &[cfg.max_text, d], 0.5)?;
    gauss(&mut s, "vis.patch.w".into(), &[p, d], fan(p))?;
    gauss(&mut s, "vis.pos".into(), &[cfg.visual_tokens(), d], 0.5)?;
    gauss(&mut s, "time.w1".into(), &[d, d], fan(d))?;
    gauss(&mut s, "time.w2".into(), &[d, d], fan(d))?;
    gauss(&mut s, "text.pool".into(), &[d, d], fan(d))?;
    for l in 0..cfg.layers {
        for w in ["wq", "wk", "wv"] {
            gauss(&mut s, format!("blocks.{l}.attn.{w}"), &[d, d], fan(d))?;
        }
        gauss(&mut s, format!("blocks.{l}.attn.wo"), &[d, d], 0.5 * fan(d))?;
        gauss(&mut s, format!("blocks.{l}.mlp.w1"), &[d, h], fan(d))?;
        gauss(&mut s, format!("blocks.{l}.mlp.w2"), &[h, d], 0.5 * fan(h))?;
    }
    gauss(&mut s, "out.w".into(), &[d, p], fan(d))?;
    let mut zeros2 = |name: String, shape: Vec<usize>| -> Result<()> {
        s.insert(name, Tensor::zeros(shape)?);
        Ok(())
    };
    for l in 0..cfg.layers {
        zeros2(format!("blocks.{l}.mod.w"), vec![d, 6 * d])?;
        zeros2(format!("blocks.{l}.mod.b"), vec![6 * d])?;
    }
    zeros2("out.mod.w".into(), vec![d, 2 * d])?;
    zeros2("out.mod.b".into(), vec![2 * d])?;
    let mut zeros = |name: String, n: usize| -> Result<()> {
        s.insert(name, Tensor::zeros(vec![n])?);
        Ok(())
    };
    zeros("vis.patch.b".into(), d)?;
    zeros("time.b1".into(), d)?;
    zeros("time.b2".into(), d)?;
    for l in 0..cfg.layers {
        zeros(format!("blocks.{l}.attn.bo"), d)?;
        zeros(format!("blocks.{l}.mlp.b1"), h)?;
        zeros(format!("blocks.{l}.mlp.b2"), d)?;
    }
    zeros("out.b".into(), p)?;
    Ok(s)
}

/// Adapters with Gaussian down-projections and all-zero up-projections.
pub fn init_adapters<E: Element>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<E>> {
    cfg.validate()?;
    let mut rng = SeededRng::new(seed);
    let (d, r) = (cfg.dim, cfg.adapter_rank);
    let mut s = ParamStore::new();
    for l in 0..cfg.layers {
        s.insert(format!("adapter.{l}.down"), rng.normal_tensor(&[d, r], 1.0 / (d as f64).sqrt())?);
        s.insert(format!("adapter.{l}.up"), Tensor::zeros(vec![r, d])?);
    }
    Ok(s)
}

/// `[F, C, H, W]` to `[visual_tokens, C p p]`, tokens ordered by frame, then
/// patch row, then patch column; values within a patch by channel, row, column.
pub fn patchify<E: Element>(cfg: &ModelConfig, x: &Tensor<E>) -> Result<Tensor<E>> {
    if x.shape() != cfg.sample_shape().as_slice() {
        return Err(Error::shape("patchify", x.shape(), &cfg.sample_shape()));
    }
    let (c, h, w, p) = (cfg.channels, cfg.height, cfg.width, cfg.patch);
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    for f in 0..cfg.frames {
        for pr in 0..h / p {
            for pc in 0..w / p {
                for ch in 0..c {
                    for dy in 0..p {
                        for dx in 0..p {
                            let (y, xx) = (pr * p + dy, pc * p + dx);
                            out.push(src[((f * c + ch) * h + y) * w + xx]);
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![cfg.visual_tokens(), cfg.patch_dim()], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<E: Element>(cfg: &ModelConfig, tokens: &Tensor<E>) -> Result<Tensor<E>> {
    let want = [cfg.visual_tokens(), cfg.patch_dim()];
    if tokens.shape() != want {
        return Err(Error::shape("unpatchify", tokens.shape(), &want));
    }
    let (c, h, w, p) = (cfg.channels, cfg.height, cfg.width, cfg.patch);
    let mut out = vec![E::zero(); cfg.sample_len()];
    let mut it = tokens.data().iter();
    for f in 0..cfg.frames {
        for pr in 0..h / p {
            for pc in 0..w / p {
                for ch in 0..c {
                    for dy in 0..p {
                        for dx in 0..p {
                            let (y, xx) = (pr * p + dy, pc * p + dx);
                            out[((f * c + ch) * h + y) * w + xx] = *it.next().expect("sized");
                        }
                    }
                }
            }
        }
    }
    Tensor::new(cfg.sample_shape(), out)
}

/// Sinusoidal features of `1000 t`: `[sin(w_i s), cos(w_i s)]` with
/// `w_i = 10000^(-i / (d/2))`.
pub fn time_features<E: Element>(dim: usize, times: &[f64]) -> Result<Tensor<E>> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(times.len() * dim);
    for &t in times {
        let s = 1000.0 * t;
        for i in 0..half {
            let w = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            out.push(E::from_f64_lossy((w * s).sin()));
        }
        for i in 0..half {
            let w = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            out.push(E::from_f64_lossy((w * s).cos()));
        }
    }
    Tensor::new(vec![times.len(), dim], out)
}

/// Places every entry of `store` on the graph, as tracked leaves when
/// `trainable` and as constants otherwise.
pub fn bind<E: Element>(g: &mut Graph<E>, store: &ParamStore<E>, trainable: bool) -> VarMap {
    store
        .iter()
        .map(|(n, t)| {
            let v = if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            };
            (n.clone(), v)
        })
        .collect()
}

/// Everything a forward pass leaves on the graph.
pub struct GraphOutput<E> {
    /// `[batch * visual_tokens, patch_dim]`.
    pub prediction: Var,
    /// Per layer, `[batch * visual_tokens, dim]`.
    pub adapter_outputs: Vec<Var>,
    /// Indexed `[sample][layer][head]`, each `[tokens, tokens]`; empty
    /// unless capture was requested.
    pub attention: Vec<Vec<Vec<Tensor<E>>>>,
}

fn linear<E: Element>(g: &mut Graph<E>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => g.add(y, b),
        None => Ok(y),
    }
}

/// `x * (1 + scale) + shift`.
fn modulate<E: Element>(g: &mut Graph<E>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let xs = g.mul(x, scale)?;
    let x = g.add(x, xs)?;
    g.add(x, shift)
}

/// Records a batched forward pass. `patches` is `[batch * visual_tokens,
/// patch_dim]` with samples stacked; `prompts` and `times` have one entry
/// per sample.
pub fn forward_graph<E: Element>(
    g: &mut Graph<E>,
    cfg: &ModelConfig,
    base: &VarMap,
    adapters: Option<&VarMap>,
    patches: Var,
    prompts: &[&PromptTokens],
    times: &[f64],
    capture: bool,
) -> Result<GraphOutput<E>> {
    let b = prompts.len();
    let (nt, nv, d) = (cfg.max_text, cfg.visual_tokens(), cfg.dim);
    let n = nt + nv;
    if b == 0 || times.len() != b {
        return Err(Error::InvalidArgument(format!("{} prompts but {} times", b, times.len())));
    }
    let expect = [b * nv, cfg.patch_dim()];
    if g.shape(patches) != expect {
        return Err(Error::shape("forward", g.shape(patches), &expect));
    }
    let w = |name: &str| lookup(base, name);

    // text tokens
    let mut ids = Vec::with_capacity(b * nt);
    for p in prompts {
        if p.len() > nt {
            return Err(Error::InvalidArgument(format!("prompt of {} tokens exceeds {nt}", p.len())));
        }
        let mut row = p.padded();
        row.resize(nt, 0);
        ids.extend(row);
    }
    let text = g.embedding(w("text.embed")?, &ids)?;
    // mean of each prompt's token embeddings (zero for the null prompt)
    let mut avg = vec![E::zero(); b * b * nt];
    for (i, p) in prompts.iter().enumerate() {
        for j in 0..p.len() {
            avg[i * b * nt + i * nt + j] = E::from_f64_lossy(1.0 / p.len() as f64);
        }
    }
    let avg = g.constant(Tensor::new(vec![b, b * nt], avg)?);
    let pooled = g.matmul(avg, text)?;
    let pooled = g.matmul(pooled, w("text.pool")?)?;
    let text = g.reshape(text, &[b, nt, d])?;
    let text = g.add(text, w("text.pos")?)?;

    // visual tokens with time conditioning
    let vis = linear(g, patches, w("vis.patch.w")?, Some(w("vis.patch.b")?))?;
    let vis = g.reshape(vis, &[b, nv, d])?;
    let vis = g.add(vis, w("vis.pos")?)?;
    let tf = g.constant(time_features(d, times)?);
    let te = linear(g, tf, w("time.w1")?, Some(w("time.b1")?))?;
    let te = g.gelu(te)?;
    let te = linear(g, te, w("time.w2")?, Some(w("time.b2")?))?;
    let c = g.add(te, pooled)?;
    let c = g.gelu(c)?;
    // spreads per-sample rows [b, k] over every token: [b * n, k]
    let mut spread = vec![E::zero(); b * n * b];
    for i in 0..b {
        for r in 0..n {
            spread[(i * n + r) * b + i] = E::one();
        }
    }
    let spread = g.constant(Tensor::new(vec![b * n, b], spread)?);
    let mut rows = Vec::with_capacity(b);
    for i in 0..b {
        let v_i = g.slice(vis, 0, i, 1)?;
        let v_i = g.reshape(v_i, &[nv, d])?;
        let x_i = g.slice(text, 0, i, 1)?;
        let x_i = g.reshape(x_i, &[nt, d])?;
        rows.push(g.concat(&[x_i, v_i], 0)?);
    }
    let mut h = g.concat(&rows, 0)?; // [b * n, d]

    let heads = cfg.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut attention = vec![Vec::with_capacity(cfg.layers); if capture { b } else { 0 }];
    let mut adapter_outputs = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let p = |s: &str| lookup(base, &format!("blocks.{l}.{s}"));
        let m = linear(g, c, p("mod.w")?, Some(p("mod.b")?))?;
        let m = g.matmul(spread, m)?;
        let mut chunk = |k: usize| g.slice(m, 1, k * d, d);
        let (shift1, scale1, gate1) = (chunk(0)?, chunk(1)?, chunk(2)?);
        let (shift2, scale2, gate2) = (chunk(3)?, chunk(4)?, chunk(5)?);
        let x = g.layer_norm(h, LN_EPS)?;
        let x = modulate(g, x, shift1, scale1)?;
        let q = g.matmul(x, p("attn.wq")?)?;
        let k = g.matmul(x, p("attn.wk")?)?;
        let v = g.matmul(x, p("attn.wv")?)?;
        let mut per_sample = Vec::with_capacity(b);
        for i in 0..b {
            let (qi, ki, vi) = (g.slice(q, 0, i * n, n)?, g.slice(k, 0, i * n, n)?, g.slice(v, 0, i * n, n)?);
            let mut head_out = Vec::with_capacity(heads);
            let mut maps = Vec::new();
            for hd in 0..heads {
                let qh = g.slice(qi, 1, hd * dh, dh)?;
                let kh = g.slice(ki, 1, hd * dh, dh)?;
                let vh = g.slice(vi, 1, hd * dh, dh)?;
                let kt = g.transpose(kh)?;
                let s = g.matmul(qh, kt)?;
                let s = g.scale(s, scale)?;
                let a = g.softmax(s)?;
                if capture {
                    maps.push(g.value(a).clone());
                }
                head_out.push(g.matmul(a, vh)?);
            }
            if capture {
                attention[i].push(maps);
            }
            per_sample.push(g.concat(&head_out, 1)?);
        }
        let att = g.concat(&per_sample, 0)?;
        let att = linear(g, att, p("attn.wo")?, Some(p("attn.bo")?))?;
        let mut att = g.mul(att, gate1)?;

        if let Some(ad) = adapters {
            // the adapter reads what attention writes to the visual rows
            let mut text_rows = Vec::with_capacity(b);
            let mut vis_rows = Vec::with_capacity(b);
            for i in 0..b {
                text_rows.push(g.slice(att, 0, i * n, nt)?);
                vis_rows.push(g.slice(att, 0, i * n + nt, nv)?);
            }
            let av = g.concat(&vis_rows, 0)?;
            let z = g.matmul(av, lookup(ad, &format!("adapter.{l}.down"))?)?;
            let o = g.matmul(z, lookup(ad, &format!("adapter.{l}.up"))?)?;
            adapter_outputs.push(o);
            let av = g.add(av, o)?;
            let mut merged = Vec::with_capacity(2 * b);
            for (i, t) in text_rows.into_iter().enumerate() {
                merged.push(t);
                merged.push(g.slice(av, 0, i * nv, nv)?);
            }
            att = g.concat(&merged, 0)?;
        }
        h = g.add(h, att)?;

        let x = g.layer_norm(h, LN_EPS)?;
        let x = modulate(g, x, shift2, scale2)?;
        let y = linear(g, x, p("mlp.w1")?, Some(p("mlp.b1")?))?;
        let y = g.gelu(y)?;
        let y = linear(g, y, p("mlp.w2")?, Some(p("mlp.b2")?))?;
        let y = g.mul(y, gate2)?;
        h = g.add(h, y)?;
    }

    let fm = linear(g, c, w("out.mod.w")?, Some(w("out.mod.b")?))?;
    let fm = g.matmul(spread, fm)?;
    let (shift, fscale) = (g.slice(fm, 1, 0, d)?, g.slice(fm, 1, d, d)?);
    let x = g.layer_norm(h, LN_EPS)?;
    let x = modulate(g, x, shift, fscale)?;
    let mut vis_rows = Vec::with_capacity(b);
    for i in 0..b {
        vis_rows.push(g.slice(x, 0, i * n + nt, nv)?);
    }
    let hv = g.concat(&vis_rows, 0)?;
    let prediction = linear(g, hv, w("out.w")?, Some(w("out.b")?))?;
    Ok(GraphOutput {
        prediction,
        adapter_outputs,
        attention,
    })
}

/// Attention maps and adapter outputs of one forward pass over one sample.
#[derive(Clone)]
pub struct AttentionCapture<E> {
    /// `[layer][head]`, each `[tokens, tokens]` with rows summing to 1.
    pub attention: Vec<Vec<Tensor<E>>>,
    /// Per layer `[visual_tokens, dim]`; empty without adapters.
    pub adapter_outputs: Vec<Tensor<E>>,
    pub text_tokens: usize,
}

/// Single-sample forward pass returning the prediction in `[F, C, H, W]`
/// layout and, when asked, the attention capture.
pub fn forward<E: Element>(
    cfg: &ModelConfig,
    base: &ParamStore<E>,
    adapters: Option<&ParamStore<E>>,
    x_t: &Tensor<E>,
    prompt: &PromptTokens,
    t: f64,
    capture: bool,
) -> Result<(Tensor<E>, Option<AttentionCapture<E>>)> {
    let mut g = Graph::new();
    let bv = bind(&mut g, base, false);
    let av = adapters.map(|a| bind(&mut g, a, false));
    let patches = g.constant(patchify(cfg, x_t)?);
    let out = forward_graph(&mut g, cfg, &bv, av.as_ref(), patches, &[prompt], &[t], capture)?;
    let pred = unpatchify(cfg, g.value(out.prediction))?;
    let cap = capture.then(|| AttentionCapture {
        attention: out.attention.into_iter().next().unwrap_or_default(),
        adapter_outputs: out.adapter_outputs.iter().map(|&v| g.value(v).clone()).collect(),
        text_tokens: cfg.max_text,
    });
    Ok((pred, cap))
}

/// Binary relevance mask over visual tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptMask {
    bits: Vec<bool>,
}

impl ConceptMask {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if !bits.iter().any(|&b| b) {
            return Err(Error::InvalidArgument("concept mask must select at least one token".into()));
        }
        Ok(ConceptMask { bits })
    }

    pub fn all(n: usize) -> Self {
        ConceptMask { bits: vec![true; n] }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// `1 - M` as a `[tokens, width]` tensor.
    pub fn complement<E: Element>(&self, width: usize) -> Tensor<E> {
        let data = self
            .bits
            .iter()
            .flat_map(|&b| std::iter::repeat_n(if b { E::zero() } else { E::one() }, width))
            .collect();
        Tensor::new(vec![self.bits.len(), width], data).expect("nonempty mask")
    }
}

/// Relevance of each visual token: attention mass from the visual query to
/// the concept text keys, averaged over layers and heads.
pub fn relevance_scores<E: Element>(capture: &AttentionCapture<E>, positions: &[usize]) -> Result<Vec<f64>> {
    if positions.is_empty() {
        return Err(Error::InvalidArgument("concept position set is empty".into()));
    }
    let nt = capture.text_tokens;
    if let Some(&p) = positions.iter().find(|&&p| p >= nt) {
        return Err(Error::InvalidArgument(format!("concept position {p} outside {nt} text tokens")));
    }
    let maps: Vec<&Tensor<E>> = capture.attention.iter().flatten().collect();
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidArgument("capture holds no attention maps".into()))?;
    let n = first.shape()[0];
    if n <= nt {
        return Err(Error::InvalidArgument("attention maps have no visual rows".into()));
    }
    let mut s = vec![0.0; n - nt];
    for a in &maps {
        for (i, si) in s.iter_mut().enumerate() {
            let row = &a.data()[(nt + i) * n..(nt + i + 1) * n];
            *si += positions.iter().map(|&j| row[j].as_f64()).sum::<f64>();
        }
    }
    let m = maps.len() as f64;
    Ok(s.into_iter().map(|x| x / m).collect())
}

/// `M_i = 1` iff `s_i >= lambda * max_j s_j`; an all-zero result selects
/// the argmax instead.
pub fn mask_from_scores(scores: &[f64], lambda: f64) -> Result<ConceptMask> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::InvalidArgument(format!("lambda = {lambda} outside (0, 1]")));
    }
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no scores".into()));
    }
    let (arg, max) = scores
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(ai, am), (i, x)| if x > am { (i, x) } else { (ai, am) });
    let mut bits: Vec<bool> = scores.iter().map(|&x| x >= lambda * max).collect();
    if !bits.iter().any(|&b| b) {
        bits[arg] = true;
    }
    ConceptMask::new(bits)
}

pub fn extract_concept_mask<E: Element>(
    capture: &AttentionCapture<E>,
    positions: &[usize],
    lambda: f64,
) -> Result<ConceptMask> {
    mask_from_scores(&relevance_scores(capture, positions)?, lambda)
}

/// A model bound to weights, usable as a sampler field.
pub struct Model<'a, E> {
    pub cfg: &'a ModelConfig,
    pub base: &'a ParamStore<E>,
    pub adapters: Option<&'a ParamStore<E>>,
}

impl<'a, E: Element> Model<'a, E> {
    pub fn new(cfg: &'a ModelConfig, base: &'a ParamStore<E>, adapters: Option<&'a ParamStore<E>>) -> Self {
        Model { cfg, base, adapters }
    }
}

impl<E: Element> VelocityField<E> for Model<'_, E> {
    fn sample_shape(&self) -> Vec<usize> {
        self.cfg.sample_shape()
    }

    fn predict(&self, x_t: &Tensor<E>, prompt: &PromptTokens, time: f64) -> Result<Tensor<E>> {
        Ok(forward(self.cfg, self.base, self.adapters, x_t, prompt, time, false)?.0)
    }
}
