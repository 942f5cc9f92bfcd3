//! Prompt augmentation: a seeded grammar that wraps a concept in scene
//! context, and an optional chat-completion client for rewriting concept
//! text with an external language model.
//!
//! The client posts `{base_url}/chat/completions` with
//!
//! ```json
//! {"model": "...", "n": k, "messages": [
//!   {"role": "system", "content": SYSTEM_PROMPT},
//!   {"role": "user", "content": "a red kite"}, {"role": "assistant", "content": "..."},
//!   ...,
//!   {"role": "user", "content": "<concept>"}]}
//! ```
//!
//! and reads `choices[i].message.content`. `n` prompts take
//! `ceil(n / k)` requests where `k` is `responses_per_call`.

use std::collections::BTreeSet;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::{Background, ConceptId, Modifier, Motion, Position, PromptTokens, Token};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Concept,
    Background,
    Position,
    Motion,
    Modifier,
}

/// Context vocabularies and templates. Every template holds exactly one
/// `Concept` slot, which expands to `[color, shape]`.
#[derive(Debug, Clone)]
pub struct AugmentGrammar {
    pub backgrounds: Vec<Background>,
    pub positions: Vec<Position>,
    pub motions: Vec<Motion>,
    pub modifiers: Vec<Modifier>,
    pub templates: Vec<Vec<Slot>>,
}

impl Default for AugmentGrammar {
    fn default() -> Self {
        use Slot::{Background as B, Concept as C, Modifier as D, Motion as M, Position as P};
        AugmentGrammar {
            backgrounds: Background::ALL.to_vec(),
            positions: Position::ALL.to_vec(),
            motions: Motion::ALL.to_vec(),
            modifiers: Modifier::ALL.to_vec(),
            templates: vec![
                vec![C, B],
                vec![C, P, M],
                vec![D, C, B],
                vec![C, B, P, M, D],
                vec![B, C, M],
                vec![D, C, P],
                vec![C, M, B, D],
                vec![P, C],
            ],
        }
    }
}

impl AugmentGrammar {
    fn validate(&self) -> Result<()> {
        let ok = !self.templates.is_empty()
            && self.templates.iter().all(|t| {
                t.iter().filter(|s| **s == Slot::Concept).count() == 1 && t.len() > 1 && t.len() < 8
            })
            && !self.backgrounds.is_empty()
            && !self.positions.is_empty()
            && !self.motions.is_empty()
            && !self.modifiers.is_empty();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                "grammar needs nonempty vocabularies and templates with one concept slot and some context".into(),
            ))
        }
    }

    fn slot_size(&self, s: Slot) -> usize {
        match s {
            Slot::Concept => 1,
            Slot::Background => self.backgrounds.len(),
            Slot::Position => self.positions.len(),
            Slot::Motion => self.motions.len(),
            Slot::Modifier => self.modifiers.len(),
        }
    }

    /// Number of distinct prompts per concept.
    pub fn capacity(&self) -> usize {
        self.templates
            .iter()
            .map(|t| t.iter().map(|&s| self.slot_size(s)).product::<usize>())
            .sum()
    }

    /// One prompt from a uniformly chosen template.
    pub fn sample(&self, concept: ConceptId, rng: &mut SeededRng) -> PromptTokens {
        let template = &self.templates[rng.below(self.templates.len())];
        let mut tokens = Vec::with_capacity(template.len() + 1);
        for slot in template {
            match slot {
                Slot::Concept => {
                    tokens.push(Token::Color(concept.color));
                    tokens.push(Token::Shape(concept.shape));
                }
                Slot::Background => tokens.push(Token::Background(self.backgrounds[rng.below(self.backgrounds.len())])),
                Slot::Position => tokens.push(Token::Position(self.positions[rng.below(self.positions.len())])),
                Slot::Motion => tokens.push(Token::Motion(self.motions[rng.below(self.motions.len())])),
                Slot::Modifier => tokens.push(Token::Modifier(self.modifiers[rng.below(self.modifiers.len())])),
            }
        }
        PromptTokens::from_tokens(&tokens).expect("templates are validated")
    }

    /// `n` prompts for `concept`; repeats appear only once every distinct
    /// prompt has been produced.
    pub fn generate(&self, concept: ConceptId, n: usize, seed: u64) -> Result<Vec<PromptTokens>> {
        self.validate()?;
        if n == 0 {
            return Err(Error::InvalidArgument("n must be at least 1".into()));
        }
        let cap = self.capacity();
        let mut rng = SeededRng::new(seed);
        let mut seen = BTreeSet::new();
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if seen.len() == cap {
                seen.clear();
            }
            let p = self.sample(concept, &mut rng);
            if seen.insert(p.ids().to_vec()) {
                out.push(p);
            }
        }
        Ok(out)
    }
}

/// Fixed split of the augmented prompt space: about a quarter of the
/// contextual prompts are reserved for evaluation and never used to train
/// adapters. The split looks only at the context, so every concept holds
/// out the same contexts. Bare prompts are never held out.
pub fn is_heldout(p: &PromptTokens) -> bool {
    if p.len() <= 2 {
        return false;
    }
    let key: Vec<String> = p
        .tokens()
        .into_iter()
        .map(|t| if t.is_concept() { "c".to_string() } else { t.id().to_string() })
        .collect();
    crate::rng::derive_seed(HELDOUT_SALT, &key.join(",")).is_multiple_of(4)
}

const HELDOUT_SALT: u64 = 0x5eed_0e7a;

impl AugmentGrammar {
    /// Rejection-samples from one side of the held-out split.
    pub fn sample_split(&self, concept: ConceptId, heldout: bool, rng: &mut SeededRng) -> PromptTokens {
        loop {
            let p = self.sample(concept, rng);
            if is_heldout(&p) == heldout {
                return p;
            }
        }
    }
}

/// `n` grammar-augmented prompts for `concept` with the default grammar.
pub fn augment_grammar(concept: ConceptId, n: usize, seed: u64) -> Result<Vec<PromptTokens>> {
    AugmentGrammar::default().generate(concept, n, seed)
}

/// Shannon entropy in bits of the context tokens across `prompts`.
pub fn context_entropy(prompts: &[PromptTokens]) -> f64 {
    let mut counts = std::collections::BTreeMap::new();
    let mut total = 0usize;
    for p in prompts {
        for t in p.tokens() {
            if !t.is_concept() && t != Token::Null {
                *counts.entry(t.id()).or_insert(0usize) += 1;
                total += 1;
            }
        }
    }
    counts
        .values()
        .map(|&c| {
            let q = c as f64 / total as f64;
            -q * q.log2()
        })
        .sum()
}

/// Few-shot instructions for the external rewriter.
pub const SYSTEM_PROMPT: &str = "You expand short video descriptions into richer prompts for a \
text-to-video model. Keep the subject exactly as given, including its colour and shape. Add \
concrete scene context: the background, where the subject sits in the frame, how it moves, and \
the lighting. Answer with a single prompt of at most 60 words and no commentary.";

const FEW_SHOT: &[(&str, &str)] = &[
    (
        "a yellow kite",
        "A bright yellow kite hangs in the upper left of a pale blue sky, drifting slowly to the \
right on a steady breeze while soft afternoon light catches its fabric.",
    ),
    (
        "a wooden chair",
        "A plain wooden chair stands alone in the lower right corner of a dim grey studio, \
perfectly still, lit from above by a single warm lamp.",
    ),
];

/// External chat-completion endpoint. Nothing is sent unless `enabled`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmEndpointConfig {
    #[serde(default)]
    pub enabled: bool,
    pub base_url: String,
    pub model: String,
    pub api_key_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_per_call")]
    pub responses_per_call: usize,
}

fn default_timeout() -> u64 {
    30
}

fn default_retries() -> u32 {
    2
}

fn default_per_call() -> usize {
    4
}

/// The request body for one call.
pub fn chat_request(model: &str, concept: &str, n: usize) -> serde_json::Value {
    let mut messages = vec![serde_json::json!({"role": "system", "content": SYSTEM_PROMPT})];
    for (q, a) in FEW_SHOT {
        messages.push(serde_json::json!({"role": "user", "content": q}));
        messages.push(serde_json::json!({"role": "assistant", "content": a}));
    }
    messages.push(serde_json::json!({"role": "user", "content": concept}));
    serde_json::json!({"model": model, "messages": messages, "n": n})
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: String,
}

/// Extracts `choices[*].message.content`; at least one choice is required.
pub fn parse_chat_response(body: &str) -> Result<Vec<String>> {
    let r: ChatResponse =
        serde_json::from_str(body).map_err(|e| Error::LlmResponse(format!("{e}")))?;
    if r.choices.is_empty() {
        return Err(Error::LlmResponse("response holds no choices".into()));
    }
    Ok(r.choices.into_iter().map(|c| c.message.content).collect())
}

enum Attempt {
    Retry(Error),
    Fatal(Error),
}

fn post_once(
    client: &reqwest::blocking::Client,
    url: &str,
    key: &str,
    body: &serde_json::Value,
) -> std::result::Result<Vec<String>, Attempt> {
    let resp = client
        .post(url)
        .bearer_auth(key)
        .json(body)
        .send()
        .map_err(|e| Attempt::Retry(Error::LlmRequest(describe(&e))))?;
    let status = resp.status();
    let text = resp
        .text()
        .map_err(|e| Attempt::Retry(Error::LlmRequest(describe(&e))))?;
    if !status.is_success() {
        let err = Error::LlmStatus {
            status: status.as_u16(),
            body: text.chars().take(512).collect(),
        };
        return Err(if status.is_server_error() || status.as_u16() == 429 {
            Attempt::Retry(err)
        } else {
            Attempt::Fatal(err)
        });
    }
    parse_chat_response(&text).map_err(Attempt::Fatal)
}

fn describe(e: &reqwest::Error) -> String {
    if e.is_timeout() {
        format!("timed out: {e}")
    } else {
        e.to_string()
    }
}

/// Rewrites `concept` into `n` prompts through the configured endpoint and
/// returns the responses verbatim. Transport failures, timeouts and 5xx/429
/// responses are retried up to `max_retries` times; every failure ends in
/// an error, never in a fallback.
pub fn augment_llm(cfg: &LlmEndpointConfig, concept: &str, n: usize) -> Result<Vec<String>> {
    if !cfg.enabled {
        return Err(Error::LlmConfig("llm endpoint is disabled".into()));
    }
    if n == 0 || cfg.responses_per_call == 0 {
        return Err(Error::LlmConfig("n and responses_per_call must be positive".into()));
    }
    let key = std::env::var(&cfg.api_key_env)
        .map_err(|_| Error::LlmConfig(format!("environment variable `{}` is not set", cfg.api_key_env)))?;
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(cfg.timeout_secs))
        .build()
        .map_err(|e| Error::LlmConfig(e.to_string()))?;
    let url = format!("{}/chat/completions", cfg.base_url.trim_end_matches('/'));
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let want = cfg.responses_per_call.min(n - out.len());
        let body = chat_request(&cfg.model, concept, want);
        let mut attempt = 0;
        let got = loop {
            match post_once(&client, &url, &key, &body) {
                Ok(v) => break v,
                Err(Attempt::Retry(_)) if attempt < cfg.max_retries => attempt += 1,
                Err(Attempt::Retry(e)) | Err(Attempt::Fatal(e)) => return Err(e),
            }
        };
        if got.len() != want {
            return Err(Error::LlmResponse(format!("asked for {want} choices, got {}", got.len())));
        }
        out.extend(got);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{Color, Shape};

    fn concept() -> ConceptId {
        ConceptId::new(Shape::Stripes, Color::Green)
    }

    #[test]
    fn heldout_split_is_sizeable_and_respected() {
        let g = AugmentGrammar::default();
        for c in ConceptId::all() {
            let all: BTreeSet<_> = g.generate(c, g.capacity(), 3).unwrap().into_iter().collect();
            assert_eq!(all.len(), g.capacity());
            let held = all.iter().filter(|p| is_heldout(p)).count();
            assert!(held >= 30 && held * 3 < all.len(), "{c}: {held} of {}", all.len());
        }
        assert!(!is_heldout(&PromptTokens::bare(concept())));
        let mut rng = SeededRng::new(1);
        for _ in 0..500 {
            assert!(!is_heldout(&g.sample_split(concept(), false, &mut rng)));
            assert!(is_heldout(&g.sample_split(concept(), true, &mut rng)));
        }
    }

    #[test]
    fn every_prompt_holds_the_concept() {
        for p in augment_grammar(concept(), 200, 1).unwrap() {
            assert_eq!(p.concept(), Some(concept()));
            assert_eq!(p.concept_positions().len(), 2);
            assert!(p.len() > 2);
            assert_eq!(p.strip_context(), PromptTokens::bare(concept()));
        }
    }

    #[test]
    fn seeds_matter() {
        let mut a = augment_grammar(concept(), 10, 1).unwrap();
        let mut b = augment_grammar(concept(), 10, 2).unwrap();
        a.sort_by(|x, y| x.ids().cmp(y.ids()));
        b.sort_by(|x, y| x.ids().cmp(y.ids()));
        assert_ne!(a, b);
        assert_eq!(augment_grammar(concept(), 10, 1).unwrap(), augment_grammar(concept(), 10, 1).unwrap());
    }

    #[test]
    fn no_repeats_before_exhaustion() {
        let g = AugmentGrammar {
            backgrounds: vec![Background::Gray],
            templates: vec![vec![Slot::Concept, Slot::Background], vec![Slot::Modifier, Slot::Concept]],
            ..AugmentGrammar::default()
        };
        assert_eq!(g.capacity(), 3);
        let out = g.generate(concept(), 3, 4).unwrap();
        let distinct: BTreeSet<_> = out.iter().map(|p| p.ids().to_vec()).collect();
        assert_eq!(distinct.len(), 3);
        assert_eq!(g.generate(concept(), 7, 4).unwrap().len(), 7);
        assert!(g.generate(concept(), 0, 4).is_err());
    }

    #[test]
    fn context_entropy_is_high() {
        let prompts = augment_grammar(concept(), 1000, 3).unwrap();
        assert!(context_entropy(&prompts) >= 2.0);
    }

    #[test]
    fn disabled_client_never_connects() {
        let cfg = LlmEndpointConfig {
            enabled: false,
            base_url: "http://192.0.2.1:9".into(),
            model: "m".into(),
            api_key_env: "UNLEARNLAB_UNUSED".into(),
            timeout_secs: 1,
            max_retries: 0,
            responses_per_call: 1,
        };
        assert!(matches!(augment_llm(&cfg, "x", 1), Err(Error::LlmConfig(_))));
    }

    #[test]
    fn response_parsing() {
        let ok = r#"{"choices":[{"message":{"role":"assistant","content":"a"}},{"message":{"content":"b"}}]}"#;
        assert_eq!(parse_chat_response(ok).unwrap(), vec!["a", "b"]);
        assert!(parse_chat_response(r#"{"choices":[]}"#).is_err());
        assert!(parse_chat_response("not json").is_err());
        assert!(parse_chat_response(r#"{"choices":[{"text":"a"}]}"#).is_err());
    }
}
