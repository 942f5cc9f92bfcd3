//! Closed vocabulary of the synthetic world and tokenized prompts.
//!
//! Token ids are fixed: `0` is the reserved null token, followed by shapes,
//! colours, backgrounds, positions, motions and modifiers in declaration
//! order. See [`Token::id`].

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound on prompt length, and the text-token count of the model.
pub const MAX_TEXT_TOKENS: usize = 8;

macro_rules! vocab_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }

            pub fn from_word(w: &str) -> Option<Self> {
                match w { $($word => Some($name::$variant),)+ _ => None }
            }

            pub fn index(self) -> usize {
                self as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.word())
            }
        }
    };
}

vocab_enum!(Shape { Square => "square", Cross => "cross", Disk => "disk", Stripes => "stripes" });
vocab_enum!(Color { Red => "red", Green => "green", Blue => "blue" });
vocab_enum!(Background { Black => "black", Gray => "gray", Purple => "purple", Teal => "teal" });
vocab_enum!(Position {
    TopLeft => "top-left",
    TopRight => "top-right",
    BottomLeft => "bottom-left",
    BottomRight => "bottom-right",
});
vocab_enum!(Motion { Static => "static", DriftRight => "drift-right", DriftDown => "drift-down" });
vocab_enum!(Modifier { Bright => "bright", Dim => "dim" });

/// One vocabulary entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Null,
    Shape(Shape),
    Color(Color),
    Background(Background),
    Position(Position),
    Motion(Motion),
    Modifier(Modifier),
}

const SHAPE_BASE: u32 = 1;
const COLOR_BASE: u32 = SHAPE_BASE + 4;
const BACKGROUND_BASE: u32 = COLOR_BASE + 3;
const POSITION_BASE: u32 = BACKGROUND_BASE + 4;
const MOTION_BASE: u32 = POSITION_BASE + 4;
const MODIFIER_BASE: u32 = MOTION_BASE + 3;

/// Number of token ids, including the null token.
pub const VOCAB_SIZE: usize = (MODIFIER_BASE + 2) as usize;

impl Token {
    pub fn id(self) -> u32 {
        match self {
            Token::Null => 0,
            Token::Shape(s) => SHAPE_BASE + s as u32,
            Token::Color(c) => COLOR_BASE + c as u32,
            Token::Background(b) => BACKGROUND_BASE + b as u32,
            Token::Position(p) => POSITION_BASE + p as u32,
            Token::Motion(m) => MOTION_BASE + m as u32,
            Token::Modifier(m) => MODIFIER_BASE + m as u32,
        }
    }

    pub fn from_id(id: u32) -> Option<Token> {
        let pick = |base: u32, n: usize| (id >= base && id < base + n as u32).then(|| (id - base) as usize);
        if id == 0 {
            Some(Token::Null)
        } else if let Some(i) = pick(SHAPE_BASE, Shape::ALL.len()) {
            Some(Token::Shape(Shape::ALL[i]))
        } else if let Some(i) = pick(COLOR_BASE, Color::ALL.len()) {
            Some(Token::Color(Color::ALL[i]))
        } else if let Some(i) = pick(BACKGROUND_BASE, Background::ALL.len()) {
            Some(Token::Background(Background::ALL[i]))
        } else if let Some(i) = pick(POSITION_BASE, Position::ALL.len()) {
            Some(Token::Position(Position::ALL[i]))
        } else if let Some(i) = pick(MOTION_BASE, Motion::ALL.len()) {
            Some(Token::Motion(Motion::ALL[i]))
        } else {
            pick(MODIFIER_BASE, Modifier::ALL.len()).map(|i| Token::Modifier(Modifier::ALL[i]))
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Token::Null => "<null>",
            Token::Shape(s) => s.word(),
            Token::Color(c) => c.word(),
            Token::Background(b) => b.word(),
            Token::Position(p) => p.word(),
            Token::Motion(m) => m.word(),
            Token::Modifier(m) => m.word(),
        }
    }

    pub fn from_word(w: &str) -> Option<Token> {
        Shape::from_word(w)
            .map(Token::Shape)
            .or_else(|| Color::from_word(w).map(Token::Color))
            .or_else(|| Background::from_word(w).map(Token::Background))
            .or_else(|| Position::from_word(w).map(Token::Position))
            .or_else(|| Motion::from_word(w).map(Token::Motion))
            .or_else(|| Modifier::from_word(w).map(Token::Modifier))
    }

    pub fn is_concept(self) -> bool {
        matches!(self, Token::Shape(_) | Token::Color(_))
    }
}

/// A concept is a (shape, colour) pair; ids run `shape * 3 + color`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ConceptId {
    pub shape: Shape,
    pub color: Color,
}

pub const NUM_CONCEPTS: usize = 12;

impl ConceptId {
    pub fn new(shape: Shape, color: Color) -> Self {
        ConceptId { shape, color }
    }

    pub fn index(self) -> usize {
        self.shape.index() * Color::ALL.len() + self.color.index()
    }

    pub fn from_index(i: usize) -> Option<Self> {
        (i < NUM_CONCEPTS).then(|| ConceptId {
            shape: Shape::ALL[i / Color::ALL.len()],
            color: Color::ALL[i % Color::ALL.len()],
        })
    }

    pub fn all() -> impl Iterator<Item = ConceptId> {
        (0..NUM_CONCEPTS).filter_map(ConceptId::from_index)
    }

    /// `"red-square"` style name.
    pub fn name(self) -> String {
        format!("{}-{}", self.color.word(), self.shape.word())
    }

    pub fn parse(s: &str) -> Result<Self> {
        let (c, sh) = s
            .split_once('-')
            .ok_or_else(|| Error::InvalidArgument(format!("concept `{s}` is not <color>-<shape>")))?;
        let color = Color::from_word(c)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown colour `{c}`")))?;
        let shape = Shape::from_word(sh)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown shape `{sh}`")))?;
        Ok(ConceptId { shape, color })
    }
}

impl fmt::Display for ConceptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.color.word(), self.shape.word())
    }
}

/// Token id sequence plus the positions holding concept tokens.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PromptTokens {
    ids: Vec<u32>,
    concept_positions: Vec<usize>,
}

impl PromptTokens {
    pub fn from_tokens(tokens: &[Token]) -> Result<Self> {
        if tokens.len() > MAX_TEXT_TOKENS {
            return Err(Error::InvalidArgument(format!(
                "prompt has {} tokens, at most {MAX_TEXT_TOKENS} allowed",
                tokens.len()
            )));
        }
        Ok(PromptTokens {
            ids: tokens.iter().map(|t| t.id()).collect(),
            concept_positions: tokens
                .iter()
                .enumerate()
                .filter(|(_, t)| t.is_concept())
                .map(|(i, _)| i)
                .collect(),
        })
    }

    pub fn from_ids(ids: &[u32]) -> Result<Self> {
        let tokens = ids
            .iter()
            .map(|&id| Token::from_id(id).ok_or_else(|| Error::InvalidArgument(format!("token id {id} out of range"))))
            .collect::<Result<Vec<_>>>()?;
        Self::from_tokens(&tokens)
    }

    /// The bare concept prompt `[color, shape]`.
    pub fn bare(concept: ConceptId) -> Self {
        Self::from_tokens(&[Token::Color(concept.color), Token::Shape(concept.shape)])
            .expect("two tokens fit")
    }

    /// The reserved unconditional prompt: token 0 repeated.
    pub fn null() -> Self {
        PromptTokens {
            ids: vec![0; MAX_TEXT_TOKENS],
            concept_positions: Vec::new(),
        }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn concept_positions(&self) -> &[usize] {
        &self.concept_positions
    }

    pub fn tokens(&self) -> Vec<Token> {
        self.ids.iter().map(|&i| Token::from_id(i).expect("validated")).collect()
    }

    /// Ids right-padded with the null token to `MAX_TEXT_TOKENS`.
    pub fn padded(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.ids.iter().map(|&i| i as usize).collect();
        v.resize(MAX_TEXT_TOKENS, 0);
        v
    }

    /// The concept named by the prompt, if it holds exactly one shape and one colour.
    pub fn concept(&self) -> Option<ConceptId> {
        let toks = self.tokens();
        let shapes: Vec<Shape> = toks.iter().filter_map(|t| match t { Token::Shape(s) => Some(*s), _ => None }).collect();
        let colors: Vec<Color> = toks.iter().filter_map(|t| match t { Token::Color(c) => Some(*c), _ => None }).collect();
        match (shapes.as_slice(), colors.as_slice()) {
            ([s], [c]) => Some(ConceptId::new(*s, *c)),
            _ => None,
        }
    }

    /// Drops every non-concept, non-null token.
    pub fn strip_context(&self) -> Self {
        let kept: Vec<Token> = self.tokens().into_iter().filter(|t| t.is_concept()).collect();
        Self::from_tokens(&kept).expect("subset of a valid prompt")
    }

    /// Parses free text: lowercase words are matched against the vocabulary
    /// (hyphenated words such as `drift-right` included) and everything else
    /// is ignored. At least one known word is required.
    pub fn parse(text: &str) -> Result<Self> {
        let lower = text.to_ascii_lowercase();
        let tokens: Vec<Token> = lower
            .split(|c: char| !(c.is_ascii_alphanumeric() || c == '-'))
            .filter(|w| !w.is_empty())
            .filter_map(Token::from_word)
            .collect();
        if tokens.is_empty() {
            return Err(Error::InvalidArgument(format!("no vocabulary words in prompt `{text}`")));
        }
        Self::from_tokens(&tokens)
    }
}

impl fmt::Display for PromptTokens {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let words: Vec<&str> = self.tokens().iter().map(|t| t.word()).collect();
        f.write_str(&words.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_dense_and_invertible() {
        let mut seen = [false; VOCAB_SIZE];
        for id in 0..VOCAB_SIZE as u32 {
            let t = Token::from_id(id).unwrap();
            assert_eq!(t.id(), id);
            seen[id as usize] = true;
            if t != Token::Null {
                assert_eq!(Token::from_word(t.word()), Some(t));
            }
        }
        assert!(seen.iter().all(|&s| s));
        assert!(Token::from_id(VOCAB_SIZE as u32).is_none());
        assert_eq!(VOCAB_SIZE, 21);
    }

    #[test]
    fn concept_ids_cover_grid() {
        let ids: Vec<usize> = ConceptId::all().map(|c| c.index()).collect();
        assert_eq!(ids, (0..12).collect::<Vec<_>>());
        let c = ConceptId::parse("red-square").unwrap();
        assert_eq!(c.index(), 0);
        assert_eq!(c.to_string(), "red-square");
        assert!(ConceptId::parse("pink-square").is_err());
    }

    #[test]
    fn parse_text_prompt() {
        let p = PromptTokens::parse("A red square, drift-right on a gray background").unwrap();
        assert_eq!(p.to_string(), "red square drift-right gray");
        assert_eq!(p.concept_positions(), &[0, 1]);
        assert_eq!(p.concept(), Some(ConceptId::new(Shape::Square, Color::Red)));
        assert!(PromptTokens::parse("nothing here").is_err());
    }

    #[test]
    fn too_long_rejected() {
        let toks = vec![Token::Color(Color::Red); MAX_TEXT_TOKENS + 1];
        assert!(PromptTokens::from_tokens(&toks).is_err());
    }

    #[test]
    fn null_prompt_is_all_zero() {
        let n = PromptTokens::null();
        assert_eq!(n.padded(), vec![0; MAX_TEXT_TOKENS]);
        assert!(n.concept_positions().is_empty());
    }
}
