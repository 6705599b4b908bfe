//! The fixed toy vocabulary shared by user prompts, reasoning traces and
//! enhanced prompts.
//!
//! Token ids are assigned class by class in a fixed order, so the id of every
//! token is a compile-time property of its [`TokenKind`]. The vocabulary
//! object exists for surface lookup, hashing and iteration.

use std::collections::HashMap;
use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u16);

impl TokenId {
    /// Typed meaning, or `None` for ids outside the vocabulary.
    pub fn kind(self) -> Option<TokenKind> {
        TokenKind::from_id(self)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

macro_rules! surface_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $surface:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $surface)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn index(self) -> usize {
                self as usize
            }

            pub fn surface(self) -> &'static str {
                match self {
                    $($name::$variant => $surface),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.surface())
            }
        }
    };
}

surface_enum!(
    /// Function words, punctuation and the end-of-output marker.
    Function {
        A => "a",
        Photo => "photo",
        Of => "of",
        And => "and",
        Comma => ",",
        End => "<end>",
    }
);

surface_enum!(ObjectClass {
    Cat => "cat",
    Dog => "dog",
    Cow => "cow",
    Cube => "cube",
    Ball => "ball",
    Car => "car",
    Cup => "cup",
    Bird => "bird",
});

surface_enum!(Color {
    Red => "red",
    Blue => "blue",
    Green => "green",
    Yellow => "yellow",
    Black => "black",
    White => "white",
});

surface_enum!(Relation {
    LeftOf => "left-of",
    RightOf => "right-of",
    Above => "above",
    Below => "below",
});

surface_enum!(
    /// Placement hints. The first nine name exact grid cells, the last four
    /// snap an object to an edge of the 3x3 grid.
    Layout {
        TopLeft => "at-top-left",
        TopCenter => "at-top-center",
        TopRight => "at-top-right",
        MiddleLeft => "at-middle-left",
        Center => "at-center",
        MiddleRight => "at-middle-right",
        BottomLeft => "at-bottom-left",
        BottomCenter => "at-bottom-center",
        BottomRight => "at-bottom-right",
        Left => "at-left",
        Right => "at-right",
        Top => "at-top",
        Bottom => "at-bottom",
    }
);

surface_enum!(Structure {
    ReasonOpen => "<reason>",
    ReasonClose => "</reason>",
    PromptOpen => "<prompt>",
    PromptClose => "</prompt>",
});

pub const NUMERAL_SURFACES: [&str; 4] = ["one", "two", "three", "four"];

pub const DETAIL_SURFACES: [&str; 10] = [
    "detailed",
    "bright",
    "sharp",
    "realistic",
    "soft-light",
    "high-angle",
    "wide-shot",
    "textured",
    "vivid",
    "cinematic",
];

/// Partition label of a token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenClass {
    Function,
    Object,
    Color,
    Numeral,
    Relation,
    Layout,
    Structure,
    Detail,
}

/// Typed meaning of a token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Function(Function),
    Object(ObjectClass),
    Color(Color),
    /// Count in `1..=4`.
    Numeral(u8),
    Relation(Relation),
    Layout(Layout),
    Structure(Structure),
    /// Index in `0..10`.
    Detail(u8),
}

const FUNCTION_BASE: u16 = 0;
const OBJECT_BASE: u16 = FUNCTION_BASE + 6;
const COLOR_BASE: u16 = OBJECT_BASE + 8;
const NUMERAL_BASE: u16 = COLOR_BASE + 6;
const RELATION_BASE: u16 = NUMERAL_BASE + 4;
const LAYOUT_BASE: u16 = RELATION_BASE + 4;
const STRUCTURE_BASE: u16 = LAYOUT_BASE + 13;
const DETAIL_BASE: u16 = STRUCTURE_BASE + 4;

/// Number of tokens in the vocabulary.
pub const VOCAB_SIZE: usize = (DETAIL_BASE + 10) as usize;

impl TokenKind {
    pub fn id(self) -> TokenId {
        let raw = match self {
            TokenKind::Function(f) => FUNCTION_BASE + f.index() as u16,
            TokenKind::Object(o) => OBJECT_BASE + o.index() as u16,
            TokenKind::Color(c) => COLOR_BASE + c.index() as u16,
            TokenKind::Numeral(n) => {
                debug_assert!((1..=4).contains(&n));
                NUMERAL_BASE + (n - 1) as u16
            }
            TokenKind::Relation(r) => RELATION_BASE + r.index() as u16,
            TokenKind::Layout(l) => LAYOUT_BASE + l.index() as u16,
            TokenKind::Structure(s) => STRUCTURE_BASE + s.index() as u16,
            TokenKind::Detail(d) => {
                debug_assert!(d < 10);
                DETAIL_BASE + d as u16
            }
        };
        TokenId(raw)
    }

    pub fn class(self) -> TokenClass {
        match self {
            TokenKind::Function(_) => TokenClass::Function,
            TokenKind::Object(_) => TokenClass::Object,
            TokenKind::Color(_) => TokenClass::Color,
            TokenKind::Numeral(_) => TokenClass::Numeral,
            TokenKind::Relation(_) => TokenClass::Relation,
            TokenKind::Layout(_) => TokenClass::Layout,
            TokenKind::Structure(_) => TokenClass::Structure,
            TokenKind::Detail(_) => TokenClass::Detail,
        }
    }

    fn from_id(id: TokenId) -> Option<TokenKind> {
        let raw = id.0;
        let kind = if raw < OBJECT_BASE {
            TokenKind::Function(Function::ALL[(raw - FUNCTION_BASE) as usize])
        } else if raw < COLOR_BASE {
            TokenKind::Object(ObjectClass::ALL[(raw - OBJECT_BASE) as usize])
        } else if raw < NUMERAL_BASE {
            TokenKind::Color(Color::ALL[(raw - COLOR_BASE) as usize])
        } else if raw < RELATION_BASE {
            TokenKind::Numeral((raw - NUMERAL_BASE) as u8 + 1)
        } else if raw < LAYOUT_BASE {
            TokenKind::Relation(Relation::ALL[(raw - RELATION_BASE) as usize])
        } else if raw < STRUCTURE_BASE {
            TokenKind::Layout(Layout::ALL[(raw - LAYOUT_BASE) as usize])
        } else if raw < DETAIL_BASE {
            TokenKind::Structure(Structure::ALL[(raw - STRUCTURE_BASE) as usize])
        } else if (raw as usize) < VOCAB_SIZE {
            TokenKind::Detail((raw - DETAIL_BASE) as u8)
        } else {
            return None;
        };
        Some(kind)
    }

    fn surface(self) -> &'static str {
        match self {
            TokenKind::Function(f) => f.surface(),
            TokenKind::Object(o) => o.surface(),
            TokenKind::Color(c) => c.surface(),
            TokenKind::Numeral(n) => NUMERAL_SURFACES[(n - 1) as usize],
            TokenKind::Relation(r) => r.surface(),
            TokenKind::Layout(l) => l.surface(),
            TokenKind::Structure(s) => s.surface(),
            TokenKind::Detail(d) => DETAIL_SURFACES[d as usize],
        }
    }
}

impl From<Function> for TokenId {
    fn from(v: Function) -> Self {
        TokenKind::Function(v).id()
    }
}
impl From<ObjectClass> for TokenId {
    fn from(v: ObjectClass) -> Self {
        TokenKind::Object(v).id()
    }
}
impl From<Color> for TokenId {
    fn from(v: Color) -> Self {
        TokenKind::Color(v).id()
    }
}
impl From<Relation> for TokenId {
    fn from(v: Relation) -> Self {
        TokenKind::Relation(v).id()
    }
}
impl From<Layout> for TokenId {
    fn from(v: Layout) -> Self {
        TokenKind::Layout(v).id()
    }
}
impl From<Structure> for TokenId {
    fn from(v: Structure) -> Self {
        TokenKind::Structure(v).id()
    }
}

pub fn numeral(count: u8) -> TokenId {
    TokenKind::Numeral(count).id()
}

pub fn detail(index: u8) -> TokenId {
    TokenKind::Detail(index).id()
}

pub const END: TokenId = TokenId(FUNCTION_BASE + 5);

#[derive(Clone, Debug)]
pub struct Token {
    pub id: TokenId,
    pub surface: &'static str,
    pub kind: TokenKind,
}

#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<Token>,
    by_surface: HashMap<&'static str, TokenId>,
    hash: String,
}

pub fn build_vocabulary() -> Vocabulary {
    let tokens: Vec<Token> = (0..VOCAB_SIZE as u16)
        .map(|raw| {
            let id = TokenId(raw);
            let kind = TokenKind::from_id(id).expect("id below VOCAB_SIZE");
            Token {
                id,
                surface: kind.surface(),
                kind,
            }
        })
        .collect();
    let by_surface = tokens.iter().map(|t| (t.surface, t.id)).collect();

    let mut hasher = Sha256::new();
    for t in &tokens {
        hasher.update(format!("{}\t{}\t{:?}\n", t.id, t.surface, t.kind.class()).as_bytes());
    }
    let hash = hex::encode(hasher.finalize());

    Vocabulary {
        tokens,
        by_surface,
        hash,
    }
}

/// The process-wide vocabulary instance.
pub fn vocabulary() -> &'static Vocabulary {
    static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
    VOCAB.get_or_init(build_vocabulary)
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn content_hash(&self) -> &str {
        &self.hash
    }

    pub fn get(&self, id: TokenId) -> Result<&Token> {
        self.tokens
            .get(id.index())
            .ok_or(Error::UnknownTokenId(id.0 as u32))
    }

    pub fn kind(&self, id: TokenId) -> Result<TokenKind> {
        self.get(id).map(|t| t.kind)
    }

    pub fn lookup(&self, surface: &str) -> Result<TokenId> {
        self.by_surface
            .get(surface)
            .copied()
            .ok_or_else(|| Error::UnknownSurface(surface.to_string()))
    }

    pub fn members(&self, class: TokenClass) -> impl Iterator<Item = &Token> {
        self.tokens.iter().filter(move |t| t.kind.class() == class)
    }

    /// Splits on whitespace and around `<...>` tags, so `</reason><prompt>`
    /// yields two tokens.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut out = Vec::new();
        for chunk in text.split_whitespace() {
            let mut rest = chunk;
            while !rest.is_empty() {
                let piece_len = if rest.starts_with('<') {
                    rest.find('>').map(|i| i + 1).unwrap_or(rest.len())
                } else {
                    rest.find('<').unwrap_or(rest.len())
                };
                let (piece, tail) = rest.split_at(piece_len);
                out.push(self.lookup(piece)?);
                rest = tail;
            }
        }
        Ok(out)
    }

    pub fn detokenize(&self, tokens: &[TokenId]) -> Result<String> {
        let surfaces = tokens
            .iter()
            .map(|&t| self.get(t).map(|tok| tok.surface))
            .collect::<Result<Vec<_>>>()?;
        Ok(surfaces.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn contains_structure_tokens() {
        let v = build_vocabulary();
        assert!(v.lookup("<reason>").is_ok());
        let structure: Vec<_> = v.members(TokenClass::Structure).map(|t| t.surface).collect();
        assert_eq!(structure, ["<reason>", "</reason>", "<prompt>", "</prompt>"]);
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(build_vocabulary().content_hash(), build_vocabulary().content_hash());
        assert_eq!(build_vocabulary().content_hash(), vocabulary().content_hash());
    }

    #[test]
    fn class_sizes() {
        let v = build_vocabulary();
        let count = |c| v.members(c).count();
        assert_eq!(count(TokenClass::Object), 8);
        assert_eq!(count(TokenClass::Color), 6);
        assert_eq!(count(TokenClass::Numeral), 4);
        assert_eq!(count(TokenClass::Relation), 4);
        assert_eq!(count(TokenClass::Layout), 13);
        assert_eq!(count(TokenClass::Detail), 10);
        assert!(v.len() <= 64);
        assert_eq!(v.len(), VOCAB_SIZE);
    }

    #[test]
    fn surfaces_unique_and_ids_dense() {
        let v = build_vocabulary();
        let mut seen = std::collections::HashSet::new();
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(t.id.index(), i);
            assert!(seen.insert(t.surface), "duplicate surface {}", t.surface);
            assert_eq!(t.kind.id(), t.id);
        }
    }

    #[test]
    fn detokenize_cases() {
        let v = vocabulary();
        assert_eq!(v.detokenize(&[]).unwrap(), "");
        let toks = v.tokenize("a red cube").unwrap();
        assert_eq!(v.detokenize(&toks).unwrap(), "a red cube");
        assert!(matches!(
            v.detokenize(&[TokenId(9999)]),
            Err(Error::UnknownTokenId(9999))
        ));
    }

    #[test]
    fn tokenize_splits_glued_tags() {
        let v = vocabulary();
        let toks = v.tokenize("<reason> a </reason><prompt> cat </prompt>").unwrap();
        assert_eq!(toks.len(), 6);
        assert!(v.tokenize("a zebra").is_err());
    }

    proptest! {
        #[test]
        fn tokenize_inverts_detokenize(ids in proptest::collection::vec(0u16..VOCAB_SIZE as u16, 0..40)) {
            let v = vocabulary();
            let toks: Vec<TokenId> = ids.into_iter().map(TokenId).collect();
            let text = v.detokenize(&toks).unwrap();
            prop_assert_eq!(v.tokenize(&text).unwrap(), toks);
        }
    }
}
