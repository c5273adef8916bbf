//! The two built-in tokenizers and the vocabulary table they share.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::lm::{LmError, TokenId};

pub const EOS: TokenId = TokenId(0);
pub const BOS: TokenId = TokenId(1);
pub const UNK: TokenId = TokenId(2);
pub const RESERVED: usize = 3;

pub const EOS_SURFACE: &str = "</s>";
pub const BOS_SURFACE: &str = "<s>";
pub const UNK_SURFACE: &str = "<unk>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerKind {
    /// One token per Unicode scalar value; whitespace characters are tokens.
    Char,
    /// One token per maximal non-whitespace run plus one per whitespace character.
    Word,
}

impl TokenizerKind {
    pub fn pieces<'a>(&self, text: &'a str) -> Vec<&'a str> {
        match self {
            TokenizerKind::Char => text
                .char_indices()
                .map(|(i, c)| &text[i..i + c.len_utf8()])
                .collect(),
            TokenizerKind::Word => {
                let mut out = Vec::new();
                let mut run_start: Option<usize> = None;
                for (i, c) in text.char_indices() {
                    if c.is_whitespace() {
                        if let Some(start) = run_start.take() {
                            out.push(&text[start..i]);
                        }
                        out.push(&text[i..i + c.len_utf8()]);
                    } else if run_start.is_none() {
                        run_start = Some(i);
                    }
                }
                if let Some(start) = run_start {
                    out.push(&text[start..]);
                }
                out
            }
        }
    }
}

impl fmt::Display for TokenizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TokenizerKind::Char => "char",
            TokenizerKind::Word => "word",
        })
    }
}

impl FromStr for TokenizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "char" => Ok(TokenizerKind::Char),
            "word" => Ok(TokenizerKind::Word),
            other => Err(format!("unknown tokenizer kind {other:?} (expected char or word)")),
        }
    }
}

/// Surface table with the reserved ids `EOS`, `BOS`, `UNK` at 0..3.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    kind: TokenizerKind,
    surfaces: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary over every piece in `texts`, ids assigned in
    /// lexicographic surface order after the reserved tokens.
    pub fn build<'a>(kind: TokenizerKind, texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut seen = BTreeSet::new();
        for text in texts {
            for piece in kind.pieces(text) {
                seen.insert(piece.to_string());
            }
        }
        let mut surfaces = vec![
            EOS_SURFACE.to_string(),
            BOS_SURFACE.to_string(),
            UNK_SURFACE.to_string(),
        ];
        surfaces.extend(seen);
        Self::from_surfaces(kind, surfaces).expect("reserved surfaces are well formed")
    }

    pub fn from_surfaces(kind: TokenizerKind, surfaces: Vec<String>) -> Result<Self, String> {
        if surfaces.len() < RESERVED
            || surfaces[0] != EOS_SURFACE
            || surfaces[1] != BOS_SURFACE
            || surfaces[2] != UNK_SURFACE
        {
            return Err("vocabulary must start with the reserved </s>, <s>, <unk> surfaces".into());
        }
        let mut index = HashMap::with_capacity(surfaces.len());
        for (i, s) in surfaces.iter().enumerate().skip(RESERVED) {
            if kind.pieces(s) != [s.as_str()] {
                return Err(format!("surface {s:?} is not a single {kind} token"));
            }
            if index.insert(s.clone(), TokenId(i as u32)).is_some() {
                return Err(format!("duplicate surface {s:?}"));
            }
        }
        Ok(Self {
            kind,
            surfaces,
            index,
        })
    }

    pub fn kind(&self) -> TokenizerKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    pub fn surfaces(&self) -> &[String] {
        &self.surfaces
    }

    pub fn surface(&self, id: TokenId) -> Option<&str> {
        self.surfaces.get(id.index()).map(String::as_str)
    }

    pub fn id(&self, surface: &str) -> Option<TokenId> {
        self.index.get(surface).copied()
    }

    /// Unknown pieces map to `UNK`.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        self.kind
            .pieces(text)
            .into_iter()
            .map(|p| self.id(p).unwrap_or(UNK))
            .collect()
    }

    /// `EOS` and `BOS` decode to nothing; `UNK` decodes to its marker.
    pub fn decode(&self, tokens: &[TokenId]) -> Result<String, LmError> {
        let mut out = String::new();
        for &t in tokens {
            match t {
                EOS | BOS => {}
                _ => out.push_str(self.surface(t).ok_or(LmError::InvalidToken {
                    id: t.0,
                    vocab_size: self.len(),
                })?),
            }
        }
        Ok(out)
    }
}
