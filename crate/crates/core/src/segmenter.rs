//! Word proposal: extend one model greedily until its decoded output closes a
//! whitespace-delimited word.
//!
//! Boundaries are found on decoded text, never on token identity, so every
//! tokenizer convention (explicit space tokens, leading-space merges, tokens
//! carrying a word tail plus a space) yields the same canonical word. Leading
//! whitespace emitted before any word content is absorbed and dropped. The
//! separator is normalized to a single ASCII space. Scripts without whitespace
//! between words are not segmented.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::lm::{encode_context, LanguageModel, LmError, Prefix, TokenDistribution, TokenId};

pub const DEFAULT_MAX_WORD_TOKENS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminal {
    Boundary,
    Eos,
    TokenCap,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WordProposal {
    /// The word plus one trailing space; no trailing space when `terminal` is `Eos`.
    pub word_text: String,
    pub token_path: Vec<TokenId>,
    pub first_token_dist: TokenDistribution,
    pub terminal: Terminal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WordOptions {
    pub max_word_tokens: usize,
    /// Candidates requested per step; at least 2.
    pub topk: usize,
}

impl Default for WordOptions {
    fn default() -> Self {
        Self {
            max_word_tokens: DEFAULT_MAX_WORD_TOKENS,
            topk: 2,
        }
    }
}

/// Generates the next word after `prefix ‖ committed_round_text`.
///
/// With `seed`, the first token is forced to it; it must be among the
/// first-token candidates.
pub fn gen_word(
    model: &dyn LanguageModel,
    prefix: &Prefix,
    committed_round_text: &str,
    seed: Option<TokenId>,
    opts: &WordOptions,
) -> Result<WordProposal> {
    let context = encode_context(model, &joined(prefix, committed_round_text))?;
    complete_word(model, &context, None, seed, opts)
}

pub(crate) fn joined(prefix: &Prefix, tail: &str) -> String {
    let mut s = String::with_capacity(prefix.text().len() + tail.len());
    s.push_str(prefix.text());
    s.push_str(tail);
    s
}

/// Core of [`gen_word`] over an already encoded context. `first` reuses a
/// first-token distribution the caller has already fetched.
pub(crate) fn complete_word(
    model: &dyn LanguageModel,
    context: &[TokenId],
    first: Option<TokenDistribution>,
    seed: Option<TokenId>,
    opts: &WordOptions,
) -> Result<WordProposal> {
    let eos = model.info().eos_token;
    let limit = model.info().max_context_tokens;
    let mut first = first;
    let mut first_dist: Option<TokenDistribution> = None;
    let mut path: Vec<TokenId> = Vec::new();
    let mut buf = context.to_vec();

    loop {
        if path.len() >= opts.max_word_tokens {
            let text = model.decode(&path)?;
            let body = text.trim_start();
            if body.is_empty() {
                return Err(Error::EmptyWord);
            }
            return Ok(WordProposal {
                word_text: format!("{body} "),
                token_path: path,
                first_token_dist: first_dist.expect("cap is at least one token"),
                terminal: Terminal::TokenCap,
            });
        }

        if buf.len() > limit {
            return Err(LmError::ContextOverflow {
                tokens: buf.len(),
                limit,
            }
            .into());
        }
        let dist = match first.take() {
            Some(d) if path.is_empty() => d,
            _ => model.topk(&buf, opts.topk)?,
        };
        let top = dist
            .top()
            .ok_or(Error::InsufficientCandidates(0))?
            .token;
        let chosen = match seed {
            Some(s) if path.is_empty() => {
                if !dist.contains(s) {
                    return Err(Error::SeedNotCandidate(s));
                }
                s
            }
            _ => top,
        };
        if path.is_empty() {
            first_dist = Some(dist);
        }

        if chosen == eos {
            let text = model.decode(&path)?;
            let body = text.trim_start().to_string();
            path.push(eos);
            return Ok(WordProposal {
                word_text: body,
                token_path: path,
                first_token_dist: first_dist.expect("recorded above"),
                terminal: Terminal::Eos,
            });
        }

        path.push(chosen);
        buf.push(chosen);
        let text = model.decode(&path)?;
        let body = text.trim_start();
        if let Some(pos) = body.find(char::is_whitespace) {
            return Ok(WordProposal {
                word_text: format!("{} ", &body[..pos]),
                token_path: path,
                first_token_dist: first_dist.expect("recorded above"),
                terminal: Terminal::Boundary,
            });
        }
    }
}
