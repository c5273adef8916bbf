//! Provider interface shared by every language model the engine can drive.
//!
//! Models exchange token ids only with themselves. Everything that crosses a
//! model boundary (the committed prefix, candidate spans) is plain text, and
//! each model re-encodes it with its own tokenizer.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

/// Index into one model's private vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LmError {
    #[error("context of {tokens} tokens exceeds the model limit of {limit}")]
    ContextOverflow { tokens: usize, limit: usize },
    #[error("provider unavailable: {0}")]
    Unavailable(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("encoding mismatch: {0}")]
    EncodingMismatch(String),
    #[error("token {id} is outside the vocabulary of size {vocab_size}")]
    InvalidToken { id: u32, vocab_size: usize },
    #[error("no transition defined for context {0:?}")]
    UnreachableContext(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Static facts about a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub model_id: String,
    pub eos_token: TokenId,
    /// Display marker for the end-of-sequence token. Never part of canonical text.
    pub eos_surface: String,
    pub vocab_size: usize,
    pub max_context_tokens: usize,
}

/// One ranked next-token candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenCandidate {
    pub token: TokenId,
    pub logprob: f64,
    pub surface: String,
}

/// The top slice of a next-token distribution.
///
/// Entries are sorted by descending logprob with ties broken by ascending
/// token id. `support` is the number of tokens the provider assigns non-zero
/// mass to (a support of 1 certifies a degenerate single-token vocabulary).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDistribution {
    pub entries: Vec<TokenCandidate>,
    pub k: usize,
    pub support: usize,
}

impl TokenDistribution {
    /// Sorts, truncates to `k` and wraps raw candidates.
    pub fn from_candidates(mut entries: Vec<TokenCandidate>, k: usize, support: usize) -> Self {
        entries.sort_by(|a, b| {
            b.logprob
                .total_cmp(&a.logprob)
                .then_with(|| a.token.cmp(&b.token))
        });
        entries.truncate(k);
        Self {
            entries,
            k,
            support,
        }
    }

    pub fn top(&self) -> Option<&TokenCandidate> {
        self.entries.first()
    }

    pub fn contains(&self, token: TokenId) -> bool {
        self.entries.iter().any(|e| e.token == token)
    }

    /// Checks the ordering and range invariants. Used on data from untrusted
    /// providers.
    pub fn validate(&self) -> Result<(), String> {
        if self.entries.len() > self.k {
            return Err(format!(
                "{} candidates returned for k={}",
                self.entries.len(),
                self.k
            ));
        }
        for (i, e) in self.entries.iter().enumerate() {
            if e.logprob.is_nan() || e.logprob > 0.0 {
                return Err(format!("candidate {i} has logprob {}", e.logprob));
            }
            if i > 0 {
                let prev = &self.entries[i - 1];
                let ordered = prev.logprob > e.logprob
                    || (prev.logprob == e.logprob && prev.token < e.token);
                if !ordered {
                    return Err(format!("candidates {} and {i} are not monotone", i - 1));
                }
            }
        }
        Ok(())
    }
}

/// The committed, model-independent decoding prefix.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Prefix(String);

impl Prefix {
    pub fn new(text: impl Into<String>) -> Self {
        Self(text.into())
    }

    pub fn text(&self) -> &str {
        &self.0
    }

    pub fn push_str(&mut self, text: &str) {
        self.0.push_str(text);
    }

    /// A new prefix with `text` appended.
    pub fn extended(&self, text: &str) -> Self {
        let mut out = self.0.clone();
        out.push_str(text);
        Self(out)
    }
}

/// A causal language model addressed by token ids.
///
/// Implementations must be deterministic: identical arguments give
/// bit-identical results. No method may mutate observable state.
pub trait LanguageModel: Send + Sync {
    fn info(&self) -> &ModelInfo;

    fn encode(&self, text: &str) -> Result<Vec<TokenId>, LmError>;

    fn decode(&self, tokens: &[TokenId]) -> Result<String, LmError>;

    /// Top-`k` next tokens after `context`.
    fn topk(&self, context: &[TokenId], k: usize) -> Result<TokenDistribution, LmError>;

    /// Teacher-forced logprob of every continuation token.
    fn score(&self, prefix: &[TokenId], continuation: &[TokenId]) -> Result<Vec<f64>, LmError>;
}

impl<T: LanguageModel + ?Sized> LanguageModel for &T {
    fn info(&self) -> &ModelInfo {
        (**self).info()
    }
    fn encode(&self, text: &str) -> Result<Vec<TokenId>, LmError> {
        (**self).encode(text)
    }
    fn decode(&self, tokens: &[TokenId]) -> Result<String, LmError> {
        (**self).decode(tokens)
    }
    fn topk(&self, context: &[TokenId], k: usize) -> Result<TokenDistribution, LmError> {
        (**self).topk(context, k)
    }
    fn score(&self, prefix: &[TokenId], continuation: &[TokenId]) -> Result<Vec<f64>, LmError> {
        (**self).score(prefix, continuation)
    }
}

impl<T: LanguageModel + ?Sized> LanguageModel for Box<T> {
    fn info(&self) -> &ModelInfo {
        (**self).info()
    }
    fn encode(&self, text: &str) -> Result<Vec<TokenId>, LmError> {
        (**self).encode(text)
    }
    fn decode(&self, tokens: &[TokenId]) -> Result<String, LmError> {
        (**self).decode(tokens)
    }
    fn topk(&self, context: &[TokenId], k: usize) -> Result<TokenDistribution, LmError> {
        (**self).topk(context, k)
    }
    fn score(&self, prefix: &[TokenId], continuation: &[TokenId]) -> Result<Vec<f64>, LmError> {
        (**self).score(prefix, continuation)
    }
}

impl<T: LanguageModel + ?Sized> LanguageModel for Arc<T> {
    fn info(&self) -> &ModelInfo {
        (**self).info()
    }
    fn encode(&self, text: &str) -> Result<Vec<TokenId>, LmError> {
        (**self).encode(text)
    }
    fn decode(&self, tokens: &[TokenId]) -> Result<String, LmError> {
        (**self).decode(tokens)
    }
    fn topk(&self, context: &[TokenId], k: usize) -> Result<TokenDistribution, LmError> {
        (**self).topk(context, k)
    }
    fn score(&self, prefix: &[TokenId], continuation: &[TokenId]) -> Result<Vec<f64>, LmError> {
        (**self).score(prefix, continuation)
    }
}

/// Encodes `text` and enforces the model's context capability.
pub fn encode_context(model: &dyn LanguageModel, text: &str) -> Result<Vec<TokenId>, LmError> {
    let tokens = model.encode(text)?;
    check_context(model, tokens.len())?;
    Ok(tokens)
}

fn check_context(model: &dyn LanguageModel, len: usize) -> Result<(), LmError> {
    let limit = model.info().max_context_tokens;
    if len > limit {
        return Err(LmError::ContextOverflow { tokens: len, limit });
    }
    Ok(())
}

/// Top-`k` next tokens after `prefix` followed by a partially generated word.
pub fn next_token_topk(
    model: &dyn LanguageModel,
    prefix: &Prefix,
    partial_word: &[TokenId],
    k: usize,
) -> Result<TokenDistribution, LmError> {
    if k < 2 {
        return Err(LmError::InvalidArgument(format!("k must be at least 2, got {k}")));
    }
    let mut context = model.encode(prefix.text())?;
    context.extend_from_slice(partial_word);
    check_context(model, context.len())?;
    model.topk(&context, k)
}

/// Splits the encoding of `prefix ‖ continuation` at the longest token
/// boundary whose decoding is exactly `prefix`.
///
/// Fails with [`LmError::EncodingMismatch`] when no such boundary exists or
/// when the tokens past it do not decode back to `continuation`.
pub fn split_encoding(
    model: &dyn LanguageModel,
    prefix: &str,
    continuation: &str,
) -> Result<(Vec<TokenId>, Vec<TokenId>), LmError> {
    let mut joined = String::with_capacity(prefix.len() + continuation.len());
    joined.push_str(prefix);
    joined.push_str(continuation);
    let full = model.encode(&joined)?;
    check_context(model, full.len())?;

    let decodes_to_prefix = |cut: usize| -> Result<bool, LmError> {
        Ok(model.decode(&full[..cut])? == prefix)
    };

    // Fast path: the standalone prefix encoding lines up with the joint one.
    let standalone = model.encode(prefix)?;
    let mut cut = None;
    if full.starts_with(&standalone) && decodes_to_prefix(standalone.len())? {
        let mut best = standalone.len();
        while best < full.len() && decodes_to_prefix(best + 1)? {
            best += 1;
        }
        cut = Some(best);
    } else {
        for candidate in (0..=full.len()).rev() {
            if decodes_to_prefix(candidate)? {
                cut = Some(candidate);
                break;
            }
        }
    }
    let cut = cut.ok_or_else(|| {
        LmError::EncodingMismatch(format!(
            "no token boundary of {:?} decodes to the prefix",
            truncate_for_message(&joined)
        ))
    })?;

    let tail = full[cut..].to_vec();
    if model.decode(&tail)? != continuation {
        return Err(LmError::EncodingMismatch(format!(
            "continuation {:?} does not survive re-encoding",
            truncate_for_message(continuation)
        )));
    }
    Ok((full[..cut].to_vec(), tail))
}

fn truncate_for_message(text: &str) -> String {
    const MAX: usize = 48;
    if text.chars().count() <= MAX {
        text.to_string()
    } else {
        let tail: String = text.chars().rev().take(MAX).collect::<Vec<_>>().into_iter().rev().collect();
        format!("…{tail}")
    }
}

/// Teacher-forced logprobs of `continuation` after `prefix`, one per
/// continuation token of this model's tokenizer.
pub fn score_continuation(
    model: &dyn LanguageModel,
    prefix: &Prefix,
    continuation: &str,
) -> Result<Vec<f64>, LmError> {
    if continuation.is_empty() {
        return Err(LmError::InvalidArgument("continuation is empty".into()));
    }
    let (head, tail) = split_encoding(model, prefix.text(), continuation)?;
    model.score(&head, &tail)
}

/// Counts the calls made through it.
#[derive(Debug)]
pub struct Metered<M> {
    inner: M,
    topk_calls: AtomicU64,
    score_calls: AtomicU64,
}

impl<M> Metered<M> {
    pub fn new(inner: M) -> Self {
        Self {
            inner,
            topk_calls: AtomicU64::new(0),
            score_calls: AtomicU64::new(0),
        }
    }

    pub fn topk_calls(&self) -> u64 {
        self.topk_calls.load(Ordering::Relaxed)
    }

    pub fn score_calls(&self) -> u64 {
        self.score_calls.load(Ordering::Relaxed)
    }

    pub fn inner(&self) -> &M {
        &self.inner
    }
}

impl<M: LanguageModel> LanguageModel for Metered<M> {
    fn info(&self) -> &ModelInfo {
        self.inner.info()
    }
    fn encode(&self, text: &str) -> Result<Vec<TokenId>, LmError> {
        self.inner.encode(text)
    }
    fn decode(&self, tokens: &[TokenId]) -> Result<String, LmError> {
        self.inner.decode(tokens)
    }
    fn topk(&self, context: &[TokenId], k: usize) -> Result<TokenDistribution, LmError> {
        self.topk_calls.fetch_add(1, Ordering::Relaxed);
        self.inner.topk(context, k)
    }
    fn score(&self, prefix: &[TokenId], continuation: &[TokenId]) -> Result<Vec<f64>, LmError> {
        self.score_calls.fetch_add(1, Ordering::Relaxed);
        self.inner.score(prefix, continuation)
    }
}
