//! Additively smoothed n-gram model over a built-in tokenizer.
//!
//! ```text
//! P(v | ctx) = (count(ctx, v) + alpha) / (total(ctx) + alpha * |V|)
//! ```
//!
//! `V` is every observed surface plus `</s>`. `<s>` (context padding) and
//! `<unk>` are never predicted. Each training document is padded with
//! `order - 1` copies of `<s>` and closed with `</s>`.
//!
//! # Model file format
//!
//! A JSON object, keys in this order:
//!
//! | key | value |
//! |-----|-------|
//! | `format` | `"adafuse-ngram"` |
//! | `version` | `1` |
//! | `model_id` | string |
//! | `order` | integer ≥ 1 |
//! | `alpha` | number > 0 |
//! | `tokenizer` | `"char"` or `"word"` |
//! | `max_context_tokens` | integer |
//! | `vocab` | surfaces in id order, starting `"</s>"`, `"<s>"`, `"<unk>"` |
//! | `counts` | `[{"context": [id…], "next": [[id, count]…]}…]`, contexts and ids ascending |

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::lm::{LanguageModel, LmError, ModelInfo, TokenCandidate, TokenDistribution, TokenId};
use crate::tokenizer::{TokenizerKind, Vocab, BOS, EOS, EOS_SURFACE, RESERVED};

pub const FORMAT_NAME: &str = "adafuse-ngram";
pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_MAX_CONTEXT_TOKENS: usize = 4096;

#[derive(Debug, thiserror::Error)]
pub enum NgramError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("order must be at least 1")]
    InvalidOrder,
    #[error("alpha must be positive and finite, got {0}")]
    InvalidAlpha(f64),
    #[error("malformed model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Default, PartialEq)]
struct ContextCounts {
    total: u64,
    next: HashMap<TokenId, u64>,
    /// `next` sorted by descending count, ascending id.
    ranked: Vec<(TokenId, u64)>,
}

impl ContextCounts {
    fn finish(&mut self) {
        let mut ranked: Vec<_> = self.next.iter().map(|(&t, &c)| (t, c)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        self.ranked = ranked;
    }
}

#[derive(Debug, Clone)]
pub struct NgramModel {
    info: ModelInfo,
    order: usize,
    alpha: f64,
    vocab: Vocab,
    counts: HashMap<Vec<TokenId>, ContextCounts>,
}

impl PartialEq for NgramModel {
    fn eq(&self, other: &Self) -> bool {
        self.info == other.info
            && self.order == other.order
            && self.alpha.to_bits() == other.alpha.to_bits()
            && self.vocab == other.vocab
            && self.counts == other.counts
    }
}

impl NgramModel {
    pub fn train<S: AsRef<str>>(
        corpus: &[S],
        order: usize,
        alpha: f64,
        tokenizer: TokenizerKind,
    ) -> Result<Self, NgramError> {
        if corpus.is_empty() {
            return Err(NgramError::EmptyCorpus);
        }
        if order == 0 {
            return Err(NgramError::InvalidOrder);
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(NgramError::InvalidAlpha(alpha));
        }
        let vocab = Vocab::build(tokenizer, corpus.iter().map(AsRef::as_ref));
        let mut counts: HashMap<Vec<TokenId>, ContextCounts> = HashMap::new();
        for doc in corpus {
            let mut seq = vec![BOS; order - 1];
            seq.extend(vocab.encode(doc.as_ref()));
            seq.push(EOS);
            for i in (order - 1)..seq.len() {
                let entry = counts.entry(seq[i + 1 - order..i].to_vec()).or_default();
                entry.total += 1;
                *entry.next.entry(seq[i]).or_default() += 1;
            }
        }
        counts.values_mut().for_each(ContextCounts::finish);
        let model_id = format!("ngram-{tokenizer}-{order}");
        Ok(Self {
            info: ModelInfo {
                model_id,
                eos_token: EOS,
                eos_surface: EOS_SURFACE.to_string(),
                vocab_size: vocab.len(),
                max_context_tokens: DEFAULT_MAX_CONTEXT_TOKENS,
            },
            order,
            alpha,
            vocab,
            counts,
        })
    }

    pub fn with_id(mut self, model_id: impl Into<String>) -> Self {
        self.info.model_id = model_id.into();
        self
    }

    pub fn with_max_context(mut self, tokens: usize) -> Self {
        self.info.max_context_tokens = tokens;
        self
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn tokenizer(&self) -> TokenizerKind {
        self.vocab.kind()
    }

    /// Size of the predicted vocabulary `|V|`.
    pub fn support(&self) -> usize {
        self.vocab.len() - RESERVED + 1
    }

    fn predictable(&self, t: TokenId) -> bool {
        t == EOS || (t.index() >= RESERVED && t.index() < self.vocab.len())
    }

    /// The `order - 1` tokens conditioning the next prediction, `<s>`-padded.
    fn context_key(&self, history: &[TokenId]) -> Vec<TokenId> {
        let want = self.order - 1;
        let take = want.min(history.len());
        let mut key = vec![BOS; want - take];
        key.extend_from_slice(&history[history.len() - take..]);
        key
    }

    fn denominator_ln(&self, total: u64) -> f64 {
        (total as f64 + self.alpha * self.support() as f64).ln()
    }

    /// `ln P(next | history)`; `-inf` for tokens that are never predicted.
    pub fn logprob(&self, history: &[TokenId], next: TokenId) -> f64 {
        if !self.predictable(next) {
            return f64::NEG_INFINITY;
        }
        let key = self.context_key(history);
        let (total, count) = match self.counts.get(&key) {
            Some(c) => (c.total, c.next.get(&next).copied().unwrap_or(0)),
            None => (0, 0),
        };
        (count as f64 + self.alpha).ln() - self.denominator_ln(total)
    }

    fn candidate(&self, token: TokenId, logprob: f64) -> TokenCandidate {
        TokenCandidate {
            token,
            logprob,
            surface: self.vocab.surface(token).unwrap_or_default().to_string(),
        }
    }

    pub fn save_to_string(&self) -> String {
        let mut contexts: Vec<_> = self.counts.iter().collect();
        contexts.sort_by(|a, b| a.0.cmp(b.0));
        let counts = contexts
            .into_iter()
            .map(|(ctx, c)| {
                let mut next: Vec<(u32, u64)> = c.next.iter().map(|(t, n)| (t.0, *n)).collect();
                next.sort_unstable();
                FileContext {
                    context: ctx.iter().map(|t| t.0).collect(),
                    next,
                }
            })
            .collect();
        let file = ModelFile {
            format: FORMAT_NAME.to_string(),
            version: FORMAT_VERSION,
            model_id: self.info.model_id.clone(),
            order: self.order,
            alpha: self.alpha,
            tokenizer: self.vocab.kind(),
            max_context_tokens: self.info.max_context_tokens,
            vocab: self.vocab.surfaces().to_vec(),
            counts,
        };
        let mut out = serde_json::to_string(&file).expect("model file serializes");
        out.push('\n');
        out
    }

    pub fn load_from_str(text: &str) -> Result<Self, NgramError> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format != FORMAT_NAME {
            return Err(NgramError::Format(format!("unknown format {:?}", file.format)));
        }
        if file.version != FORMAT_VERSION {
            return Err(NgramError::Format(format!("unsupported version {}", file.version)));
        }
        if file.order == 0 {
            return Err(NgramError::InvalidOrder);
        }
        if !(file.alpha > 0.0 && file.alpha.is_finite()) {
            return Err(NgramError::InvalidAlpha(file.alpha));
        }
        let vocab = Vocab::from_surfaces(file.tokenizer, file.vocab).map_err(NgramError::Format)?;
        let in_range = |id: u32| (id as usize) < vocab.len();
        let mut counts = HashMap::with_capacity(file.counts.len());
        for entry in file.counts {
            if entry.context.len() != file.order - 1 || !entry.context.iter().all(|&t| in_range(t)) {
                return Err(NgramError::Format(format!("bad context {:?}", entry.context)));
            }
            let mut cc = ContextCounts::default();
            for (t, n) in entry.next {
                if !in_range(t) {
                    return Err(NgramError::Format(format!("token {t} out of range")));
                }
                cc.total += n;
                cc.next.insert(TokenId(t), n);
            }
            cc.finish();
            counts.insert(entry.context.into_iter().map(TokenId).collect(), cc);
        }
        Ok(Self {
            info: ModelInfo {
                model_id: file.model_id,
                eos_token: EOS,
                eos_surface: EOS_SURFACE.to_string(),
                vocab_size: vocab.len(),
                max_context_tokens: file.max_context_tokens,
            },
            order: file.order,
            alpha: file.alpha,
            vocab,
            counts,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NgramError> {
        std::fs::write(path, self.save_to_string())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NgramError> {
        Self::load_from_str(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    model_id: String,
    order: usize,
    alpha: f64,
    tokenizer: TokenizerKind,
    max_context_tokens: usize,
    vocab: Vec<String>,
    counts: Vec<FileContext>,
}

#[derive(Serialize, Deserialize)]
struct FileContext {
    context: Vec<u32>,
    next: Vec<(u32, u64)>,
}

impl LanguageModel for NgramModel {
    fn info(&self) -> &ModelInfo {
        &self.info
    }

    fn encode(&self, text: &str) -> Result<Vec<TokenId>, LmError> {
        Ok(self.vocab.encode(text))
    }

    fn decode(&self, tokens: &[TokenId]) -> Result<String, LmError> {
        self.vocab.decode(tokens)
    }

    fn topk(&self, context: &[TokenId], k: usize) -> Result<TokenDistribution, LmError> {
        if let Some(bad) = context.iter().find(|t| t.index() >= self.vocab.len()) {
            return Err(LmError::InvalidToken {
                id: bad.0,
                vocab_size: self.vocab.len(),
            });
        }
        let key = self.context_key(context);
        let empty = ContextCounts::default();
        let stats = self.counts.get(&key).unwrap_or(&empty);
        let denom = self.denominator_ln(stats.total);
        let mut entries = Vec::with_capacity(k.min(self.support()));
        for &(t, c) in stats.ranked.iter().take(k) {
            entries.push(self.candidate(t, (c as f64 + self.alpha).ln() - denom));
        }
        // Unseen continuations all tie at alpha; they follow in id order.
        if entries.len() < k {
            let unseen_lp = self.alpha.ln() - denom;
            let predictable = std::iter::once(EOS)
                .chain((RESERVED..self.vocab.len()).map(|i| TokenId(i as u32)));
            for t in predictable {
                if entries.len() == k {
                    break;
                }
                if !stats.next.contains_key(&t) {
                    entries.push(self.candidate(t, unseen_lp));
                }
            }
        }
        Ok(TokenDistribution::from_candidates(entries, k, self.support()))
    }

    fn score(&self, prefix: &[TokenId], continuation: &[TokenId]) -> Result<Vec<f64>, LmError> {
        let mut history = prefix.to_vec();
        let mut out = Vec::with_capacity(continuation.len());
        for &t in continuation {
            if t.index() >= self.vocab.len() {
                return Err(LmError::InvalidToken {
                    id: t.0,
                    vocab_size: self.vocab.len(),
                });
            }
            out.push(self.logprob(&history, t));
            history.push(t);
        }
        Ok(out)
    }
}
