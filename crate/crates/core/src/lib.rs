//! Word-level ensemble decoding across language models with heterogeneous
//! tokenizers.
//!
//! Every round, each model proposes a span of whole words. It keeps extending
//! the span while its first-token confidence margin stays above a threshold,
//! up to a per-round word cap. Low-confidence word starts can optionally fan
//! out into several distinct candidate words. All candidates are scored by
//! every model using length-normalized NLL, and the lowest average wins.

pub mod commit;
pub mod diversity;
pub mod engine;
pub mod error;
pub mod fixture;
pub mod fusion;
pub mod harness;
pub mod lm;
pub mod ngram;
pub mod remote;
pub mod segmenter;
pub mod tokenizer;

pub use engine::{decode, decode_beam_round, decode_fixed, DecodeConfig, DecodeTrace, Decoded, Mode};
pub use error::{Error, Result};
pub use lm::{LanguageModel, LmError, Prefix, TokenDistribution, TokenId};
pub use ngram::NgramModel;
pub use tokenizer::TokenizerKind;
