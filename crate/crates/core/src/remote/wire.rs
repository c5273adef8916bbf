//! Request and response bodies of the logprob protocol.
//!
//! | route | request | response |
//! |-------|---------|----------|
//! | `GET /v1/info` | | `{model_id, vocab_size, eos_token_id, tokenizer_fingerprint}` |
//! | `POST /v1/encode` | `{text}` | `{tokens}` |
//! | `POST /v1/decode` | `{tokens}` | `{text}` |
//! | `POST /v1/topk` | `{tokens, k}` | `{candidates: [{token, logprob, surface}]}` |
//! | `POST /v1/score` | `{prefix_tokens, continuation_tokens}` | `{logprobs}` |
//!
//! Logprobs are natural-log, ids 0-based. Failures carry a non-2xx status and
//! `{error: {code, message}}`.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoResponse {
    pub model_id: String,
    pub vocab_size: usize,
    pub eos_token_id: u32,
    pub tokenizer_fingerprint: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncodeRequest {
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncodeResponse {
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeRequest {
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeResponse {
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopkRequest {
    pub tokens: Vec<u32>,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireCandidate {
    pub token: u32,
    pub logprob: f64,
    pub surface: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopkResponse {
    pub candidates: Vec<WireCandidate>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub prefix_tokens: Vec<u32>,
    pub continuation_tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub logprobs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: ErrorBody,
}

/// Error codes shared by the stub and the client.
pub mod codes {
    pub const BAD_REQUEST: &str = "bad_request";
    pub const NOT_FOUND: &str = "not_found";
    pub const INVALID_TOKEN: &str = "invalid_token";
    pub const INVALID_ARGUMENT: &str = "invalid_argument";
    pub const ENCODING_MISMATCH: &str = "encoding_mismatch";
    pub const UNREACHABLE_CONTEXT: &str = "unreachable_context";
    pub const CONTEXT_OVERFLOW: &str = "context_overflow";
    pub const UNAVAILABLE: &str = "unavailable";
    pub const INTERNAL: &str = "internal";
}
