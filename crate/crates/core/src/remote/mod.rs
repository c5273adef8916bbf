//! Language models served over HTTP with the logprob protocol in [`wire`].
//!
//! The server owns its tokenizer: text is shipped only to `/v1/encode`, and
//! everything afterwards moves as token ids. [`stub::StubServer`] serves any
//! in-process model over the same protocol and [`conformance`] checks a server
//! against it.

pub mod conformance;
pub mod stub;
pub mod wire;

use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::lm::{LanguageModel, LmError, ModelInfo, TokenCandidate, TokenDistribution, TokenId};
use wire::{codes, ErrorResponse};

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteOptions {
    pub timeout: Duration,
    /// Total tries per request, at least 1.
    pub attempts: u32,
    /// Sleep before retry `n` is `backoff * n`.
    pub backoff: Duration,
    pub max_context_tokens: usize,
}

impl Default for RemoteOptions {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(30),
            attempts: 3,
            backoff: Duration::from_millis(100),
            max_context_tokens: 4096,
        }
    }
}

/// Client for one served model.
#[derive(Debug)]
pub struct RemoteLm {
    base_url: String,
    agent: ureq::Agent,
    options: RemoteOptions,
    info: ModelInfo,
    fingerprint: String,
}

enum Failure {
    Retryable(LmError),
    Final(LmError),
}

impl RemoteLm {
    /// Fetches and validates `/v1/info`.
    pub fn connect(base_url: &str, options: RemoteOptions) -> Result<Self, LmError> {
        let agent = ureq::AgentBuilder::new().timeout(options.timeout).build();
        let base_url = base_url.trim_end_matches('/').to_string();
        let mut client = Self {
            base_url,
            agent,
            options,
            info: ModelInfo {
                model_id: String::new(),
                eos_token: TokenId(0),
                eos_surface: String::new(),
                vocab_size: 0,
                max_context_tokens: 0,
            },
            fingerprint: String::new(),
        };
        let info = client.fetch_info()?;
        client.info = ModelInfo {
            eos_surface: format!("<eos:{}>", info.eos_token_id),
            model_id: info.model_id,
            eos_token: TokenId(info.eos_token_id),
            vocab_size: info.vocab_size,
            max_context_tokens: client.options.max_context_tokens,
        };
        client.fingerprint = info.tokenizer_fingerprint;
        Ok(client)
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    pub fn tokenizer_fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Overrides the model id reported by the server.
    pub fn with_id(mut self, model_id: impl Into<String>) -> Self {
        self.info.model_id = model_id.into();
        self
    }

    /// Re-reads `/v1/info` and checks the tokenizer has not changed.
    pub fn verify(&self) -> Result<(), LmError> {
        let info = self.fetch_info()?;
        if info.tokenizer_fingerprint != self.fingerprint {
            return Err(LmError::Protocol(format!(
                "tokenizer_fingerprint changed from {} to {}",
                self.fingerprint, info.tokenizer_fingerprint
            )));
        }
        Ok(())
    }

    fn fetch_info(&self) -> Result<wire::InfoResponse, LmError> {
        let info: wire::InfoResponse = self.request("/v1/info", None::<&()>)?;
        if info.vocab_size == 0 {
            return Err(LmError::Protocol("vocab_size is zero".into()));
        }
        if info.eos_token_id as usize >= info.vocab_size {
            return Err(LmError::Protocol(format!(
                "eos_token_id {} outside vocab_size {}",
                info.eos_token_id, info.vocab_size
            )));
        }
        if info.tokenizer_fingerprint.is_empty() {
            return Err(LmError::Protocol("tokenizer_fingerprint is empty".into()));
        }
        Ok(info)
    }

    fn request<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: Option<&B>) -> Result<T, LmError> {
        let url = format!("{}{}", self.base_url, path);
        let attempts = self.options.attempts.max(1);
        let mut last = LmError::Unavailable(format!("{url}: no attempt made"));
        for attempt in 0..attempts {
            if attempt > 0 {
                thread::sleep(self.options.backoff * attempt);
            }
            match self.once(&url, body) {
                Ok(value) => {
                    // A retry may have reached a restarted server.
                    if attempt > 0 && path != "/v1/info" {
                        self.verify()?;
                    }
                    return Ok(value);
                }
                Err(Failure::Final(e)) => return Err(e),
                Err(Failure::Retryable(e)) => last = e,
            }
        }
        Err(last)
    }

    fn once<B: Serialize, T: DeserializeOwned>(&self, url: &str, body: Option<&B>) -> Result<T, Failure> {
        let result = match body {
            Some(b) => self.agent.post(url).send_json(b),
            None => self.agent.get(url).call(),
        };
        match result {
            Ok(resp) => {
                let text = resp
                    .into_string()
                    .map_err(|e| Failure::Retryable(LmError::Unavailable(format!("{url}: {e}"))))?;
                serde_json::from_str(&text)
                    .map_err(|e| Failure::Final(LmError::Protocol(format!("{url}: {e}"))))
            }
            Err(ureq::Error::Status(status, resp)) => {
                let text = resp.into_string().unwrap_or_default();
                let err = match serde_json::from_str::<ErrorResponse>(&text) {
                    Ok(body) => map_error(status, &body.error.code, body.error.message),
                    Err(e) => LmError::Protocol(format!("{url}: status {status} with malformed error body: {e}")),
                };
                if status >= 500 {
                    Err(Failure::Retryable(err))
                } else {
                    Err(Failure::Final(err))
                }
            }
            Err(ureq::Error::Transport(t)) => {
                Err(Failure::Retryable(LmError::Unavailable(format!("{url}: {t}"))))
            }
        }
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<(), LmError> {
        match tokens.iter().find(|t| t.index() >= self.info.vocab_size) {
            Some(t) => Err(LmError::InvalidToken {
                id: t.0,
                vocab_size: self.info.vocab_size,
            }),
            None => Ok(()),
        }
    }
}

fn map_error(status: u16, code: &str, message: String) -> LmError {
    match code {
        codes::ENCODING_MISMATCH => LmError::EncodingMismatch(message),
        codes::UNREACHABLE_CONTEXT => LmError::UnreachableContext(message),
        codes::INVALID_ARGUMENT | codes::INVALID_TOKEN | codes::CONTEXT_OVERFLOW => {
            LmError::InvalidArgument(format!("{code}: {message}"))
        }
        _ if status >= 500 => LmError::Unavailable(format!("{code}: {message}")),
        _ => LmError::Protocol(format!("status {status}, {code}: {message}")),
    }
}

fn ids(tokens: &[TokenId]) -> Vec<u32> {
    tokens.iter().map(|t| t.0).collect()
}

impl LanguageModel for RemoteLm {
    fn info(&self) -> &ModelInfo {
        &self.info
    }

    fn encode(&self, text: &str) -> Result<Vec<TokenId>, LmError> {
        let resp: wire::EncodeResponse = self.request(
            "/v1/encode",
            Some(&wire::EncodeRequest {
                text: text.to_string(),
            }),
        )?;
        let tokens: Vec<TokenId> = resp.tokens.into_iter().map(TokenId).collect();
        self.check_tokens(&tokens)
            .map_err(|e| LmError::Protocol(format!("tokens: {e}")))?;
        Ok(tokens)
    }

    fn decode(&self, tokens: &[TokenId]) -> Result<String, LmError> {
        self.check_tokens(tokens)?;
        let resp: wire::DecodeResponse =
            self.request("/v1/decode", Some(&wire::DecodeRequest { tokens: ids(tokens) }))?;
        Ok(resp.text)
    }

    fn topk(&self, context: &[TokenId], k: usize) -> Result<TokenDistribution, LmError> {
        self.check_tokens(context)?;
        let resp: wire::TopkResponse = self.request(
            "/v1/topk",
            Some(&wire::TopkRequest {
                tokens: ids(context),
                k,
            }),
        )?;
        let entries: Vec<TokenCandidate> = resp
            .candidates
            .into_iter()
            .map(|c| TokenCandidate {
                token: TokenId(c.token),
                logprob: c.logprob,
                surface: c.surface,
            })
            .collect();
        // A short list means the server has nothing else with non-zero mass.
        let support = if entries.len() < k {
            entries.len()
        } else {
            self.info.vocab_size
        };
        let dist = TokenDistribution {
            entries,
            k,
            support,
        };
        dist.validate()
            .map_err(|e| LmError::Protocol(format!("candidates: {e}")))?;
        self.check_tokens(&dist.entries.iter().map(|e| e.token).collect::<Vec<_>>())
            .map_err(|e| LmError::Protocol(format!("candidates: {e}")))?;
        Ok(dist)
    }

    fn score(&self, prefix: &[TokenId], continuation: &[TokenId]) -> Result<Vec<f64>, LmError> {
        self.check_tokens(prefix)?;
        self.check_tokens(continuation)?;
        let resp: wire::ScoreResponse = self.request(
            "/v1/score",
            Some(&wire::ScoreRequest {
                prefix_tokens: ids(prefix),
                continuation_tokens: ids(continuation),
            }),
        )?;
        if resp.logprobs.len() != continuation.len() {
            return Err(LmError::Protocol(format!(
                "logprobs: {} values for {} continuation tokens",
                resp.logprobs.len(),
                continuation.len()
            )));
        }
        if let Some(bad) = resp.logprobs.iter().find(|lp| lp.is_nan() || **lp > 0.0) {
            return Err(LmError::Protocol(format!("logprobs: value {bad} is not a logprob")));
        }
        Ok(resp.logprobs)
    }
}
