//! In-process HTTP server exposing any [`LanguageModel`] over the wire
//! protocol. Binds to an ephemeral localhost port and shuts down on drop.

use std::io;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use tiny_http::{Header, Method, Request, Response, Server};

use super::wire::{self, codes};
use crate::lm::{LanguageModel, LmError, TokenId};

/// Misbehaviour injected into a running stub.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Answer the first `n` model requests, then 503 for every later one.
    FailAfter(u64),
    /// 503 for the next `n` model requests, then recover.
    Transient(u64),
    /// Return top-k candidates in ascending order.
    UnsortedTopk,
    /// Drop `logprobs` from score responses.
    MissingField,
}

struct Shared {
    model: Arc<dyn LanguageModel>,
    fingerprint: String,
    fault: Mutex<Fault>,
    served: AtomicU64,
}

pub struct StubServer {
    server: Arc<Server>,
    shared: Arc<Shared>,
    url: String,
    workers: Vec<JoinHandle<()>>,
}

struct Reply {
    status: u16,
    body: String,
}

impl StubServer {
    pub fn start(model: Arc<dyn LanguageModel>) -> io::Result<Self> {
        Self::with_workers(model, 4)
    }

    pub fn with_workers(model: Arc<dyn LanguageModel>, workers: usize) -> io::Result<Self> {
        let server = Arc::new(Server::http("127.0.0.1:0").map_err(io::Error::other)?);
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| io::Error::other("stub bound to a non-IP address"))?;
        let shared = Arc::new(Shared {
            fingerprint: fingerprint(model.as_ref()),
            model,
            fault: Mutex::new(Fault::None),
            served: AtomicU64::new(0),
        });
        let workers = (0..workers.max(1))
            .map(|_| {
                let server = Arc::clone(&server);
                let shared = Arc::clone(&shared);
                std::thread::spawn(move || {
                    while let Ok(request) = server.recv() {
                        handle(&shared, request);
                    }
                })
            })
            .collect();
        Ok(Self {
            server,
            shared,
            url: format!("http://{addr}"),
            workers,
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    pub fn set_fault(&self, fault: Fault) {
        *self.shared.fault.lock().unwrap() = fault;
        self.shared.served.store(0, Ordering::SeqCst);
    }

    /// Model requests answered so far (info requests excluded).
    pub fn served(&self) -> u64 {
        self.shared.served.load(Ordering::SeqCst)
    }

    pub fn tokenizer_fingerprint(&self) -> &str {
        &self.shared.fingerprint
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        for _ in &self.workers {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

/// SHA-256 over the decoded surface of every token id.
pub fn fingerprint(model: &dyn LanguageModel) -> String {
    let info = model.info();
    let mut hasher = Sha256::new();
    hasher.update(info.eos_token.0.to_le_bytes());
    for id in 0..info.vocab_size as u32 {
        let surface = model.decode(&[TokenId(id)]).unwrap_or_default();
        hasher.update((surface.len() as u64).to_le_bytes());
        hasher.update(surface.as_bytes());
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn handle(shared: &Shared, mut request: Request) {
    let mut body = String::new();
    let reply = match request.as_reader().read_to_string(&mut body) {
        Ok(_) => route(shared, request.method(), request.url(), &body),
        Err(e) => error(400, codes::BAD_REQUEST, format!("unreadable body: {e}")),
    };
    let header = Header::from_bytes("Content-Type", "application/json").expect("static header");
    let response = Response::from_string(reply.body)
        .with_status_code(reply.status)
        .with_header(header);
    let _ = request.respond(response);
}

fn route(shared: &Shared, method: &Method, url: &str, body: &str) -> Reply {
    let path = url.split('?').next().unwrap_or("");
    if (method, path) == (&Method::Get, "/v1/info") {
        let info = shared.model.info();
        return ok(&wire::InfoResponse {
            model_id: info.model_id.clone(),
            vocab_size: info.vocab_size,
            eos_token_id: info.eos_token.0,
            tokenizer_fingerprint: shared.fingerprint.clone(),
        });
    }
    if method != &Method::Post || !matches!(path, "/v1/encode" | "/v1/decode" | "/v1/topk" | "/v1/score") {
        return error(404, codes::NOT_FOUND, format!("no route {method} {path}"));
    }

    let fault = {
        let mut fault = shared.fault.lock().unwrap();
        let served = shared.served.load(Ordering::SeqCst);
        match *fault {
            Fault::FailAfter(n) if served >= n => {
                return error(503, codes::UNAVAILABLE, "injected outage".into());
            }
            Fault::Transient(n) if n > 0 => {
                *fault = Fault::Transient(n - 1);
                return error(503, codes::UNAVAILABLE, "injected transient failure".into());
            }
            f => f,
        }
    };
    shared.served.fetch_add(1, Ordering::SeqCst);

    let model = shared.model.as_ref();
    match path {
        "/v1/encode" => with_body(body, |r: wire::EncodeRequest| {
            let tokens = model.encode(&r.text)?;
            Ok(ok(&wire::EncodeResponse {
                tokens: tokens.iter().map(|t| t.0).collect(),
            }))
        }),
        "/v1/decode" => with_body(body, |r: wire::DecodeRequest| {
            let tokens = ids(model, &r.tokens)?;
            Ok(ok(&wire::DecodeResponse {
                text: model.decode(&tokens)?,
            }))
        }),
        "/v1/topk" => with_body(body, |r: wire::TopkRequest| {
            if r.k == 0 {
                return Err(LmError::InvalidArgument("k must be positive".into()));
            }
            let tokens = ids(model, &r.tokens)?;
            let dist = model.topk(&tokens, r.k)?;
            let mut candidates: Vec<wire::WireCandidate> = dist
                .entries
                .into_iter()
                .map(|c| wire::WireCandidate {
                    token: c.token.0,
                    logprob: c.logprob,
                    surface: c.surface,
                })
                .collect();
            if fault == Fault::UnsortedTopk {
                candidates.reverse();
            }
            Ok(ok(&wire::TopkResponse { candidates }))
        }),
        _ => with_body(body, |r: wire::ScoreRequest| {
            let prefix = ids(model, &r.prefix_tokens)?;
            let continuation = ids(model, &r.continuation_tokens)?;
            let logprobs = model.score(&prefix, &continuation)?;
            if fault == Fault::MissingField {
                return Ok(ok(&serde_json::json!({ "values": logprobs })));
            }
            Ok(ok(&wire::ScoreResponse { logprobs }))
        }),
    }
}

fn ids(model: &dyn LanguageModel, raw: &[u32]) -> Result<Vec<TokenId>, LmError> {
    let vocab_size = model.info().vocab_size;
    raw.iter()
        .map(|&id| {
            if (id as usize) < vocab_size {
                Ok(TokenId(id))
            } else {
                Err(LmError::InvalidToken { id, vocab_size })
            }
        })
        .collect()
}

fn with_body<T: DeserializeOwned>(body: &str, f: impl FnOnce(T) -> Result<Reply, LmError>) -> Reply {
    match serde_json::from_str(body) {
        Ok(req) => f(req).unwrap_or_else(|e| lm_error(&e)),
        Err(e) => error(400, codes::BAD_REQUEST, e.to_string()),
    }
}

fn lm_error(e: &LmError) -> Reply {
    let (status, code) = match e {
        LmError::InvalidToken { .. } => (400, codes::INVALID_TOKEN),
        LmError::InvalidArgument(_) => (400, codes::INVALID_ARGUMENT),
        LmError::ContextOverflow { .. } => (400, codes::CONTEXT_OVERFLOW),
        LmError::EncodingMismatch(_) => (422, codes::ENCODING_MISMATCH),
        LmError::UnreachableContext(_) => (422, codes::UNREACHABLE_CONTEXT),
        LmError::Unavailable(_) => (503, codes::UNAVAILABLE),
        LmError::Protocol(_) => (500, codes::INTERNAL),
    };
    error(status, code, e.to_string())
}

fn ok<T: Serialize>(value: &T) -> Reply {
    Reply {
        status: 200,
        body: serde_json::to_string(value).expect("wire types serialize"),
    }
}

fn error(status: u16, code: &str, message: String) -> Reply {
    ok(&wire::ErrorResponse {
        error: wire::ErrorBody {
            code: code.to_string(),
            message,
        },
    })
    .with_status(status)
}

impl Reply {
    fn with_status(mut self, status: u16) -> Self {
        self.status = status;
        self
    }
}
