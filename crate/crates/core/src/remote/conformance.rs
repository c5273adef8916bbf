//! Black-box checks that a server speaks the logprob protocol correctly.

use serde::Serialize;

use super::{RemoteLm, RemoteOptions};
use crate::lm::{LanguageModel, LmError, TokenId};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConformanceReport {
    pub base_url: String,
    pub checks: Vec<CheckResult>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

const K: usize = 5;
const TOLERANCE: f64 = 1e-9;

/// Runs every check against `base_url` using `probes` as sample texts. With a
/// `reference`, responses must also agree with it.
pub fn check(
    base_url: &str,
    reference: Option<&dyn LanguageModel>,
    probes: &[&str],
    options: RemoteOptions,
) -> ConformanceReport {
    let mut checks = Vec::new();
    let mut record = |name: &str, outcome: Result<(), String>| {
        checks.push(CheckResult {
            name: name.to_string(),
            passed: outcome.is_ok(),
            detail: outcome.err().unwrap_or_default(),
        })
    };

    let remote = match RemoteLm::connect(base_url, options) {
        Ok(r) => r,
        Err(e) => {
            record("info", Err(e.to_string()));
            return ConformanceReport {
                base_url: base_url.to_string(),
                checks,
            };
        }
    };
    record("info", Ok(()));
    record("fingerprint_stable", remote.verify().map_err(|e| e.to_string()));

    for probe in probes {
        let tokens = match remote.encode(probe) {
            Ok(t) => t,
            Err(e) => {
                record(&format!("encode {probe:?}"), Err(e.to_string()));
                continue;
            }
        };
        record(&format!("round_trip {probe:?}"), round_trip(&remote, probe, &tokens));
        record(&format!("topk {probe:?}"), topk_prefix(&remote, &tokens));
        record(&format!("deterministic {probe:?}"), deterministic(&remote, &tokens));
        record(&format!("score_matches_topk {probe:?}"), score_matches_topk(&remote, &tokens));
        if let Some(reference) = reference {
            record(&format!("reference {probe:?}"), agrees(&remote, reference, probe, &tokens));
        }
    }

    record("invalid_token_rejected", invalid_token(&remote));
    ConformanceReport {
        base_url: base_url.to_string(),
        checks,
    }
}

fn err(e: LmError) -> String {
    e.to_string()
}

fn round_trip(remote: &RemoteLm, probe: &str, tokens: &[TokenId]) -> Result<(), String> {
    let text = remote.decode(tokens).map_err(err)?;
    if text == *probe {
        Ok(())
    } else {
        Err(format!("decoded to {text:?}"))
    }
}

fn topk_prefix(remote: &RemoteLm, tokens: &[TokenId]) -> Result<(), String> {
    let wide = remote.topk(tokens, K).map_err(err)?;
    for k in 1..K {
        let narrow = remote.topk(tokens, k).map_err(err)?;
        let n = narrow.entries.len();
        if n > k || wide.entries.get(..n) != Some(&narrow.entries[..]) {
            return Err(format!("top-{k} is not a prefix of top-{K}"));
        }
    }
    Ok(())
}

fn deterministic(remote: &RemoteLm, tokens: &[TokenId]) -> Result<(), String> {
    let a = remote.topk(tokens, K).map_err(err)?;
    let b = remote.topk(tokens, K).map_err(err)?;
    if a == b {
        Ok(())
    } else {
        Err("repeated top-k request gave different answers".into())
    }
}

fn score_matches_topk(remote: &RemoteLm, tokens: &[TokenId]) -> Result<(), String> {
    let dist = remote.topk(tokens, K).map_err(err)?;
    for cand in &dist.entries {
        let lp = remote.score(tokens, &[cand.token]).map_err(err)?;
        if lp.len() != 1 || (lp[0] - cand.logprob).abs() > TOLERANCE {
            return Err(format!(
                "token {} scored {:?} but top-k says {}",
                cand.token, lp, cand.logprob
            ));
        }
    }
    Ok(())
}

fn agrees(
    remote: &RemoteLm,
    reference: &dyn LanguageModel,
    probe: &str,
    tokens: &[TokenId],
) -> Result<(), String> {
    let expected = reference.encode(probe).map_err(err)?;
    if expected != tokens {
        return Err("encodings differ".into());
    }
    let mine = remote.topk(tokens, K).map_err(err)?;
    let theirs = reference.topk(tokens, K).map_err(err)?;
    if mine.entries != theirs.entries {
        return Err("top-k entries differ".into());
    }
    if let Some(split) = tokens.len().checked_sub(1) {
        let a = remote.score(&tokens[..split], &tokens[split..]).map_err(err)?;
        let b = reference.score(&tokens[..split], &tokens[split..]).map_err(err)?;
        if a != b {
            return Err(format!("scores differ: {a:?} vs {b:?}"));
        }
    }
    Ok(())
}

/// Sends an out-of-range id straight to the server, bypassing the client's
/// own range check, and expects a structured rejection.
fn invalid_token(remote: &RemoteLm) -> Result<(), String> {
    let body = super::wire::TopkRequest {
        tokens: vec![remote.info().vocab_size as u32],
        k: 2,
    };
    let url = format!("{}/v1/topk", remote.base_url());
    match ureq::post(&url).send_json(&body) {
        Ok(_) => Err("out-of-range token accepted".into()),
        Err(ureq::Error::Status(status, resp)) if (400..500).contains(&status) => {
            let text = resp.into_string().map_err(|e| e.to_string())?;
            serde_json::from_str::<super::wire::ErrorResponse>(&text)
                .map(|_| ())
                .map_err(|e| format!("error body: {e}"))
        }
        Err(e) => Err(e.to_string()),
    }
}
