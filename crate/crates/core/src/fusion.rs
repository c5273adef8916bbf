//! Cross-model scoring of pooled span candidates.
//!
//! Every model scores every candidate by its length-normalized negative
//! log-likelihood against the round-start prefix, using its own token count
//! for the span. The fused score is the mean over models and the lowest fused
//! score wins. A model that cannot re-encode a candidate charges it a fixed
//! penalty instead of dropping out, so every fused score averages over the
//! same set of models.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lm::{split_encoding, LanguageModel, LmError, Prefix};

/// Probability charged for one pseudo-token when a model cannot encode a span.
pub const UNSCORABLE_PROBABILITY: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct Origin {
    pub model_id: String,
    /// `None` for the model's single greedy span, `Some(b)` for branch `b`.
    pub branch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpanCandidate {
    pub span_text: String,
    pub word_count: usize,
    pub origin: Origin,
    pub is_eos: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelScore {
    pub model_id: String,
    pub nll: f64,
    pub token_count: usize,
    pub penalized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FusionScore {
    /// One entry per ensemble model, in ensemble order.
    pub per_model: Vec<ModelScore>,
    /// Mean of `per_model[..].nll`; `+inf` when every model was penalized.
    pub fused: f64,
}

impl FusionScore {
    pub fn scorable(&self) -> bool {
        self.per_model.iter().any(|s| !s.penalized)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Selection {
    pub winner: usize,
    pub scores: Vec<FusionScore>,
}

/// Union of all models' candidates with exact-text duplicates collapsed onto
/// their first occurrence.
pub fn pool(candidates_by_model: impl IntoIterator<Item = Vec<SpanCandidate>>) -> Result<Vec<SpanCandidate>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for cands in candidates_by_model {
        for c in cands {
            if seen.insert((c.span_text.clone(), c.is_eos)) {
                out.push(c);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyPool);
    }
    Ok(out)
}

/// Normalized NLL of `candidate` after `prefix` and the token count it was
/// normalized by.
pub fn span_nll(
    model: &dyn LanguageModel,
    prefix: &Prefix,
    candidate: &SpanCandidate,
) -> Result<(f64, usize)> {
    let (head, mut tail) = split_encoding(model, prefix.text(), &candidate.span_text)?;
    if candidate.is_eos {
        tail.push(model.info().eos_token);
    }
    if tail.is_empty() {
        return Err(LmError::InvalidArgument("span has no tokens".into()).into());
    }
    let logprobs = model.score(&head, &tail)?;
    if logprobs.len() != tail.len() {
        return Err(LmError::Protocol(format!(
            "{} logprobs for {} tokens",
            logprobs.len(),
            tail.len()
        ))
        .into());
    }
    let total: f64 = logprobs.iter().sum();
    Ok((-total / tail.len() as f64, tail.len()))
}

fn model_score(model: &dyn LanguageModel, prefix: &Prefix, candidate: &SpanCandidate) -> Result<ModelScore> {
    let model_id = model.info().model_id.clone();
    match span_nll(model, prefix, candidate) {
        Ok((nll, token_count)) => Ok(ModelScore {
            model_id,
            nll,
            token_count,
            penalized: false,
        }),
        Err(Error::Lm(LmError::EncodingMismatch(_))) => Ok(ModelScore {
            model_id,
            nll: -UNSCORABLE_PROBABILITY.ln(),
            token_count: 1,
            penalized: true,
        }),
        Err(e) => Err(e),
    }
}

/// Relative tolerance under which two fused scores count as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Mean summed in ascending order, so the value does not depend on model order.
fn mean_sorted(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

/// Whether `challenger` is strictly better than `incumbent` beyond the tie
/// tolerance.
pub fn beats(challenger: f64, incumbent: f64) -> bool {
    challenger < incumbent - TIE_TOLERANCE * incumbent.abs().max(1.0)
}

/// Scores every pooled candidate under every model and picks the lowest mean
/// NLL; ties go to the earlier candidate.
pub fn select<M: LanguageModel>(candidates: &[SpanCandidate], models: &[M], prefix: &Prefix) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::EmptyPool);
    }
    let jobs: Vec<(usize, usize)> = (0..candidates.len())
        .flat_map(|c| (0..models.len()).map(move |m| (c, m)))
        .collect();
    let flat = jobs
        .par_iter()
        .map(|&(c, m)| model_score(&models[m], prefix, &candidates[c]))
        .collect::<Result<Vec<_>>>()?;

    let scores: Vec<FusionScore> = flat
        .chunks(models.len())
        .map(|per| {
            let per_model = per.to_vec();
            let fused = if per_model.iter().all(|s| s.penalized) {
                f64::INFINITY
            } else {
                mean_sorted(per_model.iter().map(|s| s.nll))
            };
            FusionScore { per_model, fused }
        })
        .collect();

    let mut winner: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        if !s.scorable() {
            continue;
        }
        match winner {
            Some(w) if !beats(s.fused, scores[w].fused) => {}
            _ => winner = Some(i),
        }
    }
    let winner = winner.ok_or(Error::AllCandidatesUnscorable)?;
    Ok(Selection { winner, scores })
}
