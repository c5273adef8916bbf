//! Two-stage word search: the top-B distinct first tokens (exploration), each
//! completed greedily to a full word (exploitation).

use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;
use crate::lm::{encode_context, LanguageModel, Prefix, TokenDistribution, TokenId};
use crate::segmenter::{complete_word, joined, WordOptions, WordProposal};

pub const DEFAULT_BRANCHING_FACTOR: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BranchSet {
    pub branches: Vec<WordProposal>,
    pub branching_factor: usize,
}

impl BranchSet {
    pub fn first_tokens(&self) -> Vec<TokenId> {
        self.branches.iter().map(|b| b.token_path[0]).collect()
    }
}

pub fn explore_exploit(
    model: &dyn LanguageModel,
    prefix: &Prefix,
    committed_round_text: &str,
    branching_factor: usize,
    opts: &WordOptions,
) -> Result<BranchSet> {
    let context = encode_context(model, &joined(prefix, committed_round_text))?;
    let k = opts.topk.max(branching_factor);
    let first = model.topk(&context, k)?;
    explore_from(model, &context, first, branching_factor, None, opts)
}

/// Expands the top `branching_factor` entries of `first`. A `greedy` word
/// already generated from the same distribution is reused as branch 1.
pub(crate) fn explore_from(
    model: &dyn LanguageModel,
    context: &[TokenId],
    first: TokenDistribution,
    branching_factor: usize,
    greedy: Option<WordProposal>,
    opts: &WordOptions,
) -> Result<BranchSet> {
    let seeds: Vec<TokenId> = first
        .entries
        .iter()
        .take(branching_factor)
        .map(|e| e.token)
        .collect();
    let branches = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| match &greedy {
            Some(w) if i == 0 && w.token_path.first() == Some(&seed) => Ok(w.clone()),
            _ => complete_word(model, context, Some(first.clone()), Some(seed), opts),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BranchSet {
        branches,
        branching_factor,
    })
}
