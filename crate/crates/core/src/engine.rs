//! The round-based ensemble decoder and its two ablation variants.
//!
//! Each round, every model builds span candidates from the shared text prefix,
//! the candidates are pooled and scored by all models, and the winner is
//! appended to the prefix. Rounds repeat until an end-of-sequence candidate
//! wins, a stop sequence appears, or a word or character budget runs out.

use std::fmt;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::commit::{self, GateConfig, MarginSource, Verdict};
use crate::diversity::{self, DEFAULT_BRANCHING_FACTOR};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionScore, Origin, SpanCandidate};
use crate::lm::{encode_context, LanguageModel, LmError, Metered, Prefix, TokenId};
use crate::segmenter::{self, joined, Terminal, WordOptions, DEFAULT_MAX_WORD_TOKENS};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Adafuse,
    FixedLength,
    BeamRound,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Adafuse => "adafuse",
            Mode::FixedLength => "fixed_length",
            Mode::BeamRound => "beam_round",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub tau_delta: f64,
    pub max_words_per_round: usize,
    pub branching_factor: usize,
    pub diversity_enabled: bool,
    pub max_word_tokens: usize,
    pub max_new_words: usize,
    pub max_new_chars: usize,
    pub stop_sequences: Vec<String>,
    pub mode: Mode,
    pub fixed_length: usize,
    pub beam_round_tokens: usize,
    pub topk_for_margin: usize,
    pub margin_source: MarginSource,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            tau_delta: commit::DEFAULT_TAU_DELTA,
            max_words_per_round: commit::DEFAULT_MAX_WORDS_PER_ROUND,
            branching_factor: DEFAULT_BRANCHING_FACTOR,
            diversity_enabled: false,
            max_word_tokens: DEFAULT_MAX_WORD_TOKENS,
            max_new_words: 128,
            max_new_chars: 2048,
            stop_sequences: Vec::new(),
            mode: Mode::Adafuse,
            fixed_length: 1,
            beam_round_tokens: 5,
            topk_for_margin: 2,
            margin_source: MarginSource::CurrentWord,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.tau_delta.is_nan() || self.tau_delta < 0.0 {
            return bad(format!("tau_delta must be non-negative, got {}", self.tau_delta));
        }
        if self.max_words_per_round == 0 {
            return bad("max_words_per_round must be at least 1".into());
        }
        if self.branching_factor == 0 {
            return bad("branching_factor must be at least 1".into());
        }
        if self.max_word_tokens == 0 {
            return bad("max_word_tokens must be at least 1".into());
        }
        if self.topk_for_margin < 2 {
            return bad("topk_for_margin must be at least 2".into());
        }
        if self.mode == Mode::FixedLength && !(1..=3).contains(&self.fixed_length) {
            return bad(format!("fixed_length must be 1, 2 or 3, got {}", self.fixed_length));
        }
        if self.beam_round_tokens == 0 {
            return bad("beam_round_tokens must be at least 1".into());
        }
        if self.stop_sequences.iter().any(String::is_empty) {
            return bad("stop sequences must be non-empty".into());
        }
        Ok(())
    }

    fn gate(&self) -> GateConfig {
        GateConfig {
            tau_delta: self.tau_delta,
            max_words_per_round: self.max_words_per_round,
            diversity_enabled: self.diversity_enabled,
        }
    }

    fn word_options(&self) -> WordOptions {
        let branches = if self.diversity_enabled { self.branching_factor } else { 1 };
        WordOptions {
            max_word_tokens: self.max_word_tokens,
            topk: self.topk_for_margin.max(branches),
        }
    }
}

/// Why a model stopped extending its span in a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundStop {
    LowMargin,
    WordCap,
    Eos,
    Diversified,
    FixedLength,
    BeamRound,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelRound {
    pub model_id: String,
    pub candidates: Vec<SpanCandidate>,
    pub margins: Vec<f64>,
    pub stop: RoundStop,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundTrace {
    pub index: usize,
    pub proposals: Vec<ModelRound>,
    pub pool: Vec<SpanCandidate>,
    pub scores: Vec<FusionScore>,
    pub winner: usize,
    pub winner_text: String,
    pub words_committed: usize,
    pub diversified: bool,
}

impl RoundTrace {
    pub fn winner(&self) -> &SpanCandidate {
        &self.pool[self.winner]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eos,
    StopSequence,
    MaxNewWords,
    MaxNewChars,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Totals {
    pub rounds: usize,
    pub provider_forward_calls: u64,
    pub scoring_calls: u64,
    pub words: usize,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DecodeTrace {
    pub mode: Mode,
    pub rounds: Vec<RoundTrace>,
    pub totals: Totals,
    pub stop: Option<StopReason>,
}

impl DecodeTrace {
    /// Concatenation of every round's winning span.
    pub fn replay(&self) -> String {
        self.rounds.iter().map(|r| r.winner_text.as_str()).collect()
    }

    /// Words committed by each round that committed at least one word.
    pub fn words_per_round(&self) -> impl Iterator<Item = usize> + '_ {
        self.rounds
            .iter()
            .map(|r| r.words_committed)
            .filter(|&w| w > 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub output: String,
    pub trace: DecodeTrace,
}

/// A failed decode, with everything committed before the failing round.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeFailure {
    pub round: usize,
    pub error: Error,
    pub output: String,
    pub trace: DecodeTrace,
}

impl fmt::Display for DecodeFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "round {}: {}", self.round, self.error)
    }
}

impl std::error::Error for DecodeFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Decodes `prompt` with the mode selected in `config`.
pub fn decode(
    prompt: &str,
    models: &[&dyn LanguageModel],
    config: &DecodeConfig,
) -> Result<Decoded, Box<DecodeFailure>> {
    run(prompt, models, config, config.mode)
}

/// Every round commits exactly `config.fixed_length` words per model, with no
/// margin check and no diversity.
pub fn decode_fixed(
    prompt: &str,
    models: &[&dyn LanguageModel],
    config: &DecodeConfig,
) -> Result<Decoded, Box<DecodeFailure>> {
    run(prompt, models, config, Mode::FixedLength)
}

/// Every round runs a width-`branching_factor` token beam search for
/// `beam_round_tokens` steps per model and keeps the first word of each beam.
pub fn decode_beam_round(
    prompt: &str,
    models: &[&dyn LanguageModel],
    config: &DecodeConfig,
) -> Result<Decoded, Box<DecodeFailure>> {
    run(prompt, models, config, Mode::BeamRound)
}

fn run(
    prompt: &str,
    models: &[&dyn LanguageModel],
    config: &DecodeConfig,
    mode: Mode,
) -> Result<Decoded, Box<DecodeFailure>> {
    let started = Instant::now();
    let mut trace = DecodeTrace {
        mode,
        ..DecodeTrace::default()
    };
    let mut output = String::new();

    let fail = |round: usize, error: Error, output: &str, trace: &DecodeTrace| {
        Box::new(DecodeFailure {
            round,
            error,
            output: output.to_string(),
            trace: trace.clone(),
        })
    };

    let mut config = config.clone();
    config.mode = mode;
    if let Err(e) = config.validate() {
        return Err(fail(0, e, &output, &trace));
    }
    if models.is_empty() {
        return Err(fail(0, Error::InvalidConfig("no models".into()), &output, &trace));
    }
    let mut ids: Vec<&str> = models.iter().map(|m| m.info().model_id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(fail(0, Error::InvalidConfig("duplicate model ids".into()), &output, &trace));
    }

    let metered: Vec<Metered<&dyn LanguageModel>> = models.iter().map(|&m| Metered::new(m)).collect();
    let mut prefix = Prefix::new(prompt);

    loop {
        if trace.totals.words >= config.max_new_words {
            trace.stop = Some(StopReason::MaxNewWords);
            break;
        }
        if output.chars().count() >= config.max_new_chars {
            trace.stop = Some(StopReason::MaxNewChars);
            break;
        }
        let index = trace.rounds.len();
        let budget = config.max_new_words - trace.totals.words;

        let round = play_round(&metered, &prefix, &config, budget, index);
        trace.totals.provider_forward_calls = metered.iter().map(Metered::topk_calls).sum();
        trace.totals.scoring_calls = metered.iter().map(Metered::score_calls).sum();
        trace.totals.wall_time_secs = started.elapsed().as_secs_f64();
        let round = match round {
            Ok(r) => r,
            Err(e) => return Err(fail(index, e, &output, &trace)),
        };

        let winner = round.winner().clone();
        prefix.push_str(&winner.span_text);
        output.push_str(&winner.span_text);
        trace.totals.words += winner.word_count;
        trace.totals.rounds += 1;
        trace.rounds.push(round);

        if winner.is_eos {
            trace.stop = Some(StopReason::Eos);
            break;
        }
        if config.stop_sequences.iter().any(|s| output.contains(s.as_str())) {
            trace.stop = Some(StopReason::StopSequence);
            break;
        }
    }
    trace.totals.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(Decoded { output, trace })
}

fn play_round(
    models: &[Metered<&dyn LanguageModel>],
    prefix: &Prefix,
    config: &DecodeConfig,
    budget: usize,
    index: usize,
) -> Result<RoundTrace> {
    let proposals = models
        .par_iter()
        .map(|m| {
            let model: &dyn LanguageModel = m;
            match config.mode {
                Mode::Adafuse => propose_adaptive(model, prefix, config, budget),
                Mode::FixedLength => propose_fixed(model, prefix, config, budget),
                Mode::BeamRound => propose_beam(model, prefix, config),
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let pool = fusion::pool(proposals.iter().map(|p| p.candidates.clone()))?;
    let selection = fusion::select(&pool, models, prefix)?;
    let winner = &pool[selection.winner];
    let diversified = match config.mode {
        Mode::BeamRound => true,
        _ => proposals.iter().any(|p| p.stop == RoundStop::Diversified),
    };
    Ok(RoundTrace {
        index,
        winner_text: winner.span_text.clone(),
        words_committed: winner.word_count,
        winner: selection.winner,
        scores: selection.scores,
        pool,
        proposals,
        diversified,
    })
}

struct SpanBuilder {
    model_id: String,
    text: String,
    words: usize,
    margins: Vec<f64>,
}

impl SpanBuilder {
    fn new(model: &dyn LanguageModel) -> Self {
        Self {
            model_id: model.info().model_id.clone(),
            text: String::new(),
            words: 0,
            margins: Vec::new(),
        }
    }

    fn commit(&mut self, word: &str) {
        if !word.is_empty() {
            self.text.push_str(word);
            self.words += 1;
        }
    }

    fn candidate(&self, branch: Option<usize>, is_eos: bool) -> SpanCandidate {
        SpanCandidate {
            span_text: self.text.clone(),
            word_count: self.words,
            origin: Origin {
                model_id: self.model_id.clone(),
                branch,
            },
            is_eos,
        }
    }

    fn finish(self, stop: RoundStop) -> ModelRound {
        let is_eos = stop == RoundStop::Eos;
        ModelRound {
            candidates: vec![self.candidate(None, is_eos)],
            model_id: self.model_id,
            margins: self.margins,
            stop,
        }
    }

    fn branch_out(self, words: Vec<(String, bool)>) -> ModelRound {
        let candidates = words
            .into_iter()
            .enumerate()
            .map(|(b, (word, is_eos))| {
                let mut c = self.candidate(Some(b), is_eos);
                if !word.is_empty() {
                    c.span_text.push_str(&word);
                    c.word_count += 1;
                }
                c
            })
            .collect();
        ModelRound {
            model_id: self.model_id,
            candidates,
            margins: self.margins,
            stop: RoundStop::Diversified,
        }
    }
}

fn propose_adaptive(
    model: &dyn LanguageModel,
    prefix: &Prefix,
    config: &DecodeConfig,
    budget: usize,
) -> Result<ModelRound> {
    let gate = GateConfig {
        max_words_per_round: config.max_words_per_round.min(budget),
        ..config.gate()
    };
    let opts = config.word_options();
    let mut span = SpanBuilder::new(model);

    loop {
        let context = encode_context(model, &joined(prefix, &span.text))?;
        let word = segmenter::complete_word(model, &context, None, None, &opts)?;

        let observed = commit::margin(&word.first_token_dist)?;
        span.margins.push(observed);
        // Gating on the next word's start: the round's first word is always
        // taken, and a later word is only taken if its own start is confident.
        let next_word = config.margin_source == MarginSource::NextWord;
        let gated = if next_word && span.words == 0 { 1.0 } else { observed };
        let decision = commit::decide(gated, span.words, &gate);

        if decision.verdict == Verdict::Diversify {
            let branches = diversity::explore_from(
                model,
                &context,
                word.first_token_dist.clone(),
                config.branching_factor,
                Some(word),
                &opts,
            )?;
            let words = branches
                .branches
                .into_iter()
                .map(|b| (b.word_text, b.terminal == Terminal::Eos))
                .collect();
            return Ok(span.branch_out(words));
        }

        if next_word && gated < gate.tau_delta {
            return Ok(span.finish(RoundStop::LowMargin));
        }
        span.commit(&word.word_text);
        if word.terminal == Terminal::Eos {
            return Ok(span.finish(RoundStop::Eos));
        }
        match decision.verdict {
            Verdict::CommitAndContinue if span.words < gate.max_words_per_round => {}
            Verdict::CommitAndContinue => return Ok(span.finish(RoundStop::WordCap)),
            _ if span.words >= gate.max_words_per_round => {
                return Ok(span.finish(RoundStop::WordCap))
            }
            _ => return Ok(span.finish(RoundStop::LowMargin)),
        }
    }
}

fn propose_fixed(
    model: &dyn LanguageModel,
    prefix: &Prefix,
    config: &DecodeConfig,
    budget: usize,
) -> Result<ModelRound> {
    let target = config.fixed_length.min(budget);
    let opts = config.word_options();
    let mut span = SpanBuilder::new(model);
    while span.words < target {
        let word = segmenter::gen_word(model, prefix, &span.text, None, &opts)?;
        span.commit(&word.word_text);
        if word.terminal == Terminal::Eos {
            return Ok(span.finish(RoundStop::Eos));
        }
    }
    Ok(span.finish(RoundStop::FixedLength))
}

#[derive(Debug, Clone)]
struct Beam {
    tokens: Vec<TokenId>,
    logprob: f64,
    finished: bool,
}

/// Token beams of fixed length starting at `context`, best first.
pub(crate) fn beam_search(
    model: &dyn LanguageModel,
    context: &[TokenId],
    width: usize,
    steps: usize,
) -> Result<Vec<(Vec<TokenId>, f64)>> {
    let eos = model.info().eos_token;
    let limit = model.info().max_context_tokens;
    let k = width.max(2);
    let mut beams = vec![Beam {
        tokens: Vec::new(),
        logprob: 0.0,
        finished: false,
    }];
    for _ in 0..steps {
        if beams.iter().all(|b| b.finished) {
            break;
        }
        let mut next = Vec::with_capacity(beams.len() * k);
        for beam in &beams {
            if beam.finished {
                next.push(beam.clone());
                continue;
            }
            let mut ctx = context.to_vec();
            ctx.extend_from_slice(&beam.tokens);
            if ctx.len() > limit {
                return Err(LmError::ContextOverflow {
                    tokens: ctx.len(),
                    limit,
                }
                .into());
            }
            for cand in model.topk(&ctx, k)?.entries {
                let mut tokens = beam.tokens.clone();
                tokens.push(cand.token);
                next.push(Beam {
                    tokens,
                    logprob: beam.logprob + cand.logprob,
                    finished: cand.token == eos,
                });
            }
        }
        // Stable: equal scores keep generation order.
        next.sort_by(|a, b| b.logprob.total_cmp(&a.logprob));
        next.truncate(width);
        beams = next;
    }
    Ok(beams.into_iter().map(|b| (b.tokens, b.logprob)).collect())
}

/// The first complete word of a decoded beam: `(word, ends_in_eos)`. A beam
/// that never reaches whitespace or end-of-sequence is cut at its end.
pub(crate) fn first_word(text: &str, hit_eos: bool) -> Option<(String, bool)> {
    let body = text.trim_start();
    if let Some(pos) = body.find(char::is_whitespace) {
        return Some((format!("{} ", &body[..pos]), false));
    }
    if hit_eos {
        return Some((body.to_string(), true));
    }
    (!body.is_empty()).then(|| (format!("{body} "), false))
}

fn propose_beam(model: &dyn LanguageModel, prefix: &Prefix, config: &DecodeConfig) -> Result<ModelRound> {
    let eos = model.info().eos_token;
    let context = encode_context(model, prefix.text())?;
    let beams = beam_search(model, &context, config.branching_factor, config.beam_round_tokens)?;
    let model_id = model.info().model_id.clone();
    let mut candidates = Vec::new();
    for (b, (tokens, _)) in beams.iter().enumerate() {
        let hit_eos = tokens.contains(&eos);
        let visible: Vec<TokenId> = tokens.iter().copied().take_while(|&t| t != eos).collect();
        let text = model.decode(&visible)?;
        if let Some((word, is_eos)) = first_word(&text, hit_eos) {
            candidates.push(SpanCandidate {
                word_count: usize::from(!word.is_empty()),
                span_text: word,
                origin: Origin {
                    model_id: model_id.clone(),
                    branch: Some(b),
                },
                is_eos,
            });
        }
    }
    if candidates.is_empty() {
        return Err(Error::EmptyWord);
    }
    Ok(ModelRound {
        model_id,
        candidates,
        margins: Vec::new(),
        stop: RoundStop::BeamRound,
    })
}
