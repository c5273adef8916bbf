//! Dataset records, metrics and experiment runners.
//!
//! Records are JSON lines `{id, prompt, references}`. Evaluated records keep
//! those fields and add `prediction`, `metrics`, `trace_summary` and, when the
//! decode failed, `error`.
//!
//! BLEU is corpus-level BLEU-4 over whitespace tokens with uniform weights,
//! clipped n-gram counts, no smoothing and the usual brevity penalty
//! `exp(1 - r/c)` when the candidate length `c` is below the closest
//! reference length `r`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{decode, decode_beam_round, decode_fixed, DecodeConfig, DecodeTrace, Mode};
use crate::lm::LanguageModel;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{predictions} predictions but {references} reference sets")]
    LengthMismatch { predictions: usize, references: usize },
    #[error("line {line}: {source}")]
    Record {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid {axis} value {value:?}: {reason}")]
    InvalidValue {
        axis: Axis,
        value: String,
        reason: String,
    },
    #[error("sweep needs at least one value")]
    NoValues,
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub prompt: String,
    #[serde(default)]
    pub references: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub rounds: usize,
    /// `words_per_round[i]` counts rounds that committed `i + 1` words.
    pub words_per_round: Vec<usize>,
    pub forward_calls: u64,
    pub scoring_calls: u64,
}

impl TraceSummary {
    pub fn from_trace(trace: &DecodeTrace) -> Self {
        let mut counts = Vec::new();
        for w in trace.words_per_round() {
            if counts.len() < w {
                counts.resize(w, 0);
            }
            counts[w - 1] += 1;
        }
        Self {
            rounds: trace.totals.rounds,
            words_per_round: counts,
            forward_calls: trace.totals.provider_forward_calls,
            scoring_calls: trace.totals.scoring_calls,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub id: String,
    pub prompt: String,
    pub references: Vec<String>,
    pub prediction: String,
    pub metrics: BTreeMap<String, f64>,
    pub trace_summary: Option<TraceSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    pub trace: Option<DecodeTrace>,
}

/// Parses JSON lines, skipping blank ones. A malformed line yields an `Err`
/// in its slot so callers can report it without dropping its neighbours.
pub fn read_records(reader: impl BufRead) -> io::Result<Vec<Result<EvalRecord, HarnessError>>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| HarnessError::Record { line: i + 1, source }),
        );
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(mut writer: impl Write, items: &[T]) -> Result<(), HarnessError> {
    for item in items {
        serde_json::to_writer(&mut writer, item)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Lowercases, trims, collapses whitespace runs to one space and drops
/// trailing terminal punctuation.
pub fn normalize_answer(text: &str) -> String {
    let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    collapsed
        .trim_end_matches(['.', '!', '?', ',', ';', ':'])
        .trim_end()
        .to_string()
}

pub fn exact_match(prediction: &str, references: &[String]) -> f64 {
    let p = normalize_answer(prediction);
    if p.is_empty() {
        return 0.0;
    }
    let hit = references.iter().any(|r| normalize_answer(r) == p);
    if hit {
        1.0
    } else {
        0.0
    }
}

fn ngrams(tokens: &[&str], n: usize) -> HashMap<Vec<String>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(|s| s.to_string()).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-4. Each prediction may have several references.
pub fn bleu(predictions: &[String], references: &[Vec<String>]) -> Result<f64, HarnessError> {
    if predictions.len() != references.len() {
        return Err(HarnessError::LengthMismatch {
            predictions: predictions.len(),
            references: references.len(),
        });
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (pred, refs) in predictions.iter().zip(references) {
        let p: Vec<&str> = pred.split_whitespace().collect();
        let rs: Vec<Vec<&str>> = refs.iter().map(|r| r.split_whitespace().collect()).collect();
        cand_len += p.len();
        ref_len += rs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(p.len()), l))
            .unwrap_or(0);
        for n in 1..=4 {
            let cand = ngrams(&p, n);
            let mut max_ref: HashMap<Vec<String>, usize> = HashMap::new();
            for r in &rs {
                for (g, c) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in &cand {
                matched[n - 1] += (*c).min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    if cand_len == 0 || matched.contains(&0) {
        return Ok(0.0);
    }
    let log_precision: f64 = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / 4.0;
    let brevity = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(brevity * log_precision.exp())
}

/// Percentage of word-committing rounds that committed `1..=max_words`
/// words. All zeros when no round committed anything.
pub fn words_per_round_histogram<'a>(
    traces: impl IntoIterator<Item = &'a DecodeTrace>,
    max_words: usize,
) -> Vec<f64> {
    let mut counts = vec![0usize; max_words];
    let mut total = 0usize;
    for trace in traces {
        for w in trace.words_per_round() {
            if (1..=max_words).contains(&w) {
                counts[w - 1] += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return vec![0.0; max_words];
    }
    counts
        .iter()
        .map(|&c| 100.0 * c as f64 / total as f64)
        .collect()
}

/// Truncates at the earliest stop sequence.
pub fn cut_at_stop(text: &str, stops: &[String]) -> String {
    let end = stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min()
        .unwrap_or(text.len());
    text[..end].to_string()
}

/// A question with its answer, used as a few-shot demonstration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub question: String,
    pub answer: String,
}

/// Joins up to `shots` exemplars and the question as
///
/// ```text
/// Q: <question>
/// A: <answer>
///
/// Q: <question>
/// A: 
/// ```
///
/// leaving the prompt open after `A: `.
pub fn few_shot_prompt(exemplars: &[Exemplar], shots: usize, question: &str) -> String {
    let mut prompt = String::new();
    for ex in exemplars.iter().take(shots) {
        prompt.push_str(&format!("Q: {}\nA: {}\n\n", ex.question, ex.answer));
    }
    prompt.push_str(&format!("Q: {question}\nA: "));
    prompt
}

pub fn read_exemplars(reader: impl BufRead) -> Result<Vec<Exemplar>, HarnessError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|source| HarnessError::Record { line: i + 1, source })?);
        }
    }
    Ok(out)
}

/// Decodes one record with the strategy selected by `config.mode`.
pub fn run_record(record: &EvalRecord, models: &[&dyn LanguageModel], config: &DecodeConfig) -> EvalOutput {
    let result = match config.mode {
        Mode::Adafuse => decode(&record.prompt, models, config),
        Mode::FixedLength => decode_fixed(&record.prompt, models, config),
        Mode::BeamRound => decode_beam_round(&record.prompt, models, config),
    };
    let (output, trace, error) = match result {
        Ok(d) => (d.output, d.trace, None),
        Err(f) => (f.output, f.trace, Some(f.error.to_string())),
    };
    let prediction = cut_at_stop(&output, &config.stop_sequences).trim().to_string();
    let mut metrics = BTreeMap::new();
    if !record.references.is_empty() {
        metrics.insert("exact_match".to_string(), exact_match(&prediction, &record.references));
    }
    EvalOutput {
        id: record.id.clone(),
        prompt: record.prompt.clone(),
        references: record.references.clone(),
        prediction,
        metrics,
        trace_summary: Some(TraceSummary::from_trace(&trace)),
        error,
        trace: Some(trace),
    }
}

/// Decodes every record in parallel, preserving input order.
pub fn evaluate(records: &[EvalRecord], models: &[&dyn LanguageModel], config: &DecodeConfig) -> Vec<EvalOutput> {
    records
        .par_iter()
        .map(|r| run_record(r, models, config))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    TauDelta,
    BranchingFactor,
    Mode,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::TauDelta => "tau_delta",
            Axis::BranchingFactor => "branching_factor",
            Axis::Mode => "mode",
        })
    }
}

impl FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "tau_delta" | "tau" => Ok(Axis::TauDelta),
            "branching_factor" | "b" | "B" => Ok(Axis::BranchingFactor),
            "mode" => Ok(Axis::Mode),
            other => Err(format!("unknown sweep axis {other:?}")),
        }
    }
}

impl Axis {
    /// The configuration for one cell.
    pub fn apply(self, base: &DecodeConfig, value: &str) -> Result<DecodeConfig, HarnessError> {
        let invalid = |reason: String| HarnessError::InvalidValue {
            axis: self,
            value: value.to_string(),
            reason,
        };
        let mut cfg = base.clone();
        match self {
            Axis::TauDelta => cfg.tau_delta = value.trim().parse().map_err(|e| invalid(format!("{e}")))?,
            Axis::BranchingFactor => {
                cfg.branching_factor = value.trim().parse().map_err(|e| invalid(format!("{e}")))?
            }
            Axis::Mode => {
                cfg.mode = serde_json::from_value(serde_json::Value::String(value.trim().to_string()))
                    .map_err(|e| invalid(e.to_string()))?
            }
        }
        cfg.validate().map_err(|e| invalid(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub items: usize,
    pub errors: usize,
    pub exact_match: Option<f64>,
    pub bleu: Option<f64>,
    pub rounds: usize,
    pub words: usize,
    pub mean_words_per_round: f64,
    /// Percentages for 1..=max_words_per_round words.
    pub words_per_round_pct: Vec<f64>,
    pub forward_calls: u64,
    pub diversified_rounds: usize,
    /// Mean pool size over diversified rounds.
    pub mean_distinct_candidates: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub value: String,
    pub config: Option<DecodeConfig>,
    pub summary: Option<CellSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    pub outputs: Vec<EvalOutput>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub axis: Axis,
    pub cells: Vec<SweepCell>,
}

pub fn summarize(outputs: &[EvalOutput], max_words: usize) -> CellSummary {
    let traces: Vec<&DecodeTrace> = outputs.iter().filter_map(|o| o.trace.as_ref()).collect();
    let scored: Vec<&EvalOutput> = outputs.iter().filter(|o| !o.references.is_empty()).collect();
    let exact_match = (!scored.is_empty()).then(|| {
        scored.iter().map(|o| exact_match(&o.prediction, &o.references)).sum::<f64>() / scored.len() as f64
    });
    let bleu_value = (!scored.is_empty())
        .then(|| {
            let preds: Vec<String> = scored.iter().map(|o| o.prediction.clone()).collect();
            let refs: Vec<Vec<String>> = scored.iter().map(|o| o.references.clone()).collect();
            bleu(&preds, &refs).ok()
        })
        .flatten();
    let committed: Vec<usize> = traces.iter().flat_map(|t| t.words_per_round()).collect();
    let diversified: Vec<usize> = traces
        .iter()
        .flat_map(|t| t.rounds.iter().filter(|r| r.diversified).map(|r| r.pool.len()))
        .collect();
    let mean = |v: &[usize]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<usize>() as f64 / v.len() as f64
        }
    };
    CellSummary {
        items: outputs.len(),
        errors: outputs.iter().filter(|o| o.error.is_some()).count(),
        exact_match,
        bleu: bleu_value,
        rounds: traces.iter().map(|t| t.totals.rounds).sum(),
        words: committed.iter().sum(),
        mean_words_per_round: mean(&committed),
        words_per_round_pct: words_per_round_histogram(traces.iter().copied(), max_words),
        forward_calls: traces.iter().map(|t| t.totals.provider_forward_calls).sum(),
        diversified_rounds: diversified.len(),
        mean_distinct_candidates: mean(&diversified),
    }
}

/// Evaluates `records` once per value of `axis`. A cell whose value is
/// invalid records the error and the sweep moves on.
pub fn run_sweep(
    records: &[EvalRecord],
    models: &[&dyn LanguageModel],
    base: &DecodeConfig,
    axis: Axis,
    values: &[String],
) -> Result<SweepReport, HarnessError> {
    if values.is_empty() {
        return Err(HarnessError::NoValues);
    }
    let cells = values
        .iter()
        .map(|value| match axis.apply(base, value) {
            Ok(cfg) => {
                let outputs = evaluate(records, models, &cfg);
                SweepCell {
                    value: value.clone(),
                    summary: Some(summarize(&outputs, cfg.max_words_per_round)),
                    config: Some(cfg),
                    error: None,
                    outputs,
                }
            }
            Err(e) => SweepCell {
                value: value.clone(),
                config: None,
                summary: None,
                error: Some(e.to_string()),
                outputs: Vec::new(),
            },
        })
        .collect();
    Ok(SweepReport { axis, cells })
}

impl SweepReport {
    pub fn to_json(&self) -> Result<String, HarnessError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per cell; suitable for plotting.
    pub fn write_csv(&self, writer: impl Write) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_writer(writer);
        let buckets = self
            .cells
            .iter()
            .filter_map(|c| c.summary.as_ref().map(|s| s.words_per_round_pct.len()))
            .max()
            .unwrap_or(0);
        let mut header: Vec<String> = [
            self.axis.to_string().as_str(),
            "items",
            "errors",
            "exact_match",
            "bleu",
            "rounds",
            "words",
            "mean_words_per_round",
            "forward_calls",
            "diversified_rounds",
            "mean_distinct_candidates",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend((1..=buckets).map(|i| format!("pct_{i}_words")));
        header.push("error".into());
        w.write_record(&header)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for cell in &self.cells {
            let mut row = vec![cell.value.clone()];
            match &cell.summary {
                Some(s) => {
                    row.extend([
                        s.items.to_string(),
                        s.errors.to_string(),
                        opt(s.exact_match),
                        opt(s.bleu),
                        s.rounds.to_string(),
                        s.words.to_string(),
                        s.mean_words_per_round.to_string(),
                        s.forward_calls.to_string(),
                        s.diversified_rounds.to_string(),
                        s.mean_distinct_candidates.to_string(),
                    ]);
                    row.extend((0..buckets).map(|i| {
                        s.words_per_round_pct.get(i).map(|p| p.to_string()).unwrap_or_default()
                    }));
                }
                None => row.extend(std::iter::repeat_n(String::new(), 10 + buckets)),
            }
            row.push(cell.error.clone().unwrap_or_default());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}
