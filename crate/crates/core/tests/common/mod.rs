//! Independent reference implementations used as test oracles. Nothing here
//! calls into the decoding library except to map characters to token ids.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};

use adafuse::fixture::TableLm;
use adafuse::{NgramModel, TokenId};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A character-level symbol: start padding, end of sequence, or a character.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Sym {
    Bos,
    Eos,
    Ch(char),
}

/// Laplace-smoothed character n-gram recounted from raw text.
pub struct CharCounts {
    pub order: usize,
    pub alpha: f64,
    pub chars: BTreeSet<char>,
    pairs: HashMap<(Vec<Sym>, Sym), u64>,
    totals: HashMap<Vec<Sym>, u64>,
}

impl CharCounts {
    pub fn new(corpus: &[String], order: usize, alpha: f64) -> Self {
        let mut pairs = HashMap::new();
        let mut totals = HashMap::new();
        let mut chars = BTreeSet::new();
        for doc in corpus {
            let mut seq = vec![Sym::Bos; order - 1];
            for c in doc.chars() {
                chars.insert(c);
                seq.push(Sym::Ch(c));
            }
            seq.push(Sym::Eos);
            for i in order - 1..seq.len() {
                let ctx = seq[i + 1 - order..i].to_vec();
                *pairs.entry((ctx.clone(), seq[i])).or_insert(0) += 1;
                *totals.entry(ctx).or_insert(0) += 1;
            }
        }
        Self {
            order,
            alpha,
            chars,
            pairs,
            totals,
        }
    }

    /// Everything the model can emit, in token id order.
    pub fn outcomes(&self) -> Vec<Sym> {
        std::iter::once(Sym::Eos)
            .chain(self.chars.iter().map(|&c| Sym::Ch(c)))
            .collect()
    }

    fn key(&self, history: &[Sym]) -> Vec<Sym> {
        let want = self.order - 1;
        let take = want.min(history.len());
        let mut key = vec![Sym::Bos; want - take];
        key.extend_from_slice(&history[history.len() - take..]);
        key
    }

    pub fn count(&self, history: &[Sym], next: Sym) -> u64 {
        self.pairs
            .get(&(self.key(history), next))
            .copied()
            .unwrap_or(0)
    }

    pub fn prob(&self, history: &[Sym], next: Sym) -> f64 {
        let total = self.totals.get(&self.key(history)).copied().unwrap_or(0);
        let v = (self.chars.len() + 1) as f64;
        (self.count(history, next) as f64 + self.alpha) / (total as f64 + self.alpha * v)
    }

    /// Most frequent next symbol; ties go to end-of-sequence, then the
    /// smallest character.
    pub fn argmax(&self, history: &[Sym]) -> Sym {
        let mut best = Sym::Eos;
        let mut best_count = self.count(history, Sym::Eos);
        for &c in &self.chars {
            let n = self.count(history, Sym::Ch(c));
            if n > best_count {
                best = Sym::Ch(c);
                best_count = n;
            }
        }
        best
    }

    /// Outcomes ranked by count, ties in id order.
    pub fn ranked(&self, history: &[Sym]) -> Vec<Sym> {
        let mut all = self.outcomes();
        all.sort_by_key(|&s| std::cmp::Reverse(self.count(history, s)));
        all
    }

    pub fn knows(&self, text: &str) -> bool {
        text.chars().all(|c| self.chars.contains(&c))
    }
}

pub fn syms(text: &str) -> Vec<Sym> {
    text.chars().map(Sym::Ch).collect()
}

pub fn text_of(path: &[Sym]) -> String {
    path.iter()
        .filter_map(|s| match s {
            Sym::Ch(c) => Some(*c),
            _ => None,
        })
        .collect()
}

/// Plain token-by-token greedy decoding that stops after `max_words`
/// whitespace-terminated words or at end of sequence.
pub fn greedy_decode(model: &CharCounts, prompt: &str, max_words: usize, word_cap: usize) -> String {
    let mut history = syms(prompt);
    let mut out = String::new();
    let mut word = String::new();
    let mut word_tokens = 0;
    let mut words = 0;
    while words < max_words {
        let next = model.argmax(&history);
        history.push(next);
        word_tokens += 1;
        match next {
            Sym::Eos => {
                out.push_str(&word);
                break;
            }
            Sym::Ch(c) if c.is_whitespace() => {
                if !word.is_empty() {
                    out.push_str(&word);
                    out.push(' ');
                    word.clear();
                    word_tokens = 0;
                    words += 1;
                    continue;
                }
            }
            Sym::Ch(c) => word.push(c),
            Sym::Bos => unreachable!("padding is never predicted"),
        }
        if word_tokens == word_cap {
            assert!(!word.is_empty(), "greedy oracle produced an empty capped word");
            out.push_str(&word);
            out.push(' ');
            word.clear();
            word_tokens = 0;
            words += 1;
        }
    }
    out
}

/// Unscorable continuations cost `-ln(1e-9)` over one token.
pub const PENALTY_NLL: f64 = 20.723265836946414;

/// Normalized NLL of `span` (plus end of sequence when `eos`) after `prefix`.
/// Returns `(nll, token_count, penalized)`. Text containing a character the
/// model has never seen cannot be reproduced by it and takes the penalty.
pub fn span_nll(model: &CharCounts, prefix: &str, span: &str, eos: bool) -> (f64, usize, bool) {
    if !model.knows(prefix) || !model.knows(span) {
        return (-(1e-9f64).ln(), 1, true);
    }
    let mut history = syms(prefix);
    let mut cont = syms(span);
    if eos {
        cont.push(Sym::Eos);
    }
    let mut total = 0.0;
    for s in &cont {
        total += model.prob(&history, *s).ln();
        history.push(*s);
    }
    (-total / cont.len() as f64, cont.len(), false)
}

pub struct FusionOracle {
    pub per_model: Vec<Vec<(f64, usize, bool)>>,
    pub fused: Vec<f64>,
    pub winner: usize,
}

/// Recomputes every fused score and the argmin, earliest candidate on ties.
pub fn fusion_oracle(models: &[CharCounts], prefix: &str, pool: &[(String, bool)]) -> FusionOracle {
    let per_model: Vec<Vec<(f64, usize, bool)>> = pool
        .iter()
        .map(|(text, eos)| models.iter().map(|m| span_nll(m, prefix, text, *eos)).collect())
        .collect();
    let fused: Vec<f64> = per_model
        .iter()
        .map(|scores| {
            if scores.iter().all(|s| s.2) {
                f64::INFINITY
            } else {
                scores.iter().map(|s| s.0).sum::<f64>() / scores.len() as f64
            }
        })
        .collect();
    let mut winner = 0;
    for i in 1..fused.len() {
        let best = fused[winner];
        let better = if best.is_infinite() {
            fused[i] < best
        } else {
            fused[i] < best - 1e-12 * best.abs().max(1.0)
        };
        if better {
            winner = i;
        }
    }
    FusionOracle {
        per_model,
        fused,
        winner,
    }
}

/// Enumerates the `b` best distinct first symbols and completes each by
/// stepwise argmax, stopping at whitespace after word content, end of
/// sequence, or `cap` symbols.
pub fn brute_force_branches(model: &CharCounts, prefix: &str, b: usize, cap: usize) -> Vec<Vec<Sym>> {
    let history = syms(prefix);
    model
        .ranked(&history)
        .into_iter()
        .take(b)
        .map(|first| {
            let mut h = history.clone();
            let mut path = vec![first];
            h.push(first);
            loop {
                let last = *path.last().unwrap();
                if last == Sym::Eos || path.len() == cap {
                    break;
                }
                let body = text_of(&path);
                if body.trim_start().contains(char::is_whitespace) {
                    break;
                }
                let next = model.argmax(&h);
                path.push(next);
                h.push(next);
            }
            path
        })
        .collect()
}

pub fn sym_ids(model: &NgramModel, path: &[Sym]) -> Vec<TokenId> {
    path.iter()
        .map(|s| match s {
            Sym::Eos => TokenId(0),
            Sym::Ch(c) => model.vocab().id(&c.to_string()).expect("oracle char in vocab"),
            Sym::Bos => TokenId(1),
        })
        .collect()
}

/// Single-spaced sentences of random pseudo-words over `letters`.
pub fn random_corpus(rng: &mut ChaCha8Rng, letters: &[char], docs: usize) -> Vec<String> {
    let lexicon: Vec<String> = (0..12)
        .map(|_| {
            let len = rng.gen_range(2..=5);
            (0..len).map(|_| *letters.choose(rng).unwrap()).collect()
        })
        .collect();
    (0..docs)
        .map(|_| {
            let n = rng.gen_range(3..=8);
            (0..n)
                .map(|_| lexicon.choose(rng).unwrap().as_str())
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

/// A prompt made of the first few words of a corpus line, ending in a space.
pub fn prompt_from(rng: &mut ChaCha8Rng, corpus: &[String]) -> String {
    let doc = corpus.choose(rng).unwrap();
    let words: Vec<&str> = doc.split(' ').collect();
    let n = rng.gen_range(1..=words.len().min(3));
    format!("{} ", words[..n].join(" "))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Synthetic QA corpus split between two experts.
pub struct QaFixture {
    pub corpus_a: Vec<String>,
    pub corpus_b: Vec<String>,
    /// `(prompt, answer, known_by_a)`.
    pub items: Vec<(String, String, bool)>,
}

fn pseudo_word(rng: &mut ChaCha8Rng, taken: &mut BTreeSet<String>) -> String {
    const ONSETS: &[&str] = &["b", "d", "k", "l", "m", "n", "r", "s", "t", "v", "z", "dr", "kl", "st"];
    const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];
    loop {
        let syllables = rng.gen_range(2..=3);
        let w: String = (0..syllables)
            .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap()))
            .collect();
        if taken.insert(w.clone()) {
            return w;
        }
    }
}

/// `facts` question/answer pairs per expert. Each expert sees its own facts
/// plus every entity and answer word as a standalone document, so both
/// share a vocabulary but only one knows each association.
pub fn qa_fixture(seed: u64, facts: usize) -> QaFixture {
    const TEMPLATES: &[&str] = &["capital of", "river of", "founder of", "anthem of"];
    let mut rng = rng(seed);
    let mut taken = BTreeSet::new();
    let mut items = Vec::new();
    let mut lexicon = Vec::new();
    for i in 0..2 * facts {
        let template = TEMPLATES.choose(&mut rng).unwrap();
        let entity = pseudo_word(&mut rng, &mut taken);
        let answer_words = rng.gen_range(1..=2);
        let answer: Vec<String> = (0..answer_words).map(|_| pseudo_word(&mut rng, &mut taken)).collect();
        lexicon.push(entity.clone());
        lexicon.extend(answer.iter().cloned());
        items.push((format!("{template} {entity} "), answer.join(" "), i % 2 == 0));
    }
    let facts_of = |a: bool| -> Vec<String> {
        items
            .iter()
            .filter(|it| it.2 == a)
            .map(|(p, ans, _)| format!("{p}{ans}"))
            .chain(lexicon.iter().cloned())
            .collect()
    };
    QaFixture {
        corpus_a: facts_of(true),
        corpus_b: facts_of(false),
        items,
    }
}

/// Word starts whose first-token margins cycle through 0.2, 0.5, 0.8 and
/// 0.95. No end-of-sequence is ever likely.
pub fn gate_fixture(id: &str) -> TableLm {
    let start = |p: f64, first: &'static str| vec![(first, p), ("z", 1.0 - p)];
    TableLm::new(
        id,
        [
            ("h ", start(0.6, "a")),
            ("b ", start(0.75, "c")),
            ("d ", start(0.9, "e")),
            ("f ", start(0.975, "g")),
            ("a", vec![("b", 1.0)]),
            ("ab", vec![(" ", 1.0)]),
            ("c", vec![("d", 1.0)]),
            ("cd", vec![(" ", 1.0)]),
            ("e", vec![("f", 1.0)]),
            ("ef", vec![(" ", 1.0)]),
            ("g", vec![("h", 1.0)]),
            ("gh", vec![(" ", 1.0)]),
            ("z", vec![("z", 0.5), (" ", 0.5)]),
        ],
    )
    .unwrap()
}

/// After "the ", three distinct starters, of which "cat " is the most likely
/// and is followed by a confident three-way split; beams of five tokens all
/// begin with "cat ".
pub fn shared_first_token_fixture(id: &str) -> TableLm {
    let ten: Vec<(&str, f64)> = ["d", "e", "f", "g", "h", "i", "j", "k", "l", "m"]
        .iter()
        .map(|s| (*s, 0.1))
        .collect();
    TableLm::new(
        id,
        [
            ("the ", vec![("c", 0.5), ("b", 0.3), ("r", 0.2)]),
            ("the c", vec![("a", 1.0)]),
            ("the b", vec![("a", 1.0)]),
            ("the r", vec![("a", 1.0)]),
            ("ca", vec![("t", 1.0)]),
            ("ba", vec![("t", 1.0)]),
            ("ra", vec![("t", 1.0)]),
            ("at", vec![(" ", 1.0)]),
            ("cat ", vec![("a", 0.4), ("b", 0.35), ("c", 0.25)]),
            ("bat ", ten.clone()),
            ("rat ", ten),
            ("cat a", vec![("x", 1.0)]),
            ("cat b", vec![("x", 1.0)]),
            ("cat c", vec![("x", 1.0)]),
            ("x", vec![(" ", 1.0)]),
            ("x ", vec![("</s>", 1.0)]),
            ("", vec![("</s>", 1.0)]),
        ],
    )
    .unwrap()
}
