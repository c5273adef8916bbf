//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::sync::Arc;
use std::time::{Duration, Instant};

use adafuse::diversity::explore_exploit;
use adafuse::harness::{bleu, exact_match, words_per_round_histogram};
use adafuse::remote::stub::StubServer;
use adafuse::remote::{conformance, RemoteLm, RemoteOptions};
use adafuse::segmenter::WordOptions;
use adafuse::{
    decode, decode_beam_round, decode_fixed, DecodeConfig, DecodeTrace, LanguageModel, Mode, NgramModel, Prefix,
    TokenizerKind,
};
use common::*;
use rand::Rng;

type Check = fn() -> Result<String, String>;
type Pairing<'a> = (Vec<&'a dyn LanguageModel>, Vec<&'a dyn LanguageModel>, Vec<String>);

fn main() {
    let criteria: [(&str, Check, Option<Duration>); 9] = [
        ("1 degenerate greedy equivalence", greedy_equivalence, Some(Duration::from_secs(5))),
        ("2 fusion oracle equivalence", fusion_equivalence, Some(Duration::from_secs(30))),
        ("3 diversity search oracle", diversity_oracle, Some(Duration::from_secs(30))),
        ("4 gate monotonicity sweep", gate_sweep, None),
        ("5 complementary ensemble improvement", complementary_ensemble, None),
        ("6 adaptive vs fixed behaviour", adaptive_vs_fixed, None),
        ("7 beam-round redundancy", beam_redundancy, None),
        ("8 metric correctness", metric_correctness, None),
        ("9 protocol conformance via stub", protocol_conformance, None),
    ];
    let mut failed = 0;
    for (name, check, limit) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let outcome = match (outcome, limit) {
            (Ok(_), Some(l)) if elapsed > l => Err(format!("took {elapsed:.2?}, limit {l:?}")),
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail} [{elapsed:.2?}]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail} [{elapsed:.2?}]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

const LETTERS_A: &[char] = &['a', 'b', 'c', 'd', 'e', 'i', 'k', 'l', 'n', 'o', 'r', 's', 't'];
const LETTERS_B: &[char] = &['a', 'e', 'g', 'h', 'i', 'm', 'n', 'o', 'p', 's', 'u', 'w', 'y'];

fn char_model(corpus: &[String], order: usize, alpha: f64, id: &str) -> (NgramModel, CharCounts) {
    let model = NgramModel::train(corpus, order, alpha, TokenizerKind::Char)
        .unwrap()
        .with_id(id);
    (model, CharCounts::new(corpus, order, alpha))
}

fn greedy_equivalence() -> Result<String, String> {
    let setups = [(11, LETTERS_A, 2, 0.5), (12, LETTERS_B, 3, 0.1), (13, LETTERS_A, 4, 0.05)];
    let cfg = DecodeConfig {
        tau_delta: 0.0,
        diversity_enabled: false,
        max_new_words: 12,
        max_word_tokens: 64,
        max_new_chars: 1 << 20,
        ..DecodeConfig::default()
    };
    let mut compared = 0;
    for (seed, letters, order, alpha) in setups {
        let mut rng = rng(seed);
        let corpus = random_corpus(&mut rng, letters, 60);
        let (model, oracle) = char_model(&corpus, order, alpha, &format!("m{seed}"));
        for i in 0..50 {
            let prompt = prompt_from(&mut rng, &corpus);
            let got = decode(&prompt, &[&model as &dyn LanguageModel], &cfg)
                .map_err(|e| format!("decode failed: {}", e.error))?
                .output;
            let want = greedy_decode(&oracle, &prompt, cfg.max_new_words, cfg.max_word_tokens);
            ensure(got == want, || {
                format!("order {order} prompt {i} {prompt:?}: engine {got:?} vs greedy {want:?}")
            })?;
            compared += 1;
        }
    }
    Ok(format!("{compared} decodes byte-identical to greedy"))
}

fn rel_close(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= 1e-9 * a.abs().max(b.abs())
}

fn fusion_equivalence() -> Result<String, String> {
    let mut rng = rng(21);
    let corpus_a = random_corpus(&mut rng, LETTERS_A, 80);
    let corpus_b = random_corpus(&mut rng, LETTERS_B, 80);
    let (ma, oa) = char_model(&corpus_a, 3, 0.1, "a");
    let (mb, ob) = char_model(&corpus_b, 4, 0.3, "b");
    let models: [&dyn LanguageModel; 2] = [&ma, &mb];
    let oracles = [oa, ob];
    let (mut rounds, mut penalized) = (0, 0);
    for i in 0..100 {
        let corpus = if i % 2 == 0 { &corpus_a } else { &corpus_b };
        let prompt = prompt_from(&mut rng, corpus);
        let cfg = DecodeConfig {
            tau_delta: [0.3, 0.7, 0.9][i % 3],
            diversity_enabled: i % 4 < 2,
            max_new_words: 10,
            ..DecodeConfig::default()
        };
        let decoded = decode(&prompt, &models, &cfg).map_err(|e| format!("decode {i} failed: {}", e.error))?;
        let mut prefix = prompt.clone();
        for round in &decoded.trace.rounds {
            let mut expected_pool: Vec<(String, bool)> = Vec::new();
            for p in &round.proposals {
                for c in &p.candidates {
                    let key = (c.span_text.clone(), c.is_eos);
                    if !expected_pool.contains(&key) {
                        expected_pool.push(key);
                    }
                }
            }
            let pool: Vec<(String, bool)> = round.pool.iter().map(|c| (c.span_text.clone(), c.is_eos)).collect();
            ensure(pool == expected_pool, || format!("decode {i} round {}: pool differs", round.index))?;
            let oracle = fusion_oracle(&oracles, &prefix, &pool);
            for (c, score) in round.scores.iter().enumerate() {
                for (m, ms) in score.per_model.iter().enumerate() {
                    let (nll, count, pen) = oracle.per_model[c][m];
                    penalized += pen as usize;
                    ensure(rel_close(ms.nll, nll) && ms.token_count == count && ms.penalized == pen, || {
                        format!(
                            "decode {i} round {} candidate {:?} model {}: nll {} vs oracle {nll}",
                            round.index, pool[c].0, ms.model_id, ms.nll
                        )
                    })?;
                }
            }
            ensure(round.winner == oracle.winner, || {
                format!(
                    "decode {i} round {}: winner {} vs oracle {} ({:?})",
                    round.index, round.winner, oracle.winner, oracle.fused
                )
            })?;
            prefix.push_str(&round.winner_text);
            rounds += 1;
        }
    }
    Ok(format!("{rounds} rounds over 100 decodes agree ({penalized} penalized scores)"))
}

fn diversity_oracle() -> Result<String, String> {
    let mut rng = rng(31);
    let letters = &LETTERS_A[..12];
    let corpus = random_corpus(&mut rng, letters, 60);
    let (model, oracle) = char_model(&corpus, 3, 0.2, "d");
    ensure(model.info().vocab_size <= 20, || format!("vocab {}", model.info().vocab_size))?;
    let opts = WordOptions {
        max_word_tokens: 4,
        topk: 2,
    };
    let alphabet: Vec<char> = oracle.chars.iter().copied().collect();
    for i in 0..100 {
        let prefix: String = if i % 2 == 0 {
            let doc = &corpus[rng.gen_range(0..corpus.len())];
            let cut = rng.gen_range(0..=doc.len());
            doc[..cut].to_string()
        } else {
            let len = rng.gen_range(0..8);
            (0..len).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect()
        };
        let b = rng.gen_range(1..=5);
        let set = explore_exploit(&model, &Prefix::new(prefix.clone()), "", b, &opts)
            .map_err(|e| format!("prefix {prefix:?}: {e}"))?;
        let want: Vec<_> = brute_force_branches(&oracle, &prefix, b, 4)
            .iter()
            .map(|p| sym_ids(&model, p))
            .collect();
        let got: Vec<_> = set.branches.iter().map(|br| br.token_path.clone()).collect();
        ensure(got == want, || format!("prefix {prefix:?} B={b}: {got:?} vs {want:?}"))?;
    }
    Ok("100 prefixes match brute-force token paths".into())
}

fn mean_words(traces: &[DecodeTrace]) -> f64 {
    let w: Vec<usize> = traces.iter().flat_map(|t| t.words_per_round()).collect();
    w.iter().sum::<usize>() as f64 / w.len() as f64
}

fn gate_sweep() -> Result<String, String> {
    let taus = [0.0, 0.3, 0.7, 0.9, 1.01];
    let g1 = gate_fixture("g1");
    let g2 = gate_fixture("g2");
    let models: [&dyn LanguageModel; 2] = [&g1, &g2];
    let mut means = Vec::new();
    for tau in taus {
        let cfg = DecodeConfig {
            tau_delta: tau,
            max_new_words: 24,
            ..DecodeConfig::default()
        };
        let traces = ["gh ", "ab ", "cd ", "ef "]
            .iter()
            .map(|p| decode(p, &models, &cfg).map(|d| d.trace))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.error.to_string())?;
        ensure(traces.iter().all(|t| t.totals.words == 24), || "EOS or clipping in gate fixture".into())?;
        means.push(mean_words(&traces));
    }
    ensure(means.windows(2).all(|w| w[0] >= w[1]), || format!("not monotone: {means:?}"))?;
    ensure(means[0] == 3.0 && means[4] == 1.0, || format!("endpoints {means:?}"))?;

    let mut rng = rng(41);
    let corpus = random_corpus(&mut rng, LETTERS_A, 60);
    let (ngram, _) = char_model(&corpus, 3, 0.1, "n");
    let prompts: Vec<String> = (0..20).map(|_| prompt_from(&mut rng, &corpus)).collect();
    let mut ngram_means = Vec::new();
    for tau in taus {
        let cfg = DecodeConfig {
            tau_delta: tau,
            max_new_words: 12,
            ..DecodeConfig::default()
        };
        let traces: Vec<DecodeTrace> = prompts
            .iter()
            .map(|p| decode(p, &[&ngram as &dyn LanguageModel], &cfg).map(|d| d.trace))
            .collect::<Result<_, _>>()
            .map_err(|e| e.error.to_string())?;
        ngram_means.push(mean_words(&traces));
    }
    ensure(ngram_means.windows(2).all(|w| w[0] >= w[1]), || {
        format!("n-gram sweep not monotone: {ngram_means:?}")
    })?;
    Ok(format!("fixture means {means:?}; n-gram means {ngram_means:.3?}"))
}

fn qa_em(models: &[&dyn LanguageModel], items: &[(String, String, bool)], cfg: &DecodeConfig) -> Vec<f64> {
    items
        .iter()
        .map(|(prompt, answer, _)| {
            let out = match cfg.mode {
                Mode::FixedLength => decode_fixed(prompt, models, cfg),
                _ => decode(prompt, models, cfg),
            };
            let prediction = out.map(|d| d.output).unwrap_or_else(|f| f.output);
            exact_match(&prediction, std::slice::from_ref(answer))
        })
        .collect()
}

fn qa_models(fx: &QaFixture) -> (NgramModel, NgramModel) {
    let a = NgramModel::train(&fx.corpus_a, 3, 0.1, TokenizerKind::Word).unwrap().with_id("expert-a");
    let b = NgramModel::train(&fx.corpus_b, 3, 0.1, TokenizerKind::Word).unwrap().with_id("expert-b");
    (a, b)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn complementary_ensemble() -> Result<String, String> {
    let cfg = DecodeConfig {
        max_new_words: 8,
        ..DecodeConfig::default()
    };
    let mut improved = 0;
    let mut notes = Vec::new();
    for seed in 0..10 {
        let fx = qa_fixture(500 + seed, 15);
        let (a, b) = qa_models(&fx);
        let em_a = qa_em(&[&a], &fx.items, &cfg);
        let em_b = qa_em(&[&b], &fx.items, &cfg);
        let em_f = qa_em(&[&a, &b], &fx.items, &cfg);
        let disagree: Vec<usize> = (0..fx.items.len()).filter(|&i| em_a[i] != em_b[i]).collect();
        let sub = |em: &[f64]| mean(&disagree.iter().map(|&i| em[i]).collect::<Vec<_>>());
        let ok = disagree.len() >= 20
            && mean(&em_f) >= mean(&em_a)
            && mean(&em_f) >= mean(&em_b)
            && sub(&em_f) > sub(&em_a)
            && sub(&em_f) > sub(&em_b);
        improved += ok as usize;
        notes.push(format!(
            "seed {seed}: EM a={:.2} b={:.2} fused={:.2} on {} disagreements",
            mean(&em_a),
            mean(&em_b),
            mean(&em_f),
            disagree.len()
        ));
    }
    ensure(improved >= 9, || format!("{improved}/10 seeds improved; {}", notes.join("; ")))?;
    Ok(format!("{improved}/10 seeds improved; {}", notes[0]))
}

fn adaptive_vs_fixed() -> Result<String, String> {
    let sentences = [
        "the quick brown fox jumps over the lazy dog",
        "pack my box with five dozen liquor jugs",
        "sphinx of black quartz judge my vow",
    ];
    let corpus: Vec<String> = sentences.iter().flat_map(|s| std::iter::repeat_n(s.to_string(), 5)).collect();
    let (low, _) = char_model(&corpus, 6, 0.01, "low");
    let prompts = ["the ", "pack my ", "sphinx ", "the quick brown ", "my box "];
    let mut traces = Vec::new();
    let (mut adaptive_rounds, mut fixed_rounds) = (0, 0);
    for p in prompts {
        let cfg = DecodeConfig {
            max_new_words: 12,
            ..DecodeConfig::default()
        };
        let fixed = DecodeConfig {
            mode: Mode::FixedLength,
            fixed_length: 1,
            ..cfg.clone()
        };
        let a = decode(p, &[&low as &dyn LanguageModel], &cfg).map_err(|e| e.error.to_string())?;
        let f = decode_fixed(p, &[&low as &dyn LanguageModel], &fixed).map_err(|e| e.error.to_string())?;
        adaptive_rounds += a.trace.totals.rounds;
        fixed_rounds += f.trace.totals.rounds;
        traces.push(a.trace);
    }
    ensure(2 * adaptive_rounds <= fixed_rounds, || {
        format!("low entropy: adaptive {adaptive_rounds} rounds vs fixed-1 {fixed_rounds}")
    })?;

    let cfg = DecodeConfig {
        max_new_words: 8,
        ..DecodeConfig::default()
    };
    let fixed3 = DecodeConfig {
        mode: Mode::FixedLength,
        fixed_length: 3,
        ..cfg.clone()
    };
    let (mut em_adaptive, mut em_fixed) = (Vec::new(), Vec::new());
    for seed in 0..3 {
        let mut fx = qa_fixture(900 + seed, 15);
        let mut r = rng(seed);
        let noise_a = random_corpus(&mut r, LETTERS_A, 40);
        let noise_b = random_corpus(&mut r, LETTERS_A, 40);
        fx.corpus_a.extend(noise_a);
        fx.corpus_b.extend(noise_b);
        let (a, b) = qa_models(&fx);
        let models: [&dyn LanguageModel; 2] = [&a, &b];
        em_adaptive.extend(qa_em(&models, &fx.items, &cfg));
        em_fixed.extend(qa_em(&models, &fx.items, &fixed3));
        for (p, _, _) in &fx.items {
            traces.push(decode(p, &models, &cfg).map_err(|e| e.error.to_string())?.trace);
        }
    }
    ensure(mean(&em_adaptive) >= mean(&em_fixed), || {
        format!("high entropy: adaptive EM {} < fixed-3 EM {}", mean(&em_adaptive), mean(&em_fixed))
    })?;
    let support_ok = traces.iter().flat_map(|t| t.words_per_round()).all(|w| (1..=3).contains(&w));
    ensure(support_ok, || "histogram support outside 1..=3".into())?;
    let hist = words_per_round_histogram(&traces, 3);
    ensure((hist.iter().sum::<f64>() - 100.0).abs() < 1e-9, || format!("histogram {hist:?}"))?;
    Ok(format!(
        "rounds {adaptive_rounds} vs {fixed_rounds}; EM {:.3} vs {:.3}; histogram {hist:.2?}",
        mean(&em_adaptive),
        mean(&em_fixed)
    ))
}

fn distinct_per_diversified_round(traces: &[DecodeTrace]) -> f64 {
    let sizes: Vec<usize> = traces
        .iter()
        .flat_map(|t| t.rounds.iter().filter(|r| r.diversified).map(|r| r.pool.len()))
        .collect();
    sizes.iter().sum::<usize>() as f64 / sizes.len().max(1) as f64
}

fn beam_redundancy() -> Result<String, String> {
    let s1 = shared_first_token_fixture("s1");
    let s2 = shared_first_token_fixture("s2");
    let models: [&dyn LanguageModel; 2] = [&s1, &s2];
    let cfg = DecodeConfig {
        diversity_enabled: true,
        branching_factor: 3,
        beam_round_tokens: 5,
        max_new_words: 10,
        ..DecodeConfig::default()
    };
    let ada = decode("the ", &models, &cfg).map_err(|e| e.error.to_string())?;
    let beam = decode_beam_round("the ", &models, &cfg).map_err(|e| e.error.to_string())?;
    let (a, b) = (
        distinct_per_diversified_round(&[ada.trace]),
        distinct_per_diversified_round(&[beam.trace]),
    );
    ensure(b < a, || format!("beam {b} vs adafuse {a}"))?;
    Ok(format!("distinct candidates per diversified round: beam {b:.3} < adafuse {a:.3}"))
}

fn metric_correctness() -> Result<String, String> {
    let preds = vec!["the cat sat on the mat".to_string(), "a dog ran".to_string()];
    let refs = vec![vec!["the cat sat on a mat".to_string()], vec!["a dog ran fast".to_string()]];
    // Clipped precisions 8/9, 5/7, 3/5, 1/3; lengths c=9, r=10.
    let expected = (1.0f64 - 10.0 / 9.0).exp() * ((8.0 / 9.0) * (5.0 / 7.0) * (3.0 / 5.0) * (1.0 / 3.0f64)).powf(0.25);
    let got = bleu(&preds, &refs).map_err(|e| e.to_string())?;
    ensure((got - expected).abs() <= 1e-6, || format!("BLEU {got} vs {expected}"))?;

    let table: [(&str, &[&str], f64); 10] = [
        ("Kelly Reno", &["kelly reno"], 1.0),
        ("Terrence", &["Kelly Reno"], 0.0),
        ("", &["anything"], 0.0),
        ("  Paris ", &["paris"], 1.0),
        ("New \t York", &["new york"], 1.0),
        ("London.", &["London"], 1.0),
        ("Really?!", &["really"], 1.0),
        ("42", &["41", "42"], 1.0),
        ("the Beatles", &["Beatles"], 0.0),
        ("U.S.", &["US"], 0.0),
    ];
    for (pred, r, want) in table {
        let r: Vec<String> = r.iter().map(|s| s.to_string()).collect();
        let got = exact_match(pred, &r);
        ensure(got == want, || format!("EM({pred:?}, {r:?}) = {got}, want {want}"))?;
    }
    Ok(format!("BLEU {got:.6}; 10 EM cases exact"))
}

fn protocol_conformance() -> Result<String, String> {
    let mut rng = rng(91);
    let corpus = random_corpus(&mut rng, LETTERS_A, 50);
    let (char_lm, _) = char_model(&corpus, 3, 0.1, "char");
    let word_lm = NgramModel::train(&corpus, 3, 0.1, TokenizerKind::Word).unwrap().with_id("word");
    let table = shared_first_token_fixture("table");
    let opts = RemoteOptions::default();
    let probe = prompt_from(&mut rng, &corpus);
    let stubs: Vec<(StubServer, Arc<dyn LanguageModel>, Vec<&str>)> = vec![
        (StubServer::start(Arc::new(char_lm.clone())).unwrap(), Arc::new(char_lm.clone()), vec![probe.as_str(), "a"]),
        (StubServer::start(Arc::new(word_lm.clone())).unwrap(), Arc::new(word_lm.clone()), vec![probe.as_str()]),
        (StubServer::start(Arc::new(table.clone())).unwrap(), Arc::new(table.clone()), vec!["the ", "the cat "]),
    ];
    let mut checks = 0;
    for (stub, reference, probes) in &stubs {
        let report = conformance::check(stub.url(), Some(reference.as_ref()), probes, opts.clone());
        let failures: Vec<String> = report.failures().map(|c| format!("{}: {}", c.name, c.detail)).collect();
        ensure(report.passed(), || format!("{}: {failures:?}", reference.info().model_id))?;
        checks += report.checks.len();
    }

    let remote: Vec<RemoteLm> = stubs
        .iter()
        .map(|(s, _, _)| RemoteLm::connect(s.url(), opts.clone()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let configs = [
        DecodeConfig::default(),
        DecodeConfig {
            diversity_enabled: true,
            ..DecodeConfig::default()
        },
        DecodeConfig {
            mode: Mode::FixedLength,
            fixed_length: 2,
            ..DecodeConfig::default()
        },
        DecodeConfig {
            mode: Mode::BeamRound,
            ..DecodeConfig::default()
        },
    ];
    let mut decodes = 0;
    let pairs: [Pairing; 2] = [
        (
            vec![&char_lm, &word_lm],
            vec![&remote[0], &remote[1]],
            (0..5).map(|_| prompt_from(&mut rng, &corpus)).collect(),
        ),
        (vec![&table], vec![&remote[2]], vec!["the ".to_string()]),
    ];
    for (direct, served, prompts) in &pairs {
        for cfg in &configs {
            let cfg = DecodeConfig {
                max_new_words: 10,
                ..cfg.clone()
            };
            for p in prompts {
                let run = |models: &[&dyn LanguageModel]| match cfg.mode {
                    Mode::Adafuse => decode(p, models, &cfg),
                    Mode::FixedLength => decode_fixed(p, models, &cfg),
                    Mode::BeamRound => decode_beam_round(p, models, &cfg),
                };
                let d = run(direct).map_err(|e| e.error.to_string())?;
                let s = run(served).map_err(|e| e.error.to_string())?;
                let winners = |t: &DecodeTrace| t.rounds.iter().map(|r| r.winner_text.clone()).collect::<Vec<_>>();
                ensure(d.output.as_bytes() == s.output.as_bytes() && winners(&d.trace) == winners(&s.trace), || {
                    format!("{:?} prompt {p:?}: direct {:?} vs stub {:?}", cfg.mode, d.output, s.output)
                })?;
                decodes += 1;
            }
        }
    }
    Ok(format!("{checks} conformance checks; {decodes} decodes identical through the stub"))
}
