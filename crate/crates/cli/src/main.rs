mod config;

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adafuse::harness::{self, Axis, EvalOutput, EvalRecord, HarnessError};
use adafuse::remote::{conformance, RemoteOptions};
use adafuse::{LanguageModel, Mode, NgramModel, TokenizerKind};
use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use config::{load_model, ModelKind, ModelSpec, RunConfig};

/// Confidence-gated word-level ensemble decoding.
#[derive(Debug, Parser)]
#[command(name = "adafuse", version)]
struct Cli {
    /// Worker threads (defaults to the number of CPUs).
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train an n-gram model on a text corpus, one document per line.
    Train(TrainArgs),
    /// Decode every prompt of a JSON-lines file.
    Decode(DecodeArgs),
    /// Score predictions against their references.
    Eval(EvalArgs),
    /// Decode a dataset once per value of a configuration axis.
    Sweep(SweepArgs),
    /// Run the protocol conformance checks against a model server.
    ServeCheck(ServeCheckArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 3)]
    order: usize,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = TokenizerKind::Char)]
    tokenizer: TokenizerKind,
    #[arg(long)]
    out: PathBuf,
    /// Model id stored in the file.
    #[arg(long)]
    id: Option<String>,
}

/// Settings shared by `decode` and `sweep`. Flags win over the config file,
/// which wins over built-in defaults.
#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// n-gram model file; repeat for an ensemble. Replaces the config's models.
    #[arg(long = "model", value_name = "PATH")]
    models: Vec<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    tau_delta: Option<f64>,
    #[arg(long)]
    max_words_per_round: Option<usize>,
    #[arg(long)]
    branching_factor: Option<usize>,
    #[arg(long, value_name = "BOOL")]
    diversity: Option<bool>,
    #[arg(long)]
    max_word_tokens: Option<usize>,
    #[arg(long)]
    max_new_words: Option<usize>,
    #[arg(long)]
    max_new_chars: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    fixed_length: Option<usize>,
    #[arg(long)]
    beam_round_tokens: Option<usize>,
    /// Stop sequence; repeat for several. Replaces the config's list.
    #[arg(long = "stop")]
    stop_sequences: Vec<String>,
    /// Print the effective configuration as TOML and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Adafuse,
    FixedLength,
    BeamRound,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Adafuse => Mode::Adafuse,
            ModeArg::FixedLength => Mode::FixedLength,
            ModeArg::BeamRound => Mode::BeamRound,
        }
    }
}

#[derive(Debug, Args)]
struct DecodeArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Write one `{id, trace}` line per record.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Metric {
    Em,
    Bleu,
    All,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// JSON lines with at least `prediction` and `references`.
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long, value_enum, default_value_t = Metric::All)]
    metric: Metric,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    axis: Axis,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    /// JSON report path (stdout when absent).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Plot-ready CSV table.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeCheckArgs {
    #[arg(long, env = "ADAFUSE_REMOTE_URL")]
    url: String,
    /// Sample text; repeat for several.
    #[arg(long = "probe")]
    probes: Vec<String>,
}

/// Failure classes mapped to exit codes 1 and 2.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

trait Classify<T> {
    fn usage(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }
    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global() {
            eprintln!("error: cannot size the worker pool: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Decode(a) => decode(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::ServeCheck(a) => serve_check(a),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn train(args: TrainArgs) -> Result<ExitCode, Failure> {
    let text = std::fs::read_to_string(&args.corpus)
        .with_context(|| format!("cannot read corpus {}", args.corpus.display()))
        .usage()?;
    let docs: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let mut model = NgramModel::train(&docs, args.order, args.alpha, args.tokenizer)
        .with_context(|| format!("cannot train on {}", args.corpus.display()))
        .usage()?;
    if let Some(id) = args.id {
        model = model.with_id(id);
    }
    model
        .save(&args.out)
        .with_context(|| format!("cannot write {}", args.out.display()))
        .runtime()?;
    Ok(ExitCode::SUCCESS)
}

/// Merges config file, flags and defaults.
fn effective_config(args: &RunArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path).usage()?,
        None => RunConfig {
            seed: 0,
            models: Vec::new(),
            decode: Default::default(),
            io: Default::default(),
        },
    };
    if !args.models.is_empty() {
        cfg.models = args
            .models
            .iter()
            .map(|p| ModelSpec {
                kind: ModelKind::Ngram,
                locator: p.to_string_lossy().into_owned(),
                tokenizer_kind: None,
            })
            .collect();
    }
    if let Some(p) = &args.input {
        cfg.io.input = Some(p.clone());
    }
    let d = &mut cfg.decode;
    macro_rules! set {
        ($($field:ident),*) => { $( if let Some(v) = args.$field { d.$field = v; } )* };
    }
    set!(tau_delta, max_words_per_round, branching_factor, max_word_tokens, max_new_words, max_new_chars, fixed_length, beam_round_tokens);
    if let Some(v) = args.diversity {
        d.diversity_enabled = v;
    }
    if let Some(m) = args.mode {
        d.mode = m.into();
    }
    if !args.stop_sequences.is_empty() {
        d.stop_sequences = args.stop_sequences.clone();
    }
    cfg.validate().usage()?;
    Ok(cfg)
}

fn print_config(cfg: &RunConfig) -> Result<ExitCode, Failure> {
    let text = toml::to_string(cfg).context("cannot render config").runtime()?;
    print!("{text}");
    Ok(ExitCode::SUCCESS)
}

fn models_for(cfg: &RunConfig) -> Result<Vec<Box<dyn LanguageModel>>, Failure> {
    cfg.models
        .iter()
        .map(|spec| {
            let loaded = load_model(spec);
            match spec.kind {
                ModelKind::Ngram => loaded.usage(),
                ModelKind::Remote => loaded.runtime(),
            }
        })
        .collect()
}

/// Well-formed records, plus error outputs standing in for malformed lines.
fn read_input(cfg: &RunConfig) -> Result<Vec<Result<EvalRecord, Box<EvalOutput>>>, Failure> {
    let path = cfg
        .io
        .input
        .as_ref()
        .ok_or_else(|| anyhow!("no input file given (--input or io.input)"))
        .usage()?;
    let file = File::open(path)
        .with_context(|| format!("cannot open input {}", path.display()))
        .usage()?;
    let records = harness::read_records(BufReader::new(file))
        .with_context(|| format!("cannot read input {}", path.display()))
        .usage()?;
    Ok(records
        .into_iter()
        .map(|r| {
            r.map_err(|e| {
                let id = match &e {
                    HarnessError::Record { line, .. } => format!("line-{line}"),
                    _ => "unknown".to_string(),
                };
                Box::new(EvalOutput {
                    id,
                    prompt: String::new(),
                    references: Vec::new(),
                    prediction: String::new(),
                    metrics: Default::default(),
                    trace_summary: None,
                    error: Some(e.to_string()),
                    trace: None,
                })
            })
        })
        .collect())
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .with_context(|| format!("cannot create {}", path.display()))
        .runtime()
}

fn decode(args: DecodeArgs) -> Result<ExitCode, Failure> {
    let mut cfg = effective_config(&args.run)?;
    if let Some(p) = &args.output {
        cfg.io.output = Some(p.clone());
    }
    if let Some(p) = &args.trace {
        cfg.io.trace = Some(p.clone());
    }
    if args.run.print_config {
        return print_config(&cfg);
    }
    let inputs = read_input(&cfg)?;
    let models = models_for(&cfg)?;
    let refs: Vec<&dyn LanguageModel> = models.iter().map(|m| m.as_ref()).collect();

    let records: Vec<EvalRecord> = inputs.iter().filter_map(|r| r.as_ref().ok().cloned()).collect();
    let mut decoded = harness::evaluate(&records, &refs, &cfg.decode).into_iter();
    let outputs: Vec<EvalOutput> = inputs
        .into_iter()
        .map(|r| match r {
            Ok(_) => decoded.next().expect("one output per record"),
            Err(failed) => *failed,
        })
        .collect();

    let sink: Box<dyn Write> = match &cfg.io.output {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    };
    harness::write_jsonl(sink, &outputs).runtime()?;

    if let Some(path) = &cfg.io.trace {
        #[derive(Serialize)]
        struct TraceLine<'a> {
            id: &'a str,
            trace: &'a adafuse::DecodeTrace,
        }
        let lines: Vec<TraceLine> = outputs
            .iter()
            .filter_map(|o| o.trace.as_ref().map(|trace| TraceLine { id: &o.id, trace }))
            .collect();
        harness::write_jsonl(create(path)?, &lines).runtime()?;
    }

    let failed = outputs.iter().filter(|o| o.error.is_some()).count();
    if failed > 0 {
        eprintln!("{failed} of {} records failed; see their error fields", outputs.len());
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Deserialize)]
struct Prediction {
    #[serde(default)]
    id: String,
    prediction: String,
    references: Vec<String>,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    items: usize,
    scored: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    exact_match: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bleu: Option<f64>,
}

fn eval(args: EvalArgs) -> Result<ExitCode, Failure> {
    let text = std::fs::read_to_string(&args.predictions)
        .with_context(|| format!("cannot read {}", args.predictions.display()))
        .usage()?;
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: Prediction = serde_json::from_str(line)
            .with_context(|| format!("{}:{}", args.predictions.display(), i + 1))
            .usage()?;
        items.push(p);
    }
    let scored: Vec<&Prediction> = items.iter().filter(|p| !p.references.is_empty()).collect();
    let em = || {
        if scored.is_empty() {
            return None;
        }
        let hits: f64 = scored
            .iter()
            .map(|p| harness::exact_match(&p.prediction, &p.references))
            .sum();
        Some(hits / scored.len() as f64)
    };
    let bleu = || -> Result<Option<f64>, Failure> {
        if scored.is_empty() {
            return Ok(None);
        }
        let preds: Vec<String> = scored.iter().map(|p| p.prediction.clone()).collect();
        let refs: Vec<Vec<String>> = scored.iter().map(|p| p.references.clone()).collect();
        harness::bleu(&preds, &refs).map(Some).runtime()
    };
    let report = EvalReport {
        items: items.len(),
        scored: scored.len(),
        exact_match: matches!(args.metric, Metric::Em | Metric::All).then(em).flatten(),
        bleu: match args.metric {
            Metric::Bleu | Metric::All => bleu()?,
            Metric::Em => None,
        },
    };
    if scored.len() < items.len() {
        let unscored: Vec<&str> = items
            .iter()
            .filter(|p| p.references.is_empty())
            .map(|p| p.id.as_str())
            .collect();
        eprintln!("skipped {} records without references: {}", unscored.len(), unscored.join(", "));
    }
    let json = serde_json::to_string_pretty(&report).runtime()? + "\n";
    match &args.output {
        Some(p) => std::fs::write(p, json)
            .with_context(|| format!("cannot write {}", p.display()))
            .runtime()?,
        None => print!("{json}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn sweep(args: SweepArgs) -> Result<ExitCode, Failure> {
    let cfg = effective_config(&args.run)?;
    if args.run.print_config {
        return print_config(&cfg);
    }
    let inputs = read_input(&cfg)?;
    let records: Vec<EvalRecord> = inputs
        .into_iter()
        .collect::<Result<_, _>>()
        .map_err(|bad| anyhow!("malformed input record: {}", bad.error.unwrap_or_default()))
        .usage()?;
    let models = models_for(&cfg)?;
    let refs: Vec<&dyn LanguageModel> = models.iter().map(|m| m.as_ref()).collect();
    let report = harness::run_sweep(&records, &refs, &cfg.decode, args.axis, &args.values).usage()?;

    let json = report.to_json().runtime()? + "\n";
    match &args.report {
        Some(p) => std::fs::write(p, json)
            .with_context(|| format!("cannot write {}", p.display()))
            .runtime()?,
        None => print!("{json}"),
    }
    if let Some(p) = &args.csv {
        report.write_csv(create(p)?).runtime()?;
    }
    let failed = report.cells.iter().filter(|c| c.error.is_some()).count();
    if failed > 0 {
        eprintln!("{failed} of {} sweep cells failed", report.cells.len());
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn serve_check(args: ServeCheckArgs) -> Result<ExitCode, Failure> {
    let probes: Vec<&str> = if args.probes.is_empty() {
        vec!["hello world", "the "]
    } else {
        args.probes.iter().map(String::as_str).collect()
    };
    let report = conformance::check(&args.url, None, &probes, RemoteOptions::default());
    for c in &report.checks {
        let status = if c.passed { "ok  " } else { "FAIL" };
        if c.detail.is_empty() {
            println!("{status} {}", c.name);
        } else {
            println!("{status} {}: {}", c.name, c.detail);
        }
    }
    if report.passed() {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(2))
    }
}
