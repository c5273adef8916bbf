//! Run configuration file (TOML).
//!
//! ```toml
//! seed = 0
//!
//! [[models]]
//! kind = "ngram"              # or "remote"
//! locator = "models/a.json"   # file path, or base URL for remote
//! tokenizer_kind = "char"     # optional; checked against the model file
//!
//! [decode]
//! tau_delta = 0.7
//!
//! [io]
//! input = "prompts.jsonl"
//! output = "out.jsonl"
//! trace = "trace.jsonl"
//! ```
//!
//! Relative paths are resolved against the directory holding the config
//! file. `ADAFUSE_MODEL_<i>` replaces the locator of the i-th model
//! (0-based).

use std::path::{Path, PathBuf};

use adafuse::remote::{RemoteLm, RemoteOptions};
use adafuse::{DecodeConfig, LanguageModel, NgramModel, TokenizerKind};
use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Ngram,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub locator: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokenizer_kind: Option<TokenizerKind>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default)]
    pub io: IoConfig,
}

pub const MODEL_ENV_PREFIX: &str = "ADAFUSE_MODEL_";

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.apply_env(|key| std::env::var(key).ok());
        cfg.resolve(base);
        Ok(cfg)
    }

    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        for (i, m) in self.models.iter_mut().enumerate() {
            if let Some(v) = lookup(&format!("{MODEL_ENV_PREFIX}{i}")) {
                m.locator = v;
            }
        }
    }

    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for m in &mut self.models {
            if m.kind == ModelKind::Ngram && Path::new(&m.locator).is_relative() {
                m.locator = base.join(&m.locator).to_string_lossy().into_owned();
            }
        }
        for p in [&mut self.io.input, &mut self.io.output, &mut self.io.trace]
            .into_iter()
            .flatten()
        {
            join(p);
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.models.is_empty() {
            bail!("config lists no models");
        }
        self.decode.validate()?;
        Ok(())
    }
}

/// Loads one configured model.
pub fn load_model(spec: &ModelSpec) -> anyhow::Result<Box<dyn LanguageModel>> {
    match spec.kind {
        ModelKind::Ngram => {
            let model =
                NgramModel::load(&spec.locator).with_context(|| format!("cannot load model {}", spec.locator))?;
            if let Some(kind) = spec.tokenizer_kind {
                if kind != model.tokenizer() {
                    bail!(
                        "{} uses the {} tokenizer but the config says {kind}",
                        spec.locator,
                        model.tokenizer()
                    );
                }
            }
            Ok(Box::new(model))
        }
        ModelKind::Remote => {
            let model = RemoteLm::connect(&spec.locator, RemoteOptions::default())
                .with_context(|| format!("cannot reach model server {}", spec.locator))?;
            Ok(Box::new(model))
        }
    }
}
