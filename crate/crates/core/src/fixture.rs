//! Table-driven language model for constructing exact test scenarios.
//!
//! Rows map a context string to an explicit next-token distribution. A query
//! uses the row of the longest key that is a suffix of the decoded context, so
//! the key `""` acts as a fallback. Surfaces may span several characters;
//! encoding is greedy longest-match.

use std::collections::{BTreeSet, HashMap};

use crate::lm::{LanguageModel, LmError, ModelInfo, TokenCandidate, TokenDistribution, TokenId};

/// Logprob reported when scoring a token outside a row's support.
pub const LOGPROB_FLOOR: f64 = -1.0e4;

pub const EOS_SURFACE: &str = "</s>";
const EOS: TokenId = TokenId(0);

#[derive(Debug, Clone)]
pub struct TableLm {
    info: ModelInfo,
    surfaces: Vec<String>,
    index: HashMap<String, TokenId>,
    longest_surface: usize,
    rows: HashMap<String, Vec<(TokenId, f64)>>,
}

impl TableLm {
    /// Builds a model from `(context, [(surface, probability)])` rows. Each
    /// row's probabilities must sum to one. Use [`EOS_SURFACE`] for
    /// end-of-sequence.
    pub fn new<C, S>(
        model_id: impl Into<String>,
        rows: impl IntoIterator<Item = (C, Vec<(S, f64)>)>,
    ) -> Result<Self, String>
    where
        C: Into<String>,
        S: Into<String>,
    {
        let rows: Vec<(String, Vec<(String, f64)>)> = rows
            .into_iter()
            .map(|(c, d)| (c.into(), d.into_iter().map(|(s, p)| (s.into(), p)).collect()))
            .collect();

        let mut set = BTreeSet::new();
        for (ctx, dist) in &rows {
            set.extend(ctx.chars().map(String::from));
            for (s, _) in dist {
                if s.is_empty() {
                    return Err("empty surface".into());
                }
                if s != EOS_SURFACE {
                    set.insert(s.clone());
                }
            }
        }
        let mut surfaces = vec![EOS_SURFACE.to_string()];
        surfaces.extend(set);
        let index: HashMap<String, TokenId> = surfaces
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, s)| (s.clone(), TokenId(i as u32)))
            .collect();
        let longest_surface = surfaces.iter().skip(1).map(|s| s.chars().count()).max().unwrap_or(1);

        let mut table = HashMap::new();
        for (ctx, dist) in rows {
            let mut total = 0.0;
            let mut entries = Vec::with_capacity(dist.len());
            for (s, p) in dist {
                if !(p > 0.0 && p <= 1.0) {
                    return Err(format!("probability {p} for {s:?} after {ctx:?} out of (0, 1]"));
                }
                total += p;
                let id = if s == EOS_SURFACE { EOS } else { index[&s] };
                if entries.iter().any(|&(t, _)| t == id) {
                    return Err(format!("surface {s:?} repeated after {ctx:?}"));
                }
                entries.push((id, p.ln()));
            }
            if (total - 1.0).abs() > 1e-9 {
                return Err(format!("row {ctx:?} sums to {total}"));
            }
            entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            if table.insert(ctx.clone(), entries).is_some() {
                return Err(format!("duplicate row {ctx:?}"));
            }
        }

        Ok(Self {
            info: ModelInfo {
                model_id: model_id.into(),
                eos_token: EOS,
                eos_surface: EOS_SURFACE.to_string(),
                vocab_size: surfaces.len(),
                max_context_tokens: usize::MAX,
            },
            surfaces,
            index,
            longest_surface,
            rows: table,
        })
    }

    /// Probability-one transitions: `context -> next surface`.
    pub fn deterministic(model_id: impl Into<String>, transitions: &[(&str, &str)]) -> Self {
        Self::new(
            model_id,
            transitions.iter().map(|&(c, s)| (c, vec![(s, 1.0)])),
        )
        .expect("deterministic transitions are well formed")
    }

    /// Uniform over `surfaces` after any context.
    pub fn uniform(model_id: impl Into<String>, surfaces: &[&str]) -> Self {
        let p = 1.0 / surfaces.len() as f64;
        Self::new(model_id, [("", surfaces.iter().map(|&s| (s, p)).collect())])
            .expect("uniform row is well formed")
    }

    pub fn with_max_context(mut self, tokens: usize) -> Self {
        self.info.max_context_tokens = tokens;
        self
    }

    pub fn id(&self, surface: &str) -> Option<TokenId> {
        if surface == EOS_SURFACE {
            Some(EOS)
        } else {
            self.index.get(surface).copied()
        }
    }

    fn row(&self, context: &[TokenId]) -> Result<&[(TokenId, f64)], LmError> {
        let text = self.decode(context)?;
        let mut starts: Vec<usize> = text.char_indices().map(|(i, _)| i).collect();
        starts.push(text.len());
        for start in starts {
            if let Some(row) = self.rows.get(&text[start..]) {
                return Ok(row);
            }
        }
        Err(LmError::UnreachableContext(text))
    }

    fn check(&self, t: TokenId) -> Result<(), LmError> {
        if t.index() >= self.surfaces.len() {
            Err(LmError::InvalidToken {
                id: t.0,
                vocab_size: self.surfaces.len(),
            })
        } else {
            Ok(())
        }
    }
}

impl LanguageModel for TableLm {
    fn info(&self) -> &ModelInfo {
        &self.info
    }

    fn encode(&self, text: &str) -> Result<Vec<TokenId>, LmError> {
        let mut out = Vec::new();
        let mut rest = text;
        'outer: while !rest.is_empty() {
            let ends: Vec<usize> = rest
                .char_indices()
                .map(|(i, c)| i + c.len_utf8())
                .take(self.longest_surface)
                .collect();
            for &end in ends.iter().rev() {
                if let Some(&id) = self.index.get(&rest[..end]) {
                    out.push(id);
                    rest = &rest[end..];
                    continue 'outer;
                }
            }
            return Err(LmError::EncodingMismatch(format!(
                "{:?} has no surface in {}",
                rest.chars().next().unwrap_or_default(),
                self.info.model_id
            )));
        }
        Ok(out)
    }

    fn decode(&self, tokens: &[TokenId]) -> Result<String, LmError> {
        let mut out = String::new();
        for &t in tokens {
            self.check(t)?;
            if t != EOS {
                out.push_str(&self.surfaces[t.index()]);
            }
        }
        Ok(out)
    }

    fn topk(&self, context: &[TokenId], k: usize) -> Result<TokenDistribution, LmError> {
        let row = self.row(context)?;
        let entries = row
            .iter()
            .take(k)
            .map(|&(token, logprob)| TokenCandidate {
                token,
                logprob,
                surface: self.surfaces[token.index()].clone(),
            })
            .collect();
        Ok(TokenDistribution::from_candidates(entries, k, row.len()))
    }

    fn score(&self, prefix: &[TokenId], continuation: &[TokenId]) -> Result<Vec<f64>, LmError> {
        let mut history = prefix.to_vec();
        let mut out = Vec::with_capacity(continuation.len());
        for &t in continuation {
            self.check(t)?;
            let row = self.row(&history)?;
            let lp = row
                .iter()
                .find(|&&(id, _)| id == t)
                .map_or(LOGPROB_FLOOR, |&(_, lp)| lp);
            out.push(lp);
            history.push(t);
        }
        Ok(out)
    }
}
