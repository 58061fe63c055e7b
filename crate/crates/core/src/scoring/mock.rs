use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

use super::{
    BackendDescriptor, BackendKind, ContinuationScore, ScoreRequest, ScoringBackend, ScoringError, TokenScore,
};

/// Vocabulary size over which unlisted mass is spread when a table does not
/// declare one.
pub const DEFAULT_FALLBACK_VOCAB: u64 = 50_257;

const FALLBACK_DIRECTIVE: &str = "#fallback_vocab";

/// Conditional next-token probabilities keyed by the exact context text.
///
/// Mass not listed for a context is spread uniformly over `fallback_vocab`
/// unlisted tokens. Text not covered by a listed token is consumed one
/// whitespace-prefixed word at a time and scored with that fallback mass.
#[derive(Debug, Clone, PartialEq)]
pub struct MockTable {
    fallback_vocab: u64,
    // per context, tokens sorted longest first so greedy matching is stable
    rows: HashMap<String, Vec<(String, f64)>>,
}

impl MockTable {
    pub fn new(fallback_vocab: u64) -> Self {
        MockTable {
            fallback_vocab: fallback_vocab.max(1),
            rows: HashMap::new(),
        }
    }

    pub fn fallback_vocab(&self) -> u64 {
        self.fallback_vocab
    }

    pub fn insert(&mut self, context: &str, token: &str, probability: f64) -> Result<()> {
        if token.is_empty() {
            return Err(Error::Validation(format!(
                "empty token after context {context:?}"
            )));
        }
        if !(probability > 0.0 && probability <= 1.0) {
            return Err(Error::Validation(format!(
                "probability {probability} for {token:?} after {context:?} is outside (0, 1]"
            )));
        }
        let entries = self.rows.entry(context.to_string()).or_default();
        if entries.iter().any(|(t, _)| t == token) {
            return Err(Error::Validation(format!(
                "duplicate token {token:?} after context {context:?}"
            )));
        }
        let listed: f64 = entries.iter().map(|(_, p)| p).sum::<f64>() + probability;
        if listed > 1.0 + 1e-12 {
            return Err(Error::Validation(format!(
                "probabilities after context {context:?} sum to {listed} > 1"
            )));
        }
        entries.push((token.to_string(), probability));
        entries.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        Ok(())
    }

    /// Parses `context<TAB>token<TAB>probability` rows. A
    /// `#fallback_vocab<TAB>N` line sets the fallback vocabulary size; other
    /// lines starting with `#` and blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut table = MockTable::new(DEFAULT_FALLBACK_VOCAB);
        for (i, line) in text.lines().enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix(FALLBACK_DIRECTIVE) {
                let n: u64 = rest.trim().parse().map_err(|_| Error::Schema {
                    row: i + 1,
                    message: format!("bad fallback vocabulary size {:?}", rest.trim()),
                })?;
                if n == 0 {
                    return Err(Error::Schema {
                        row: i + 1,
                        message: "fallback vocabulary size must be positive".into(),
                    });
                }
                table.fallback_vocab = n;
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Schema {
                    row: i + 1,
                    message: format!("expected 3 tab-separated fields, found {}", fields.len()),
                });
            }
            let p: f64 = fields[2].trim().parse().map_err(|_| Error::Schema {
                row: i + 1,
                message: format!("bad probability {:?}", fields[2]),
            })?;
            table.insert(fields[0], fields[1], p).map_err(|e| Error::Schema {
                row: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(table)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("{FALLBACK_DIRECTIVE}\t{}\n", self.fallback_vocab);
        let mut contexts: Vec<&String> = self.rows.keys().collect();
        contexts.sort();
        for ctx in contexts {
            let mut entries = self.rows[ctx].clone();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            for (tok, p) in entries {
                let _ = writeln!(out, "{ctx}\t{tok}\t{p}");
            }
        }
        out
    }

    /// Picks the next token of `remaining` after `context` and returns it
    /// with its log-probability at `temperature`.
    fn next_token<'a>(
        &self,
        context: &str,
        remaining: &'a str,
        temperature: f64,
    ) -> std::result::Result<(&'a str, f64), ScoringError> {
        let entries = self.rows.get(context).map(Vec::as_slice).unwrap_or(&[]);
        let listed: f64 = entries.iter().map(|(_, p)| p).sum();
        let fallback_mass = (1.0 - listed).max(0.0);
        let vocab = self.fallback_vocab as f64;

        let (token, prob) = match entries.iter().find(|(t, _)| remaining.starts_with(t.as_str())) {
            Some((t, p)) => (&remaining[..t.len()], *p),
            None => {
                let token = fallback_chunk(remaining);
                if fallback_mass <= 1e-15 {
                    return Err(ScoringError::ZeroProbability {
                        context: context.to_string(),
                        token: token.to_string(),
                    });
                }
                (token, fallback_mass / vocab)
            }
        };

        if temperature == 1.0 {
            return Ok((token, prob.ln()));
        }
        // softmax(logits / τ) with logits = ln p; every unlisted token shares
        // the same logit
        let mut scaled: Vec<f64> = entries.iter().map(|(_, p)| p.ln() / temperature).collect();
        if fallback_mass > 1e-15 {
            scaled.push((fallback_mass / vocab).ln() / temperature + vocab.ln());
        }
        let log_z = super::log_sum_exp(&scaled);
        Ok((token, prob.ln() / temperature - log_z))
    }
}

/// One fallback token: optional leading whitespace plus the following run of
/// non-whitespace characters.
fn fallback_chunk(text: &str) -> &str {
    let ws_end = text
        .char_indices()
        .find(|(_, c)| !c.is_whitespace())
        .map_or(text.len(), |(i, _)| i);
    let word_end = text[ws_end..]
        .char_indices()
        .find(|(_, c)| c.is_whitespace())
        .map_or(text.len(), |(i, _)| ws_end + i);
    &text[..word_end]
}

/// Deterministic, stateless backend over a [`MockTable`].
#[derive(Debug, Clone)]
pub struct MockBackend {
    table: MockTable,
    descriptor: BackendDescriptor,
}

impl MockBackend {
    pub fn new(table: MockTable, model_label: impl Into<String>) -> Self {
        MockBackend {
            table,
            descriptor: BackendDescriptor {
                backend_kind: BackendKind::Mock,
                model_label: model_label.into(),
                supports_temperature: true,
                supports_full_logits: true,
                bos_convention: Some("none".into()),
            },
        }
    }

    pub fn table(&self) -> &MockTable {
        &self.table
    }
}

impl ScoringBackend for MockBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn score(&self, request: &ScoreRequest) -> std::result::Result<ContinuationScore, ScoringError> {
        super::validate_request(&self.descriptor, request)?;
        let mut context = request.prompt.clone();
        let mut remaining = request.continuation.as_str();
        let mut tokens = Vec::new();
        while !remaining.is_empty() {
            let (token, logprob) = self.table.next_token(&context, remaining, request.temperature)?;
            tokens.push(TokenScore {
                token_text: token.to_string(),
                logprob,
            });
            context.push_str(token);
            remaining = &remaining[token.len()..];
        }
        ContinuationScore::new(&request.prompt, &request.continuation, tokens)
    }
}
