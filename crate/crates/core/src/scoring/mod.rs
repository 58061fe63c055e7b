//! Token-level scoring of continuations and the per-prompt country
//! distribution built from it.
//!
//! A [`ScoringBackend`] maps `(prompt, continuation, temperature)` to the
//! natural-log probabilities of the continuation's tokens. Two backends ship
//! with the crate: the table-driven [`MockBackend`] and the HTTP
//! [`WireClient`].

mod mock;
pub mod wire;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distributions::{CandidateSet, ProbDist};
use crate::error::{Error, Result};

pub use mock::{MockBackend, MockTable, DEFAULT_FALLBACK_VOCAB};
pub use wire::{WireClient, WireClientConfig, BACKEND_URL_ENV};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScoringError {
    /// Network-level failure; safe to retry.
    #[error("transport error: {0}")]
    Transport(String),
    #[error("capability error: {0}")]
    Capability(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    /// The backend assigns probability 0 to a token of the continuation.
    #[error("token {token:?} has zero probability after {context:?}")]
    ZeroProbability { context: String, token: String },
    #[error("backend error: {0}")]
    Backend(String),
}

impl ScoringError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ScoringError::Transport(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub token_text: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuationScore {
    pub prompt: String,
    pub continuation: String,
    pub token_scores: Vec<TokenScore>,
    pub total_logprob: f64,
}

impl ContinuationScore {
    /// Chain rule: the total is the sum of the token log-probabilities.
    pub fn new(
        prompt: impl Into<String>,
        continuation: impl Into<String>,
        token_scores: Vec<TokenScore>,
    ) -> std::result::Result<Self, ScoringError> {
        if token_scores.is_empty() {
            return Err(ScoringError::Backend("no token scores returned".into()));
        }
        if let Some(t) = token_scores
            .iter()
            .find(|t| !t.logprob.is_finite() || t.logprob > 1e-9)
        {
            return Err(ScoringError::Backend(format!(
                "invalid log-probability {} for token {:?}",
                t.logprob, t.token_text
            )));
        }
        let total_logprob = token_scores.iter().map(|t| t.logprob).sum();
        Ok(ContinuationScore {
            prompt: prompt.into(),
            continuation: continuation.into(),
            token_scores,
            total_logprob,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    WireClient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub backend_kind: BackendKind,
    pub model_label: String,
    pub supports_temperature: bool,
    pub supports_full_logits: bool,
    /// Whether the serving side prepends a beginning-of-sequence token when
    /// scoring a text with an empty prompt, as reported by the server.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bos_convention: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub prompt: String,
    pub continuation: String,
    pub temperature: f64,
}

pub trait ScoringBackend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    /// Scores one validated request.
    fn score(&self, request: &ScoreRequest) -> std::result::Result<ContinuationScore, ScoringError>;

    /// Scores many requests; results are in request order.
    fn score_batch(
        &self,
        requests: &[ScoreRequest],
    ) -> Vec<std::result::Result<ContinuationScore, ScoringError>> {
        requests.iter().map(|r| self.score(r)).collect()
    }
}

impl<T: ScoringBackend + ?Sized> ScoringBackend for Arc<T> {
    fn descriptor(&self) -> &BackendDescriptor {
        (**self).descriptor()
    }

    fn score(&self, request: &ScoreRequest) -> std::result::Result<ContinuationScore, ScoringError> {
        (**self).score(request)
    }

    fn score_batch(
        &self,
        requests: &[ScoreRequest],
    ) -> Vec<std::result::Result<ContinuationScore, ScoringError>> {
        (**self).score_batch(requests)
    }
}

impl<T: ScoringBackend + ?Sized> ScoringBackend for Box<T> {
    fn descriptor(&self) -> &BackendDescriptor {
        (**self).descriptor()
    }

    fn score(&self, request: &ScoreRequest) -> std::result::Result<ContinuationScore, ScoringError> {
        (**self).score(request)
    }

    fn score_batch(
        &self,
        requests: &[ScoreRequest],
    ) -> Vec<std::result::Result<ContinuationScore, ScoringError>> {
        (**self).score_batch(requests)
    }
}

/// Checks a request against the contract shared by all backends.
pub fn validate_request(
    descriptor: &BackendDescriptor,
    request: &ScoreRequest,
) -> std::result::Result<(), ScoringError> {
    if request.continuation.is_empty() {
        return Err(ScoringError::Precondition("continuation is empty".into()));
    }
    if !(request.temperature.is_finite() && request.temperature > 0.0) {
        return Err(ScoringError::Precondition(format!(
            "temperature must be positive, got {}",
            request.temperature
        )));
    }
    if request.temperature != 1.0 && !descriptor.supports_temperature {
        return Err(ScoringError::Capability(format!(
            "{} does not support temperature {}",
            descriptor.model_label, request.temperature
        )));
    }
    Ok(())
}

pub fn score_continuation<B: ScoringBackend + ?Sized>(
    backend: &B,
    prompt: &str,
    continuation: &str,
    temperature: f64,
) -> std::result::Result<ContinuationScore, ScoringError> {
    let request = ScoreRequest {
        prompt: prompt.to_string(),
        continuation: continuation.to_string(),
        temperature,
    };
    validate_request(backend.descriptor(), &request)?;
    backend.score(&request)
}

fn score_all<B: ScoringBackend + ?Sized>(
    backend: &B,
    requests: &[ScoreRequest],
) -> std::result::Result<Vec<std::result::Result<ContinuationScore, ScoringError>>, ScoringError> {
    for r in requests {
        validate_request(backend.descriptor(), r)?;
    }
    let results = backend.score_batch(requests);
    if results.len() != requests.len() {
        return Err(ScoringError::Backend(format!(
            "backend returned {} results for {} requests",
            results.len(),
            requests.len()
        )));
    }
    Ok(results)
}

/// Log-probability of a whole text, scored from an empty prompt.
pub fn sequence_logprob<B: ScoringBackend + ?Sized>(
    backend: &B,
    text: &str,
) -> std::result::Result<f64, ScoringError> {
    if text.is_empty() {
        return Err(ScoringError::Precondition("text is empty".into()));
    }
    Ok(score_continuation(backend, "", text, 1.0)?.total_logprob)
}

/// The string appended to a prompt when scoring a candidate name.
pub fn candidate_continuation(alias: &str) -> String {
    format!(" {alias}")
}

/// Per-country log of the alias-summed joint mass `Σ_a p(alias_a | prompt)`.
///
/// Aliases the backend gives zero probability contribute nothing; a country
/// whose aliases all have zero probability gets `-inf`.
pub fn country_log_masses<B: ScoringBackend + ?Sized>(
    backend: &B,
    prompt: &str,
    candidates: &CandidateSet,
    temperature: f64,
) -> std::result::Result<Vec<f64>, ScoringError> {
    let mut owners = Vec::new();
    let mut requests = Vec::new();
    for (i, country) in candidates.countries().iter().enumerate() {
        for alias in country.aliases() {
            owners.push(i);
            requests.push(ScoreRequest {
                prompt: prompt.to_string(),
                continuation: candidate_continuation(alias),
                temperature,
            });
        }
    }
    let results = score_all(backend, &requests)?;
    let mut per_country: Vec<Vec<f64>> = vec![Vec::new(); candidates.len()];
    for (owner, result) in owners.into_iter().zip(results) {
        match result {
            Ok(score) => per_country[owner].push(score.total_logprob),
            Err(ScoringError::ZeroProbability { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(per_country.iter().map(|l| log_sum_exp(l)).collect())
}

/// `p(x_i | prompt)`: alias-summed masses normalized over the candidate set.
pub fn country_distribution<B: ScoringBackend + ?Sized>(
    backend: &B,
    prompt: &str,
    candidates: &Arc<CandidateSet>,
    temperature: f64,
) -> Result<ProbDist> {
    let log_masses = country_log_masses(backend, prompt, candidates, temperature)?;
    ProbDist::from_log_weights(candidates.clone(), &log_masses)
}

/// Perplexity over texts at temperature 1.
pub fn perplexity<B: ScoringBackend + ?Sized, S: AsRef<str>>(backend: &B, texts: &[S]) -> Result<f64> {
    perplexity_at(backend, texts, 1.0)
}

/// `exp(-Σ logprob / #tokens)` over all tokens of all texts.
pub fn perplexity_at<B: ScoringBackend + ?Sized, S: AsRef<str>>(
    backend: &B,
    texts: &[S],
    temperature: f64,
) -> Result<f64> {
    if texts.is_empty() {
        return Err(Error::Contract("perplexity needs at least one text".into()));
    }
    let requests: Vec<ScoreRequest> = texts
        .iter()
        .map(|t| ScoreRequest {
            prompt: String::new(),
            continuation: t.as_ref().to_string(),
            temperature,
        })
        .collect();
    let mut total = 0.0;
    let mut tokens = 0usize;
    for result in score_all(backend, &requests)? {
        let score = result?;
        total += score.total_logprob;
        tokens += score.token_scores.len();
    }
    if tokens == 0 {
        return Err(Error::Contract("perplexity needs at least one token".into()));
    }
    Ok((-total / tokens as f64).exp())
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::Country;

    fn table(rows: &[(&str, &str, f64)]) -> MockBackend {
        let mut t = MockTable::new(DEFAULT_FALLBACK_VOCAB);
        for (c, tok, p) in rows {
            t.insert(c, tok, *p).unwrap();
        }
        MockBackend::new(t, "test")
    }

    #[test]
    fn single_token_lookup() {
        let b = table(&[("I live in", " Canada", 0.2)]);
        let s = score_continuation(&b, "I live in", " Canada", 1.0).unwrap();
        assert_eq!(s.token_scores.len(), 1);
        assert!((s.total_logprob - 0.2f64.ln()).abs() < 1e-12);
        assert!((s.total_logprob - (-1.6094)).abs() < 1e-4);
    }

    #[test]
    fn subtokens_multiply() {
        let e = std::f64::consts::E;
        let b = table(&[
            ("c", " U", e.powi(-1)),
            ("c U", "g", e.powi(-2)),
            ("c Ug", "anda", e.powf(-0.5)),
        ]);
        let s = score_continuation(&b, "c", " Uganda", 1.0).unwrap();
        let per_token: Vec<f64> = s.token_scores.iter().map(|t| t.logprob).collect();
        assert_eq!(per_token.len(), 3);
        for (got, want) in per_token.iter().zip([-1.0, -2.0, -0.5]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((s.total_logprob + 3.5).abs() < 1e-12);
    }

    #[test]
    fn empty_continuation_is_rejected() {
        let b = table(&[]);
        assert!(matches!(
            score_continuation(&b, "I live in", "", 1.0),
            Err(ScoringError::Precondition(_))
        ));
        assert!(matches!(
            score_continuation(&b, "I live in", " x", 0.0),
            Err(ScoringError::Precondition(_))
        ));
        assert!(matches!(
            sequence_logprob(&b, ""),
            Err(ScoringError::Precondition(_))
        ));
    }

    #[test]
    fn sequence_logprob_examples() {
        let b = table(&[("", "I live in", 0.001), ("", "Hello", 1.0 - 0.001)]);
        assert!((sequence_logprob(&b, "I live in").unwrap() - 0.001f64.ln()).abs() < 1e-12);
        let certain = table(&[("", "x", 1.0)]);
        assert_eq!(sequence_logprob(&certain, "x").unwrap(), 0.0);
    }

    #[test]
    fn country_distribution_normalizes() {
        let set = Arc::new(CandidateSet::from_names(&["A", "B"]).unwrap());
        let b = table(&[("p", " A", 0.3), ("p", " B", 0.1)]);
        let d = country_distribution(&b, "p", &set, 1.0).unwrap();
        assert!((d.probs()[0] - 0.75).abs() < 1e-12);
        assert!((d.probs()[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn aliases_are_summed() {
        let a = Country::new("A", vec!["a1".into(), "a2".into()]).unwrap();
        // canonical "A" itself is also an alias; give it zero mass by listing
        // a table with no fallback mass left
        let set = Arc::new(CandidateSet::new(vec![a, Country::named("B").unwrap()]).unwrap());
        let mut t = MockTable::new(DEFAULT_FALLBACK_VOCAB);
        t.insert("p", " a1", 0.1).unwrap();
        t.insert("p", " a2", 0.2).unwrap();
        t.insert("p", " B", 0.3).unwrap();
        t.insert("p", " other", 0.4).unwrap();
        let b = MockBackend::new(t, "alias");
        let d = country_distribution(&b, "p", &set, 1.0).unwrap();
        assert!((d.probs()[0] - 0.5).abs() < 1e-12);
        assert!((d.probs()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_country_is_certain() {
        let set = Arc::new(CandidateSet::from_names(&["A"]).unwrap());
        let d = country_distribution(&table(&[]), "anything", &set, 1.0).unwrap();
        assert_eq!(d.probs(), [1.0]);
    }

    #[test]
    fn all_zero_masses_fail_normalization() {
        let set = Arc::new(CandidateSet::from_names(&["A", "B"]).unwrap());
        let b = table(&[("p", " C", 1.0)]);
        assert!(matches!(
            country_distribution(&b, "p", &set, 1.0),
            Err(Error::Normalization(_))
        ));
    }

    #[test]
    fn perplexity_examples() {
        let b = table(&[("", "a", 0.5), ("a", "b", 0.5)]);
        let ppl = perplexity(&b, &["ab"]).unwrap();
        assert!((ppl - 2.0).abs() < 1e-12, "{ppl}");

        let sure = table(&[("", "a", 1.0), ("a", "b", 1.0)]);
        assert_eq!(perplexity(&sure, &["ab"]).unwrap(), 1.0);

        let e = std::f64::consts::E;
        let two = table(&[
            ("", "x", e.powi(-1)),
            ("x", "y", e.powi(-1)),
            ("xy", "z", e.powi(-1)),
            ("", "w", e.powi(-1)),
        ]);
        let ppl = perplexity(&two, &["xyz", "w"]).unwrap();
        assert!((ppl - 1f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn temperature_requires_capability() {
        struct NoTemp(BackendDescriptor);
        impl ScoringBackend for NoTemp {
            fn descriptor(&self) -> &BackendDescriptor {
                &self.0
            }
            fn score(&self, r: &ScoreRequest) -> std::result::Result<ContinuationScore, ScoringError> {
                ContinuationScore::new(
                    &r.prompt,
                    &r.continuation,
                    vec![TokenScore {
                        token_text: r.continuation.clone(),
                        logprob: -1.0,
                    }],
                )
            }
        }
        let b = NoTemp(BackendDescriptor {
            backend_kind: BackendKind::WireClient,
            model_label: "fixed".into(),
            supports_temperature: false,
            supports_full_logits: false,
            bos_convention: None,
        });
        assert!(score_continuation(&b, "p", " x", 1.0).is_ok());
        assert!(matches!(
            score_continuation(&b, "p", " x", 0.9),
            Err(ScoringError::Capability(_))
        ));
    }
}
