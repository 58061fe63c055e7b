//! Erasure sets, the ER^r score and its relation to KL divergence, choice of
//! the ratio threshold, and aggregation of per-prompt predictions.
//!
//! All logarithms are natural; scores are in nats.

use std::ops::RangeInclusive;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::distributions::{ratio_at, ProbDist};
use crate::error::{Error, Result};
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErasedCountry {
    pub country: String,
    /// `p_true / p`, strictly above the set's threshold.
    pub ratio: f64,
}

/// Countries whose ground-truth probability exceeds the prediction by more
/// than a factor `threshold_r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErasureSet {
    pub threshold_r: f64,
    pub members: Vec<ErasedCountry>,
}

impl ErasureSet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, country: &str) -> bool {
        self.members.iter().any(|m| m.country == country)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.members.iter().map(|m| m.country.as_str())
    }
}

/// Per-country `(ratio, p_true · ln ratio)`. Countries with zero ground-truth
/// mass get ratio 0 and a zero term.
fn terms(p_true: &ProbDist, p: &ProbDist) -> Result<Vec<(f64, f64)>> {
    p_true.check_same_support(p)?;
    (0..p_true.len())
        .map(|i| {
            let t = p_true.probs()[i];
            if t == 0.0 {
                return Ok((0.0, 0.0));
            }
            let ratio = ratio_at(p_true, p, i)?;
            Ok((ratio, t * ratio.ln()))
        })
        .collect()
}

fn check_r(r: f64) -> Result<()> {
    if r.is_nan() || r < 0.0 {
        return Err(Error::Contract(format!("ratio threshold must be >= 0, got {r}")));
    }
    Ok(())
}

/// The erasure set `{x : p_true(x) / p(x) > r}` for `r > 1`.
pub fn erasure_set(p_true: &ProbDist, p: &ProbDist, r: f64) -> Result<ErasureSet> {
    if r.is_nan() || r <= 1.0 {
        return Err(Error::Contract(format!(
            "erasure sets need a threshold r > 1, got {r}"
        )));
    }
    let members = terms(p_true, p)?
        .into_iter()
        .enumerate()
        .filter(|(_, (ratio, _))| *ratio > r)
        .map(|(i, (ratio, _))| ErasedCountry {
            country: p_true.candidates().country(i).canonical_name().to_string(),
            ratio,
        })
        .collect();
    Ok(ErasureSet {
        threshold_r: r,
        members,
    })
}

/// ER^r together with the sum of the remaining KL terms; the two add up to
/// `kl(p_true, p)`.
pub fn erasure_decomposition(p_true: &ProbDist, p: &ProbDist, r: f64) -> Result<(f64, f64)> {
    check_r(r)?;
    let mut inside = 0.0;
    let mut outside = 0.0;
    for (ratio, term) in terms(p_true, p)? {
        if ratio > r {
            inside += term;
        } else {
            outside += term;
        }
    }
    Ok((inside, outside))
}

/// ER^r: `Σ_{x ∈ S_r} p_true(x) ln(p_true(x) / p(x))`. Any `r >= 0` is
/// accepted; the result is non-negative for `r >= 1`.
pub fn erasure(p_true: &ProbDist, p: &ProbDist, r: f64) -> Result<f64> {
    Ok(erasure_decomposition(p_true, p, r)?.0)
}

/// KL(p_true ‖ p) in nats.
pub fn kl(p_true: &ProbDist, p: &ProbDist) -> Result<f64> {
    let total: f64 = terms(p_true, p)
        .map_err(|e| match e {
            Error::DivisionByZero { country } => {
                Error::Domain(format!("p is zero for {country} where p_true is positive"))
            }
            other => other,
        })?
        .iter()
        .map(|(_, t)| t)
        .sum();
    Ok(total.max(0.0))
}

/// `Σ_{i ∈ subset} p_true_i ln(p_true_i / p_i)` for a fixed list of country
/// indices.
pub fn partial_divergence(p_true: &ProbDist, p: &ProbDist, subset: &[usize]) -> Result<f64> {
    let t = terms(p_true, p)?;
    subset
        .iter()
        .map(|&i| {
            t.get(i)
                .map(|(_, term)| *term)
                .ok_or_else(|| Error::Contract(format!("country index {i} out of range")))
        })
        .sum()
}

fn check_batch(preds: &[ProbDist]) -> Result<()> {
    let first = preds
        .first()
        .ok_or_else(|| Error::Contract("at least one prompt is required".into()))?;
    preds.iter().try_for_each(|p| first.check_same_support(p))
}

/// Uniform prompt marginal: the per-country mean of the predictions.
pub fn aggregate_uniform(preds: &[ProbDist]) -> Result<ProbDist> {
    check_batch(preds)?;
    let n = preds.len() as f64;
    let m = preds[0].len();
    let probs = (0..m)
        .map(|i| preds.iter().map(|p| p.probs()[i]).sum::<f64>() / n)
        .collect();
    ProbDist::new(Arc::clone(preds[0].candidates()), probs)
}

/// Normalized prompt weights `p(c) / Σ p(c)` from prompt log-probabilities.
pub fn prompt_weights(prompt_logprobs: &[f64]) -> Result<Vec<f64>> {
    if prompt_logprobs.is_empty() {
        return Err(Error::Contract("at least one prompt is required".into()));
    }
    if let Some(lp) = prompt_logprobs.iter().find(|lp| !lp.is_finite()) {
        return Err(Error::Validation(format!(
            "prompt log-probability {lp} is not finite"
        )));
    }
    let max = prompt_logprobs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = prompt_logprobs.iter().map(|lp| (lp - max).exp()).collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / total).collect())
}

/// Model-induced prompt marginal: predictions weighted by each prompt's
/// probability under the model.
pub fn aggregate_model(preds: &[ProbDist], prompt_logprobs: &[f64]) -> Result<ProbDist> {
    check_batch(preds)?;
    if preds.len() != prompt_logprobs.len() {
        return Err(Error::Contract(format!(
            "{} predictions but {} prompt log-probabilities",
            preds.len(),
            prompt_logprobs.len()
        )));
    }
    let weights = prompt_weights(prompt_logprobs)?;
    let m = preds[0].len();
    let probs = (0..m)
        .map(|i| {
            preds
                .iter()
                .zip(&weights)
                .map(|(p, w)| w * p.probs()[i])
                .sum::<f64>()
        })
        .collect();
    ProbDist::new(Arc::clone(preds[0].candidates()), probs)
}

/// What ER^r is matched against KL on when choosing `r`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RSelection {
    /// Median over prompts of ER^r versus median over prompts of KL.
    #[default]
    MedianOfEr,
    /// ER^r versus KL of the uniform prompt aggregate.
    ErOfAggregate,
}

/// One row of the ER-versus-r sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RSweepRow {
    pub r: u32,
    pub median_er: f64,
    pub p25_er: f64,
    pub p75_er: f64,
    pub median_kl: f64,
    pub median_set_size: f64,
    pub p25_set_size: f64,
    pub p75_set_size: f64,
    /// `|ER − KL|` under the selection mode in use.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RChoice {
    pub r: u32,
    pub mode: RSelection,
    pub table: Vec<RSweepRow>,
}

pub const DEFAULT_R_RANGE: RangeInclusive<u32> = 2..=20;

/// The smallest integer `r` in range whose ER^r is closest to KL.
pub fn choose_r(
    per_prompt_preds: &[ProbDist],
    p_true: &ProbDist,
    r_candidates: RangeInclusive<u32>,
    mode: RSelection,
) -> Result<RChoice> {
    if r_candidates.is_empty() {
        return Err(Error::Contract("empty range of r candidates".into()));
    }
    check_batch(per_prompt_preds)?;
    let kls: Vec<f64> = per_prompt_preds
        .iter()
        .map(|p| kl(p_true, p))
        .collect::<Result<_>>()?;
    let median_kl = stats::median(&kls).expect("non-empty");
    let aggregate = match mode {
        RSelection::ErOfAggregate => {
            let agg = aggregate_uniform(per_prompt_preds)?;
            let agg_kl = kl(p_true, &agg)?;
            Some((agg, agg_kl))
        }
        RSelection::MedianOfEr => None,
    };

    let mut table = Vec::new();
    let mut best: Option<(u32, f64)> = None;
    for r in r_candidates {
        let rf = f64::from(r);
        let mut ers = Vec::with_capacity(per_prompt_preds.len());
        let mut sizes = Vec::with_capacity(per_prompt_preds.len());
        for p in per_prompt_preds {
            ers.push(erasure(p_true, p, rf)?);
            sizes.push(if rf > 1.0 {
                erasure_set(p_true, p, rf)?.len() as f64
            } else {
                terms(p_true, p)?.iter().filter(|(ratio, _)| *ratio > rf).count() as f64
            });
        }
        let median_er = stats::median(&ers).expect("non-empty");
        let gap = match &aggregate {
            None => (median_er - median_kl).abs(),
            Some((agg, agg_kl)) => (erasure(p_true, agg, rf)? - agg_kl).abs(),
        };
        if best.is_none_or(|(_, g)| gap < g) {
            best = Some((r, gap));
        }
        table.push(RSweepRow {
            r,
            median_er,
            p25_er: stats::quantile(&ers, 0.25).expect("non-empty"),
            p75_er: stats::quantile(&ers, 0.75).expect("non-empty"),
            median_kl,
            median_set_size: stats::median(&sizes).expect("non-empty"),
            p25_set_size: stats::quantile(&sizes, 0.25).expect("non-empty"),
            p75_set_size: stats::quantile(&sizes, 0.75).expect("non-empty"),
            gap,
        });
    }
    Ok(RChoice {
        r: best.expect("non-empty range").0,
        mode,
        table,
    })
}
