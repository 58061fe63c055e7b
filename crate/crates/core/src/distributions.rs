//! Countries, candidate sets and normalized distributions over them.
//!
//! A [`CandidateSet`] fixes the countries (and their alternative names) that
//! every distribution in an analysis is defined over. Countries without
//! ground-truth data are dropped from the set rather than carried with a
//! zero probability.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Read;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance on the total mass of a [`ProbDist`].
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Country {
    canonical_name: String,
    aliases: Vec<String>,
}

impl Country {
    /// Builds a country from its canonical name and alias list. The canonical
    /// name is prepended to the aliases when it is not already listed.
    pub fn new(canonical_name: impl Into<String>, aliases: Vec<String>) -> Result<Self> {
        let canonical_name = canonical_name.into();
        if canonical_name.trim().is_empty() {
            return Err(Error::Validation("country name must be non-empty".into()));
        }
        let mut seen = HashSet::new();
        for alias in &aliases {
            if alias.trim().is_empty() {
                return Err(Error::Validation(format!(
                    "empty alias for country {canonical_name:?}"
                )));
            }
            if !seen.insert(alias.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate alias {alias:?} for country {canonical_name:?}"
                )));
            }
        }
        let listed = seen.contains(canonical_name.as_str());
        let mut all = aliases;
        if !listed {
            all.insert(0, canonical_name.clone());
        }
        Ok(Country {
            canonical_name,
            aliases: all,
        })
    }

    pub fn named(canonical_name: impl Into<String>) -> Result<Self> {
        Country::new(canonical_name, Vec::new())
    }

    pub fn canonical_name(&self) -> &str {
        &self.canonical_name
    }

    /// All names of the country, canonical name included.
    pub fn aliases(&self) -> &[String] {
        &self.aliases
    }
}

/// The ordered list of countries under analysis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    countries: Vec<Country>,
    index: HashMap<String, usize>,
}

impl CandidateSet {
    pub fn new(countries: Vec<Country>) -> Result<Self> {
        if countries.is_empty() {
            return Err(Error::Validation("candidate set must not be empty".into()));
        }
        let mut index = HashMap::with_capacity(countries.len());
        let mut alias_owner: HashMap<&str, &str> = HashMap::new();
        for (i, country) in countries.iter().enumerate() {
            if index.insert(country.canonical_name.clone(), i).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate country {:?}",
                    country.canonical_name
                )));
            }
            for alias in &country.aliases {
                if let Some(owner) = alias_owner.insert(alias, &country.canonical_name) {
                    return Err(Error::Validation(format!(
                        "alias {alias:?} maps to both {owner:?} and {:?}",
                        country.canonical_name
                    )));
                }
            }
        }
        Ok(CandidateSet { countries, index })
    }

    /// A candidate set whose countries have no alternative names.
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let countries = names
            .iter()
            .map(|n| Country::named(n.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        CandidateSet::new(countries)
    }

    /// Parses an aliases file: a JSON object mapping each canonical name to
    /// its list of alternative names. Countries are ordered by canonical name.
    pub fn from_aliases_json<R: Read>(reader: R) -> Result<Self> {
        let raw: BTreeMap<String, Vec<String>> = serde_json::from_reader(reader)?;
        let countries = raw
            .into_iter()
            .map(|(name, aliases)| Country::new(name, aliases))
            .collect::<Result<Vec<_>>>()?;
        CandidateSet::new(countries)
    }

    pub fn to_aliases_json(&self) -> String {
        let map: BTreeMap<&str, &[String]> = self
            .countries
            .iter()
            .map(|c| (c.canonical_name(), c.aliases()))
            .collect();
        serde_json::to_string_pretty(&map).expect("alias map serializes")
    }

    pub fn len(&self) -> usize {
        self.countries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.countries.is_empty()
    }

    pub fn countries(&self) -> &[Country] {
        &self.countries
    }

    pub fn country(&self, idx: usize) -> &Country {
        &self.countries[idx]
    }

    pub fn index_of(&self, canonical_name: &str) -> Option<usize> {
        self.index.get(canonical_name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.countries.iter().map(|c| c.canonical_name())
    }

    /// Keeps only the named countries, preserving this set's order.
    pub fn restrict<S: AsRef<str>>(&self, keep: &[S]) -> Result<Self> {
        let keep: HashSet<&str> = keep.iter().map(|s| s.as_ref()).collect();
        for name in &keep {
            if self.index_of(name).is_none() {
                return Err(Error::Contract(format!(
                    "country {name:?} is not in the candidate set"
                )));
            }
        }
        let countries = self
            .countries
            .iter()
            .filter(|c| keep.contains(c.canonical_name()))
            .cloned()
            .collect();
        CandidateSet::new(countries)
    }

    /// True when both sets list the same canonical names in the same order.
    pub fn same_countries(&self, other: &CandidateSet) -> bool {
        self.countries.len() == other.countries.len()
            && self
                .countries
                .iter()
                .zip(&other.countries)
                .all(|(a, b)| a.canonical_name == b.canonical_name)
    }
}

/// A normalized probability vector over a candidate set.
#[derive(Debug, Clone)]
pub struct ProbDist {
    candidates: Arc<CandidateSet>,
    probs: Vec<f64>,
}

impl ProbDist {
    pub fn new(candidates: Arc<CandidateSet>, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != candidates.len() {
            return Err(Error::Contract(format!(
                "distribution has {} entries but the candidate set has {} countries",
                probs.len(),
                candidates.len()
            )));
        }
        if let Some((i, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p < 0.0)
        {
            return Err(Error::Validation(format!(
                "probability of {} is {p}",
                candidates.country(i).canonical_name()
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(Error::Normalization(format!("probabilities sum to {total}")));
        }
        Ok(ProbDist { candidates, probs })
    }

    /// Normalizes non-negative weights.
    pub fn from_weights(candidates: Arc<CandidateSet>, weights: &[f64]) -> Result<Self> {
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::Validation(format!("invalid weight {w}")));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Normalization("all weights are zero".into()));
        }
        ProbDist::new(candidates, weights.iter().map(|w| w / total).collect())
    }

    /// Normalizes log-weights; `-inf` entries get probability 0.
    pub fn from_log_weights(candidates: Arc<CandidateSet>, log_weights: &[f64]) -> Result<Self> {
        if log_weights.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
            return Err(Error::Validation("log-weights must be finite or -inf".into()));
        }
        let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::Normalization("all masses are zero".into()));
        }
        let weights: Vec<f64> = log_weights.iter().map(|l| (l - max).exp()).collect();
        ProbDist::from_weights(candidates, &weights)
    }

    pub fn candidates(&self) -> &Arc<CandidateSet> {
        &self.candidates
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, canonical_name: &str) -> Option<f64> {
        self.candidates.index_of(canonical_name).map(|i| self.probs[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Country, f64)> {
        self.candidates.countries().iter().zip(self.probs.iter().copied())
    }

    pub(crate) fn check_same_support(&self, other: &ProbDist) -> Result<()> {
        if Arc::ptr_eq(&self.candidates, &other.candidates)
            || self.candidates.same_countries(&other.candidates)
        {
            Ok(())
        } else {
            Err(Error::Contract(
                "distributions are defined over different candidate sets".into(),
            ))
        }
    }
}

impl PartialEq for ProbDist {
    fn eq(&self, other: &Self) -> bool {
        self.candidates.same_countries(&other.candidates) && self.probs == other.probs
    }
}

/// Population-based reference distribution.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub dist: ProbDist,
    pub raw_counts: Vec<u64>,
    pub source_label: String,
}

impl GroundTruth {
    pub fn candidates(&self) -> &Arc<CandidateSet> {
        self.dist.candidates()
    }
}

#[derive(Debug, Deserialize)]
struct PopulationRow {
    country: String,
    english_speakers: String,
}

/// Loads a `country,english_speakers` table.
///
/// The returned ground truth is defined over the countries of `candidates`
/// that appear in the file, in candidate-set order, so row order never
/// matters. Countries without a row are excluded.
pub fn load_ground_truth<R: Read>(
    population: R,
    candidates: &CandidateSet,
    source_label: impl Into<String>,
) -> Result<GroundTruth> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(population);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["country", "english_speakers"] {
        return Err(Error::Schema {
            row: 1,
            message: format!("expected header country,english_speakers, found {headers:?}"),
        });
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    for (i, row) in rdr.deserialize::<PopulationRow>().enumerate() {
        // header is line 1
        let line = i + 2;
        let row = row?;
        if candidates.index_of(&row.country).is_none() {
            return Err(Error::Schema {
                row: line,
                message: format!("unknown country {:?}", row.country),
            });
        }
        let count = parse_positive_count(&row.english_speakers)
            .map_err(|why| Error::Validation(format!("row {line} ({}): {why}", row.country)))?;
        if counts.insert(row.country.clone(), count).is_some() {
            return Err(Error::Validation(format!(
                "row {line}: duplicate country {:?}",
                row.country
            )));
        }
    }
    if counts.is_empty() {
        return Err(Error::Validation("population file has no rows".into()));
    }
    let present: Vec<&str> = candidates.names().filter(|n| counts.contains_key(*n)).collect();
    let restricted = Arc::new(candidates.restrict(&present)?);
    let raw_counts: Vec<u64> = restricted.names().map(|n| counts[n]).collect();
    let total: f64 = raw_counts.iter().map(|&c| c as f64).sum();
    let probs = raw_counts.iter().map(|&c| c as f64 / total).collect();
    Ok(GroundTruth {
        dist: ProbDist::new(restricted, probs)?,
        raw_counts,
        source_label: source_label.into(),
    })
}

fn parse_positive_count(raw: &str) -> std::result::Result<u64, String> {
    match raw.parse::<i128>() {
        Ok(v) if v > 0 && v <= u64::MAX as i128 => Ok(v as u64),
        Ok(v) => Err(format!("count must be positive, got {v}")),
        Err(_) => Err(format!("count must be a positive integer, got {raw:?}")),
    }
}

/// Loads a `country,gdp_per_capita_usd` table.
pub fn load_gdp<R: Read>(reader: R) -> Result<BTreeMap<String, f64>> {
    #[derive(Deserialize)]
    struct GdpRow {
        country: String,
        gdp_per_capita_usd: f64,
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = BTreeMap::new();
    for (i, row) in rdr.deserialize::<GdpRow>().enumerate() {
        let row = row?;
        if !row.gdp_per_capita_usd.is_finite() || row.gdp_per_capita_usd < 0.0 {
            return Err(Error::Validation(format!(
                "row {}: invalid GDP per capita {}",
                i + 2,
                row.gdp_per_capita_usd
            )));
        }
        if out.insert(row.country.clone(), row.gdp_per_capita_usd).is_some() {
            return Err(Error::Validation(format!(
                "row {}: duplicate country {:?}",
                i + 2,
                row.country
            )));
        }
    }
    Ok(out)
}

/// `p_true[country] / p[country]`.
pub fn ratio(p_true: &ProbDist, p: &ProbDist, country: &Country) -> Result<f64> {
    p_true.check_same_support(p)?;
    let idx = p_true
        .candidates()
        .index_of(country.canonical_name())
        .ok_or_else(|| {
            Error::Contract(format!(
                "country {:?} is not in the candidate set",
                country.canonical_name()
            ))
        })?;
    ratio_at(p_true, p, idx)
}

pub(crate) fn ratio_at(p_true: &ProbDist, p: &ProbDist, idx: usize) -> Result<f64> {
    let predicted = p.probs[idx];
    if predicted == 0.0 {
        return Err(Error::DivisionByZero {
            country: p.candidates.country(idx).canonical_name().to_string(),
        });
    }
    Ok(p_true.probs[idx] / predicted)
}
