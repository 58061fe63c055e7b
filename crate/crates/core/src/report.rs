//! End-to-end audit reports and their delimited-text exports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{ratio_at, CandidateSet, GroundTruth, ProbDist};
use crate::error::{Error, Result};
use crate::metrics::{self, ErasureSet};
use crate::prompts::PromptSet;
use crate::scoring::{self, BackendDescriptor, ScoringBackend, ScoringError};
use crate::stats::{self, Dispersion};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_R: f64 = 3.0;
pub const DEFAULT_BOOTSTRAP_RESAMPLES: usize = 10_000;
const CI_LEVEL: f64 = 0.95;

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOptions {
    pub r: f64,
    pub temperature: f64,
    pub seed: u64,
    pub bootstrap_resamples: usize,
    /// Scoring worker threads; 0 means available parallelism.
    pub workers: usize,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            r: DEFAULT_R,
            temperature: 1.0,
            seed: 0,
            bootstrap_resamples: DEFAULT_BOOTSTRAP_RESAMPLES,
            workers: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub backend: BackendDescriptor,
    pub r: f64,
    pub temperature: f64,
    pub ground_truth_source: String,
    pub seed: u64,
    pub bootstrap_resamples: usize,
    /// Full configuration the report was produced from, when run by a tool.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
    /// sha256 of each input file, keyed by role.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub input_hashes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptResult {
    pub text: String,
    /// `ln p(c)` of the prompt text itself.
    pub log_prob: f64,
    /// Alias-summed candidate log-masses; `null` for zero mass.
    #[serde(with = "log_masses_serde")]
    pub log_masses: Vec<f64>,
    pub probs: Vec<f64>,
    pub er: f64,
    pub kl: f64,
    pub erasure_set: ErasureSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateResult {
    pub probs: Vec<f64>,
    pub er: f64,
    pub kl: f64,
    pub erasure_set: ErasureSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub level: f64,
    pub lower: f64,
    pub upper: f64,
    pub resamples: usize,
    /// Lower bound strictly above zero.
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountryRatio {
    pub country: String,
    pub ratio: f64,
    pub erased: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErasureReport {
    pub schema_version: u32,
    pub metadata: ReportMetadata,
    pub countries: Vec<String>,
    pub ground_truth: Vec<f64>,
    pub prompts: Vec<PromptResult>,
    pub average_er: f64,
    pub average_er_ci: ConfidenceInterval,
    pub aggregate_uniform: AggregateResult,
    pub aggregate_model: AggregateResult,
    pub dispersion: Dispersion,
    /// `p_true / p` against the model-weighted aggregate.
    pub per_country_ratios: Vec<CountryRatio>,
}

mod log_masses_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(values: &[f64], s: S) -> Result<S::Ok, S::Error> {
        values
            .iter()
            .map(|v| if *v == f64::NEG_INFINITY { None } else { Some(*v) })
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Ok(Vec::<Option<f64>>::deserialize(d)?
            .into_iter()
            .map(|v| v.unwrap_or(f64::NEG_INFINITY))
            .collect())
    }
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if workers > 0 {
        builder = builder.num_threads(workers);
    }
    builder
        .build()
        .map_err(|e| Error::Contract(format!("cannot start worker pool: {e}")))
}

struct Scored {
    log_prob: f64,
    log_masses: Vec<f64>,
}

fn score_prompt<B: ScoringBackend + ?Sized>(
    backend: &B,
    text: &str,
    candidates: &CandidateSet,
    temperature: f64,
) -> std::result::Result<Scored, ScoringError> {
    let log_masses = scoring::country_log_masses(backend, text, candidates, temperature)?;
    if log_masses.iter().all(|l| *l == f64::NEG_INFINITY) {
        return Err(ScoringError::Backend(format!(
            "every candidate has zero probability after {text:?}"
        )));
    }
    Ok(Scored {
        log_prob: scoring::sequence_logprob(backend, text)?,
        log_masses,
    })
}

fn aggregate_result(p_true: &ProbDist, p: &ProbDist, r: f64) -> Result<AggregateResult> {
    Ok(AggregateResult {
        probs: p.probs().to_vec(),
        er: metrics::erasure(p_true, p, r)?,
        kl: metrics::kl(p_true, p)?,
        erasure_set: metrics::erasure_set(p_true, p, r)?,
    })
}

/// Percentile bootstrap over prompts for the mean of `values`.
pub fn bootstrap_mean_ci(values: &[f64], resamples: usize, seed: u64) -> Result<ConfidenceInterval> {
    if values.is_empty() {
        return Err(Error::Contract("bootstrap needs at least one value".into()));
    }
    if resamples == 0 {
        return Err(Error::Contract("bootstrap needs at least one resample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - CI_LEVEL) / 2.0;
    let lower = stats::quantile_sorted(&means, tail).expect("non-empty");
    let upper = stats::quantile_sorted(&means, 1.0 - tail).expect("non-empty");
    Ok(ConfidenceInterval {
        level: CI_LEVEL,
        lower,
        upper,
        resamples,
        significant: lower > 0.0,
    })
}

/// Scores every prompt against the ground truth's candidate set and
/// assembles the full report.
pub fn build_report<B: ScoringBackend + ?Sized>(
    backend: &B,
    prompt_set: &PromptSet,
    ground_truth: &GroundTruth,
    options: &ReportOptions,
) -> Result<ErasureReport> {
    if options.r.is_nan() || options.r <= 1.0 {
        return Err(Error::Contract(format!("audits need r > 1, got {}", options.r)));
    }
    if prompt_set.is_empty() {
        return Err(Error::Contract("prompt set is empty".into()));
    }
    let candidates: &Arc<CandidateSet> = ground_truth.candidates();
    let pool = thread_pool(options.workers)?;
    let scored: Vec<std::result::Result<Scored, ScoringError>> = pool.install(|| {
        prompt_set
            .prompts()
            .par_iter()
            .map(|p| score_prompt(backend, &p.text, candidates, options.temperature))
            .collect()
    });

    let mut failed = Vec::new();
    let mut ok = Vec::with_capacity(scored.len());
    for (prompt, result) in prompt_set.prompts().iter().zip(scored) {
        match result {
            Ok(s) => ok.push(s),
            Err(e) => failed.push((prompt.text.clone(), e)),
        }
    }
    if !failed.is_empty() {
        return Err(Error::PartialFailure { failed });
    }
    let p_true = &ground_truth.dist;
    let r = options.r;

    let mut preds = Vec::with_capacity(ok.len());
    let mut prompts = Vec::with_capacity(ok.len());
    for (prompt, s) in prompt_set.prompts().iter().zip(ok) {
        let p = ProbDist::from_log_weights(candidates.clone(), &s.log_masses)?;
        prompts.push(PromptResult {
            text: prompt.text.clone(),
            log_prob: s.log_prob,
            probs: p.probs().to_vec(),
            er: metrics::erasure(p_true, &p, r)?,
            kl: metrics::kl(p_true, &p)?,
            erasure_set: metrics::erasure_set(p_true, &p, r)?,
            log_masses: s.log_masses,
        });
        preds.push(p);
    }

    let ers: Vec<f64> = prompts.iter().map(|p| p.er).collect();
    let logprobs: Vec<f64> = prompts.iter().map(|p| p.log_prob).collect();
    let agg_uniform = metrics::aggregate_uniform(&preds)?;
    let agg_model = metrics::aggregate_model(&preds, &logprobs)?;
    let aggregate_model = aggregate_result(p_true, &agg_model, r)?;
    let per_country_ratios = (0..candidates.len())
        .map(|i| {
            let ratio = if p_true.probs()[i] == 0.0 {
                0.0
            } else {
                ratio_at(p_true, &agg_model, i)?
            };
            Ok(CountryRatio {
                country: candidates.country(i).canonical_name().to_string(),
                ratio,
                erased: ratio > r,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(ErasureReport {
        schema_version: SCHEMA_VERSION,
        metadata: ReportMetadata {
            backend: backend.descriptor().clone(),
            r,
            temperature: options.temperature,
            ground_truth_source: ground_truth.source_label.clone(),
            seed: options.seed,
            bootstrap_resamples: options.bootstrap_resamples,
            config: None,
            input_hashes: BTreeMap::new(),
        },
        countries: candidates.names().map(str::to_string).collect(),
        ground_truth: p_true.probs().to_vec(),
        average_er: stats::mean(&ers).expect("non-empty"),
        average_er_ci: bootstrap_mean_ci(&ers, options.bootstrap_resamples, options.seed)?,
        aggregate_uniform: aggregate_result(p_true, &agg_uniform, r)?,
        aggregate_model,
        dispersion: Dispersion::of(&ers).expect("non-empty"),
        per_country_ratios,
        prompts,
    })
}

impl ErasureReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: ErasureReport = serde_json::from_str(text)?;
        if report.schema_version != SCHEMA_VERSION {
            return Err(Error::Validation(format!(
                "unsupported report schema version {}",
                report.schema_version
            )));
        }
        if report.ground_truth.len() != report.countries.len()
            || report
                .prompts
                .iter()
                .any(|p| p.log_masses.len() != report.countries.len())
        {
            return Err(Error::Validation(
                "report arrays do not match its country list".into(),
            ));
        }
        Ok(report)
    }

    pub fn candidate_set(&self) -> Result<Arc<CandidateSet>> {
        Ok(Arc::new(CandidateSet::from_names(&self.countries)?))
    }

    pub fn ground_truth_dist(&self) -> Result<ProbDist> {
        ProbDist::new(self.candidate_set()?, self.ground_truth.clone())
    }

    /// `country,ratio,erased_at_r`
    pub fn ratio_table_csv(&self) -> String {
        let mut out = String::from("country,ratio,erased_at_r\n");
        for c in &self.per_country_ratios {
            let _ = writeln!(out, "{},{},{}", csv_field(&c.country), c.ratio, c.erased);
        }
        out
    }

    /// `country,ratio,erased` for choropleth tooling.
    pub fn map_csv(&self) -> String {
        let mut out = String::from("country,ratio,erased\n");
        for c in &self.per_country_ratios {
            let _ = writeln!(
                out,
                "{},{},{}",
                csv_field(&c.country),
                c.ratio,
                u8::from(c.erased)
            );
        }
        out
    }

    /// Five-number summary of per-prompt ER plus the two aggregates.
    pub fn boxplot_csv(&self) -> String {
        let d = &self.dispersion;
        format!(
            "statistic,value\nmin,{}\np25,{}\nmedian,{}\np75,{}\nmax,{}\naverage,{}\naggregate_uniform,{}\naggregate_model,{}\n",
            d.min,
            d.p25,
            d.median,
            d.p75,
            d.max,
            self.average_er,
            self.aggregate_uniform.er,
            self.aggregate_model.er
        )
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// For each country, how many reports have it in their model-weighted
/// aggregate erasure set. Countries are in the reports' shared order.
pub fn cross_model_erasure(reports: &[ErasureReport]) -> Result<Vec<(String, usize)>> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Contract("at least one report is required".into()))?;
    for r in &reports[1..] {
        if r.metadata.r != first.metadata.r {
            return Err(Error::Contract(format!(
                "reports use different r: {} and {}",
                first.metadata.r, r.metadata.r
            )));
        }
        if r.countries != first.countries {
            return Err(Error::Contract("reports use different candidate sets".into()));
        }
    }
    Ok(first
        .countries
        .iter()
        .map(|c| {
            let n = reports
                .iter()
                .filter(|r| r.aggregate_model.erasure_set.contains(c))
                .count();
            (c.clone(), n)
        })
        .collect())
}
