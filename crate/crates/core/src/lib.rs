//! Measuring and mitigating geographical erasure in language models.
//!
//! A model "erases" a country when, asked where someone lives or comes from,
//! it assigns that country far less probability than its share of a reference
//! population. This crate scores candidate countries through a pluggable
//! backend, compares the resulting distributions to ground truth, profiles
//! training corpora for mention counts and fits a temperature that reduces
//! erasure.

pub mod corpus;
pub mod distributions;
pub mod error;
pub mod metrics;
pub mod prompts;
pub mod report;
pub mod scoring;
pub mod stats;
pub mod temperature;

pub use distributions::{CandidateSet, Country, GroundTruth, ProbDist};
pub use error::{Error, Result};
pub use report::{build_report, ErasureReport, ReportOptions};
