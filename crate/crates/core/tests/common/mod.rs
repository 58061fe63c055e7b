#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use geo_erasure::distributions::{load_ground_truth, CandidateSet, Country, GroundTruth, ProbDist};
use geo_erasure::prompts::{expand, parse_subjects, parse_templates, PromptSet};
use geo_erasure::scoring::{MockBackend, MockTable};
use rand::Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub fn shipped(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(name)
}

pub fn read(path: &PathBuf) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn fixture_candidates() -> CandidateSet {
    CandidateSet::from_aliases_json(read(&fixture("aliases.json")).as_bytes()).unwrap()
}

pub fn fixture_ground_truth() -> GroundTruth {
    load_ground_truth(
        read(&fixture("population.csv")).as_bytes(),
        &fixture_candidates(),
        "fixture",
    )
    .unwrap()
}

pub fn fixture_prompts() -> PromptSet {
    let templates = parse_templates(&read(&fixture("templates.toml"))).unwrap();
    let subjects = parse_subjects(&read(&fixture("subjects.toml"))).unwrap();
    expand(&templates, &subjects).unwrap()
}

pub fn fixture_backend() -> MockBackend {
    MockBackend::new(
        MockTable::parse(&read(&fixture("mock_table.tsv"))).unwrap(),
        "fixture-mock",
    )
}

pub fn names(n: usize) -> Arc<CandidateSet> {
    let names: Vec<String> = (0..n).map(|i| format!("Country{i}")).collect();
    Arc::new(CandidateSet::from_names(&names).unwrap())
}

/// Random strictly positive distribution with a wide dynamic range.
pub fn random_dist<R: Rng>(rng: &mut R, set: &Arc<CandidateSet>) -> ProbDist {
    let w: Vec<f64> = (0..set.len())
        .map(|_| rng.random_range(-6.0f64..0.0).exp())
        .collect();
    ProbDist::from_weights(set.clone(), &w).unwrap()
}

// Oracles below work on plain slices and share no code with the library.

pub fn oracle_kl(t: &[f64], p: &[f64]) -> f64 {
    t.iter()
        .zip(p)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}

pub fn oracle_er(t: &[f64], p: &[f64], r: f64) -> f64 {
    t.iter()
        .zip(p)
        .filter(|(a, b)| **a > 0.0 && *a / *b > r)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}

pub fn oracle_set(t: &[f64], p: &[f64], r: f64) -> Vec<usize> {
    (0..t.len()).filter(|&i| t[i] > 0.0 && t[i] / p[i] > r).collect()
}

pub fn oracle_median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// First integer r in range minimizing |median ER^r − median KL|.
pub fn oracle_choose_r(preds: &[Vec<f64>], t: &[f64], lo: u32, hi: u32) -> u32 {
    let kl = oracle_median(&preds.iter().map(|p| oracle_kl(t, p)).collect::<Vec<_>>());
    let mut best = (lo, f64::INFINITY);
    for r in lo..=hi {
        let er = oracle_median(
            &preds
                .iter()
                .map(|p| oracle_er(t, p, r as f64))
                .collect::<Vec<_>>(),
        );
        let gap = (er - kl).abs();
        if gap < best.1 {
            best = (r, gap);
        }
    }
    best.0
}

pub fn oracle_rescale(l: &[f64], tau: f64) -> Vec<f64> {
    let w: Vec<f64> = l.iter().map(|x| (x / tau).exp()).collect();
    let z: f64 = w.iter().sum();
    w.iter().map(|x| x / z).collect()
}

fn is_word(c: char) -> bool {
    c.is_alphanumeric()
}

/// Quadratic scan: at each position take the longest alias that does not
/// split a word, then skip past it.
pub fn oracle_count(text: &str, aliases: &[Vec<String>]) -> Vec<f64> {
    let mut counts = vec![0.0; aliases.len()];
    let mut i = 0;
    while i < text.len() {
        let mut best: Option<(usize, usize)> = None;
        for (c, list) in aliases.iter().enumerate() {
            for a in list {
                if !text[i..].starts_with(a.as_str()) {
                    continue;
                }
                let end = i + a.len();
                let before = text[..i].chars().last();
                let after = text[end..].chars().next();
                let first = a.chars().next().unwrap();
                let last = a.chars().last().unwrap();
                if before.is_some_and(|b| is_word(b) && is_word(first)) {
                    continue;
                }
                if after.is_some_and(|n| is_word(n) && is_word(last)) {
                    continue;
                }
                if best.is_none_or(|(_, len)| a.len() > len) {
                    best = Some((c, a.len()));
                }
            }
        }
        match best {
            Some((c, len)) => {
                counts[c] += 1.0;
                i += len;
            }
            None => i += text[i..].chars().next().unwrap().len_utf8(),
        }
    }
    counts
}

/// Synthetic document built from alias fragments, glue and noise so that
/// boundary cases (alias inside a word, adjacent aliases) are common.
pub fn synthetic_document<R: Rng>(rng: &mut R, aliases: &[Vec<String>], max_bytes: usize) -> String {
    let glue = [
        " ", ", ", ".", "-", "", "s", "ian ", "\n", " the ", "(", ")", "é", "1",
    ];
    let noise = [
        "Lorem", "ipsum", "dolor", "Uk", "Kingdom", "United", "Congo", "Ñandú",
    ];
    let mut doc = String::new();
    let target = rng.random_range(0..max_bytes);
    while doc.len() < target {
        match rng.random_range(0..3) {
            0 => {
                let list = &aliases[rng.random_range(0..aliases.len())];
                doc.push_str(&list[rng.random_range(0..list.len())]);
            }
            1 => doc.push_str(noise[rng.random_range(0..noise.len())]),
            _ => {}
        }
        doc.push_str(glue[rng.random_range(0..glue.len())]);
    }
    while doc.len() > max_bytes {
        doc.pop();
    }
    doc
}

/// Names chosen to collide: prefixes, shared words, non-ASCII.
pub fn alias_lists() -> Vec<Vec<String>> {
    let raw: &[&[&str]] = &[
        &["United Kingdom", "UK", "Britain"],
        &["Ukraine"],
        &["Congo", "Republic of the Congo"],
        &["Democratic Republic of the Congo", "DRC"],
        &["Niger"],
        &["Nigeria"],
        &["Dominica"],
        &["Dominican Republic"],
        &["Côte d'Ivoire", "Ivory Coast"],
        &["Ñandúland"],
    ];
    raw.iter()
        .map(|l| l.iter().map(|s| s.to_string()).collect())
        .collect()
}

pub fn alias_set() -> CandidateSet {
    CandidateSet::new(
        alias_lists()
            .into_iter()
            .map(|l| Country::new(l[0].clone(), l[1..].to_vec()).unwrap())
            .collect(),
    )
    .unwrap()
}
