//! Alias-aware country mention counts over training corpora and the
//! resulting training-data distribution.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use aho_corasick::{AhoCorasick, AhoCorasickBuilder, MatchKind};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{CandidateSet, ProbDist};
use crate::error::{Error, Result};
use crate::metrics;

pub const DEFAULT_FLOOR: f64 = 1e-12;

/// Weighted per-country mention counts. Merging is a plain sum, so it is
/// associative and commutative; integer-valued counts merge exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MentionCounts {
    pub counts: Vec<f64>,
    pub total_documents: u64,
    pub total_bytes: u64,
}

impl MentionCounts {
    pub fn zeros(n: usize) -> Self {
        MentionCounts {
            counts: vec![0.0; n],
            total_documents: 0,
            total_bytes: 0,
        }
    }

    pub fn merge(mut self, other: &MentionCounts) -> Self {
        debug_assert_eq!(self.counts.len(), other.counts.len());
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total_documents += other.total_documents;
        self.total_bytes += other.total_bytes;
        self
    }

    pub fn scaled(mut self, weight: f64) -> Self {
        for c in &mut self.counts {
            *c *= weight;
        }
        self
    }
}

/// Multi-pattern matcher over all aliases of a candidate set.
///
/// A match must not split a word: an alias that starts (ends) with an
/// alphanumeric character needs a non-alphanumeric character or the text
/// edge before (after) it. Among matches, the leftmost wins and then the
/// longest; matches never overlap.
#[derive(Debug, Clone)]
pub struct MentionMatcher {
    automaton: AhoCorasick,
    owners: Vec<usize>,
    countries: usize,
}

impl MentionMatcher {
    pub fn new(candidates: &CandidateSet, case_insensitive: bool) -> Result<Self> {
        let mut patterns = Vec::new();
        let mut owners = Vec::new();
        for (i, country) in candidates.countries().iter().enumerate() {
            for alias in country.aliases() {
                patterns.push(alias.as_str());
                owners.push(i);
            }
        }
        let automaton = AhoCorasickBuilder::new()
            .match_kind(MatchKind::Standard)
            .ascii_case_insensitive(case_insensitive)
            .build(&patterns)
            .map_err(|e| Error::Validation(format!("cannot build alias matcher: {e}")))?;
        Ok(MentionMatcher {
            automaton,
            owners,
            countries: candidates.len(),
        })
    }

    /// Non-overlapping matches as `(start, end, country index)`.
    pub fn find(&self, text: &str) -> Vec<(usize, usize, usize)> {
        // longest boundary-respecting match per start position
        let mut best: Vec<(usize, usize, usize)> = Vec::new();
        for m in self.automaton.find_overlapping_iter(text) {
            if !on_boundary(text, m.start(), m.end()) {
                continue;
            }
            let cand = (m.start(), m.end(), self.owners[m.pattern().as_usize()]);
            match best.iter_mut().find(|b| b.0 == cand.0) {
                Some(b) if cand.1 > b.1 => *b = cand,
                Some(_) => {}
                None => best.push(cand),
            }
        }
        best.sort_unstable_by_key(|b| b.0);
        let mut out = Vec::new();
        let mut pos = 0;
        for b in best {
            if b.0 >= pos {
                pos = b.1;
                out.push(b);
            }
        }
        out
    }

    pub fn count(&self, document: &str) -> MentionCounts {
        let mut counts = MentionCounts::zeros(self.countries);
        for (_, _, owner) in self.find(document) {
            counts.counts[owner] += 1.0;
        }
        counts.total_documents = 1;
        counts.total_bytes = document.len() as u64;
        counts
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

fn on_boundary(text: &str, start: usize, end: usize) -> bool {
    let matched = &text[start..end];
    let first = matched.chars().next();
    let last = matched.chars().next_back();
    let before = text[..start].chars().next_back();
    let after = text[end..].chars().next();
    let splits = |edge: Option<char>, inner: Option<char>| matches!((edge, inner), (Some(a), Some(b)) if is_word_char(a) && is_word_char(b));
    !splits(before, first) && !splits(after, last)
}

/// Mention counts for a single document.
pub fn count_mentions(document: &str, candidates: &CandidateSet) -> Result<MentionCounts> {
    Ok(MentionMatcher::new(candidates, false)?.count(document))
}

/// How documents are delimited inside a shard file.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordFormat {
    /// One document per line.
    #[default]
    Newline,
    /// Each document preceded by its byte length as a little-endian u32.
    LengthDelimited,
}

impl FromStr for RecordFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "" | "newline" => Ok(RecordFormat::Newline),
            "length" | "length_delimited" => Ok(RecordFormat::LengthDelimited),
            other => Err(Error::Validation(format!("unknown record format {other:?}"))),
        }
    }
}

/// Where a dataset's documents come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DocumentSource {
    InMemory(Vec<String>),
    Files {
        paths: Vec<PathBuf>,
        format: RecordFormat,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusDataset {
    pub name: String,
    /// Number of epochs the dataset was included for.
    pub weight: f64,
    pub source: DocumentSource,
}

impl CorpusDataset {
    pub fn in_memory(name: impl Into<String>, weight: f64, documents: Vec<String>) -> Result<Self> {
        let d = CorpusDataset {
            name: name.into(),
            weight,
            source: DocumentSource::InMemory(documents),
        };
        d.validate()?;
        Ok(d)
    }

    fn validate(&self) -> Result<()> {
        if !(self.weight.is_finite() && self.weight > 0.0) {
            return Err(Error::Validation(format!(
                "dataset {:?} has non-positive weight {}",
                self.name, self.weight
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    name: String,
    weight: f64,
    path_glob: String,
    #[serde(default)]
    format: Option<String>,
}

/// Reads `name,weight,path_glob[,format]` rows. Relative globs resolve
/// against `base_dir`; files matched by a glob are taken in sorted order.
pub fn load_manifest<R: Read>(reader: R, base_dir: &Path) -> Result<Vec<CorpusDataset>> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected = ["name", "weight", "path_glob"];
    if headers.len() < 3 || headers.iter().take(3).ne(expected) {
        return Err(Error::Schema {
            row: 1,
            message: format!("expected header name,weight,path_glob[,format], found {headers:?}"),
        });
    }
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<ManifestRow>().enumerate() {
        let row = row.map_err(|e| Error::Schema {
            row: i + 2,
            message: e.to_string(),
        })?;
        let format: RecordFormat = row.format.as_deref().unwrap_or("").parse()?;
        let pattern = if Path::new(&row.path_glob).is_absolute() {
            row.path_glob.clone()
        } else {
            base_dir.join(&row.path_glob).to_string_lossy().into_owned()
        };
        let mut paths: Vec<PathBuf> = glob::glob(&pattern)
            .map_err(|e| Error::Schema {
                row: i + 2,
                message: format!("bad glob {:?}: {e}", row.path_glob),
            })?
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| {
                let path = e.path().to_path_buf();
                Error::io(path, e.into())
            })?;
        paths.sort();
        if paths.is_empty() {
            log::warn!(
                "dataset {:?}: glob {:?} matched no files",
                row.name,
                row.path_glob
            );
        }
        let d = CorpusDataset {
            name: row.name,
            weight: row.weight,
            source: DocumentSource::Files { paths, format },
        };
        d.validate()?;
        out.push(d);
    }
    if out.is_empty() {
        return Err(Error::Validation("manifest lists no datasets".into()));
    }
    Ok(out)
}

fn decode(bytes: &[u8], origin: &Path) -> String {
    match String::from_utf8_lossy(bytes) {
        std::borrow::Cow::Borrowed(s) => s.to_string(),
        std::borrow::Cow::Owned(s) => {
            log::warn!("{}: replaced undecodable bytes", origin.display());
            s
        }
    }
}

/// Splits a shard into documents. Splits happen only at record boundaries.
pub fn read_documents(path: &Path, format: RecordFormat) -> Result<Vec<String>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        RecordFormat::Newline => Ok(bytes
            .split(|b| *b == b'\n')
            .map(|line| line.strip_suffix(b"\r").unwrap_or(line))
            .filter(|line| !line.is_empty())
            .map(|line| decode(line, path))
            .collect()),
        RecordFormat::LengthDelimited => {
            let mut docs = Vec::new();
            let mut rest = bytes.as_slice();
            while !rest.is_empty() {
                let (len, tail) = rest
                    .split_first_chunk::<4>()
                    .map(|(l, t)| (u32::from_le_bytes(*l) as usize, t))
                    .ok_or_else(|| {
                        Error::Validation(format!("{}: truncated length prefix", path.display()))
                    })?;
                if tail.len() < len {
                    return Err(Error::Validation(format!(
                        "{}: record of {len} bytes runs past end of file",
                        path.display()
                    )));
                }
                docs.push(decode(&tail[..len], path));
                rest = &tail[len..];
            }
            Ok(docs)
        }
    }
}

/// Writes documents in the length-delimited record format.
pub fn write_length_delimited<S: AsRef<str>>(documents: &[S]) -> Vec<u8> {
    let mut out = Vec::new();
    for d in documents {
        let b = d.as_ref().as_bytes();
        out.extend_from_slice(&(b.len() as u32).to_le_bytes());
        out.extend_from_slice(b);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileOptions {
    /// Count assigned to countries never mentioned; 0 disables flooring.
    pub floor: f64,
    /// Worker threads; 0 means available parallelism.
    pub workers: usize,
    pub case_insensitive: bool,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        ProfileOptions {
            floor: DEFAULT_FLOOR,
            workers: 0,
            case_insensitive: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub name: String,
    pub weight: f64,
    pub counts: MentionCounts,
}

/// The training-data country distribution `p^train`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainProfile {
    pub dist: ProbDist,
    /// Weighted counts summed over datasets, before flooring.
    pub counts: MentionCounts,
    pub per_dataset: Vec<DatasetCounts>,
    pub floored_countries: Vec<String>,
    pub floor: f64,
}

fn count_documents(matcher: &MentionMatcher, docs: &[String]) -> MentionCounts {
    docs.par_iter()
        .map(|d| matcher.count(d))
        .reduce(|| MentionCounts::zeros(matcher.countries), |a, b| a.merge(&b))
}

fn count_dataset(matcher: &MentionMatcher, dataset: &CorpusDataset) -> Result<MentionCounts> {
    match &dataset.source {
        DocumentSource::InMemory(docs) => Ok(count_documents(matcher, docs)),
        DocumentSource::Files { paths, format } => paths
            .par_iter()
            .map(|p| Ok(count_documents(matcher, &read_documents(p, *format)?)))
            .try_reduce(|| MentionCounts::zeros(matcher.countries), |a, b| Ok(a.merge(&b))),
    }
}

/// Weighted, floored and normalized mention counts over all datasets.
pub fn profile(
    datasets: &[CorpusDataset],
    candidates: &Arc<CandidateSet>,
    options: &ProfileOptions,
) -> Result<TrainProfile> {
    if datasets.is_empty() {
        return Err(Error::Contract("at least one dataset is required".into()));
    }
    if !(options.floor.is_finite() && options.floor >= 0.0) {
        return Err(Error::Contract(format!(
            "floor must be >= 0, got {}",
            options.floor
        )));
    }
    datasets.iter().try_for_each(CorpusDataset::validate)?;
    let matcher = MentionMatcher::new(candidates, options.case_insensitive)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if options.workers > 0 {
        builder = builder.num_threads(options.workers);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Contract(format!("cannot start worker pool: {e}")))?;

    let mut per_dataset = Vec::with_capacity(datasets.len());
    for d in datasets {
        let counts = pool.install(|| count_dataset(&matcher, d))?;
        per_dataset.push(DatasetCounts {
            name: d.name.clone(),
            weight: d.weight,
            counts,
        });
    }
    // weighted sum in dataset order keeps the result independent of threads
    let total = per_dataset
        .iter()
        .fold(MentionCounts::zeros(candidates.len()), |acc, d| {
            acc.merge(&d.counts.clone().scaled(d.weight))
        });

    let mut floored_countries = Vec::new();
    let weights: Vec<f64> = total
        .counts
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            if c == 0.0 && options.floor > 0.0 {
                floored_countries.push(candidates.country(i).canonical_name().to_string());
                options.floor
            } else {
                c
            }
        })
        .collect();
    let dist = ProbDist::from_weights(candidates.clone(), &weights)?;
    Ok(TrainProfile {
        dist,
        counts: total,
        per_dataset,
        floored_countries,
        floor: options.floor,
    })
}

/// ER of the data against the ground truth, of the model against the data,
/// and of the model against the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataBias {
    pub er_true_vs_train: f64,
    pub er_train_vs_model: f64,
    pub er_true_vs_model: f64,
}

pub fn data_bias(p_true: &ProbDist, profile: &TrainProfile, preds: &ProbDist, r: f64) -> Result<DataBias> {
    Ok(DataBias {
        er_true_vs_train: metrics::erasure(p_true, &profile.dist, r)?,
        er_train_vs_model: metrics::erasure(&profile.dist, preds, r)?,
        er_true_vs_model: metrics::erasure(p_true, preds, r)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::Country;

    fn uk_set() -> CandidateSet {
        CandidateSet::new(vec![
            Country::new("United Kingdom", vec!["UK".into()]).unwrap(),
            Country::named("Ukraine").unwrap(),
            Country::named("Canada").unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn counts_repeated_mentions() {
        let c = count_mentions("I visited Canada. Canada is cold.", &uk_set()).unwrap();
        assert_eq!(c.counts, [0.0, 0.0, 2.0]);
    }

    #[test]
    fn alias_inside_word_does_not_match() {
        let c = count_mentions("The United Kingdom (UK) differs from Ukraine.", &uk_set()).unwrap();
        assert_eq!(c.counts, [2.0, 1.0, 0.0]);
        let c = count_mentions("", &uk_set()).unwrap();
        assert_eq!(c.counts, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn longest_match_wins() {
        let set = CandidateSet::new(vec![
            Country::named("Congo").unwrap(),
            Country::new(
                "Democratic Republic of the Congo",
                vec!["Republic of the Congo".into()],
            )
            .unwrap(),
        ])
        .unwrap();
        let c = count_mentions("Democratic Republic of the Congo, Congo", &set).unwrap();
        assert_eq!(c.counts, [1.0, 1.0]);
    }

    #[test]
    fn case_switch() {
        let set = uk_set();
        let m = MentionMatcher::new(&set, true).unwrap();
        assert_eq!(m.count("canada CANADA").counts, [0.0, 0.0, 2.0]);
        assert_eq!(count_mentions("canada", &set).unwrap().counts, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn weighted_profile() {
        let set = Arc::new(CandidateSet::from_names(&["A", "B"]).unwrap());
        let d1 = CorpusDataset::in_memory("one", 2.0, vec!["A".into()]).unwrap();
        let d2 = CorpusDataset::in_memory("two", 1.0, vec!["B B".into(), "B".into()]).unwrap();
        let p = profile(&[d1, d2], &set, &ProfileOptions::default()).unwrap();
        assert_eq!(p.counts.counts, [2.0, 3.0]);
        assert!((p.dist.probs()[0] - 0.4).abs() < 1e-15);
        assert!(p.floored_countries.is_empty());
        assert_eq!(p.counts.total_documents, 3);
    }

    #[test]
    fn zero_counts_are_floored_or_rejected() {
        let set = Arc::new(CandidateSet::from_names(&["A", "B"]).unwrap());
        let d = CorpusDataset::in_memory("d", 1.0, vec!["A A A".into()]).unwrap();
        let p = profile(std::slice::from_ref(&d), &set, &ProfileOptions::default()).unwrap();
        assert_eq!(p.floored_countries, ["B"]);
        assert!(p.dist.probs()[1] > 0.0);
        let empty = CorpusDataset::in_memory("d", 1.0, vec!["nothing".into()]).unwrap();
        let opts = ProfileOptions {
            floor: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            profile(&[empty], &set, &opts),
            Err(Error::Normalization(_))
        ));
        assert!(CorpusDataset::in_memory("d", 0.0, vec![]).is_err());
    }

    #[test]
    fn length_delimited_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("shard.bin");
        let docs = ["first\nline", "", "Canada"];
        fs::write(&path, write_length_delimited(&docs)).unwrap();
        assert_eq!(
            read_documents(&path, RecordFormat::LengthDelimited).unwrap(),
            docs
        );
        fs::write(&path, [5, 0, 0, 0, b'a']).unwrap();
        assert!(read_documents(&path, RecordFormat::LengthDelimited).is_err());
    }

    #[test]
    fn manifest_globs() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a1.txt"), "Canada\nUK\n").unwrap();
        fs::write(dir.path().join("a2.txt"), "Ukraine\n").unwrap();
        let manifest = "name,weight,path_glob,format\nweb,2,a*.txt,newline\n";
        let ds = load_manifest(manifest.as_bytes(), dir.path()).unwrap();
        assert_eq!(ds.len(), 1);
        let set = Arc::new(uk_set());
        let p = profile(&ds, &set, &ProfileOptions::default()).unwrap();
        assert_eq!(p.counts.counts, [2.0, 2.0, 2.0]);
        assert!(load_manifest("a,b,c\n".as_bytes(), dir.path()).is_err());
        assert!(load_manifest("name,weight,path_glob\nx,-1,*\n".as_bytes(), dir.path()).is_err());
    }

    #[test]
    fn data_bias_zeros() {
        let set = Arc::new(CandidateSet::from_names(&["A", "B"]).unwrap());
        let d = CorpusDataset::in_memory("d", 1.0, vec!["A A B".into()]).unwrap();
        let p = profile(&[d], &set, &ProfileOptions::default()).unwrap();
        let p_true = p.dist.clone();
        let preds = ProbDist::new(set, vec![0.9, 0.1]).unwrap();
        let b = data_bias(&p_true, &p, &preds, 3.0).unwrap();
        assert_eq!(b.er_true_vs_train, 0.0);
        let b = data_bias(&preds, &p, &p.dist, 3.0).unwrap();
        assert_eq!(b.er_train_vs_model, 0.0);
    }
}
