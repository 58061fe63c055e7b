//! Prompt corpus construction: subject substitution over base formulations,
//! plus train/test splits used by mitigation experiments.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SUBJECT_SLOT: &str = "{subject}";
const VERB_SLOT: &str = "{verb}";
const POSSESSIVE_SLOT: &str = "{possessive}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateStyle {
    /// `{subject} {verb} ...`, e.g. "I live in".
    VerbForm,
    /// `{possessive} ...`, e.g. "My homeland is".
    PossessiveForm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: u32,
    pub style: TemplateStyle,
    pub pattern: String,
    #[serde(default)]
    pub verb_lemma: Option<String>,
    pub verb_group: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Person {
    FirstSingular,
    Second,
    ThirdSingular,
    Plural,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conjugation {
    pub first_singular: String,
    pub second: String,
    pub third_singular: String,
    pub plural: String,
}

impl Conjugation {
    pub fn form(&self, person: Person) -> &str {
        match person {
            Person::FirstSingular => &self.first_singular,
            Person::Second => &self.second,
            Person::ThirdSingular => &self.third_singular,
            Person::Plural => &self.plural,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PronounEntry {
    pub text: String,
    /// Pronoun class used by the pronoun split, e.g. "I", "she".
    pub class: String,
    pub person: Person,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PossessiveEntry {
    pub text: String,
    pub class: String,
}

/// Pronouns, possessive determiners, relative nouns and verb conjugations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectConfig {
    #[serde(rename = "pronoun", default)]
    pub pronouns: Vec<PronounEntry>,
    #[serde(rename = "possessive", default)]
    pub possessives: Vec<PossessiveEntry>,
    #[serde(default)]
    pub relatives: Vec<String>,
    #[serde(default)]
    pub conjugation: BTreeMap<String, Conjugation>,
}

#[derive(Debug, Deserialize)]
struct TemplateFile {
    template: Vec<PromptTemplate>,
}

pub fn parse_templates(text: &str) -> Result<Vec<PromptTemplate>> {
    let file: TemplateFile = toml::from_str(text)?;
    Ok(file.template)
}

pub fn parse_subjects(text: &str) -> Result<SubjectConfig> {
    Ok(toml::from_str(text)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SubjectTag {
    Pronoun {
        pronoun: String,
        class: String,
    },
    Possessive {
        possessive: String,
        class: String,
    },
    Relative {
        possessive: String,
        relative: String,
        class: String,
    },
}

impl SubjectTag {
    pub fn class(&self) -> &str {
        match self {
            SubjectTag::Pronoun { class, .. }
            | SubjectTag::Possessive { class, .. }
            | SubjectTag::Relative { class, .. } => class,
        }
    }
}

impl fmt::Display for SubjectTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SubjectTag::Pronoun { pronoun, .. } => f.write_str(pronoun),
            SubjectTag::Possessive { possessive, .. } => f.write_str(possessive),
            SubjectTag::Relative {
                possessive, relative, ..
            } => {
                write!(f, "{possessive} {relative}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    pub template_id: u32,
    pub subject_tag: SubjectTag,
    pub verb_group: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    prompts: Vec<Prompt>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    priors: Option<Vec<f64>>,
}

impl PromptSet {
    pub fn new(prompts: Vec<Prompt>, priors: Option<Vec<f64>>) -> Result<Self> {
        let mut texts = HashSet::new();
        let mut keys = HashSet::new();
        for p in &prompts {
            if p.text.is_empty() || p.text.ends_with(char::is_whitespace) {
                return Err(Error::Validation(format!(
                    "prompt {:?} is empty or ends in whitespace",
                    p.text
                )));
            }
            if p.text.contains('{') || p.text.contains('}') {
                return Err(Error::Validation(format!(
                    "prompt {:?} still contains a placeholder",
                    p.text
                )));
            }
            if !texts.insert(p.text.as_str()) {
                return Err(Error::Validation(format!("duplicate prompt {:?}", p.text)));
            }
            if !keys.insert((p.template_id, &p.subject_tag)) {
                return Err(Error::Validation(format!(
                    "duplicate (template {}, subject {}) pair",
                    p.template_id, p.subject_tag
                )));
            }
        }
        if let Some(w) = &priors {
            if w.len() != prompts.len() {
                return Err(Error::Validation(format!(
                    "{} priors for {} prompts",
                    w.len(),
                    prompts.len()
                )));
            }
            if w.iter().any(|x| !x.is_finite() || *x <= 0.0) {
                return Err(Error::Validation("prompt priors must be positive".into()));
            }
            let total: f64 = w.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::Validation(format!("prompt priors sum to {total}")));
            }
        }
        Ok(PromptSet { prompts, priors })
    }

    /// Prompts given as bare strings, tagged by position.
    pub fn from_texts<S: AsRef<str>>(texts: &[S]) -> Result<Self> {
        let prompts = texts
            .iter()
            .enumerate()
            .map(|(i, t)| Prompt {
                text: t.as_ref().to_string(),
                template_id: i as u32,
                subject_tag: SubjectTag::Pronoun {
                    pronoun: String::new(),
                    class: String::new(),
                },
                verb_group: String::new(),
            })
            .collect();
        PromptSet::new(prompts, None)
    }

    pub fn prompts(&self) -> &[Prompt] {
        &self.prompts
    }

    pub fn priors(&self) -> Option<&[f64]> {
        self.priors.as_deref()
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.prompts.iter().map(|p| p.text.as_str())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("prompt set serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: PromptSet = serde_json::from_str(text)?;
        PromptSet::new(raw.prompts, raw.priors)
    }

    fn subset(&self, indices: &[usize]) -> Result<PromptSet> {
        let prompts = indices.iter().map(|&i| self.prompts[i].clone()).collect();
        let priors = self.priors.as_ref().map(|w| {
            let total: f64 = indices.iter().map(|&i| w[i]).sum();
            indices.iter().map(|&i| w[i] / total).collect()
        });
        PromptSet::new(prompts, priors)
    }
}

fn count(pattern: &str, slot: &str) -> usize {
    pattern.matches(slot).count()
}

fn validate_template(t: &PromptTemplate, subjects: &SubjectConfig) -> Result<()> {
    let (subj, verb, poss) = (
        count(&t.pattern, SUBJECT_SLOT),
        count(&t.pattern, VERB_SLOT),
        count(&t.pattern, POSSESSIVE_SLOT),
    );
    let stripped = t
        .pattern
        .replace(SUBJECT_SLOT, "")
        .replace(VERB_SLOT, "")
        .replace(POSSESSIVE_SLOT, "");
    if stripped.contains('{') || stripped.contains('}') {
        return Err(Error::Template(format!(
            "template {} has an unknown slot: {:?}",
            t.id, t.pattern
        )));
    }
    if t.pattern.trim().is_empty() || t.pattern.ends_with(char::is_whitespace) {
        return Err(Error::Template(format!(
            "template {} is empty or ends in whitespace",
            t.id
        )));
    }
    match t.style {
        TemplateStyle::VerbForm => {
            if subj != 1 || verb != 1 || poss != 0 {
                return Err(Error::Template(format!(
                    "verb_form template {} needs exactly one {SUBJECT_SLOT} and one {VERB_SLOT}: {:?}",
                    t.id, t.pattern
                )));
            }
            let lemma = t
                .verb_lemma
                .as_deref()
                .ok_or_else(|| Error::Template(format!("verb_form template {} has no verb_lemma", t.id)))?;
            if !subjects.conjugation.contains_key(lemma) {
                return Err(Error::Template(format!(
                    "template {}: no conjugation for verb {lemma:?}",
                    t.id
                )));
            }
        }
        TemplateStyle::PossessiveForm => {
            if poss != 1 || subj != 0 || verb != 0 {
                return Err(Error::Template(format!(
                    "possessive_form template {} needs exactly one {POSSESSIVE_SLOT}: {:?}",
                    t.id, t.pattern
                )));
            }
        }
    }
    Ok(())
}

/// Expands every template over every subject.
///
/// Order is template-major, subject-minor: pronouns first, then each
/// possessive crossed with each relative noun. Possessive-form templates use
/// the bare possessives and "<possessive> <relative>'s" in place of pronouns.
/// Later duplicates of an already produced text are dropped.
pub fn expand(templates: &[PromptTemplate], subjects: &SubjectConfig) -> Result<PromptSet> {
    if templates.is_empty() {
        return Err(Error::Template("no templates given".into()));
    }
    let mut ids = HashSet::new();
    for t in templates {
        validate_template(t, subjects)?;
        if !ids.insert(t.id) {
            return Err(Error::Template(format!("duplicate template id {}", t.id)));
        }
    }

    let mut prompts = Vec::new();
    let mut seen = HashSet::new();
    let mut push = |prompts: &mut Vec<Prompt>, text: String, t: &PromptTemplate, tag: SubjectTag| {
        if seen.insert(text.clone()) {
            prompts.push(Prompt {
                text,
                template_id: t.id,
                subject_tag: tag,
                verb_group: t.verb_group.clone(),
            });
        }
    };

    for t in templates {
        match t.style {
            TemplateStyle::VerbForm => {
                let conj = &subjects.conjugation[t.verb_lemma.as_deref().unwrap_or_default()];
                let fill = |subject: &str, person: Person| {
                    t.pattern
                        .replace(SUBJECT_SLOT, subject)
                        .replace(VERB_SLOT, conj.form(person))
                };
                for p in &subjects.pronouns {
                    let tag = SubjectTag::Pronoun {
                        pronoun: p.text.clone(),
                        class: p.class.clone(),
                    };
                    push(&mut prompts, fill(&p.text, p.person), t, tag);
                }
                for poss in &subjects.possessives {
                    for rel in &subjects.relatives {
                        let subject = format!("{} {rel}", poss.text);
                        let tag = SubjectTag::Relative {
                            possessive: poss.text.clone(),
                            relative: rel.clone(),
                            class: poss.class.clone(),
                        };
                        push(&mut prompts, fill(&subject, Person::ThirdSingular), t, tag);
                    }
                }
            }
            TemplateStyle::PossessiveForm => {
                for poss in &subjects.possessives {
                    let tag = SubjectTag::Possessive {
                        possessive: poss.text.clone(),
                        class: poss.class.clone(),
                    };
                    push(
                        &mut prompts,
                        t.pattern.replace(POSSESSIVE_SLOT, &poss.text),
                        t,
                        tag,
                    );
                }
                for poss in &subjects.possessives {
                    for rel in &subjects.relatives {
                        let owner = format!("{} {rel}'s", poss.text);
                        let tag = SubjectTag::Relative {
                            possessive: poss.text.clone(),
                            relative: rel.clone(),
                            class: poss.class.clone(),
                        };
                        push(&mut prompts, t.pattern.replace(POSSESSIVE_SLOT, &owner), t, tag);
                    }
                }
            }
        }
    }
    PromptSet::new(prompts, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    Random,
    Pronoun,
    Verb,
}

impl std::str::FromStr for SplitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SplitStrategy::Random),
            "pronoun" => Ok(SplitStrategy::Pronoun),
            "verb" => Ok(SplitStrategy::Verb),
            other => Err(Error::Split(format!("unknown split strategy {other:?}"))),
        }
    }
}

/// Fraction of prompts (random) or groups (pronoun/verb) held out for test.
pub const TEST_FRACTION: f64 = 0.25;

fn group_key(prompt: &Prompt, strategy: SplitStrategy) -> &str {
    match strategy {
        SplitStrategy::Pronoun => prompt.subject_tag.class(),
        _ => &prompt.verb_group,
    }
}

/// Splits a prompt set into train and test parts.
///
/// `Random` holds out 25% of the prompts; `Pronoun` and `Verb` hold out 25%
/// of the pronoun classes or verb groups (at least one, never all), chosen by
/// `fold_seed`. Both parts keep the input order.
pub fn split(
    prompt_set: &PromptSet,
    strategy: SplitStrategy,
    fold_seed: u64,
) -> Result<(PromptSet, PromptSet)> {
    let mut rng = ChaCha8Rng::seed_from_u64(fold_seed);
    let n = prompt_set.len();
    if n < 2 {
        return Err(Error::Split(format!("cannot split {n} prompt(s)")));
    }
    match strategy {
        SplitStrategy::Random => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let n_test = held_out(n);
            let mut test: Vec<usize> = order[..n_test].to_vec();
            let mut train: Vec<usize> = order[n_test..].to_vec();
            test.sort_unstable();
            train.sort_unstable();
            Ok((prompt_set.subset(&train)?, prompt_set.subset(&test)?))
        }
        SplitStrategy::Pronoun | SplitStrategy::Verb => {
            let mut groups = distinct_groups(prompt_set, strategy);
            if groups.len() < 2 {
                return Err(Error::Split(format!(
                    "{strategy:?} split needs at least two groups, found {}",
                    groups.len()
                )));
            }
            groups.shuffle(&mut rng);
            let n_test = held_out(groups.len());
            split_by_groups(prompt_set, strategy, &groups[..n_test])
        }
    }
}

fn held_out(n: usize) -> usize {
    ((n as f64 * TEST_FRACTION).round() as usize).clamp(1, n - 1)
}

fn distinct_groups(prompt_set: &PromptSet, strategy: SplitStrategy) -> Vec<String> {
    let mut seen = HashSet::new();
    prompt_set
        .prompts()
        .iter()
        .map(|p| group_key(p, strategy))
        .filter(|g| seen.insert(*g))
        .map(str::to_string)
        .collect()
}

/// Puts every prompt whose pronoun class / verb group is listed in
/// `test_groups` into the test part.
pub fn split_by_groups<S: AsRef<str>>(
    prompt_set: &PromptSet,
    strategy: SplitStrategy,
    test_groups: &[S],
) -> Result<(PromptSet, PromptSet)> {
    if strategy == SplitStrategy::Random {
        return Err(Error::Split("random split has no groups".into()));
    }
    let test_groups: HashSet<&str> = test_groups.iter().map(|g| g.as_ref()).collect();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, p) in prompt_set.prompts().iter().enumerate() {
        if test_groups.contains(group_key(p, strategy)) {
            test.push(i);
        } else {
            train.push(i);
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Split(format!("{strategy:?} split leaves one side empty")));
    }
    Ok((prompt_set.subset(&train)?, prompt_set.subset(&test)?))
}

/// One train/test fold, listed by prompt text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFold {
    pub fold: usize,
    pub seed: u64,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Train/test folds over one prompt set, in the file format shared with the
/// finetuning tools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub strategy: SplitStrategy,
    pub seed: u64,
    pub folds: Vec<SplitFold>,
}

impl SplitManifest {
    /// Fold `k` is drawn with seed `seed + k`.
    pub fn build(prompt_set: &PromptSet, strategy: SplitStrategy, folds: usize, seed: u64) -> Result<Self> {
        if folds == 0 {
            return Err(Error::Split("at least one fold is required".into()));
        }
        let folds = (0..folds)
            .map(|k| {
                let fold_seed = seed.wrapping_add(k as u64);
                let (train, test) = split(prompt_set, strategy, fold_seed)?;
                Ok(SplitFold {
                    fold: k,
                    seed: fold_seed,
                    train: train.texts().map(str::to_string).collect(),
                    test: test.texts().map(str::to_string).collect(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(SplitManifest {
            strategy,
            seed,
            folds,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("split manifest serializes") + "\n"
    }

    /// Parses a manifest and checks every fold against `prompt_set`.
    pub fn from_json(text: &str, prompt_set: &PromptSet) -> Result<Self> {
        let manifest: SplitManifest = serde_json::from_str(text)?;
        let known: HashSet<&str> = prompt_set.texts().collect();
        for f in &manifest.folds {
            let train: HashSet<&str> = f.train.iter().map(String::as_str).collect();
            if let Some(t) = f
                .train
                .iter()
                .chain(&f.test)
                .find(|t| !known.contains(t.as_str()))
            {
                return Err(Error::Split(format!("fold {}: unknown prompt {t:?}", f.fold)));
            }
            if let Some(t) = f.test.iter().find(|t| train.contains(t.as_str())) {
                return Err(Error::Split(format!("fold {}: {t:?} is in both parts", f.fold)));
            }
            if f.train.len() + f.test.len() != prompt_set.len() {
                return Err(Error::Split(format!(
                    "fold {} does not cover the prompt set",
                    f.fold
                )));
            }
        }
        Ok(manifest)
    }
}
