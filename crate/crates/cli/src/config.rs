//! The TOML audit configuration and the inputs it points to.
//!
//! Relative paths are resolved against the directory of the config file.
//! The config is embedded in reports exactly as written (plus command-line
//! overrides), so reports do not depend on where the repo is checked out.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use geo_erasure::metrics::RSelection;
use geo_erasure::prompts::{expand, parse_subjects, parse_templates, PromptSet};
use geo_erasure::report::{DEFAULT_BOOTSTRAP_RESAMPLES, DEFAULT_R};
use geo_erasure::scoring::{
    MockBackend, MockTable, ScoringBackend, WireClient, WireClientConfig, BACKEND_URL_ENV,
};
use geo_erasure::{CandidateSet, GroundTruth};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendChoice {
    Mock,
    Wire,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: Option<BackendChoice>,
    pub mock_table: Option<PathBuf>,
    pub model_label: Option<String>,
    pub url: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub templates: Option<PathBuf>,
    pub subjects: Option<PathBuf>,
    /// A prompt-set file; used instead of templates and subjects when set.
    pub prompts: Option<PathBuf>,
    pub population: Option<PathBuf>,
    pub aliases: Option<PathBuf>,
    pub gdp: Option<PathBuf>,
    pub ground_truth_source: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditSettings {
    pub r: f64,
    pub temperature: f64,
    pub bootstrap_resamples: usize,
    pub r_min: u32,
    pub r_max: u32,
    pub r_selection: RSelection,
}

impl Default for AuditSettings {
    fn default() -> Self {
        AuditSettings {
            r: DEFAULT_R,
            temperature: 1.0,
            bootstrap_resamples: DEFAULT_BOOTSTRAP_RESAMPLES,
            r_min: 2,
            r_max: 20,
            r_selection: RSelection::MedianOfEr,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub audit: AuditSettings,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub workers: Option<usize>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub backend_url: Option<String>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub workers: Option<usize>,
}

/// A parsed config plus where its relative paths point.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: AuditConfig,
    pub base_dir: PathBuf,
    /// sha256 of every input file read so far, keyed by role.
    pub hashes: BTreeMap<String, String>,
}

pub fn read_input(role: &str, path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {role} file {}: {e}", path.display())))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("sha256:{:x}", Sha256::digest(bytes))
}

impl Loaded {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let (mut config, base_dir) = match path {
            Some(p) => {
                let text = read_input("config", p)?;
                let config: AuditConfig = toml::from_str(&text)
                    .map_err(|e| CliError::Config(format!("invalid config {}: {e}", p.display())))?;
                let dir = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (config, dir)
            }
            None => (AuditConfig::default(), PathBuf::new()),
        };
        if let Some(url) = &overrides.backend_url {
            config.backend = BackendConfig {
                kind: Some(BackendChoice::Wire),
                url: Some(url.clone()),
                ..Default::default()
            };
        }
        config.seed = overrides.seed.or(config.seed);
        config.workers = overrides.workers.or(config.workers);
        Ok(Loaded {
            config,
            base_dir,
            hashes: BTreeMap::new(),
        })
    }

    pub fn out_dir(&self, overrides: &Overrides) -> PathBuf {
        overrides
            .out_dir
            .clone()
            .or_else(|| self.config.out_dir.as_ref().map(|p| self.resolve(p)))
            .unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn seed(&self) -> u64 {
        self.config.seed.unwrap_or(0)
    }

    pub fn workers(&self) -> usize {
        self.config.workers.unwrap_or(0)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Reads a configured file and records its hash.
    fn read(&mut self, role: &str, path: Option<&PathBuf>) -> Result<String, CliError> {
        let path = path.ok_or_else(|| CliError::Config(format!("no {role} file configured")))?;
        let text = read_input(role, &self.resolve(path))?;
        self.hashes.insert(role.to_string(), sha256_hex(text.as_bytes()));
        Ok(text)
    }

    pub fn prompts(&mut self) -> Result<PromptSet, CliError> {
        let data = self.config.data.clone();
        if data.prompts.is_some() {
            let text = self.read("prompts", data.prompts.as_ref())?;
            return Ok(PromptSet::from_json(&text)?);
        }
        let templates = parse_templates(&self.read("templates", data.templates.as_ref())?)?;
        let subjects = parse_subjects(&self.read("subjects", data.subjects.as_ref())?)?;
        Ok(expand(&templates, &subjects)?)
    }

    pub fn candidates(&mut self) -> Result<CandidateSet, CliError> {
        let text = self.read("aliases", self.config.data.aliases.clone().as_ref())?;
        Ok(CandidateSet::from_aliases_json(text.as_bytes())?)
    }

    pub fn ground_truth(&mut self) -> Result<GroundTruth, CliError> {
        let candidates = self.candidates()?;
        let population = self.config.data.population.clone();
        let text = self.read("population", population.as_ref())?;
        let label = self.config.data.ground_truth_source.clone().unwrap_or_else(|| {
            population
                .as_ref()
                .and_then(|p| p.file_name())
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default()
        });
        Ok(geo_erasure::distributions::load_ground_truth(
            text.as_bytes(),
            &candidates,
            &label,
        )?)
    }

    /// The configured backend; falls back to the backend URL environment
    /// variable when the config names none.
    pub fn backend(&mut self) -> Result<Arc<dyn ScoringBackend>, CliError> {
        let b = self.config.backend.clone();
        match b.kind {
            Some(BackendChoice::Mock) => {
                let text = self.read("mock_table", b.mock_table.as_ref())?;
                let table = MockTable::parse(&text)?;
                Ok(Arc::new(MockBackend::new(table, b.model_label.unwrap_or_else(|| "mock".into()))))
            }
            Some(BackendChoice::Wire) => connect(b.url.as_deref()),
            None => match std::env::var(BACKEND_URL_ENV).ok().filter(|s| !s.is_empty()) {
                Some(url) => connect(Some(&url)),
                None => Err(CliError::Config(format!(
                    "no backend configured; pass --backend-url, set {BACKEND_URL_ENV}, or add a [backend] section"
                ))),
            },
        }
    }

    /// Whether a backend could be built without failing on configuration.
    pub fn has_backend(&self) -> bool {
        self.config.backend.kind.is_some() || std::env::var(BACKEND_URL_ENV).is_ok_and(|s| !s.is_empty())
    }

    /// The config as recorded in outputs; settings that cannot change
    /// results (worker count, output location) are left out.
    pub fn embedded(&self) -> serde_json::Value {
        let mut config = self.config.clone();
        config.workers = None;
        config.out_dir = None;
        serde_json::to_value(&config).expect("config serializes")
    }
}

fn connect(url: Option<&str>) -> Result<Arc<dyn ScoringBackend>, CliError> {
    let config = WireClientConfig::from_env_or(url)
        .ok_or_else(|| CliError::Config("wire backend needs a url".into()))?;
    let client =
        WireClient::connect(config).map_err(|e| CliError::Backend(format!("cannot reach backend: {e}")))?;
    Ok(Arc::new(client))
}
