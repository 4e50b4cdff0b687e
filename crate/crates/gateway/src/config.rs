//! Gateway configuration: one TOML document per site.
//!
//! Relative paths are resolved against the directory holding the config
//! file. Loading checks everything that can be checked without serving: one
//! baseline per task, unique names, and that every referenced file exists.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::Duration;

use livelab_core::ingest::SiteSchema;
use livelab_core::metrics::RewardWeights;
use livelab_core::{SystemDescriptor, SystemKind, Task};
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {}: {source}", path.display())]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{what} not found: {}", path.display())]
    MissingFile { what: String, path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RppLimits {
    #[serde(default = "default_ranking_rpp")]
    pub ranking: usize,
    #[serde(default = "default_recommendation_rpp")]
    pub recommendation: usize,
}

fn default_ranking_rpp() -> usize {
    10
}

fn default_recommendation_rpp() -> usize {
    6
}

impl Default for RppLimits {
    fn default() -> Self {
        Self {
            ranking: default_ranking_rpp(),
            recommendation: default_recommendation_rpp(),
        }
    }
}

impl RppLimits {
    pub fn for_task(&self, task: Task) -> usize {
        match task {
            Task::Ranking => self.ranking,
            Task::Recommendation => self.recommendation,
        }
    }
}

/// Corpora the built-in baselines and pre-computed systems draw on.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorporaConfig {
    /// Ranking corpus.
    pub documents: Option<PathBuf>,
    pub documents_schema: Option<SiteSchema>,
    #[serde(default)]
    pub document_fields: Vec<String>,
    /// Head queries mapping query strings to run-file query ids.
    pub head_queries: Option<PathBuf>,
    /// Seed publications for recommendations.
    pub publications: Option<PathBuf>,
    /// Research datasets that get recommended.
    pub datasets: Option<PathBuf>,
    #[serde(default)]
    pub dataset_fields: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemEntry {
    pub name: String,
    pub kind: SystemKind,
    pub task: Task,
    #[serde(default)]
    pub baseline: bool,
    pub source: Option<String>,
}

impl SystemEntry {
    pub fn descriptor(&self) -> SystemDescriptor {
        SystemDescriptor {
            name: self.name.clone(),
            kind: self.kind,
            task: self.task,
            is_baseline: self.baseline,
            source: self.source.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    site: String,
    #[serde(default = "default_listen")]
    listen: String,
    #[serde(default = "default_timeout_secs")]
    session_timeout_secs: u64,
    #[serde(default = "default_flush_secs")]
    flush_interval_secs: u64,
    #[serde(default)]
    rotation_seed: u64,
    #[serde(default = "default_log")]
    feedback_log: PathBuf,
    feedback_sink: Option<String>,
    #[serde(default = "default_remote_timeout_ms")]
    remote_timeout_ms: u64,
    #[serde(default = "default_in_flight")]
    remote_max_in_flight: usize,
    #[serde(default)]
    rpp: RppLimits,
    #[serde(default)]
    corpora: CorporaConfig,
    weights: Option<PathBuf>,
    #[serde(default)]
    systems: Vec<SystemEntry>,
}

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}

fn default_timeout_secs() -> u64 {
    30 * 60
}

fn default_flush_secs() -> u64 {
    60
}

fn default_log() -> PathBuf {
    PathBuf::from("feedback.jsonl")
}

fn default_remote_timeout_ms() -> u64 {
    2000
}

fn default_in_flight() -> usize {
    8
}

/// Where flushed feedback goes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SinkTarget {
    Directory(PathBuf),
    Http(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatewayConfig {
    pub site: String,
    /// Address the HTTP service binds to.
    pub listen: String,
    pub session_timeout: Duration,
    pub flush_interval: Duration,
    pub rotation_seed: u64,
    pub feedback_log: PathBuf,
    pub feedback_sink: Option<SinkTarget>,
    pub remote_timeout: Duration,
    pub remote_max_in_flight: usize,
    pub rpp: RppLimits,
    pub corpora: CorporaConfig,
    pub weights: RewardWeights,
    pub systems: Vec<SystemEntry>,
}

impl GatewayConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: path.to_owned(),
                message,
            },
            other => other,
        })
    }

    /// Parses and validates; relative paths resolve against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: PathBuf::from("<config>"),
            message: e.to_string(),
        })?;
        let resolve = |p: &Path| {
            if p.is_absolute() {
                p.to_owned()
            } else {
                base_dir.join(p)
            }
        };

        let mut corpora = raw.corpora.clone();
        for p in [
            &mut corpora.documents,
            &mut corpora.head_queries,
            &mut corpora.publications,
            &mut corpora.datasets,
        ]
        .into_iter()
        .flatten()
        {
            *p = resolve(p);
        }

        let mut systems = raw.systems.clone();
        for s in &mut systems {
            if let (SystemKind::Precomputed, Some(src)) = (s.kind, &s.source) {
                s.source = Some(resolve(Path::new(src)).display().to_string());
            }
        }

        let weights = match &raw.weights {
            Some(p) => load_weights(&resolve(p))?,
            None => RewardWeights::default(),
        };

        let feedback_sink = raw.feedback_sink.as_deref().map(|s| {
            if s.starts_with("http://") || s.starts_with("https://") {
                SinkTarget::Http(s.to_owned())
            } else {
                SinkTarget::Directory(resolve(Path::new(s)))
            }
        });

        let config = GatewayConfig {
            site: raw.site,
            listen: raw.listen,
            session_timeout: Duration::from_secs(raw.session_timeout_secs),
            flush_interval: Duration::from_secs(raw.flush_interval_secs),
            rotation_seed: raw.rotation_seed,
            feedback_log: resolve(&raw.feedback_log),
            feedback_sink,
            remote_timeout: Duration::from_millis(raw.remote_timeout_ms),
            remote_max_in_flight: raw.remote_max_in_flight,
            rpp: raw.rpp,
            corpora,
            weights,
            systems,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.site.trim().is_empty() {
            return invalid("site name is empty".into());
        }
        if self.session_timeout.is_zero() {
            return invalid("session_timeout_secs must be positive".into());
        }
        if self.remote_timeout.is_zero() {
            return invalid("remote_timeout_ms must be positive".into());
        }
        if self.remote_max_in_flight == 0 {
            return invalid("remote_max_in_flight must be positive".into());
        }
        if self.rpp.ranking == 0 || self.rpp.recommendation == 0 {
            return invalid("rpp values must be positive".into());
        }
        self.weights.validate().map_err(ConfigError::Invalid)?;

        let mut names = HashSet::new();
        for s in &self.systems {
            if s.name.trim().is_empty() {
                return invalid("system with empty name".into());
            }
            if !names.insert(s.name.as_str()) {
                return invalid(format!("system name '{}' registered twice", s.name));
            }
        }
        let mut baselines: BTreeMap<Task, Vec<&str>> = BTreeMap::new();
        let mut tasks = HashSet::new();
        for s in &self.systems {
            tasks.insert(s.task);
            if s.baseline {
                baselines.entry(s.task).or_default().push(&s.name);
            }
        }
        for task in tasks {
            match baselines.get(&task).map(Vec::as_slice) {
                Some([_]) => {}
                Some(many) => {
                    return invalid(format!(
                        "task {task} has {} baseline systems ({}); exactly one is required",
                        many.len(),
                        many.join(", ")
                    ))
                }
                None => return invalid(format!("task {task} has no baseline system")),
            }
        }

        for s in &self.systems {
            match s.kind {
                SystemKind::Precomputed => {
                    let src = s.source.as_deref().ok_or_else(|| {
                        ConfigError::Invalid(format!(
                            "pre-computed system '{}' needs a source run file",
                            s.name
                        ))
                    })?;
                    require_file(&format!("run file of '{}'", s.name), Path::new(src))?;
                    if s.task == Task::Ranking && self.corpora.head_queries.is_none() {
                        return invalid(format!(
                            "pre-computed ranking system '{}' needs corpora.head_queries",
                            s.name
                        ));
                    }
                }
                SystemKind::LiveRemote => {
                    let url = s.source.as_deref().unwrap_or_default();
                    if !(url.starts_with("http://") || url.starts_with("https://")) {
                        return invalid(format!(
                            "live system '{}' needs an http(s) base URL as source",
                            s.name
                        ));
                    }
                }
                SystemKind::BuiltinBaseline => match s.task {
                    Task::Ranking => {
                        if self.corpora.documents.is_none() {
                            return invalid(format!("built-in system '{}' needs corpora.documents", s.name));
                        }
                        if self.corpora.document_fields.is_empty() {
                            return invalid(format!(
                                "built-in system '{}' needs corpora.document_fields",
                                s.name
                            ));
                        }
                    }
                    Task::Recommendation => {
                        if self.corpora.publications.is_none() || self.corpora.datasets.is_none() {
                            return invalid(format!(
                                "built-in system '{}' needs corpora.publications and corpora.datasets",
                                s.name
                            ));
                        }
                        if self.corpora.dataset_fields.is_empty() {
                            return invalid(format!(
                                "built-in system '{}' needs corpora.dataset_fields",
                                s.name
                            ));
                        }
                    }
                },
            }
        }
        let c = &self.corpora;
        for (what, path) in [
            ("document corpus", &c.documents),
            ("head query file", &c.head_queries),
            ("publication corpus", &c.publications),
            ("dataset corpus", &c.datasets),
        ] {
            if let Some(p) = path {
                require_file(what, p)?;
            }
        }
        Ok(())
    }

    pub fn systems_for(&self, task: Task) -> impl Iterator<Item = &SystemEntry> {
        self.systems.iter().filter(move |s| s.task == task)
    }
}

fn require_file(what: &str, path: &Path) -> Result<(), ConfigError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(ConfigError::MissingFile {
            what: what.to_owned(),
            path: path.to_owned(),
        })
    }
}

/// Weight table file: a `[weights]` table of element = weight and an
/// optional `default_element`.
pub fn load_weights(path: &Path) -> Result<RewardWeights, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_owned(),
        source,
    })?;
    let weights: RewardWeights = toml::from_str(&text).map_err(|e| ConfigError::Parse {
        path: path.to_owned(),
        message: e.to_string(),
    })?;
    weights.validate().map_err(ConfigError::Invalid)?;
    Ok(weights)
}
