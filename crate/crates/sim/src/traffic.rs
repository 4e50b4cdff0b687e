//! Traffic shape: how many sessions, how many requests each, and which
//! requests, drawn from a power law over the popularity-ranked vocabulary.

use std::path::Path;

use livelab_core::Task;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::click::{ClickModel, ModelError};

#[derive(Debug, Error)]
pub enum TrafficError {
    #[error("cannot read traffic config {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid traffic config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid traffic config: {0}")]
    Invalid(String),
    #[error("invalid click model: {0}")]
    Model(#[from] ModelError),
}

/// Draws vocabulary entries with probability proportional to
/// `rank^(-exponent)`, rank 1 being the first entry.
#[derive(Debug, Clone)]
pub struct QuerySampler<'a> {
    vocabulary: &'a [String],
    index: WeightedIndex<f64>,
}

impl<'a> QuerySampler<'a> {
    /// `None` for an empty vocabulary or a negative or non-finite exponent.
    pub fn new(vocabulary: &'a [String], exponent: f64) -> Option<Self> {
        if vocabulary.is_empty() || !exponent.is_finite() || exponent < 0.0 {
            return None;
        }
        let weights = (1..=vocabulary.len()).map(|r| (r as f64).powf(-exponent));
        Some(Self {
            vocabulary,
            index: WeightedIndex::new(weights).ok()?,
        })
    }

    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.index.sample(rng)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> &'a str {
        &self.vocabulary[self.sample_index(rng)]
    }
}

/// `n` seeded draws; empty when the vocabulary is empty.
pub fn sample_queries(vocabulary: &[String], exponent: f64, n: usize, seed: u64) -> Vec<String> {
    let Some(sampler) = QuerySampler::new(vocabulary, exponent) else {
        return Vec::new();
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sampler.sample(&mut rng).to_owned()).collect()
}

/// Where the oracle comes from when a simulation runs against configured
/// systems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// System whose ranking is the oracle; the task's baseline when absent.
    pub oracle: Option<String>,
    /// Oracle ranking depth.
    pub depth: usize,
    /// Top oracle documents counted as relevant.
    pub relevant: usize,
    /// Cap on vocabulary size, most popular first.
    pub max_vocabulary: Option<usize>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            oracle: None,
            depth: 50,
            relevant: 5,
            max_vocabulary: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrafficConfig {
    pub sessions: usize,
    /// Inclusive range of requests per session, drawn uniformly.
    pub queries_per_session: [usize; 2],
    pub zipf_exponent: f64,
    pub seed: u64,
    pub task: Task,
    /// Simulated time between session starts, in milliseconds.
    pub session_gap_ms: i64,
    /// Simulated time between requests within a session, in milliseconds.
    pub request_gap_ms: i64,
    pub start_ms: i64,
    pub world: WorldConfig,
    pub click_model: ClickModel,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        Self {
            sessions: 1000,
            queries_per_session: [1, 3],
            zipf_exponent: 1.0,
            seed: 42,
            task: Task::Ranking,
            session_gap_ms: 60_000,
            request_gap_ms: 30_000,
            start_ms: 1_600_000_000_000,
            world: WorldConfig::default(),
            click_model: ClickModel::default(),
        }
    }
}

impl TrafficConfig {
    pub fn load(path: &Path) -> Result<Self, TrafficError> {
        let text = std::fs::read_to_string(path).map_err(|source| TrafficError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, TrafficError> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), TrafficError> {
        if !self.zipf_exponent.is_finite() || self.zipf_exponent < 0.0 {
            return Err(TrafficError::Invalid(format!(
                "zipf_exponent must be a finite number >= 0, got {}",
                self.zipf_exponent
            )));
        }
        let [lo, hi] = self.queries_per_session;
        if lo > hi {
            return Err(TrafficError::Invalid(format!(
                "queries_per_session [{lo}, {hi}] is empty"
            )));
        }
        if self.session_gap_ms < 0 || self.request_gap_ms < 0 {
            return Err(TrafficError::Invalid("time gaps must be non-negative".into()));
        }
        if self.world.relevant > self.world.depth {
            return Err(TrafficError::Invalid(format!(
                "world.relevant ({}) exceeds world.depth ({})",
                self.world.relevant, self.world.depth
            )));
        }
        self.click_model.validate()?;
        Ok(())
    }
}
