//! Position-based click model: a result is clicked when it is examined
//! (probability by rank) and found attractive (probability by the system
//! that contributed it and whether it is relevant).

use std::collections::{BTreeMap, HashSet};

use livelab_core::{ClickEvent, Task, Timestamp};
use livelab_gateway::PageResponse;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("{what} must be in [0, 1], got {value}")]
    OutOfRange { what: String, value: f64 },
    #[error("geometric ratio must be in (0, 1), got {0}")]
    BadRatio(f64),
    #[error("element distribution needs at least one positive weight")]
    EmptyElements,
    #[error("element weight for '{0}' is negative or not finite")]
    BadElementWeight(String),
}

/// Probability of examining each rank (1-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Examination {
    /// `ratio^(rank-1)`.
    Geometric { ratio: f64 },
    /// One probability per rank; ranks past the end are never examined.
    PerRank(Vec<f64>),
}

impl Default for Examination {
    fn default() -> Self {
        Examination::Geometric { ratio: 0.7 }
    }
}

impl Examination {
    pub fn probability(&self, rank: usize) -> f64 {
        match self {
            Examination::Geometric { ratio } => ratio.powi(rank.saturating_sub(1) as i32),
            Examination::PerRank(p) => p.get(rank.wrapping_sub(1)).copied().unwrap_or(0.0),
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        match self {
            Examination::Geometric { ratio } if !(*ratio > 0.0 && *ratio < 1.0) => {
                Err(ModelError::BadRatio(*ratio))
            }
            Examination::Geometric { .. } => Ok(()),
            Examination::PerRank(p) => p
                .iter()
                .enumerate()
                .try_for_each(|(i, v)| check_unit(&format!("examination at rank {}", i + 1), *v)),
        }
    }
}

fn check_unit(what: &str, value: f64) -> Result<(), ModelError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(ModelError::OutOfRange {
            what: what.to_owned(),
            value,
        })
    }
}

/// Which SERP element a click lands on. Stored normalized to sum to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, f64>", into = "BTreeMap<String, f64>")]
pub struct ElementDistribution {
    elements: Vec<String>,
    probabilities: Vec<f64>,
}

impl ElementDistribution {
    /// Accepts raw counts or probabilities; they are normalized.
    pub fn new(weights: BTreeMap<String, f64>) -> Result<Self, ModelError> {
        if let Some((name, _)) = weights.iter().find(|(_, w)| !w.is_finite() || **w < 0.0) {
            return Err(ModelError::BadElementWeight(name.clone()));
        }
        let total: f64 = weights.values().sum();
        if total <= 0.0 {
            return Err(ModelError::EmptyElements);
        }
        let (elements, probabilities) = weights.into_iter().map(|(k, w)| (k, w / total)).unzip();
        Ok(Self {
            elements,
            probabilities,
        })
    }

    pub fn probability(&self, element: &str) -> f64 {
        self.elements
            .iter()
            .position(|e| e == element)
            .map_or(0.0, |i| self.probabilities[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.elements
            .iter()
            .map(String::as_str)
            .zip(self.probabilities.iter().copied())
    }

    fn sampler(&self) -> WeightedIndex<f64> {
        WeightedIndex::new(&self.probabilities).expect("validated weights")
    }
}

impl Default for ElementDistribution {
    /// Click totals per element from a literature-search deployment; Details
    /// and Title dominate.
    fn default() -> Self {
        let counts = [
            ("Bookmark", 596.0),
            ("Details", 4322.0),
            ("Fulltext", 2597.0),
            ("In Stock", 966.0),
            ("More Links", 507.0),
            ("Order", 302.0),
            ("Title", 3374.0),
        ];
        Self::new(counts.into_iter().map(|(k, v)| (k.to_owned(), v)).collect()).expect("positive counts")
    }
}

impl TryFrom<BTreeMap<String, f64>> for ElementDistribution {
    type Error = ModelError;

    fn try_from(weights: BTreeMap<String, f64>) -> Result<Self, Self::Error> {
        Self::new(weights)
    }
}

impl From<ElementDistribution> for BTreeMap<String, f64> {
    fn from(d: ElementDistribution) -> Self {
        d.elements.into_iter().zip(d.probabilities).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClickModel {
    pub examination: Examination,
    /// Click probability of an examined relevant document, per contributing
    /// system.
    pub attractiveness: BTreeMap<String, f64>,
    pub default_attractiveness: f64,
    /// Click probability of an examined non-relevant document.
    pub nonrelevant_attractiveness: f64,
    /// Multiplies attractiveness on ranking pages.
    pub ranking_scale: f64,
    /// Multiplies attractiveness on recommendation pages.
    pub recommendation_scale: f64,
    pub elements: ElementDistribution,
}

impl Default for ClickModel {
    fn default() -> Self {
        Self {
            examination: Examination::default(),
            attractiveness: BTreeMap::new(),
            default_attractiveness: 0.7,
            nonrelevant_attractiveness: 0.0,
            ranking_scale: 1.0,
            recommendation_scale: 1.0,
            elements: ElementDistribution::default(),
        }
    }
}

impl ClickModel {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.examination.validate()?;
        for (system, a) in &self.attractiveness {
            check_unit(&format!("attractiveness of {system}"), *a)?;
        }
        check_unit("default_attractiveness", self.default_attractiveness)?;
        check_unit("nonrelevant_attractiveness", self.nonrelevant_attractiveness)?;
        check_unit("ranking_scale", self.ranking_scale)?;
        check_unit("recommendation_scale", self.recommendation_scale)?;
        Ok(())
    }

    pub fn attractiveness_of(&self, system: &str) -> f64 {
        self.attractiveness
            .get(system)
            .copied()
            .unwrap_or(self.default_attractiveness)
    }

    pub fn scale(&self, task: Task) -> f64 {
        match task {
            Task::Ranking => self.ranking_scale,
            Task::Recommendation => self.recommendation_scale,
        }
    }
}

/// One entry of a page as the simulated user sees it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShownDoc {
    pub docid: String,
    /// The system whose team contributed the document.
    pub system: String,
}

/// Page entries paired with the system behind each team label.
pub fn shown_docs(page: &PageResponse) -> Vec<ShownDoc> {
    let c = &page.header.container;
    page.body
        .iter()
        .map(|item| ShownDoc {
            docid: item.docid.clone(),
            system: match (item.team, &c.exp) {
                (livelab_core::Team::Exp, Some(exp)) => exp.clone(),
                _ => c.base.clone(),
            },
        })
        .collect()
}

/// Clicks on a page. Click `i` is stamped `shown_at + 1000 * (position + 1)`
/// milliseconds so each (document, element) pair gets its own timestamp.
pub fn simulate_clicks<R: Rng + ?Sized>(
    page: &[ShownDoc],
    relevant: &HashSet<String>,
    model: &ClickModel,
    task: Task,
    shown_at: Timestamp,
    rng: &mut R,
) -> Vec<ClickEvent> {
    let sampler = model.elements.sampler();
    let scale = model.scale(task);
    let mut clicks = Vec::new();
    for (i, doc) in page.iter().enumerate() {
        // Draw both coins for every position so the stream of random numbers
        // does not depend on earlier outcomes.
        let examined = rng.random::<f64>() < model.examination.probability(i + 1);
        let u = rng.random::<f64>();
        let element = &model.elements.elements[sampler.sample(rng)];
        let attract = if relevant.contains(&doc.docid) {
            model.attractiveness_of(&doc.system) * scale
        } else {
            model.nonrelevant_attractiveness * scale
        };
        if examined && u < attract {
            clicks.push(ClickEvent::new(
                doc.docid.clone(),
                element.clone(),
                shown_at + 1000 * (i as i64 + 1),
            ));
        }
    }
    clicks
}
