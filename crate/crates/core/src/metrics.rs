//! Interleaving and click metrics: Win/Loss/Tie/Outcome, CTR, weighted-click
//! Reward and its normalized share, plus per-round aggregation over a
//! replayed feedback log.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::interleave::{attribute_clicks, highest_exp_rank, judge, ClickSplit, Judgement};
use crate::model::{ClickEvent, Impression, InterleavedList, SessionId, Task, Team};
use crate::stats::{spearman, wilcoxon_signed_rank, CorrelationResult, TestResult};
use crate::store::Snapshot;

/// Share of wins among decided impressions; `None` when nothing was decided.
pub fn outcome(wins: u64, losses: u64) -> Option<f64> {
    let decided = wins + losses;
    (decided > 0).then(|| wins as f64 / decided as f64)
}

/// Clicks per impression, 0 for no impressions.
pub fn ctr(clicks: u64, impressions: u64) -> f64 {
    if impressions == 0 {
        0.0
    } else {
        clicks as f64 / impressions as f64
    }
}

/// Weight per SERP element. Elements not in the table, including the
/// designated default element, weigh 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub weights: BTreeMap<String, f64>,
    #[serde(default = "default_element")]
    pub default_element: String,
}

pub const DEFAULT_ELEMENT: &str = "Click";

fn default_element() -> String {
    DEFAULT_ELEMENT.to_owned()
}

/// Elements logged on the literature portal, in table order.
pub const LITERATURE_ELEMENTS: [&str; 7] = [
    "Bookmark",
    "Details",
    "Fulltext",
    "In Stock",
    "More Links",
    "Order",
    "Title",
];

impl Default for RewardWeights {
    fn default() -> Self {
        let weights = [
            ("Bookmark", 10.0),
            ("Order", 10.0),
            ("Fulltext", 8.0),
            ("In Stock", 8.0),
            ("More Links", 2.0),
            ("Title", 1.0),
            ("Details", 1.0),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v))
        .collect();
        Self {
            weights,
            default_element: default_element(),
        }
    }
}

impl RewardWeights {
    pub fn weight(&self, element: &str) -> f64 {
        self.weights.get(element).copied().unwrap_or(1.0)
    }

    pub fn is_known(&self, element: &str) -> bool {
        self.weights.contains_key(element) || element == self.default_element
    }

    /// Maps labels outside the table to the default element.
    pub fn canonical_element<'a>(&'a self, element: &'a str) -> &'a str {
        if self.is_known(element) {
            element
        } else {
            &self.default_element
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            weights: self
                .weights
                .iter()
                .map(|(k, v)| (k.clone(), v * factor))
                .collect(),
            default_element: self.default_element.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.weights.is_empty() {
            return Err("weight table is empty".into());
        }
        if let Some((name, w)) = self.weights.iter().find(|(_, w)| !w.is_finite() || **w < 0.0) {
            return Err(format!(
                "weight of '{name}' must be finite and non-negative, got {w}"
            ));
        }
        if self.default_element.is_empty() {
            return Err("default element name is empty".into());
        }
        Ok(())
    }
}

/// Clicks per SERP element.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClickCounts(pub BTreeMap<String, u64>);

impl ClickCounts {
    pub fn add(&mut self, element: &str, count: u64) {
        *self.0.entry(element.to_owned()).or_default() += count;
    }

    pub fn merge(&mut self, other: &ClickCounts) {
        for (k, v) in &other.0 {
            self.add(k, *v);
        }
    }

    pub fn total(&self) -> u64 {
        self.0.values().sum()
    }

    pub fn get(&self, element: &str) -> u64 {
        self.0.get(element).copied().unwrap_or(0)
    }
}

impl<S: Into<String>> FromIterator<(S, u64)> for ClickCounts {
    fn from_iter<I: IntoIterator<Item = (S, u64)>>(iter: I) -> Self {
        let mut counts = ClickCounts::default();
        for (k, v) in iter {
            counts.add(&k.into(), v);
        }
        counts
    }
}

/// Weighted click sum over all elements.
pub fn reward(counts: &ClickCounts, weights: &RewardWeights) -> f64 {
    counts
        .0
        .iter()
        .map(|(element, c)| weights.weight(element) * *c as f64)
        .sum()
}

/// Experimental share of the pairwise reward; `None` when both are zero.
pub fn nreward(reward_exp: f64, reward_base: f64) -> Option<f64> {
    let total = reward_exp + reward_base;
    (total > 0.0).then(|| reward_exp / total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemRoundStats {
    pub task: Task,
    pub system: String,
    pub is_baseline: bool,
    pub sessions: u64,
    pub impressions: u64,
    pub clicks: u64,
    pub ctr: f64,
    pub wins: u64,
    pub losses: u64,
    pub ties: u64,
    pub outcome: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardReport {
    pub task: Task,
    pub exp_system: String,
    pub base_system: String,
    pub exp_clicks: ClickCounts,
    pub base_clicks: ClickCounts,
    pub reward_exp: f64,
    pub reward_base: f64,
    pub nreward_exp: Option<f64>,
    pub nreward_base: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceRow {
    pub task: Task,
    pub exp_system: String,
    pub base_system: String,
    /// Clicked interleaved impressions contributing a pair.
    pub pairs: usize,
    pub test: Option<TestResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankCorrelationRow {
    pub task: Task,
    /// Clicked impressions with at least one experimental document.
    pub observations: usize,
    pub correlation: Option<CorrelationResult>,
}

/// How the signed-rank test pairs observations.
pub const WILCOXON_PAIRING: &str =
    "paired per-impression click counts (experimental, baseline) over clicked interleaved impressions";

/// Label of the aggregate reward row over every experimental system.
pub const ALL_EXPERIMENTAL: &str = "All experimental systems";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub systems: Vec<SystemRoundStats>,
    pub rewards: Vec<RewardReport>,
    pub significance: Vec<SignificanceRow>,
    pub rank_correlation: Vec<RankCorrelationRow>,
    pub wilcoxon_pairing: String,
}

#[derive(Default)]
struct Tally {
    sessions: BTreeSet<SessionId>,
    impressions: u64,
    clicks: u64,
    wins: u64,
    losses: u64,
    ties: u64,
}

impl Tally {
    fn record(&mut self, session: SessionId, own_clicks: u64, verdict: Judgement) {
        self.sessions.insert(session);
        self.impressions += 1;
        self.clicks += own_clicks;
        match verdict {
            Judgement::Win => self.wins += 1,
            Judgement::Loss => self.losses += 1,
            Judgement::Tie => self.ties += 1,
            Judgement::NoClick => {}
        }
    }

    fn into_stats(self, task: Task, system: String, is_baseline: bool) -> SystemRoundStats {
        SystemRoundStats {
            task,
            system,
            is_baseline,
            sessions: self.sessions.len() as u64,
            impressions: self.impressions,
            clicks: self.clicks,
            ctr: ctr(self.clicks, self.impressions),
            wins: self.wins,
            losses: self.losses,
            ties: self.ties,
            outcome: outcome(self.wins, self.losses),
        }
    }
}

fn mirrored(verdict: Judgement) -> Judgement {
    match verdict {
        Judgement::Win => Judgement::Loss,
        Judgement::Loss => Judgement::Win,
        other => other,
    }
}

fn split_of(imp: &Impression, clicks: &[ClickEvent]) -> ClickSplit {
    // The snapshot has already checked that every click resolves.
    attribute_clicks(&imp.interleaved, clicks).expect("snapshot guarantees click integrity")
}

fn element_counts(
    interleaved: &InterleavedList,
    clicks: &[ClickEvent],
    weights: &RewardWeights,
) -> (ClickCounts, ClickCounts) {
    let mut exp = ClickCounts::default();
    let mut base = ClickCounts::default();
    for c in clicks {
        let element = weights.canonical_element(&c.element);
        match interleaved.team_of(&c.docid) {
            Some(Team::Exp) => exp.add(element, 1),
            Some(Team::Base) => base.add(element, 1),
            None => {}
        }
    }
    (exp, base)
}

fn reward_row(
    task: Task,
    exp_system: String,
    base_system: String,
    exp_clicks: ClickCounts,
    base_clicks: ClickCounts,
    weights: &RewardWeights,
) -> RewardReport {
    let reward_exp = reward(&exp_clicks, weights);
    let reward_base = reward(&base_clicks, weights);
    RewardReport {
        task,
        exp_system,
        base_system,
        exp_clicks,
        base_clicks,
        reward_exp,
        reward_base,
        nreward_exp: nreward(reward_exp, reward_base),
        nreward_base: nreward(reward_base, reward_exp),
    }
}

/// Aggregates one round. Experimental rows count only impressions the system
/// was interleaved in; the baseline row of a task aggregates against every
/// experimental system with mirrored judgements. Clicks are those credited to
/// the row's own team.
pub fn aggregate_round(snapshot: &Snapshot, weights: &RewardWeights) -> RoundReport {
    type PairKey = (Task, String, String);
    let mut exp_tallies: BTreeMap<PairKey, Tally> = BTreeMap::new();
    let mut base_tallies: BTreeMap<(Task, String), Tally> = BTreeMap::new();
    let mut pair_clicks: BTreeMap<PairKey, (ClickCounts, ClickCounts)> = BTreeMap::new();
    let mut pairs: BTreeMap<PairKey, Vec<(f64, f64)>> = BTreeMap::new();
    let mut rank_obs: BTreeMap<Task, (Vec<f64>, Vec<f64>)> = BTreeMap::new();

    for imp in &snapshot.impressions {
        let clicks = snapshot.clicks_of(imp.impression_id);
        let split = split_of(imp, clicks);
        let verdict = judge(split);
        let il = &imp.interleaved;
        let key = (imp.task, il.exp_system.clone(), il.base_system.clone());

        exp_tallies
            .entry(key.clone())
            .or_default()
            .record(imp.session_id, split.exp, verdict);
        base_tallies
            .entry((imp.task, il.base_system.clone()))
            .or_default()
            .record(imp.session_id, split.base, mirrored(verdict));

        let (exp_counts, base_counts) = element_counts(il, clicks, weights);
        let entry = pair_clicks.entry(key.clone()).or_default();
        entry.0.merge(&exp_counts);
        entry.1.merge(&base_counts);

        if let Some(score) = verdict.as_score() {
            pairs
                .entry(key)
                .or_default()
                .push((split.exp as f64, split.base as f64));
            if let Some(rank) = highest_exp_rank(il) {
                let obs = rank_obs.entry(imp.task).or_default();
                obs.0.push(score);
                obs.1.push(rank as f64);
            }
        } else {
            pairs.entry(key).or_default();
        }
    }

    let mut systems = Vec::new();
    for ((task, base), tally) in base_tallies {
        systems.push(tally.into_stats(task, base.clone(), true));
        let exp_rows = exp_tallies
            .iter()
            .filter(|((t, _, b), _)| *t == task && *b == base)
            .map(|((_, e, _), _)| e.clone())
            .collect::<Vec<_>>();
        for exp in exp_rows {
            let tally = exp_tallies
                .remove(&(task, exp.clone(), base.clone()))
                .expect("key listed above");
            systems.push(tally.into_stats(task, exp, false));
        }
    }

    let mut rewards = Vec::new();
    let mut totals: BTreeMap<(Task, String), (ClickCounts, ClickCounts, usize)> = BTreeMap::new();
    for ((task, exp, base), (exp_counts, base_counts)) in pair_clicks {
        let total = totals.entry((task, base.clone())).or_default();
        total.0.merge(&exp_counts);
        total.1.merge(&base_counts);
        total.2 += 1;
        rewards.push(reward_row(task, exp, base, exp_counts, base_counts, weights));
    }
    for ((task, base), (exp_counts, base_counts, n_systems)) in totals {
        if n_systems > 1 {
            rewards.push(reward_row(
                task,
                ALL_EXPERIMENTAL.to_owned(),
                base,
                exp_counts,
                base_counts,
                weights,
            ));
        }
    }

    let significance = pairs
        .into_iter()
        .map(|((task, exp_system, base_system), obs)| SignificanceRow {
            task,
            exp_system,
            base_system,
            pairs: obs.len(),
            test: wilcoxon_signed_rank(&obs).ok(),
        })
        .collect();

    let rank_correlation = rank_obs
        .into_iter()
        .map(|(task, (scores, ranks))| RankCorrelationRow {
            task,
            observations: scores.len(),
            correlation: spearman(&scores, &ranks).ok(),
        })
        .collect();

    RoundReport {
        systems,
        rewards,
        significance,
        rank_correlation,
        wilcoxon_pairing: WILCOXON_PAIRING.to_owned(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryStats {
    pub unique_queries: u64,
    pub avg_query_length: f64,
    pub avg_queries_per_session: f64,
    pub avg_clicks_per_query: f64,
}

/// Statistics over ranking requests, both interleaved and baseline-only.
/// Queries are compared after trimming and lowercasing; terms are
/// whitespace-separated.
pub fn query_stats(snapshot: &Snapshot) -> QueryStats {
    let mut unique: BTreeSet<String> = BTreeSet::new();
    let mut sessions: BTreeSet<SessionId> = BTreeSet::new();
    let mut occurrences = 0u64;
    let mut clicks = 0u64;
    for imp in snapshot.impressions.iter().filter(|i| i.task == Task::Ranking) {
        unique.insert(imp.request.trim().to_lowercase());
        sessions.insert(imp.session_id);
        occurrences += 1;
        clicks += snapshot.clicks_of(imp.impression_id).len() as u64;
    }
    for req in snapshot.requests.iter().filter(|r| r.task == Task::Ranking) {
        unique.insert(req.request.trim().to_lowercase());
        sessions.insert(req.session_id);
        occurrences += 1;
    }
    let mean = |num: f64, den: usize| if den == 0 { 0.0 } else { num / den as f64 };
    let total_terms: usize = unique.iter().map(|q| q.split_whitespace().count()).sum();
    QueryStats {
        unique_queries: unique.len() as u64,
        avg_query_length: mean(total_terms as f64, unique.len()),
        avg_queries_per_session: mean(occurrences as f64, sessions.len()),
        avg_clicks_per_query: mean(clicks as f64, occurrences as usize),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryImpressions {
    pub task: Task,
    /// 1-based popularity rank.
    pub rank: usize,
    pub request: String,
    pub impressions: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankCtr {
    pub task: Task,
    pub rank: usize,
    /// Impressions long enough to have this rank.
    pub impressions: u64,
    pub clicks: u64,
    pub ctr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementClicks {
    pub element: String,
    pub clicks: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distributions {
    pub impressions_per_query: Vec<QueryImpressions>,
    pub ctr_per_rank: Vec<RankCtr>,
    pub clicks_per_element: Vec<ElementClicks>,
}

/// Exact count tables over interleaved impressions.
pub fn distributions(snapshot: &Snapshot) -> Distributions {
    let mut per_query: BTreeMap<(Task, &str), u64> = BTreeMap::new();
    let mut shown: BTreeMap<(Task, usize), u64> = BTreeMap::new();
    let mut clicked: BTreeMap<(Task, usize), u64> = BTreeMap::new();
    let mut elements: BTreeMap<&str, u64> = BTreeMap::new();

    for imp in &snapshot.impressions {
        *per_query.entry((imp.task, imp.request.as_str())).or_default() += 1;
        for rank in 1..=imp.interleaved.len() {
            *shown.entry((imp.task, rank)).or_default() += 1;
        }
        let positions: HashMap<&str, usize> = imp
            .interleaved
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.docid.as_str(), i + 1))
            .collect();
        for click in snapshot.clicks_of(imp.impression_id) {
            if let Some(rank) = positions.get(click.docid.as_str()) {
                *clicked.entry((imp.task, *rank)).or_default() += 1;
            }
            *elements.entry(click.element.as_str()).or_default() += 1;
        }
    }

    let mut by_task: BTreeMap<Task, Vec<(&str, u64)>> = BTreeMap::new();
    for ((task, request), n) in per_query {
        by_task.entry(task).or_default().push((request, n));
    }
    let mut impressions_per_query = Vec::new();
    for (task, mut rows) in by_task {
        rows.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        impressions_per_query.extend(rows.into_iter().enumerate().map(|(i, (request, n))| {
            QueryImpressions {
                task,
                rank: i + 1,
                request: request.to_owned(),
                impressions: n,
            }
        }));
    }

    let ctr_per_rank = shown
        .into_iter()
        .map(|((task, rank), impressions)| {
            let clicks = clicked.get(&(task, rank)).copied().unwrap_or(0);
            RankCtr {
                task,
                rank,
                impressions,
                clicks,
                ctr: ctr(clicks, impressions),
            }
        })
        .collect();

    let mut clicks_per_element: Vec<ElementClicks> = elements
        .into_iter()
        .map(|(element, clicks)| ElementClicks {
            element: element.to_owned(),
            clicks,
        })
        .collect();
    clicks_per_element.sort_by(|a, b| b.clicks.cmp(&a.clicks).then_with(|| a.element.cmp(&b.element)));

    Distributions {
        impressions_per_query,
        ctr_per_rank,
        clicks_per_element,
    }
}

/// Least-squares slope of ln(count) against ln(rank) for counts listed in
/// rank order; zero counts are skipped. `None` with fewer than two points.
pub fn loglog_slope(counts_by_rank: &[u64]) -> Option<f64> {
    let points: Vec<(f64, f64)> = counts_by_rank
        .iter()
        .enumerate()
        .filter(|(_, c)| **c > 0)
        .map(|(i, c)| (((i + 1) as f64).ln(), (*c as f64).ln()))
        .collect();
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = points.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    Some(sxy / sxx)
}

/// Rounds half away from zero to `digits` decimals and prints them all.
pub fn format_fixed(value: f64, digits: usize) -> String {
    let scale = 10f64.powi(digits as i32);
    format!("{:.*}", digits, (value * scale).round() / scale)
}
