//! Team-Draft interleaving, click attribution and per-impression judgement.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ClickEvent, InterleavedEntry, InterleavedList, Team};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum InterleaveError {
    #[error("click on document '{0}' which is not part of the impression")]
    UnknownDocument(String),
}

/// Decides which team drafts first in each round.
pub trait CoinSource {
    fn first_pick(&mut self) -> Team;
}

/// Seeded coin; the same seed always yields the same stream.
#[derive(Debug, Clone)]
pub struct SeededCoin {
    rng: ChaCha8Rng,
}

impl SeededCoin {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl CoinSource for SeededCoin {
    fn first_pick(&mut self) -> Team {
        if self.rng.random_bool(0.5) {
            Team::Exp
        } else {
            Team::Base
        }
    }
}

/// Replays a fixed sequence of flips, cycling when it runs out.
#[derive(Debug, Clone)]
pub struct ScriptedCoin {
    flips: Vec<Team>,
    next: usize,
}

impl ScriptedCoin {
    pub fn new(flips: Vec<Team>) -> Self {
        assert!(!flips.is_empty(), "scripted coin needs at least one flip");
        Self { flips, next: 0 }
    }

    pub fn used(&self) -> usize {
        self.next
    }
}

impl CoinSource for ScriptedCoin {
    fn first_pick(&mut self) -> Team {
        let team = self.flips[self.next % self.flips.len()];
        self.next += 1;
        team
    }
}

struct Drafter<'a, S> {
    list: &'a [S],
    cursor: usize,
}

impl<'a, S: AsRef<str>> Drafter<'a, S> {
    fn skip_used(&mut self, used: &HashSet<&str>) {
        while self
            .list
            .get(self.cursor)
            .is_some_and(|d| used.contains(d.as_ref()))
        {
            self.cursor += 1;
        }
    }

    fn exhausted(&mut self, used: &HashSet<&str>) -> bool {
        self.skip_used(used);
        self.cursor >= self.list.len()
    }

    fn pick(&mut self, used: &HashSet<&str>) -> Option<&'a str> {
        self.skip_used(used);
        let doc = self.list.get(self.cursor)?.as_ref();
        self.cursor += 1;
        Some(doc)
    }
}

/// Drafts up to `k` documents from the two lists. Each round flips the coin
/// once to decide who picks first, then both teams append their best document
/// not yet on the page. A document in both lists is credited to whichever
/// team drafts it first.
pub fn team_draft_interleave<S: AsRef<str>>(
    exp: &[S],
    base: &[S],
    k: usize,
    coin: &mut dyn CoinSource,
) -> Vec<InterleavedEntry> {
    let mut out: Vec<InterleavedEntry> = Vec::with_capacity(k.min(exp.len() + base.len()));
    let mut used: HashSet<&str> = HashSet::new();
    let mut exp_team = Drafter { list: exp, cursor: 0 };
    let mut base_team = Drafter {
        list: base,
        cursor: 0,
    };

    while out.len() < k {
        if exp_team.exhausted(&used) && base_team.exhausted(&used) {
            break;
        }
        let first = coin.first_pick();
        for team in [first, first.other()] {
            if out.len() >= k {
                break;
            }
            let drafter = match team {
                Team::Exp => &mut exp_team,
                Team::Base => &mut base_team,
            };
            if let Some(doc) = drafter.pick(&used) {
                used.insert(doc);
                out.push(InterleavedEntry {
                    docid: doc.to_owned(),
                    team,
                });
            }
        }
    }
    out
}

/// Clicks credited to each team of one impression.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickSplit {
    pub exp: u64,
    pub base: u64,
}

impl ClickSplit {
    pub fn total(&self) -> u64 {
        self.exp + self.base
    }
}

pub fn attribute_clicks(
    interleaved: &InterleavedList,
    clicks: &[ClickEvent],
) -> Result<ClickSplit, InterleaveError> {
    let mut split = ClickSplit::default();
    for click in clicks {
        match interleaved.team_of(&click.docid) {
            Some(Team::Exp) => split.exp += 1,
            Some(Team::Base) => split.base += 1,
            None => return Err(InterleaveError::UnknownDocument(click.docid.clone())),
        }
    }
    Ok(split)
}

/// Result of one impression from the experimental system's point of view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Judgement {
    Win,
    Loss,
    Tie,
    NoClick,
}

impl Judgement {
    /// 1 for a win, -1 for a loss, 0 for a tie; nothing without clicks.
    pub fn as_score(self) -> Option<f64> {
        match self {
            Judgement::Win => Some(1.0),
            Judgement::Loss => Some(-1.0),
            Judgement::Tie => Some(0.0),
            Judgement::NoClick => None,
        }
    }
}

pub fn judge(split: ClickSplit) -> Judgement {
    use std::cmp::Ordering::*;
    match split.exp.cmp(&split.base) {
        Greater => Judgement::Win,
        Less => Judgement::Loss,
        Equal if split.exp > 0 => Judgement::Tie,
        Equal => Judgement::NoClick,
    }
}

/// 1-based position of the first experimental document, if any.
pub fn highest_exp_rank(interleaved: &InterleavedList) -> Option<usize> {
    interleaved
        .entries
        .iter()
        .position(|e| e.team == Team::Exp)
        .map(|i| i + 1)
}
