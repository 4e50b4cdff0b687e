//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Each criterion also has a wall-clock budget.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use livelab_core::ingest::{
    parse_candidates, parse_candidates_str, parse_run_file, parse_run_str, validate_run_file,
    write_candidates,
};
use livelab_core::interleave::{team_draft_interleave, ScriptedCoin, SeededCoin};
use livelab_core::metrics::{
    aggregate_round, ctr, distributions, format_fixed, loglog_slope, nreward, outcome, reward, ClickCounts,
    RewardWeights, RoundReport, SystemRoundStats, ALL_EXPERIMENTAL, LITERATURE_ELEMENTS,
};
use livelab_core::stats::{spearman, spearman_rho, wilcoxon_signed_rank};
use livelab_core::store::{LogRecord, SessionOpened, Snapshot};
use livelab_core::{
    ClickEvent, FeedbackEvent, Impression, ImpressionId, InterleavedEntry, InterleavedList, SessionId,
    SystemDescriptor, SystemKind, Task, Team,
};
use livelab_gateway::{Adapter, FeedbackStore, Gateway, GatewayParts, RppLimits};
use livelab_sim::click::ClickModel;
use livelab_sim::{run_simulation, Examination, OracleSystem, SimulationSummary, TrafficConfig, World};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

// ---------------------------------------------------------------------------
// Published tables
// ---------------------------------------------------------------------------

/// name, W, L, T, printed Outcome, Sessions, Impressions, Clicks, printed CTR,
/// task, is_baseline.
type Row = (
    &'static str,
    u64,
    u64,
    u64,
    &'static str,
    u64,
    u64,
    u64,
    &'static str,
    Task,
    bool,
);

const R: Task = Task::Ranking;
const S: Task = Task::Recommendation;

const ROUND_ONE: [Row; 8] = [
    (
        "gesis_rec_pyserini",
        36,
        36,
        1,
        ".50",
        2284,
        4195,
        37,
        ".0088",
        S,
        true,
    ),
    (
        "gesis_rec_pyterrier",
        26,
        28,
        1,
        ".48",
        1968,
        3675,
        28,
        ".0076",
        S,
        false,
    ),
    (
        "gesis_rec_precom",
        10,
        8,
        0,
        ".56",
        316,
        520,
        11,
        ".0212",
        S,
        false,
    ),
    (
        "livivo_base",
        332,
        234,
        67,
        ".59",
        1426,
        2329,
        677,
        ".2907",
        R,
        true,
    ),
    (
        "livivo_rank_pyserini",
        215,
        302,
        64,
        ".42",
        1260,
        2135,
        517,
        ".2422",
        R,
        false,
    ),
    ("lemuren_elk", 4, 8, 1, ".33", 45, 55, 10, ".1818", R, false),
    ("tekmas", 6, 10, 1, ".38", 64, 77, 8, ".1039", R, false),
    ("save_fami", 9, 12, 1, ".43", 57, 62, 14, ".2258", R, false),
];

const ROUND_TWO: [Row; 10] = [
    (
        "gesis_rec_pyserini",
        51,
        68,
        2,
        ".43",
        3288,
        6034,
        53,
        ".0088",
        S,
        true,
    ),
    (
        "gesis_rec_pyterrier",
        26,
        25,
        1,
        ".51",
        1529,
        2937,
        27,
        ".0092",
        S,
        false,
    ),
    ("tekma_n", 42, 26, 1, ".62", 1759, 3097, 45, ".0145", S, false),
    (
        "livivo_base",
        2447,
        1063,
        372,
        ".70",
        6481,
        12915,
        3791,
        ".2935",
        R,
        true,
    ),
    (
        "livivo_rank_pyserini",
        48,
        71,
        15,
        ".40",
        243,
        434,
        112,
        ".2581",
        R,
        false,
    ),
    (
        "lemuren_elastic_only",
        707,
        1042,
        218,
        ".40",
        3131,
        6274,
        1273,
        ".2029",
        R,
        false,
    ),
    (
        "lemuren_elastic_preprocessing",
        291,
        1308,
        135,
        ".18",
        2948,
        6026,
        570,
        ".0946",
        R,
        false,
    ),
    ("lemuren_elk", 6, 13, 0, ".32", 61, 69, 10, ".1449", R, false),
    ("tekma_s", 4, 7, 1, ".36", 36, 42, 5, ".1190", R, false),
    ("save_fami", 7, 6, 3, ".54", 62, 70, 20, ".2857", R, false),
];

/// Round, site, Sessions, Impressions, Clicks, printed CTR.
const TRAFFIC: [(u8, &str, u64, u64, u64, &str); 4] = [
    (1, "LIVIVO", 2852, 4658, 2452, ".5264"),
    (1, "GESIS", 4568, 8390, 152, ".0181"),
    (2, "LIVIVO", 12962, 25830, 11562, ".4476"),
    (2, "GESIS", 6576, 12068, 250, ".0207"),
];

/// Per-element clicks in the order Bookmark, Details, Fulltext, In Stock,
/// More Links, Order, Title: (system, experimental, baseline, printed
/// experimental share).
type ElementRow = (&'static str, [u64; 7], [u64; 7], f64);

const ELEMENT_CLICKS: [ElementRow; 6] = [
    (
        "livivo_rank_pyserini",
        [182, 341, 176, 55, 62, 28, 263],
        [180, 443, 228, 154, 57, 29, 329],
        0.4367,
    ),
    (
        "lemuren_elastic_only",
        [63, 832, 481, 107, 105, 54, 638],
        [56, 1066, 646, 295, 129, 85, 858],
        0.4045,
    ),
    (
        "lemuren_elastic_preprocessing",
        [23, 355, 257, 23, 28, 21, 285],
        [69, 1190, 762, 301, 119, 82, 934],
        0.2143,
    ),
    (
        "lemuren_elk",
        [1, 13, 16, 0, 2, 0, 10],
        [1, 24, 7, 14, 1, 0, 20],
        0.4242,
    ),
    ("tekmas", [2, 11, 2, 2, 1, 0, 6], [0, 13, 6, 7, 0, 1, 9], 0.3430),
    (
        "save_fami",
        [11, 21, 9, 3, 1, 1, 16],
        [8, 13, 7, 5, 2, 1, 6],
        0.5496,
    ),
];
const ALL_ELEMENT_CLICKS: ([u64; 7], [u64; 7], f64) = (
    [282, 1573, 941, 190, 199, 104, 1218],
    [314, 2749, 1656, 776, 308, 198, 2156],
    0.3485,
);

fn printed(value: f64, digits: usize) -> String {
    format_fixed(value, digits).trim_start_matches('0').to_owned()
}

fn counts(values: &[u64; 7]) -> ClickCounts {
    let mut c = ClickCounts::default();
    for (element, n) in LITERATURE_ELEMENTS.iter().zip(values) {
        c.add(element, *n);
    }
    c
}

/// Writes one log whose experimental rows reproduce the given table rows:
/// W impressions won with one click each, T ties, L losses, the remaining
/// impressions unclicked. Clicks beyond W + T are added to won impressions.
fn replay_rows(rows: &[Row]) -> Vec<LogRecord> {
    let mut records = Vec::new();
    let (mut next_session, mut next_imp) = (1u64, 1u64);
    for (name, w, l, t, _, sessions, impressions, clicks, _, task, is_base) in rows {
        if *is_base {
            continue;
        }
        let first_session = next_session;
        for i in 0..*sessions {
            records.push(LogRecord::Session(SessionOpened {
                session_id: SessionId(first_session + i),
                site_user: format!("{name}-{i}"),
                ts: 0,
            }));
        }
        next_session += sessions;
        let extra = clicks - w - t;
        for i in 0..*impressions {
            let id = ImpressionId(next_imp);
            next_imp += 1;
            let entries = vec![
                InterleavedEntry {
                    docid: "e1".into(),
                    team: Team::Exp,
                },
                InterleavedEntry {
                    docid: "b1".into(),
                    team: Team::Base,
                },
                InterleavedEntry {
                    docid: "e2".into(),
                    team: Team::Exp,
                },
                InterleavedEntry {
                    docid: "b2".into(),
                    team: Team::Base,
                },
            ];
            records.push(LogRecord::Impression(Impression {
                impression_id: id,
                session_id: SessionId(first_session + i % sessions),
                task: *task,
                request: format!("r{}", i % 7),
                page: 0,
                rpp: 4,
                interleaved: InterleavedList {
                    exp_system: name.to_string(),
                    base_system: "base".into(),
                    entries,
                },
                ts: i as i64,
            }));
            let click = |doc: &str| ClickEvent::new(doc, "Click", i as i64 + 1);
            let mut fired = Vec::new();
            if i < *w {
                let repeats = 1 + extra / w + u64::from(i < extra % w);
                fired.extend((0..repeats).map(|_| click("e1")));
            } else if i < w + t {
                fired.extend([click("e1"), click("b1")]);
            } else if i < w + t + l {
                fired.push(click("b1"));
            }
            if !fired.is_empty() {
                records.push(LogRecord::Feedback(FeedbackEvent {
                    impression_id: id,
                    clicks: fired,
                }));
            }
        }
    }
    records
}

fn criterion_1_outcome_and_ctr() -> Check {
    let mut checked = 0;
    for (round, rows) in [(1, &ROUND_ONE[..]), (2, &ROUND_TWO[..])] {
        for (name, w, l, _, out, _, imps, clicks, c, _, _) in rows {
            let got = printed(outcome(*w, *l).ok_or("no outcome")?, 2);
            ensure!(got == *out, "round {round} {name}: outcome {got} != {out}");
            let got = printed(ctr(*clicks, *imps), 4);
            ensure!(got == *c, "round {round} {name}: CTR {got} != {c}");
            checked += 2;
        }
        // The same rows replayed through the log and the round aggregation.
        let snapshot = Snapshot::from_records(&replay_rows(rows)).map_err(|e| e.to_string())?;
        let report = aggregate_round(&snapshot, &RewardWeights::default());
        for (name, w, l, t, out, sessions, imps, clicks, c, _, is_base) in rows {
            if *is_base {
                continue;
            }
            let row: &SystemRoundStats = report
                .systems
                .iter()
                .find(|r| r.system == *name && !r.is_baseline)
                .ok_or_else(|| format!("round {round}: no row for {name}"))?;
            let counts = (
                row.wins,
                row.losses,
                row.ties,
                row.sessions,
                row.impressions,
                row.clicks,
            );
            ensure!(
                counts == (*w, *l, *t, *sessions, *imps, *clicks),
                "round {round} {name}: replayed counts {counts:?}"
            );
            ensure!(
                printed(row.outcome.unwrap_or(f64::NAN), 2) == *out && printed(row.ctr, 4) == *c,
                "round {round} {name}: replayed outcome/CTR differ"
            );
            checked += 2;
        }
    }
    for (round, site, _, imps, clicks, c) in TRAFFIC {
        let got = printed(ctr(clicks, imps), 4);
        ensure!(got == c, "round {round} {site}: CTR {got} != {c}");
        checked += 1;
    }
    Ok(format!("{checked} printed values reproduced"))
}

fn element_log(rows: &[ElementRow]) -> Vec<LogRecord> {
    let mut records = Vec::new();
    for (i, (name, exp, base, _)) in rows.iter().enumerate() {
        let sid = SessionId(i as u64 + 1);
        let id = ImpressionId(i as u64 + 1);
        records.push(LogRecord::Session(SessionOpened {
            session_id: sid,
            site_user: name.to_string(),
            ts: 0,
        }));
        records.push(LogRecord::Impression(Impression {
            impression_id: id,
            session_id: sid,
            task: Task::Ranking,
            request: "q".into(),
            page: 0,
            rpp: 2,
            interleaved: InterleavedList {
                exp_system: name.to_string(),
                base_system: "livivo_base".into(),
                entries: vec![
                    InterleavedEntry {
                        docid: "e".into(),
                        team: Team::Exp,
                    },
                    InterleavedEntry {
                        docid: "b".into(),
                        team: Team::Base,
                    },
                ],
            },
            ts: 0,
        }));
        let mut clicks = Vec::new();
        for (doc, values) in [("e", exp), ("b", base)] {
            for (element, n) in LITERATURE_ELEMENTS.iter().zip(values) {
                clicks.extend((0..*n).map(|_| ClickEvent::new(doc, *element, 1)));
            }
        }
        records.push(LogRecord::Feedback(FeedbackEvent {
            impression_id: id,
            clicks,
        }));
    }
    records
}

fn criterion_2_nreward() -> Check {
    let weights = RewardWeights::default();
    let mut worst: f64 = 0.0;
    let mut check = |name: &str, exp: &[u64; 7], base: &[u64; 7], want: f64| -> Result<(), String> {
        let e =
            nreward(reward(&counts(exp), &weights), reward(&counts(base), &weights)).ok_or("no reward")?;
        let b = 1.0 - e;
        let err = (e - want).abs().max((b - (1.0 - want)).abs());
        worst = worst.max(err);
        ensure!(err <= 1e-4, "{name}: nReward {e:.5} vs printed {want}");
        Ok(())
    };
    for (name, exp, base, want) in &ELEMENT_CLICKS {
        check(name, exp, base, *want)?;
    }
    let (exp, base, want) = ALL_ELEMENT_CLICKS;
    check("all experimental", &exp, &base, want)?;

    let snapshot = Snapshot::from_records(&element_log(&ELEMENT_CLICKS)).map_err(|e| e.to_string())?;
    let report = aggregate_round(&snapshot, &weights);
    for (name, _, _, want) in ELEMENT_CLICKS.iter().chain([&("", [0; 7], [0; 7], 0.0)]) {
        let (key, want) = if name.is_empty() {
            (ALL_EXPERIMENTAL, ALL_ELEMENT_CLICKS.2)
        } else {
            (*name, *want)
        };
        let row = report
            .rewards
            .iter()
            .find(|r| r.exp_system == key)
            .ok_or_else(|| format!("no reward row {key}"))?;
        let got = row.nreward_exp.ok_or("no reward")?;
        ensure!((got - want).abs() <= 1e-4, "replayed {key}: {got:.5} vs {want}");
    }
    Ok(format!("7 pairs direct and replayed, max |error| {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// Team-Draft interleaving
// ---------------------------------------------------------------------------

/// Straightforward restatement: each round flips once, the winner drafts its
/// best unused document, then the other team does.
fn draft_oracle(a: &[&str], b: &[&str], k: usize, flips: &[bool]) -> (Vec<(String, Team)>, usize) {
    let mut out: Vec<(String, Team)> = Vec::new();
    let mut rounds = 0;
    let unused = |list: &[&str], out: &Vec<(String, Team)>| -> Option<String> {
        list.iter()
            .find(|d| !out.iter().any(|(o, _)| o == *d))
            .map(|d| d.to_string())
    };
    while out.len() < k && (unused(a, &out).is_some() || unused(b, &out).is_some()) {
        let exp_first = flips[rounds % flips.len()];
        rounds += 1;
        let order = if exp_first {
            [Team::Exp, Team::Base]
        } else {
            [Team::Base, Team::Exp]
        };
        for team in order {
            if out.len() == k {
                break;
            }
            let list = if team == Team::Exp { a } else { b };
            if let Some(d) = unused(list, &out) {
                out.push((d, team));
            }
        }
    }
    (out, rounds)
}

fn all_lists(pool: &[&'static str], max: usize) -> Vec<Vec<&'static str>> {
    let mut out = vec![vec![]];
    let mut frontier: Vec<Vec<&'static str>> = vec![vec![]];
    for _ in 0..max {
        let mut next = Vec::new();
        for l in &frontier {
            for d in pool {
                if !l.contains(d) {
                    let mut m = l.clone();
                    m.push(*d);
                    next.push(m);
                }
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn check_draft(exp: &[String], base: &[String], k: usize, page: &[InterleavedEntry]) -> Result<(), String> {
    let union: HashSet<&str> = exp.iter().chain(base).map(String::as_str).collect();
    ensure!(
        page.len() == k.min(union.len()),
        "page length {} for k {k}",
        page.len()
    );
    let mut seen = HashSet::new();
    for (i, e) in page.iter().enumerate() {
        ensure!(seen.insert(e.docid.as_str()), "duplicate {}", e.docid);
        let own = if e.team == Team::Exp { exp } else { base };
        ensure!(
            own.contains(&e.docid),
            "{} credited to a team that lacks it",
            e.docid
        );
        let prefix = &page[..=i];
        let n_exp = prefix.iter().filter(|x| x.team == Team::Exp).count() as i64;
        let n_base = prefix.len() as i64 - n_exp;
        if (n_exp - n_base).abs() > 1 {
            // Only allowed once the trailing team has run out of documents.
            let behind = if n_exp < n_base { exp } else { base };
            let used: HashSet<&str> = prefix.iter().map(|x| x.docid.as_str()).collect();
            ensure!(
                behind.iter().all(|d| used.contains(d.as_str())),
                "prefix {} unbalanced ({n_exp} vs {n_base}) while the trailing team had documents",
                i + 1
            );
        }
    }
    Ok(())
}

fn criterion_3_tdi() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7d1);
    for n in 0..10_000u64 {
        let pool: Vec<String> = (0..rng.random_range(1..40)).map(|i| format!("d{i}")).collect();
        let pick = |rng: &mut ChaCha8Rng| -> Vec<String> {
            let len = rng.random_range(0..=pool.len().min(25));
            let mut l = pool.clone();
            for i in 0..len {
                let j = rng.random_range(i..l.len());
                l.swap(i, j);
            }
            l.truncate(len);
            l
        };
        let (exp, base) = (pick(&mut rng), pick(&mut rng));
        let k = rng.random_range(0..30);
        let seed = rng.random::<u64>();
        let page = team_draft_interleave(&exp, &base, k, &mut SeededCoin::new(seed));
        check_draft(&exp, &base, k, &page).map_err(|e| format!("instance {n}: {e}"))?;
        ensure!(
            page == team_draft_interleave(&exp, &base, k, &mut SeededCoin::new(seed)),
            "instance {n}: same seed, different page"
        );
        let same = team_draft_interleave(&exp, &exp, k, &mut SeededCoin::new(seed));
        let ids: Vec<&str> = same.iter().map(|e| e.docid.as_str()).collect();
        let want: Vec<&str> = exp.iter().take(k).map(String::as_str).collect();
        ensure!(
            ids == want,
            "instance {n}: identical inputs do not give the input back"
        );
    }

    // Hand-derived pages.
    type HandCase<'a> = (&'a [&'a str], &'a [&'a str], &'a [bool], &'a [(&'a str, Team)]);
    let hand: [HandCase; 3] = [
        (
            &["a", "b", "c"],
            &["b", "d", "e"],
            &[true, true],
            &[
                ("a", Team::Exp),
                ("b", Team::Base),
                ("c", Team::Exp),
                ("d", Team::Base),
                ("e", Team::Base),
            ],
        ),
        (
            &["a", "b", "c"],
            &["b", "d", "e"],
            &[false, true],
            &[
                ("b", Team::Base),
                ("a", Team::Exp),
                ("c", Team::Exp),
                ("d", Team::Base),
                ("e", Team::Base),
            ],
        ),
        (
            &["a"],
            &["b", "c", "d"],
            &[true],
            &[
                ("a", Team::Exp),
                ("b", Team::Base),
                ("c", Team::Base),
                ("d", Team::Base),
            ],
        ),
    ];
    for (a, b, flips, want) in hand {
        let coin = flips
            .iter()
            .map(|f| if *f { Team::Exp } else { Team::Base })
            .collect();
        let page = team_draft_interleave(a, b, 10, &mut ScriptedCoin::new(coin));
        let got: Vec<(&str, Team)> = page.iter().map(|e| (e.docid.as_str(), e.team)).collect();
        ensure!(got == want, "hand case {a:?}/{b:?}: {got:?}");
    }

    // Every coin stream for every pair of lists of length <= 3.
    let lists = all_lists(&["a", "b", "c", "d"], 3);
    let mut cases = 0u64;
    for a in &lists {
        for b in &lists {
            for k in 0..=6 {
                for mask in 0u32..64 {
                    let flips: Vec<bool> = (0..6).map(|i| mask >> i & 1 == 1).collect();
                    let coin = flips
                        .iter()
                        .map(|f| if *f { Team::Exp } else { Team::Base })
                        .collect();
                    let mut coin = ScriptedCoin::new(coin);
                    let page = team_draft_interleave(a, b, k, &mut coin);
                    let (want, rounds) = draft_oracle(a, b, k, &flips);
                    let got: Vec<(String, Team)> = page.into_iter().map(|e| (e.docid, e.team)).collect();
                    ensure!(
                        got == want,
                        "{a:?} / {b:?} k={k} flips {mask:06b}: {got:?} vs {want:?}"
                    );
                    ensure!(
                        coin.used() == rounds,
                        "{a:?} / {b:?}: {} flips used, {rounds} rounds",
                        coin.used()
                    );
                    cases += 1;
                }
            }
        }
    }
    Ok(format!(
        "10000 random instances, {cases} enumerated coin streams, 3 hand cases"
    ))
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

fn counted_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|a| {
            let less = v.iter().filter(|b| *b < a).count() as f64;
            let equal = v.iter().filter(|b| *b == a).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

fn enumerated_p(diffs: &[f64]) -> f64 {
    let nonzero: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    let ranks = counted_ranks(&nonzero.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let observed: f64 = ranks
        .iter()
        .zip(&nonzero)
        .filter(|(_, d)| **d > 0.0)
        .map(|(r, _)| r)
        .sum();
    let n = ranks.len();
    let (mut lower, mut upper) = (0u64, 0u64);
    for mask in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        lower += u64::from(w <= observed + 1e-9);
        upper += u64::from(w >= observed - 1e-9);
    }
    (2.0 * lower.min(upper) as f64 / (1u64 << n) as f64).min(1.0)
}

fn oracle_rho(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (counted_ranks(x), counted_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn vectors_over_123(n: usize) -> Vec<Vec<f64>> {
    (0..3usize.pow(n as u32))
        .map(|mut code| {
            (0..n)
                .map(|_| {
                    let v = (code % 3) as f64 + 1.0;
                    code /= 3;
                    v
                })
                .collect()
        })
        .collect()
}

fn criterion_4_statistics() -> Check {
    let three = wilcoxon_signed_rank(&[(1.0, 0.0), (2.0, 0.0), (3.0, 0.0)]).map_err(|e| e.to_string())?;
    ensure!(
        (three.p_value - 0.25).abs() < 1e-12,
        "[1,2,3] gives p {}",
        three.p_value
    );

    let mut rng = ChaCha8Rng::seed_from_u64(0x51);
    let mut wilcoxon_cases = 0;
    for n in 1..=10 {
        for _ in 0..200 {
            let diffs: Vec<f64> = (0..n)
                .map(|_| f64::from(rng.random_range(-6i32..=6)) * 0.5)
                .collect();
            let pairs: Vec<(f64, f64)> = diffs.iter().map(|d| (d + 10.0, 10.0)).collect();
            let Ok(result) = wilcoxon_signed_rank(&pairs) else {
                ensure!(
                    diffs.iter().all(|d| *d == 0.0),
                    "rejected non-degenerate {diffs:?}"
                );
                continue;
            };
            let want = enumerated_p(&diffs);
            ensure!(
                (result.p_value - want).abs() < 1e-12,
                "{diffs:?}: p {} vs {want}",
                result.p_value
            );
            wilcoxon_cases += 1;
        }
    }

    let mut spearman_cases = 0u64;
    for n in 3..=8 {
        let all = vectors_over_123(n);
        // Every pair for short vectors; every x against a seeded set of y
        // (plus both monotone orders) for longer ones.
        let ys: Vec<Vec<f64>> = if n <= 5 {
            all.clone()
        } else {
            let mut ys: Vec<Vec<f64>> = (0..40)
                .map(|_| all[rng.random_range(0..all.len())].clone())
                .collect();
            ys.push((1..=n).map(|v| v as f64).collect());
            ys.push((1..=n).rev().map(|v| v as f64).collect());
            ys
        };
        for x in &all {
            for y in &ys {
                let constant = |v: &[f64]| v.iter().all(|a| *a == v[0]);
                if constant(x) || constant(y) {
                    ensure!(spearman_rho(x, y).is_err(), "constant input accepted");
                    continue;
                }
                let got = spearman_rho(x, y).map_err(|e| e.to_string())?;
                let want = oracle_rho(x, y);
                ensure!((got - want).abs() <= 1e-12, "{x:?} {y:?}: {got} vs {want}");
                spearman_cases += 1;
            }
        }
    }
    Ok(format!(
        "{wilcoxon_cases} Wilcoxon vectors, {spearman_cases} Spearman pairs"
    ))
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

fn descriptor(name: &str, baseline: bool) -> SystemDescriptor {
    SystemDescriptor {
        name: name.into(),
        kind: SystemKind::LiveRemote,
        task: Task::Ranking,
        is_baseline: baseline,
        source: None,
    }
}

struct Round {
    _dir: tempfile::TempDir,
    log: PathBuf,
    summary: SimulationSummary,
    snapshot: Snapshot,
    report: RoundReport,
}

fn simulate(world: World, config: &TrafficConfig, rotation_seed: u64) -> Result<Round, String> {
    let world = Arc::new(world);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let log = dir.path().join("feedback.jsonl");
    let adapters: Vec<Adapter> = vec![
        Arc::new(OracleSystem::new(descriptor("base", true), world.clone())),
        Arc::new(OracleSystem::new(descriptor("exp", false), world.clone())),
    ];
    let gateway = Gateway::from_parts(GatewayParts {
        adapters,
        rpp: RppLimits::default(),
        session_timeout: Duration::from_secs(1800),
        rotation_seed,
        weights: RewardWeights::default(),
        store: Arc::new(FeedbackStore::open(&log).map_err(|e| e.to_string())?),
    })
    .map_err(|e| e.to_string())?;
    let summary = run_simulation(&gateway, &world, config);
    if let Some(reason) = &summary.aborted {
        return Err(format!("simulation aborted: {reason}"));
    }
    let snapshot = Snapshot::load(&log).map_err(|e| e.to_string())?;
    let report = aggregate_round(&snapshot, &RewardWeights::default());
    Ok(Round {
        _dir: dir,
        log,
        summary,
        snapshot,
        report,
    })
}

fn exp_row(report: &RoundReport) -> Result<&SystemRoundStats, String> {
    report
        .systems
        .iter()
        .find(|r| !r.is_baseline)
        .ok_or_else(|| "no experimental row".into())
}

fn criterion_5_fairness() -> Check {
    let config = TrafficConfig {
        sessions: 10_000,
        seed: 501,
        ..TrafficConfig::default()
    };
    let same = simulate(
        World::synthetic(Task::Ranking, 300, 30, 3_000, 5, 50),
        &config,
        51,
    )?;
    let fair = exp_row(&same.report)?.outcome.ok_or("no clicks")?;
    ensure!(
        (0.45..=0.55).contains(&fair),
        "identical systems: outcome {fair:.4}"
    );

    let config = TrafficConfig {
        seed: 502,
        click_model: ClickModel {
            attractiveness: [("exp".to_owned(), 0.8), ("base".to_owned(), 0.2)].into(),
            ..ClickModel::default()
        },
        ..config
    };
    let skewed = simulate(
        World::synthetic(Task::Ranking, 300, 30, 3_000, 5, 52),
        &config,
        53,
    )?;
    let better = exp_row(&skewed.report)?.outcome.ok_or("no clicks")?;
    ensure!(better > 0.55, "0.8 vs 0.2: outcome {better:.4}");
    let test = skewed
        .report
        .significance
        .first()
        .and_then(|s| s.test)
        .ok_or("no significance test")?;
    ensure!(test.p_value < 0.01, "0.8 vs 0.2: Wilcoxon p {}", test.p_value);
    Ok(format!(
        "identical {fair:.4} over {} sessions; 0.8 vs 0.2 {better:.4}, p = {:.1e} over {} sessions",
        same.summary.sessions, test.p_value, skewed.summary.sessions
    ))
}

fn criterion_6_distributions() -> Check {
    let config = TrafficConfig {
        sessions: 10_000,
        seed: 601,
        zipf_exponent: 1.0,
        click_model: ClickModel {
            nonrelevant_attractiveness: 0.05,
            ..ClickModel::default()
        },
        ..TrafficConfig::default()
    };
    let round = simulate(
        World::synthetic(Task::Ranking, 100, 30, 2_000, 6, 60),
        &config,
        61,
    )?;
    let d = distributions(&round.snapshot);
    let per_query: Vec<u64> = d.impressions_per_query.iter().map(|q| q.impressions).collect();
    let slope = loglog_slope(&per_query).ok_or("too few queries")?;
    ensure!((slope + 1.0).abs() <= 0.15, "log-log slope {slope:.3}");
    let ctrs: Vec<f64> = d.ctr_per_rank.iter().map(|r| r.ctr).collect();
    ensure!(
        ctrs.windows(2).all(|w| w[1] <= w[0]),
        "CTR rises with rank: {ctrs:?}"
    );
    Ok(format!(
        "slope {slope:.3} over {} queries; CTR by rank {:.3} .. {:.3}",
        per_query.len(),
        ctrs[0],
        ctrs[ctrs.len() - 1]
    ))
}

fn evaluate(log: &Path, out: &Path) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_livelab"))
        .args(["evaluate", "--log"])
        .arg(log)
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        o.status.success(),
        "evaluate failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    Ok(())
}

fn criterion_7_conservation() -> Check {
    let config = TrafficConfig {
        sessions: 1_000,
        seed: 701,
        ..TrafficConfig::default()
    };
    let round = simulate(
        World::synthetic(Task::Ranking, 150, 30, 2_000, 5, 70),
        &config,
        71,
    )?;
    let (s, snap) = (&round.summary, &round.snapshot);
    ensure!(
        snap.impressions.len() == s.impressions,
        "stored {} vs served {}",
        snap.impressions.len(),
        s.impressions
    );
    ensure!(
        s.requests == s.impressions + s.baseline_only,
        "requests do not add up"
    );
    ensure!(
        snap.feedback_events == s.feedback_posts,
        "{} stored vs {} posted feedback",
        snap.feedback_events,
        s.feedback_posts
    );
    ensure!(snap.total_clicks() == s.clicks, "clicks lost");
    let row = exp_row(&round.report)?;
    let judged = row.wins + row.losses + row.ties;
    ensure!(
        judged == s.clicked_impressions as u64,
        "W+L+T {judged} vs {} clicked",
        s.clicked_impressions
    );

    let (a, b) = (round.log.with_file_name("r1"), round.log.with_file_name("r2"));
    evaluate(&round.log, &a)?;
    evaluate(&round.log, &b)?;
    let mut files = 0;
    for entry in std::fs::read_dir(&a).map_err(|e| e.to_string())? {
        let name = entry.map_err(|e| e.to_string())?.file_name();
        let same = std::fs::read(a.join(&name)).ok() == std::fs::read(b.join(&name)).ok();
        ensure!(same, "{name:?} differs between runs");
        files += 1;
    }
    Ok(format!(
        "{} impressions, {judged} judged, {files} report files identical",
        s.impressions
    ))
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/malformed")
}

fn data(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(rel)
}

fn criterion_8_formats() -> Check {
    let run = parse_run_file(&data("literature/termfreq.run")).map_err(|e| e.to_string())?;
    ensure!(
        parse_run_str(&run.to_trec()).map_err(|e| e.to_string())? == run,
        "run file does not round-trip"
    );
    for (file, task) in [
        ("literature/candidates.jsonl", Task::Ranking),
        ("social/candidates.jsonl", Task::Recommendation),
    ] {
        let lists = parse_candidates(&data(file), task).map_err(|e| e.to_string())?;
        let text = write_candidates(lists.values(), task);
        let again = parse_candidates_str(&text, task).map_err(|e| e.to_string())?;
        ensure!(again == lists, "{task} candidates do not round-trip");
        ensure!(
            write_candidates(again.values(), task) == text,
            "{task} candidates re-serialize differently"
        );
    }

    let expected: [(&str, usize, &str); 12] = [
        ("too_few_columns.run", 2, "expected 6 columns"),
        ("too_many_columns.run", 3, "expected 6 columns"),
        ("missing_q0.run", 2, "Q0"),
        ("rank_not_integer.run", 2, "not a positive integer"),
        ("rank_zero.run", 1, "at least 1"),
        ("score_not_number.run", 2, "not a number"),
        ("score_nan.run", 2, "not finite"),
        ("mixed_tags.run", 3, "run tag"),
        ("duplicate_doc.run", 3, "duplicate document"),
        ("duplicate_rank.run", 3, "duplicate rank"),
        ("rank_gap.run", 3, "rank gap"),
        ("blank_line.run", 2, "empty line"),
    ];
    let on_disk = std::fs::read_dir(fixtures()).map_err(|e| e.to_string())?.count();
    ensure!(on_disk == expected.len(), "{on_disk} fixtures on disk");
    for (file, line, needle) in expected {
        let report = validate_run_file(&fixtures().join(file), None, None).map_err(|e| e.to_string())?;
        ensure!(!report.ok, "{file} accepted");
        let first = &report.line_errors[0];
        ensure!(
            first.line == line && first.message.contains(needle),
            "{file}: got {first}"
        );
    }
    Ok("run + 2 candidate formats round-trip; 12/12 malformed fixtures rejected at the right line".into())
}

fn criterion_9_rank_bias() -> Check {
    let config = TrafficConfig {
        sessions: 3_000,
        seed: 901,
        click_model: ClickModel {
            examination: Examination::Geometric { ratio: 0.6 },
            ..ClickModel::default()
        },
        ..TrafficConfig::default()
    };
    let round = simulate(
        World::synthetic(Task::Ranking, 200, 30, 3_000, 5, 90),
        &config,
        91,
    )?;
    let row = round
        .report
        .rank_correlation
        .first()
        .ok_or("no correlation row")?;
    let c = row.correlation.ok_or("correlation undefined")?;
    ensure!(
        c.rho < 0.0 && c.p_value < 0.01,
        "rho {:.4}, p {:.2e}",
        c.rho,
        c.p_value
    );
    // The reported value is the plain Spearman over the same observations.
    let mut scores = Vec::new();
    let mut ranks = Vec::new();
    for imp in &round.snapshot.impressions {
        let clicks = round.snapshot.clicks_of(imp.impression_id);
        let Ok(split) = livelab_core::interleave::attribute_clicks(&imp.interleaved, clicks) else {
            continue;
        };
        let (Some(score), Some(rank)) = (
            livelab_core::interleave::judge(split).as_score(),
            livelab_core::interleave::highest_exp_rank(&imp.interleaved),
        ) else {
            continue;
        };
        scores.push(score);
        ranks.push(rank as f64);
    }
    let direct = spearman(&scores, &ranks).map_err(|e| e.to_string())?;
    ensure!(
        (direct.rho - c.rho).abs() < 1e-12,
        "report rho {} vs direct {}",
        c.rho,
        direct.rho
    );
    Ok(format!(
        "rho = {:.4}, p = {:.1e}, n = {}",
        c.rho, c.p_value, row.observations
    ))
}

type Criterion = (u8, &'static str, Duration, fn() -> Check);

fn main() {
    let criteria: [Criterion; 9] = [
        (
            1,
            "table oracle: Outcome and CTR",
            Duration::from_secs(1),
            criterion_1_outcome_and_ctr,
        ),
        (
            2,
            "table oracle: nReward",
            Duration::from_secs(1),
            criterion_2_nreward,
        ),
        (
            3,
            "team-draft interleaving properties",
            Duration::from_secs(10),
            criterion_3_tdi,
        ),
        (
            4,
            "statistical oracles",
            Duration::from_secs(60),
            criterion_4_statistics,
        ),
        (
            5,
            "fairness end to end",
            Duration::from_secs(300),
            criterion_5_fairness,
        ),
        (
            6,
            "query and rank distributions",
            Duration::from_secs(120),
            criterion_6_distributions,
        ),
        (
            7,
            "conservation end to end",
            Duration::from_secs(60),
            criterion_7_conservation,
        ),
        (8, "format fidelity", Duration::from_secs(60), criterion_8_formats),
        (
            9,
            "rank-bias correlation",
            Duration::from_secs(120),
            criterion_9_rank_bias,
        ),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, budget, check) in criteria {
        if !filter.is_empty()
            && !filter
                .iter()
                .any(|f| name.contains(f.as_str()) || *f == id.to_string())
        {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let result = match result {
            Ok(_) if elapsed > budget => Err(format!("took {elapsed:.1?}, budget {budget:?}")),
            other => other,
        };
        match result {
            Ok(detail) => println!("PASS  criterion {id}: {name} ({elapsed:.2?}) - {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  criterion {id}: {name} ({elapsed:.2?}) - {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}
