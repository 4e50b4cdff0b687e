//! Report export: JSON plus one CSV per table. Output depends only on the
//! snapshot and the weights, so reruns are byte-identical.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{
    aggregate_round, distributions, format_fixed, query_stats, Distributions, QueryStats, RewardWeights,
    RoundReport,
};
use crate::model::{SessionId, Task};
use crate::store::Snapshot;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("csv error on {}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

/// Site traffic per task: every served page, interleaved or not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficRow {
    pub task: Task,
    pub sessions: u64,
    pub impressions: u64,
    pub baseline_only: u64,
    pub clicks: u64,
    pub ctr: f64,
}

pub fn traffic_overview(snapshot: &Snapshot) -> Vec<TrafficRow> {
    #[derive(Default)]
    struct Acc {
        sessions: BTreeSet<SessionId>,
        interleaved: u64,
        baseline_only: u64,
        clicks: u64,
    }
    let mut per_task: BTreeMap<Task, Acc> = BTreeMap::new();
    for imp in &snapshot.impressions {
        let acc = per_task.entry(imp.task).or_default();
        acc.sessions.insert(imp.session_id);
        acc.interleaved += 1;
        acc.clicks += snapshot.clicks_of(imp.impression_id).len() as u64;
    }
    for req in &snapshot.requests {
        let acc = per_task.entry(req.task).or_default();
        acc.sessions.insert(req.session_id);
        acc.baseline_only += 1;
    }
    per_task
        .into_iter()
        .map(|(task, acc)| {
            let impressions = acc.interleaved + acc.baseline_only;
            TrafficRow {
                task,
                sessions: acc.sessions.len() as u64,
                impressions,
                baseline_only: acc.baseline_only,
                clicks: acc.clicks,
                ctr: crate::metrics::ctr(acc.clicks, impressions),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullReport {
    pub round: RoundReport,
    pub traffic: Vec<TrafficRow>,
    pub query_stats: QueryStats,
    pub distributions: Distributions,
    pub weights: RewardWeights,
}

pub fn build_report(snapshot: &Snapshot, weights: &RewardWeights) -> FullReport {
    FullReport {
        round: aggregate_round(snapshot, weights),
        traffic: traffic_overview(snapshot),
        query_stats: query_stats(snapshot),
        distributions: distributions(snapshot),
        weights: weights.clone(),
    }
}

fn opt_fixed(value: Option<f64>, digits: usize) -> String {
    value.map(|v| format_fixed(v, digits)).unwrap_or_default()
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), ReportError> {
    let err = |source| ReportError::Csv {
        path: path.to_owned(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.write_record(row).map_err(err)?;
    }
    w.flush().map_err(|source| ReportError::Io {
        path: path.to_owned(),
        source,
    })
}

fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|c| (*c).to_owned()).collect()
}

/// File name, header, rows.
type Table<'a> = (&'a str, Vec<String>, Vec<Vec<String>>);

/// Writes every report file into `out_dir` and returns the file names.
pub fn write_report(report: &FullReport, out_dir: &Path) -> Result<Vec<String>, ReportError> {
    fs::create_dir_all(out_dir).map_err(|source| ReportError::Io {
        path: out_dir.to_owned(),
        source,
    })?;
    let mut written = Vec::new();
    let mut emit_json = |name: &str, value: String| -> Result<(), ReportError> {
        let path = out_dir.join(name);
        fs::write(&path, value + "\n").map_err(|source| ReportError::Io { path, source })?;
        written.push(name.to_owned());
        Ok(())
    };
    emit_json(
        "round_report.json",
        serde_json::to_string_pretty(report).expect("reports serialize"),
    )?;
    emit_json(
        "query_stats.json",
        serde_json::to_string_pretty(&report.query_stats).expect("reports serialize"),
    )?;

    let mut tables: Vec<Table> = Vec::new();

    tables.push((
        "round_report.csv",
        header(&[
            "Task",
            "System",
            "Baseline",
            "Win",
            "Loss",
            "Tie",
            "Outcome",
            "Sessions",
            "Impressions",
            "Clicks",
            "CTR",
        ]),
        report
            .round
            .systems
            .iter()
            .map(|s| {
                vec![
                    s.task.to_string(),
                    s.system.clone(),
                    s.is_baseline.to_string(),
                    s.wins.to_string(),
                    s.losses.to_string(),
                    s.ties.to_string(),
                    opt_fixed(s.outcome, 2),
                    s.sessions.to_string(),
                    s.impressions.to_string(),
                    s.clicks.to_string(),
                    format_fixed(s.ctr, 4),
                ]
            })
            .collect(),
    ));

    let mut elements: BTreeSet<&str> = report.weights.weights.keys().map(String::as_str).collect();
    for r in &report.round.rewards {
        elements.extend(r.exp_clicks.0.keys().map(String::as_str));
        elements.extend(r.base_clicks.0.keys().map(String::as_str));
    }
    let mut reward_header = header(&["Task", "System", "Baseline", "Team"]);
    reward_header.extend(elements.iter().map(|e| (*e).to_owned()));
    reward_header.extend(header(&["Total Clicks", "Reward", "nReward"]));
    let mut reward_rows = Vec::new();
    for r in &report.round.rewards {
        for (team, counts, reward, share) in [
            ("EXP", &r.exp_clicks, r.reward_exp, r.nreward_exp),
            ("BASE", &r.base_clicks, r.reward_base, r.nreward_base),
        ] {
            let mut row = vec![
                r.task.to_string(),
                r.exp_system.clone(),
                r.base_system.clone(),
                team.to_owned(),
            ];
            row.extend(elements.iter().map(|e| counts.get(e).to_string()));
            row.push(counts.total().to_string());
            row.push(format!("{reward}"));
            row.push(opt_fixed(share, 4));
            reward_rows.push(row);
        }
    }
    tables.push(("reward_report.csv", reward_header, reward_rows));

    tables.push((
        "traffic_overview.csv",
        header(&[
            "Task",
            "Sessions",
            "Impressions",
            "Baseline Only",
            "Clicks",
            "CTR",
        ]),
        report
            .traffic
            .iter()
            .map(|t| {
                vec![
                    t.task.to_string(),
                    t.sessions.to_string(),
                    t.impressions.to_string(),
                    t.baseline_only.to_string(),
                    t.clicks.to_string(),
                    format_fixed(t.ctr, 4),
                ]
            })
            .collect(),
    ));

    tables.push((
        "significance.csv",
        header(&["Task", "System", "Baseline", "Pairs", "Statistic", "p", "Method"]),
        report
            .round
            .significance
            .iter()
            .map(|s| {
                let (stat, p, method) = match &s.test {
                    Some(t) => (
                        format!("{}", t.statistic),
                        format!("{}", t.p_value),
                        t.method.to_string(),
                    ),
                    None => Default::default(),
                };
                vec![
                    s.task.to_string(),
                    s.exp_system.clone(),
                    s.base_system.clone(),
                    s.pairs.to_string(),
                    stat,
                    p,
                    method,
                ]
            })
            .collect(),
    ));

    tables.push((
        "rank_correlation.csv",
        header(&["Task", "Observations", "rho", "p"]),
        report
            .round
            .rank_correlation
            .iter()
            .map(|r| {
                let (rho, p) = match &r.correlation {
                    Some(c) => (format!("{}", c.rho), format!("{}", c.p_value)),
                    None => Default::default(),
                };
                vec![r.task.to_string(), r.observations.to_string(), rho, p]
            })
            .collect(),
    ));

    let d = &report.distributions;
    tables.push((
        "impressions_per_query.csv",
        header(&["Task", "Rank", "Query", "Impressions"]),
        d.impressions_per_query
            .iter()
            .map(|q| {
                vec![
                    q.task.to_string(),
                    q.rank.to_string(),
                    q.request.clone(),
                    q.impressions.to_string(),
                ]
            })
            .collect(),
    ));
    tables.push((
        "ctr_per_rank.csv",
        header(&["Task", "Rank", "Impressions", "Clicks", "CTR"]),
        d.ctr_per_rank
            .iter()
            .map(|r| {
                vec![
                    r.task.to_string(),
                    r.rank.to_string(),
                    r.impressions.to_string(),
                    r.clicks.to_string(),
                    format!("{}", r.ctr),
                ]
            })
            .collect(),
    ));
    tables.push((
        "clicks_per_element.csv",
        header(&["Element", "Clicks"]),
        d.clicks_per_element
            .iter()
            .map(|e| vec![e.element.clone(), e.clicks.to_string()])
            .collect(),
    ));

    for (name, head, rows) in tables {
        write_csv(&out_dir.join(name), &head, &rows)?;
        written.push(name.to_owned());
    }
    Ok(written)
}
