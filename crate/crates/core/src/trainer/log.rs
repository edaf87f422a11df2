//! Comma-separated training logs and cross-run aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::collector::UpdateRecord;

pub const SCHEMA_LINE: &str = "# filmppo training log, schema v1";

pub const COLUMNS: [&str; 16] = [
    "run_id",
    "update_index",
    "transitions",
    "walltime_s",
    "policy_version",
    "score_mean",
    "score_min",
    "score_max",
    "policy_loss",
    "value_loss",
    "mean_value_estimate",
    "entropy",
    "offpolicy_fraction",
    "env_time_s",
    "train_time_s",
    "other_time_s",
];

#[derive(Debug, Error, PartialEq)]
pub enum LogError {
    #[error("{origin}: {message}")]
    Parse { origin: String, message: String },
    #[error("update grids differ: {0}")]
    GridMismatch(String),
    #[error("no logs to aggregate")]
    Empty,
}

/// One parsed row of a training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub run_id: String,
    pub update_index: usize,
    pub transitions: usize,
    pub walltime_s: f64,
    pub policy_version: u64,
    pub score_mean: f64,
    pub score_min: f64,
    pub score_max: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub mean_value_estimate: f64,
    pub entropy: f64,
    pub offpolicy_fraction: f64,
    pub env_time_s: f64,
    pub train_time_s: f64,
    pub other_time_s: f64,
}

impl LogRow {
    pub fn from_record(run_id: &str, r: &UpdateRecord) -> Self {
        Self {
            run_id: run_id.to_string(),
            update_index: r.update_index,
            transitions: r.transitions,
            walltime_s: r.walltime_s,
            policy_version: r.policy_version.0,
            score_mean: r.score_mean,
            score_min: r.score_min,
            score_max: r.score_max,
            policy_loss: r.metrics.policy_loss,
            value_loss: r.metrics.value_loss,
            mean_value_estimate: r.metrics.mean_value,
            entropy: r.metrics.entropy,
            offpolicy_fraction: r.offpolicy_fraction,
            env_time_s: r.env_time_s,
            train_time_s: r.train_time_s,
            other_time_s: r.other_time_s,
        }
    }

    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.update_index,
            self.transitions,
            self.walltime_s,
            self.policy_version,
            self.score_mean,
            self.score_min,
            self.score_max,
            self.policy_loss,
            self.value_loss,
            self.mean_value_estimate,
            self.entropy,
            self.offpolicy_fraction,
            self.env_time_s,
            self.train_time_s,
            self.other_time_s
        )
    }
}

pub fn header() -> String {
    format!("{SCHEMA_LINE}\n{}\n", COLUMNS.join(","))
}

pub fn parse_log(text: &str, origin: &str) -> Result<Vec<LogRow>, LogError> {
    let err = |message: String| LogError::Parse { origin: origin.to_string(), message };
    let mut lines = text.lines();
    if lines.next() != Some(SCHEMA_LINE) {
        return Err(err("missing or unsupported schema line".into()));
    }
    if lines.next() != Some(COLUMNS.join(",").as_str()) {
        return Err(err("column header does not match schema v1".into()));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != COLUMNS.len() {
            return Err(err(format!("row {} has {} columns, expected {}", i + 1, fields.len(), COLUMNS.len())));
        }
        let f = |k: usize| fields[k].parse::<f64>().map_err(|e| err(format!("row {}, {}: {e}", i + 1, COLUMNS[k])));
        let u = |k: usize| fields[k].parse::<u64>().map_err(|e| err(format!("row {}, {}: {e}", i + 1, COLUMNS[k])));
        rows.push(LogRow {
            run_id: fields[0].to_string(),
            update_index: u(1)? as usize,
            transitions: u(2)? as usize,
            walltime_s: f(3)?,
            policy_version: u(4)?,
            score_mean: f(5)?,
            score_min: f(6)?,
            score_max: f(7)?,
            policy_loss: f(8)?,
            value_loss: f(9)?,
            mean_value_estimate: f(10)?,
            entropy: f(11)?,
            offpolicy_fraction: f(12)?,
            env_time_s: f(13)?,
            train_time_s: f(14)?,
            other_time_s: f(15)?,
        });
    }
    Ok(rows)
}

fn band(values: &[f64]) -> (f64, f64, f64) {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, min, max)
}

/// Mean/min/max of score and losses across runs at each update.
pub fn aggregate(runs: &[Vec<LogRow>]) -> Result<String, LogError> {
    let first = runs.first().ok_or(LogError::Empty)?;
    let grid: Vec<(usize, usize)> = first.iter().map(|r| (r.update_index, r.transitions)).collect();
    for (k, run) in runs.iter().enumerate().skip(1) {
        let other: Vec<(usize, usize)> = run.iter().map(|r| (r.update_index, r.transitions)).collect();
        if other != grid {
            return Err(LogError::GridMismatch(format!("log {k} does not share the update grid of log 0")));
        }
    }
    let mut per_update: BTreeMap<usize, Vec<&LogRow>> = BTreeMap::new();
    for run in runs {
        for row in run {
            per_update.entry(row.update_index).or_default().push(row);
        }
    }
    let mut out = String::from(
        "update_index,transitions,runs,score_mean,score_min,score_max,value_loss_mean,value_loss_min,value_loss_max,policy_loss_mean,policy_loss_min,policy_loss_max\n",
    );
    for (idx, rows) in per_update {
        let score = band(&rows.iter().map(|r| r.score_mean).collect::<Vec<_>>());
        let vl = band(&rows.iter().map(|r| r.value_loss).collect::<Vec<_>>());
        let pl = band(&rows.iter().map(|r| r.policy_loss).collect::<Vec<_>>());
        writeln!(
            out,
            "{idx},{},{},{},{},{},{},{},{},{},{},{}",
            rows[0].transitions,
            rows.len(),
            score.0,
            score.1,
            score.2,
            vl.0,
            vl.1,
            vl.2,
            pl.0,
            pl.1,
            pl.2
        )
        .expect("writing to a String cannot fail");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(run: &str, idx: usize, score: f64) -> LogRow {
        LogRow {
            run_id: run.into(),
            update_index: idx,
            transitions: 3200 * (idx + 1),
            walltime_s: 1.5,
            policy_version: idx as u64 + 1,
            score_mean: score,
            score_min: score - 1.0,
            score_max: score + 1.0,
            policy_loss: -0.01,
            value_loss: 0.25,
            mean_value_estimate: -3.0,
            entropy: 1.2,
            offpolicy_fraction: 0.0,
            env_time_s: 1.0,
            train_time_s: 0.4,
            other_time_s: 0.1,
        }
    }

    fn log_text(rows: &[LogRow]) -> String {
        let mut s = header();
        for r in rows {
            s.push_str(&r.to_line());
            s.push('\n');
        }
        s
    }

    #[test]
    fn rows_round_trip() {
        let rows = vec![row("a", 0, -1.0), row("a", 1, f64::NAN)];
        let parsed = parse_log(&log_text(&rows), "mem").unwrap();
        assert_eq!(parsed[0], rows[0]);
        assert!(parsed[1].score_mean.is_nan());
        assert_eq!(log_text(&parsed), log_text(&rows));
    }

    #[test]
    fn schema_is_checked() {
        assert!(parse_log("run_id\n", "mem").is_err());
        let mut text = log_text(&[row("a", 0, 0.0)]);
        text.push_str("a,1,2\n");
        assert!(matches!(parse_log(&text, "mem"), Err(LogError::Parse { .. })));
    }

    #[test]
    fn single_log_aggregate_is_identity() {
        let out = aggregate(&[vec![row("a", 0, -1.5)]]).unwrap();
        assert!(out.lines().nth(1).unwrap().starts_with("0,3200,1,-1.5,-1.5,-1.5,"));
    }

    #[test]
    fn two_logs_band() {
        let a = vec![row("a", 0, 0.0)];
        let b = vec![row("b", 0, -2.0)];
        let out = aggregate(&[a.clone(), b.clone()]).unwrap();
        assert!(out.lines().nth(1).unwrap().starts_with("0,3200,2,-1,-2,0,"));
        assert_eq!(out, aggregate(&[b, a]).unwrap());
    }

    #[test]
    fn mismatched_grids_are_rejected() {
        let a = vec![row("a", 0, 0.0), row("a", 1, 0.0)];
        let b = vec![row("b", 0, 0.0)];
        assert!(matches!(aggregate(&[a, b]), Err(LogError::GridMismatch(_))));
        assert_eq!(aggregate(&[]), Err(LogError::Empty));
    }
}
