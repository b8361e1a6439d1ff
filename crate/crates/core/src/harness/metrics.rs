//! Success tables, attempt statistics and weight-trace summaries.

use std::collections::BTreeMap;

use crate::simenv::{EpisodeRecord, Phase, TaskId, HORIZON_CAP};

use super::eval::Evaluation;
use super::records::EpisodeSummary;

/// Counts for one cell, optionally split by hidden condition.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Counts {
    pub successes: u64,
    pub trials: u64,
}

impl Counts {
    pub fn add(&mut self, success: bool) {
        self.trials += 1;
        self.successes += success as u64;
    }

    pub fn merge(&mut self, other: &Counts) {
        self.successes += other.successes;
        self.trials += other.trials;
    }

    /// `successes / trials`, or `None` for an empty cell.
    pub fn rate(&self) -> Option<f64> {
        (self.trials > 0).then(|| self.successes as f64 / self.trials as f64)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SuccessRow {
    pub overall: Counts,
    pub by_condition: BTreeMap<String, Counts>,
}

impl SuccessRow {
    pub fn record(&mut self, condition: &str, success: bool) {
        self.overall.add(success);
        self.by_condition.entry(condition.to_string()).or_default().add(success);
    }

    pub fn merge(&mut self, other: &SuccessRow) {
        self.overall.merge(&other.overall);
        for (k, c) in &other.by_condition {
            self.by_condition.entry(k.clone()).or_default().merge(c);
        }
    }
}

/// Pooled counts keyed by `(strategy, task)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SuccessTable {
    pub rows: BTreeMap<(String, TaskId), SuccessRow>,
}

impl SuccessTable {
    pub fn add_evaluation(&mut self, ev: &Evaluation) {
        let row = self.rows.entry((ev.strategy.clone(), ev.task)).or_default();
        for e in &ev.episodes {
            row.record(&e.condition, e.record.success);
        }
    }

    pub fn add_summaries(&mut self, strategy: &str, task: TaskId, episodes: &[EpisodeSummary]) {
        let row = self.rows.entry((strategy.to_string(), task)).or_default();
        for e in episodes {
            row.record(&e.condition, e.success);
        }
    }

    pub fn add_row(&mut self, strategy: &str, task: TaskId, row: &SuccessRow) {
        self.rows.entry((strategy.to_string(), task)).or_default().merge(row);
    }

    pub fn get(&self, strategy: &str, task: TaskId) -> Option<&SuccessRow> {
        self.rows.get(&(strategy.to_string(), task))
    }

    /// Pooled rate over `tasks`: total successes over total trials. Missing
    /// cells are skipped.
    pub fn average(&self, strategy: &str, tasks: &[TaskId]) -> Option<f64> {
        let mut c = Counts::default();
        for &t in tasks {
            if let Some(r) = self.get(strategy, t) {
                c.merge(&r.overall);
            }
        }
        c.rate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttemptMetrics {
    pub episodes: usize,
    pub first_attempt_success_rate: f64,
    pub success_rate: f64,
    /// Mean steps per episode; failed episodes count as the full cap.
    pub avg_task_horizon: f64,
}

/// Number of contact attempts in an episode. A new attempt begins when
/// contact is re-established after contact was lost and the task phase
/// fell back below its previous maximum.
pub fn count_attempts(contacts: &[bool], phases: &[Phase]) -> usize {
    let mut attempts = 0;
    let mut in_contact = false;
    let mut peak = Phase::Approach.code();
    let mut regressed = false;
    for (&c, &p) in contacts.iter().zip(phases) {
        if !c && p.code() < peak {
            regressed = true;
        }
        if c && !in_contact && (attempts == 0 || regressed) {
            attempts += 1;
            regressed = false;
            peak = p.code();
        }
        peak = peak.max(p.code());
        in_contact = c;
    }
    attempts.max(1)
}

pub fn attempt_metrics(episodes: &[&EpisodeRecord]) -> AttemptMetrics {
    let rows: Vec<(bool, usize, usize)> = episodes
        .iter()
        .map(|e| (e.success, e.steps_used, count_attempts(&e.contact_flags, &e.phases)))
        .collect();
    attempt_metrics_from(&rows)
}

/// Same as [`attempt_metrics`] from stored per-episode summaries.
pub fn attempt_metrics_of(episodes: &[EpisodeSummary]) -> AttemptMetrics {
    let rows: Vec<(bool, usize, usize)> = episodes.iter().map(|e| (e.success, e.steps, e.attempts)).collect();
    attempt_metrics_from(&rows)
}

/// `(success, steps, attempts)` per episode.
fn attempt_metrics_from(rows: &[(bool, usize, usize)]) -> AttemptMetrics {
    let n = rows.len();
    if n == 0 {
        return AttemptMetrics {
            episodes: 0,
            first_attempt_success_rate: 0.0,
            success_rate: 0.0,
            avg_task_horizon: 0.0,
        };
    }
    let mut first = 0usize;
    let mut ok = 0usize;
    let mut horizon = 0usize;
    for &(success, steps, attempts) in rows {
        if success {
            ok += 1;
            first += (attempts == 1) as usize;
            horizon += steps;
        } else {
            horizon += HORIZON_CAP;
        }
    }
    AttemptMetrics {
        episodes: n,
        first_attempt_success_rate: first as f64 / n as f64,
        success_rate: ok as f64 / n as f64,
        avg_task_horizon: horizon as f64 / n as f64,
    }
}

/// Contact versus free-space summary of the torque-side weight.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WeightSummary {
    pub contact_rows: usize,
    pub free_rows: usize,
    pub contact_mean: f64,
    pub free_mean: f64,
    pub free_max: f64,
}

impl WeightSummary {
    /// Contact mean minus free-space mean.
    pub fn contrast(&self) -> f64 {
        self.contact_mean - self.free_mean
    }

    /// Pools two summaries as if their rows had been summarized together.
    pub fn merge(&self, other: &WeightSummary) -> WeightSummary {
        let pool = |a: f64, na: usize, b: f64, nb: usize| {
            if na + nb == 0 {
                0.0
            } else {
                (a * na as f64 + b * nb as f64) / (na + nb) as f64
            }
        };
        WeightSummary {
            contact_rows: self.contact_rows + other.contact_rows,
            free_rows: self.free_rows + other.free_rows,
            contact_mean: pool(self.contact_mean, self.contact_rows, other.contact_mean, other.contact_rows),
            free_mean: pool(self.free_mean, self.free_rows, other.free_mean, other.free_rows),
            free_max: self.free_max.max(other.free_max),
        }
    }
}

/// Summarizes `(phi, torque-side weight)` pairs.
pub fn summarize_weights(rows: impl IntoIterator<Item = (bool, f64)>) -> Option<WeightSummary> {
    let mut s = WeightSummary::default();
    let (mut sc, mut sf) = (0.0, 0.0);
    for (phi, w) in rows {
        if phi {
            s.contact_rows += 1;
            sc += w;
        } else {
            s.free_rows += 1;
            sf += w;
            s.free_max = s.free_max.max(w);
        }
    }
    if s.contact_rows + s.free_rows == 0 {
        return None;
    }
    if s.contact_rows > 0 {
        s.contact_mean = sc / s.contact_rows as f64;
    }
    if s.free_rows > 0 {
        s.free_mean = sf / s.free_rows as f64;
    }
    Some(s)
}
