//! Markdown and CSV rendering of comparison results.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::fusion::StrategyTag;
use crate::simenv::TaskId;

use super::metrics::{attempt_metrics_of, summarize_weights, AttemptMetrics, SuccessTable, WeightSummary};
use super::records::{EpisodeSummary, WeightRow, WeightValues};

/// Results of one evaluated checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub label: String,
    pub task: TaskId,
    pub seed: u64,
    pub episodes: Vec<EpisodeSummary>,
    pub weights: Option<WeightSummary>,
}

/// Everything needed to render a comparison; cells absent from `cells` are
/// listed in `missing` and rendered as gaps.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Comparison {
    pub labels: Vec<String>,
    pub tasks: Vec<TaskId>,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellResult>,
    pub missing: Vec<(String, TaskId, u64)>,
}

/// Row heading for a grid label such as `gated` or `aux_goals@0.01`.
pub fn display_label(label: &str) -> String {
    let (tag, alpha) = match label.split_once('@') {
        Some((t, a)) => (t, Some(a)),
        None => (label, None),
    };
    let name = tag.parse::<StrategyTag>().map(|t| t.label().to_string()).unwrap_or_else(|_| tag.to_string());
    match alpha {
        Some(a) => format!("{name} (alpha {a})"),
        None => name,
    }
}

fn pct(x: f64) -> String {
    format!("{:.1}%", 100.0 * x)
}

impl Comparison {
    pub fn table(&self) -> SuccessTable {
        let mut t = SuccessTable::default();
        for c in &self.cells {
            t.add_summaries(&c.label, c.task, &c.episodes);
        }
        t
    }

    fn cells_of<'a>(&'a self, label: &'a str, task: TaskId) -> impl Iterator<Item = &'a CellResult> + 'a {
        self.cells.iter().filter(move |c| c.label == label && c.task == task)
    }

    fn is_incomplete(&self, label: &str, task: TaskId) -> bool {
        self.missing.iter().any(|(l, t, _)| l == label && *t == task)
    }

    /// Attempt metrics pooled over seeds.
    pub fn attempts(&self, label: &str, task: TaskId) -> Option<AttemptMetrics> {
        let eps: Vec<EpisodeSummary> = self.cells_of(label, task).flat_map(|c| c.episodes.iter().cloned()).collect();
        (!eps.is_empty()).then(|| attempt_metrics_of(&eps))
    }

    /// Weight summary pooled over seeds.
    pub fn weights(&self, label: &str, task: TaskId) -> Option<WeightSummary> {
        self.cells_of(label, task)
            .filter_map(|c| c.weights)
            .reduce(|a, b| a.merge(&b))
    }

    pub fn markdown(&self) -> String {
        let table = self.table();
        let mut s = String::from("# Strategy comparison\n\n");
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(s, "Training seeds: {}. Counts are pooled over seeds.\n", seeds.join(", "));

        s.push_str("## Success rate\n\n| Strategy |");
        for t in &self.tasks {
            let _ = write!(s, " {} |", t.title());
        }
        s.push_str(" Average |\n|---|");
        for _ in &self.tasks {
            s.push_str("---|");
        }
        s.push_str("---|\n");
        for label in &self.labels {
            let _ = write!(s, "| {} |", display_label(label));
            for &t in &self.tasks {
                match table.get(label, t) {
                    Some(r) if r.overall.trials > 0 => {
                        let gap = if self.is_incomplete(label, t) { " (incomplete)" } else { "" };
                        let _ = write!(
                            s,
                            " {}/{} ({}){gap} |",
                            r.overall.successes,
                            r.overall.trials,
                            pct(r.overall.rate().unwrap_or(0.0))
                        );
                    }
                    _ => s.push_str(" missing |"),
                }
            }
            match table.average(label, &self.tasks) {
                Some(a) => {
                    let _ = writeln!(s, " {} |", pct(a));
                }
                None => s.push_str(" missing |\n"),
            }
        }

        if self.tasks.contains(&TaskId::WeighSort) {
            s.push_str("\n## WeighSort by hidden mass\n\n| Strategy | light | heavy |\n|---|---|---|\n");
            for label in &self.labels {
                let _ = write!(s, "| {} |", display_label(label));
                for cond in ["light", "heavy"] {
                    match table.get(label, TaskId::WeighSort).and_then(|r| r.by_condition.get(cond)) {
                        Some(c) => {
                            let _ = write!(s, " {}/{} |", c.successes, c.trials);
                        }
                        None => s.push_str(" missing |"),
                    }
                }
                s.push('\n');
            }
        }

        s.push_str("\n## Single-attempt metrics\n\n| Strategy | Task | First-attempt success | Success | Avg. task horizon |\n|---|---|---|---|---|\n");
        for &t in &self.tasks {
            for label in &self.labels {
                if let Some(m) = self.attempts(label, t) {
                    let _ = writeln!(
                        s,
                        "| {} | {} | {} | {} | {:.1} |",
                        display_label(label),
                        t.title(),
                        pct(m.first_attempt_success_rate),
                        pct(m.success_rate),
                        m.avg_task_horizon
                    );
                }
            }
        }

        s.push_str("\n## Fusion weights\n\n");
        let mut any = false;
        let mut w = String::from(
            "| Strategy | Task | Contact mean | Free-space mean | Contrast | Contact rows | Free rows |\n|---|---|---|---|---|---|---|\n",
        );
        for &t in &self.tasks {
            for label in &self.labels {
                if let Some(ws) = self.weights(label, t) {
                    any = true;
                    let _ = writeln!(
                        w,
                        "| {} | {} | {:.4} | {:.4} | {:.4} | {} | {} |",
                        display_label(label),
                        t.title(),
                        ws.contact_mean,
                        ws.free_mean,
                        ws.contrast(),
                        ws.contact_rows,
                        ws.free_rows
                    );
                }
            }
        }
        if any {
            s.push_str(&w);
        } else {
            s.push_str("No weight traces were recorded.\n");
        }

        if !self.missing.is_empty() {
            s.push_str("\n## Missing checkpoints\n\n");
            for (l, t, seed) in &self.missing {
                let _ = writeln!(s, "- {l} on {}, seed {seed}", t.title());
            }
        }
        s
    }

    /// `strategy,task,successes,trials,rate` plus one `average` row per
    /// strategy.
    pub fn success_csv(&self) -> String {
        let table = self.table();
        let mut s = String::from("strategy,task,condition,successes,trials,rate\n");
        for label in &self.labels {
            for &t in &self.tasks {
                if let Some(r) = table.get(label, t) {
                    let _ = writeln!(
                        s,
                        "{label},{t},all,{},{},{:.6}",
                        r.overall.successes,
                        r.overall.trials,
                        r.overall.rate().unwrap_or(0.0)
                    );
                    for (cond, c) in r.by_condition.iter().filter(|(k, _)| k.as_str() != "all") {
                        let _ = writeln!(s, "{label},{t},{cond},{},{},{:.6}", c.successes, c.trials, c.rate().unwrap_or(0.0));
                    }
                }
            }
            if let Some(a) = table.average(label, &self.tasks) {
                let _ = writeln!(s, "{label},average,all,,,{a:.6}");
            }
        }
        s
    }

    pub fn attempts_csv(&self) -> String {
        let mut s = String::from("strategy,task,episodes,first_attempt_success_rate,success_rate,avg_task_horizon\n");
        for &t in &self.tasks {
            for label in &self.labels {
                if let Some(m) = self.attempts(label, t) {
                    let _ = writeln!(
                        s,
                        "{label},{t},{},{:.6},{:.6},{:.4}",
                        m.episodes, m.first_attempt_success_rate, m.success_rate, m.avg_task_horizon
                    );
                }
            }
        }
        s
    }

    pub fn weights_csv(&self) -> String {
        let mut s = String::from("strategy,task,contact_rows,free_rows,contact_mean,free_mean,free_max,contrast\n");
        for &t in &self.tasks {
            for label in &self.labels {
                if let Some(w) = self.weights(label, t) {
                    let _ = writeln!(
                        s,
                        "{label},{t},{},{},{:.6},{:.6},{:.6},{:.6}",
                        w.contact_rows,
                        w.free_rows,
                        w.contact_mean,
                        w.free_mean,
                        w.free_max,
                        w.contrast()
                    );
                }
            }
        }
        s
    }
}

/// Per-strategy weight statistics over a set of trace rows.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightAnalysis {
    pub strategies: Vec<(String, WeightSummary)>,
    /// Largest |w_img + w_tor - 1| over routed rows, when there are any.
    pub route_sum_error: Option<f64>,
    plot: Vec<(String, usize, usize, bool, f64)>,
}

/// Groups `rows` by strategy and summarizes contact against free-space
/// weights. Rows of one environment step are averaged for the plot CSV.
pub fn analyze_weights(rows: &[WeightRow]) -> WeightAnalysis {
    let mut groups: BTreeMap<&str, Vec<(bool, f64)>> = BTreeMap::new();
    let mut plot: BTreeMap<(&str, usize, usize), (bool, f64, usize)> = BTreeMap::new();
    let mut route_err: Option<f64> = None;
    for r in rows {
        let w = r.weights.torque();
        groups.entry(&r.strategy).or_default().push((r.phi, w));
        let e = plot.entry((&r.strategy, r.episode, r.env_step)).or_insert((r.phi, 0.0, 0));
        e.1 += w;
        e.2 += 1;
        if let WeightValues::Route { w_img, w_tor } = r.weights {
            let err = (w_img + w_tor - 1.0).abs();
            route_err = Some(route_err.map_or(err, |m: f64| m.max(err)));
        }
    }
    WeightAnalysis {
        strategies: groups
            .into_iter()
            .filter_map(|(k, v)| summarize_weights(v).map(|s| (k.to_string(), s)))
            .collect(),
        route_sum_error: route_err,
        plot: plot
            .into_iter()
            .map(|((s, ep, step), (phi, sum, n))| (s.to_string(), ep, step, phi, sum / n as f64))
            .collect(),
    }
}

fn ratio(s: &WeightSummary) -> String {
    if s.free_rows == 0 || s.contact_rows == 0 {
        "n/a".into()
    } else if s.free_mean == 0.0 {
        "inf".into()
    } else {
        format!("{:.4}", s.contact_mean / s.free_mean)
    }
}

impl WeightAnalysis {
    pub fn is_empty(&self) -> bool {
        self.strategies.is_empty()
    }

    pub fn markdown(&self) -> String {
        let mut s = String::from("# Fusion weight analysis\n\n");
        if self.is_empty() {
            s.push_str("No weight traces were found.\n");
            return s;
        }
        s.push_str(
            "| Strategy | Contact rows | Free rows | Contact mean | Free-space mean | Free-space max | Contact/free ratio |\n\
             |---|---|---|---|---|---|---|\n",
        );
        for (name, w) in &self.strategies {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {:.4} | {:.4} | {:.4} | {} |",
                display_label(name),
                w.contact_rows,
                w.free_rows,
                w.contact_mean,
                w.free_mean,
                w.free_max,
                ratio(w)
            );
        }
        if let Some(e) = self.route_sum_error {
            let _ = writeln!(s, "\nLargest deviation of routed weights from a unit sum: {e:.3e}");
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("strategy,contact_rows,free_rows,contact_mean,free_mean,free_max,contrast,ratio\n");
        for (name, w) in &self.strategies {
            let _ = writeln!(
                s,
                "{name},{},{},{:.6},{:.6},{:.6},{:.6},{}",
                w.contact_rows,
                w.free_rows,
                w.contact_mean,
                w.free_mean,
                w.free_max,
                w.contrast(),
                ratio(w)
            );
        }
        s
    }

    /// One row per (strategy, episode, env step): the torque weight
    /// averaged over denoising steps.
    pub fn plot_csv(&self) -> String {
        let mut s = String::from("strategy,episode,env_step,phi,w_torque\n");
        for (name, ep, step, phi, w) in &self.plot {
            let _ = writeln!(s, "{name},{ep},{step},{},{w:.6}", u8::from(*phi));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simenv::FailureReason;

    fn episodes(successes: usize, trials: usize) -> Vec<EpisodeSummary> {
        (0..trials)
            .map(|i| EpisodeSummary {
                index: i,
                env_seed: i as u64,
                condition: "all".into(),
                success: i < successes,
                failure: if i < successes { FailureReason::None } else { FailureReason::Timeout },
                steps: 40,
                attempts: 1,
            })
            .collect()
    }

    #[test]
    fn missing_cells_render_as_gaps() {
        let cmp = Comparison {
            labels: vec!["gated".into()],
            tasks: vec![TaskId::TwistPull, TaskId::LidOpen],
            seeds: vec![0],
            cells: vec![CellResult {
                label: "gated".into(),
                task: TaskId::TwistPull,
                seed: 0,
                episodes: episodes(3, 4),
                weights: None,
            }],
            missing: vec![("gated".into(), TaskId::LidOpen, 0)],
        };
        let md = cmp.markdown();
        assert!(md.contains("| Torque gating | 3/4 (75.0%) | missing | 75.0% |"), "{md}");
        assert!(md.contains("No weight traces were recorded."));
        assert!(md.contains("- gated on LidOpen, seed 0"));
        assert_eq!(md, cmp.markdown());
    }

    #[test]
    fn weight_analysis_separates_contact() {
        let row = |phi, w: f64, strategy: &str| WeightRow {
            episode: 0,
            env_step: if phi { 1 } else { 0 },
            diffusion_t: 0,
            phi,
            weights: if strategy == "moe" {
                WeightValues::Route { w_img: 1.0 - w, w_tor: w }
            } else {
                WeightValues::Guidance { w_torque: w }
            },
            strategy: strategy.into(),
        };
        let rows = vec![
            row(false, 0.0, "gated_cfg"),
            row(true, 0.5, "gated_cfg"),
            row(true, 0.25, "gated_cfg"),
            row(false, 0.4, "moe"),
            row(true, 0.5, "moe"),
        ];
        let a = analyze_weights(&rows);
        assert_eq!(a.strategies[0].0, "gated_cfg");
        assert_eq!(a.strategies[0].1.contact_mean, 0.375);
        assert_eq!(a.strategies[0].1.free_mean, 0.0);
        assert_eq!(a.route_sum_error, Some(0.0));
        assert!(a.summary_csv().contains("gated_cfg,2,1,0.375000,0.000000,0.000000,0.375000,inf"));
        assert!(a.plot_csv().contains("gated_cfg,0,1,1,0.375000"));
        assert!(analyze_weights(&[]).markdown().contains("No weight traces"));
    }

    #[test]
    fn alpha_labels_are_readable() {
        assert_eq!(display_label("aux_goals@0.01"), "Auxiliary goals (alpha 0.01)");
        assert_eq!(display_label("gated_cfg"), "Gated CFG fusion");
    }
}
