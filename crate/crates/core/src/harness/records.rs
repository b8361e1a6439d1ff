//! Per-episode summaries and weight-trace rows, with their CSV forms.
//!
//! Reports are regenerated from these files, so both encoders are
//! deterministic and the decoders accept exactly what the encoders write.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fusion::MixWeights;
use crate::simenv::FailureReason;

use super::eval::Evaluation;
use super::metrics::count_attempts;

pub const EPISODES_HEADER: &str = "episode,env_seed,condition,success,failure,steps,attempts";
pub const TRACES_HEADER: &str = "episode,env_step,diffusion_t,phi,w_torque,w_img,w_tor,strategy";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeSummary {
    pub index: usize,
    pub env_seed: u64,
    pub condition: String,
    pub success: bool,
    pub failure: FailureReason,
    pub steps: usize,
    pub attempts: usize,
}

/// One denoising step of a weight trace.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightRow {
    pub episode: usize,
    pub env_step: usize,
    pub diffusion_t: usize,
    pub phi: bool,
    pub weights: WeightValues,
    pub strategy: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightValues {
    Guidance { w_torque: f64 },
    Route { w_img: f64, w_tor: f64 },
}

impl WeightValues {
    /// Weight given to the torque side.
    pub fn torque(&self) -> f64 {
        match *self {
            WeightValues::Guidance { w_torque } => w_torque,
            WeightValues::Route { w_tor, .. } => w_tor,
        }
    }
}

fn failure_str(f: FailureReason) -> &'static str {
    match f {
        FailureReason::None => "none",
        FailureReason::Timeout => "timeout",
        FailureReason::Abort => "abort",
    }
}

fn parse_failure(s: &str) -> Option<FailureReason> {
    match s {
        "none" => Some(FailureReason::None),
        "timeout" => Some(FailureReason::Timeout),
        "abort" => Some(FailureReason::Abort),
        _ => None,
    }
}

pub fn summarize_episodes(ev: &Evaluation) -> Vec<EpisodeSummary> {
    ev.episodes
        .iter()
        .map(|e| EpisodeSummary {
            index: e.index,
            env_seed: e.record.seed,
            condition: e.condition.clone(),
            success: e.record.success,
            failure: e.record.failure_reason,
            steps: e.record.steps_used,
            attempts: count_attempts(&e.record.contact_flags, &e.record.phases),
        })
        .collect()
}

/// Weight rows of the first `max_episodes` episodes (all when `None`).
pub fn weight_rows(ev: &Evaluation, max_episodes: Option<usize>) -> Vec<WeightRow> {
    let limit = max_episodes.unwrap_or(usize::MAX);
    let mut out = Vec::new();
    for e in ev.episodes.iter().take(limit) {
        for t in &e.trace {
            let weights = match t.row.weights {
                MixWeights::None => continue,
                MixWeights::Guidance { w_torque, .. } => WeightValues::Guidance { w_torque },
                MixWeights::Route { w_img, w_tor } => WeightValues::Route { w_img, w_tor },
            };
            out.push(WeightRow {
                episode: e.index,
                env_step: t.env_step,
                diffusion_t: t.row.diffusion_t,
                phi: t.row.phi,
                weights,
                strategy: ev.strategy.clone(),
            });
        }
    }
    out
}

pub fn episodes_csv(rows: &[EpisodeSummary]) -> String {
    let mut s = String::from(EPISODES_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.index,
            r.env_seed,
            r.condition,
            r.success as u8,
            failure_str(r.failure),
            r.steps,
            r.attempts
        );
    }
    s
}

pub fn traces_csv(rows: &[WeightRow]) -> String {
    let mut s = String::from(TRACES_HEADER);
    s.push('\n');
    for r in rows {
        let (wt, wi, wr) = match r.weights {
            WeightValues::Guidance { w_torque } => (format!("{w_torque}"), String::new(), String::new()),
            WeightValues::Route { w_img, w_tor } => (String::new(), format!("{w_img}"), format!("{w_tor}")),
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{wt},{wi},{wr},{}",
            r.episode, r.env_step, r.diffusion_t, r.phi as u8, r.strategy
        );
    }
    s
}

fn bad(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Corrupt {
        path: path.to_path_buf(),
        msg: format!("line {line}: {}", msg.into()),
    }
}

fn body<'a>(path: &Path, text: &'a str, header: &str) -> Result<impl Iterator<Item = (usize, Vec<&'a str>)>> {
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(bad(path, 1, format!("expected header `{header}`")));
    }
    Ok(lines.enumerate().filter(|(_, l)| !l.is_empty()).map(|(i, l)| (i + 2, l.split(',').collect())))
}

fn field<T: std::str::FromStr>(path: &Path, line: usize, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(path, line, format!("bad field `{v}`")))
}

pub fn parse_episodes_csv(path: &Path, text: &str) -> Result<Vec<EpisodeSummary>> {
    let mut out = Vec::new();
    for (line, f) in body(path, text, EPISODES_HEADER)? {
        if f.len() != 7 {
            return Err(bad(path, line, format!("expected 7 fields, found {}", f.len())));
        }
        let success = match f[3] {
            "0" => false,
            "1" => true,
            other => return Err(bad(path, line, format!("bad success flag `{other}`"))),
        };
        out.push(EpisodeSummary {
            index: field(path, line, f[0])?,
            env_seed: field(path, line, f[1])?,
            condition: f[2].to_string(),
            success,
            failure: parse_failure(f[4]).ok_or_else(|| bad(path, line, format!("bad failure `{}`", f[4])))?,
            steps: field(path, line, f[5])?,
            attempts: field(path, line, f[6])?,
        });
    }
    Ok(out)
}

pub fn parse_traces_csv(path: &Path, text: &str) -> Result<Vec<WeightRow>> {
    let mut out = Vec::new();
    for (line, f) in body(path, text, TRACES_HEADER)? {
        if f.len() != 8 {
            return Err(bad(path, line, format!("expected 8 fields, found {}", f.len())));
        }
        let weights = match (f[4], f[5], f[6]) {
            (wt, "", "") if !wt.is_empty() => WeightValues::Guidance { w_torque: field(path, line, wt)? },
            ("", wi, wr) if !wi.is_empty() && !wr.is_empty() => WeightValues::Route {
                w_img: field(path, line, wi)?,
                w_tor: field(path, line, wr)?,
            },
            _ => return Err(bad(path, line, "need either w_torque or both w_img and w_tor")),
        };
        out.push(WeightRow {
            episode: field(path, line, f[0])?,
            env_step: field(path, line, f[1])?,
            diffusion_t: field(path, line, f[2])?,
            phi: f[3] == "1",
            weights,
            strategy: f[7].to_string(),
        });
    }
    Ok(out)
}
