//! Flat `key = value` configuration files with optional `[section]` headers.
//!
//! Keys may appear at top level or inside the section that owns them.
//! Unknown sections, unknown keys and repeated keys are errors carrying the
//! offending line number. Anything not mentioned keeps its default.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fusion::{StrategyConfig, StrategyTag};
use crate::harness::TrainConfig;
use crate::simenv::TaskId;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub line: usize,
    pub section: Option<String>,
    /// Line of the governing section header, 0 at top level.
    pub section_line: usize,
    pub key: String,
    pub value: String,
}

/// Splits `text` into entries without interpreting keys.
pub fn parse_entries(text: &str) -> Result<Vec<Entry>> {
    let mut section = None;
    let mut section_line = 0;
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') || s.starts_with(';') {
            continue;
        }
        if let Some(rest) = s.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| Error::Config { line, msg: format!("malformed section header `{s}`") })?
                .trim();
            if name.is_empty() {
                return Err(Error::Config { line, msg: "empty section name".into() });
            }
            section = Some(name.to_string());
            section_line = line;
            continue;
        }
        let Some((k, v)) = s.split_once('=') else {
            return Err(Error::Config { line, msg: format!("expected `key = value`, got `{s}`") });
        };
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(Error::Config { line, msg: "missing key before `=`".into() });
        }
        if let Some(prev) = out.iter().find(|e| e.key == key) {
            return Err(Error::Config { line, msg: format!("key `{key}` already set on line {}", prev.line) });
        }
        out.push(Entry { line, section: section.clone(), section_line, key, value: v.trim().to_string() });
    }
    Ok(out)
}

const TRAIN_KEYS: &[(&str, &str)] = &[
    ("train", "task"),
    ("train", "strategy"),
    ("train", "demos"),
    ("train", "demo_seed"),
    ("train", "epochs"),
    ("train", "batch_size"),
    ("train", "lr"),
    ("train", "weight_decay"),
    ("train", "warmup_steps"),
    ("train", "seed"),
    ("train", "grad_chunk"),
    ("strategy", "strategy"),
    ("strategy", "gate_threshold"),
    ("strategy", "alpha"),
    ("strategy", "max_guidance"),
    ("model", "horizon"),
    ("model", "history"),
    ("model", "c1"),
    ("model", "c2"),
    ("diffusion", "diffusion_steps"),
    ("diffusion", "beta_start"),
    ("diffusion", "beta_end"),
    ("eval", "exec_steps"),
];

const GRID_KEYS: &[(&str, &str)] = &[
    ("grid", "tasks"),
    ("grid", "strategies"),
    ("grid", "seeds"),
    ("grid", "alphas"),
    ("eval", "episodes"),
    ("eval", "eval_seed"),
];

fn check_key(e: &Entry, allowed: &[&[(&str, &str)]]) -> Result<()> {
    let all = allowed.iter().flat_map(|t| t.iter());
    let sections: Vec<&str> = all.clone().map(|(s, _)| *s).collect();
    if let Some(sec) = &e.section {
        if !sections.contains(&sec.as_str()) {
            return Err(Error::Config { line: e.section_line, msg: format!("unknown section `[{sec}]`") });
        }
    }
    let ok = all.clone().any(|(s, k)| *k == e.key && e.section.as_deref().is_none_or(|sec| sec == *s));
    if ok {
        return Ok(());
    }
    let known = all.clone().any(|(_, k)| *k == e.key);
    let msg = if known {
        format!("key `{}` does not belong in section `[{}]`", e.key, e.section.as_deref().unwrap_or(""))
    } else {
        format!("unknown key `{}`", e.key)
    };
    Err(Error::Config { line: e.line, msg })
}

fn value<T: FromStr>(e: &Entry) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    e.value.parse().map_err(|err| Error::Config {
        line: e.line,
        msg: format!("bad value `{}` for `{}`: {err}", e.value, e.key),
    })
}

fn list<T: FromStr>(e: &Entry) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    e.value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse().map_err(|err| Error::Config {
                line: e.line,
                msg: format!("bad list item `{s}` for `{}`: {err}", e.key),
            })
        })
        .collect()
}

fn apply_train(cfg: &mut TrainConfig, e: &Entry) -> Result<bool> {
    match e.key.as_str() {
        "task" => cfg.task = value(e)?,
        "strategy" => {
            let tag: StrategyTag = value(e)?;
            cfg.strategy.tag = tag;
            cfg.strategy.moe_gated = tag == StrategyTag::MoeGated;
        }
        "demos" => cfg.demos = value(e)?,
        "demo_seed" => cfg.demo_seed = value(e)?,
        "epochs" => cfg.epochs = value(e)?,
        "batch_size" => cfg.batch_size = value(e)?,
        "lr" => cfg.lr = value(e)?,
        "weight_decay" => cfg.weight_decay = value(e)?,
        "warmup_steps" => cfg.warmup_steps = value(e)?,
        "seed" => cfg.seed = value(e)?,
        "grad_chunk" => cfg.grad_chunk = value(e)?,
        "gate_threshold" => cfg.strategy.gate_threshold = value(e)?,
        "alpha" => cfg.strategy.alpha = value(e)?,
        "max_guidance" => cfg.strategy.max_guidance = value(e)?,
        "horizon" => cfg.horizon = value(e)?,
        "history" => cfg.history = value(e)?,
        "c1" => cfg.c1 = value(e)?,
        "c2" => cfg.c2 = value(e)?,
        "diffusion_steps" => cfg.diffusion_steps = value(e)?,
        "beta_start" => cfg.beta_start = value(e)?,
        "beta_end" => cfg.beta_end = value(e)?,
        "exec_steps" => cfg.exec_steps = value(e)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn validated(cfg: TrainConfig) -> Result<TrainConfig> {
    cfg.validate().map_err(|e| match e {
        Error::Invalid(msg) => Error::Config { line: 0, msg },
        other => other,
    })?;
    Ok(cfg)
}

/// Parses a training config; an empty text yields the defaults.
pub fn parse_train_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for e in parse_entries(text)? {
        check_key(&e, &[TRAIN_KEYS])?;
        apply_train(&mut cfg, &e)?;
    }
    validated(cfg)
}

pub fn load_train_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_train_config(&text)
}

/// A strategy × task × seed grid sharing one base training config.
#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub base: TrainConfig,
    pub tasks: Vec<TaskId>,
    pub strategies: Vec<StrategyTag>,
    pub seeds: Vec<u64>,
    /// Auxiliary-loss weights tried for `aux_goals`; one entry means no sweep.
    pub alphas: Vec<f64>,
    pub episodes: usize,
    pub eval_seed: u64,
}

impl Default for GridConfig {
    fn default() -> Self {
        let base = TrainConfig::default();
        GridConfig {
            alphas: vec![base.strategy.alpha],
            base,
            tasks: TaskId::ALL.to_vec(),
            strategies: vec![
                StrategyTag::VisionOnly,
                StrategyTag::Concat,
                StrategyTag::Gated,
                StrategyTag::AuxGoals,
                StrategyTag::Moe,
                StrategyTag::GatedCfg,
            ],
            seeds: vec![0, 1, 2],
            episodes: 100,
            eval_seed: 1000,
        }
    }
}

/// One trainable cell of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    /// Row label: the strategy tag, suffixed `@alpha` during an α sweep.
    pub label: String,
    pub config: TrainConfig,
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() || self.strategies.is_empty() || self.seeds.is_empty() {
            return Err(Error::Invalid("grid needs at least one task, strategy and seed".into()));
        }
        if self.episodes == 0 {
            return Err(Error::Invalid("episodes must be >= 1".into()));
        }
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
            return Err(Error::Invalid("alphas must be finite and >= 0".into()));
        }
        self.base.validate()
    }

    /// Row labels in report order.
    pub fn labels(&self) -> Vec<String> {
        let mut out = Vec::new();
        for &tag in &self.strategies {
            if tag == StrategyTag::AuxGoals && self.alphas.len() > 1 {
                out.extend(self.alphas.iter().map(|a| format!("{}@{a}", tag.as_str())));
            } else {
                out.push(tag.as_str().to_string());
            }
        }
        out
    }

    /// Every (label, config) to train for `task`, in a fixed order.
    pub fn cells(&self, task: TaskId, seed: u64) -> Vec<GridCell> {
        let mut out = Vec::new();
        for &tag in &self.strategies {
            let alphas: Vec<Option<f64>> = if tag == StrategyTag::AuxGoals && self.alphas.len() > 1 {
                self.alphas.iter().copied().map(Some).collect()
            } else {
                vec![None]
            };
            for alpha in alphas {
                let mut config = self.base.clone();
                config.task = task;
                config.seed = seed;
                let mut sc = StrategyConfig::new(tag);
                sc.gate_threshold = self.base.strategy.gate_threshold;
                sc.alpha = alpha.unwrap_or(self.base.strategy.alpha);
                sc.max_guidance = self.base.strategy.max_guidance;
                config.strategy = sc;
                let label = match alpha {
                    Some(a) => format!("{}@{a}", tag.as_str()),
                    None => tag.as_str().to_string(),
                };
                out.push(GridCell { label, config });
            }
        }
        out
    }
}

pub fn parse_grid_config(text: &str) -> Result<GridConfig> {
    let mut g = GridConfig::default();
    let mut alphas_set = false;
    for e in parse_entries(text)? {
        check_key(&e, &[TRAIN_KEYS, GRID_KEYS])?;
        if apply_train(&mut g.base, &e)? {
            continue;
        }
        match e.key.as_str() {
            "tasks" => g.tasks = list(&e)?,
            "strategies" => g.strategies = list(&e)?,
            "seeds" => g.seeds = list(&e)?,
            "alphas" => {
                g.alphas = list(&e)?;
                alphas_set = true;
            }
            "episodes" => g.episodes = value(&e)?,
            "eval_seed" => g.eval_seed = value(&e)?,
            _ => unreachable!("key table and match arms disagree"),
        }
    }
    if !alphas_set {
        g.alphas = vec![g.base.strategy.alpha];
    }
    g.validate().map_err(|e| match e {
        Error::Invalid(msg) => Error::Config { line: 0, msg },
        other => other,
    })?;
    Ok(g)
}

pub fn load_grid_config(path: &Path) -> Result<GridConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_grid_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(parse_train_config("").unwrap(), TrainConfig::default());
        assert_eq!(parse_grid_config("\n# nothing\n").unwrap(), GridConfig::default());
    }

    #[test]
    fn strategy_tag_maps() {
        let c = parse_train_config("strategy = gated_cfg\n").unwrap();
        assert_eq!(c.strategy.tag, StrategyTag::GatedCfg);
        let c = parse_train_config("[strategy]\nstrategy = moe_gated\nalpha = 0.5").unwrap();
        assert!(c.strategy.moe_gated);
        assert_eq!(c.strategy.alpha, 0.5);
    }

    #[test]
    fn bad_tag_lists_valid_tags() {
        let err = parse_train_config("\nstrategy = banana").unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Config { line: 2, .. }), "{msg}");
        for tag in StrategyTag::ALL {
            assert!(msg.contains(tag.as_str()), "{msg}");
        }
    }

    #[test]
    fn unknown_keys_and_sections_rejected_with_line() {
        assert!(matches!(parse_train_config("lr = 1e-3\nlearning_rate = 1"), Err(Error::Config { line: 2, .. })));
        assert!(matches!(parse_train_config("[optim]\nlr = 1"), Err(Error::Config { line: 1, .. })));
        assert!(matches!(parse_train_config("[model]\nlr = 1"), Err(Error::Config { line: 2, .. })));
        assert!(matches!(parse_train_config("lr = 1\nlr = 2"), Err(Error::Config { line: 2, .. })));
        assert!(matches!(parse_train_config("epochs = -3"), Err(Error::Config { line: 1, .. })));
        assert!(matches!(parse_train_config("epochs"), Err(Error::Config { line: 1, .. })));
        assert!(matches!(parse_train_config("tasks = lid_open"), Err(Error::Config { line: 1, .. })));
    }

    #[test]
    fn canonical_text_parses_back() {
        let c = TrainConfig {
            lr: 3e-3,
            task: TaskId::LidOpen,
            strategy: StrategyConfig::new(StrategyTag::MoeGated),
            ..TrainConfig::default()
        };
        assert_eq!(parse_train_config(&c.canonical()).unwrap(), c);
    }

    #[test]
    fn grid_lists_and_alpha_sweep() {
        let g = parse_grid_config("[grid]\ntasks = weigh_sort, lid_open\nstrategies = aux_goals, gated\nseeds = 4\nalphas = 0.01, 1\n").unwrap();
        assert_eq!(g.tasks, vec![TaskId::WeighSort, TaskId::LidOpen]);
        assert_eq!(g.labels(), vec!["aux_goals@0.01", "aux_goals@1", "gated"]);
        let cells = g.cells(TaskId::LidOpen, 4);
        assert_eq!(cells.len(), 3);
        assert_eq!(cells[1].config.strategy.alpha, 1.0);
        assert_eq!(cells[2].config.seed, 4);
    }
}
