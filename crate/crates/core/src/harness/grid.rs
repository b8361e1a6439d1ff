//! On-disk run layout and the strategy × task × seed grid runner.
//!
//! ```text
//! runs/
//!   data/{task}-n{demos}-s{seed}.cfbd
//!   {task}/{label}/seed{s}/model.cfck, loss.csv, run_manifest.txt
//!   {task}/{label}/seed{s}/eval/episodes.csv, traces.csv, run_manifest.txt
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::{parse_train_config, GridConfig};
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::fusion::{PolicyModel, StrategyTag};
use crate::models::ParameterSet;
use crate::parallel::Execution;
use crate::rng::stream;
use crate::simenv::{generate_demos, read_dataset, Dataset, TaskId};
use crate::store::{atomic_write, load_checkpoint, save_checkpoint, Checkpoint, RunManifest};

use super::eval::{evaluate, Evaluation, PolicyController};
use super::metrics::summarize_weights;
use super::records::{episodes_csv, parse_episodes_csv, parse_traces_csv, summarize_episodes, traces_csv, weight_rows};
use super::report::{CellResult, Comparison};
use super::train::{train, TrainConfig, TrainOutcome};

pub const CHECKPOINT_FILE: &str = "model.cfck";
pub const LOSS_FILE: &str = "loss.csv";
pub const EPISODES_FILE: &str = "episodes.csv";
pub const TRACES_FILE: &str = "traces.csv";

/// A checkpoint rebuilt into a runnable policy.
pub struct LoadedPolicy {
    pub config: TrainConfig,
    pub model: PolicyModel,
    pub params: ParameterSet<f32>,
    pub schedule: DiffusionSchedule,
}

impl LoadedPolicy {
    pub fn controller(&self) -> PolicyController<'_> {
        PolicyController::new(&self.model, &self.params, &self.schedule, self.config.exec_steps)
    }
}

pub fn checkpoint_of(config: &TrainConfig, outcome: &TrainOutcome) -> Checkpoint {
    Checkpoint {
        strategy: config.strategy.tag,
        config_text: config.canonical(),
        params: outcome.params.clone(),
    }
}

/// Rebuilds the model described by the stored config and installs the
/// stored parameters, which must match its layout exactly.
pub fn policy_from_checkpoint(path: &Path, ck: Checkpoint) -> Result<LoadedPolicy> {
    let config = parse_train_config(&ck.config_text)?;
    if config.strategy.tag != ck.strategy {
        return Err(Error::StrategyMismatch {
            expected: ck.strategy.to_string(),
            found: config.strategy.tag.to_string(),
        });
    }
    let mut rng = stream(config.seed, "init", 0);
    let (model, fresh) = PolicyModel::new::<f32>(config.strategy, config.dims(), &mut rng);
    if !fresh.same_layout(&ck.params) {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            msg: format!("parameter layout does not match a `{}` model", ck.strategy),
        });
    }
    let schedule = config.schedule()?;
    Ok(LoadedPolicy {
        config,
        model,
        params: ck.params,
        schedule,
    })
}

pub fn load_policy(path: &Path, expected: Option<StrategyTag>) -> Result<LoadedPolicy> {
    let ck = load_checkpoint(path, expected)?;
    policy_from_checkpoint(path, ck)
}

pub fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{},{l}", i + 1);
    }
    s
}

/// Writes `model.cfck` and `loss.csv` into `dir`; returns their paths.
pub fn write_training(dir: &Path, config: &TrainConfig, outcome: &TrainOutcome) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ck = dir.join(CHECKPOINT_FILE);
    save_checkpoint(&ck, &checkpoint_of(config, outcome))?;
    let loss = dir.join(LOSS_FILE);
    atomic_write(&loss, loss_csv(&outcome.losses).as_bytes())?;
    Ok(vec![ck, loss])
}

/// Writes `episodes.csv` and `traces.csv` (weight rows of the first
/// `trace_episodes` episodes) into `dir`.
pub fn write_evaluation(dir: &Path, ev: &Evaluation, trace_episodes: Option<usize>) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let eps = dir.join(EPISODES_FILE);
    atomic_write(&eps, episodes_csv(&summarize_episodes(ev)).as_bytes())?;
    let tr = dir.join(TRACES_FILE);
    atomic_write(&tr, traces_csv(&weight_rows(ev, trace_episodes)).as_bytes())?;
    Ok(vec![eps, tr])
}

pub fn dataset_path(runs: &Path, task: TaskId, demos: usize, seed: u64) -> PathBuf {
    runs.join("data").join(format!("{task}-n{demos}-s{seed}.cfbd"))
}

pub fn cell_dir(runs: &Path, task: TaskId, label: &str, seed: u64) -> PathBuf {
    runs.join(task.as_str()).join(label).join(format!("seed{seed}"))
}

/// Options of [`run_grid`].
#[derive(Debug, Clone)]
pub struct GridOptions {
    pub exec: Execution,
    /// Weight traces are kept for this many episodes per checkpoint.
    pub trace_episodes: Option<usize>,
    /// Command line recorded in the manifests.
    pub command: Vec<String>,
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions {
            exec: Execution::default(),
            trace_episodes: Some(20),
            command: vec!["compare".into()],
        }
    }
}

fn dataset_for(runs: &Path, task: TaskId, base: &TrainConfig, exec: Execution) -> Result<Dataset> {
    let path = dataset_path(runs, task, base.demos, base.demo_seed);
    if path.exists() {
        let ds = read_dataset(&path)?;
        if ds.task == task && ds.episodes.len() == base.demos {
            return Ok(ds);
        }
    }
    std::fs::create_dir_all(runs.join("data")).map_err(|e| Error::io(runs, e))?;
    generate_demos(task, base.demos, base.demo_seed, Some(&path), exec)
}

/// Trains every cell whose checkpoint is absent or was produced by a
/// different config, then evaluates every cell. `log` receives one line per
/// finished cell.
pub fn run_grid(grid: &GridConfig, runs: &Path, opts: &GridOptions, log: &mut dyn FnMut(&str)) -> Result<()> {
    grid.validate()?;
    for &task in &grid.tasks {
        let mut ds: Option<Dataset> = None;
        for &seed in &grid.seeds {
            for cell in grid.cells(task, seed) {
                let dir = cell_dir(runs, task, &cell.label, seed);
                let ck_path = dir.join(CHECKPOINT_FILE);
                let fresh = match load_checkpoint(&ck_path, Some(cell.config.strategy.tag)) {
                    Ok(ck) => ck.config_hash() == cell.config.hash(),
                    Err(_) => false,
                };
                if !fresh {
                    if ds.is_none() {
                        ds = Some(dataset_for(runs, task, &grid.base, opts.exec)?);
                    }
                    let start = Instant::now();
                    let outcome = train(&cell.config, ds.as_ref().expect("dataset loaded"), opts.exec)?;
                    let outputs = write_training(&dir, &cell.config, &outcome)?;
                    let mut m = RunManifest::new(opts.command.clone());
                    m.config_hash = Some(cell.config.hash());
                    m.seeds = vec![cell.config.demo_seed, seed];
                    m.inputs = vec![dataset_path(runs, task, grid.base.demos, grid.base.demo_seed)];
                    m.outputs = outputs;
                    m.wall_seconds = start.elapsed().as_secs_f64();
                    m.write(&dir)?;
                    log(&format!(
                        "trained {task}/{}/seed{seed}: final loss {:.4} in {:.1}s",
                        cell.label,
                        outcome.losses.last().copied().unwrap_or(f64::NAN),
                        m.wall_seconds
                    ));
                }
                let start = Instant::now();
                let policy = load_policy(&ck_path, Some(cell.config.strategy.tag))?;
                let ev = evaluate(&policy.controller(), task, grid.episodes, grid.eval_seed, opts.exec)?;
                let eval_dir = dir.join("eval");
                let outputs = write_evaluation(&eval_dir, &ev, opts.trace_episodes)?;
                let mut m = RunManifest::new(opts.command.clone());
                m.config_hash = Some(cell.config.hash());
                m.seeds = vec![grid.eval_seed];
                m.inputs = vec![ck_path];
                m.outputs = outputs;
                m.wall_seconds = start.elapsed().as_secs_f64();
                m.write(&eval_dir)?;
                log(&format!(
                    "evaluated {task}/{}/seed{seed}: {}/{}",
                    cell.label,
                    ev.successes(),
                    ev.trials()
                ));
            }
        }
    }
    Ok(())
}

/// Reads one evaluated cell; `None` when its episode file is absent.
pub fn read_cell(runs: &Path, task: TaskId, label: &str, seed: u64) -> Result<Option<CellResult>> {
    let dir = cell_dir(runs, task, label, seed).join("eval");
    let eps_path = dir.join(EPISODES_FILE);
    let text = match std::fs::read_to_string(&eps_path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(&eps_path, e)),
    };
    let episodes = parse_episodes_csv(&eps_path, &text)?;
    let tr_path = dir.join(TRACES_FILE);
    let weights = match std::fs::read_to_string(&tr_path) {
        Ok(t) => summarize_weights(parse_traces_csv(&tr_path, &t)?.iter().map(|r| (r.phi, r.weights.torque()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(Error::io(&tr_path, e)),
    };
    Ok(Some(CellResult {
        label: label.to_string(),
        task,
        seed,
        episodes,
        weights,
    }))
}

/// Collects every grid cell found under `runs`; absent cells become gaps.
pub fn collect(grid: &GridConfig, runs: &Path) -> Result<Comparison> {
    let mut cmp = Comparison {
        labels: grid.labels(),
        tasks: grid.tasks.clone(),
        seeds: grid.seeds.clone(),
        ..Default::default()
    };
    for &task in &grid.tasks {
        for &seed in &grid.seeds {
            for label in &cmp.labels.clone() {
                match read_cell(runs, task, label, seed)? {
                    Some(c) => cmp.cells.push(c),
                    None => cmp.missing.push((label.clone(), task, seed)),
                }
            }
        }
    }
    Ok(cmp)
}

/// Writes the markdown report to `md` and `success.csv`, `attempts.csv`
/// and `weights.csv` next to it.
pub fn write_report(md: &Path, cmp: &Comparison) -> Result<Vec<PathBuf>> {
    let dir = match md.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    atomic_write(md, cmp.markdown().as_bytes())?;
    let mut paths = vec![md.to_path_buf()];
    for (name, body) in [
        ("success.csv", cmp.success_csv()),
        ("attempts.csv", cmp.attempts_csv()),
        ("weights.csv", cmp.weights_csv()),
    ] {
        let p = dir.join(name);
        atomic_write(&p, body.as_bytes())?;
        paths.push(p);
    }
    Ok(paths)
}
