//! `vtfusion` command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use vtfusion::config::{load_grid_config, load_train_config};
use vtfusion::fusion::{StrategyConfig, StrategyTag};
use vtfusion::harness::grid::{write_evaluation, write_training, TRACES_FILE};
use vtfusion::harness::records::{parse_traces_csv, summarize_episodes};
use vtfusion::harness::{analyze_weights, attempt_metrics_of, collect, evaluate, load_policy, run_grid, train, write_report, GridOptions, TrainConfig};
use vtfusion::parallel::Execution;
use vtfusion::selftest::run_selftest;
use vtfusion::simenv::{generate_demos, read_dataset, TaskId};
use vtfusion::store::{atomic_write, RunManifest};
use vtfusion::{Error, Result};

#[derive(Parser)]
#[command(name = "vtfusion", version, about = "Train and compare vision-torque fusion strategies for diffusion policies")]
struct Cli {
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the scripted expert and store a demonstration dataset.
    DemoGen {
        #[arg(long)]
        task: TaskId,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dataset file; a `.meta` sidecar is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one policy and write its checkpoint and loss curve.
    Train {
        #[arg(long)]
        task: Option<TaskId>,
        #[arg(long)]
        strategy: Option<StrategyTag>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Demonstration dataset; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint in closed loop.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task: Option<TaskId>,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 1000)]
        seed: u64,
        /// Episodes whose weight traces are kept (all when omitted).
        #[arg(long)]
        trace_episodes: Option<usize>,
        /// Output directory; defaults to `eval/` next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate a grid of strategies and write the comparison.
    Compare {
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Root of the run tree (checkpoints, evaluations, datasets).
        #[arg(long, default_value = "runs")]
        runs: PathBuf,
        /// Markdown report; CSV tables are written next to it.
        #[arg(long, default_value = "report.md")]
        out: PathBuf,
        /// Only aggregate evaluations already present under `--runs`.
        #[arg(long)]
        reuse: bool,
        #[arg(long, default_value_t = 20)]
        trace_episodes: usize,
    },
    /// Summarize fusion weights from trace CSVs.
    AnalyzeWeights {
        /// A trace file or a directory searched recursively for traces.csv.
        #[arg(long)]
        traces: PathBuf,
        /// Output directory; defaults to `weights/` under the traces directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the fast invariant checks.
    Selftest,
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn find_traces(root: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(root, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_traces(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == TRACES_FILE) {
            out.push(p);
        }
    }
    Ok(())
}

fn run(cli: Cli, argv: Vec<String>) -> Result<()> {
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    let start = Instant::now();
    let mut manifest = RunManifest::new(argv);
    let manifest_dir = match cli.command {
        Command::DemoGen { task, n, seed, out } => {
            let dir = parent_dir(&out);
            create_dir(&dir)?;
            let ds = generate_demos(task, n, seed, Some(&out), exec)?;
            println!("{} demonstrations of {task}, {} steps -> {}", ds.episodes.len(), ds.total_steps(), out.display());
            manifest.seeds = vec![seed];
            manifest.outputs = vec![out.clone(), vtfusion::simenv::dataset::sidecar_path(&out)];
            dir
        }
        Command::Train {
            task,
            strategy,
            config,
            data,
            epochs,
            seed,
            out,
        } => {
            let mut cfg = match &config {
                Some(p) => {
                    manifest.inputs.push(p.clone());
                    load_train_config(p)?
                }
                None => TrainConfig::default(),
            };
            if let Some(t) = task {
                cfg.task = t;
            }
            if let Some(tag) = strategy {
                let mut sc = StrategyConfig::new(tag);
                sc.gate_threshold = cfg.strategy.gate_threshold;
                sc.alpha = cfg.strategy.alpha;
                sc.max_guidance = cfg.strategy.max_guidance;
                cfg.strategy = sc;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let ds = match &data {
                Some(p) => {
                    manifest.inputs.push(p.clone());
                    read_dataset(p)?
                }
                None => generate_demos(cfg.task, cfg.demos, cfg.demo_seed, None, exec)?,
            };
            let outcome = train(&cfg, &ds, exec)?;
            create_dir(&out)?;
            manifest.outputs = write_training(&out, &cfg, &outcome)?;
            manifest.config_hash = Some(cfg.hash());
            manifest.seeds = vec![cfg.demo_seed, cfg.seed];
            println!(
                "trained {} on {} for {} epochs: loss {:.4} -> {:.4}",
                cfg.strategy.tag,
                cfg.task,
                cfg.epochs,
                outcome.losses.first().copied().unwrap_or(f64::NAN),
                outcome.losses.last().copied().unwrap_or(f64::NAN)
            );
            out
        }
        Command::Eval {
            ckpt,
            task,
            episodes,
            seed,
            trace_episodes,
            out,
        } => {
            if episodes == 0 {
                return Err(Error::Invalid("episodes must be >= 1".into()));
            }
            let policy = load_policy(&ckpt, None)?;
            let task = task.unwrap_or(policy.config.task);
            if task != policy.config.task {
                return Err(Error::TaskMismatch {
                    expected: task.to_string(),
                    found: policy.config.task.to_string(),
                });
            }
            let ev = evaluate(&policy.controller(), task, episodes, seed, exec)?;
            let out = out.unwrap_or_else(|| parent_dir(&ckpt).join("eval"));
            manifest.outputs = write_evaluation(&out, &ev, trace_episodes)?;
            manifest.inputs = vec![ckpt];
            manifest.config_hash = Some(policy.config.hash());
            manifest.seeds = vec![seed];
            let m = attempt_metrics_of(&summarize_episodes(&ev));
            println!(
                "{} on {task}: {}/{} successes, first-attempt {:.1}%, avg horizon {:.1}",
                policy.config.strategy.tag,
                ev.successes(),
                ev.trials(),
                100.0 * m.first_attempt_success_rate,
                m.avg_task_horizon
            );
            out
        }
        Command::Compare {
            grid,
            runs,
            out,
            reuse,
            trace_episodes,
        } => {
            let g = match &grid {
                Some(p) => {
                    manifest.inputs.push(p.clone());
                    load_grid_config(p)?
                }
                None => Default::default(),
            };
            g.validate()?;
            if !reuse {
                let opts = GridOptions {
                    exec,
                    trace_episodes: Some(trace_episodes),
                    command: manifest.command.clone(),
                };
                run_grid(&g, &runs, &opts, &mut |line| eprintln!("{line}"))?;
            }
            let cmp = collect(&g, &runs)?;
            manifest.inputs.push(runs.clone());
            manifest.outputs = write_report(&out, &cmp)?;
            manifest.config_hash = Some(g.base.hash());
            manifest.seeds = g.seeds.clone();
            if !cmp.missing.is_empty() {
                eprintln!("{} grid cells have no evaluation and are marked missing", cmp.missing.len());
            }
            println!("report -> {}", out.display());
            parent_dir(&out)
        }
        Command::AnalyzeWeights { traces, out } => {
            let mut files = Vec::new();
            if traces.is_dir() {
                find_traces(&traces, &mut files)?;
            } else {
                files.push(traces.clone());
            }
            let mut rows = Vec::new();
            for f in &files {
                let text = std::fs::read_to_string(f).map_err(|e| Error::io(f, e))?;
                rows.extend(parse_traces_csv(f, &text)?);
            }
            let analysis = analyze_weights(&rows);
            let dir = out.unwrap_or_else(|| {
                let base = if traces.is_dir() { traces.clone() } else { parent_dir(&traces) };
                base.join("weights")
            });
            create_dir(&dir)?;
            for (name, body) in [
                ("weights_summary.md", analysis.markdown()),
                ("weights_summary.csv", analysis.summary_csv()),
                ("weights_plot.csv", analysis.plot_csv()),
            ] {
                let p = dir.join(name);
                atomic_write(&p, body.as_bytes())?;
                manifest.outputs.push(p);
            }
            manifest.inputs = files;
            print!("{}", analysis.markdown());
            dir
        }
        Command::Selftest => {
            let checks = run_selftest(exec);
            let failed = checks.iter().filter(|c| !c.passed).count();
            for c in &checks {
                let status = if c.passed { "PASS" } else { "FAIL" };
                if c.detail.is_empty() {
                    println!("{status} {}", c.name);
                } else {
                    println!("{status} {} ({})", c.name, c.detail);
                }
            }
            if failed > 0 {
                return Err(Error::Numerical(format!("{failed} self-test checks failed")));
            }
            return Ok(());
        }
    };
    manifest.wall_seconds = start.elapsed().as_secs_f64();
    manifest.write(&manifest_dir)?;
    Ok(())
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
