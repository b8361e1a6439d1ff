//! Training, evaluation, aggregation and report files.

use std::path::Path;

use vtfusion::config::{load_train_config, GridConfig};
use vtfusion::diffusion::{q_sample_rows, EpsModel};
use vtfusion::fusion::{strategy_loss, ObsBatch, PolicyModel, StrategyConfig, StrategyTag, TrainBatch};
use vtfusion::harness::grid::{cell_dir, checkpoint_of, load_policy, write_report, write_training, EPISODES_FILE};
use vtfusion::harness::records::{episodes_csv, summarize_episodes};
use vtfusion::harness::train::training_samples;
use vtfusion::harness::{analyze_weights, attempt_metrics_of, collect, evaluate, train, CellResult, Comparison, EpisodeSummary, ExpertController, TrainConfig, ZeroController};
use vtfusion::models::{AdamW, Mat, ParameterSet};
use vtfusion::parallel::Execution;
use vtfusion::rng::stream;
use vtfusion::simenv::{generate_demos, Dataset, FailureReason, TaskId};
use vtfusion::store::{encode_checkpoint, load_checkpoint, save_checkpoint};
use vtfusion::Error;

fn small_config(tag: StrategyTag) -> TrainConfig {
    TrainConfig {
        strategy: StrategyConfig::new(tag),
        demos: 20,
        epochs: 10,
        warmup_steps: 10,
        ..TrainConfig::default()
    }
}

fn demos() -> Dataset {
    generate_demos(TaskId::WeighSort, 20, 0, None, Execution::Parallel).unwrap()
}

#[test]
fn loss_decreases_for_every_strategy() {
    let ds = demos();
    for tag in StrategyTag::ALL {
        let out = train(&small_config(tag), &ds, Execution::Parallel).unwrap();
        let (first, last) = (out.losses[0], out.losses[9]);
        assert!(last < first, "{tag}: epoch 1 {first}, epoch 10 {last}");
    }
}

#[test]
fn training_is_byte_reproducible() {
    let ds = demos();
    let mut cfg = small_config(StrategyTag::GatedCfg);
    cfg.epochs = 3;
    let a = train(&cfg, &ds, Execution::Parallel).unwrap();
    let b = train(&cfg, &ds, Execution::Parallel).unwrap();
    let c = train(&cfg, &ds, Execution::Sequential).unwrap();
    let bytes = encode_checkpoint(&checkpoint_of(&cfg, &a));
    assert_eq!(bytes, encode_checkpoint(&checkpoint_of(&cfg, &b)));
    assert_eq!(bytes, encode_checkpoint(&checkpoint_of(&cfg, &c)));
    assert_eq!(a.losses, b.losses);
}

/// Action-only objective on the auxiliary model: the same network, with the
/// torque columns removed from the loss.
fn action_only_step(model: &PolicyModel, p: &ParameterSet<f64>, b: &TrainBatch<f64>, s: &vtfusion::diffusion::DiffusionSchedule) -> (f64, ParameterSet<f64>) {
    let a = model.dims.action;
    let x_t = q_sample_rows(&b.x0, &b.ts, &b.eps, s, model.dims.horizon);
    let (eps_hat, cache) = EpsModel::forward(model, p, &b.obs, &x_t, &b.ts);
    let n = (eps_hat.rows * a) as f64;
    let mut loss = 0.0;
    let mut d = Mat::<f64>::zeros(eps_hat.rows, eps_hat.cols);
    for r in 0..eps_hat.rows {
        for c in 0..a {
            let e = eps_hat.at(r, c) - b.eps.at(r, c);
            loss += e * e / n;
            d.row_mut(r)[c] = 2.0 * e / n;
        }
    }
    let mut g = p.zeros_like();
    EpsModel::backward(model, p, &b.obs, cache, &d, &mut g);
    (loss, g)
}

fn pick(m: &Mat<f64>, rows: &[usize]) -> Mat<f64> {
    Mat::from_vec(rows.len(), m.cols, rows.iter().flat_map(|&r| m.row(r).iter().copied()).collect())
}

#[test]
fn zero_aux_weight_matches_action_only_training() {
    let ds = demos();
    let mut cfg = small_config(StrategyTag::AuxGoals);
    cfg.strategy.alpha = 0.0;
    let s = cfg.schedule().unwrap();
    let (model, p32) = PolicyModel::new::<f32>(cfg.strategy, cfg.dims(), &mut stream(0, "init", 0));
    let (obs, x0) = training_samples(&model, &p32, &ds).unwrap();
    let obs = ObsBatch {
        vis: obs.vis.cast::<f64>(),
        tor: obs.tor.cast(),
        prop: obs.prop.cast(),
        phi: obs.phi,
    };
    let x0 = x0.cast::<f64>();
    let (_, init) = PolicyModel::new::<f64>(cfg.strategy, cfg.dims(), &mut stream(0, "init", 0));
    let (mut pa, mut pb) = (init.clone(), init);
    let (mut oa, mut ob) = (AdamW::new(&pa, 1e-3, 0.0), AdamW::new(&pb, 1e-3, 0.0));
    let mut rng = stream(0, "aux.noise", 0);
    let h = model.dims.horizon;
    for step in 0..15 {
        let idx: Vec<usize> = (0..8).map(|i| (step * 8 + i) % obs.len()).collect();
        let rows: Vec<usize> = idx.iter().flat_map(|&i| i * h..(i + 1) * h).collect();
        let b = TrainBatch {
            obs: ObsBatch {
                vis: pick(&obs.vis, &idx),
                tor: pick(&obs.tor, &idx),
                prop: pick(&obs.prop, &idx),
                phi: idx.iter().map(|&i| obs.phi[i]).collect(),
            },
            x0: pick(&x0, &rows),
            ts: idx.iter().map(|i| (i * 7 + step) % s.steps()).collect(),
            eps: vtfusion::diffusion::gaussian(&mut rng, rows.len(), model.traj_width()),
        };
        let mut ga = pa.zeros_like();
        let la = strategy_loss(&model, &pa, &b, &s, Some(&mut ga)).unwrap();
        let (lb, gb) = action_only_step(&model, &pb, &b, &s);
        assert!((la - lb).abs() <= 1e-12 * lb.abs().max(1.0), "step {step}: {la} vs {lb}");
        oa.step(&mut pa, &ga).unwrap();
        ob.step(&mut pb, &gb).unwrap();
    }
    for ((n, a), (_, b)) in pa.iter().zip(pb.iter()) {
        let d = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(d < 1e-9, "{n}: {d}");
    }
}

#[test]
fn reference_controllers_bracket_success() {
    for task in TaskId::ALL {
        let e = evaluate(&ExpertController, task, 12, 5, Execution::Parallel).unwrap();
        assert_eq!(e.successes(), 12, "{task}");
        let z = evaluate(&ZeroController, task, 12, 5, Execution::Parallel).unwrap();
        assert_eq!(z.successes(), 0, "{task}");
        assert!(z.episodes.iter().all(|e| e.record.failure_reason == FailureReason::Timeout));
    }
}

#[test]
fn evaluation_is_reproducible() {
    let ds = demos();
    let mut cfg = small_config(StrategyTag::GatedCfg);
    cfg.epochs = 2;
    let out = train(&cfg, &ds, Execution::Parallel).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_training(dir.path(), &cfg, &out).unwrap();
    let policy = load_policy(&dir.path().join("model.cfck"), Some(StrategyTag::GatedCfg)).unwrap();
    let a = evaluate(&policy.controller(), TaskId::WeighSort, 4, 9, Execution::Parallel).unwrap();
    let b = evaluate(&policy.controller(), TaskId::WeighSort, 4, 9, Execution::Sequential).unwrap();
    assert_eq!(summarize_episodes(&a), summarize_episodes(&b));
    assert!(a.episodes.iter().all(|e| !e.trace.is_empty()));
    assert!(matches!(
        load_policy(&dir.path().join("model.cfck"), Some(StrategyTag::Gated)),
        Err(Error::StrategyMismatch { .. })
    ));
}

fn episodes(light: (u64, u64), heavy: (u64, u64)) -> Vec<EpisodeSummary> {
    let mut out = Vec::new();
    for (cond, (s, n)) in [("light", light), ("heavy", heavy)] {
        for i in 0..n {
            out.push(summary(out.len(), cond, i < s));
        }
    }
    out
}

fn summary(index: usize, condition: &str, success: bool) -> EpisodeSummary {
    EpisodeSummary {
        index,
        env_seed: index as u64,
        condition: condition.to_string(),
        success,
        failure: if success { FailureReason::None } else { FailureReason::Timeout },
        steps: if success { 80 } else { 150 },
        attempts: 1,
    }
}

fn plain(s: u64, n: u64) -> Vec<EpisodeSummary> {
    (0..n as usize).map(|i| summary(i, "all", (i as u64) < s)).collect()
}

/// Strategy label, WeighSort light and heavy counts, TwistPull and LidOpen successes.
type FixtureRow = (&'static str, (u64, u64), (u64, u64), u64, u64);

/// Reference success counts, with WeighSort split by hidden mass.
fn fixture() -> Comparison {
    let rows: [FixtureRow; 7] = [
        ("vision_only", (8, 10), (0, 10), 0, 7),
        ("concat", (1, 10), (2, 10), 0, 12),
        ("gated", (7, 10), (7, 10), 5, 15),
        ("aux_goals", (4, 10), (2, 10), 1, 7),
        ("moe", (5, 10), (0, 10), 1, 7),
        ("moe_raw", (9, 10), (6, 10), 1, 11),
        ("gated_cfg", (9, 10), (7, 10), 7, 18),
    ];
    let mut cmp = Comparison {
        labels: rows.iter().map(|r| r.0.to_string()).collect(),
        tasks: TaskId::ALL.to_vec(),
        seeds: vec![0],
        ..Default::default()
    };
    for (label, light, heavy, twist, lid) in rows {
        for (task, eps) in [
            (TaskId::WeighSort, episodes(light, heavy)),
            (TaskId::TwistPull, plain(twist, 10)),
            (TaskId::LidOpen, plain(lid, 20)),
        ] {
            cmp.cells.push(CellResult {
                label: label.to_string(),
                task,
                seed: 0,
                episodes: eps,
                weights: None,
            });
        }
    }
    cmp
}

#[test]
fn reference_counts_render_expected_rates() {
    let cmp = fixture();
    let md = cmp.markdown();
    let table = cmp.table();
    let expect = [
        ("vision_only", 30.0),
        ("concat", 30.0),
        ("gated", 68.0),
        ("aux_goals", 28.0),
        // 13/50 pooled; a 24.0 average for this row would not match the counts.
        ("moe", 26.0),
        ("moe_raw", 54.0),
        ("gated_cfg", 82.0),
    ];
    for (label, pct) in expect {
        let avg = 100.0 * table.average(label, &TaskId::ALL).unwrap();
        assert!((avg - pct).abs() < 0.1, "{label}: {avg}");
    }
    assert!(md.contains("| Gated CFG fusion | 16/20 (80.0%) | 7/10 (70.0%) | 18/20 (90.0%) | 82.0% |"), "{md}");
    assert!(md.contains("| Vision-only | 8/20 (40.0%) | 0/10 (0.0%) | 7/20 (35.0%) | 30.0% |"));
    assert!(md.contains("| Torque gating | 14/20 (70.0%) | 5/10 (50.0%) | 15/20 (75.0%) | 68.0% |"));
    // Per-condition breakdown of WeighSort.
    assert!(md.contains("| Vision-only | 8/10 | 0/10 |"));
    assert!(md.contains("| Gated CFG fusion | 9/10 | 7/10 |"));
    assert!(md.contains("| Torque gating | 7/10 | 7/10 |"));
    assert!(cmp.success_csv().contains("gated_cfg,average,all,,,0.82"));
}

#[test]
fn average_is_trial_weighted() {
    let cmp = fixture();
    let t = cmp.table();
    let r = t.get("gated", TaskId::TwistPull).unwrap();
    assert_eq!((r.overall.successes, r.overall.trials), (5, 10));
    // 14/20, 5/10, 15/20 pooled is 34/50, not the mean of the three rates.
    assert_eq!(t.average("gated", &TaskId::ALL), Some(34.0 / 50.0));
    let m = attempt_metrics_of(&plain(3, 4));
    assert_eq!(m.first_attempt_success_rate, m.success_rate);
}

fn write_cell(runs: &Path, task: TaskId, label: &str, seed: u64, eps: &[EpisodeSummary]) {
    let dir = cell_dir(runs, task, label, seed).join("eval");
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(dir.join(EPISODES_FILE), episodes_csv(eps)).unwrap();
}

#[test]
fn stub_grid_aggregates_and_marks_gaps() {
    let runs = tempfile::tempdir().unwrap();
    let grid = GridConfig {
        tasks: vec![TaskId::WeighSort, TaskId::LidOpen],
        strategies: vec![StrategyTag::Gated, StrategyTag::GatedCfg],
        seeds: vec![0, 1],
        ..Default::default()
    };
    write_cell(runs.path(), TaskId::WeighSort, "gated", 0, &episodes((3, 4), (1, 4)));
    write_cell(runs.path(), TaskId::WeighSort, "gated", 1, &episodes((2, 4), (2, 4)));
    write_cell(runs.path(), TaskId::LidOpen, "gated", 0, &plain(5, 8));
    write_cell(runs.path(), TaskId::LidOpen, "gated", 1, &plain(6, 8));
    write_cell(runs.path(), TaskId::WeighSort, "gated_cfg", 0, &plain(7, 8));
    let cmp = collect(&grid, runs.path()).unwrap();
    assert_eq!(cmp.missing.len(), 3);
    let t = cmp.table();
    let r = t.get("gated", TaskId::WeighSort).unwrap();
    assert_eq!((r.overall.successes, r.overall.trials), (8, 16));
    assert_eq!((r.by_condition["light"].successes, r.by_condition["heavy"].successes), (5, 3));
    assert_eq!(t.average("gated", &grid.tasks), Some(19.0 / 32.0));
    let md = cmp.markdown();
    assert!(md.contains("| Torque gating | 8/16 (50.0%) | 11/16 (68.8%) | 59.4% |"), "{md}");
    assert!(md.contains("| Gated CFG fusion | 7/8 (87.5%) (incomplete) | missing |"), "{md}");
    assert!(md.contains("- gated_cfg on LidOpen, seed 0"));

    // Regenerating from the same files gives the same bytes.
    let out = tempfile::tempdir().unwrap();
    let md_path = out.path().join("report.md");
    write_report(&md_path, &cmp).unwrap();
    let first: Vec<Vec<u8>> = ["report.md", "success.csv", "attempts.csv", "weights.csv"]
        .iter()
        .map(|f| std::fs::read(out.path().join(f)).unwrap())
        .collect();
    write_report(&md_path, &collect(&grid, runs.path()).unwrap()).unwrap();
    for (i, f) in ["report.md", "success.csv", "attempts.csv", "weights.csv"].iter().enumerate() {
        assert_eq!(std::fs::read(out.path().join(f)).unwrap(), first[i], "{f}");
    }
}

#[test]
fn empty_traces_report_absence() {
    let a = analyze_weights(&[]);
    assert!(a.is_empty());
    assert!(a.markdown().contains("No weight traces were found."));
    assert_eq!(a.summary_csv().lines().count(), 1);
    assert!(fixture().markdown().contains("No weight traces were recorded."));
}

#[test]
fn config_and_checkpoint_files() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.cfg");
    std::fs::write(&empty, "").unwrap();
    assert_eq!(load_train_config(&empty).unwrap(), TrainConfig::default());
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "epochs = 3\nstrategy = banana\n").unwrap();
    let err = load_train_config(&bad).unwrap_err();
    assert!(matches!(err, Error::Config { line: 2, .. }), "{err}");
    assert!(err.to_string().contains("gated_cfg"));
    assert!(matches!(load_train_config(&dir.path().join("nope.cfg")), Err(Error::Io { .. })));

    let cfg = TrainConfig::default();
    let (_, params) = PolicyModel::new::<f32>(cfg.strategy, cfg.dims(), &mut stream(0, "init", 0));
    let ck = vtfusion::store::Checkpoint {
        strategy: cfg.strategy.tag,
        config_text: cfg.canonical(),
        params,
    };
    let path = dir.path().join("m.cfck");
    save_checkpoint(&path, &ck).unwrap();
    assert_eq!(load_checkpoint(&path, Some(StrategyTag::GatedCfg)).unwrap(), ck);
    assert!(matches!(load_checkpoint(&path, Some(StrategyTag::Moe)), Err(Error::StrategyMismatch { .. })));
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 3]).unwrap();
    let err = load_checkpoint(&path, None).unwrap_err();
    assert!(matches!(err, Error::Corrupt { .. }), "{err}");
    assert_eq!(err.exit_code(), 2);
}
