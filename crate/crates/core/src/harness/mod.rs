//! Training, evaluation and comparison of fusion strategies.

pub mod eval;
pub mod grid;
pub mod metrics;
pub mod records;
pub mod report;
pub mod train;

pub use eval::{evaluate, run_episode, Controller, EvalEpisode, Evaluation, ExpertController, PolicyController, TraceEntry, ZeroController};
pub use grid::{collect, load_policy, run_grid, write_report, GridOptions, LoadedPolicy};
pub use metrics::{
    attempt_metrics, attempt_metrics_of, count_attempts, summarize_weights, AttemptMetrics, Counts, SuccessRow, SuccessTable,
    WeightSummary,
};
pub use records::{EpisodeSummary, WeightRow, WeightValues};
pub use report::{analyze_weights, CellResult, Comparison, WeightAnalysis};
pub use train::{train, TrainConfig, TrainOutcome};
