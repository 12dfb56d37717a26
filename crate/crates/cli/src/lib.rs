//! Benchmark, ablation, reasoning-board and score-correlation drivers
//! behind the `prototta` command.

pub mod ablation;
pub mod bench;
pub mod boards;
pub mod config;
pub mod correlate;
pub mod plan;

pub use ablation::{run_ablation, AblationAxis, AblationRow};
pub use bench::{run_benchmark, BenchmarkOutcome};
pub use boards::{export_boards, read_boards, stratified_sample, ReasoningBoard};
pub use correlate::{correlate_scores, CorrelationRow};
pub use plan::{BenchmarkPlan, MetricKind, NamedMethod};

/// Process exit code for a failed command.
pub fn exit_code(err: &prototta::Error) -> i32 {
    if err.is_config() {
        2
    } else {
        3
    }
}
