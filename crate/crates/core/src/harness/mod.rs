//! Experiment driver: configuration, seeded training runs, evaluation,
//! metrics and checkpoints, the ablation grid and learning-curve plots.

mod ablation;
mod config;
mod plot;
mod run;

pub use ablation::{run_ablation, run_dir, summary_markdown, SummaryRow, SUMMARY_CSV, SUMMARY_MD};
pub use config::{ExperimentConfig, Learner};
pub use plot::{curve_groups, emit_plot, render_svg, CurveGroup};
pub use run::{
    area_under_curve, read_curiosity, read_metrics, run, CuriosityRow, MetricsRow, RunResult, CHECKPOINT_FILE,
    CONFIG_FILE, CURIOSITY_COLUMNS, CURIOSITY_FILE, FRAMES_DIR, METRICS_COLUMNS, METRICS_FILE,
};
