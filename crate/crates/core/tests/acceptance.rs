//! Acceptance criteria 1 to 11, one test each. Every test writes its report
//! line straight to stderr, so the lines appear even when output is captured.
//! Run artifacts land in `<target>/tmp/acceptance/`.

use std::io::Write;
use std::path::PathBuf;
use std::sync::{Mutex, OnceLock};

use cclf::harness::{emit_plot, METRICS_FILE};
use cclf::verify::{self, Report, LEARNING_SEEDS};

const SEED: u64 = 7;

/// Criteria carry runtime budgets, so they run one at a time.
static SERIAL: Mutex<()> = Mutex::new(());

fn out_dir(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    if dir.exists() {
        std::fs::remove_dir_all(&dir).expect("clear previous artifacts");
    }
    std::fs::create_dir_all(&dir).expect("create artifact dir");
    dir
}

fn check(report: Report) {
    let _ = writeln!(std::io::stderr(), "{report}");
    assert!(report.passed, "{report}");
}

fn serial<T>(f: impl FnOnce() -> T) -> T {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    f()
}

#[test]
fn criterion_01_reduction_to_augmentation_averaging() {
    check(serial(|| verify::criterion_1(SEED)).unwrap());
}

#[test]
fn criterion_02_reduction_to_single_view_bellman_error() {
    check(serial(|| verify::criterion_2(SEED)).unwrap());
}

#[test]
fn criterion_03_reduction_to_unweighted_contrastive_loss() {
    check(serial(|| verify::criterion_3(SEED)).unwrap());
}

#[test]
fn criterion_04_gradient_suite() {
    check(serial(|| verify::criterion_4(SEED)).unwrap());
}

#[test]
fn criterion_05_replay_statistics() {
    check(serial(|| verify::criterion_5(SEED)).unwrap());
}

#[test]
fn criterion_06_selection_oracles() {
    check(serial(|| verify::criterion_6(SEED)).unwrap());
}

#[test]
fn criterion_07_baseline_equivalence() {
    check(serial(|| verify::criterion_7(&out_dir("c07"), SEED)).unwrap());
}

#[test]
fn criterion_08_a2c_learning() {
    check(serial(|| verify::criterion_8(&out_dir("c08"), &LEARNING_SEEDS)).unwrap());
}

/// The pendulum runs feed both criterion 9 and 10; whichever test runs first
/// performs them.
fn pendulum() -> &'static (Report, Report) {
    static RUNS: OnceLock<(Report, Report)> = OnceLock::new();
    serial(|| {
        RUNS.get_or_init(|| {
            let dir = out_dir("c09");
            let reports = verify::criteria_9_and_10(&dir, &LEARNING_SEEDS).unwrap();
            let inputs: Vec<PathBuf> = LEARNING_SEEDS
                .iter()
                .flat_map(|s| {
                    ["sac-cclf", "curl-baseline"].map(|l| dir.join(format!("{l}-{s}")).join(METRICS_FILE))
                })
                .collect();
            emit_plot(&inputs, &dir.join("pendulum.svg")).unwrap();
            reports
        })
    })
}

#[test]
fn criterion_09_sac_learning() {
    check(pendulum().0.clone());
}

#[test]
fn criterion_10_curiosity_trend() {
    check(pendulum().1.clone());
}

#[test]
fn criterion_11_ablation_smoke() {
    check(serial(|| verify::criterion_11(&out_dir("c11"), SEED)).unwrap());
}
