use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::run::{run, MetricsRow};
use crate::error::{Error, Result};
use crate::learners::ComponentToggles;

pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_MD: &str = "summary.md";

/// One toggle combination's scores across seeds at the early and final
/// checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub index: u8,
    pub label: String,
    pub selection: bool,
    pub prioritization: bool,
    pub regularization: bool,
    pub reward: bool,
    pub seeds: usize,
    pub early_step: u64,
    pub early_mean: f64,
    pub early_std: f64,
    pub final_step: u64,
    pub final_mean: f64,
    pub final_std: f64,
}

/// Directory of one ablation run: `<index>-<label>/seed-<seed>`.
pub fn run_dir(out: &Path, toggles: ComponentToggles, seed: u64) -> PathBuf {
    out.join(format!("{:02}-{}", toggles.index(), toggles.label()))
        .join(format!("seed-{seed}"))
}

/// The eval point at one fifth of the run, mirroring the early/final score
/// pair of the full-scale tables.
fn early_step(cfg: &ExperimentConfig) -> u64 {
    let fifth = cfg.total_steps / 5;
    fifth.div_ceil(cfg.eval_interval).max(1) * cfg.eval_interval
}

fn score(rows: &[MetricsRow], step: u64) -> Option<f64> {
    rows.iter().find(|r| r.env_step == step).map(|r| r.eval_return_mean)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

/// Runs every toggle combination (all 16, all-off first) for every seed,
/// `jobs` runs at a time, then writes `summary.csv` and `summary.md` to
/// `out`. Runs share nothing, so the results do not depend on `jobs`.
pub fn run_ablation(base: &ExperimentConfig, seeds: &[u64], out: &Path, jobs: usize) -> Result<Vec<SummaryRow>> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    base.validate()?;
    let mut tasks = Vec::new();
    for t in ComponentToggles::all_combinations() {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.set_toggles(t);
            cfg.seed = seed;
            tasks.push((t, seed, cfg));
        }
    }
    let results: Vec<Mutex<Option<Result<Vec<MetricsRow>>>>> = tasks.iter().map(|_| Mutex::new(None)).collect();
    let next = Mutex::new(0usize);
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, tasks.len()) {
            s.spawn(|| loop {
                let k = {
                    let mut n = next.lock().expect("queue lock");
                    let k = *n;
                    *n += 1;
                    k
                };
                let Some((t, seed, cfg)) = tasks.get(k) else { break };
                let r = run(cfg, &run_dir(out, *t, *seed), &mut |_| {}).map(|r| r.rows);
                *results[k].lock().expect("result lock") = Some(r);
            });
        }
    });

    let early = early_step(base);
    let last = (base.total_steps / base.eval_interval) * base.eval_interval;
    let mut summary = Vec::new();
    for (chunk, t) in results
        .chunks(seeds.len())
        .zip(ComponentToggles::all_combinations())
    {
        let (mut e, mut f) = (Vec::new(), Vec::new());
        for r in chunk {
            let rows = r.lock().expect("result lock").take().expect("every task ran")?;
            e.extend(score(&rows, early));
            f.extend(score(&rows, last));
        }
        let ((early_mean, early_std), (final_mean, final_std)) = (mean_std(&e), mean_std(&f));
        summary.push(SummaryRow {
            index: t.index(),
            label: t.label(),
            selection: t.selection,
            prioritization: t.prioritization,
            regularization: t.regularization,
            reward: t.reward,
            seeds: seeds.len(),
            early_step: early,
            early_mean,
            early_std,
            final_step: last,
            final_mean,
            final_std,
        });
    }
    write_summary(out, &summary)?;
    Ok(summary)
}

fn write_summary(out: &Path, rows: &[SummaryRow]) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join(SUMMARY_CSV)).map_err(|e| Error::invalid(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::invalid(e.to_string()))?;
    }
    w.flush()?;
    std::fs::write(out.join(SUMMARY_MD), summary_markdown(rows))?;
    Ok(())
}

/// The summary as a Markdown table: one row per combination, a check mark
/// per enabled component, mean ± std at both checkpoints.
pub fn summary_markdown(rows: &[SummaryRow]) -> String {
    let mut s = String::new();
    let (early, last) = rows
        .first()
        .map(|r| (r.early_step, r.final_step))
        .unwrap_or_default();
    let _ = writeln!(
        s,
        "| # | Model | Sel. | Prio. | Reg. | Rew. | {early} step score | {last} step score |"
    );
    let _ = writeln!(s, "|---|---|:-:|:-:|:-:|:-:|---|---|");
    let mark = |b: bool| if b { "✓" } else { "" };
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {:.3} ± {:.3} | {:.3} ± {:.3} |",
            r.index,
            r.label,
            mark(r.selection),
            mark(r.prioritization),
            mark(r.regularization),
            mark(r.reward),
            r.early_mean,
            r.early_std,
            r.final_mean,
            r.final_std
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_checkpoint_lands_on_an_eval_point() {
        let cfg = ExperimentConfig::default();
        assert_eq!(early_step(&cfg), 10_000);
        let cfg = ExperimentConfig {
            total_steps: 2_000,
            eval_interval: 500,
            ..ExperimentConfig::default()
        };
        assert_eq!(early_step(&cfg), 500);
    }

    #[test]
    fn two_seeds_of_sixteen_a2c_combos() {
        let dir = tempfile::tempdir().unwrap();
        let base = ExperimentConfig {
            total_steps: 128,
            eval_interval: 64,
            eval_episodes: 1,
            envs: 2,
            rollout: 4,
            hidden: 8,
            feature_dim: 4,
            checkpoint: false,
            ..ExperimentConfig::a2c("empty-5")
        };
        let rows = run_ablation(&base, &[1, 2], dir.path(), 3).unwrap();
        assert_eq!(rows.len(), 16);
        assert_eq!(rows[15].label, "CCLF");
        assert!(rows.iter().enumerate().all(|(i, r)| r.index as usize == i));
        let runs = walk_metrics(dir.path());
        assert_eq!(runs, 32);
        assert!(dir.path().join(SUMMARY_CSV).exists());
        let md = std::fs::read_to_string(dir.path().join(SUMMARY_MD)).unwrap();
        assert_eq!(md.lines().count(), 18);

        // job count does not change results
        let dir1 = tempfile::tempdir().unwrap();
        let serial = run_ablation(&base, &[1, 2], dir1.path(), 1).unwrap();
        assert_eq!(
            std::fs::read(dir.path().join(SUMMARY_CSV)).unwrap(),
            std::fs::read(dir1.path().join(SUMMARY_CSV)).unwrap()
        );
        assert_eq!(serial.len(), 16);
    }

    fn walk_metrics(dir: &Path) -> usize {
        let mut n = 0;
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                n += walk_metrics(&p);
            } else if p.file_name().unwrap() == "metrics.csv" {
                n += 1;
            }
        }
        n
    }
}
