use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use cclf::harness::{
    area_under_curve, emit_plot, run, run_ablation, summary_markdown, ExperimentConfig, Learner,
    MetricsRow,
};
use cclf::verify;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cclf", version, about = "Contrastive-curiosity RL experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its results directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Results directory; defaults to runs/<label>-seed-<seed>.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write every evaluation frame as a PGM image.
        #[arg(long)]
        dump_frames: bool,
    },
    /// Run all 16 component combinations for every seed.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long, default_value = "runs/ablation")]
        out: PathBuf,
        /// Runs executed concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Draw mean learning curves with std bands from metrics files.
    Plot {
        #[arg(long, value_delimiter = ',', required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the invariant and oracle checks.
    Verify {
        /// Also run the learning and ablation criteria (hours).
        #[arg(long)]
        learning: bool,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Directory for the runs the checks perform.
        #[arg(long, default_value = "runs/verify")]
        out: PathBuf,
    },
    /// Print the default configuration as JSON.
    Defaults {
        #[arg(long, default_value = "sac-cclf")]
        learner: String,
        #[arg(long)]
        env: Option<String>,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            dump_frames,
        } => train(&config, seed, out, dump_frames),
        Command::Ablate {
            config,
            seeds,
            out,
            jobs,
        } => {
            let cfg = load(&config)?;
            let rows = run_ablation(&cfg, &seeds, &out, jobs)?;
            print!("{}", summary_markdown(&rows));
            println!("results in {}", out.display());
            Ok(true)
        }
        Command::Plot { inputs, out } => {
            let groups = emit_plot(&inputs, &out)?;
            for g in &groups {
                println!("{}: {} runs", g.label, g.runs);
            }
            println!("wrote {}", out.display());
            Ok(true)
        }
        Command::Verify { learning, seed, out } => verify_all(learning, seed, &out),
        Command::Defaults { learner, env } => {
            let learner: Learner = serde_json::from_value(learner.clone().into())
                .with_context(|| format!("unknown learner `{learner}`"))?;
            let mut cfg = if learner.is_a2c() {
                ExperimentConfig::a2c(env.as_deref().unwrap_or("empty-6"))
            } else {
                ExperimentConfig::default()
            };
            cfg.learner = learner;
            if let Some(env) = env {
                cfg.env = env;
            }
            cfg.validate()?;
            println!("{}", serde_json::to_string_pretty(&cfg.resolved())?);
            Ok(true)
        }
    }
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn train(config: &Path, seed: Option<u64>, out: Option<PathBuf>, dump_frames: bool) -> Result<bool> {
    let mut cfg = load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.dump_frames |= dump_frames;
    let out = out.unwrap_or_else(|| PathBuf::from("runs").join(format!("{}-seed-{}", cfg.label(), cfg.seed)));
    println!("{} on {} (seed {}) -> {}", cfg.label(), cfg.env, cfg.seed, out.display());
    let result = run(&cfg, &out, &mut |r: &MetricsRow| {
        println!(
            "{:>8} eval {:>8.3} ± {:<7.3} train {:>8.3}  critic {:.4}  c {:.3}",
            r.env_step, r.eval_return_mean, r.eval_return_std, r.train_return_mean, r.critic_loss, r.mean_c
        );
    })?;
    if result.rows.is_empty() {
        println!("no eval points");
    } else {
        println!("area under curve {:.4}", area_under_curve(&result.rows));
    }
    Ok(true)
}

fn verify_all(learning: bool, seed: u64, out: &Path) -> Result<bool> {
    let mut reports = Vec::new();
    let mut show = |r: verify::Report| {
        println!("{r}");
        reports.push(r.passed);
    };
    show(verify::criterion_1(seed)?);
    show(verify::criterion_2(seed)?);
    show(verify::criterion_3(seed)?);
    show(verify::criterion_4(seed)?);
    show(verify::criterion_5(seed)?);
    show(verify::criterion_6(seed)?);
    show(verify::criterion_7(&out.join("c07"), seed)?);
    if learning {
        show(verify::criterion_8(&out.join("c08"), &verify::LEARNING_SEEDS)?);
        let (nine, ten) = verify::criteria_9_and_10(&out.join("c09"), &verify::LEARNING_SEEDS)?;
        show(nine);
        show(ten);
        show(verify::criterion_11(&out.join("c11"), seed)?);
    }
    let passed = reports.iter().filter(|p| **p).count();
    println!("{passed}/{} criteria passed", reports.len());
    Ok(passed == reports.len())
}
