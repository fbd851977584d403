use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Learner};
use crate::env::{self, write_pgm, Action, ActionSpace, Environment, Observation};
use crate::error::{Error, Result};
use crate::learners::{A2cAgent, A2cMetrics, RolloutCollector, SacAgent, SacMetrics};
use crate::nn::checkpoint::Checkpoint;
use crate::replay::{ReplayBuffer, Transition};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CURIOSITY_FILE: &str = "curiosity.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const FRAMES_DIR: &str = "frames";

/// One evaluation point. Training columns average the updates since the
/// previous row; NaN marks a value the learner does not produce.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub env_step: u64,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
    /// Mean return of training episodes finished since the previous row.
    pub train_return_mean: f64,
    pub updates: u64,
    /// SAC critic loss, or A2C value loss.
    pub critic_loss: f64,
    /// SAC actor loss, or A2C policy loss.
    pub actor_loss: f64,
    pub alpha: f64,
    pub entropy: f64,
    pub contrastive_loss: f64,
    pub mean_c: f64,
    pub mean_c_next: f64,
    pub mean_r_i: f64,
    pub weight_min: f64,
    pub weight_mean: f64,
    pub weight_max: f64,
}

/// Per-update curiosity, written to the curiosity trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CuriosityRow {
    pub env_step: u64,
    pub update: u64,
    pub mean_c: f64,
    pub mean_c_next: f64,
    pub mean_r_i: f64,
}

/// Outcome of [`run`].
#[derive(Clone, Debug)]
pub struct RunResult {
    pub dir: PathBuf,
    pub rows: Vec<MetricsRow>,
}

/// Trapezoidal area under the eval-return curve from the first to the last
/// row, divided by that step span. A single row gives its own value.
pub fn area_under_curve(rows: &[MetricsRow]) -> f64 {
    match rows {
        [] => f64::NAN,
        [r] => r.eval_return_mean,
        _ => {
            let mut area = 0.0;
            for w in rows.windows(2) {
                let dx = (w[1].env_step - w[0].env_step) as f64;
                area += 0.5 * dx * (w[0].eval_return_mean + w[1].eval_return_mean);
            }
            area / (rows[rows.len() - 1].env_step - rows[0].env_step) as f64
        }
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

pub fn read_curiosity(path: &Path) -> Result<Vec<CuriosityRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::invalid(format!("csv: {other:?}")),
    }
}

/// Running sums of the per-update metrics between two rows.
#[derive(Default)]
struct Accumulator {
    n: [u64; 8],
    sum: [f64; 8],
    episodes: Vec<f64>,
}

const CRITIC: usize = 0;
const ACTOR: usize = 1;
const ALPHA: usize = 2;
const ENTROPY: usize = 3;
const CONTRASTIVE: usize = 4;
const C: usize = 5;
const C_NEXT: usize = 6;
const R_I: usize = 7;

impl Accumulator {
    fn add(&mut self, k: usize, v: f64) {
        if v.is_finite() {
            self.n[k] += 1;
            self.sum[k] += v;
        }
    }

    fn mean(&self, k: usize) -> f64 {
        if self.n[k] == 0 {
            f64::NAN
        } else {
            self.sum[k] / self.n[k] as f64
        }
    }

    fn sac(&mut self, m: &SacMetrics) {
        self.add(CRITIC, m.critic_loss);
        if let Some(a) = m.actor_loss {
            self.add(ACTOR, a);
        }
        self.add(ALPHA, m.alpha);
        self.add(CONTRASTIVE, m.contrastive_loss);
        self.add(C, m.mean_c);
        self.add(C_NEXT, m.mean_c_next);
        self.add(R_I, m.mean_r_i);
    }

    fn a2c(&mut self, m: &A2cMetrics) {
        self.add(CRITIC, m.value_loss);
        self.add(ACTOR, m.policy_loss);
        self.add(ENTROPY, m.entropy);
        self.add(CONTRASTIVE, m.contrastive_loss);
        self.add(C, m.mean_c);
        self.add(C_NEXT, m.mean_c_next);
        self.add(R_I, m.mean_r_i);
    }

    fn row(&mut self, env_step: u64, updates: u64, eval: (f64, f64), weights: (f64, f64, f64)) -> MetricsRow {
        let train = if self.episodes.is_empty() {
            f64::NAN
        } else {
            self.episodes.iter().sum::<f64>() / self.episodes.len() as f64
        };
        let row = MetricsRow {
            env_step,
            eval_return_mean: eval.0,
            eval_return_std: eval.1,
            train_return_mean: train,
            updates,
            critic_loss: self.mean(CRITIC),
            actor_loss: self.mean(ACTOR),
            alpha: self.mean(ALPHA),
            entropy: self.mean(ENTROPY),
            contrastive_loss: self.mean(CONTRASTIVE),
            mean_c: self.mean(C),
            mean_c_next: self.mean(C_NEXT),
            mean_r_i: self.mean(R_I),
            weight_min: weights.0,
            weight_mean: weights.1,
            weight_max: weights.2,
        };
        *self = Self::default();
        row
    }
}

/// Output files of one run; every row is flushed as soon as it is written.
struct Sink {
    dir: PathBuf,
    metrics: csv::Writer<File>,
    curiosity: csv::Writer<BufWriter<File>>,
    rows: Vec<MetricsRow>,
}

impl Sink {
    fn create(dir: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut echo = serde_json::to_string_pretty(&cfg.resolved())?;
        echo.push('\n');
        std::fs::write(dir.join(CONFIG_FILE), echo)?;
        let metrics = table(File::create(dir.join(METRICS_FILE))?, &METRICS_COLUMNS)?;
        let curiosity = table(
            BufWriter::new(File::create(dir.join(CURIOSITY_FILE))?),
            &CURIOSITY_COLUMNS,
        )?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics,
            curiosity,
            rows: Vec::new(),
        })
    }

    fn row(&mut self, row: MetricsRow, observer: &mut dyn FnMut(&MetricsRow)) -> Result<()> {
        self.metrics.serialize(&row).map_err(csv_err)?;
        self.metrics.flush()?;
        self.curiosity.flush()?;
        observer(&row);
        self.rows.push(row);
        Ok(())
    }

    fn curiosity(&mut self, row: CuriosityRow) -> Result<()> {
        self.curiosity.serialize(row).map_err(csv_err)
    }

    fn finish(mut self) -> Result<Vec<MetricsRow>> {
        self.metrics.flush()?;
        self.curiosity.flush()?;
        Ok(self.rows)
    }
}

/// Column order of `metrics.csv`.
pub const METRICS_COLUMNS: [&str; 16] = [
    "env_step",
    "eval_return_mean",
    "eval_return_std",
    "train_return_mean",
    "updates",
    "critic_loss",
    "actor_loss",
    "alpha",
    "entropy",
    "contrastive_loss",
    "mean_c",
    "mean_c_next",
    "mean_r_i",
    "weight_min",
    "weight_mean",
    "weight_max",
];

/// Column order of `curiosity.csv`.
pub const CURIOSITY_COLUMNS: [&str; 5] = ["env_step", "update", "mean_c", "mean_c_next", "mean_r_i"];

/// A writer whose header is written up front, so a run without rows still
/// leaves a valid table.
fn table<W: Write>(inner: W, columns: &[&str]) -> Result<csv::Writer<W>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(inner);
    w.write_record(columns).map_err(csv_err)?;
    w.flush()?;
    Ok(w)
}

/// Independent generator streams of one run.
struct Streams {
    init: ChaCha8Rng,
    train: ChaCha8Rng,
    episodes: ChaCha8Rng,
    eval_seeds: Vec<u64>,
}

impl Streams {
    fn new(seed: u64, eval_episodes: usize) -> Self {
        let stream = |k| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        let mut eval = stream(3);
        Self {
            init: stream(0),
            train: stream(1),
            episodes: stream(2),
            eval_seeds: (0..eval_episodes).map(|_| eval.random()).collect(),
        }
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Mean and population std of the return over fixed-seed episodes with
/// `policy` choosing every action.
/// Where evaluation frames go: `<run>/frames/step-<env_step>/`.
fn frame_dir(cfg: &ExperimentConfig, sink: &Sink, env_step: u64) -> Option<PathBuf> {
    cfg.dump_frames
        .then(|| sink.dir.join(FRAMES_DIR).join(format!("step-{env_step:07}")))
}

fn evaluate(
    env_id: &str,
    seeds: &[u64],
    frames: Option<&Path>,
    mut policy: impl FnMut(&Observation) -> Result<Action>,
) -> Result<(f64, f64)> {
    let mut env = env::make(env_id)?;
    let mut returns = Vec::with_capacity(seeds.len());
    if let Some(dir) = frames {
        std::fs::create_dir_all(dir)?;
    }
    for (episode, &s) in seeds.iter().enumerate() {
        let mut obs = env.reset(s);
        let mut total = 0.0;
        for t in 0.. {
            if let Some(dir) = frames {
                let (w, h, pixels) = env.render();
                write_pgm(&dir.join(format!("episode-{episode:02}-{t:04}.pgm")), w, h, &pixels)?;
            }
            let step = env.step(&policy(&obs)?)?;
            total += step.reward;
            if step.done() {
                break;
            }
            obs = step.observation;
        }
        returns.push(total);
    }
    Ok(mean_std(&returns))
}

/// Trains one configuration and writes its results directory: the config
/// echo, `metrics.csv` (one row per eval point), `curiosity.csv` (one row
/// per update) and, when enabled, `checkpoint.bin`. `observer` sees every
/// metrics row as it is written.
pub fn run(cfg: &ExperimentConfig, out: &Path, observer: &mut dyn FnMut(&MetricsRow)) -> Result<RunResult> {
    cfg.validate()?;
    let mut sink = Sink::create(out, cfg)?;
    let mut streams = Streams::new(cfg.seed, cfg.eval_episodes);
    let checkpoint = if cfg.learner.is_a2c() {
        run_a2c(cfg, &mut sink, &mut streams, observer)?
    } else {
        run_sac(cfg, &mut sink, &mut streams, observer)?
    };
    if let Some(mut ck) = checkpoint {
        ck.meta.insert("learner".into(), cfg.learner.name().into());
        ck.meta.insert("env".into(), cfg.env.clone().into());
        ck.meta.insert("seed".into(), cfg.seed.into());
        ck.meta.insert("env_step".into(), cfg.total_steps.into());
        ck.save(&out.join(CHECKPOINT_FILE))?;
    }
    Ok(RunResult {
        dir: out.to_path_buf(),
        rows: sink.finish()?,
    })
}

fn run_sac(
    cfg: &ExperimentConfig,
    sink: &mut Sink,
    streams: &mut Streams,
    observer: &mut dyn FnMut(&MetricsRow),
) -> Result<Option<Checkpoint>> {
    let mut env = env::make(&cfg.env)?;
    let ActionSpace::Continuous { dim } = env.action_space() else {
        return Err(Error::Config("SAC learners need a continuous action space".into()));
    };
    let repeat = env.action_repeat() as u64;
    let mut agent = SacAgent::<f32>::new(cfg.sac_hyper(), env.observation_shape(), dim, &mut streams.init)?;
    let mut buffer = ReplayBuffer::new(cfg.replay_capacity)?;
    let toggles = cfg.toggles();
    let feed_intrinsic = cfg.learner == Learner::SacCclf && toggles.reward;
    let rng = &mut streams.train;
    let mut acc = Accumulator::default();
    let mut obs = env.reset(streams.episodes.random());
    let (mut env_step, mut episode_return) = (0u64, 0.0);
    let mut next_eval = cfg.eval_interval;

    while env_step < cfg.total_steps {
        let action: Vec<f32> = if env_step < cfg.init_steps {
            (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect()
        } else {
            agent.act(&obs, false, rng)?
        };
        let step = env.step(&Action::Continuous(action.clone()))?;
        env_step += repeat;
        episode_return += step.reward;
        if feed_intrinsic {
            agent.intrinsic.observe_extrinsic(step.reward);
        }
        let next = if step.done() {
            acc.episodes.push(std::mem::take(&mut episode_return));
            env.reset(streams.episodes.random())
        } else {
            step.observation.clone()
        };
        let prev = std::mem::replace(&mut obs, next);
        buffer.push(Transition::new(prev, action, step.reward as f32, step.terminated, step.observation));

        if env_step >= cfg.init_steps {
            let m = match cfg.learner {
                Learner::SacCclf => agent.cclf_step(&mut buffer, toggles, env_step, rng)?,
                Learner::CurlBaseline => agent.baseline_step(&mut buffer, cfg.curl_views, true, rng)?,
                Learner::DrqBaseline => agent.baseline_step(&mut buffer, 2, false, rng)?,
                other => return Err(Error::Config(format!("{} is not a SAC learner", other.name()))),
            };
            acc.sac(&m);
            sink.curiosity(CuriosityRow {
                env_step,
                update: agent.updates(),
                mean_c: m.mean_c,
                mean_c_next: m.mean_c_next,
                mean_r_i: m.mean_r_i,
            })?;
        }

        while next_eval <= env_step.min(cfg.total_steps) {
            let mut dummy = ChaCha8Rng::seed_from_u64(0);
            let eval = evaluate(&cfg.env, &streams.eval_seeds, frame_dir(cfg, sink, next_eval).as_deref(), |o| {
                Ok(Action::Continuous(agent.act(o, true, &mut dummy)?))
            })?;
            let row = acc.row(next_eval, agent.updates(), eval, buffer.weight_stats());
            sink.row(row, observer)?;
            next_eval += cfg.eval_interval;
        }
    }
    cfg.checkpoint
        .then(|| Checkpoint::from_params(&agent.named_params()))
        .transpose()
}

fn run_a2c(
    cfg: &ExperimentConfig,
    sink: &mut Sink,
    streams: &mut Streams,
    observer: &mut dyn FnMut(&MetricsRow),
) -> Result<Option<Checkpoint>> {
    let hyper = cfg.a2c_hyper();
    let envs: Vec<Box<dyn Environment>> = (0..hyper.envs)
        .map(|_| env::make(&cfg.env))
        .collect::<Result<_>>()?;
    let (shape, space) = (envs[0].observation_shape(), envs[0].action_space());
    let mut agent = A2cAgent::<f32>::new(hyper, shape, space, &mut streams.init)?;
    let mut collector = RolloutCollector::new(envs, streams.episodes.random())?;
    let toggles = cfg.toggles();
    let rng = &mut streams.train;
    let mut acc = Accumulator::default();
    let mut next_eval = cfg.eval_interval;

    while collector.frames() < cfg.total_steps {
        let (rollout, finished) = collector.collect(&agent, agent.hyper.rollout, rng)?;
        acc.episodes.extend(finished);
        let env_step = collector.frames();
        let m = match cfg.learner {
            Learner::A2cCclf => agent.a2c_cclf_step(&rollout, toggles, env_step)?,
            _ => agent.a2c_step(&rollout)?,
        };
        acc.a2c(&m);
        sink.curiosity(CuriosityRow {
            env_step,
            update: agent.updates(),
            mean_c: m.mean_c,
            mean_c_next: m.mean_c_next,
            mean_r_i: m.mean_r_i,
        })?;

        while next_eval <= env_step.min(cfg.total_steps) {
            let eval = evaluate(&cfg.env, &streams.eval_seeds, frame_dir(cfg, sink, next_eval).as_deref(), |o| {
                let mut dummy = ChaCha8Rng::seed_from_u64(0);
                Ok(Action::Discrete(agent.act(&[o], true, &mut dummy)?[0]))
            })?;
            let nan = (f64::NAN, f64::NAN, f64::NAN);
            let row = acc.row(next_eval, agent.updates(), eval, nan);
            sink.row(row, observer)?;
            next_eval += cfg.eval_interval;
        }
    }
    cfg.checkpoint
        .then(|| Checkpoint::from_params(&agent.named_params()))
        .transpose()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: u64, ret: f64) -> MetricsRow {
        MetricsRow {
            env_step: step,
            eval_return_mean: ret,
            eval_return_std: 0.0,
            train_return_mean: f64::NAN,
            updates: 0,
            critic_loss: 0.0,
            actor_loss: 0.0,
            alpha: f64::NAN,
            entropy: f64::NAN,
            contrastive_loss: 0.0,
            mean_c: 0.5,
            mean_c_next: 0.5,
            mean_r_i: 0.0,
            weight_min: 1.0,
            weight_mean: 1.0,
            weight_max: 1.0,
        }
    }

    #[test]
    fn auc_of_a_ramp() {
        let rows = [row(0, 0.0), row(10, 1.0), row(20, 1.0)];
        assert!((area_under_curve(&rows) - 0.75).abs() < 1e-12);
        assert_eq!(area_under_curve(&rows[..1]), 0.0);
        assert!(area_under_curve(&[]).is_nan());
    }

    #[test]
    fn population_std() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
    }

    #[test]
    fn zero_steps_gives_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            total_steps: 0,
            ..ExperimentConfig::default()
        };
        let r = run(&cfg, dir.path(), &mut |_| {}).unwrap();
        assert!(r.rows.is_empty());
        let text = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("env_step,eval_return_mean"));
        assert!(read_metrics(&dir.path().join(METRICS_FILE)).unwrap().is_empty());
        let echo = ExperimentConfig::load(&dir.path().join(CONFIG_FILE)).unwrap();
        assert_eq!(echo, cfg.resolved());
    }

    #[test]
    fn columns_match_serialized_fields() {
        let header = |w: csv::Writer<Vec<u8>>| {
            let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
            text.lines().next().unwrap().to_string()
        };
        let mut w = csv::Writer::from_writer(Vec::new());
        w.serialize(row(1, 0.5)).unwrap();
        assert_eq!(header(w), METRICS_COLUMNS.join(","));
        let mut w = csv::Writer::from_writer(Vec::new());
        w.serialize(CuriosityRow {
            env_step: 1,
            update: 1,
            mean_c: 0.1,
            mean_c_next: 0.1,
            mean_r_i: 0.0,
        })
        .unwrap();
        assert_eq!(header(w), CURIOSITY_COLUMNS.join(","));
    }

    #[test]
    fn a2c_run_is_deterministic() {
        let cfg = ExperimentConfig {
            total_steps: 640,
            eval_interval: 320,
            eval_episodes: 2,
            hidden: 16,
            ..ExperimentConfig::a2c("empty-5")
        };
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let r1 = run(&cfg, d1.path(), &mut |_| {}).unwrap();
        run(&cfg, d2.path(), &mut |_| {}).unwrap();
        assert_eq!(r1.rows.len(), 2);
        assert_eq!(r1.rows[1].env_step, 640);
        for f in [METRICS_FILE, CURIOSITY_FILE, CHECKPOINT_FILE] {
            let a = std::fs::read(d1.path().join(f)).unwrap();
            assert_eq!(a, std::fs::read(d2.path().join(f)).unwrap(), "{f}");
        }
        let back = read_metrics(&d1.path().join(METRICS_FILE)).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].env_step, r1.rows[0].env_step);
    }

    #[test]
    fn frame_dump_writes_one_image_per_eval_step() {
        let cfg = ExperimentConfig {
            total_steps: 64,
            eval_interval: 64,
            eval_episodes: 2,
            hidden: 8,
            dump_frames: true,
            checkpoint: false,
            ..ExperimentConfig::a2c("empty-5")
        };
        let dir = tempfile::tempdir().unwrap();
        run(&cfg, dir.path(), &mut |_| {}).unwrap();
        let frames = dir.path().join(FRAMES_DIR).join("step-0000064");
        let names: Vec<String> = std::fs::read_dir(&frames)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert!(names.iter().any(|n| n == "episode-00-0000.pgm"));
        assert!(names.iter().any(|n| n.starts_with("episode-01-")));
        let img = std::fs::read(frames.join("episode-00-0000.pgm")).unwrap();
        assert!(img.starts_with(b"P5\n"));
    }
}
