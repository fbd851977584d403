//! Learner and harness invariants observed from outside the crate.

use cclf::env::Observation;
use cclf::harness::{read_metrics, run, ExperimentConfig, Learner, MetricsRow, METRICS_FILE};
use cclf::learners::{ComponentToggles, SacAgent, SacHyper};
use cclf::replay::{ReplayBuffer, Transition};
use cclf::tensor::Param;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn hyper() -> SacHyper {
    SacHyper {
        batch_size: 8,
        views: 3,
        crop: 12,
        hidden: 16,
        feature_dim: 8,
        filters: 4,
        actor_update_freq: 1,
        ..SacHyper::default()
    }
}

fn buffer(seed: u64, n: usize) -> ReplayBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = ReplayBuffer::new(n).unwrap();
    let mut frame = || Observation::new(16, 16, 3, (0..16 * 16 * 3).map(|_| rng.random::<u8>()).collect()).unwrap();
    for k in 0..n {
        let (o, o2) = (frame(), frame());
        buf.push(Transition::new(o, vec![0.5 - (k % 3) as f32 * 0.4], (k % 5) as f32 * 0.2, false, o2));
    }
    buf
}

fn snapshot(params: Vec<(String, &Param<f32>)>, prefix: &str) -> Vec<Vec<u32>> {
    params
        .into_iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(_, p)| p.value.data().iter().map(|v| v.to_bits()).collect())
        .collect()
}

#[test]
fn actor_gradients_never_reach_the_encoder() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = SacHyper {
        critic_lr: 0.0,
        encoder_lr: 0.0,
        w_lr: 0.0,
        ..hyper()
    };
    let mut agent = SacAgent::<f32>::new(h, [16, 16, 3], 1, &mut rng).unwrap();
    let mut buf = buffer(4, 32);
    let encoder = snapshot(agent.named_params(), "encoder");
    let actor = snapshot(agent.named_params(), "actor");
    assert!(!encoder.is_empty() && !actor.is_empty());
    for step in 0..4 {
        let m = agent.cclf_step(&mut buf, ComponentToggles::ALL, 1000 + step, &mut rng).unwrap();
        assert!(m.actor_loss.is_some());
    }
    assert_eq!(snapshot(agent.named_params(), "encoder"), encoder);
    assert_ne!(snapshot(agent.named_params(), "actor"), actor);
}

#[test]
fn disabled_components_leave_weights_and_rewards_alone() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut agent = SacAgent::<f32>::new(hyper(), [16, 16, 3], 1, &mut rng).unwrap();
    let mut buf = buffer(6, 32);
    let toggles = ComponentToggles {
        prioritization: false,
        reward: false,
        ..ComponentToggles::ALL
    };
    for step in 0..5 {
        let m = agent.cclf_step(&mut buf, toggles, 1000 + step, &mut rng).unwrap();
        assert_eq!(m.mean_r_i, 0.0);
    }
    assert!((0..buf.len()).all(|i| buf.get(i).weight == 1.0));
}

#[test]
fn prioritised_updates_touch_at_most_one_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut agent = SacAgent::<f32>::new(hyper(), [16, 16, 3], 1, &mut rng).unwrap();
    let mut buf = buffer(9, 64);
    let toggles = ComponentToggles {
        prioritization: true,
        ..ComponentToggles::NONE
    };
    let before: Vec<f64> = (0..buf.len()).map(|i| buf.get(i).weight).collect();
    agent.cclf_step(&mut buf, toggles, 1000, &mut rng).unwrap();
    let changed = (0..buf.len()).filter(|&i| buf.get(i).weight != before[i]).count();
    assert!(changed > 0 && changed <= 8, "{changed} weights changed");
    assert!((0..buf.len()).all(|i| (0.0..=1.0).contains(&buf.get(i).weight)));
}

#[test]
fn target_networks_hold_no_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut agent = SacAgent::<f32>::new(hyper(), [16, 16, 3], 1, &mut rng).unwrap();
    let mut buf = buffer(11, 32);
    for step in 0..3 {
        agent.cclf_step(&mut buf, ComponentToggles::ALL, 1000 + step, &mut rng).unwrap();
    }
    for (name, p) in agent.named_params() {
        if name.starts_with("target") {
            assert!(p.grad.is_none(), "{name} carries a gradient");
        }
    }
}

fn tiny_config(learner: Learner) -> ExperimentConfig {
    let mut cfg = if learner.is_a2c() {
        ExperimentConfig::a2c("empty-5")
    } else {
        ExperimentConfig {
            init_steps: 200,
            total_steps: 400,
            batch_size: 8,
            hidden: 16,
            feature_dim: 8,
            filters: 4,
            views: 3,
            ..ExperimentConfig::default()
        }
    };
    cfg.learner = learner;
    cfg.seed = 2;
    cfg.eval_interval = 200;
    cfg.eval_episodes = 1;
    cfg.checkpoint = false;
    if learner.is_a2c() {
        cfg.total_steps = 2000;
        cfg.eval_interval = 1000;
    }
    cfg
}

#[test]
fn seeded_runs_repeat_exactly() {
    for learner in [Learner::SacCclf, Learner::A2cCclf] {
        let cfg = tiny_config(learner);
        let dir = tempfile::tempdir().unwrap();
        let a = run(&cfg, &dir.path().join("a"), &mut |_| {}).unwrap();
        let b = run(&cfg, &dir.path().join("b"), &mut |_| {}).unwrap();
        assert!(!a.rows.is_empty());
        let text = |p: &std::path::Path| std::fs::read_to_string(p.join(METRICS_FILE)).unwrap();
        assert_eq!(text(&a.dir), text(&b.dir), "{learner:?}");
    }
}

#[test]
fn metrics_file_is_readable_while_the_run_is_going() {
    let cfg = tiny_config(Learner::A2cCclf);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut seen = 0;
    let path = out.join(METRICS_FILE);
    let result = run(&cfg, &out, &mut |row: &MetricsRow| {
        seen += 1;
        let rows = read_metrics(&path).unwrap();
        assert_eq!(rows.len(), seen);
        let json = |r: &MetricsRow| serde_json::to_string(r).unwrap();
        assert_eq!(json(rows.last().unwrap()), json(row));
    })
    .unwrap();
    assert_eq!(seen, result.rows.len());
}
