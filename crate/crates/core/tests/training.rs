use rand::Rng;
use shardtrain::config::{DatasetConfig, OptimSection, RunConfig};
use shardtrain::fabric::ExecMode;
use shardtrain::fsdp::peak_unsharded;
use shardtrain::probe::{train_probe, ProbeConfig};
use shardtrain::rng::stream;
use shardtrain::swav::SwavConfig;
use shardtrain::tensor::Matrix;
use shardtrain::train::{self, Setup, TrainOptions};

fn small(world: usize) -> RunConfig {
    RunConfig {
        width_divisor: 28,
        head_dims: vec![8],
        world_size: world,
        batch_per_rank: 3,
        total_iters: 12,
        swav: SwavConfig {
            n_prototypes: 6,
            ..SwavConfig::default()
        },
        dataset: DatasetConfig {
            dim: 10,
            n_samples: 64,
            ..Default::default()
        },
        optim: OptimSection {
            warmup_iters: 2,
            ..Default::default()
        },
        ..RunConfig::default()
    }
}

fn run(cfg: &RunConfig) -> train::TrainOutcome {
    let setup = Setup::new(cfg).unwrap();
    train::train(&setup, ExecMode::Sim, &TrainOptions::default(), &|_| {}).unwrap()
}

#[test]
fn activation_checkpointing_does_not_change_training() {
    let plain = run(&small(2));
    for boundaries in [vec![2], vec![1, 3], vec![1, 2, 3, 4]] {
        let ck = run(&RunConfig {
            boundaries: Some(boundaries.clone()),
            ..small(2)
        });
        assert_eq!(ck.states, plain.states, "boundaries {boundaries:?}");
        let gathers = |o: &train::TrainOutcome| o.events.iter().filter(|e| e.op == "all_gather").count();
        assert!(gathers(&ck) > gathers(&plain), "recompute should gather again");
    }
}

#[test]
fn budget_plan_is_used_and_preserves_results() {
    let plain = run(&small(2));
    let profile = Setup::new(&small(2)).unwrap().plan;
    let tight = profile.modeled_peak - 1;
    let cfg = RunConfig {
        memory_budget_bytes: Some(tight),
        ..small(2)
    };
    let setup = Setup::new(&cfg).unwrap();
    assert!(!setup.plan.boundaries.is_empty() && setup.plan.modeled_peak <= tight);
    assert_eq!(run(&cfg).states, plain.states);
}

#[test]
fn impossible_budget_is_rejected() {
    let cfg = RunConfig {
        memory_budget_bytes: Some(1),
        ..small(1)
    };
    assert!(Setup::new(&cfg).is_err());
}

#[test]
fn at_most_two_layers_unsharded() {
    for boundaries in [None, Some(vec![2, 4])] {
        let cfg = RunConfig {
            boundaries,
            ..small(4)
        };
        let out = run(&cfg);
        for step in 0..cfg.total_iters {
            for rank in 0..4 {
                let peak = peak_unsharded(&out.events, rank, step);
                assert!((1..=2).contains(&peak), "rank {rank} step {step}: {peak}");
            }
        }
    }
}

#[test]
fn metrics_are_reproducible_and_mode_independent() {
    let setup = Setup::new(&small(4)).unwrap();
    let losses = |mode| {
        let out = train::train(&setup, mode, &TrainOptions::default(), &|_| {}).unwrap();
        out.metrics.iter().map(|m| (m.loss, m.lr)).collect::<Vec<_>>()
    };
    let sim = losses(ExecMode::Sim);
    assert_eq!(sim, losses(ExecMode::Sim));
    assert_eq!(sim, losses(ExecMode::Parallel));
}

#[test]
fn probe_on_random_labels_is_near_chance() {
    let mut r = stream(3, &[0]);
    let n = 2000;
    let x = Matrix::from_vec(n, 16, (0..n * 16).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..4)).collect();
    let report = train_probe(&x, &labels, &ProbeConfig::default()).unwrap();
    assert!((report.top1 - 0.25).abs() < 0.06, "top1 {}", report.top1);
    let l = &report.epoch_losses;
    assert!(l[l.len() - 1] < l[0], "{l:?}");
}
