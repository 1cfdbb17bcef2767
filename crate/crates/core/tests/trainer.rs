mod common;

use common::*;
use ndgrad::Tape;
use proptest::prelude::*;
use semnav::config::TrainConfig;
use semnav::data::SceneSet;
use semnav::mapper::Modalities;
use semnav::trainer::*;
use worldsim::EnvGraph;

/// A configuration small enough for unit-scale training runs.
fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.train_scenes = SceneSet {
        seeds: vec![1, 2],
        min_size: 8,
        max_size: 8,
    };
    cfg.test_scenes = SceneSet {
        seeds: vec![101],
        min_size: 8,
        max_size: 8,
    };
    cfg.camera.width_px = 32;
    cfg.camera.height_px = 24;
    cfg.projection.u = 11;
    cfg.projection.v = 11;
    cfg.projection.u_prime = 7;
    cfg.projection.v_prime = 7;
    cfg.projection.modalities = Modalities::SSEG_DET;
    cfg.mapper.episodes_per_length = 2;
    cfg.mapper.heldout_per_length = 1;
    cfg.mapper.lengths = vec![3];
    cfg.mapper.batch_size = 2;
    cfg.policy.pool_episodes = 6;
    cfg.policy.iterations = 3;
    cfg.policy.batch_size = 2;
    cfg.policy.episode_len = 6;
    cfg.policy.hidden = 8;
    cfg.eval.episodes = 4;
    cfg
}

fn scenes(cfg: &TrainConfig) -> (Vec<EnvGraph>, Vec<EnvGraph>) {
    (
        cfg.train_scenes.build(&cfg.scene, cfg.r_env).unwrap(),
        cfg.test_scenes.build(&cfg.scene, cfg.r_env).unwrap(),
    )
}

#[test]
fn schedule_examples() {
    let s = DaggerSchedule::new(0.9, 0.99).unwrap();
    assert_eq!(mixing_probability(&s, 0), 0.9);
    let s = DaggerSchedule::new(1.0, 0.9).unwrap();
    assert!((mixing_probability(&s, 2) - 0.81).abs() < 1e-15);
    for eps in [0.1, 1e-3, 1e-6] {
        let k = ((eps / s.p0).ln() / s.gamma.ln()).ceil() as usize;
        assert!(mixing_probability(&s, k) <= eps);
    }
    assert!(DaggerSchedule::new(0.0, 0.9).is_err());
    assert!(DaggerSchedule::new(1.1, 0.9).is_err());
    assert!(DaggerSchedule::new(0.9, 0.0).is_err());
    assert!(DaggerSchedule::new(0.9, 1.5).is_err());
}

proptest! {
    #[test]
    fn mixing_probability_decreases_strictly(p0 in 0.01f64..=1.0, gamma in 0.5f64..0.999, k in 0usize..500) {
        let s = DaggerSchedule::new(p0, gamma).unwrap();
        let (a, b) = (mixing_probability(&s, k), mixing_probability(&s, k + 1));
        prop_assert!(b < a);
        prop_assert!(a > 0.0 && a <= 1.0);
    }
}

#[test]
fn zero_epochs_return_initialization() {
    let mut cfg = tiny_config();
    cfg.mapper.epochs = 0;
    let (train, test) = scenes(&cfg);
    let data = localization_data(&cfg, &cfg.projection, &train, &test).unwrap();
    let out = pretrain_mapper(&cfg, &cfg.projection, &data, cfg.r_env, cfg.scene.cell_mm).unwrap();
    assert_eq!(out.params, initial_mapper(&cfg, &cfg.projection).unwrap());
    assert!(out.log.is_empty());
}

#[test]
fn pretraining_loss_trends_down_on_a_fixed_tiny_set() {
    let mut cfg = tiny_config();
    cfg.mapper.epochs = 50;
    cfg.mapper.lengths = vec![4];
    let (train, test) = scenes(&cfg);
    let data = localization_data(&cfg, &cfg.projection, &train, &test).unwrap();
    // one minibatch per epoch, so each logged epoch is one iteration
    assert_eq!(data.train.len(), cfg.mapper.batch_size);
    let out = pretrain_mapper(&cfg, &cfg.projection, &data, cfg.r_env, cfg.scene.cell_mm).unwrap();
    let losses: Vec<f64> = out.log.iter().map(|r| r.loss).collect();
    let windows: Vec<f64> = losses.chunks(5).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    for w in windows.windows(2) {
        assert!(w[1] < w[0], "window means {:?}", windows);
    }
    assert_eq!(out.log.len(), 50);
    assert!(out.log.iter().all(|r| r.heldout_baseline_ape > 0.0));
}

#[test]
fn variant_grid_has_twelve_distinct_cells() {
    let grid = variant_grid();
    assert_eq!(grid.len(), 12);
    let tags: std::collections::HashSet<String> = grid.iter().map(|v| v.tag()).collect();
    assert_eq!(tags.len(), 12);
    assert!(tags.contains("SSeg-Det-NF-NE") && tags.contains("RGB") && tags.contains("RGB-SSeg-Det-NE"));
    let cfg = TrainConfig::default();
    for spec in grid {
        let v = spec.apply(&cfg);
        assert_eq!(v.policy.freeze_mapper, !spec.fine_tune);
        assert_eq!(v.policy.use_ego, spec.use_ego);
        if spec.modalities == Modalities::SSEG_DET {
            assert_eq!(v.projection.n(), 32);
        }
    }
}

#[test]
fn pool_mixes_expert_and_random_episodes() {
    let cfg = tiny_config();
    let (train, _) = scenes(&cfg);
    let mut pc = cfg.policy.clone();
    pc.pool_episodes = 10;
    let pool = build_pool(&train, &cfg.scene.target_classes, &pc, 3).unwrap();
    assert_eq!(pool.len(), 10);
    let expert = pool.iter().filter(|p| p.episode.kind == worldsim::EpisodeKind::Expert).count();
    assert_eq!(expert, 8);
    for p in &pool {
        assert!(p.episode.actions.len() <= pc.episode_len);
        assert!(reachable_targets(&train[p.scene], &cfg.scene.target_classes).contains(&p.episode.target_class));
    }
    assert_eq!(pool, build_pool(&train, &cfg.scene.target_classes, &pc, 3).unwrap());
}

#[test]
fn empty_pool_is_error() {
    let cfg = tiny_config();
    let (train, _) = scenes(&cfg);
    let mapper = initial_mapper(&cfg, &cfg.projection).unwrap();
    assert!(dagger_train_policy(&cfg, &train, &[], &mapper).is_err());
}

#[test]
fn on_policy_rollouts_are_labelled_at_every_state() {
    let cfg = tiny_config();
    let (train, _) = scenes(&cfg);
    let mapper = initial_mapper(&cfg, &cfg.projection).unwrap();
    let policy = initial_policy(&cfg, &cfg.projection);
    let g = &train[0];
    let target = reachable_targets(g, &cfg.scene.target_classes)[0];
    let dist = g.shortest_path_distances(target).unwrap();
    for (k, node) in (0..g.num_nodes())
        .filter(|&n| dist[n] > 0 && dist[n] != worldsim::UNREACHABLE)
        .step_by(13)
        .take(6)
        .enumerate()
    {
        let start = g.pose(node);
        let mut tape = Tape::new();
        let mvars = mapper.bind(&mut tape, true);
        let pvars = policy.bind(&mut tape, true);
        let rollout = Rollout::OnPolicy { start, target, seed: k as u64 };
        let out = nav_episode_loss(&mut tape, &mvars, &pvars, g, &rollout, &cfg, &mut rng(k as u64)).unwrap();
        assert!(out.steps >= 1 && out.steps <= cfg.policy.episode_len + 1);
        assert_eq!(out.labels.len(), out.steps);
        for l in &out.labels {
            assert!(l.iter().all(|c| [-2.0, -1.0, 0.0, 1.0].contains(c)));
        }
    }
}

#[test]
fn replayed_episode_labels_match_cost_targets() {
    let cfg = tiny_config();
    let (train, _) = scenes(&cfg);
    let pool = build_pool(&train, &cfg.scene.target_classes, &cfg.policy, 5).unwrap();
    let mapper = initial_mapper(&cfg, &cfg.projection).unwrap();
    let policy = initial_policy(&cfg, &cfg.projection);
    let p = &pool[0];
    let mut tape = Tape::new();
    let mvars = mapper.bind(&mut tape, false);
    let pvars = policy.bind(&mut tape, true);
    let out = nav_episode_loss(&mut tape, &mvars, &pvars, &train[p.scene], &Rollout::Replay(&p.episode), &cfg, &mut rng(0)).unwrap();
    assert_eq!(out.steps, p.episode.poses.len());
    for (pose, label) in p.episode.poses.iter().zip(&out.labels) {
        assert_eq!(*label, semnav::navpolicy::cost_vector(&train[p.scene], *pose, p.episode.target_class).unwrap());
    }
}

#[test]
fn mapper_receives_gradients_only_when_fine_tuned() {
    let cfg = tiny_config();
    let (train, _) = scenes(&cfg);
    let pool = build_pool(&train, &cfg.scene.target_classes, &cfg.policy, 5).unwrap();
    let mapper = initial_mapper(&cfg, &cfg.projection).unwrap();
    let policy = initial_policy(&cfg, &cfg.projection);
    let p = &pool[1];
    for trainable in [true, false] {
        let mut tape = Tape::new();
        let mvars = mapper.bind(&mut tape, trainable);
        let pvars = policy.bind(&mut tape, true);
        let out = nav_episode_loss(&mut tape, &mvars, &pvars, &train[p.scene], &Rollout::Replay(&p.episode), &cfg, &mut rng(0)).unwrap();
        let grads = tape.backward(out.loss).unwrap();
        let mg = mapper.params.collect_grads(&grads, &mvars.bound);
        let nonzero = mg.iter().any(|g| g.data().iter().any(|&x| x != 0.0));
        assert_eq!(nonzero, trainable);
    }

    let mut frozen = tiny_config();
    frozen.policy.freeze_mapper = true;
    let out = dagger_train_policy(&frozen, &train, &pool, &mapper).unwrap();
    assert_eq!(out.mapper, mapper);
    let out = dagger_train_policy(&cfg, &train, &pool, &mapper).unwrap();
    assert_ne!(out.mapper, mapper);
    assert_ne!(out.policy, initial_policy(&cfg, &cfg.projection));
}

#[test]
fn certain_pool_draws_reduce_to_behaviour_cloning() {
    let mut cfg = tiny_config();
    cfg.policy.p0 = 1.0;
    cfg.policy.gamma = 1.0;
    cfg.policy.iterations = 4;
    let (train, _) = scenes(&cfg);
    let pool = build_pool(&train, &cfg.scene.target_classes, &cfg.policy, 5).unwrap();
    let mapper = initial_mapper(&cfg, &cfg.projection).unwrap();
    let out = dagger_train_policy(&cfg, &train, &pool, &mapper).unwrap();
    assert!(out.log.iter().all(|r| r.source == BatchSource::Pool && r.pool_probability == 1.0));
}

#[test]
fn training_is_reproducible_and_leaves_the_pool_untouched() {
    let cfg = tiny_config();
    let (train, _) = scenes(&cfg);
    let pool = build_pool(&train, &cfg.scene.target_classes, &cfg.policy, 5).unwrap();
    let before = format!("{:?}", pool);
    let mapper = initial_mapper(&cfg, &cfg.projection).unwrap();
    let a = dagger_train_policy(&cfg, &train, &pool, &mapper).unwrap();
    let b = dagger_train_policy(&cfg, &train, &pool, &mapper).unwrap();
    assert_eq!(format!("{:?}", pool), before);
    let csv = |log: &[PolicyLogRow]| {
        let mut buf = Vec::new();
        write_csv(&mut buf, log).unwrap();
        buf
    };
    assert_eq!(csv(&a.log), csv(&b.log));
    assert_eq!(a.policy, b.policy);
    assert_eq!(a.mapper, b.mapper);
    let header = String::from_utf8(csv(&a.log)).unwrap();
    assert!(header.starts_with("iteration,source,pool_probability,loss,steps\n"));
}

#[test]
fn long_rollouts_truncate_backpropagation() {
    let mut cfg = tiny_config();
    cfg.policy.episode_len = TBPTT_WINDOW + 5;
    let (train, _) = scenes(&cfg);
    let mapper = initial_mapper(&cfg, &cfg.projection).unwrap();
    let policy = initial_policy(&cfg, &cfg.projection);
    let g = &train[0];
    let target = reachable_targets(g, &cfg.scene.target_classes)[0];
    let dist = g.shortest_path_distances(target).unwrap();
    let far = (0..g.num_nodes())
        .filter(|&n| dist[n] != worldsim::UNREACHABLE)
        .max_by_key(|&n| dist[n])
        .unwrap();
    // the policy is untrained, so a far start usually runs to the cap; still finite and labelled
    let mut tape = Tape::new();
    let mvars = mapper.bind(&mut tape, true);
    let pvars = policy.bind(&mut tape, true);
    let rollout = Rollout::OnPolicy {
        start: g.pose(far),
        target,
        seed: 1,
    };
    let out = nav_episode_loss(&mut tape, &mvars, &pvars, g, &rollout, &cfg, &mut rng(1)).unwrap();
    let grads = tape.backward(out.loss).unwrap();
    assert!(mapper.params.collect_grads(&grads, &mvars.bound).iter().all(|g| g.is_finite()));
    assert_eq!(out.labels.len(), out.steps);
}
