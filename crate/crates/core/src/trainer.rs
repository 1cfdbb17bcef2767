//! Mapper pretraining with the localization loss and DAgger policy training.

use std::io::Write;

use ndgrad::{Adam, Array, Tape, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use worldsim::seed::{derive_seed, rng_for};
use worldsim::{render_observation, sample_episode, EnvGraph, Episode, EpisodeKind, Pose, UNREACHABLE};

use crate::config::{PolicyTrainConfig, TrainConfig};
use crate::data::{random_walk_episodes, LocEpisode};
use crate::error::{Error, Result};
use crate::eval::{evaluate_learned, evaluate_localization, LocalizationReport, NavigationReport};
use crate::mapper::{episode_loss, mapper_step, Frame, MapState, MapperParams, MapperVars, Modalities, ProjectionConfig};
use crate::nav::sample_nav_episodes;
use crate::navpolicy::{cost_vector, ego_stack, nav_loss, select_action, CoreState, Mode, PolicyConfig, PolicyInputs, PolicyParams, PolicyVars, NUM_ACTIONS};

/// Adds `src` into `acc`, allocating on first use.
pub(crate) fn accumulate(acc: &mut Option<Vec<Array>>, src: Vec<Array>) {
    match acc {
        None => *acc = Some(src),
        Some(a) => {
            for (x, y) in a.iter_mut().zip(src) {
                for (p, q) in x.data_mut().iter_mut().zip(y.data()) {
                    *p += q;
                }
            }
        }
    }
}

pub(crate) fn scale_grads(grads: &mut [Array], s: f64) {
    for g in grads {
        g.data_mut().iter_mut().for_each(|x| *x *= s);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapperLogRow {
    pub epoch: usize,
    pub loss: f64,
    pub heldout_ape: f64,
    pub heldout_baseline_ape: f64,
}

/// Training and held-out localization episodes, grouped by length.
pub struct LocData {
    pub train: Vec<LocEpisode>,
    pub heldout: Vec<(usize, Vec<LocEpisode>)>,
}

pub fn localization_data(cfg: &TrainConfig, proj: &ProjectionConfig, train: &[EnvGraph], test: &[EnvGraph]) -> Result<LocData> {
    let m = &cfg.mapper;
    let mut train_eps = Vec::new();
    let mut heldout = Vec::new();
    for (k, &len) in m.lengths.iter().enumerate() {
        let seed = derive_seed(cfg.seed, 0x10c0 + k as u64);
        train_eps.extend(random_walk_episodes(train, m.episodes_per_length, len, seed, proj, &cfg.camera, &cfg.noise)?);
        let seed = derive_seed(cfg.seed, 0x10e0 + k as u64);
        heldout.push((len, random_walk_episodes(test, m.heldout_per_length, len, seed, proj, &cfg.camera, &cfg.noise)?));
    }
    Ok(LocData { train: train_eps, heldout })
}

pub struct MapperTraining {
    pub params: MapperParams,
    pub log: Vec<MapperLogRow>,
    pub reports: Vec<LocalizationReport>,
}

/// Mapper weights before pretraining, seeded from the config.
pub fn initial_mapper(cfg: &TrainConfig, proj: &ProjectionConfig) -> Result<MapperParams> {
    MapperParams::init(proj, &mut rng_for(cfg.seed, 0x3a99))
}

/// Trains a mapper on random-walk episodes by minimizing the localization
/// loss, evaluating held-out APE after every epoch.
pub fn pretrain_mapper(cfg: &TrainConfig, proj: &ProjectionConfig, data: &LocData, r_env: usize, cell_mm: f64) -> Result<MapperTraining> {
    let m = &cfg.mapper;
    let mut params = initial_mapper(cfg, proj)?;
    let mut opt = Adam::new(m.lr)?;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut log = Vec::new();
    let mut reports = Vec::new();
    let mut last_good = params.clone();
    for epoch in 0..m.epochs {
        order.shuffle(&mut rng_for(cfg.seed, 0x5f00 + epoch as u64));
        let mut total = 0.0;
        for batch in order.chunks(m.batch_size) {
            let mut acc = None;
            for &i in batch {
                let ep = &data.train[i];
                let mut tape = Tape::new();
                let vars = params.bind(&mut tape, true);
                let (loss, _) = episode_loss(&mut tape, &vars, &ep.frames, &ep.targets)?;
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    params = last_good;
                    return Err(Error::Diverged {
                        epoch,
                        checkpoint: Box::new(params),
                    });
                }
                total += value;
                let grads = tape.backward(loss)?;
                accumulate(&mut acc, params.params.collect_grads(&grads, &vars.bound));
            }
            let mut grads = acc.expect("nonempty batch");
            scale_grads(&mut grads, 1.0 / batch.len() as f64);
            opt.step(&mut params.params, &grads)?;
        }
        last_good = params.clone();
        reports = data
            .heldout
            .iter()
            .map(|(_, eps)| evaluate_localization(&params, eps, r_env, cell_mm))
            .collect::<Result<Vec<_>>>()?;
        let all_ape: Vec<f64> = reports.iter().flat_map(|r| r.episode_ape.iter().copied()).collect();
        let all_base: Vec<f64> = reports.iter().flat_map(|r| r.baseline_ape.iter().copied()).collect();
        log.push(MapperLogRow {
            epoch,
            loss: total / data.train.len().max(1) as f64,
            heldout_ape: crate::eval::mean(&all_ape),
            heldout_baseline_ape: crate::eval::mean(&all_base),
        });
    }
    Ok(MapperTraining { params, log, reports })
}

/// Writes rows as CSV with a header.
pub fn write_csv<W: Write, T: Serialize>(w: W, rows: &[T]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

/// Exponentially decaying probability of drawing a minibatch from the
/// initial episode pool.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DaggerSchedule {
    pub p0: f64,
    pub gamma: f64,
}

impl DaggerSchedule {
    pub fn new(p0: f64, gamma: f64) -> Result<Self> {
        if !(p0 > 0.0 && p0 <= 1.0) || !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::Config(format!("invalid schedule p0 = {}, gamma = {}", p0, gamma)));
        }
        Ok(DaggerSchedule { p0, gamma })
    }
}

/// `p0 * gamma^k`.
pub fn mixing_probability(schedule: &DaggerSchedule, k: usize) -> f64 {
    schedule.p0 * schedule.gamma.powi(k as i32)
}

/// An initial-pool episode and the scene it was drawn in.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolEpisode {
    pub scene: usize,
    pub episode: Episode,
}

/// Target classes of `targets` that have at least one goal pose in `graph`.
pub fn reachable_targets(graph: &EnvGraph, targets: &[usize]) -> Vec<usize> {
    targets.iter().copied().filter(|&c| graph.goal_poses(c).is_ok_and(|g| !g.is_empty())).collect()
}

/// Expert and random-walk episodes over the training scenes; random walks
/// start anywhere, expert episodes anywhere off the goal set.
pub fn build_pool(graphs: &[EnvGraph], targets: &[usize], cfg: &PolicyTrainConfig, seed: u64) -> Result<Vec<PoolEpisode>> {
    let n_expert = (cfg.pool_episodes as f64 * cfg.expert_fraction).round() as usize;
    let mut pool = Vec::with_capacity(cfg.pool_episodes);
    for k in 0..cfg.pool_episodes {
        let scene = k % graphs.len();
        let g = &graphs[scene];
        let ep_seed = derive_seed(seed, k as u64);
        let classes = reachable_targets(g, targets);
        let &class = classes
            .choose(&mut rng_for(ep_seed, 0xc1a5))
            .ok_or_else(|| Error::Config(format!("training scene {} has no reachable target", scene)))?;
        let kind = if k < n_expert { EpisodeKind::Expert } else { EpisodeKind::Random };
        pool.push(PoolEpisode {
            scene,
            episode: sample_episode(g, kind, class, cfg.episode_len, ep_seed)?,
        });
    }
    Ok(pool)
}

/// Where a training episode's actions come from.
pub enum Rollout<'a> {
    /// Replays a stored episode.
    Replay(&'a Episode),
    /// Samples actions from the policy being trained.
    OnPolicy { start: Pose, target: usize, seed: u64 },
}

pub struct EpisodeOutcome {
    pub loss: Var,
    pub steps: usize,
    pub labels: Vec<[f64; NUM_ACTIONS]>,
    pub bn_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Recurrent state is cut from the gradient graph every this many steps.
pub const TBPTT_WINDOW: usize = 20;

fn detach(tape: &mut Tape, v: Var) -> Var {
    let value = tape.value(v).clone();
    tape.constant(value)
}

/// Unrolls mapper and policy over one episode on `tape`, labelling every
/// visited state with its cost targets, and returns the navigation loss.
#[allow(clippy::too_many_arguments)]
pub fn nav_episode_loss<R: Rng>(
    tape: &mut Tape,
    mvars: &MapperVars,
    pvars: &PolicyVars,
    graph: &EnvGraph,
    rollout: &Rollout,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<EpisodeOutcome> {
    let (mut pose, target, seed) = match rollout {
        Rollout::Replay(ep) => (ep.poses[0], ep.target_class, ep.seed),
        Rollout::OnPolicy { start, target, seed } => (*start, *target, *seed),
    };
    let mcfg = mvars.config;
    let mut map = MapState::zeros(tape, mcfg);
    let mut core = CoreState::zeros(tape, pvars.config.hidden);
    let mut collision = false;
    let mut costs = Vec::new();
    let mut labels = Vec::new();
    let mut bn_stats = Vec::new();
    for t in 0.. {
        if t > 0 && t % TBPTT_WINDOW == 0 {
            map = MapState {
                h: detach(tape, map.h),
                c: detach(tape, map.c),
                t: map.t,
            };
            core = CoreState {
                h: detach(tape, core.h),
                c: detach(tape, core.c),
            };
        }
        let mut obs = render_observation(graph.scene(), pose, graph.r_env(), &cfg.camera, &cfg.noise, derive_seed(seed, t as u64));
        obs.collision = collision;
        let frame = Frame::from_observation(&obs, mcfg)?;
        let out = mapper_step(tape, mvars, map, &frame)?;
        map = out.state;
        let features = map.features(tape, mcfg)?;
        let ego = ego_stack(&obs);
        let inputs = PolicyInputs {
            map: features,
            belief: out.belief,
            ego: &ego,
            target,
            collision,
        };
        let pout = pvars.forward(tape, &inputs, core, &mut Mode::Train(&mut *rng))?;
        core = pout.state;
        bn_stats.extend(pout.bn_stats);
        labels.push(cost_vector(graph, pose, target)?);
        costs.push(pout.costs);
        let action = match rollout {
            Rollout::Replay(ep) => match ep.actions.get(t) {
                Some(&a) => a,
                None => break,
            },
            Rollout::OnPolicy { .. } => {
                if t >= cfg.policy.episode_len || graph.distance(pose, target)? == 0 {
                    break;
                }
                select_action(tape.value(pout.costs).data(), rng, pvars.config.temperature)
            }
        };
        let (next, collided) = graph.step(pose, action)?;
        pose = next;
        collision = collided;
    }
    let loss = nav_loss(tape, &costs, &labels)?;
    Ok(EpisodeOutcome {
        loss,
        steps: costs.len(),
        labels,
        bn_stats,
    })
}

pub fn policy_config(cfg: &TrainConfig, proj: &ProjectionConfig) -> PolicyConfig {
    PolicyConfig {
        map_u: proj.u,
        map_v: proj.v,
        map_n: proj.n(),
        map_r: proj.r,
        ego_height: cfg.camera.height_px,
        ego_width: cfg.camera.width_px,
        ego_channels: 3 + proj.c_s + proj.c_d,
        num_targets: cfg.scene.target_classes.iter().max().map_or(0, |m| m + 1),
        embed: 128,
        hidden: cfg.policy.hidden,
        dropout: cfg.policy.dropout,
        temperature: 1.0,
        use_ego: cfg.policy.use_ego,
    }
}

/// Policy weights before DAgger, seeded from the config.
pub fn initial_policy(cfg: &TrainConfig, proj: &ProjectionConfig) -> PolicyParams {
    PolicyParams::init(&policy_config(cfg, proj), &mut rng_for(cfg.seed, 0x9011))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchSource {
    Pool,
    Policy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyLogRow {
    pub iteration: usize,
    pub source: BatchSource,
    pub pool_probability: f64,
    pub loss: f64,
    pub steps: usize,
}

pub struct DaggerTraining {
    pub policy: PolicyParams,
    pub mapper: MapperParams,
    pub log: Vec<PolicyLogRow>,
}

/// DAgger: each iteration takes a minibatch either from the initial pool
/// (with probability `p0 * gamma^k`) or from fresh rollouts of the current
/// policy, labels every state with cost targets and minimizes the navigation
/// loss through the policy and, unless frozen, the mapper.
pub fn dagger_train_policy(cfg: &TrainConfig, graphs: &[EnvGraph], pool: &[PoolEpisode], mapper: &MapperParams) -> Result<DaggerTraining> {
    let pc = &cfg.policy;
    if pool.is_empty() {
        return Err(Error::Config("empty initial episode pool".into()));
    }
    let schedule = DaggerSchedule::new(pc.p0, pc.gamma)?;
    let targets = &cfg.scene.target_classes;
    let mut mapper = mapper.clone();
    let mut policy = initial_policy(cfg, &mapper.config);
    let mut popt = Adam::new(pc.lr)?;
    let mut mopt = Adam::new(pc.lr)?;
    let mut rng = rng_for(cfg.seed, 0xda66);
    let mut log = Vec::with_capacity(pc.iterations);
    for k in 0..pc.iterations {
        let pi = mixing_probability(&schedule, k);
        let source = if rng.gen::<f64>() < pi { BatchSource::Pool } else { BatchSource::Policy };
        let mut pacc = None;
        let mut macc = None;
        let mut stats = Vec::new();
        let (mut total, mut steps) = (0.0, 0);
        for b in 0..pc.batch_size {
            let (scene, rollout) = match source {
                BatchSource::Pool => {
                    let p = &pool[rng.gen_range(0..pool.len())];
                    (p.scene, Rollout::Replay(&p.episode))
                }
                BatchSource::Policy => {
                    let scene = rng.gen_range(0..graphs.len());
                    let g = &graphs[scene];
                    let classes = reachable_targets(g, targets);
                    let &target = classes
                        .choose(&mut rng)
                        .ok_or_else(|| Error::Config(format!("training scene {} has no reachable target", scene)))?;
                    let dist = g.shortest_path_distances(target)?;
                    let starts: Vec<usize> = (0..dist.len()).filter(|&n| dist[n] != 0 && dist[n] != UNREACHABLE).collect();
                    let &start = starts.choose(&mut rng).ok_or_else(|| Error::Config("no start poses".into()))?;
                    (
                        scene,
                        Rollout::OnPolicy {
                            start: g.pose(start),
                            target,
                            seed: derive_seed(derive_seed(cfg.seed, k as u64), b as u64),
                        },
                    )
                }
            };
            let mut tape = Tape::new();
            let mvars = mapper.bind(&mut tape, !pc.freeze_mapper);
            let pvars = policy.bind(&mut tape, true);
            let out = nav_episode_loss(&mut tape, &mvars, &pvars, &graphs[scene], &rollout, cfg, &mut rng)?;
            let value = tape.value(out.loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("navigation loss at iteration {}", k)));
            }
            total += value;
            steps += out.steps;
            stats.extend(out.bn_stats);
            let grads = tape.backward(out.loss)?;
            accumulate(&mut pacc, policy.params.collect_grads(&grads, &pvars.bound));
            if !pc.freeze_mapper {
                accumulate(&mut macc, mapper.params.collect_grads(&grads, &mvars.bound));
            }
        }
        let scale = 1.0 / pc.batch_size as f64;
        let mut pg = pacc.expect("nonempty batch");
        scale_grads(&mut pg, scale);
        popt.step(&mut policy.params, &pg)?;
        if let Some(mut mg) = macc {
            scale_grads(&mut mg, scale);
            mopt.step(&mut mapper.params, &mg)?;
        }
        policy.update_bn_stats(&stats);
        log.push(PolicyLogRow {
            iteration: k,
            source,
            pool_probability: pi,
            loss: total * scale,
            steps,
        });
    }
    Ok(DaggerTraining { policy, mapper, log })
}

/// One cell of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub modalities: Modalities,
    pub fine_tune: bool,
    pub use_ego: bool,
}

impl VariantSpec {
    /// Modality tag, with `NF` for a frozen map and `NE` without egocentric input.
    pub fn tag(&self) -> String {
        let mut t = self.modalities.tag();
        if !self.fine_tune {
            t.push_str("-NF");
        }
        if !self.use_ego {
            t.push_str("-NE");
        }
        t
    }

    pub fn apply(&self, cfg: &TrainConfig) -> TrainConfig {
        let mut out = cfg.clone();
        out.projection.modalities = self.modalities;
        out.policy.freeze_mapper = !self.fine_tune;
        out.policy.use_ego = self.use_ego;
        out
    }
}

/// `{RGB, SSeg-Det, RGB-SSeg-Det} x {fine-tuned, frozen} x {with, without egocentric input}`.
pub fn variant_grid() -> Vec<VariantSpec> {
    let mut out = Vec::with_capacity(12);
    for modalities in [Modalities::RGB, Modalities::SSEG_DET, Modalities::ALL] {
        for fine_tune in [true, false] {
            for use_ego in [true, false] {
                out.push(VariantSpec {
                    modalities,
                    fine_tune,
                    use_ego,
                });
            }
        }
    }
    out
}

pub struct TrainedVariant {
    pub spec: VariantSpec,
    pub report: NavigationReport,
}

/// Trains every variant of [`variant_grid`] (one pretrained mapper per
/// modality set), evaluates each on the test scenes and checkpoints it under
/// `out/<tag>/`.
pub fn ablation_matrix(cfg: &TrainConfig, out: &std::path::Path) -> Result<Vec<TrainedVariant>> {
    cfg.validate()?;
    let train = cfg.train_scenes.build(&cfg.scene, cfg.r_env)?;
    let test = cfg.test_scenes.build(&cfg.scene, cfg.r_env)?;
    let pool = build_pool(&train, &cfg.scene.target_classes, &cfg.policy, cfg.seed)?;
    let (episodes, _) = sample_nav_episodes(&test, &cfg.scene.target_classes, cfg.eval.episodes, derive_seed(cfg.seed, 0xe7a1), &cfg.eval);
    let mut mappers: Vec<(Modalities, MapperParams)> = Vec::new();
    let mut results = Vec::new();
    for spec in variant_grid() {
        let vcfg = spec.apply(cfg);
        let mapper = match mappers.iter().find(|(m, _)| *m == spec.modalities) {
            Some((_, p)) => p.clone(),
            None => {
                let data = localization_data(&vcfg, &vcfg.projection, &train, &test)?;
                let p = pretrain_mapper(&vcfg, &vcfg.projection, &data, vcfg.r_env, vcfg.scene.cell_mm)?.params;
                mappers.push((spec.modalities, p.clone()));
                p
            }
        };
        let trained = dagger_train_policy(&vcfg, &train, &pool, &mapper)?;
        let dir = out.join(spec.tag());
        std::fs::create_dir_all(&dir)?;
        trained.policy.save(&dir.join("policy.ndgc"))?;
        trained.mapper.save(&dir.join("mapper.ndgc"))?;
        write_csv(std::fs::File::create(dir.join("policy_log.csv"))?, &trained.log)?;
        let mut report = evaluate_learned(&trained.mapper, &trained.policy, &test, &episodes, &vcfg.camera, &vcfg.noise, &vcfg.eval)?;
        report.variant = spec.tag();
        results.push(TrainedVariant { spec, report });
    }
    Ok(results)
}
