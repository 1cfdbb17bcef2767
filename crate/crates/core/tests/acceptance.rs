//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line to
//! stderr (uncaptured) and then asserts. The long training runs are shared
//! between criteria and executed once per process, one at a time.

mod common;

use std::io::Write;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use common::*;
use ndgrad::checks::kernel_gradient_suite;
use ndgrad::{Array, Tape};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use semnav::config::TrainConfig;
use semnav::eval::*;
use semnav::mapper::*;
use semnav::nav::{sample_nav_episodes, NavEpisode};
use semnav::navpolicy::*;
use semnav::trainer::*;
use worldsim::{build_graph, generate_scene, Action, SceneParams, UNREACHABLE};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: u32, pass: bool, detail: String) {
    let line = format!("criterion {:>2}: {} {}\n", id, if pass { "PASS" } else { "FAIL" }, detail);
    let mut err = std::io::stderr();
    err.write_all(line.as_bytes()).unwrap();
    err.flush().unwrap();
    assert!(pass, "criterion {} failed: {}", id, detail);
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

// ---------------------------------------------------------------------------
// 1. finite-difference gradients

const FD_SEEDS: u64 = 20;
const FD_TOL: f64 = 1e-4;

fn loc_config() -> ProjectionConfig {
    ProjectionConfig {
        u: 9,
        v: 9,
        u_prime: 5,
        v_prime: 5,
        r: 4,
        c_d: 2,
        c_s: 3,
        l_i: 0,
        l_d: 2,
        l_s: 3,
        phi_hidden: 4,
        modalities: Modalities::SSEG_DET,
        ..ProjectionConfig::default()
    }
}

fn grids_frame(det: Array, seg: Array, observed: Vec<bool>) -> Frame {
    Frame {
        rgb: None,
        feature_cells: Vec::new(),
        det: Some(ModalityGrid {
            grid: det,
            observed: observed.clone(),
        }),
        seg: Some(ModalityGrid {
            grid: seg,
            observed: observed.clone(),
        }),
        observed,
    }
}

/// Worst relative gradient error of a scalar loss over every `stride`-th
/// parameter entry, skipping entries that agree to 1e-9 absolute.
fn worst_param_error(params: &ndgrad::ParamSet, analytic: &[Array], stride: usize, loss: &dyn Fn(&ndgrad::ParamSet) -> f64) -> f64 {
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for id in 0..params.len() {
        if !params.is_trainable(id) {
            continue;
        }
        for e in (0..analytic[id].len()).step_by(stride) {
            let mut plus = params.clone();
            plus.value_mut(id).data_mut()[e] += eps;
            let mut minus = params.clone();
            minus.value_mut(id).data_mut()[e] -= eps;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            let a = analytic[id].data()[e];
            if (a - fd).abs() > 1e-9 {
                worst = worst.max(rel_err(a, fd));
            }
        }
    }
    worst
}

fn loc_loss_error(seed: u64) -> f64 {
    let cfg = loc_config();
    let mut r = rng(1000 + seed);
    let params = MapperParams::init(&cfg, &mut r).unwrap();
    let (up, vp) = (cfg.u_prime, cfg.v_prime);
    let frames: Vec<Frame> = (0..3)
        .map(|_| {
            let det = Array::random_uniform(&[up, vp, cfg.c_d], 1.0, &mut r).map(f64::abs);
            let seg = Array::random_uniform(&[up, vp, cfg.c_s], 1.0, &mut r).map(f64::abs);
            let observed = (0..up * vp).map(|_| r.gen_bool(0.8)).collect();
            grids_frame(det, seg, observed)
        })
        .collect();
    let targets: Vec<usize> = (0..3)
        .map(|_| cfg.pose_index(r.gen_range(2..7), r.gen_range(2..7), r.gen_range(0..4)))
        .collect();
    let value = |p: &ndgrad::ParamSet| {
        let mp = MapperParams {
            config: cfg.clone(),
            params: p.clone(),
        };
        let mut tape = Tape::new();
        let vars = mp.bind(&mut tape, false);
        let (l, _) = episode_loss(&mut tape, &vars, &frames, &targets).unwrap();
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, true);
    let (l, _) = episode_loss(&mut tape, &vars, &frames, &targets).unwrap();
    let grads = tape.backward(l).unwrap();
    let analytic = params.params.collect_grads(&grads, &vars.bound);
    worst_param_error(&params.params, &analytic, 11, &value)
}

fn nav_policy_config() -> PolicyConfig {
    PolicyConfig {
        map_u: 5,
        map_v: 5,
        map_n: 2,
        map_r: 4,
        ego_height: 8,
        ego_width: 8,
        ego_channels: 3,
        num_targets: 3,
        embed: 4,
        hidden: 3,
        dropout: 0.0,
        temperature: 1.0,
        use_ego: true,
    }
}

fn nav_loss_error(seed: u64) -> f64 {
    let cfg = nav_policy_config();
    let mut r = rng(2000 + seed);
    let params = PolicyParams::init(&cfg, &mut r);
    let steps = 3;
    let maps: Vec<Array> = (0..steps)
        .map(|_| Array::random_uniform(&[cfg.map_u, cfg.map_v, cfg.map_n], 1.0, &mut r))
        .collect();
    let beliefs: Vec<Array> = (0..steps)
        .map(|_| {
            let b = Array::random_uniform(&[cfg.map_u, cfg.map_v, cfg.map_r], 1.0, &mut r).map(f64::abs);
            let s = b.sum();
            b.map(|x| x / s)
        })
        .collect();
    let egos: Vec<Array> = (0..steps)
        .map(|_| Array::random_uniform(&[cfg.ego_height, cfg.ego_width, cfg.ego_channels], 1.0, &mut r))
        .collect();
    let target = r.gen_range(0..cfg.num_targets);
    let labels: Vec<[f64; NUM_ACTIONS]> = (0..steps)
        .map(|_| [0; NUM_ACTIONS].map(|_| [-2.0, -1.0, 0.0, 1.0][r.gen_range(0..4)]))
        .collect();
    let run = |p: &PolicyParams, grads: bool| {
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, grads);
        let mut state = CoreState::zeros(&mut tape, cfg.hidden);
        let mut preds = Vec::new();
        for t in 0..steps {
            let (map, belief) = (tape.constant(maps[t].clone()), tape.constant(beliefs[t].clone()));
            let inputs = PolicyInputs {
                map,
                belief,
                ego: &egos[t],
                target,
                collision: t % 2 == 1,
            };
            let step = vars.forward(&mut tape, &inputs, state, &mut Mode::<ChaCha8Rng>::Eval).unwrap();
            state = step.state;
            preds.push(step.costs);
        }
        let l = nav_loss(&mut tape, &preds, &labels).unwrap();
        let value = tape.value(l).item();
        let g = grads.then(|| p.params.collect_grads(&tape.backward(l).unwrap(), &vars.bound));
        (value, g)
    };
    let analytic = run(&params, true).1.unwrap();
    let value = |ps: &ndgrad::ParamSet| {
        let mut p = params.clone();
        p.params = ps.clone();
        run(&p, false).0
    };
    worst_param_error(&params.params, &analytic, 7, &value)
}

#[test]
fn c01_finite_difference_gradients() {
    let _g = serial();
    let t = Instant::now();
    let mut worst: Vec<(&str, f64)> = kernel_gradient_suite(0..FD_SEEDS).unwrap();
    worst.push(("L_loc", (0..FD_SEEDS).map(loc_loss_error).fold(0.0, f64::max)));
    worst.push(("L_nav", (0..FD_SEEDS).map(nav_loss_error).fold(0.0, f64::max)));
    let elapsed = t.elapsed();
    let (name, max) = worst.iter().copied().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let pass = max < FD_TOL && elapsed < Duration::from_secs(120);
    report(
        1,
        pass,
        format!(
            "{} gradients x {} seeds, worst rel err {:.2e} ({}), {:.1}s",
            worst.len(),
            FD_SEEDS,
            max,
            name,
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// 2. registration against explicit rotate and paste

#[test]
fn c02_register_is_rotate_and_paste() {
    let _g = serial();
    let mut r = rng(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let half = r.gen_range(1..4);
        let cfg = ProjectionConfig {
            u: r.gen_range(2 * half + 1..16),
            v: r.gen_range(2 * half + 1..16),
            u_prime: 2 * half + 1,
            v_prime: 2 * half + 1,
            r: 4,
            ..ProjectionConfig::default()
        };
        let n = r.gen_range(1..4);
        let g = Array::random_uniform(&[cfg.u_prime, cfg.v_prime, n], 1.0, &mut r);
        let (i, j, rho) = (r.gen_range(0..cfg.u), r.gen_range(0..cfg.v), r.gen_range(0..4));
        let mut belief = Array::zeros(&[cfg.u, cfg.v, 4]);
        belief.set(&[i, j, rho], 1.0);
        let mut tape = Tape::new();
        let gv = tape.constant(g.clone());
        let stack = tape.rotate_stack(gv, cfg.rotation_taps()).unwrap();
        let bv = tape.constant(belief);
        let reg = register(&mut tape, stack, bv).unwrap();
        let mut want = Array::zeros(&[cfg.u, cfg.v, n]);
        paste(&rotate_quarters(&g, rho), i, j, 1.0, &mut want);
        worst = worst.max(max_abs_diff(tape.value(reg), &want));
    }
    report(2, worst <= 1e-12, format!("100 one-hot cases, max abs diff {:.1e}", worst));
}

// ---------------------------------------------------------------------------
// 3. adjointness of dense correlation and weighted placement

#[test]
fn c03_correlate_place_adjoint() {
    let _g = serial();
    let mut r = rng(3);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (u, v, n) = (r.gen_range(5..12), r.gen_range(5..12), r.gen_range(1..5));
        let (tu, tv) = (2 * r.gen_range(0..3) + 1, 2 * r.gen_range(0..3) + 1);
        let m = Array::random_uniform(&[u, v, n], 1.0, &mut r);
        let g = Array::random_uniform(&[tu, tv, n], 1.0, &mut r);
        let w = Array::random_uniform(&[u, v], 1.0, &mut r);
        let mut tape = Tape::new();
        let (mv, gv) = (tape.constant(m.clone()), tape.constant(g.clone()));
        let scores = tape.correlate_dense(mv, gv).unwrap();
        let lhs = tape.value(scores).dot(&w);
        let stack = tape.reshape(gv, &[tu, tv, n, 1]).unwrap();
        let wv = tape.constant(w.reshape(&[u, v, 1]).unwrap());
        let placed = tape.place_weighted(stack, wv).unwrap();
        let rhs = m.dot(tape.value(placed));
        worst = worst.max((lhs - rhs).abs());
    }
    report(3, worst <= 1e-10, format!("100 cases, max |<C m, w> - <m, P w>| {:.1e}", worst));
}

// ---------------------------------------------------------------------------
// 4. cost targets against a per-source BFS oracle

#[test]
fn c04_cost_targets_match_bfs() {
    let _g = serial();
    let t = Instant::now();
    let mut checked = 0usize;
    let mut mismatches = 0usize;
    let mut out_of_set = 0usize;
    for seed in 0..5 {
        let scene = generate_scene(500 + seed, &SceneParams::square(12)).unwrap();
        let g = build_graph(&scene, 4).unwrap();
        for class in 0..scene.num_classes {
            let goals = g.goal_poses(class).unwrap_or_default();
            if goals.is_empty() {
                for p in g.poses() {
                    for a in Action::ALL {
                        mismatches += cost_targets(&g, p, a, class).is_ok() as usize;
                        checked += 1;
                    }
                }
                continue;
            }
            let dist = bfs_distances(&g, class);
            for p in g.poses() {
                let d = dist[&p];
                for a in Action::ALL {
                    checked += 1;
                    let got = cost_targets(&g, p, a, class);
                    if d == UNREACHABLE {
                        mismatches += got.is_ok() as usize;
                        continue;
                    }
                    let (q, collided) = g.step(p, a).unwrap();
                    let dq = dist[&q];
                    let want = if dq == 0 && !collided {
                        -2.0
                    } else if collided {
                        1.0
                    } else {
                        match dq.cmp(&d) {
                            std::cmp::Ordering::Less => -1.0,
                            std::cmp::Ordering::Equal => 0.0,
                            std::cmp::Ordering::Greater => 1.0,
                        }
                    };
                    match got {
                        Ok(c) => {
                            mismatches += (c != want) as usize;
                            out_of_set += (![-2.0, -1.0, 0.0, 1.0].contains(&c)) as usize;
                        }
                        Err(_) => mismatches += 1,
                    }
                }
            }
        }
    }
    let elapsed = t.elapsed();
    let pass = mismatches == 0 && out_of_set == 0 && elapsed < Duration::from_secs(60);
    report(
        4,
        pass,
        format!(
            "{} (pose, action, target) triples, {} mismatches, {} outside {{-2,-1,0,1}}, {:.1}s",
            checked,
            mismatches,
            out_of_set,
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// 5, 6, 9. mapper pretraining

struct MapperRun {
    variants: Vec<(String, MapperTraining)>,
    elapsed: Duration,
    csv: Vec<u8>,
}

fn mapper_variants() -> [Modalities; 2] {
    [Modalities::SSEG_DET, Modalities::RGB]
}

fn run_mappers() -> MapperRun {
    let cfg = TrainConfig::default();
    let t = Instant::now();
    let train = cfg.train_scenes.build(&cfg.scene, cfg.r_env).unwrap();
    let test = cfg.test_scenes.build(&cfg.scene, cfg.r_env).unwrap();
    let mut variants = Vec::new();
    let mut csv = Vec::new();
    for m in mapper_variants() {
        let proj = ProjectionConfig {
            modalities: m,
            ..cfg.projection.clone()
        };
        let data = localization_data(&cfg, &proj, &train, &test).unwrap();
        let out = pretrain_mapper(&cfg, &proj, &data, cfg.r_env, cfg.scene.cell_mm).unwrap();
        write_csv(&mut csv, &out.log).unwrap();
        let rows: Vec<SummaryRow> = out
            .reports
            .iter()
            .map(|r| SummaryRow::from_report(&SavedReport::Localization(r.clone())))
            .collect();
        export_summary(&mut csv, &rows).unwrap();
        variants.push((m.tag(), out));
    }
    MapperRun {
        variants,
        elapsed: t.elapsed(),
        csv,
    }
}

fn mapper_run() -> &'static MapperRun {
    static RUN: OnceLock<MapperRun> = OnceLock::new();
    RUN.get_or_init(run_mappers)
}

fn ape_for(run: &MapperRun, tag: &str, len: usize) -> (f64, f64) {
    let (_, out) = run.variants.iter().find(|(t, _)| t == tag).unwrap();
    let r = out.reports.iter().find(|r| r.episode_len == len).unwrap();
    (r.mean_ape(), r.mean_baseline_ape())
}

#[test]
fn c05_localization_beats_uniform_belief() {
    let _g = serial();
    let run = mapper_run();
    let cfg = TrainConfig::default();
    let mut pass = run.elapsed < Duration::from_secs(20 * 60);
    let mut parts = Vec::new();
    for (tag, _) in &run.variants {
        let (a5, b5) = ape_for(run, tag, 5);
        let (a20, b20) = ape_for(run, tag, 20);
        pass &= a5 < 0.5 * b5 && a20 < 0.5 * b20 && a5 < a20;
        parts.push(format!("{} APE-5 {:.1}/{:.1} APE-20 {:.1}/{:.1} mm", tag, a5, b5, a20, b20));
    }
    let episodes = cfg.mapper.episodes_per_length * cfg.mapper.lengths.len();
    report(
        5,
        pass,
        format!("{} train episodes; {}; {:.0}s", episodes, parts.join("; "), run.elapsed.as_secs_f64()),
    );
}

#[test]
fn c06_sseg_det_not_worse_than_rgb() {
    let _g = serial();
    let run = mapper_run();
    let mean = |tag: &str| (ape_for(run, tag, 5).0 + ape_for(run, tag, 20).0) / 2.0;
    let (sd, rgb) = (mean("SSeg-Det"), mean("RGB"));
    report(6, sd <= rgb, format!("held-out APE SSeg-Det {:.1} mm vs RGB {:.1} mm", sd, rgb));
}

// ---------------------------------------------------------------------------
// 7, 8, 9. DAgger policy

const NAV_EPISODES: usize = 200;
const NAV_SEED: u64 = 99;

struct PolicyRun {
    log: Vec<PolicyLogRow>,
    learned: NavigationReport,
    random: NavigationReport,
    expert: NavigationReport,
    elapsed: Duration,
    csv: Vec<u8>,
}

fn run_policy(mapper: &MapperParams) -> PolicyRun {
    let mut cfg = TrainConfig::default();
    cfg.projection = mapper.config.clone();
    let t = Instant::now();
    let train = cfg.train_scenes.build(&cfg.scene, cfg.r_env).unwrap();
    let test = cfg.test_scenes.build(&cfg.scene, cfg.r_env).unwrap();
    let pool = build_pool(&train, &cfg.scene.target_classes, &cfg.policy, cfg.seed).unwrap();
    let out = dagger_train_policy(&cfg, &train, &pool, mapper).unwrap();
    let (eps, skipped): (Vec<NavEpisode>, usize) = sample_nav_episodes(&test, &cfg.scene.target_classes, NAV_EPISODES, NAV_SEED, &cfg.eval);
    assert_eq!((eps.len(), skipped), (NAV_EPISODES, 0));
    let learned = evaluate_learned(&out.mapper, &out.policy, &test, &eps, &cfg.camera, &cfg.noise, &cfg.eval).unwrap();
    let elapsed = t.elapsed();
    let random = baseline_random_walk(&test, &eps, &cfg.camera, &cfg.noise, &cfg.eval).unwrap();
    let expert = expert_replay(&test, &eps, &cfg.camera, &cfg.noise, &cfg.eval).unwrap();
    let mut csv = Vec::new();
    write_csv(&mut csv, &out.log).unwrap();
    let rows: Vec<SummaryRow> = [&learned, &random, &expert]
        .iter()
        .map(|r| SummaryRow::from_report(&SavedReport::Navigation((*r).clone())))
        .collect();
    export_summary(&mut csv, &rows).unwrap();
    PolicyRun {
        log: out.log,
        learned,
        random,
        expert,
        elapsed,
        csv,
    }
}

fn sseg_det_mapper(run: &MapperRun) -> &MapperParams {
    &run.variants.iter().find(|(t, _)| t == "SSeg-Det").unwrap().1.params
}

fn policy_run() -> &'static PolicyRun {
    static RUN: OnceLock<PolicyRun> = OnceLock::new();
    RUN.get_or_init(|| run_policy(sseg_det_mapper(mapper_run())))
}

#[test]
fn c07_policy_beats_random_walk() {
    let _g = serial();
    let run = policy_run();
    let (s, sr) = (run.learned.success_rate(), run.random.success_rate());
    let (q, qr) = (run.learned.mean_path_ratio(), run.random.mean_path_ratio());
    let (se, qe) = (run.expert.success_rate(), run.expert.mean_path_ratio());
    let pass = run.learned.episodes() >= 200 && s >= sr + 20.0 && q < qr && se == 100.0 && qe == 1.0 && run.elapsed < Duration::from_secs(60 * 60);
    report(
        7,
        pass,
        format!(
            "{} episodes: learned {:.1}% ratio {:.2}, random walk {:.1}% ratio {:.2}, expert {:.1}% ratio {:.3}; {:.0}s",
            run.learned.episodes(),
            s,
            q,
            sr,
            qr,
            se,
            qe,
            run.elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn c08_dagger_source_frequencies() {
    let _g = serial();
    let run = policy_run();
    let cfg = TrainConfig::default().policy;
    let mut pass = !run.log.is_empty();
    let mut worst_z: f64 = 0.0;
    for window in run.log.chunks(100) {
        let expected: f64 = window.iter().map(|row| cfg.p0 * cfg.gamma.powi(row.iteration as i32)).sum();
        let var: f64 = window
            .iter()
            .map(|row| {
                let p = cfg.p0 * cfg.gamma.powi(row.iteration as i32);
                p * (1.0 - p)
            })
            .sum();
        let observed = window.iter().filter(|row| row.source == BatchSource::Pool).count() as f64;
        let z = (observed - expected).abs() / var.sqrt();
        worst_z = worst_z.max(z);
        pass &= z <= 3.0;
    }
    report(
        8,
        pass,
        format!(
            "{} iterations in {} windows, worst |z| {:.2}",
            run.log.len(),
            run.log.len().div_ceil(100),
            worst_z
        ),
    );
}

// ---------------------------------------------------------------------------
// 9. determinism

#[test]
fn c09_training_is_reproducible() {
    let _g = serial();
    let first_mapper = mapper_run();
    let first_policy = policy_run();
    let second_mapper = run_mappers();
    let second_policy = run_policy(sseg_det_mapper(&second_mapper));
    let same_mapper = first_mapper.csv == second_mapper.csv;
    let same_policy = first_policy.csv == second_policy.csv;
    report(
        9,
        same_mapper && same_policy,
        format!(
            "mapper metrics identical: {}, policy metrics identical: {} ({} + {} bytes)",
            same_mapper,
            same_policy,
            first_mapper.csv.len(),
            first_policy.csv.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// 10. controller sampling

#[test]
fn c10_select_action_matches_softmax() {
    let _g = serial();
    let mut r = rng(10);
    let draws = 100_000;
    let mut worst_z: f64 = 0.0;
    for _ in 0..10 {
        let costs: Vec<f64> = (0..NUM_ACTIONS).map(|_| r.gen_range(-2.0..2.0)).collect();
        let z: f64 = costs.iter().map(|c| (-c).exp()).sum();
        let probs: Vec<f64> = costs.iter().map(|c| (-c).exp() / z).collect();
        let mut counts = [0usize; NUM_ACTIONS];
        for _ in 0..draws {
            counts[select_action(&costs, &mut r, 1.0).index()] += 1;
        }
        for (k, &p) in probs.iter().enumerate() {
            let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
            worst_z = worst_z.max((counts[k] as f64 - draws as f64 * p).abs() / sigma);
        }
    }
    report(10, worst_z <= 3.0, format!("10 cost vectors x {} draws, worst |z| {:.2}", draws, worst_z));
}
