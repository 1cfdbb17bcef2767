//! Navigation episodes: sampling, controllers and rollouts.

use ndgrad::{Array, Tape};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use worldsim::seed::{derive_seed, rng_for};
use worldsim::{render_observation, Action, CameraConfig, EnvGraph, NoiseConfig, Observation, Pose, UNREACHABLE};

use crate::config::EvalConfig;
use crate::error::{Error, Result};
use crate::mapper::{mapper_step, Frame, MapState, MapperParams};
use crate::navpolicy::{ego_stack, select_action, CoreState, Mode, PolicyInputs, PolicyParams};

/// One evaluation episode: scene index, target class and start pose.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NavEpisode {
    pub scene: usize,
    pub target: usize,
    pub start: Pose,
    pub start_distance: u32,
    pub seed: u64,
}

/// Draws `count` episodes cycling over scenes. Each picks a target class
/// present in its scene and a start at least `min_start_distance` actions
/// from every goal pose. Returns the episodes and the number of draws
/// skipped because no such start exists.
pub fn sample_nav_episodes(graphs: &[EnvGraph], targets: &[usize], count: usize, seed: u64, eval: &EvalConfig) -> (Vec<NavEpisode>, usize) {
    let mut out = Vec::with_capacity(count);
    let mut skipped = 0;
    let mut k = 0u64;
    while out.len() < count && skipped < 10 * count.max(1) {
        let scene = (k % graphs.len() as u64) as usize;
        let g = &graphs[scene];
        let ep_seed = derive_seed(seed, k);
        let mut rng = rng_for(ep_seed, 0);
        k += 1;
        let mut options: Vec<(usize, Vec<usize>)> = Vec::new();
        for &c in targets {
            if let Ok(dist) = g.shortest_path_distances(c) {
                let starts: Vec<usize> = (0..dist.len())
                    .filter(|&n| dist[n] != UNREACHABLE && dist[n] >= eval.min_start_distance)
                    .collect();
                if !starts.is_empty() {
                    options.push((c, starts));
                }
            }
        }
        let Some((target, starts)) = options.choose(&mut rng) else {
            skipped += 1;
            continue;
        };
        let node = *starts.choose(&mut rng).expect("nonempty");
        let start = g.pose(node);
        out.push(NavEpisode {
            scene,
            target: *target,
            start,
            start_distance: g.distance(start, *target).expect("valid pose"),
            seed: ep_seed,
        });
    }
    (out, skipped)
}

/// Everything a controller may look at when choosing an action.
pub struct StepView<'a> {
    pub graph: &'a EnvGraph,
    pub pose: Pose,
    pub target: usize,
    /// Present when the controller asked for observations.
    pub observation: Option<&'a Observation>,
}

pub trait Controller {
    fn reset(&mut self);
    fn act(&mut self, view: &StepView, rng: &mut ChaCha8Rng) -> Result<Action>;
    /// Whether `act` reads the rendered observation.
    fn needs_observation(&self) -> bool {
        true
    }
}

pub struct RandomWalk;

impl Controller for RandomWalk {
    fn reset(&mut self) {}

    fn act(&mut self, _view: &StepView, rng: &mut ChaCha8Rng) -> Result<Action> {
        Ok(Action::ALL[rng.gen_range(0..Action::ALL.len())])
    }

    fn needs_observation(&self) -> bool {
        false
    }
}

/// Follows shortest paths on the true graph.
pub struct Expert;

impl Controller for Expert {
    fn reset(&mut self) {}

    fn act(&mut self, view: &StepView, _rng: &mut ChaCha8Rng) -> Result<Action> {
        Ok(view.graph.expert_action(view.pose, view.target)?.unwrap_or(Action::RotateLeft))
    }

    fn needs_observation(&self) -> bool {
        false
    }
}

/// Random actions until the target class shows up in the detection masks,
/// then shortest-path actions on the true graph.
#[derive(Default)]
pub struct DetectThenPlan {
    detected: bool,
}

impl Controller for DetectThenPlan {
    fn reset(&mut self) {
        self.detected = false;
    }

    fn act(&mut self, view: &StepView, rng: &mut ChaCha8Rng) -> Result<Action> {
        let obs = view.observation.ok_or_else(|| Error::Config("controller needs observations".into()))?;
        let cd = obs.num_det_classes;
        if !self.detected && view.target < cd {
            self.detected = obs.detections.chunks(cd).any(|px| px[view.target] != 0);
        }
        if self.detected {
            Expert.act(view, rng)
        } else {
            RandomWalk.act(view, rng)
        }
    }
}

/// Learned mapper plus policy, stepping with a fresh tape per action.
pub struct LearnedAgent<'a> {
    pub mapper: &'a MapperParams,
    pub policy: &'a PolicyParams,
    map: Option<(Array, Array, usize)>,
    core: Option<(Array, Array)>,
}

impl<'a> LearnedAgent<'a> {
    pub fn new(mapper: &'a MapperParams, policy: &'a PolicyParams) -> Self {
        LearnedAgent {
            mapper,
            policy,
            map: None,
            core: None,
        }
    }

    /// Predicted action costs at the current step.
    pub fn costs(&mut self, view: &StepView) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mcfg = &self.mapper.config;
        let mvars = self.mapper.bind(&mut tape, false);
        let pvars = self.policy.bind(&mut tape, false);
        let state = match &self.map {
            Some((h, c, t)) => MapState {
                h: tape.constant(h.clone()),
                c: tape.constant(c.clone()),
                t: *t,
            },
            None => MapState::zeros(&mut tape, mcfg),
        };
        let core = match &self.core {
            Some((h, c)) => CoreState {
                h: tape.constant(h.clone()),
                c: tape.constant(c.clone()),
            },
            None => CoreState::zeros(&mut tape, self.policy.config.hidden),
        };
        let obs = view.observation.ok_or_else(|| Error::Config("controller needs observations".into()))?;
        let frame = Frame::from_observation(obs, mcfg)?;
        let out = mapper_step(&mut tape, &mvars, state, &frame)?;
        let map = out.state.features(&mut tape, mcfg)?;
        let ego = ego_stack(obs);
        let inputs = PolicyInputs {
            map,
            belief: out.belief,
            ego: &ego,
            target: view.target,
            collision: obs.collision,
        };
        let pout = pvars.forward(&mut tape, &inputs, core, &mut Mode::<ChaCha8Rng>::Eval)?;
        self.map = Some((tape.value(out.state.h).clone(), tape.value(out.state.c).clone(), out.state.t));
        self.core = Some((tape.value(pout.state.h).clone(), tape.value(pout.state.c).clone()));
        Ok(tape.value(pout.costs).data().to_vec())
    }
}

impl Controller for LearnedAgent<'_> {
    fn reset(&mut self) {
        self.map = None;
        self.core = None;
    }

    fn act(&mut self, view: &StepView, rng: &mut ChaCha8Rng) -> Result<Action> {
        let costs = self.costs(view)?;
        Ok(select_action(&costs, rng, self.policy.config.temperature))
    }
}

/// Outcome of one navigation episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub scene: usize,
    pub target: usize,
    pub start_distance: u32,
    /// Actions taken before success or the step cap.
    pub steps: usize,
    pub success: bool,
    /// Fewest actions that reach the success region from the start.
    pub shortest: u32,
    pub trajectory: Vec<Pose>,
}

impl EpisodeRecord {
    /// Steps over the shortest path; 1 when the episode starts in the success region.
    pub fn path_ratio(&self) -> f64 {
        if self.shortest == 0 {
            1.0
        } else {
            self.steps as f64 / self.shortest as f64
        }
    }
}

/// Runs one episode until the agent is within the success distance of a goal
/// pose or the step cap is hit.
pub fn run_episode(
    graph: &EnvGraph,
    ep: &NavEpisode,
    controller: &mut dyn Controller,
    camera: &CameraConfig,
    noise: &NoiseConfig,
    eval: &EvalConfig,
) -> Result<EpisodeRecord> {
    controller.reset();
    let mut rng = rng_for(ep.seed, 1);
    let mut pose = ep.start;
    let mut collision = false;
    let mut trajectory = vec![pose];
    let d0 = graph.distance(pose, ep.target)?;
    if d0 == UNREACHABLE {
        return Err(worldsim::Error::Unreachable {
            class: ep.target,
            pose: pose.to_string(),
        }
        .into());
    }
    let shortest = d0.saturating_sub(eval.success_distance);
    let mut success = d0 <= eval.success_distance;
    let mut steps = 0;
    while !success && steps < eval.max_steps {
        let observation = controller.needs_observation().then(|| {
            let mut o = render_observation(graph.scene(), pose, graph.r_env(), camera, noise, derive_seed(ep.seed, steps as u64));
            o.collision = collision;
            o
        });
        let view = StepView {
            graph,
            pose,
            target: ep.target,
            observation: observation.as_ref(),
        };
        let action = controller.act(&view, &mut rng)?;
        let (next, collided) = graph.step(pose, action)?;
        pose = next;
        collision = collided;
        steps += 1;
        trajectory.push(pose);
        success = graph.distance(pose, ep.target)? <= eval.success_distance;
    }
    Ok(EpisodeRecord {
        scene: ep.scene,
        target: ep.target,
        start_distance: d0,
        steps,
        success,
        shortest,
        trajectory,
    })
}

pub fn run_episodes(
    graphs: &[EnvGraph],
    episodes: &[NavEpisode],
    controller: &mut dyn Controller,
    camera: &CameraConfig,
    noise: &NoiseConfig,
    eval: &EvalConfig,
) -> Result<Vec<EpisodeRecord>> {
    episodes
        .iter()
        .map(|ep| {
            let g = graphs
                .get(ep.scene)
                .ok_or_else(|| Error::Config(format!("episode refers to missing scene {}", ep.scene)))?;
            run_episode(g, ep, controller, camera, noise, eval)
        })
        .collect()
}
