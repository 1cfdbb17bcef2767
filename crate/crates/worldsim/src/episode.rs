use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Action, EnvGraph, Pose, UNREACHABLE};
use crate::render::{render_observation, CameraConfig, NoiseConfig, Observation};
use crate::seed::{derive_seed, rng_for};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpisodeKind {
    Expert,
    Random,
}

/// Poses visited and actions taken; `poses.len() == actions.len() + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub kind: EpisodeKind,
    pub target_class: usize,
    pub seed: u64,
    pub poses: Vec<Pose>,
    pub actions: Vec<Action>,
    /// Collision outcome of each action.
    pub collisions: Vec<bool>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Collision bit observed at step `t` (outcome of the action leading there).
    pub fn collision_bit(&self, t: usize) -> bool {
        t > 0 && self.collisions[t - 1]
    }

    /// Noise seed for the observation rendered at step `t`.
    pub fn noise_seed(&self, t: usize) -> u64 {
        derive_seed(self.seed, t as u64)
    }

    pub fn observation(&self, graph: &EnvGraph, t: usize, camera: &CameraConfig, noise: &NoiseConfig) -> Observation {
        let mut obs = render_observation(graph.scene(), self.poses[t], graph.r_env(), camera, noise, self.noise_seed(t));
        obs.collision = self.collision_bit(t);
        obs
    }
}

/// Samples an episode from a random start pose. Expert starts are drawn from
/// poses with a finite, nonzero distance to the target.
pub fn sample_episode(graph: &EnvGraph, kind: EpisodeKind, target_class: usize, max_len: usize, seed: u64) -> Result<Episode> {
    let mut rng = rng_for(seed, 0);
    let start = match kind {
        EpisodeKind::Random => graph.pose(rng.gen_range(0..graph.num_nodes())),
        EpisodeKind::Expert => {
            let dist = graph.shortest_path_distances(target_class)?;
            let candidates: Vec<usize> = (0..dist.len()).filter(|&n| dist[n] != 0 && dist[n] != UNREACHABLE).collect();
            let &n = candidates.choose(&mut rng).ok_or(Error::Unreachable {
                class: target_class,
                pose: "any".into(),
            })?;
            graph.pose(n)
        }
    };
    sample_episode_from(graph, kind, target_class, start, max_len, seed)
}

/// Expert episodes stop at the first goal pose or after `max_len` actions;
/// random episodes always take exactly `max_len` uniform actions.
pub fn sample_episode_from(graph: &EnvGraph, kind: EpisodeKind, target_class: usize, start: Pose, max_len: usize, seed: u64) -> Result<Episode> {
    let mut rng = rng_for(seed, 1);
    let mut ep = Episode {
        kind,
        target_class,
        seed,
        poses: vec![start],
        actions: Vec::new(),
        collisions: Vec::new(),
    };
    let mut pose = start;
    for _ in 0..max_len {
        let action = match kind {
            EpisodeKind::Random => Action::ALL[rng.gen_range(0..Action::ALL.len())],
            EpisodeKind::Expert => match graph.expert_action(pose, target_class)? {
                Some(a) => a,
                None => break,
            },
        };
        let (next, collided) = graph.step(pose, action)?;
        ep.actions.push(action);
        ep.collisions.push(collided);
        ep.poses.push(next);
        pose = next;
    }
    Ok(ep)
}

#[derive(Serialize)]
struct DumpRecord {
    t: usize,
    pose: Pose,
    action: Option<Action>,
    collision: bool,
    observation: String,
}

#[derive(Serialize)]
struct DumpHeader<'a> {
    kind: EpisodeKind,
    target_class: usize,
    seed: u64,
    r_env: usize,
    camera: &'a CameraConfig,
    noise: &'a NoiseConfig,
    steps: Vec<DumpRecord>,
}

/// Writes `episode.json` plus one observation file per step into `dir`.
pub fn dump_episode(dir: &Path, graph: &EnvGraph, episode: &Episode, camera: &CameraConfig, noise: &NoiseConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut steps = Vec::with_capacity(episode.poses.len());
    for (t, &pose) in episode.poses.iter().enumerate() {
        let name = format!("obs_{:04}.json", t);
        let obs = episode.observation(graph, t, camera, noise);
        std::fs::write(dir.join(&name), serde_json::to_string(&obs)?)?;
        steps.push(DumpRecord {
            t,
            pose,
            action: episode.actions.get(t).copied(),
            collision: episode.collision_bit(t),
            observation: name,
        });
    }
    let header = DumpHeader {
        kind: episode.kind,
        target_class: episode.target_class,
        seed: episode.seed,
        r_env: graph.r_env(),
        camera,
        noise,
        steps,
    };
    std::fs::write(dir.join("episode.json"), serde_json::to_string_pretty(&header)?)?;
    Ok(())
}
