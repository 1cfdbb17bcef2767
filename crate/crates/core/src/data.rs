//! Scene sets and episode sampling shared by training and evaluation.

use rand::Rng;
use serde::{Deserialize, Serialize};
use worldsim::seed::{derive_seed, rng_for};
use worldsim::{build_graph, generate_scene, sample_episode, CameraConfig, EnvGraph, Episode, EpisodeKind, NoiseConfig, SceneParams};

use crate::error::{Error, Result};
use crate::mapper::{ground_truth_indices, Frame, ProjectionConfig};

/// A list of scene seeds with a size range; each seed picks its own square
/// size uniformly from `[min_size, max_size]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSet {
    pub seeds: Vec<u64>,
    pub min_size: usize,
    pub max_size: usize,
}

impl Default for SceneSet {
    fn default() -> Self {
        SceneSet {
            seeds: Vec::new(),
            min_size: 8,
            max_size: 12,
        }
    }
}

impl SceneSet {
    pub fn size_for(&self, seed: u64) -> usize {
        rng_for(seed, 0x517e).gen_range(self.min_size..=self.max_size)
    }

    pub fn build(&self, base: &SceneParams, r_env: usize) -> Result<Vec<EnvGraph>> {
        if self.min_size > self.max_size {
            return Err(Error::Config(format!("scene size range {}..={} is empty", self.min_size, self.max_size)));
        }
        self.seeds
            .iter()
            .map(|&seed| {
                let n = self.size_for(seed);
                let params = SceneParams {
                    width: n,
                    depth: n,
                    ..base.clone()
                };
                Ok(build_graph(&generate_scene(seed, &params)?, r_env)?)
            })
            .collect()
    }
}

/// Errors unless the two scene sets share no seed.
pub fn check_disjoint(train: &SceneSet, test: &SceneSet) -> Result<()> {
    if let Some(s) = train.seeds.iter().find(|s| test.seeds.contains(s)) {
        return Err(Error::Config(format!("scene seed {} appears in both the train and test splits", s)));
    }
    Ok(())
}

/// A random-walk episode with its mapper frames and ground-truth pose classes.
#[derive(Clone, Debug)]
pub struct LocEpisode {
    pub scene: usize,
    pub episode: Episode,
    pub frames: Vec<Frame>,
    pub targets: Vec<usize>,
}

/// Samples `count` random-walk episodes of `len` actions, cycling over the
/// scenes. Walks that leave the map extents are redrawn with the next seed.
pub fn random_walk_episodes(
    graphs: &[EnvGraph],
    count: usize,
    len: usize,
    seed: u64,
    cfg: &ProjectionConfig,
    camera: &CameraConfig,
    noise: &NoiseConfig,
) -> Result<Vec<LocEpisode>> {
    if graphs.is_empty() {
        return Err(Error::Config("no scenes".into()));
    }
    const MAX_REDRAWS: u64 = 1000;
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let scene = k % graphs.len();
        let g = &graphs[scene];
        let mut found = None;
        for attempt in 0..MAX_REDRAWS {
            let ep_seed = derive_seed(derive_seed(seed, k as u64), attempt);
            let ep = sample_episode(g, EpisodeKind::Random, 0, len, ep_seed)?;
            match ground_truth_indices(&ep.poses, g.r_env(), g.scene().cell_mm, cfg) {
                Ok(targets) => {
                    found = Some((ep, targets));
                    break;
                }
                Err(Error::OutOfMap { .. }) => continue,
                Err(e) => return Err(e),
            }
        }
        let (episode, targets) = found.ok_or_else(|| Error::Config("random walks keep leaving the map; increase u and v".into()))?;
        let frames = (0..episode.poses.len())
            .map(|t| Frame::from_observation(&episode.observation(g, t, camera, noise), cfg))
            .collect::<Result<Vec<_>>>()?;
        out.push(LocEpisode {
            scene,
            episode,
            frames,
            targets,
        });
    }
    Ok(out)
}
