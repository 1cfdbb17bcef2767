use std::path::Path;

use serde::{Deserialize, Serialize};
use worldsim::{CameraConfig, NoiseConfig, SceneParams};

use crate::data::{check_disjoint, SceneSet};
use crate::error::{Error, Result};
use crate::mapper::ProjectionConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapperTrainConfig {
    /// Training episodes per listed length.
    pub episodes_per_length: usize,
    pub heldout_per_length: usize,
    pub lengths: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for MapperTrainConfig {
    fn default() -> Self {
        MapperTrainConfig {
            episodes_per_length: 250,
            heldout_per_length: 50,
            lengths: vec![5, 20],
            epochs: 4,
            batch_size: 4,
            lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyTrainConfig {
    pub pool_episodes: usize,
    /// Share of expert episodes in the initial pool; the rest are random walks.
    pub expert_fraction: f64,
    pub iterations: usize,
    /// Episodes per minibatch.
    pub batch_size: usize,
    pub lr: f64,
    pub p0: f64,
    pub gamma: f64,
    /// Length cap of pool and on-policy training episodes.
    pub episode_len: usize,
    pub freeze_mapper: bool,
    pub use_ego: bool,
    pub hidden: usize,
    pub dropout: f64,
}

impl Default for PolicyTrainConfig {
    fn default() -> Self {
        PolicyTrainConfig {
            pool_episodes: 2000,
            expert_fraction: 0.8,
            iterations: 300,
            batch_size: 8,
            lr: 1e-3,
            p0: 0.9,
            gamma: 0.99,
            episode_len: 40,
            freeze_mapper: false,
            use_ego: true,
            hidden: 128,
            dropout: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub max_steps: usize,
    /// Success once the shortest-path distance to a goal pose is at most this.
    pub success_distance: u32,
    /// Start poses are at least this far (in actions) from every goal pose.
    pub min_start_distance: u32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 200,
            max_steps: 100,
            success_distance: 5,
            min_start_distance: 11,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub r_env: usize,
    pub train_scenes: SceneSet,
    pub test_scenes: SceneSet,
    pub scene: SceneParams,
    pub camera: CameraConfig,
    pub noise: NoiseConfig,
    pub projection: ProjectionConfig,
    pub mapper: MapperTrainConfig,
    pub policy: PolicyTrainConfig,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 7,
            r_env: 4,
            train_scenes: SceneSet {
                seeds: (1..=8).collect(),
                min_size: 8,
                max_size: 12,
            },
            test_scenes: SceneSet {
                seeds: (101..=103).collect(),
                min_size: 8,
                max_size: 12,
            },
            scene: SceneParams::default(),
            camera: CameraConfig {
                width_px: 64,
                height_px: 48,
                hfov_deg: 120.0,
                height_mm: 400.0,
                ..CameraConfig::default()
            },
            noise: NoiseConfig::default(),
            projection: ProjectionConfig::default(),
            mapper: MapperTrainConfig::default(),
            policy: PolicyTrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_disjoint(&self.train_scenes, &self.test_scenes)?;
        self.projection.validate()?;
        if self.projection.r != self.r_env {
            return Err(Error::Config(format!(
                "map orientation bins r = {} differ from r_env = {}",
                self.projection.r, self.r_env
            )));
        }
        let c = self.scene.num_classes;
        if self.projection.c_d != c || self.projection.c_s != worldsim::num_seg_labels(c) {
            return Err(Error::Config(format!(
                "c_d = {} and c_s = {} must equal {} and {} for {} object classes",
                self.projection.c_d,
                self.projection.c_s,
                c,
                worldsim::num_seg_labels(c),
                c
            )));
        }
        let p = &self.policy;
        if !(p.p0 > 0.0 && p.p0 <= 1.0 && p.gamma > 0.0 && p.gamma <= 1.0) {
            return Err(Error::Config("need p0 and gamma in (0, 1]".into()));
        }
        if p.batch_size == 0 || self.mapper.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<TrainConfig> {
        let cfg: TrainConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
