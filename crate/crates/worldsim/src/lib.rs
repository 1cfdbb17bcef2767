//! Procedural indoor worlds for navigation experiments.
//!
//! Scenes are occupancy grids with walls and object instances. A scene and an
//! orientation count define a discrete pose graph whose edges are the three
//! agent actions; the graph carries shortest-path tables to every object
//! class. Observations are rendered by casting one ray per image column.

mod episode;
mod error;
mod graph;
mod render;
mod scene;
pub mod seed;

pub use episode::{dump_episode, sample_episode, sample_episode_from, Episode, EpisodeKind};
pub use error::{Error, Result};
pub use graph::{build_graph, forward_step, heading_deg, Action, EnvGraph, Pose, GOAL_RADIUS_CELLS, UNREACHABLE};
pub use render::{
    num_seg_labels, pose_position_mm, render_at, render_observation, CameraConfig, Intrinsics, NoiseConfig, Observation, LABEL_FLOOR, LABEL_OBJECT_BASE,
    LABEL_VOID, LABEL_WALL,
};
pub use scene::{generate_scene, Cell, ObjectInstance, Scene, SceneParams, SCENE_FORMAT, SCENE_VERSION};
