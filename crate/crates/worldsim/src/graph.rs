use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Cell, Scene};

/// Goal poses lie within this Euclidean distance (in cells) of a target instance.
pub const GOAL_RADIUS_CELLS: f64 = 2.0;

/// Distance-table value for poses from which the target cannot be reached.
pub const UNREACHABLE: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    MoveForward,
    RotateLeft,
    RotateRight,
}

impl Action {
    /// Fixed action order; also the tie-breaking order of the expert.
    pub const ALL: [Action; 3] = [Action::MoveForward, Action::RotateLeft, Action::RotateRight];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pose {
    pub x: usize,
    pub z: usize,
    pub orientation: usize,
}

impl Pose {
    pub fn new(x: usize, z: usize, orientation: usize) -> Pose {
        Pose { x, z, orientation }
    }
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, o{})", self.x, self.z, self.orientation)
    }
}

/// Heading in degrees for an orientation index; 0 faces +x and angles grow
/// counter-clockwise (towards +z), so `RotateLeft` increments the index.
pub fn heading_deg(orientation: usize, r_env: usize) -> f64 {
    orientation as f64 * 360.0 / r_env as f64
}

/// Unit cell step taken by `MoveForward`: each heading component rounds to
/// -1, 0 or 1, with exact halves moving (so 30 degrees steps diagonally).
/// Opposite headings always give opposite steps.
pub fn forward_step(orientation: usize, r_env: usize) -> (i64, i64) {
    let a = heading_deg(orientation, r_env).to_radians();
    let snap = |v: f64| if v.abs() < 0.5 - 1e-9 { 0 } else { v.signum() as i64 };
    (snap(a.cos()), snap(a.sin()))
}

/// Discrete pose graph of a scene with per-class shortest-path tables.
#[derive(Clone, Debug)]
pub struct EnvGraph {
    scene: Scene,
    r_env: usize,
    cell_slot: Vec<Option<usize>>,
    cells: Vec<(usize, usize)>,
    /// Successor per node and action; `None` marks a collision.
    edges: Vec<[Option<usize>; 3]>,
    goals: BTreeMap<usize, Vec<usize>>,
    distances: BTreeMap<usize, Vec<u32>>,
}

pub fn build_graph(scene: &Scene, r_env: usize) -> Result<EnvGraph> {
    if r_env == 0 || 360 % r_env != 0 {
        return Err(Error::InvalidParams(format!("r_env = {} does not divide 360", r_env)));
    }
    scene.validate()?;
    let cells = scene.free_cells();
    let mut cell_slot = vec![None; scene.width * scene.depth];
    for (i, &(x, z)) in cells.iter().enumerate() {
        cell_slot[z * scene.width + x] = Some(i);
    }
    let mut edges = Vec::with_capacity(cells.len() * r_env);
    for &(x, z) in &cells {
        for o in 0..r_env {
            let (dx, dz) = forward_step(o, r_env);
            let (nx, nz) = (x as i64 + dx, z as i64 + dz);
            // Diagonal moves may not cut across a blocked corner.
            let corner_clear =
                dx == 0 || dz == 0 || (scene.cell_at(x as i64 + dx, z as i64) == Cell::Free && scene.cell_at(x as i64, z as i64 + dz) == Cell::Free);
            let fwd = if corner_clear && scene.cell_at(nx, nz) == Cell::Free {
                cell_slot[nz as usize * scene.width + nx as usize].map(|s| s * r_env + o)
            } else {
                None
            };
            let slot = cell_slot[z * scene.width + x].expect("free cell");
            let left = slot * r_env + (o + 1) % r_env;
            let right = slot * r_env + (o + r_env - 1) % r_env;
            edges.push([fwd, Some(left), Some(right)]);
        }
    }
    let mut graph = EnvGraph {
        scene: scene.clone(),
        r_env,
        cell_slot,
        cells,
        edges,
        goals: BTreeMap::new(),
        distances: BTreeMap::new(),
    };
    for class in scene.classes_present() {
        let goals = graph.compute_goal_nodes(class);
        let dist = graph.multi_source_bfs(&goals);
        graph.goals.insert(class, goals);
        graph.distances.insert(class, dist);
    }
    Ok(graph)
}

impl EnvGraph {
    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn r_env(&self) -> usize {
        self.r_env
    }

    pub fn num_nodes(&self) -> usize {
        self.edges.len()
    }

    pub fn node(&self, pose: Pose) -> Option<usize> {
        if pose.orientation >= self.r_env || pose.x >= self.scene.width || pose.z >= self.scene.depth {
            return None;
        }
        self.cell_slot[pose.z * self.scene.width + pose.x].map(|s| s * self.r_env + pose.orientation)
    }

    pub fn pose(&self, node: usize) -> Pose {
        let (x, z) = self.cells[node / self.r_env];
        Pose::new(x, z, node % self.r_env)
    }

    pub fn contains(&self, pose: Pose) -> bool {
        self.node(pose).is_some()
    }

    pub fn poses(&self) -> impl Iterator<Item = Pose> + '_ {
        (0..self.num_nodes()).map(|n| self.pose(n))
    }

    fn require(&self, pose: Pose) -> Result<usize> {
        self.node(pose).ok_or_else(|| Error::InvalidPose(pose.to_string()))
    }

    /// Successor node of `(node, action)`, or `None` on collision.
    pub fn edge(&self, node: usize, action: Action) -> Option<usize> {
        self.edges[node][action.index()]
    }

    /// Deterministic transition; a collision leaves the pose unchanged and sets the bit.
    pub fn step(&self, pose: Pose, action: Action) -> Result<(Pose, bool)> {
        let n = self.require(pose)?;
        Ok(match self.edge(n, action) {
            Some(next) => (self.pose(next), false),
            None => (pose, true),
        })
    }

    fn compute_goal_nodes(&self, class: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for (slot, &(x, z)) in self.cells.iter().enumerate() {
            for o in 0..self.r_env {
                if self.is_goal(x, z, o, class) {
                    out.push(slot * self.r_env + o);
                }
            }
        }
        out
    }

    /// A pose is a goal for `class` when some footprint cell of an instance lies
    /// within the goal radius, in the viewing direction (within half an
    /// orientation step) and with a clear line of sight.
    fn is_goal(&self, x: usize, z: usize, o: usize, class: usize) -> bool {
        let heading = heading_deg(o, self.r_env);
        let half_step = 180.0 / self.r_env as f64 + 1e-9;
        self.scene.objects.iter().filter(|obj| obj.class == class).any(|obj| {
            obj.cells.iter().any(|&(ox, oz)| {
                let (dx, dz) = (ox as f64 - x as f64, oz as f64 - z as f64);
                let dist = dx.hypot(dz);
                if dist > GOAL_RADIUS_CELLS + 1e-9 {
                    return false;
                }
                let angle = dz.atan2(dx).to_degrees();
                let diff = (angle - heading + 540.0).rem_euclid(360.0) - 180.0;
                diff.abs() <= half_step && self.line_of_sight((x, z), (ox, oz), obj.id)
            })
        })
    }

    fn line_of_sight(&self, from: (usize, usize), to: (usize, usize), id: u32) -> bool {
        const SAMPLES: usize = 32;
        let (fx, fz) = (from.0 as f64 + 0.5, from.1 as f64 + 0.5);
        let (tx, tz) = (to.0 as f64 + 0.5, to.1 as f64 + 0.5);
        (1..SAMPLES).all(|k| {
            let t = k as f64 / SAMPLES as f64;
            let cx = (fx + t * (tx - fx)).floor() as i64;
            let cz = (fz + t * (tz - fz)).floor() as i64;
            match self.scene.cell_at(cx, cz) {
                Cell::Free => true,
                Cell::Object(o) => o == id,
                Cell::Wall => false,
            }
        })
    }

    /// BFS over reversed edges from every goal node.
    fn multi_source_bfs(&self, goals: &[usize]) -> Vec<u32> {
        let n = self.num_nodes();
        let mut reverse: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (s, succ) in self.edges.iter().enumerate() {
            for t in succ.iter().flatten() {
                reverse[*t].push(s);
            }
        }
        let mut dist = vec![UNREACHABLE; n];
        let mut queue = VecDeque::new();
        for &g in goals {
            dist[g] = 0;
            queue.push_back(g);
        }
        while let Some(t) = queue.pop_front() {
            for &s in &reverse[t] {
                if dist[s] == UNREACHABLE {
                    dist[s] = dist[t] + 1;
                    queue.push_back(s);
                }
            }
        }
        dist
    }

    pub fn goal_poses(&self, class: usize) -> Result<Vec<Pose>> {
        let goals = self.goals.get(&class).ok_or(Error::ClassAbsent(class))?;
        Ok(goals.iter().map(|&n| self.pose(n)).collect())
    }

    pub fn is_goal_pose(&self, pose: Pose, class: usize) -> Result<bool> {
        Ok(self.distance(pose, class)? == 0)
    }

    /// Distance table indexed by node; `UNREACHABLE` marks unreachable poses.
    pub fn shortest_path_distances(&self, class: usize) -> Result<&[u32]> {
        self.distances.get(&class).map(Vec::as_slice).ok_or(Error::ClassAbsent(class))
    }

    pub fn distance(&self, pose: Pose, class: usize) -> Result<u32> {
        let n = self.require(pose)?;
        Ok(self.shortest_path_distances(class)?[n])
    }

    /// First action (in `Action::ALL` order) that decreases the distance.
    pub fn expert_action(&self, pose: Pose, class: usize) -> Result<Option<Action>> {
        let n = self.require(pose)?;
        let dist = self.shortest_path_distances(class)?;
        let d = dist[n];
        if d == UNREACHABLE {
            return Err(Error::Unreachable { class, pose: pose.to_string() });
        }
        if d == 0 {
            return Ok(None);
        }
        Ok(Action::ALL.into_iter().find(|&a| self.edge(n, a).is_some_and(|m| dist[m] + 1 == d)))
    }
}
