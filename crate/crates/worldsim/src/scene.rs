use std::collections::VecDeque;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;

pub const SCENE_FORMAT: &str = "worldsim-scene";
pub const SCENE_VERSION: u32 = 1;

const MAX_ATTEMPTS: usize = 64;
const MIN_ROOM: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Cell {
    Free,
    Wall,
    /// Index into `Scene::objects`.
    Object(u32),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub id: u32,
    pub class: usize,
    pub cells: Vec<(usize, usize)>,
    pub height_mm: f64,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    pub width: usize,
    pub depth: usize,
    /// Fraction of interior free cells turned into object footprints.
    pub object_density: f64,
    pub num_classes: usize,
    pub target_classes: Vec<usize>,
    /// Interior partition walls; `None` picks a count from the scene size
    /// (and none at all when the density is zero).
    pub partitions: Option<usize>,
    pub cell_mm: f64,
    pub wall_height_mm: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            width: 16,
            depth: 16,
            object_density: 0.08,
            num_classes: 8,
            target_classes: (0..5).collect(),
            partitions: None,
            cell_mm: 300.0,
            wall_height_mm: 2500.0,
        }
    }
}

impl SceneParams {
    pub fn square(size: usize) -> Self {
        SceneParams {
            width: size,
            depth: size,
            ..SceneParams::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if self.width < 8 || self.depth < 8 {
            return bad(format!("scene must be at least 8x8 cells, got {}x{}", self.width, self.depth));
        }
        if !(0.0..0.5).contains(&self.object_density) {
            return bad(format!("object density {} outside [0, 0.5)", self.object_density));
        }
        if self.num_classes == 0 {
            return bad("need at least one object class".into());
        }
        if let Some(&c) = self.target_classes.iter().find(|&&c| c >= self.num_classes) {
            return bad(format!("target class {} >= number of classes {}", c, self.num_classes));
        }
        if self.cell_mm <= 0.0 || self.wall_height_mm <= 0.0 {
            return bad("cell size and wall height must be positive".into());
        }
        Ok(())
    }
}

/// A floor plan with walls and object instances, addressed by cell `(x, z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub width: usize,
    pub depth: usize,
    pub cell_mm: f64,
    pub wall_height_mm: f64,
    pub num_classes: usize,
    pub target_classes: Vec<usize>,
    grid: Vec<Cell>,
    pub objects: Vec<ObjectInstance>,
}

/// Nominal object heights in mm, cycled by class id.
const CLASS_HEIGHTS: [f64; 8] = [450.0, 800.0, 1100.0, 600.0, 1500.0, 350.0, 950.0, 700.0];

fn class_color(class: usize, num_classes: usize) -> [f64; 3] {
    let hue = class as f64 / num_classes as f64;
    let f = |shift: f64| {
        let t = (hue + shift).fract();
        let v = (t * 6.0 - 3.0).abs() - 1.0;
        0.15 + 0.7 * v.clamp(0.0, 1.0)
    };
    [f(0.0), f(2.0 / 3.0), f(1.0 / 3.0)]
}

impl Scene {
    fn empty(params: &SceneParams, seed: u64) -> Scene {
        let (w, d) = (params.width, params.depth);
        let mut grid = vec![Cell::Free; w * d];
        for z in 0..d {
            for x in 0..w {
                if x == 0 || z == 0 || x == w - 1 || z == d - 1 {
                    grid[z * w + x] = Cell::Wall;
                }
            }
        }
        Scene {
            seed,
            width: w,
            depth: d,
            cell_mm: params.cell_mm,
            wall_height_mm: params.wall_height_mm,
            num_classes: params.num_classes,
            target_classes: params.target_classes.clone(),
            grid,
            objects: Vec::new(),
        }
    }

    pub fn in_bounds(&self, x: i64, z: i64) -> bool {
        x >= 0 && z >= 0 && (x as usize) < self.width && (z as usize) < self.depth
    }

    pub fn cell(&self, x: usize, z: usize) -> Cell {
        self.grid[z * self.width + x]
    }

    /// Out-of-bounds cells count as walls.
    pub fn cell_at(&self, x: i64, z: i64) -> Cell {
        if self.in_bounds(x, z) {
            self.cell(x as usize, z as usize)
        } else {
            Cell::Wall
        }
    }

    pub fn is_free(&self, x: usize, z: usize) -> bool {
        x < self.width && z < self.depth && self.cell(x, z) == Cell::Free
    }

    pub fn free_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for z in 0..self.depth {
            for x in 0..self.width {
                if self.cell(x, z) == Cell::Free {
                    out.push((x, z));
                }
            }
        }
        out
    }

    pub fn classes_present(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.objects.iter().map(|o| o.class).collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    fn set(&mut self, x: usize, z: usize, c: Cell) {
        self.grid[z * self.width + x] = c;
    }

    fn neighbors4(&self, x: usize, z: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        const D: [(i64, i64); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];
        D.iter().filter_map(move |&(dx, dz)| {
            let (nx, nz) = (x as i64 + dx, z as i64 + dz);
            self.in_bounds(nx, nz).then_some((nx as usize, nz as usize))
        })
    }

    /// True when the free cells form one 4-connected component.
    pub fn free_space_connected(&self) -> bool {
        let free = self.free_cells();
        let Some(&start) = free.first() else {
            return false;
        };
        let mut seen = vec![false; self.grid.len()];
        let mut queue = VecDeque::from([start]);
        seen[start.1 * self.width + start.0] = true;
        let mut count = 1;
        while let Some((x, z)) = queue.pop_front() {
            for (nx, nz) in self.neighbors4(x, z) {
                let i = nz * self.width + nx;
                if !seen[i] && self.grid[i] == Cell::Free {
                    seen[i] = true;
                    count += 1;
                    queue.push_back((nx, nz));
                }
            }
        }
        count == free.len()
    }

    /// Checks the structural invariants a generated or loaded scene must satisfy.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Format(m));
        if self.grid.len() != self.width * self.depth {
            return fail("grid size does not match extents".into());
        }
        if !self.free_space_connected() {
            return fail("free space is not connected".into());
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.id as usize != i {
                return fail(format!("object {} has id {}", i, o.id));
            }
            if o.class >= self.num_classes {
                return fail(format!("object {} has class {} >= {}", i, o.class, self.num_classes));
            }
            if o.cells.is_empty() {
                return fail(format!("object {} has no footprint", i));
            }
            let mut touches_free = false;
            for &(x, z) in &o.cells {
                if x >= self.width || z >= self.depth || self.cell(x, z) != Cell::Object(o.id) {
                    return fail(format!("object {} footprint disagrees with the grid at ({}, {})", i, x, z));
                }
                touches_free |= self.neighbors4(x, z).any(|(nx, nz)| self.cell(nx, nz) == Cell::Free);
            }
            if !touches_free {
                return fail(format!("object {} is not adjacent to free space", i));
            }
        }
        let present = self.classes_present();
        for c in &self.target_classes {
            if !present.contains(c) {
                return fail(format!("target class {} has no instance", c));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&SceneFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Scene> {
        let file: SceneFile = serde_json::from_str(text)?;
        file.into_scene()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Scene> {
        Scene::from_json(&std::fs::read_to_string(path)?)
    }
}

/// On-disk representation: rows of `#` (wall), `.` (free) and `o` (object).
#[derive(Serialize, Deserialize)]
struct SceneFile {
    format: String,
    version: u32,
    seed: u64,
    width: usize,
    depth: usize,
    cell_mm: f64,
    wall_height_mm: f64,
    num_classes: usize,
    target_classes: Vec<usize>,
    rows: Vec<String>,
    objects: Vec<ObjectInstance>,
}

impl From<&Scene> for SceneFile {
    fn from(s: &Scene) -> Self {
        let rows = (0..s.depth)
            .map(|z| {
                (0..s.width)
                    .map(|x| match s.cell(x, z) {
                        Cell::Free => '.',
                        Cell::Wall => '#',
                        Cell::Object(_) => 'o',
                    })
                    .collect()
            })
            .collect();
        SceneFile {
            format: SCENE_FORMAT.into(),
            version: SCENE_VERSION,
            seed: s.seed,
            width: s.width,
            depth: s.depth,
            cell_mm: s.cell_mm,
            wall_height_mm: s.wall_height_mm,
            num_classes: s.num_classes,
            target_classes: s.target_classes.clone(),
            rows,
            objects: s.objects.clone(),
        }
    }
}

impl SceneFile {
    fn into_scene(self) -> Result<Scene> {
        if self.format != SCENE_FORMAT {
            return Err(Error::Format(format!("unexpected format tag `{}`", self.format)));
        }
        if self.version != SCENE_VERSION {
            return Err(Error::Format(format!("unsupported scene version {}", self.version)));
        }
        if self.rows.len() != self.depth {
            return Err(Error::Format(format!("expected {} rows, found {}", self.depth, self.rows.len())));
        }
        let mut grid = Vec::with_capacity(self.width * self.depth);
        for (z, row) in self.rows.iter().enumerate() {
            if row.chars().count() != self.width {
                return Err(Error::Format(format!("row {} has wrong length", z)));
            }
            for ch in row.chars() {
                grid.push(match ch {
                    '.' | 'o' => Cell::Free,
                    '#' => Cell::Wall,
                    other => return Err(Error::Format(format!("unknown cell symbol `{}`", other))),
                });
            }
        }
        for o in &self.objects {
            for &(x, z) in &o.cells {
                if x >= self.width || z >= self.depth {
                    return Err(Error::Format(format!("object {} outside the grid", o.id)));
                }
                grid[z * self.width + x] = Cell::Object(o.id);
            }
        }
        for (z, row) in self.rows.iter().enumerate() {
            for (x, ch) in row.chars().enumerate() {
                let is_obj = matches!(grid[z * self.width + x], Cell::Object(_));
                if is_obj != (ch == 'o') {
                    return Err(Error::Format(format!("object markers disagree with footprints at ({}, {})", x, z)));
                }
            }
        }
        let scene = Scene {
            seed: self.seed,
            width: self.width,
            depth: self.depth,
            cell_mm: self.cell_mm,
            wall_height_mm: self.wall_height_mm,
            num_classes: self.num_classes,
            target_classes: self.target_classes,
            grid,
            objects: self.objects,
        };
        scene.validate()?;
        Ok(scene)
    }
}

/// Generates a rooms-and-corridors scene with objects standing against walls.
pub fn generate_scene(seed: u64, params: &SceneParams) -> Result<Scene> {
    params.validate()?;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = rng_for(seed, attempt as u64);
        if let Some(scene) = try_generate(seed, params, &mut rng) {
            return Ok(scene);
        }
    }
    Err(Error::Infeasible { seed, attempts: MAX_ATTEMPTS })
}

fn try_generate(seed: u64, params: &SceneParams, rng: &mut ChaCha8Rng) -> Option<Scene> {
    let mut scene = Scene::empty(params, seed);
    let partitions = params.partitions.unwrap_or_else(|| {
        if params.object_density == 0.0 {
            0
        } else {
            (params.width.max(params.depth) / 6).saturating_sub(1).max(1)
        }
    });
    let mut regions = vec![(1, 1, params.width - 1, params.depth - 1)];
    for _ in 0..partitions {
        regions.sort_by_key(|&(x0, z0, x1, z1)| std::cmp::Reverse((x1 - x0) * (z1 - z0)));
        let Some(pos) = regions.iter().position(|r| split_axis(r).is_some()) else {
            break;
        };
        let region = regions.remove(pos);
        let (a, b) = split_region(&mut scene, region, rng)?;
        regions.push(a);
        regions.push(b);
    }
    if !scene.free_space_connected() {
        return None;
    }

    let interior_free = scene.free_cells().len();
    let count = (params.object_density * interior_free as f64).round() as usize;
    let count = count.max(if params.object_density > 0.0 { params.target_classes.len() } else { 0 });
    for k in 0..count {
        let class = if k < params.target_classes.len() {
            params.target_classes[k]
        } else {
            rng.gen_range(0..params.num_classes)
        };
        place_object(&mut scene, class, rng)?;
    }
    scene.validate().ok()?;
    Some(scene)
}

fn split_axis(&(x0, z0, x1, z1): &(usize, usize, usize, usize)) -> Option<bool> {
    let (w, d) = (x1 - x0, z1 - z0);
    let can_x = w > 2 * MIN_ROOM;
    let can_z = d > 2 * MIN_ROOM;
    match (can_x, can_z) {
        (false, false) => None,
        (true, false) => Some(true),
        (false, true) => Some(false),
        (true, true) => Some(w >= d),
    }
}

type Region = (usize, usize, usize, usize);

/// Splits a region with a wall line containing a one-cell door.
fn split_region(scene: &mut Scene, region: Region, rng: &mut ChaCha8Rng) -> Option<(Region, Region)> {
    let (x0, z0, x1, z1) = region;
    let vertical = split_axis(&region)?;
    if vertical {
        let at = rng.gen_range(x0 + MIN_ROOM..x1 - MIN_ROOM);
        let door = rng.gen_range(z0..z1);
        for z in z0..z1 {
            if z != door {
                scene.set(at, z, Cell::Wall);
            }
        }
        Some(((x0, z0, at, z1), (at + 1, z0, x1, z1)))
    } else {
        let at = rng.gen_range(z0 + MIN_ROOM..z1 - MIN_ROOM);
        let door = rng.gen_range(x0..x1);
        for x in x0..x1 {
            if x != door {
                scene.set(x, at, Cell::Wall);
            }
        }
        Some(((x0, z0, x1, at), (x0, at + 1, x1, z1)))
    }
}

fn against_wall(scene: &Scene, x: usize, z: usize) -> bool {
    scene.neighbors4(x, z).any(|(nx, nz)| scene.cell(nx, nz) == Cell::Wall)
}

fn place_object(scene: &mut Scene, class: usize, rng: &mut ChaCha8Rng) -> Option<()> {
    let mut candidates: Vec<(usize, usize)> = scene.free_cells().into_iter().filter(|&(x, z)| against_wall(scene, x, z)).collect();
    candidates.shuffle(rng);
    let id = scene.objects.len() as u32;
    for &(x, z) in candidates.iter().take(24) {
        let mut cells = vec![(x, z)];
        if rng.gen_bool(0.3) {
            let ext: Vec<_> = scene
                .neighbors4(x, z)
                .filter(|&(nx, nz)| scene.cell(nx, nz) == Cell::Free && against_wall(scene, nx, nz))
                .collect();
            if let Some(&e) = ext.choose(rng) {
                cells.push(e);
            }
        }
        for &(cx, cz) in &cells {
            scene.set(cx, cz, Cell::Object(id));
        }
        if scene.free_space_connected() {
            let base = CLASS_HEIGHTS[class % CLASS_HEIGHTS.len()];
            let mut color = class_color(class, scene.num_classes);
            for ch in &mut color {
                *ch = ((*ch + rng.gen_range(-0.04..0.04)).clamp(0.0, 1.0) * 1e4).round() / 1e4;
            }
            scene.objects.push(ObjectInstance {
                id,
                class,
                cells,
                height_mm: (base * rng.gen_range(0.9..1.1)).round(),
                color,
            });
            return Some(());
        }
        for &(cx, cz) in &cells {
            scene.set(cx, cz, Cell::Free);
        }
    }
    None
}
