use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{heading_deg, Pose};
use crate::scene::{Cell, Scene};
use crate::seed::rng_for;

/// Segmentation label for pixels with no return.
pub const LABEL_VOID: usize = 0;
pub const LABEL_FLOOR: usize = 1;
pub const LABEL_WALL: usize = 2;
/// Object class `k` is labelled `LABEL_OBJECT_BASE + k`.
pub const LABEL_OBJECT_BASE: usize = 3;

/// Depth reported for a face hit is pushed this far (at most) past the face,
/// so that unprojected points fall strictly inside the hit cell.
const FACE_PENETRATION_MM: f64 = 0.5;

pub fn num_seg_labels(num_classes: usize) -> usize {
    LABEL_OBJECT_BASE + num_classes
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraConfig {
    pub width_px: usize,
    pub height_px: usize,
    pub hfov_deg: f64,
    pub height_mm: f64,
    /// Depth values at or beyond this range are reported as the sentinel.
    pub max_range_mm: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig {
            width_px: 32,
            height_px: 24,
            hfov_deg: 90.0,
            height_mm: 900.0,
            max_range_mm: 6000.0,
        }
    }
}

/// Pinhole intrinsics; pixel centres sit at integer coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Camera-frame point `(x right, y up, z forward)` for pixel `(row, col)` at z-depth `depth`.
    pub fn unproject(&self, row: usize, col: usize, depth: f64) -> (f64, f64, f64) {
        let x = (col as f64 - self.cx) * depth / self.fx;
        let y = (self.cy - row as f64) * depth / self.fy;
        (x, y, depth)
    }
}

impl CameraConfig {
    pub fn intrinsics(&self) -> Intrinsics {
        let fx = (self.width_px as f64 / 2.0) / (self.hfov_deg.to_radians() / 2.0).tan();
        Intrinsics {
            fx,
            fy: fx,
            cx: (self.width_px as f64 - 1.0) / 2.0,
            cy: (self.height_px as f64 - 1.0) / 2.0,
        }
    }

    pub fn sentinel(&self) -> f64 {
        self.max_range_mm
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Per-pixel probability of replacing the label by a different random label.
    pub seg_flip_prob: f64,
    /// Probability that a visible instance produces no detection box.
    pub det_miss_prob: f64,
    /// Per-class probability of one spurious box per frame.
    pub det_false_pos_prob: f64,
    /// Box edges move by a uniform integer offset in `[-j, j]`.
    pub box_jitter_px: usize,
}

impl NoiseConfig {
    pub fn is_noise_free(&self) -> bool {
        self.seg_flip_prob == 0.0 && self.det_miss_prob == 0.0 && self.det_false_pos_prob == 0.0 && self.box_jitter_px == 0
    }
}

/// One egocentric frame. Images are row-major, row 0 at the top.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub width: usize,
    pub height: usize,
    /// `[h, w, 3]` in `[0, 1]`.
    pub rgb: Vec<f64>,
    /// z-depth in mm, `sentinel` where nothing was hit in range.
    pub depth: Vec<f64>,
    pub sentinel: f64,
    pub segmentation: Vec<usize>,
    pub num_seg_labels: usize,
    /// `[h, w, c_d]` binary masks, one channel per object class.
    pub detections: Vec<u8>,
    pub num_det_classes: usize,
    pub collision: bool,
    pub intrinsics: Intrinsics,
    /// Ground truth: object instance id per pixel.
    pub instances: Vec<Option<u32>>,
    /// Ground truth: grid cell whose surface produced the pixel's return.
    pub hit_cells: Vec<Option<(usize, usize)>>,
}

impl Observation {
    pub fn detection(&self, row: usize, col: usize, class: usize) -> u8 {
        self.detections[(row * self.width + col) * self.num_det_classes + class]
    }
}

#[derive(Clone, Copy, Debug)]
enum Surface {
    Wall,
    Object(u32),
}

#[derive(Clone, Copy, Debug)]
struct Span {
    cell: (usize, usize),
    z_in: f64,
    z_out: f64,
    height: f64,
    kind: Surface,
}

#[derive(Clone, Copy, Debug)]
enum Hit {
    Face(Span),
    Top(Span, f64),
    Floor(f64),
    Nothing,
}

/// World position (mm) of a pose: the centre of its cell.
pub fn pose_position_mm(scene: &Scene, pose: Pose) -> (f64, f64) {
    ((pose.x as f64 + 0.5) * scene.cell_mm, (pose.z as f64 + 0.5) * scene.cell_mm)
}

/// Renders the view from a graph pose.
pub fn render_observation(scene: &Scene, pose: Pose, r_env: usize, camera: &CameraConfig, noise: &NoiseConfig, noise_seed: u64) -> Observation {
    let (px, pz) = pose_position_mm(scene, pose);
    render_at(scene, px, pz, heading_deg(pose.orientation, r_env), camera, noise, noise_seed)
}

/// Renders the view from an arbitrary camera position (mm) and heading (degrees).
pub fn render_at(scene: &Scene, px: f64, pz: f64, heading: f64, camera: &CameraConfig, noise: &NoiseConfig, noise_seed: u64) -> Observation {
    let (w, h) = (camera.width_px, camera.height_px);
    let k = camera.intrinsics();
    let c_s = num_seg_labels(scene.num_classes);
    let c_d = scene.num_classes;
    let sentinel = camera.sentinel();
    let a = heading.to_radians();
    let fwd = (a.cos(), a.sin());
    let right = (a.sin(), -a.cos());

    let mut obs = Observation {
        width: w,
        height: h,
        rgb: vec![0.0; h * w * 3],
        depth: vec![sentinel; h * w],
        sentinel,
        segmentation: vec![LABEL_VOID; h * w],
        num_seg_labels: c_s,
        detections: vec![0; h * w * c_d],
        num_det_classes: c_d,
        collision: false,
        intrinsics: k,
        instances: vec![None; h * w],
        hit_cells: vec![None; h * w],
    };

    for col in 0..w {
        let dx = (col as f64 - k.cx) / k.fx;
        let dir = (fwd.0 + dx * right.0, fwd.1 + dx * right.1);
        let spans = cast_column(scene, (px, pz), dir, camera.max_range_mm);
        for row in 0..h {
            let slope = (k.cy - row as f64) / k.fy;
            let hit = shade_row(&spans, slope, camera.height_mm);
            let i = row * w + col;
            let (depth, label, cell, inst, color) = match hit {
                Hit::Nothing => continue,
                Hit::Floor(z) => {
                    let cx = ((px + z * dir.0) / scene.cell_mm).floor();
                    let cz = ((pz + z * dir.1) / scene.cell_mm).floor();
                    let cell = (cx as usize, cz as usize);
                    let shade = if (cell.0 + cell.1) % 2 == 0 { 1.0 } else { 0.9 };
                    (z, LABEL_FLOOR, cell, None, [0.45 * shade, 0.36 * shade, 0.26 * shade])
                }
                Hit::Face(s) | Hit::Top(s, _) => {
                    let z = match hit {
                        Hit::Top(_, zt) => zt,
                        _ => s.z_in + FACE_PENETRATION_MM.min(0.5 * (s.z_out - s.z_in)),
                    };
                    let top = if matches!(hit, Hit::Top(..)) { 1.12 } else { 1.0 };
                    match s.kind {
                        Surface::Wall => {
                            let tint = 0.9 + 0.2 * cell_hash(scene.seed, s.cell);
                            (z, LABEL_WALL, s.cell, None, [0.74 * tint, 0.71 * tint, 0.66 * tint])
                        }
                        Surface::Object(id) => {
                            let o = &scene.objects[id as usize];
                            let c = o.color.map(|v| (v * top).min(1.0));
                            (z, LABEL_OBJECT_BASE + o.class, s.cell, Some(id), c)
                        }
                    }
                }
            };
            if depth >= sentinel {
                continue;
            }
            let atten = 1.0 / (1.0 + depth / 10_000.0);
            obs.depth[i] = depth;
            obs.segmentation[i] = label;
            obs.hit_cells[i] = Some(cell);
            obs.instances[i] = inst;
            for ch in 0..3 {
                obs.rgb[i * 3 + ch] = (color[ch] * atten).clamp(0.0, 1.0);
            }
        }
    }

    let mut rng = rng_for(noise_seed, 0x0b5e);
    if noise.seg_flip_prob > 0.0 && c_s > 1 {
        for label in obs.segmentation.iter_mut() {
            if rng.gen_bool(noise.seg_flip_prob.min(1.0)) {
                let other = rng.gen_range(0..c_s - 1);
                *label = if other >= *label { other + 1 } else { other };
            }
        }
    }
    write_detections(scene, &mut obs, noise, &mut rng);
    obs
}

fn write_detections(scene: &Scene, obs: &mut Observation, noise: &NoiseConfig, rng: &mut impl Rng) {
    let (w, h, c_d) = (obs.width, obs.height, obs.num_det_classes);
    let mut boxes: Vec<(usize, [usize; 4])> = Vec::new();
    let mut bounds: Vec<Option<[usize; 4]>> = vec![None; scene.objects.len()];
    for row in 0..h {
        for col in 0..w {
            if let Some(id) = obs.instances[row * w + col] {
                let b = bounds[id as usize].get_or_insert([row, row, col, col]);
                b[0] = b[0].min(row);
                b[1] = b[1].max(row);
                b[2] = b[2].min(col);
                b[3] = b[3].max(col);
            }
        }
    }
    let jitter = noise.box_jitter_px as i64;
    for (id, b) in bounds.iter().enumerate() {
        let Some(b) = *b else { continue };
        if noise.det_miss_prob > 0.0 && rng.gen_bool(noise.det_miss_prob.min(1.0)) {
            continue;
        }
        let mut b = b;
        if jitter > 0 {
            let mut j = |v: usize, max: usize| (v as i64 + rng.gen_range(-jitter..=jitter)).clamp(0, max as i64 - 1) as usize;
            b = [j(b[0], h), j(b[1], h), j(b[2], w), j(b[3], w)];
            if b[0] > b[1] {
                b.swap(0, 1);
            }
            if b[2] > b[3] {
                b.swap(2, 3);
            }
        }
        boxes.push((scene.objects[id].class, b));
    }
    if noise.det_false_pos_prob > 0.0 {
        for class in 0..c_d {
            if rng.gen_bool(noise.det_false_pos_prob.min(1.0)) {
                let bh = rng.gen_range(1..=(h / 3).max(1));
                let bw = rng.gen_range(1..=(w / 3).max(1));
                let r0 = rng.gen_range(0..=h - bh);
                let c0 = rng.gen_range(0..=w - bw);
                boxes.push((class, [r0, r0 + bh - 1, c0, c0 + bw - 1]));
            }
        }
    }
    for (class, [r0, r1, c0, c1]) in boxes {
        for row in r0..=r1 {
            for col in c0..=c1 {
                obs.detections[(row * w + col) * c_d + class] = 1;
            }
        }
    }
}

/// Deterministic value in `[0, 1)` per cell, used for wall texture.
fn cell_hash(seed: u64, cell: (usize, usize)) -> f64 {
    let v = crate::seed::derive_seed(seed, (cell.0 as u64) << 32 | cell.1 as u64);
    (v >> 11) as f64 / (1u64 << 53) as f64
}

/// Grid traversal along one column ray. The parameter along the ray is
/// camera z-depth (the direction has unit forward component). Returns the
/// blocked cells crossed, ending at the first wall.
fn cast_column(scene: &Scene, origin: (f64, f64), dir: (f64, f64), max_range: f64) -> Vec<Span> {
    let s = scene.cell_mm;
    let mut cell = ((origin.0 / s).floor() as i64, (origin.1 / s).floor() as i64);
    let axis = |o: f64, d: f64, c: i64| -> (i64, f64, f64) {
        if d > 0.0 {
            (1, ((c + 1) as f64 * s - o) / d, s / d)
        } else if d < 0.0 {
            (-1, (c as f64 * s - o) / d, -s / d)
        } else {
            (0, f64::INFINITY, f64::INFINITY)
        }
    };
    let (step_x, mut next_x, delta_x) = axis(origin.0, dir.0, cell.0);
    let (step_z, mut next_z, delta_z) = axis(origin.1, dir.1, cell.1);
    let mut spans = Vec::new();
    loop {
        let t_in;
        if next_x <= next_z {
            t_in = next_x;
            cell.0 += step_x;
            next_x += delta_x;
        } else {
            t_in = next_z;
            cell.1 += step_z;
            next_z += delta_z;
        }
        if t_in >= max_range || !scene.in_bounds(cell.0, cell.1) {
            break;
        }
        let t_out = next_x.min(next_z);
        let c = (cell.0 as usize, cell.1 as usize);
        match scene.cell(c.0, c.1) {
            Cell::Free => {}
            Cell::Wall => {
                spans.push(Span {
                    cell: c,
                    z_in: t_in,
                    z_out: t_out,
                    height: scene.wall_height_mm,
                    kind: Surface::Wall,
                });
                break;
            }
            Cell::Object(id) => spans.push(Span {
                cell: c,
                z_in: t_in,
                z_out: t_out,
                height: scene.objects[id as usize].height_mm,
                kind: Surface::Object(id),
            }),
        }
    }
    spans
}

/// First surface hit by the pixel ray with vertical slope `slope` (height
/// change per unit depth) from a camera `cam_h` above the floor.
fn shade_row(spans: &[Span], slope: f64, cam_h: f64) -> Hit {
    let floor_z = if slope < 0.0 { cam_h / -slope } else { f64::INFINITY };
    for s in spans {
        if floor_z <= s.z_in {
            return Hit::Floor(floor_z);
        }
        let y_in = cam_h + slope * s.z_in;
        if y_in <= s.height {
            return Hit::Face(*s);
        }
        if slope < 0.0 {
            let z_top = (s.height - cam_h) / slope;
            if z_top <= s.z_out {
                return Hit::Top(*s, z_top);
            }
        }
    }
    if floor_z.is_finite() {
        Hit::Floor(floor_z)
    } else {
        Hit::Nothing
    }
}
