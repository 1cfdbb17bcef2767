//! Allocentric semantic mapping: ground projection of each frame into an
//! egocentric grid, per-modality embedding, dense localization over
//! translations and rotations, belief-weighted registration and a per-cell
//! recurrent map update.

use std::io::Write;
use std::path::Path;
use std::rc::Rc;

use ndgrad::kernels::{rotation_taps, Taps};
use ndgrad::{lstm_step, Array, Bound, CellVars, ParamSet, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use worldsim::{Intrinsics, Observation, Pose};

use crate::error::{Error, Result};

/// Which observation modalities feed the ego grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Modalities {
    pub rgb: bool,
    pub seg: bool,
    pub det: bool,
}

impl Modalities {
    pub const RGB: Modalities = Modalities {
        rgb: true,
        seg: false,
        det: false,
    };
    pub const SSEG_DET: Modalities = Modalities {
        rgb: false,
        seg: true,
        det: true,
    };
    pub const ALL: Modalities = Modalities {
        rgb: true,
        seg: true,
        det: true,
    };

    pub fn tag(&self) -> String {
        let mut parts = Vec::new();
        if self.rgb {
            parts.push("RGB");
        }
        if self.seg {
            parts.push("SSeg");
        }
        if self.det {
            parts.push("Det");
        }
        parts.join("-")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionConfig {
    pub u: usize,
    pub v: usize,
    pub u_prime: usize,
    pub v_prime: usize,
    pub r: usize,
    pub x_b: f64,
    pub z_b: f64,
    pub c_d: usize,
    pub c_s: usize,
    pub l_i: usize,
    pub l_d: usize,
    pub l_s: usize,
    /// Hidden width of the two-layer modality nets.
    pub phi_hidden: usize,
    pub modalities: Modalities,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            u: 15,
            v: 15,
            u_prime: 11,
            v_prime: 11,
            r: 4,
            x_b: 300.0,
            z_b: 300.0,
            c_d: 8,
            c_s: 11,
            l_i: 32,
            l_d: 16,
            l_s: 16,
            phi_hidden: 64,
            modalities: Modalities::ALL,
        }
    }
}

/// Channels of the image encoder output.
pub const IMAGE_FEATURES: usize = 32;
const ENCODER_WIDTHS: [usize; 3] = [16, 32, IMAGE_FEATURES];

impl ProjectionConfig {
    /// Map feature width `n`: the sum of the enabled embedding widths.
    pub fn n(&self) -> usize {
        let m = self.modalities;
        m.rgb as usize * self.l_i + m.seg as usize * self.l_s + m.det as usize * self.l_d
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, e) in [("u", self.u), ("v", self.v), ("u_prime", self.u_prime), ("v_prime", self.v_prime)] {
            if e % 2 == 0 {
                return bad(format!("{} = {} must be odd", name, e));
            }
        }
        if self.u_prime > self.u || self.v_prime > self.v {
            return bad("ego grid larger than the map".into());
        }
        if self.r == 0 {
            return bad("r must be at least 1".into());
        }
        if !(self.x_b > 0.0 && self.z_b > 0.0) {
            return bad("bin sizes must be positive".into());
        }
        if self.n() == 0 {
            return bad("no modality enabled".into());
        }
        Ok(())
    }

    pub fn center(&self) -> (usize, usize) {
        ((self.u - 1) / 2, (self.v - 1) / 2)
    }

    pub fn ego_center(&self) -> (usize, usize) {
        ((self.u_prime - 1) / 2, (self.v_prime - 1) / 2)
    }

    pub fn num_poses(&self) -> usize {
        self.u * self.v * self.r
    }

    pub fn pose_index(&self, i: usize, j: usize, rho: usize) -> usize {
        (i * self.v + j) * self.r + rho
    }

    pub fn pose_from_index(&self, k: usize) -> (usize, usize, usize) {
        (k / (self.v * self.r), (k / self.r) % self.v, k % self.r)
    }

    /// Rotation copies used by the stack, one per orientation bin.
    pub fn rotation_taps(&self) -> Rc<Vec<Taps>> {
        Rc::new(
            (0..self.r)
                .map(|rho| rotation_taps(self.u_prime, self.v_prime, rho as f64 * 360.0 / self.r as f64))
                .collect(),
        )
    }
}

/// The binning formula `x_g = floor(x / x_b) + (u' - 1) / 2` (and likewise
/// for `z`), without bounds checks.
pub fn bin_coords(x: f64, z: f64, cfg: &ProjectionConfig) -> (i64, i64) {
    let (cu, cv) = cfg.ego_center();
    ((x / cfg.x_b).floor() as i64 + cu as i64, (z / cfg.z_b).floor() as i64 + cv as i64)
}

/// Ego-grid cell of a camera-frame ground point. The camera sits at the
/// centre of the centre cell, so coordinates are shifted by half a bin
/// before applying [`bin_coords`].
pub fn ego_cell(x: f64, z: f64, cfg: &ProjectionConfig) -> Option<(usize, usize)> {
    let (gx, gz) = bin_coords(x + cfg.x_b / 2.0, z + cfg.z_b / 2.0, cfg);
    (gx >= 0 && gz >= 0 && (gx as usize) < cfg.u_prime && (gz as usize) < cfg.v_prime).then_some((gx as usize, gz as usize))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    Max,
    Mean,
    /// Accumulates and renormalizes each cell to sum to one.
    Distribution,
}

/// A per-modality egocentric grid `[u', v', k]` with its observed mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityGrid {
    pub grid: Array,
    pub observed: Vec<bool>,
}

/// Ego cell index (`x_g * v' + z_g`) for every pixel with a valid depth.
pub fn pixel_cells(depth: &[f64], width: usize, intrinsics: &Intrinsics, sentinel: f64, cfg: &ProjectionConfig) -> Vec<Option<usize>> {
    depth
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            if !(d > 0.0 && d < sentinel) {
                return None;
            }
            let (x, _, z) = intrinsics.unproject(i / width, i % width, d);
            ego_cell(x, z, cfg).map(|(gx, gz)| gx * cfg.v_prime + gz)
        })
        .collect()
}

/// Unprojects every valid depth pixel, bins it into the ego grid and pools
/// the pixel's `k` values per cell.
pub fn unproject_and_bin(
    depth: &[f64],
    values: &[f64],
    k: usize,
    width: usize,
    intrinsics: &Intrinsics,
    sentinel: f64,
    cfg: &ProjectionConfig,
    pooling: Pooling,
) -> Result<ModalityGrid> {
    if cfg.x_b <= 0.0 || cfg.z_b <= 0.0 {
        return Err(Error::Config("nonpositive bin size".into()));
    }
    if values.len() != depth.len() * k {
        return Err(Error::Shape(format!("{} values for {} pixels x {} channels", values.len(), depth.len(), k)));
    }
    let cells = pixel_cells(depth, width, intrinsics, sentinel, cfg);
    Ok(pool_cells(&cells, values, k, cfg.u_prime * cfg.v_prime, pooling, cfg))
}

fn pool_cells(cells: &[Option<usize>], values: &[f64], k: usize, n_cells: usize, pooling: Pooling, cfg: &ProjectionConfig) -> ModalityGrid {
    let mut acc = vec![0.0; n_cells * k];
    let mut count = vec![0usize; n_cells];
    for (p, cell) in cells.iter().enumerate() {
        let Some(c) = *cell else { continue };
        let src = &values[p * k..(p + 1) * k];
        let dst = &mut acc[c * k..(c + 1) * k];
        if count[c] == 0 || pooling != Pooling::Max {
            if pooling == Pooling::Max {
                dst.copy_from_slice(src);
            } else {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        } else {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = d.max(*s);
            }
        }
        count[c] += 1;
    }
    for c in 0..n_cells {
        let dst = &mut acc[c * k..(c + 1) * k];
        match pooling {
            Pooling::Mean if count[c] > 0 => dst.iter_mut().for_each(|d| *d /= count[c] as f64),
            Pooling::Distribution => {
                let s: f64 = dst.iter().sum();
                if s > 0.0 {
                    dst.iter_mut().for_each(|d| *d /= s);
                }
            }
            _ => {}
        }
    }
    ModalityGrid {
        grid: Array::new(&[cfg.u_prime, cfg.v_prime, k], acc).expect("grid shape"),
        observed: count.iter().map(|&c| c > 0).collect(),
    }
}

/// Everything the mapper needs from one observation, with the
/// non-differentiable projection work done up front.
#[derive(Clone, Debug)]
pub struct Frame {
    /// `[h, w, 3]` image, present when the RGB modality is enabled.
    pub rgb: Option<Array>,
    /// `(feature pixel, ego cell)` pairs for max-pooling encoder features.
    pub feature_cells: Vec<(usize, usize)>,
    pub seg: Option<ModalityGrid>,
    pub det: Option<ModalityGrid>,
    pub observed: Vec<bool>,
}

/// Downsampling factor of the image encoder (three stride-2 layers).
pub const ENCODER_STRIDE: usize = 8;

pub fn encoder_output_hw(h: usize, w: usize) -> (usize, usize) {
    let down = |x: usize| (x - 1) / 2 + 1;
    (down(down(down(h))), down(down(down(w))))
}

impl Frame {
    pub fn from_observation(obs: &Observation, cfg: &ProjectionConfig) -> Result<Frame> {
        let (w, h) = (obs.width, obs.height);
        let cells = pixel_cells(&obs.depth, w, &obs.intrinsics, obs.sentinel, cfg);
        let n_cells = cfg.u_prime * cfg.v_prime;
        let mut observed = vec![false; n_cells];
        for c in cells.iter().flatten() {
            observed[*c] = true;
        }
        let m = cfg.modalities;
        let seg = if m.seg {
            if obs.num_seg_labels != cfg.c_s {
                return Err(Error::Shape(format!(
                    "observation has {} labels, config expects {}",
                    obs.num_seg_labels, cfg.c_s
                )));
            }
            let mut onehot = vec![0.0; w * h * cfg.c_s];
            for (p, &l) in obs.segmentation.iter().enumerate() {
                onehot[p * cfg.c_s + l] = 1.0;
            }
            Some(pool_cells(&cells, &onehot, cfg.c_s, n_cells, Pooling::Distribution, cfg))
        } else {
            None
        };
        let det = if m.det {
            if obs.num_det_classes != cfg.c_d {
                return Err(Error::Shape(format!(
                    "observation has {} detection classes, config expects {}",
                    obs.num_det_classes, cfg.c_d
                )));
            }
            let vals: Vec<f64> = obs.detections.iter().map(|&b| b as f64).collect();
            Some(pool_cells(&cells, &vals, cfg.c_d, n_cells, Pooling::Mean, cfg))
        } else {
            None
        };
        let (rgb, feature_cells) = if m.rgb {
            let (fh, fw) = encoder_output_hw(h, w);
            let mut pairs: Vec<(usize, usize)> = cells
                .iter()
                .enumerate()
                .filter_map(|(p, c)| {
                    let (row, col) = (p / w, p % w);
                    let f = (row / ENCODER_STRIDE).min(fh - 1) * fw + (col / ENCODER_STRIDE).min(fw - 1);
                    c.map(|c| (f, c))
                })
                .collect();
            pairs.sort_unstable();
            pairs.dedup();
            (Some(Array::new(&[h, w, 3], obs.rgb.clone())?), pairs)
        } else {
            (None, Vec::new())
        };
        Ok(Frame {
            rgb,
            feature_cells,
            seg,
            det,
            observed,
        })
    }
}

/// Mapper weights: image encoder, the three modality nets and the shared
/// recurrent cell.
#[derive(Clone, Debug, PartialEq)]
pub struct MapperParams {
    pub config: ProjectionConfig,
    pub params: ParamSet,
}

fn he_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Array {
    Array::random_uniform(shape, (6.0 / fan_in as f64).sqrt(), rng)
}

fn insert_conv<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, cin: usize, cout: usize, rng: &mut R) {
    ps.insert(&format!("{}.w", name), he_uniform(&[3, 3, cin, cout], 9 * cin, rng));
    ps.insert(&format!("{}.b", name), Array::zeros(&[cout]));
}

impl MapperParams {
    pub fn init<R: Rng + ?Sized>(config: &ProjectionConfig, rng: &mut R) -> Result<MapperParams> {
        config.validate()?;
        let mut ps = ParamSet::new();
        let m = config.modalities;
        let hid = config.phi_hidden;
        if m.rgb {
            let mut cin = 3;
            for (l, &cout) in ENCODER_WIDTHS.iter().enumerate() {
                insert_conv(&mut ps, &format!("encoder.{}", l), cin, cout, rng);
                cin = cout;
            }
            insert_conv(&mut ps, "phi_i.0", IMAGE_FEATURES, hid, rng);
            insert_conv(&mut ps, "phi_i.1", hid, config.l_i, rng);
        }
        if m.det {
            insert_conv(&mut ps, "phi_d.0", config.c_d, hid, rng);
            insert_conv(&mut ps, "phi_d.1", hid, config.l_d, rng);
        }
        if m.seg {
            insert_conv(&mut ps, "phi_s.0", config.c_s, hid, rng);
            insert_conv(&mut ps, "phi_s.1", hid, config.l_s, rng);
        }
        let cell = ndgrad::RecurrentCellParams::random(config.n(), config.n(), rng);
        ps.insert("cell.w_input", cell.w_input);
        ps.insert("cell.w_hidden", cell.w_hidden);
        ps.insert("cell.bias", cell.bias);
        Ok(MapperParams {
            config: config.clone(),
            params: ps,
        })
    }

    /// Same architecture with every weight and bias set to zero.
    pub fn zeroed(&self) -> MapperParams {
        let mut out = self.clone();
        for id in 0..out.params.len() {
            out.params.value_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> MapperVars<'_> {
        MapperVars {
            config: &self.config,
            taps: self.config.rotation_taps(),
            params: &self.params,
            bound: self.params.bind(tape, trainable),
        }
    }
}

/// Mapper weights bound to a tape.
pub struct MapperVars<'a> {
    pub config: &'a ProjectionConfig,
    pub taps: Rc<Vec<Taps>>,
    params: &'a ParamSet,
    pub bound: Bound,
}

impl MapperVars<'_> {
    fn var(&self, name: &str) -> Var {
        let id = self.params.id(name).unwrap_or_else(|| panic!("missing mapper parameter `{}`", name));
        self.bound.var(id)
    }

    fn conv_layer(&self, tape: &mut Tape, x: Var, name: &str, stride: usize) -> Result<Var> {
        let y = tape.conv2d(x, self.var(&format!("{}.w", name)), 1, stride)?;
        Ok(tape.add_bias(y, self.var(&format!("{}.b", name)))?)
    }

    /// Two 3x3 layers with a ReLU between them.
    fn phi(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let h = self.conv_layer(tape, x, &format!("{}.0", prefix), 1)?;
        let h = tape.relu(h)?;
        self.conv_layer(tape, h, &format!("{}.1", prefix), 1)
    }

    pub fn cell(&self) -> CellVars {
        CellVars {
            w_input: self.var("cell.w_input"),
            w_hidden: self.var("cell.w_hidden"),
            bias: self.var("cell.bias"),
        }
    }

    /// Image encoder output `[h/8, w/8, IMAGE_FEATURES]`.
    pub fn encode_image(&self, tape: &mut Tape, rgb: Var) -> Result<Var> {
        let mut x = rgb;
        for l in 0..ENCODER_WIDTHS.len() {
            let y = self.conv_layer(tape, x, &format!("encoder.{}", l), 2)?;
            x = tape.relu(y)?;
        }
        Ok(x)
    }

    /// Embeds a frame into the egocentric grid `[u', v', n]`; unobserved
    /// cells are zero.
    pub fn embed_grids(&self, tape: &mut Tape, frame: &Frame) -> Result<Var> {
        let cfg = self.config;
        let (up, vp) = (cfg.u_prime, cfg.v_prime);
        let mut parts = Vec::new();
        if cfg.modalities.rgb {
            let rgb = frame.rgb.as_ref().ok_or_else(|| Error::Shape("frame has no image".into()))?;
            let img = tape.constant(rgb.clone());
            let feats = self.encode_image(tape, img)?;
            let s = tape.value(feats).shape().to_vec();
            let flat = tape.reshape(feats, &[s[0] * s[1], s[2]])?;
            let pooled = tape.bin_max(flat, &frame.feature_cells, up * vp)?;
            let grid = tape.reshape(pooled, &[up, vp, s[2]])?;
            parts.push(self.phi(tape, grid, "phi_i")?);
        }
        for (on, grid, prefix) in [(cfg.modalities.det, &frame.det, "phi_d"), (cfg.modalities.seg, &frame.seg, "phi_s")] {
            if on {
                let g = grid.as_ref().ok_or_else(|| Error::Shape(format!("frame lacks input for {}", prefix)))?;
                let x = tape.constant(g.grid.clone());
                parts.push(self.phi(tape, x, prefix)?);
            }
        }
        let cat = if parts.len() == 1 { parts[0] } else { tape.concat(&parts)? };
        let n = cfg.n();
        let mut mask = Array::zeros(&[up, vp, n]);
        for (c, chunk) in mask.data_mut().chunks_mut(n).enumerate() {
            if frame.observed[c] {
                chunk.iter_mut().for_each(|x| *x = 1.0);
            }
        }
        Ok(tape.mul_const(cat, &mask)?)
    }

    /// Rotated copies `[u', v', n, r]` of an ego grid.
    pub fn rotate_stack(&self, tape: &mut Tape, ego: Var) -> Result<Var> {
        Ok(tape.rotate_stack(ego, self.taps.clone())?)
    }
}

/// Belief over poses: softmax over all `u * v * r` correlation scores.
pub fn localize(tape: &mut Tape, map: Var, stack: Var) -> Result<Var> {
    let scores = tape.correlate_stack(map, stack)?;
    Ok(tape.softmax(scores, 3)?)
}

/// Belief-weighted placement of the rotated ego grids into map coordinates.
pub fn register(tape: &mut Tape, stack: Var, belief: Var) -> Result<Var> {
    Ok(tape.place_weighted(stack, belief)?)
}

/// Map features and per-cell recurrent state, both `[u * v, n]` on a tape.
#[derive(Clone, Copy, Debug)]
pub struct MapState {
    pub h: Var,
    pub c: Var,
    pub t: usize,
}

impl MapState {
    pub fn zeros(tape: &mut Tape, cfg: &ProjectionConfig) -> MapState {
        let shape = [cfg.u * cfg.v, cfg.n()];
        MapState {
            h: tape.constant(Array::zeros(&shape)),
            c: tape.constant(Array::zeros(&shape)),
            t: 0,
        }
    }

    /// Map features as `[u, v, n]`.
    pub fn features(&self, tape: &mut Tape, cfg: &ProjectionConfig) -> Result<Var> {
        Ok(tape.reshape(self.h, &[cfg.u, cfg.v, cfg.n()])?)
    }
}

/// Runs the shared recurrent cell independently on every map cell.
pub fn update_map(tape: &mut Tape, cell: CellVars, state: MapState, registered: Var) -> Result<MapState> {
    let s = tape.value(registered).shape().to_vec();
    let x = tape.reshape(registered, &[s[0] * s[1], s[2]])?;
    let (h, c) = lstm_step(tape, cell, x, state.h, state.c)?;
    Ok(MapState { h, c, t: state.t + 1 })
}

/// One-hot belief at the map centre, orientation bin 0.
pub fn origin_belief(cfg: &ProjectionConfig) -> Array {
    let (ci, cj) = cfg.center();
    let mut b = Array::zeros(&[cfg.u, cfg.v, cfg.r]);
    b.set(&[ci, cj, 0], 1.0);
    b
}

/// Output of one mapper step.
pub struct StepOutput {
    pub state: MapState,
    /// `[u, v, r]`; the fixed origin belief on the first frame.
    pub belief: Var,
    pub localized: bool,
}

/// Processes one frame: embed, localize against the previous map (or use the
/// origin on the first frame), register and update.
pub fn mapper_step(tape: &mut Tape, vars: &MapperVars, state: MapState, frame: &Frame) -> Result<StepOutput> {
    let cfg = vars.config;
    let ego = vars.embed_grids(tape, frame)?;
    let stack = vars.rotate_stack(tape, ego)?;
    let (belief, localized) = if state.t == 0 {
        (tape.constant(origin_belief(cfg)), false)
    } else {
        let map = state.features(tape, cfg)?;
        (localize(tape, map, stack)?, true)
    };
    let registered = register(tape, stack, belief)?;
    let state = update_map(tape, vars.cell(), state, registered)?;
    Ok(StepOutput { state, belief, localized })
}

/// Pose of `pose` relative to `origin`: (rightward mm, forward mm, CCW degrees),
/// all in the origin's egocentric frame.
pub fn relative_pose(origin: Pose, pose: Pose, r_env: usize, cell_mm: f64) -> (f64, f64, f64) {
    let th = (origin.orientation as f64 * 360.0 / r_env as f64).to_radians();
    let (dx, dz) = ((pose.x as f64 - origin.x as f64) * cell_mm, (pose.z as f64 - origin.z as f64) * cell_mm);
    let right = dx * th.sin() - dz * th.cos();
    let fwd = dx * th.cos() + dz * th.sin();
    let dtheta = ((pose.orientation as f64 - origin.orientation as f64) * 360.0 / r_env as f64).rem_euclid(360.0);
    (right, fwd, dtheta)
}

/// Nearest index with ties toward the lower one.
fn nearest_lower(x: f64) -> i64 {
    (x - 0.5).ceil() as i64
}

/// Discretizes a relative pose to the map cell and orientation bin.
pub fn pose_to_bin(right_mm: f64, fwd_mm: f64, dtheta_deg: f64, cfg: &ProjectionConfig) -> Result<(usize, usize, usize)> {
    let (ci, cj) = cfg.center();
    let i = ci as i64 + nearest_lower(right_mm / cfg.x_b);
    let j = cj as i64 + nearest_lower(fwd_mm / cfg.z_b);
    if i < 0 || j < 0 || i as usize >= cfg.u || j as usize >= cfg.v {
        return Err(Error::OutOfMap { i, j });
    }
    let step = 360.0 / cfg.r as f64;
    let rho = nearest_lower(dtheta_deg.rem_euclid(360.0) / step).rem_euclid(cfg.r as i64);
    Ok((i as usize, j as usize, rho as usize))
}

/// Metric offset from the origin (map centre) and heading of a map pose.
pub fn pose_to_world(i: usize, j: usize, rho: usize, cfg: &ProjectionConfig) -> (f64, f64, f64) {
    let (ci, cj) = cfg.center();
    (
        (i as f64 - ci as f64) * cfg.x_b,
        (j as f64 - cj as f64) * cfg.z_b,
        rho as f64 * 360.0 / cfg.r as f64,
    )
}

/// One-hot ground-truth belief for every step of a pose sequence, relative to its first pose.
pub fn ground_truth_indices(poses: &[Pose], r_env: usize, cell_mm: f64, cfg: &ProjectionConfig) -> Result<Vec<usize>> {
    poses
        .iter()
        .map(|&p| {
            let (a, b, th) = relative_pose(poses[0], p, r_env, cell_mm);
            let (i, j, rho) = pose_to_bin(a, b, th, cfg)?;
            Ok(cfg.pose_index(i, j, rho))
        })
        .collect()
}

/// `-(1/T) sum_t log p_t[gt_t]` over the localized steps.
pub fn localization_loss(tape: &mut Tape, beliefs: &[Var], targets: &[usize]) -> Result<Var> {
    if beliefs.is_empty() || beliefs.len() != targets.len() {
        return Err(Error::Shape(format!("{} beliefs for {} targets", beliefs.len(), targets.len())));
    }
    let mut terms = Vec::with_capacity(beliefs.len());
    for (&b, &k) in beliefs.iter().zip(targets) {
        let len = tape.value(b).len();
        let mut onehot = Array::zeros(tape.value(b).shape());
        if k >= len {
            return Err(Error::Shape(format!("target index {} outside belief of size {}", k, len)));
        }
        onehot.data_mut()[k] = 1.0;
        terms.push(tape.cross_entropy(b, &onehot)?);
    }
    let total = tape.add_all(&terms)?;
    Ok(tape.scale(total, 1.0 / terms.len() as f64)?)
}

/// Forward-only mapper that keeps its state as plain arrays between frames.
pub struct MapperRunner<'a> {
    params: &'a MapperParams,
    h: Option<Array>,
    c: Option<Array>,
    t: usize,
}

/// Map and belief after a frame.
pub struct MapSnapshot {
    pub features: Array,
    pub belief: Array,
}

impl<'a> MapperRunner<'a> {
    pub fn new(params: &'a MapperParams) -> Self {
        MapperRunner {
            params,
            h: None,
            c: None,
            t: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.t
    }

    pub fn observe(&mut self, frame: &Frame) -> Result<MapSnapshot> {
        let cfg = &self.params.config;
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let state = match (&self.h, &self.c) {
            (Some(h), Some(c)) => MapState {
                h: tape.constant(h.clone()),
                c: tape.constant(c.clone()),
                t: self.t,
            },
            _ => MapState::zeros(&mut tape, cfg),
        };
        let out = mapper_step(&mut tape, &vars, state, frame)?;
        let features = out.state.features(&mut tape, cfg)?;
        self.h = Some(tape.value(out.state.h).clone());
        self.c = Some(tape.value(out.state.c).clone());
        self.t = out.state.t;
        Ok(MapSnapshot {
            features: tape.value(features).clone(),
            belief: tape.value(out.belief).clone(),
        })
    }
}

pub const MAP_SNAPSHOT_MAGIC: &[u8; 4] = b"SMAP";
pub const MAP_SNAPSHOT_VERSION: u32 = 1;

/// Binary map dump: magic, version, `u`, `v`, `n` as `u32` LE, then `f32` LE features.
pub fn write_map_snapshot(path: &Path, features: &Array) -> Result<()> {
    let s = features.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("map snapshot expects [u, v, n], got {:?}", s)));
    }
    let mut out = Vec::with_capacity(20 + 4 * features.len());
    out.extend_from_slice(MAP_SNAPSHOT_MAGIC);
    out.extend_from_slice(&MAP_SNAPSHOT_VERSION.to_le_bytes());
    for &e in s {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &x in features.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_map_snapshot(path: &Path) -> Result<Array> {
    let bytes = std::fs::read(path)?;
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(4 + 4 * i..8 + 4 * i)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| Error::Format("truncated map snapshot".into()))
    };
    if bytes.len() < 20 || &bytes[..4] != MAP_SNAPSHOT_MAGIC {
        return Err(Error::Format("not a map snapshot".into()));
    }
    if word(0)? != MAP_SNAPSHOT_VERSION {
        return Err(Error::Format(format!("unsupported map snapshot version {}", word(0)?)));
    }
    let (u, v, n) = (word(1)? as usize, word(2)? as usize, word(3)? as usize);
    let body = &bytes[20..];
    if body.len() != 4 * u * v * n {
        return Err(Error::Format("map snapshot size mismatch".into()));
    }
    let data = body.chunks(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
    Ok(Array::new(&[u, v, n], data)?)
}

/// Debug CSV: one row per map row `i`, the argmax feature channel per cell
/// (`-1` for all-zero cells).
pub fn write_argmax_csv<W: Write>(mut w: W, features: &Array) -> Result<()> {
    let s = features.shape();
    let (u, v, n) = (s[0], s[1], s[2]);
    for i in 0..u {
        let row: Vec<String> = (0..v)
            .map(|j| {
                let cell = &features.data()[(i * v + j) * n..(i * v + j + 1) * n];
                if cell.iter().all(|&x| x == 0.0) {
                    "-1".to_string()
                } else {
                    let mut best = 0;
                    for (k, &x) in cell.iter().enumerate() {
                        if x > cell[best] {
                            best = k;
                        }
                    }
                    best.to_string()
                }
            })
            .collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Unrolls the mapper over an episode from an empty map and returns the
/// localization loss over frames `1..T` with the beliefs of those frames.
pub fn episode_loss(tape: &mut Tape, vars: &MapperVars, frames: &[Frame], targets: &[usize]) -> Result<(Var, Vec<Var>)> {
    if frames.len() < 2 || frames.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} frames for {} targets; need at least two",
            frames.len(),
            targets.len()
        )));
    }
    let mut state = MapState::zeros(tape, vars.config);
    let mut beliefs = Vec::with_capacity(frames.len() - 1);
    for frame in frames {
        let out = mapper_step(tape, vars, state, frame)?;
        if out.localized {
            beliefs.push(out.belief);
        }
        state = out.state;
    }
    let loss = localization_loss(tape, &beliefs, &targets[1..])?;
    Ok((loss, beliefs))
}

fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

impl MapperParams {
    /// Writes the weights to `path` and the projection config to `path.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)?;
        std::fs::write(sidecar(path), serde_json::to_string_pretty(&self.config)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<MapperParams> {
        let config: ProjectionConfig = serde_json::from_str(&std::fs::read_to_string(sidecar(path))?)?;
        config.validate()?;
        let mut expected = MapperParams::init(&config, &mut rand::rngs::mock::StepRng::new(0, 0))?;
        expected.params.load_values_from(&ParamSet::load(path)?)?;
        Ok(expected)
    }
}
