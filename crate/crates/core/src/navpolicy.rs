//! Target-driven navigation policy: map, belief, egocentric view, target and
//! collision bit go through per-input encoders and a recurrent core that
//! predicts one cost per action.

use ndgrad::nn::linear;
use ndgrad::{lstm_step, Array, Bound, CellVars, ParamSet, RecurrentCellParams, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use worldsim::{Action, EnvGraph, Observation, Pose, UNREACHABLE};

use crate::error::{Error, Result};

pub const NUM_ACTIONS: usize = 3;
const MAP_CONV_CHANNELS: usize = 8;
const EGO_WIDTHS: [usize; 3] = [16, 16, 16];
const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Map extents `u`, `v`.
    pub map_u: usize,
    pub map_v: usize,
    /// Map feature width `n`.
    pub map_n: usize,
    /// Belief orientation bins `r`.
    pub map_r: usize,
    pub ego_height: usize,
    pub ego_width: usize,
    pub ego_channels: usize,
    pub num_targets: usize,
    pub embed: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub temperature: f64,
    pub use_ego: bool,
}

impl PolicyConfig {
    fn pooled_map_len(&self) -> usize {
        (self.map_u / 2) * (self.map_v / 2) * MAP_CONV_CHANNELS
    }

    fn ego_feature_len(&self) -> usize {
        let down = |x: usize| (x - 1) / 2 + 1;
        let (h, w) = (down(down(down(self.ego_height))), down(down(down(self.ego_width))));
        h * w * EGO_WIDTHS[2]
    }

    pub fn core_input(&self) -> usize {
        3 * self.embed + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub config: PolicyConfig,
    pub params: ParamSet,
}

fn uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Array {
    Array::random_uniform(shape, (6.0 / fan_in as f64).sqrt(), rng)
}

impl PolicyParams {
    pub fn init<R: Rng + ?Sized>(config: &PolicyConfig, rng: &mut R) -> PolicyParams {
        let c = config;
        let mut ps = ParamSet::new();
        let cin = c.map_n + c.map_r;
        ps.insert("map.conv.w", uniform(&[3, 3, cin, MAP_CONV_CHANNELS], 9 * cin, rng));
        ps.insert("map.conv.b", Array::zeros(&[MAP_CONV_CHANNELS]));
        ps.insert("map.bn.gamma", Array::full(&[MAP_CONV_CHANNELS], 1.0));
        ps.insert("map.bn.beta", Array::zeros(&[MAP_CONV_CHANNELS]));
        ps.insert_buffer("map.bn.mean", Array::zeros(&[MAP_CONV_CHANNELS]));
        ps.insert_buffer("map.bn.var", Array::full(&[MAP_CONV_CHANNELS], 1.0));
        ps.insert("map.fc.w", uniform(&[c.pooled_map_len(), c.embed], c.pooled_map_len(), rng));
        ps.insert("map.fc.b", Array::zeros(&[c.embed]));
        let mut cin = c.ego_channels;
        for (l, &cout) in EGO_WIDTHS.iter().enumerate() {
            ps.insert(&format!("ego.{}.w", l), uniform(&[3, 3, cin, cout], 9 * cin, rng));
            ps.insert(&format!("ego.{}.b", l), Array::zeros(&[cout]));
            cin = cout;
        }
        ps.insert("ego.fc.w", uniform(&[c.ego_feature_len(), c.embed], c.ego_feature_len(), rng));
        ps.insert("ego.fc.b", Array::zeros(&[c.embed]));
        ps.insert("target.w", uniform(&[c.num_targets, c.embed], c.num_targets, rng));
        ps.insert("target.b", Array::zeros(&[c.embed]));
        let cell = RecurrentCellParams::random(c.core_input(), c.hidden, rng);
        ps.insert("core.w_input", cell.w_input);
        ps.insert("core.w_hidden", cell.w_hidden);
        ps.insert("core.bias", cell.bias);
        ps.insert("head.w", uniform(&[c.hidden, NUM_ACTIONS], c.hidden, rng).map(|x| x * 0.1));
        ps.insert("head.b", Array::zeros(&[NUM_ACTIONS]));
        PolicyParams {
            config: config.clone(),
            params: ps,
        }
    }

    pub fn zeroed(&self) -> PolicyParams {
        let mut out = self.clone();
        for id in 0..out.params.len() {
            if out.params.is_trainable(id) {
                out.params.value_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> PolicyVars<'_> {
        PolicyVars {
            config: &self.config,
            params: &self.params,
            bound: self.params.bind(tape, trainable),
        }
    }

    /// Folds batch statistics into the running mean and variance buffers.
    pub fn update_bn_stats(&mut self, stats: &[(Vec<f64>, Vec<f64>)]) {
        for (mean, var) in stats {
            for (name, batch) in [("map.bn.mean", mean), ("map.bn.var", var)] {
                let id = self.params.id(name).expect("bn buffer");
                for (r, b) in self.params.value_mut(id).data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
        }
    }
}

pub struct PolicyVars<'a> {
    pub config: &'a PolicyConfig,
    params: &'a ParamSet,
    pub bound: Bound,
}

/// Training mode enables dropout and batch statistics.
pub enum Mode<'r, R: Rng> {
    Train(&'r mut R),
    Eval,
}

/// Recurrent core state `(h, c)`.
#[derive(Clone, Copy, Debug)]
pub struct CoreState {
    pub h: Var,
    pub c: Var,
}

impl CoreState {
    pub fn zeros(tape: &mut Tape, hidden: usize) -> CoreState {
        CoreState {
            h: tape.constant(Array::zeros(&[hidden])),
            c: tape.constant(Array::zeros(&[hidden])),
        }
    }
}

/// Per-step inputs; `map` (`[u, v, n]`) and `belief` (`[u, v, r]`) usually
/// come from the mapper on the same tape.
pub struct PolicyInputs<'a> {
    pub map: Var,
    pub belief: Var,
    /// `[h, w, channels]` egocentric stack.
    pub ego: &'a Array,
    pub target: usize,
    pub collision: bool,
}

pub struct PolicyOutput {
    pub costs: Var,
    pub state: CoreState,
    /// Batch statistics of the map encoder (training mode only).
    pub bn_stats: Option<(Vec<f64>, Vec<f64>)>,
}

impl PolicyVars<'_> {
    fn var(&self, name: &str) -> Var {
        self.bound
            .var(self.params.id(name).unwrap_or_else(|| panic!("missing policy parameter `{}`", name)))
    }

    fn conv(&self, tape: &mut Tape, x: Var, name: &str, stride: usize) -> Result<Var> {
        let y = tape.conv2d(x, self.var(&format!("{}.w", name)), 1, stride)?;
        Ok(tape.add_bias(y, self.var(&format!("{}.b", name)))?)
    }

    fn check_finite(tape: &Tape, v: Var, what: &str) -> Result<()> {
        if tape.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn forward<R: Rng>(&self, tape: &mut Tape, inputs: &PolicyInputs, state: CoreState, mode: &mut Mode<R>) -> Result<PolicyOutput> {
        let c = self.config;
        if inputs.target >= c.num_targets {
            return Err(Error::Shape(format!("target {} outside {} target classes", inputs.target, c.num_targets)));
        }
        // Map and belief encoder.
        let mb = tape.concat(&[inputs.map, inputs.belief])?;
        let x = self.conv(tape, mb, "map.conv", 1)?;
        let (gamma, beta) = (self.var("map.bn.gamma"), self.var("map.bn.beta"));
        let (x, bn_stats) = match mode {
            Mode::Train(_) => {
                let (y, mean, var) = tape.batch_norm_train(x, gamma, beta)?;
                (y, Some((mean, var)))
            }
            Mode::Eval => {
                let mean = self.params.get("map.bn.mean").expect("bn buffer").data().to_vec();
                let var = self.params.get("map.bn.var").expect("bn buffer").data().to_vec();
                (tape.batch_norm_eval(x, gamma, beta, &mean, &var)?, None)
            }
        };
        let x = tape.relu(x)?;
        let x = tape.maxpool_2x2(x)?;
        let len = tape.value(x).len();
        let x = tape.reshape(x, &[len])?;
        let x = linear(tape, x, self.var("map.fc.w"), self.var("map.fc.b"))?;
        let mut map_emb = tape.relu(x)?;
        if let Mode::Train(rng) = mode {
            if c.dropout > 0.0 {
                let keep = 1.0 - c.dropout;
                let mask: Vec<f64> = (0..c.embed).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
                map_emb = tape.mul_const(map_emb, &Array::from_vec(mask))?;
            }
        }
        Self::check_finite(tape, map_emb, "map embedding")?;

        // Egocentric encoder.
        let ego_emb = if c.use_ego {
            let mut x = tape.constant(inputs.ego.clone());
            for l in 0..EGO_WIDTHS.len() {
                let y = self.conv(tape, x, &format!("ego.{}", l), 2)?;
                x = tape.relu(y)?;
            }
            let len = tape.value(x).len();
            let x = tape.reshape(x, &[len])?;
            let x = linear(tape, x, self.var("ego.fc.w"), self.var("ego.fc.b"))?;
            tape.relu(x)?
        } else {
            tape.constant(Array::zeros(&[c.embed]))
        };
        Self::check_finite(tape, ego_emb, "egocentric embedding")?;

        let onehot = tape.constant(Array::one_hot(c.num_targets, inputs.target));
        let t = linear(tape, onehot, self.var("target.w"), self.var("target.b"))?;
        let target_emb = tape.relu(t)?;
        let bit = tape.constant(Array::from_vec(vec![inputs.collision as u8 as f64]));

        let x = tape.concat(&[map_emb, ego_emb, target_emb, bit])?;
        let cell = CellVars {
            w_input: self.var("core.w_input"),
            w_hidden: self.var("core.w_hidden"),
            bias: self.var("core.bias"),
        };
        let (h, cs) = lstm_step(tape, cell, x, state.h, state.c)?;
        let costs = linear(tape, h, self.var("head.w"), self.var("head.b"))?;
        Self::check_finite(tape, costs, "action costs")?;
        Ok(PolicyOutput {
            costs,
            state: CoreState { h, c: cs },
            bn_stats,
        })
    }
}

/// Egocentric input stack: RGB, segmentation one-hot and detection masks
/// along the channel axis.
pub fn ego_stack(obs: &Observation) -> Array {
    let (h, w) = (obs.height, obs.width);
    let (cs, cd) = (obs.num_seg_labels, obs.num_det_classes);
    let ch = 3 + cs + cd;
    let mut out = vec![0.0; h * w * ch];
    for p in 0..h * w {
        let dst = &mut out[p * ch..(p + 1) * ch];
        dst[..3].copy_from_slice(&obs.rgb[p * 3..p * 3 + 3]);
        dst[3 + obs.segmentation[p]] = 1.0;
        for k in 0..cd {
            dst[3 + cs + k] = obs.detections[p * cd + k] as f64;
        }
    }
    Array::new(&[h, w, ch], out).expect("ego stack shape")
}

/// Supervision cost of taking `action` at `pose`: -2 when it reaches a goal
/// pose, +1 on collision, otherwise -1 / 0 / +1 as the distance to the
/// target shrinks, stays or grows.
pub fn cost_targets(graph: &EnvGraph, pose: Pose, action: Action, target_class: usize) -> Result<f64> {
    let d = graph.distance(pose, target_class)?;
    if d == UNREACHABLE {
        return Err(worldsim::Error::Unreachable {
            class: target_class,
            pose: pose.to_string(),
        }
        .into());
    }
    let (next, collided) = graph.step(pose, action)?;
    let dn = graph.distance(next, target_class)?;
    Ok(if dn == 0 && !collided {
        -2.0
    } else if collided {
        1.0
    } else {
        match dn.cmp(&d) {
            std::cmp::Ordering::Less => -1.0,
            std::cmp::Ordering::Equal => 0.0,
            std::cmp::Ordering::Greater => 1.0,
        }
    })
}

/// Cost targets for all actions in `Action::ALL` order.
pub fn cost_vector(graph: &EnvGraph, pose: Pose, target_class: usize) -> Result<[f64; NUM_ACTIONS]> {
    let mut out = [0.0; NUM_ACTIONS];
    for a in Action::ALL {
        out[a.index()] = cost_targets(graph, pose, a, target_class)?;
    }
    Ok(out)
}

/// `(1 / (T |A|)) sum_t sum_a |y - y_hat|`.
pub fn nav_loss(tape: &mut Tape, predicted: &[Var], targets: &[[f64; NUM_ACTIONS]]) -> Result<Var> {
    if predicted.is_empty() || predicted.len() != targets.len() {
        return Err(Error::Shape(format!("{} predictions for {} targets", predicted.len(), targets.len())));
    }
    let all = if predicted.len() == 1 { predicted[0] } else { tape.concat(predicted)? };
    let flat: Vec<f64> = targets.iter().flatten().copied().collect();
    Ok(tape.l1_loss(all, &Array::from_vec(flat))?)
}

/// `softmax(-costs / temperature)`.
pub fn action_probabilities(costs: &[f64], temperature: f64) -> Vec<f64> {
    let z: Vec<f64> = costs.iter().map(|c| -c / temperature).collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Samples an action from the softmax over negated costs.
pub fn select_action<R: Rng + ?Sized>(costs: &[f64], rng: &mut R, temperature: f64) -> Action {
    let p = action_probabilities(costs, temperature);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return Action::ALL[i];
        }
    }
    Action::ALL[p.len() - 1]
}

impl PolicyParams {
    /// Writes the weights to `path` and the policy config to `path.json`.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.params.save(path)?;
        let mut side = path.as_os_str().to_owned();
        side.push(".json");
        std::fs::write(side, serde_json::to_string_pretty(&self.config)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<PolicyParams> {
        let mut side = path.as_os_str().to_owned();
        side.push(".json");
        let config: PolicyConfig = serde_json::from_str(&std::fs::read_to_string(side)?)?;
        let mut out = PolicyParams::init(&config, &mut rand::rngs::mock::StepRng::new(0, 0));
        out.params.load_values_from(&ParamSet::load(path)?)?;
        Ok(out)
    }
}
