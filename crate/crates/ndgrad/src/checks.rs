//! Finite-difference gradient suite covering every differentiable kernel.

use std::rc::Rc;

use rand::rngs::StdRng;
use rand::SeedableRng;

use crate::array::Array;
use crate::error::Result;
use crate::gradcheck::grad_check;
use crate::kernels;
use crate::nn::{lstm_step, CellVars};
use crate::tape::{Tape, Var};

/// Step used for the central differences.
pub const FD_EPS: f64 = 1e-6;

type Case = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Reduces any tensor to a scalar through a fixed random projection so every
/// output coordinate contributes to the checked gradient.
fn project(t: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let w = Array::random_uniform(t.value(v).shape(), 1.0, &mut StdRng::seed_from_u64(seed ^ 0x9e37));
    let m = t.mul_const(v, &w)?;
    t.sum(m)
}

fn case(name: &'static str, seed: u64) -> (Case, Vec<Array>) {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut rnd = |shape: &[usize]| Array::random_uniform(shape, 1.0, &mut rng);
    match name {
        "conv2d" => (
            Box::new(move |t, v| {
                let y = t.conv2d(v[0], v[1], 1, 1)?;
                project(t, y, seed)
            }),
            vec![rnd(&[5, 5, 2]), rnd(&[3, 3, 2, 3])],
        ),
        "conv2d_stride2" => (
            Box::new(move |t, v| {
                let y = t.conv2d(v[0], v[1], 1, 2)?;
                project(t, y, seed)
            }),
            vec![rnd(&[6, 5, 3]), rnd(&[3, 3, 3, 2])],
        ),
        "add_bias" => (
            Box::new(move |t, v| {
                let y = t.add_bias(v[0], v[1])?;
                let y = t.tanh(y)?;
                project(t, y, seed)
            }),
            vec![rnd(&[4, 3]), rnd(&[3])],
        ),
        "add_sub_mul" => (
            Box::new(move |t, v| {
                let a = t.add(v[0], v[1])?;
                let s = t.sub(a, v[2])?;
                let m = t.mul(s, v[0])?;
                project(t, m, seed)
            }),
            vec![rnd(&[7]), rnd(&[7]), rnd(&[7])],
        ),
        "scale_mul_const" => (
            Box::new(move |t, v| {
                let s = t.scale(v[0], -1.7)?;
                let mask = Array::random_uniform(&[3, 4], 1.0, &mut StdRng::seed_from_u64(seed + 1));
                let m = t.mul_const(s, &mask)?;
                project(t, m, seed)
            }),
            vec![rnd(&[3, 4])],
        ),
        "relu" => (
            Box::new(move |t, v| {
                let y = t.relu(v[0])?;
                project(t, y, seed)
            }),
            vec![rnd(&[10])],
        ),
        "sigmoid_tanh" => (
            Box::new(move |t, v| {
                let a = t.sigmoid(v[0])?;
                let b = t.tanh(a)?;
                project(t, b, seed)
            }),
            vec![rnd(&[10]).map(|x| 3.0 * x)],
        ),
        "matmul" => (
            Box::new(move |t, v| {
                let y = t.matmul(v[0], v[1])?;
                project(t, y, seed)
            }),
            vec![rnd(&[3, 4]), rnd(&[4, 5])],
        ),
        "concat_slice_reshape" => (
            Box::new(move |t, v| {
                let c = t.concat(&[v[0], v[1]])?;
                let s = t.slice_last(c, 1, 3)?;
                let r = t.reshape(s, &[6])?;
                let q = t.mul(r, r)?;
                project(t, q, seed)
            }),
            vec![rnd(&[2, 2]), rnd(&[2, 3])],
        ),
        "maxpool_2x2" => (
            Box::new(move |t, v| {
                let y = t.maxpool_2x2(v[0])?;
                project(t, y, seed)
            }),
            vec![rnd(&[5, 4, 2])],
        ),
        "softmax" => (
            Box::new(move |t, v| {
                let y = t.softmax(v[0], 1)?;
                let z = t.softmax(v[0], 2)?;
                let s = t.add(y, z)?;
                project(t, s, seed)
            }),
            vec![rnd(&[3, 4]).map(|x| 2.0 * x)],
        ),
        "cross_entropy" => (
            Box::new(move |t, v| {
                let p = t.softmax(v[0], 2)?;
                let mut target = Array::zeros(&[3, 3]);
                target.data_mut()[(seed % 9) as usize] = 1.0;
                t.cross_entropy(p, &target)
            }),
            vec![rnd(&[3, 3])],
        ),
        "l1_loss" => (
            Box::new(move |t, v| {
                let target = Array::random_uniform(&[6], 1.0, &mut StdRng::seed_from_u64(seed + 7));
                t.l1_loss(v[0], &target)
            }),
            vec![rnd(&[6])],
        ),
        "correlate_stack" => (
            Box::new(move |t, v| {
                let y = t.correlate_stack(v[0], v[1])?;
                project(t, y, seed)
            }),
            vec![rnd(&[5, 6, 2]), rnd(&[3, 3, 2, 2])],
        ),
        "place_weighted" => (
            Box::new(move |t, v| {
                let y = t.place_weighted(v[0], v[1])?;
                project(t, y, seed)
            }),
            vec![rnd(&[3, 3, 2, 2]), rnd(&[5, 4, 2])],
        ),
        "rotate_stack" => (
            Box::new(move |t, v| {
                let taps = Rc::new((0..3).map(|k| kernels::rotation_taps(5, 5, 40.0 * k as f64)).collect::<Vec<_>>());
                let y = t.rotate_stack(v[0], taps)?;
                project(t, y, seed)
            }),
            vec![rnd(&[5, 5, 2])],
        ),
        "bin_max" => (
            Box::new(move |t, v| {
                let y = t.bin_max(v[0], &[(0, 0), (1, 0), (2, 2), (3, 2), (4, 3)], 4)?;
                project(t, y, seed)
            }),
            vec![rnd(&[5, 3])],
        ),
        "batch_norm" => (
            Box::new(move |t, v| {
                let (y, _, _) = t.batch_norm_train(v[0], v[1], v[2])?;
                let y = t.tanh(y)?;
                let mean = [0.1, -0.2];
                let var = [0.5, 1.5];
                let z = t.batch_norm_eval(v[0], v[1], v[2], &mean, &var)?;
                let s = t.add(y, z)?;
                project(t, s, seed)
            }),
            vec![rnd(&[3, 3, 2]), rnd(&[2]), rnd(&[2])],
        ),
        "lstm_step" => (
            Box::new(move |t, v| {
                let cell = CellVars {
                    w_input: v[0],
                    w_hidden: v[1],
                    bias: v[2],
                };
                let (h, c) = lstm_step(t, cell, v[3], v[4], v[5])?;
                let (h2, c2) = lstm_step(t, cell, v[3], h, c)?;
                let s = t.add(h2, c2)?;
                project(t, s, seed)
            }),
            vec![rnd(&[3, 8]), rnd(&[2, 8]), rnd(&[8]), rnd(&[4, 3]), rnd(&[4, 2]), rnd(&[4, 2])],
        ),
        other => panic!("unknown gradient case `{}`", other),
    }
}

pub const KERNEL_CASES: &[&str] = &[
    "conv2d",
    "conv2d_stride2",
    "add_bias",
    "add_sub_mul",
    "scale_mul_const",
    "relu",
    "sigmoid_tanh",
    "matmul",
    "concat_slice_reshape",
    "maxpool_2x2",
    "softmax",
    "cross_entropy",
    "l1_loss",
    "correlate_stack",
    "place_weighted",
    "rotate_stack",
    "bin_max",
    "batch_norm",
    "lstm_step",
];

/// Worst relative gradient error per kernel over `seeds`.
pub fn kernel_gradient_suite(seeds: std::ops::Range<u64>) -> Result<Vec<(&'static str, f64)>> {
    KERNEL_CASES
        .iter()
        .map(|&name| {
            let mut worst: f64 = 0.0;
            for seed in seeds.clone() {
                let (f, inputs) = case(name, seed);
                worst = worst.max(grad_check(f, &inputs, FD_EPS)?);
            }
            Ok((name, worst))
        })
        .collect()
}
