//! Composite layers built from tape primitives.

use rand::Rng;

use crate::array::Array;
use crate::error::{contract, Result};
use crate::tape::{Tape, Var};

/// Recurrent cell weights. Gate blocks are laid out along the last axis in
/// the order input, forget, output, candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentCellParams {
    pub w_input: Array,
    pub w_hidden: Array,
    pub bias: Array,
}

impl RecurrentCellParams {
    pub fn zeros(d_in: usize, d_h: usize) -> Self {
        RecurrentCellParams {
            w_input: Array::zeros(&[d_in, 4 * d_h]),
            w_hidden: Array::zeros(&[d_h, 4 * d_h]),
            bias: Array::zeros(&[4 * d_h]),
        }
    }

    /// Uniform init scaled by `1/sqrt(d_h)`; forget-gate bias starts at 1.
    pub fn random<R: Rng + ?Sized>(d_in: usize, d_h: usize, rng: &mut R) -> Self {
        let s = 1.0 / (d_h as f64).sqrt();
        let mut bias = Array::zeros(&[4 * d_h]);
        for b in &mut bias.data_mut()[d_h..2 * d_h] {
            *b = 1.0;
        }
        RecurrentCellParams {
            w_input: Array::random_uniform(&[d_in, 4 * d_h], s, rng),
            w_hidden: Array::random_uniform(&[d_h, 4 * d_h], s, rng),
            bias,
        }
    }

    pub fn d_in(&self) -> usize {
        self.w_input.shape()[0]
    }

    pub fn d_h(&self) -> usize {
        self.w_hidden.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.w_input.len() + self.w_hidden.len() + self.bias.len()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> CellVars {
        let leaf = |t: &mut Tape, a: &Array| if trainable { t.param(a.clone()) } else { t.constant(a.clone()) };
        CellVars {
            w_input: leaf(tape, &self.w_input),
            w_hidden: leaf(tape, &self.w_hidden),
            bias: leaf(tape, &self.bias),
        }
    }
}

/// Tape handles for a recurrent cell's weights.
#[derive(Clone, Copy, Debug)]
pub struct CellVars {
    pub w_input: Var,
    pub w_hidden: Var,
    pub bias: Var,
}

/// One recurrent (LSTM) step. `x` is `[d_in]` or a batch `[N, d_in]`; `h` and
/// `c` match it with `d_h` columns. Weights are shared across the batch rows.
pub fn lstm_step(tape: &mut Tape, cell: CellVars, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    let d_h = tape.value(cell.w_hidden).shape()[0];
    if tape.value(h).shape() != tape.value(c).shape() {
        return Err(contract("lstm_step", "hidden and cell state shapes differ"));
    }
    if tape.value(h).shape().last() != Some(&d_h) {
        return Err(contract("lstm_step", format!("state width must be {}", d_h)));
    }
    let zx = tape.matmul(x, cell.w_input)?;
    let zh = tape.matmul(h, cell.w_hidden)?;
    let z = tape.add(zx, zh)?;
    let z = tape.add_bias(z, cell.bias)?;
    let gi = tape.slice_last(z, 0, d_h)?;
    let gf = tape.slice_last(z, d_h, d_h)?;
    let go = tape.slice_last(z, 2 * d_h, d_h)?;
    let gg = tape.slice_last(z, 3 * d_h, d_h)?;
    let i = tape.sigmoid(gi)?;
    let f = tape.sigmoid(gf)?;
    let o = tape.sigmoid(go)?;
    let g = tape.tanh(gg)?;
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let tc = tape.tanh(c_next)?;
    let h_next = tape.mul(o, tc)?;
    Ok((h_next, c_next))
}

/// `x W + b` for `x` of shape `[d_in]` or `[N, d_in]`.
pub fn linear(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let y = tape.matmul(x, weight)?;
    tape.add_bias(y, bias)
}
