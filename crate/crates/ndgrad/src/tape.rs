use std::rc::Rc;

use crate::array::Array;
use crate::error::{contract, Error, Result};
use crate::kernels::{self, ConvGeom, SlideGeom, Taps};

/// Probability floor applied inside `cross_entropy`.
pub const PROB_CLIP: f64 = 1e-12;
const NORMALIZATION_TOL: f64 = 1e-6;
const BN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    AddBias {
        input: Var,
        bias: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst {
        input: Var,
        factor: Rc<Vec<f64>>,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Concat {
        inputs: Vec<Var>,
        widths: Vec<usize>,
    },
    Slice {
        input: Var,
        start: usize,
        len: usize,
        width: usize,
    },
    Reshape(Var),
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Softmax {
        input: Var,
        group: usize,
    },
    CrossEntropy {
        pred: Var,
        target: Vec<f64>,
    },
    L1 {
        pred: Var,
        target: Vec<f64>,
    },
    Sum(Var),
    Correlate {
        field: Var,
        stack: Var,
        geom: SlideGeom,
        tmpl_rm: Vec<f64>,
    },
    Place {
        stack: Var,
        weights: Var,
        geom: SlideGeom,
        tmpl_rm: Vec<f64>,
    },
    Rotate {
        input: Var,
        taps: Rc<Vec<Taps>>,
        n: usize,
    },
    BinMax {
        input: Var,
        winners: Vec<usize>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Affine {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
}

/// Record of executed operations. Values are computed eagerly on push;
/// [`Tape::backward`] walks the record in reverse.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to the leaves of a tape.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Grads {
    /// Gradient for `var`, or `None` when the scalar does not depend on it.
    pub fn get(&self, var: Var) -> Option<Array> {
        self.grads[var.0]
            .as_ref()
            .map(|g| Array::new(&self.shapes[var.0], g.clone()).expect("gradient shape"))
    }

    /// Gradient for `var`, zeros when it does not contribute.
    pub fn get_or_zeros(&self, var: Var) -> Array {
        self.get(var).unwrap_or_else(|| Array::zeros(&self.shapes[var.0]))
    }
}

fn same_shape(op: &'static str, a: &Array, b: &Array) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn last_dim(a: &Array) -> usize {
    a.shape().last().copied().unwrap_or(1)
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op_name: &'static str, value: Array, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Array) -> Var {
        assert!(value.is_finite(), "constant leaf contains non-finite values");
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Array) -> Var {
        assert!(value.is_finite(), "parameter leaf contains non-finite values");
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies the value of `v` into a fresh constant leaf (gradient stop).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Cross-correlation style convolution on `[h, w, c_in]` input with
    /// `[k, k, c_in, c_out]` kernels.
    pub fn conv2d(&mut self, input: Var, kernel: Var, pad: usize, stride: usize) -> Result<Var> {
        let (x, k) = (self.value(input), self.value(kernel));
        if x.ndim() != 3 || k.ndim() != 4 {
            return Err(contract("conv2d", "expected [h, w, c_in] input and [k, k, c_in, c_out] kernels"));
        }
        let ks = k.shape();
        if ks[0] != ks[1] || ks[0] % 2 == 0 {
            return Err(contract("conv2d", format!("kernel must be square and odd, got {}x{}", ks[0], ks[1])));
        }
        if stride == 0 {
            return Err(contract("conv2d", "stride must be >= 1"));
        }
        if ks[2] != x.shape()[2] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                expected: vec![x.shape()[2]],
                got: vec![ks[2]],
            });
        }
        if x.shape()[0] + 2 * pad < ks[0] || x.shape()[1] + 2 * pad < ks[0] {
            return Err(contract("conv2d", "kernel larger than padded input"));
        }
        let geom = ConvGeom {
            h: x.shape()[0],
            w: x.shape()[1],
            cin: ks[2],
            cout: ks[3],
            k: ks[0],
            pad,
            stride,
        };
        let (ho, wo) = geom.out_hw();
        let out = kernels::conv2d_forward(&geom, x.data(), k.data());
        let value = Array::new(&[ho, wo, geom.cout], out)?;
        let ng = self.ng(input) || self.ng(kernel);
        self.push("conv2d", value, Op::Conv2d { input, kernel, geom }, ng)
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(input), self.value(bias));
        let c = last_dim(x);
        b.require_shape("add_bias", &[c])?;
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, bi) in row.iter_mut().zip(b.data()) {
                *o += bi;
            }
        }
        let ng = self.ng(input) || self.ng(bias);
        self.push("add_bias", out, Op::AddBias { input, bias }, ng)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(name, x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Array::new(x.shape(), data)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(name, value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    /// Elementwise product with a constant array of the same shape (masks, dropout).
    pub fn mul_const(&mut self, input: Var, factor: &Array) -> Result<Var> {
        let x = self.value(input);
        same_shape("mul_const", x, factor)?;
        let data = x.data().iter().zip(factor.data()).map(|(p, q)| p * q).collect();
        let value = Array::new(x.shape(), data)?;
        let ng = self.ng(input);
        let factor = Rc::new(factor.data().to_vec());
        self.push("mul_const", value, Op::MulConst { input, factor }, ng)
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let value = self.value(input).map(|x| x * factor);
        let ng = self.ng(input);
        self.push("scale", value, Op::Scale { input, factor }, ng)
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(|x| x.max(0.0));
        let ng = self.ng(input);
        self.push("relu", value, Op::Relu(input), ng)
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(|x| 1.0 / (1.0 + (-x).exp()));
        let ng = self.ng(input);
        self.push("sigmoid", value, Op::Sigmoid(input), ng)
    }

    pub fn tanh(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(f64::tanh);
        let ng = self.ng(input);
        self.push("tanh", value, Op::Tanh(input), ng)
    }

    /// `[m, k] x [k, n]`. A 1-D left operand is treated as a single row.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (m, k) = match x.shape() {
            [k] => (1, *k),
            [m, k] => (*m, *k),
            s => return Err(contract("matmul", format!("left operand must be 1-D or 2-D, got {:?}", s))),
        };
        let n = match y.shape() {
            [kk, n] if *kk == k => *n,
            s => {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    expected: vec![k, 0],
                    got: s.to_vec(),
                })
            }
        };
        let out = kernels::matmul(x.data(), y.data(), m, k, n);
        let shape = if x.ndim() == 1 { vec![n] } else { vec![m, n] };
        let value = Array::new(&shape, out)?;
        let ng = self.ng(a) || self.ng(b);
        self.push("matmul", value, Op::Matmul { a, b, m, k, n }, ng)
    }

    /// Concatenation along the last axis; leading extents must agree.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(contract("concat", "no inputs"));
        }
        let lead: Vec<usize> = {
            let s = self.value(inputs[0]).shape();
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.value(v).shape();
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    expected: lead.clone(),
                    got: s.to_vec(),
                });
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for row in 0..rows {
            for (&v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[row * w..(row + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Array::new(&shape, out)?;
        let ng = inputs.iter().any(|&v| self.ng(v));
        self.push(
            "concat",
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                widths,
            },
            ng,
        )
    }

    /// `input[..., start..start+len]`.
    pub fn slice_last(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(input);
        let width = last_dim(x);
        if x.ndim() == 0 || start + len > width {
            return Err(contract("slice_last", format!("range {}..{} outside width {}", start, start + len, width)));
        }
        let out: Vec<f64> = x.data().chunks(width).flat_map(|row| row[start..start + len].iter().copied()).collect();
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Array::new(&shape, out)?;
        let ng = self.ng(input);
        self.push("slice_last", value, Op::Slice { input, start, len, width }, ng)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        let ng = self.ng(input);
        self.push("reshape", value, Op::Reshape(input), ng)
    }

    /// 2x2 max pooling with stride 2 on `[h, w, c]`; odd trailing rows/columns are dropped.
    pub fn maxpool_2x2(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.ndim() != 3 || x.shape()[0] < 2 || x.shape()[1] < 2 {
            return Err(contract("maxpool_2x2", format!("expected [h>=2, w>=2, c], got {:?}", x.shape())));
        }
        let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; ho * wo * c];
        let mut argmax = vec![0usize; ho * wo * c];
        let d = x.data();
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let mut best = (2 * oy * w + 2 * ox) * c + ch;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                        if d[idx] > d[best] {
                            best = idx;
                        }
                    }
                    let o = (oy * wo + ox) * c + ch;
                    out[o] = d[best];
                    argmax[o] = best;
                }
            }
        }
        let value = Array::new(&[ho, wo, c], out)?;
        let ng = self.ng(input);
        self.push("maxpool_2x2", value, Op::MaxPool2 { input, argmax }, ng)
    }

    /// Softmax normalizing jointly over the last `axes` dimensions
    /// (`axes == ndim` normalizes over everything).
    pub fn softmax(&mut self, input: Var, axes: usize) -> Result<Var> {
        let x = self.value(input);
        if axes == 0 || axes > x.ndim().max(1) {
            return Err(contract("softmax", format!("cannot reduce {} trailing axes of {:?}", axes, x.shape())));
        }
        let group: usize = x.shape()[x.ndim() - axes.min(x.ndim())..].iter().product();
        let mut out = x.data().to_vec();
        for chunk in out.chunks_mut(group.max(1)) {
            let m = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in chunk.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in chunk.iter_mut() {
                *v /= s;
            }
        }
        let value = Array::new(x.shape(), out)?;
        let ng = self.ng(input);
        self.push("softmax", value, Op::Softmax { input, group: group.max(1) }, ng)
    }

    /// `-sum_k t_k log(max(p_k, PROB_CLIP))` for a single distribution `pred`.
    pub fn cross_entropy(&mut self, pred: Var, target: &Array) -> Result<Var> {
        let p = self.value(pred);
        same_shape("cross_entropy", p, target)?;
        if p.data().iter().any(|&x| x < 0.0) || (p.sum() - 1.0).abs() > NORMALIZATION_TOL {
            return Err(contract(
                "cross_entropy",
                format!("prediction is not a normalized distribution (sum {})", p.sum()),
            ));
        }
        if target.data().iter().any(|&x| x < 0.0) || (target.sum() - 1.0).abs() > NORMALIZATION_TOL {
            return Err(contract("cross_entropy", "target must sum to 1"));
        }
        let loss: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .filter(|(_, &t)| t != 0.0)
            .map(|(&pk, &t)| -t * pk.max(PROB_CLIP).ln())
            .sum();
        let ng = self.ng(pred);
        let target = target.data().to_vec();
        self.push("cross_entropy", Array::scalar(loss), Op::CrossEntropy { pred, target }, ng)
    }

    /// Mean absolute error against a constant target.
    pub fn l1_loss(&mut self, pred: Var, target: &Array) -> Result<Var> {
        let p = self.value(pred);
        same_shape("l1_loss", p, target)?;
        if p.is_empty() {
            return Err(contract("l1_loss", "empty prediction"));
        }
        let loss = p.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64;
        let ng = self.ng(pred);
        let target = target.data().to_vec();
        self.push("l1_loss", Array::scalar(loss), Op::L1 { pred, target }, ng)
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).sum();
        let ng = self.ng(input);
        self.push("sum", Array::scalar(s), Op::Sum(input), ng)
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let n = self.value(input).len().max(1) as f64;
        let s = self.sum(input)?;
        self.scale(s, 1.0 / n)
    }

    /// Sums scalars (or same-shape arrays).
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars.split_first().ok_or_else(|| contract("add_all", "no inputs"))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    fn slide_geom(&self, op: &'static str, field: &[usize], stack: &[usize]) -> Result<SlideGeom> {
        if field.len() != 3 || stack.len() != 4 {
            return Err(contract(op, "expected a [u, v, n] field and a [u', v', n, r] stack"));
        }
        let (u, v, n) = (field[0], field[1], field[2]);
        let (tu, tv, tn, r) = (stack[0], stack[1], stack[2], stack[3]);
        if tu % 2 == 0 || tv % 2 == 0 {
            return Err(contract(op, format!("template extents must be odd, got {}x{}", tu, tv)));
        }
        if tu > u || tv > v {
            return Err(contract(op, format!("template {}x{} larger than map {}x{}", tu, tv, u, v)));
        }
        if tn != n {
            return Err(Error::ShapeMismatch {
                op,
                expected: vec![n],
                got: vec![tn],
            });
        }
        Ok(SlideGeom { u, v, tu, tv, n, r })
    }

    /// Dense correlation of every rotation of `stack` (`[u', v', n, r]`) over the
    /// zero-padded `map` (`[u, v, n]`), template centered on each cell. Output `[u, v, r]`.
    pub fn correlate_stack(&mut self, map: Var, stack: Var) -> Result<Var> {
        let geom = self.slide_geom("correlate", self.value(map).shape(), self.value(stack).shape())?;
        let tmpl_rm = kernels::stack_to_rotation_major(&geom, self.value(stack).data());
        let scores = kernels::correlate(&geom, self.value(map).data(), &tmpl_rm);
        let value = Array::new(&[geom.u, geom.v, geom.r], scores)?;
        let ng = self.ng(map) || self.ng(stack);
        self.push(
            "correlate",
            value,
            Op::Correlate {
                field: map,
                stack,
                geom,
                tmpl_rm,
            },
            ng,
        )
    }

    /// Single-template dense correlation: `[u, v, n]` x `[u', v', n]` -> `[u, v]`.
    pub fn correlate_dense(&mut self, map: Var, template: Var) -> Result<Var> {
        let ts = self.value(template).shape().to_vec();
        if ts.len() != 3 {
            return Err(contract("correlate", "template must be [u', v', n]"));
        }
        let stack = self.reshape(template, &[ts[0], ts[1], ts[2], 1])?;
        let scores = self.correlate_stack(map, stack)?;
        let (u, v) = (self.value(scores).shape()[0], self.value(scores).shape()[1]);
        self.reshape(scores, &[u, v])
    }

    /// Weighted placement: each rotation of `stack` pasted centered at every
    /// cell, scaled by `weights[i, j, rho]`, summed. Output `[u, v, n]`.
    pub fn place_weighted(&mut self, stack: Var, weights: Var) -> Result<Var> {
        let ws = self.value(weights).shape().to_vec();
        let ss = self.value(stack).shape().to_vec();
        if ws.len() != 3 || ss.len() != 4 {
            return Err(contract("place_weighted", "expected a [u', v', n, r] stack and [u, v, r] weights"));
        }
        if ws[2] != ss[3] {
            return Err(Error::ShapeMismatch {
                op: "place_weighted",
                expected: vec![ss[3]],
                got: vec![ws[2]],
            });
        }
        let geom = self.slide_geom("place_weighted", &[ws[0], ws[1], ss[2]], &ss)?;
        let tmpl_rm = kernels::stack_to_rotation_major(&geom, self.value(stack).data());
        let out = kernels::place(&geom, &tmpl_rm, self.value(weights).data());
        let value = Array::new(&[geom.u, geom.v, geom.n], out)?;
        let ng = self.ng(stack) || self.ng(weights);
        self.push("place_weighted", value, Op::Place { stack, weights, geom, tmpl_rm }, ng)
    }

    /// Applies precomputed rotation taps (one tap set per rotation) to a
    /// `[u', v', n]` grid, producing `[u', v', n, r]`.
    pub fn rotate_stack(&mut self, input: Var, taps: Rc<Vec<Taps>>) -> Result<Var> {
        let x = self.value(input);
        if x.ndim() != 3 {
            return Err(contract("rotate_stack", "expected [u', v', n]"));
        }
        let (tu, tv, n) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if taps.is_empty() || taps.iter().any(|t| t.len() != tu * tv) {
            return Err(contract("rotate_stack", "taps do not match grid extents"));
        }
        let out = kernels::rotate_apply(&taps, x.data(), n);
        let value = Array::new(&[tu, tv, n, taps.len()], out)?;
        let ng = self.ng(input);
        self.push("rotate_stack", value, Op::Rotate { input, taps, n }, ng)
    }

    /// Max-pools rows of `input` (`[p, c]`) into `cells` output rows according
    /// to `(source row, cell)` assignments. Cells without assignments are zero.
    pub fn bin_max(&mut self, input: Var, assignment: &[(usize, usize)], cells: usize) -> Result<Var> {
        let x = self.value(input);
        if x.ndim() != 2 {
            return Err(contract("bin_max", "expected [p, c] input"));
        }
        let (p, c) = (x.shape()[0], x.shape()[1]);
        let mut out = vec![0.0; cells * c];
        let mut winners = vec![usize::MAX; cells * c];
        let d = x.data();
        for &(src, cell) in assignment {
            if src >= p || cell >= cells {
                return Err(contract("bin_max", format!("assignment ({}, {}) out of range", src, cell)));
            }
            for ch in 0..c {
                let o = cell * c + ch;
                let val = d[src * c + ch];
                if winners[o] == usize::MAX || val > out[o] {
                    out[o] = val;
                    winners[o] = src * c + ch;
                }
            }
        }
        let value = Array::new(&[cells, c], out)?;
        let ng = self.ng(input);
        self.push("bin_max", value, Op::BinMax { input, winners }, ng)
    }

    /// Batch normalization over all leading positions of a `[..., c]` input,
    /// using the batch statistics. Returns the output and the batch mean and
    /// (biased) variance per channel.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let x = self.value(input);
        let c = last_dim(x);
        self.value(gamma).require_shape("batch_norm", &[c])?;
        self.value(beta).require_shape("batch_norm", &[c])?;
        let m = x.len() / c;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for row in x.data().chunks(c) {
            for (mu, v) in mean.iter_mut().zip(row) {
                *mu += v / m as f64;
            }
        }
        for row in x.data().chunks(c) {
            for ((s, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - mu) * (v - mu) / m as f64;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (out, xhat) = self.bn_apply(input, gamma, beta, &mean, &inv_std);
        let ng = self.ng(input) || self.ng(gamma) || self.ng(beta);
        let v = self.push(
            "batch_norm",
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )?;
        Ok((v, mean, var))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, input: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64]) -> Result<Var> {
        let c = last_dim(self.value(input));
        self.value(gamma).require_shape("batch_norm", &[c])?;
        self.value(beta).require_shape("batch_norm", &[c])?;
        if mean.len() != c || var.len() != c {
            return Err(contract("batch_norm", "running statistics do not match channel count"));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (out, xhat) = self.bn_apply(input, gamma, beta, mean, &inv_std);
        let ng = self.ng(input) || self.ng(gamma) || self.ng(beta);
        self.push(
            "batch_norm",
            out,
            Op::Affine {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    fn bn_apply(&self, input: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: &[f64]) -> (Array, Vec<f64>) {
        let x = self.value(input);
        let c = mean.len();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = x.data().to_vec();
        let mut out = x.clone();
        for (row, orow) in xhat.chunks_mut(c).zip(out.data_mut().chunks_mut(c)) {
            for ch in 0..c {
                row[ch] = (row[ch] - mean[ch]) * inv_std[ch];
                orow[ch] = g[ch] * row[ch] + b[ch];
            }
        }
        (out, xhat)
    }

    /// Reverse pass from scalar `loss`. Only leaves keep their gradients.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(contract("backward", "loss must be a scalar"));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteGradient {
                        name: format!("tape value #{}", i),
                    });
                }
            }
        }
        Ok(Grads {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contribution) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, geom } => {
                if self.ng(*input) {
                    let gi = kernels::conv2d_backward_input(geom, g, self.value(*kernel).data());
                    self.accumulate(grads, *input, gi);
                }
                if self.ng(*kernel) {
                    let gk = kernels::conv2d_backward_kernel(geom, g, self.value(*input).data());
                    self.accumulate(grads, *kernel, gk);
                }
            }
            Op::AddBias { input, bias } => {
                let c = self.value(*bias).len();
                if self.ng(*bias) {
                    let mut gb = vec![0.0; c];
                    for row in g.chunks(c) {
                        for (a, b) in gb.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                    self.accumulate(grads, *bias, gb);
                }
                self.accumulate(grads, *input, g.to_vec());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.iter().zip(y).map(|(p, q)| p * q).collect());
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, g.iter().zip(x).map(|(p, q)| p * q).collect());
                }
            }
            Op::MulConst { input, factor } => {
                self.accumulate(grads, *input, g.iter().zip(factor.iter()).map(|(p, q)| p * q).collect());
            }
            Op::Scale { input, factor } => {
                self.accumulate(grads, *input, g.iter().map(|x| x * factor).collect());
            }
            Op::Relu(input) => {
                self.accumulate(grads, *input, g.iter().zip(out).map(|(&gi, &y)| if y > 0.0 { gi } else { 0.0 }).collect());
            }
            Op::Sigmoid(input) => {
                self.accumulate(grads, *input, g.iter().zip(out).map(|(gi, y)| gi * y * (1.0 - y)).collect());
            }
            Op::Tanh(input) => {
                self.accumulate(grads, *input, g.iter().zip(out).map(|(gi, y)| gi * (1.0 - y * y)).collect());
            }
            Op::Matmul { a, b, m, k, n } => {
                if self.ng(*a) {
                    let ga = kernels::matmul_grad_a(g, self.value(*b).data(), *m, *k, *n);
                    self.accumulate(grads, *a, ga);
                }
                if self.ng(*b) {
                    let gb = kernels::matmul_grad_b(g, self.value(*a).data(), *m, *k, *n);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Concat { inputs, widths } => {
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (&v, &w) in inputs.iter().zip(widths) {
                    if self.ng(v) {
                        let mut gv = Vec::with_capacity(rows * w);
                        for row in 0..rows {
                            gv.extend_from_slice(&g[row * total + offset..row * total + offset + w]);
                        }
                        self.accumulate(grads, v, gv);
                    }
                    offset += w;
                }
            }
            Op::Slice { input, start, len, width } => {
                let rows = g.len() / len;
                let mut gi = vec![0.0; rows * width];
                for row in 0..rows {
                    gi[row * width + start..row * width + start + len].copy_from_slice(&g[row * len..(row + 1) * len]);
                }
                self.accumulate(grads, *input, gi);
            }
            Op::Reshape(input) => self.accumulate(grads, *input, g.to_vec()),
            Op::MaxPool2 { input, argmax } => {
                let mut gi = vec![0.0; self.value(*input).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    gi[src] += g[o];
                }
                self.accumulate(grads, *input, gi);
            }
            Op::Softmax { input, group } => {
                let mut gi = vec![0.0; g.len()];
                for ((gc, yc), oc) in g.chunks(*group).zip(out.chunks(*group)).zip(gi.chunks_mut(*group)) {
                    let s: f64 = gc.iter().zip(yc).map(|(a, b)| a * b).sum();
                    for ((o, &gy), &y) in oc.iter_mut().zip(gc).zip(yc) {
                        *o = y * (gy - s);
                    }
                }
                self.accumulate(grads, *input, gi);
            }
            Op::CrossEntropy { pred, target } => {
                let p = self.value(*pred).data();
                let gi = p
                    .iter()
                    .zip(target)
                    .map(|(&pk, &t)| if t != 0.0 && pk >= PROB_CLIP { -g[0] * t / pk } else { 0.0 })
                    .collect();
                self.accumulate(grads, *pred, gi);
            }
            Op::L1 { pred, target } => {
                let p = self.value(*pred).data();
                let scale = g[0] / p.len() as f64;
                let gi = p
                    .iter()
                    .zip(target)
                    .map(|(a, b)| {
                        let d = a - b;
                        if d > 0.0 {
                            scale
                        } else if d < 0.0 {
                            -scale
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, *pred, gi);
            }
            Op::Sum(input) => {
                self.accumulate(grads, *input, vec![g[0]; self.value(*input).len()]);
            }
            Op::Correlate { field, stack, geom, tmpl_rm } => {
                if self.ng(*field) {
                    self.accumulate(grads, *field, kernels::place(geom, tmpl_rm, g));
                }
                if self.ng(*stack) {
                    let gt = kernels::template_grad(geom, g, self.value(*field).data());
                    self.accumulate(grads, *stack, kernels::rotation_major_to_stack(geom, &gt));
                }
            }
            Op::Place { stack, weights, geom, tmpl_rm } => {
                if self.ng(*weights) {
                    self.accumulate(grads, *weights, kernels::correlate(geom, g, tmpl_rm));
                }
                if self.ng(*stack) {
                    let gt = kernels::template_grad(geom, self.value(*weights).data(), g);
                    self.accumulate(grads, *stack, kernels::rotation_major_to_stack(geom, &gt));
                }
            }
            Op::Rotate { input, taps, n } => {
                self.accumulate(grads, *input, kernels::rotate_backward(taps, g, *n));
            }
            Op::BinMax { input, winners } => {
                let mut gi = vec![0.0; self.value(*input).len()];
                for (o, &src) in winners.iter().enumerate() {
                    if src != usize::MAX {
                        gi[src] += g[o];
                    }
                }
                self.accumulate(grads, *input, gi);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = inv_std.len();
                let m = (g.len() / c) as f64;
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (grow, xrow) in g.chunks(c).zip(xhat.chunks(c)) {
                    for ch in 0..c {
                        sum_g[ch] += grow[ch];
                        sum_gx[ch] += grow[ch] * xrow[ch];
                    }
                }
                if self.ng(*input) {
                    let mut gi = vec![0.0; g.len()];
                    for ((orow, grow), xrow) in gi.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)) {
                        for ch in 0..c {
                            orow[ch] = gam[ch] * inv_std[ch] / m * (m * grow[ch] - sum_g[ch] - xrow[ch] * sum_gx[ch]);
                        }
                    }
                    self.accumulate(grads, *input, gi);
                }
                self.accumulate(grads, *gamma, sum_gx);
                self.accumulate(grads, *beta, sum_g);
            }
            Op::Affine {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = inv_std.len();
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                let mut gi = vec![0.0; g.len()];
                for ((orow, grow), xrow) in gi.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)) {
                    for ch in 0..c {
                        sum_g[ch] += grow[ch];
                        sum_gx[ch] += grow[ch] * xrow[ch];
                        orow[ch] = grow[ch] * gam[ch] * inv_std[ch];
                    }
                }
                self.accumulate(grads, *input, gi);
                self.accumulate(grads, *gamma, sum_gx);
                self.accumulate(grads, *beta, sum_g);
            }
        }
    }
}
