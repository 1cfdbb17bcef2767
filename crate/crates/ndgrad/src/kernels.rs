//! Raw numeric kernels on row-major slices. The tape wraps these with shape
//! checks and gradient bookkeeping.

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub pad: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        let ho = (self.h + 2 * self.pad - self.k) / self.stride + 1;
        let wo = (self.w + 2 * self.pad - self.k) / self.stride + 1;
        (ho, wo)
    }

    /// Calls `f(out_cell, in_cell, tap)` for every valid (output, kernel tap) pair.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = self.out_hw();
        let pad = self.pad as isize;
        for oy in 0..ho {
            for ox in 0..wo {
                let o = oy * wo + ox;
                for ky in 0..self.k {
                    let iy = (oy * self.stride + ky) as isize - pad;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.k {
                        let ix = (ox * self.stride + kx) as isize - pad;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        f(o, iy as usize * self.w + ix as usize, ky * self.k + kx);
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(g: &ConvGeom, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let mut out = vec![0.0; ho * wo * g.cout];
    let (cin, cout) = (g.cin, g.cout);
    g.for_each_tap(|o, i, t| {
        let orow = &mut out[o * cout..(o + 1) * cout];
        let irow = &input[i * cin..(i + 1) * cin];
        let kblock = &kernel[t * cin * cout..(t + 1) * cin * cout];
        for (ci, &x) in irow.iter().enumerate() {
            if x != 0.0 {
                axpy(orow, x, &kblock[ci * cout..(ci + 1) * cout]);
            }
        }
    });
    out
}

pub fn conv2d_backward_input(g: &ConvGeom, grad_out: &[f64], kernel: &[f64]) -> Vec<f64> {
    let mut gin = vec![0.0; g.h * g.w * g.cin];
    let (cin, cout) = (g.cin, g.cout);
    g.for_each_tap(|o, i, t| {
        let grow = &grad_out[o * cout..(o + 1) * cout];
        let kblock = &kernel[t * cin * cout..(t + 1) * cin * cout];
        let girow = &mut gin[i * cin..(i + 1) * cin];
        for (ci, gi) in girow.iter_mut().enumerate() {
            *gi += dot(grow, &kblock[ci * cout..(ci + 1) * cout]);
        }
    });
    gin
}

pub fn conv2d_backward_kernel(g: &ConvGeom, grad_out: &[f64], input: &[f64]) -> Vec<f64> {
    let mut gk = vec![0.0; g.k * g.k * g.cin * g.cout];
    let (cin, cout) = (g.cin, g.cout);
    g.for_each_tap(|o, i, t| {
        let grow = &grad_out[o * cout..(o + 1) * cout];
        let irow = &input[i * cin..(i + 1) * cin];
        let kblock = &mut gk[t * cin * cout..(t + 1) * cin * cout];
        for (ci, &x) in irow.iter().enumerate() {
            if x != 0.0 {
                axpy(&mut kblock[ci * cout..(ci + 1) * cout], x, grow);
            }
        }
    });
    gk
}

/// Geometry shared by dense correlation and weighted placement: a `tu x tv`
/// template (odd extents) slid over a `u x v` field with its center cell on
/// every field cell, zero outside the field.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlideGeom {
    pub u: usize,
    pub v: usize,
    pub tu: usize,
    pub tv: usize,
    pub n: usize,
    pub r: usize,
}

impl SlideGeom {
    /// Range of anchor indices `i` for which `i + a - center` lands inside `0..len`.
    #[inline]
    fn anchors(len: usize, a: usize, center: usize) -> std::ops::Range<usize> {
        let lo = center.saturating_sub(a);
        let hi = (len + center).saturating_sub(a).min(len);
        lo..hi.max(lo)
    }
}

/// Reorders a `[tu, tv, n, r]` stack into `[tu, tv, r, n]` so that each
/// rotation's feature vector is contiguous.
pub fn stack_to_rotation_major(g: &SlideGeom, stack: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; stack.len()];
    for cell in 0..g.tu * g.tv {
        for ch in 0..g.n {
            for rho in 0..g.r {
                out[(cell * g.r + rho) * g.n + ch] = stack[(cell * g.n + ch) * g.r + rho];
            }
        }
    }
    out
}

pub fn rotation_major_to_stack(g: &SlideGeom, rm: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rm.len()];
    for cell in 0..g.tu * g.tv {
        for rho in 0..g.r {
            for ch in 0..g.n {
                out[(cell * g.n + ch) * g.r + rho] = rm[(cell * g.r + rho) * g.n + ch];
            }
        }
    }
    out
}

fn nonzero_cells(g: &SlideGeom, rm: &[f64]) -> Vec<usize> {
    let block = g.r * g.n;
    (0..g.tu * g.tv).filter(|&c| rm[c * block..(c + 1) * block].iter().any(|&x| x != 0.0)).collect()
}

/// `scores[i, j, rho] = sum_{a, b} <field[i+a-cu, j+b-cv, :], tmpl[a, b, rho, :]>`.
pub fn correlate(g: &SlideGeom, field: &[f64], tmpl_rm: &[f64]) -> Vec<f64> {
    let (cu, cv) = (g.tu / 2, g.tv / 2);
    let mut scores = vec![0.0; g.u * g.v * g.r];
    for cell in nonzero_cells(g, tmpl_rm) {
        let (a, b) = (cell / g.tv, cell % g.tv);
        let tblock = &tmpl_rm[cell * g.r * g.n..(cell + 1) * g.r * g.n];
        for i in SlideGeom::anchors(g.u, a, cu) {
            let x = i + a - cu;
            for j in SlideGeom::anchors(g.v, b, cv) {
                let y = j + b - cv;
                let fvec = &field[(x * g.v + y) * g.n..(x * g.v + y + 1) * g.n];
                let srow = &mut scores[(i * g.v + j) * g.r..(i * g.v + j + 1) * g.r];
                for (rho, s) in srow.iter_mut().enumerate() {
                    *s += dot(fvec, &tblock[rho * g.n..(rho + 1) * g.n]);
                }
            }
        }
    }
    scores
}

/// `out[x, y, :] = sum_{i, j, rho} w[i, j, rho] * tmpl[x-i+cu, y-j+cv, rho, :]`.
pub fn place(g: &SlideGeom, tmpl_rm: &[f64], weights: &[f64]) -> Vec<f64> {
    let (cu, cv) = (g.tu / 2, g.tv / 2);
    let mut out = vec![0.0; g.u * g.v * g.n];
    for cell in nonzero_cells(g, tmpl_rm) {
        let (a, b) = (cell / g.tv, cell % g.tv);
        let tblock = &tmpl_rm[cell * g.r * g.n..(cell + 1) * g.r * g.n];
        for i in SlideGeom::anchors(g.u, a, cu) {
            let x = i + a - cu;
            for j in SlideGeom::anchors(g.v, b, cv) {
                let y = j + b - cv;
                let wrow = &weights[(i * g.v + j) * g.r..(i * g.v + j + 1) * g.r];
                let orow = &mut out[(x * g.v + y) * g.n..(x * g.v + y + 1) * g.n];
                for (rho, &w) in wrow.iter().enumerate() {
                    if w != 0.0 {
                        axpy(orow, w, &tblock[rho * g.n..(rho + 1) * g.n]);
                    }
                }
            }
        }
    }
    out
}

/// Template-side gradient shared by both operations:
/// `gt[a, b, rho, :] = sum_{i, j} w[i, j, rho] * field[i+a-cu, j+b-cv, :]`.
pub fn template_grad(g: &SlideGeom, weights: &[f64], field: &[f64]) -> Vec<f64> {
    let (cu, cv) = (g.tu / 2, g.tv / 2);
    let mut gt = vec![0.0; g.tu * g.tv * g.r * g.n];
    for a in 0..g.tu {
        for b in 0..g.tv {
            let cell = a * g.tv + b;
            let gblock = &mut gt[cell * g.r * g.n..(cell + 1) * g.r * g.n];
            for i in SlideGeom::anchors(g.u, a, cu) {
                let x = i + a - cu;
                for j in SlideGeom::anchors(g.v, b, cv) {
                    let y = j + b - cv;
                    let fvec = &field[(x * g.v + y) * g.n..(x * g.v + y + 1) * g.n];
                    let wrow = &weights[(i * g.v + j) * g.r..(i * g.v + j + 1) * g.r];
                    for (rho, &w) in wrow.iter().enumerate() {
                        if w != 0.0 {
                            axpy(&mut gblock[rho * g.n..(rho + 1) * g.n], w, fvec);
                        }
                    }
                }
            }
        }
    }
    gt
}

/// Sparse resampling taps: for each output cell, `(source cell, weight)` pairs.
pub type Taps = Vec<Vec<(usize, f64)>>;

/// Taps rotating a `tu x tv` grid counter-clockwise (first axis toward the
/// second) by `angle_deg` about its center cell. Multiples of 90 degrees are
/// exact permutations; other angles use bilinear interpolation with zero fill.
pub fn rotation_taps(tu: usize, tv: usize, angle_deg: f64) -> Taps {
    let (cu, cv) = ((tu / 2) as f64, (tv / 2) as f64);
    let quarter = angle_deg.rem_euclid(360.0) / 90.0;
    let exact = (quarter - quarter.round()).abs() < 1e-12;
    let mut taps = Vec::with_capacity(tu * tv);
    for a in 0..tu {
        for b in 0..tv {
            let (da, db) = (a as f64 - cu, b as f64 - cv);
            // source = R(-angle) * offset
            let (sa, sb) = if exact {
                match (quarter.round() as i64).rem_euclid(4) {
                    0 => (da, db),
                    1 => (db, -da),
                    2 => (-da, -db),
                    _ => (-db, da),
                }
            } else {
                let t = angle_deg.to_radians();
                let (s, c) = t.sin_cos();
                (c * da + s * db, -s * da + c * db)
            };
            let (pa, pb) = (sa + cu, sb + cv);
            let mut cell = Vec::with_capacity(4);
            if exact {
                let (ia, ib) = (pa.round() as isize, pb.round() as isize);
                if ia >= 0 && ib >= 0 && (ia as usize) < tu && (ib as usize) < tv {
                    cell.push((ia as usize * tv + ib as usize, 1.0));
                }
            } else {
                let (fa, fb) = (pa.floor(), pb.floor());
                let (wa, wb) = (pa - fa, pb - fb);
                for (oa, ob, w) in [
                    (0, 0, (1.0 - wa) * (1.0 - wb)),
                    (1, 0, wa * (1.0 - wb)),
                    (0, 1, (1.0 - wa) * wb),
                    (1, 1, wa * wb),
                ] {
                    let (ia, ib) = (fa as isize + oa, fb as isize + ob);
                    if w > 1e-14 && ia >= 0 && ib >= 0 && (ia as usize) < tu && (ib as usize) < tv {
                        cell.push((ia as usize * tv + ib as usize, w));
                    }
                }
            }
            taps.push(cell);
        }
    }
    taps
}

/// Applies per-rotation taps to a `[cells, n]` grid, producing `[cells, n, r]`.
pub fn rotate_apply(taps: &[Taps], input: &[f64], n: usize) -> Vec<f64> {
    let r = taps.len();
    let cells = input.len() / n;
    let mut out = vec![0.0; cells * n * r];
    for (rho, rt) in taps.iter().enumerate() {
        for (o, tl) in rt.iter().enumerate() {
            for &(src, w) in tl {
                for ch in 0..n {
                    out[(o * n + ch) * r + rho] += w * input[src * n + ch];
                }
            }
        }
    }
    out
}

pub fn rotate_backward(taps: &[Taps], grad_out: &[f64], n: usize) -> Vec<f64> {
    let r = taps.len();
    let cells = grad_out.len() / (n * r);
    let mut gin = vec![0.0; cells * n];
    for (rho, rt) in taps.iter().enumerate() {
        for (o, tl) in rt.iter().enumerate() {
            for &(src, w) in tl {
                for ch in 0..n {
                    gin[src * n + ch] += w * grad_out[(o * n + ch) * r + rho];
                }
            }
        }
    }
    gin
}

/// `[m, k] x [k, n] -> [m, n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &x) in a[i * k..(i + 1) * k].iter().enumerate() {
            if x != 0.0 {
                axpy(orow, x, &b[p * n..(p + 1) * n]);
            }
        }
    }
    out
}

/// `grad_a = grad_out x b^T`.
pub fn matmul_grad_a(grad_out: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut ga = vec![0.0; m * k];
    for i in 0..m {
        let grow = &grad_out[i * n..(i + 1) * n];
        for p in 0..k {
            ga[i * k + p] = dot(grow, &b[p * n..(p + 1) * n]);
        }
    }
    ga
}

/// `grad_b = a^T x grad_out`.
pub fn matmul_grad_b(grad_out: &[f64], a: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut gb = vec![0.0; k * n];
    for i in 0..m {
        let grow = &grad_out[i * n..(i + 1) * n];
        for (p, &x) in a[i * k..(i + 1) * k].iter().enumerate() {
            if x != 0.0 {
                axpy(&mut gb[p * n..(p + 1) * n], x, grow);
            }
        }
    }
    gb
}
