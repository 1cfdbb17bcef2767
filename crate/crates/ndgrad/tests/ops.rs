use ndgrad::{kernels, lstm_step, Array, Error, RecurrentCellParams, Tape};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Direct nested-loop convolution oracle on HWC input / [k,k,cin,cout] kernels.
fn naive_conv(x: &Array, k: &Array, pad: usize, stride: usize) -> Array {
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kk, cout) = (k.shape()[0], k.shape()[3]);
    let ho = (h + 2 * pad - kk) / stride + 1;
    let wo = (w + 2 * pad - kk) / stride + 1;
    let mut out = Array::zeros(&[ho, wo, cout]);
    for oy in 0..ho {
        for ox in 0..wo {
            for co in 0..cout {
                let mut s = 0.0;
                for ky in 0..kk {
                    for kx in 0..kk {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            s += x.get(&[iy as usize, ix as usize, ci]) * k.get(&[ky, kx, ci, co]);
                        }
                    }
                }
                out.set(&[oy, ox, co], s);
            }
        }
    }
    out
}

/// Exhaustive window-product oracle for same-padded correlation.
fn naive_correlate(map: &Array, tmpl: &Array) -> Array {
    let (u, v, n) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let (tu, tv) = (tmpl.shape()[0], tmpl.shape()[1]);
    let mut out = Array::zeros(&[u, v]);
    for i in 0..u {
        for j in 0..v {
            let mut s = 0.0;
            for a in 0..tu {
                for b in 0..tv {
                    let x = i as isize + a as isize - (tu / 2) as isize;
                    let y = j as isize + b as isize - (tv / 2) as isize;
                    if x < 0 || y < 0 || x >= u as isize || y >= v as isize {
                        continue;
                    }
                    for c in 0..n {
                        s += map.get(&[x as usize, y as usize, c]) * tmpl.get(&[a, b, c]);
                    }
                }
            }
            out.set(&[i, j], s);
        }
    }
    out
}

/// Pastes `tmpl` ([u',v',n]) centered at (i, j) into a zero [u,v,n] map, scaled by w.
fn paste(u: usize, v: usize, tmpl: &Array, i: usize, j: usize, w: f64, out: &mut Array) {
    let (tu, tv, n) = (tmpl.shape()[0], tmpl.shape()[1], tmpl.shape()[2]);
    for a in 0..tu {
        for b in 0..tv {
            let x = i as isize + a as isize - (tu / 2) as isize;
            let y = j as isize + b as isize - (tv / 2) as isize;
            if x < 0 || y < 0 || x >= u as isize || y >= v as isize {
                continue;
            }
            for c in 0..n {
                let idx = [x as usize, y as usize, c];
                let cur = out.get(&idx);
                out.set(&idx, cur + w * tmpl.get(&[a, b, c]));
            }
        }
    }
}

fn rotation_slice(stack: &Array, rho: usize) -> Array {
    let s = stack.shape();
    let mut out = Array::zeros(&[s[0], s[1], s[2]]);
    for a in 0..s[0] {
        for b in 0..s[1] {
            for c in 0..s[2] {
                out.set(&[a, b, c], stack.get(&[a, b, c, rho]));
            }
        }
    }
    out
}

#[test]
fn conv2d_scalar_product() {
    let mut t = Tape::new();
    let x = t.constant(Array::new(&[1, 1, 1], vec![2.0]).unwrap());
    let k = t.constant(Array::new(&[1, 1, 1, 1], vec![3.0]).unwrap());
    let y = t.conv2d(x, k, 0, 1).unwrap();
    assert_eq!(t.value(y).data(), &[6.0]);
}

#[test]
fn conv2d_all_ones_sums() {
    let mut t = Tape::new();
    let x = t.constant(Array::full(&[3, 3, 1], 1.0));
    let k = t.constant(Array::full(&[3, 3, 1, 1], 1.0));
    let y = t.conv2d(x, k, 0, 1).unwrap();
    assert_eq!(t.value(y).shape(), &[1, 1, 1]);
    assert_eq!(t.value(y).data(), &[9.0]);
}

#[test]
fn conv2d_matches_nested_loop_oracle() {
    for (seed, pad, stride, cout) in [(1, 1, 1, 1), (2, 1, 1, 3), (3, 0, 1, 2), (4, 1, 2, 4), (5, 2, 2, 1)] {
        let mut r = rng(seed);
        let x = Array::random_uniform(&[5, 5, 2], 1.0, &mut r);
        let k = Array::random_uniform(&[3, 3, 2, cout], 1.0, &mut r);
        let mut t = Tape::new();
        let (xv, kv) = (t.constant(x.clone()), t.constant(k.clone()));
        let y = t.conv2d(xv, kv, pad, stride).unwrap();
        let oracle = naive_conv(&x, &k, pad, stride);
        assert_eq!(t.value(y).shape(), oracle.shape());
        assert!(t.value(y).max_abs_diff(&oracle) < 1e-12);
    }
}

#[test]
fn conv2d_channel_mismatch_is_error() {
    let mut t = Tape::new();
    let x = t.constant(Array::zeros(&[4, 4, 2]));
    let k = t.constant(Array::zeros(&[3, 3, 3, 1]));
    assert!(matches!(t.conv2d(x, k, 1, 1), Err(Error::ShapeMismatch { .. })));
    let k_even = t.constant(Array::zeros(&[2, 2, 2, 1]));
    assert!(t.conv2d(x, k_even, 1, 1).is_err());
}

#[test]
fn correlate_zero_map_scores_zero() {
    let mut t = Tape::new();
    let m = t.constant(Array::zeros(&[7, 7, 3]));
    let g = t.constant(Array::random_uniform(&[3, 3, 3], 1.0, &mut rng(9)));
    let s = t.correlate_dense(m, g).unwrap();
    assert_eq!(t.value(s).shape(), &[7, 7]);
    assert!(t.value(s).data().iter().all(|&x| x == 0.0));
}

#[test]
fn correlate_unit_template_scales_map() {
    let map = Array::random_uniform(&[3, 3, 1], 1.0, &mut rng(3));
    let mut t = Tape::new();
    let m = t.constant(map.clone());
    let g = t.constant(Array::new(&[1, 1, 1], vec![2.0]).unwrap());
    let s = t.correlate_dense(m, g).unwrap();
    let expected: Vec<f64> = map.data().iter().map(|x| 2.0 * x).collect();
    assert_eq!(t.value(s).data(), &expected[..]);
}

#[test]
fn correlate_even_template_is_error() {
    let mut t = Tape::new();
    let m = t.constant(Array::zeros(&[5, 5, 1]));
    let g = t.constant(Array::zeros(&[2, 3, 1]));
    assert!(t.correlate_dense(m, g).is_err());
}

#[test]
fn correlate_finds_copied_patch() {
    // Nonnegative features make the copy location the unique maximum of the oracle.
    for seed in 0..10u64 {
        let mut r = rng(100 + seed);
        let patch = Array::random_uniform(&[3, 3, 4], 1.0, &mut r).map(|x| x.abs() + 0.1);
        let (ci, cj) = (2 + (seed as usize % 5), 3 + (seed as usize % 3));
        let mut map = Array::zeros(&[9, 10, 4]);
        paste(9, 10, &patch, ci, cj, 1.0, &mut map);
        let mut t = Tape::new();
        let (mv, gv) = (t.constant(map.clone()), t.constant(patch.clone()));
        let s = t.correlate_dense(mv, gv).unwrap();
        let oracle = naive_correlate(&map, &patch);
        assert!(t.value(s).max_abs_diff(&oracle) < 1e-12);
        assert_eq!(oracle.argmax(), ci * 10 + cj);
        assert_eq!(t.value(s).argmax(), ci * 10 + cj);
    }
}

#[test]
fn place_one_hot_pastes_rotation() {
    let mut r = rng(11);
    let stack = Array::random_uniform(&[3, 5, 2, 3], 1.0, &mut r);
    let mut w = Array::zeros(&[6, 7, 3]);
    w.set(&[1, 5, 2], 1.0);
    let mut t = Tape::new();
    let (sv, wv) = (t.constant(stack.clone()), t.constant(w));
    let out = t.place_weighted(sv, wv).unwrap();
    let mut expected = Array::zeros(&[6, 7, 2]);
    paste(6, 7, &rotation_slice(&stack, 2), 1, 5, 1.0, &mut expected);
    assert!(t.value(out).max_abs_diff(&expected) == 0.0);
}

#[test]
fn place_half_weights_average_two_placements() {
    let mut r = rng(12);
    let stack = Array::random_uniform(&[3, 3, 2, 2], 1.0, &mut r);
    let mut w = Array::zeros(&[5, 5, 2]);
    w.set(&[1, 1, 0], 0.5);
    w.set(&[3, 2, 1], 0.5);
    let mut t = Tape::new();
    let (sv, wv) = (t.constant(stack.clone()), t.constant(w));
    let out = t.place_weighted(sv, wv).unwrap();
    let mut a = Array::zeros(&[5, 5, 2]);
    let mut b = Array::zeros(&[5, 5, 2]);
    paste(5, 5, &rotation_slice(&stack, 0), 1, 1, 1.0, &mut a);
    paste(5, 5, &rotation_slice(&stack, 1), 3, 2, 1.0, &mut b);
    let mean: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| 0.5 * (x + y)).collect();
    assert!(t.value(out).max_abs_diff(&Array::new(&[5, 5, 2], mean).unwrap()) < 1e-14);
}

#[test]
fn place_zero_weights_and_axis_mismatch() {
    let mut t = Tape::new();
    let s = t.constant(Array::random_uniform(&[3, 3, 2, 2], 1.0, &mut rng(1)));
    let w = t.constant(Array::zeros(&[4, 4, 2]));
    let out = t.place_weighted(s, w).unwrap();
    assert!(t.value(out).data().iter().all(|&x| x == 0.0));
    let bad = t.constant(Array::zeros(&[4, 4, 3]));
    assert!(matches!(t.place_weighted(s, bad), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn softmax_symmetric_input_is_uniform() {
    let mut t = Tape::new();
    let x = t.constant(Array::zeros(&[3]));
    let p = t.softmax(x, 1).unwrap();
    for &v in t.value(p).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn cross_entropy_cases() {
    let mut t = Tape::new();
    let p = t.constant(Array::from_vec(vec![1.0, 0.0, 0.0]));
    let l = t.cross_entropy(p, &Array::from_vec(vec![1.0, 0.0, 0.0])).unwrap();
    assert!(t.value(l).item().abs() < 1e-12);
    let q = t.constant(Array::from_vec(vec![0.0, 0.0, 1.0]));
    let l = t.cross_entropy(q, &Array::from_vec(vec![1.0, 0.0, 0.0])).unwrap();
    assert!((t.value(l).item() + ndgrad::PROB_CLIP.ln()).abs() < 1e-9);
    let raw = t.constant(Array::from_vec(vec![2.0, 1.0, 0.5]));
    assert!(t.cross_entropy(raw, &Array::from_vec(vec![1.0, 0.0, 0.0])).is_err());
}

#[test]
fn l1_loss_subgradient_at_zero() {
    let mut t = Tape::new();
    let p = t.param(Array::from_vec(vec![1.0, 2.0, -1.0]));
    let l = t.l1_loss(p, &Array::from_vec(vec![1.0, 0.0, 0.0])).unwrap();
    assert!((t.value(l).item() - 1.0).abs() < 1e-15);
    let g = t.backward(l).unwrap().get(p).unwrap();
    assert_eq!(g.data(), &[0.0, 1.0 / 3.0, -1.0 / 3.0]);
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn lstm_zero_params_give_zero_hidden() {
    let cell = RecurrentCellParams::zeros(3, 2);
    assert_eq!(cell.param_count(), 4 * (3 * 2 + 2 * 2 + 2));
    let mut t = Tape::new();
    let cv = cell.bind(&mut t, false);
    let x = t.constant(Array::from_vec(vec![1.0, -2.0, 0.5]));
    let h = t.constant(Array::zeros(&[2]));
    let c = t.constant(Array::zeros(&[2]));
    let (h2, c2) = lstm_step(&mut t, cv, x, h, c).unwrap();
    assert!(t.value(h2).data().iter().all(|&v| v == 0.0));
    assert!(t.value(c2).data().iter().all(|&v| v == 0.0));
}

#[test]
fn lstm_scalar_hand_computation() {
    // d_in = d_h = 1, gate order (i, f, o, g).
    let (wx, wh, b) = ([0.5, -0.3, 0.8, 0.2], [0.1, 0.4, -0.6, 0.7], [0.05, 1.0, -0.1, 0.3]);
    let (x, h, c) = (0.9, -0.4, 0.25);
    let z: Vec<f64> = (0..4).map(|k| wx[k] * x + wh[k] * h + b[k]).collect();
    let c_exp = sigmoid(z[1]) * c + sigmoid(z[0]) * z[3].tanh();
    let h_exp = sigmoid(z[2]) * c_exp.tanh();

    let cell = RecurrentCellParams {
        w_input: Array::new(&[1, 4], wx.to_vec()).unwrap(),
        w_hidden: Array::new(&[1, 4], wh.to_vec()).unwrap(),
        bias: Array::from_vec(b.to_vec()),
    };
    let mut t = Tape::new();
    let cv = cell.bind(&mut t, false);
    let xv = t.constant(Array::from_vec(vec![x]));
    let hv = t.constant(Array::from_vec(vec![h]));
    let cvv = t.constant(Array::from_vec(vec![c]));
    let (h2, c2) = lstm_step(&mut t, cv, xv, hv, cvv).unwrap();
    assert!((t.value(h2).item() - h_exp).abs() < 1e-14);
    assert!((t.value(c2).item() - c_exp).abs() < 1e-14);
}

#[test]
fn maxpool_picks_window_max() {
    let x = Array::new(&[2, 4, 1], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, -1.0, 7.0]).unwrap();
    let mut t = Tape::new();
    let xv = t.param(x);
    let y = t.maxpool_2x2(xv).unwrap();
    assert_eq!(t.value(y).data(), &[5.0, 7.0]);
    let s = t.sum(y).unwrap();
    let g = t.backward(s).unwrap().get(xv).unwrap();
    assert_eq!(g.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
}

#[test]
fn bin_max_pools_assigned_rows() {
    let feats = Array::new(&[3, 2], vec![1.0, 3.0, 2.0, 1.0, 9.0, 9.0]).unwrap();
    let mut t = Tape::new();
    let f = t.constant(feats);
    let out = t.bin_max(f, &[(0, 1), (1, 1)], 3).unwrap();
    assert_eq!(t.value(out).data(), &[0.0, 0.0, 2.0, 3.0, 0.0, 0.0]);
}

#[test]
fn rotation_identity_and_quarter_turn_group() {
    let x = Array::random_uniform(&[5, 5, 3], 1.0, &mut rng(4));
    let taps: Vec<_> = (0..4).map(|k| kernels::rotation_taps(5, 5, 90.0 * k as f64)).collect();
    let stack = kernels::rotate_apply(&taps, x.data(), 3);
    let stack = Array::new(&[5, 5, 3, 4], stack).unwrap();
    assert_eq!(rotation_slice(&stack, 0), x);
    // every quarter turn is a permutation: each tap is a single unit weight
    for t in &taps {
        let mut seen = vec![false; 25];
        for cell in t {
            assert_eq!(cell.len(), 1);
            assert_eq!(cell[0].1, 1.0);
            seen[cell[0].0] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }
    let quarter = vec![kernels::rotation_taps(5, 5, 90.0)];
    let mut cur = x.data().to_vec();
    for _ in 0..4 {
        cur = kernels::rotate_apply(&quarter, &cur, 3);
    }
    assert_eq!(cur, x.data());
}

#[test]
fn quarter_turn_moves_forward_axis_to_negative_first_axis() {
    // A feature one cell ahead (+second axis) lands one cell toward -first axis.
    let mut x = Array::zeros(&[3, 3, 1]);
    x.set(&[1, 2, 0], 1.0);
    let out = kernels::rotate_apply(&[kernels::rotation_taps(3, 3, 90.0)], x.data(), 1);
    let out = Array::new(&[3, 3, 1], out).unwrap();
    assert_eq!(out.get(&[0, 1, 0]), 1.0);
}

#[test]
fn bilinear_round_trip_recovers_affine_field() {
    // Bilinear resampling reproduces affine fields exactly where all taps are inside.
    let (tu, n) = (11usize, 2usize);
    let mut x = Array::zeros(&[tu, tu, n]);
    for a in 0..tu {
        for b in 0..tu {
            x.set(&[a, b, 0], 0.3 * a as f64 - 0.2 * b as f64 + 1.0);
            x.set(&[a, b, 1], -0.1 * a as f64 + 0.4 * b as f64);
        }
    }
    let r = 12;
    for rho in 1..r {
        let ang = 360.0 / r as f64;
        let fwd = vec![kernels::rotation_taps(tu, tu, ang * rho as f64)];
        let back = vec![kernels::rotation_taps(tu, tu, ang * (r - rho) as f64)];
        let once = kernels::rotate_apply(&fwd, x.data(), n);
        let twice = kernels::rotate_apply(&back, &once, n);
        for a in 0..tu {
            for b in 0..tu {
                let (da, db) = (a as f64 - 5.0, b as f64 - 5.0);
                if (da * da + db * db).sqrt() > 3.0 {
                    continue;
                }
                for c in 0..n {
                    let i = (a * tu + b) * n + c;
                    assert!((twice[i] - x.data()[i]).abs() < 1e-6, "rho {} cell ({}, {})", rho, a, b);
                }
            }
        }
    }
}

#[test]
fn non_finite_values_are_errors() {
    let mut t = Tape::new();
    let x = t.constant(Array::from_vec(vec![1e300]));
    let y = t.scale(x, 1e300);
    assert!(matches!(y, Err(Error::NonFinite { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_normalizes_over_reduced_axes(seed in 0u64..10_000, rows in 1usize..5, cols in 1usize..7) {
        let x = Array::random_uniform(&[rows, cols], 30.0, &mut rng(seed));
        let mut t = Tape::new();
        let xv = t.constant(x);
        let p = t.softmax(xv, 1).unwrap();
        for row in t.value(p).data().chunks(cols) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let q = t.softmax(xv, 2).unwrap();
        prop_assert!((t.value(q).sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn correlate_and_place_are_adjoint(seed in 0u64..10_000, u in 3usize..9, v in 3usize..9, half in 0usize..2, n in 1usize..4) {
        let mut r = rng(seed);
        let tu = 2 * half + 1;
        let m = Array::random_uniform(&[u, v, n], 1.0, &mut r);
        let g = Array::random_uniform(&[tu, tu, n], 1.0, &mut r);
        let w = Array::random_uniform(&[u, v], 1.0, &mut r);
        let mut t = Tape::new();
        let (mv, gv) = (t.constant(m.clone()), t.constant(g.clone()));
        let scores = t.correlate_dense(mv, gv).unwrap();
        let lhs = t.value(scores).dot(&w);
        let stack = t.reshape(gv, &[tu, tu, n, 1]).unwrap();
        let wv = t.constant(w.reshape(&[u, v, 1]).unwrap());
        let placed = t.place_weighted(stack, wv).unwrap();
        let rhs = m.dot(t.value(placed));
        prop_assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn reuse_accumulates_per_use_gradients(seed in 0u64..10_000, k in 1usize..5) {
        // f(x) = sum_i <w_i, tanh(x)>: gradient equals the sum of isolated per-use gradients.
        let mut r = rng(seed);
        let x = Array::random_uniform(&[6], 1.0, &mut r);
        let ws: Vec<Array> = (0..k).map(|_| Array::random_uniform(&[6], 1.0, &mut r)).collect();
        let mut t = Tape::new();
        let xv = t.param(x.clone());
        let th = t.tanh(xv).unwrap();
        let mut terms = Vec::new();
        for w in &ws {
            let m = t.mul_const(th, w).unwrap();
            terms.push(t.sum(m).unwrap());
        }
        let total = t.add_all(&terms).unwrap();
        let g_total = t.backward(total).unwrap().get(xv).unwrap();

        let mut g_sum = Array::zeros(&[6]);
        for w in &ws {
            let mut t1 = Tape::new();
            let xv1 = t1.param(x.clone());
            let th1 = t1.tanh(xv1).unwrap();
            let m1 = t1.mul_const(th1, w).unwrap();
            let s1 = t1.sum(m1).unwrap();
            let g1 = t1.backward(s1).unwrap().get(xv1).unwrap();
            for (a, b) in g_sum.data_mut().iter_mut().zip(g1.data()) {
                *a += b;
            }
        }
        prop_assert!(g_total.max_abs_diff(&g_sum) < 1e-12);
    }
}
