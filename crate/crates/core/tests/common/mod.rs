#![allow(dead_code)]

use ndgrad::Array;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn max_abs_diff(a: &Array, b: &Array) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Nested-loop same-padded 3x3 convolution on `[h, w, cin]` with `[3, 3, cin, cout]` kernels.
pub fn naive_conv_same(x: &Array, k: &Array, bias: &Array) -> Array {
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kk, cout) = (k.shape()[0], k.shape()[3]);
    let pad = (kk / 2) as isize;
    let mut out = Array::zeros(&[h, w, cout]);
    for oy in 0..h {
        for ox in 0..w {
            for co in 0..cout {
                let mut s = bias.data()[co];
                for ky in 0..kk {
                    for kx in 0..kk {
                        let iy = oy as isize + ky as isize - pad;
                        let ix = ox as isize + kx as isize - pad;
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

/// Rotates a `[tu, tu, n]` grid counter-clockwise (first axis toward the
/// second) by `quarters` quarter turns about its centre: the value at
/// offset `(a, b)` moves to `(-b, a)` per turn.
pub fn rotate_quarters(g: &Array, quarters: usize) -> Array {
    let (tu, tv, n) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    assert_eq!(tu, tv);
    let c = (tu / 2) as isize;
    let mut cur = g.clone();
    for _ in 0..quarters % 4 {
        let mut next = Array::zeros(&[tu, tv, n]);
        for a in 0..tu {
            for b in 0..tv {
                let (da, db) = (a as isize - c, b as isize - c);
                let (na, nb) = ((-db + c) as usize, (da + c) as usize);
                for k in 0..n {
                    next.set(&[na, nb, k], cur.get(&[a, b, k]));
                }
            }
        }
        cur = next;
    }
    cur
}

/// Adds `w * tmpl` centred at `(i, j)` into `out` (`[u, v, n]`), clipping at the borders.
pub fn paste(tmpl: &Array, i: usize, j: usize, w: f64, out: &mut Array) {
    let (u, v) = (out.shape()[0], out.shape()[1]);
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

/// Inner product of `tmpl` centred at `(i, j)` with the zero-padded map.
pub fn window_score(map: &Array, tmpl: &Array, i: usize, j: usize) -> f64 {
    let (u, v, n) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let (tu, tv) = (tmpl.shape()[0], tmpl.shape()[1]);
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
    s
}

/// Slice `rho` of a `[u', v', n, r]` stack.
pub fn rotation_slice(stack: &Array, rho: usize) -> Array {
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

/// Per-source BFS from each pose to the nearest goal pose of `class`,
/// walking forward edges of the pose graph, independent of the library's
/// reverse-graph search.
pub fn bfs_distances(graph: &worldsim::EnvGraph, class: usize) -> std::collections::HashMap<worldsim::Pose, u32> {
    use std::collections::{HashMap, HashSet, VecDeque};
    let goals: HashSet<worldsim::Pose> = graph.goal_poses(class).unwrap().into_iter().collect();
    let mut out = HashMap::new();
    for node in 0..graph.num_nodes() {
        let start = graph.pose(node);
        let mut seen = HashSet::from([start]);
        let mut queue = VecDeque::from([(start, 0u32)]);
        let mut found = worldsim::UNREACHABLE;
        while let Some((p, d)) = queue.pop_front() {
            if goals.contains(&p) {
                found = d;
                break;
            }
            for a in worldsim::Action::ALL {
                let (q, _) = graph.step(p, a).unwrap();
                if seen.insert(q) {
                    queue.push_back((q, d + 1));
                }
            }
        }
        out.insert(start, found);
    }
    out
}
