//! Kernels against brute-force reference implementations.

use synwarp_core::kernels::{attention, conv, trilinear_sample};
use synwarp_core::rng::Rng;
use synwarp_core::Tensor64;

const CASES: u64 = 60;
const TOL: f64 = 1e-6;

fn max_diff(a: &Tensor64, b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.data().iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Value at integer voxel `(z, y, x)`, zero outside the grid.
fn voxel(f: &Tensor64, c: usize, z: i64, y: i64, x: i64) -> f64 {
    let s = f.shape();
    if z < 0 || y < 0 || x < 0 || z >= s[1] as i64 || y >= s[2] as i64 || x >= s[3] as i64 {
        return 0.0;
    }
    f.get(&[c, z as usize, y as usize, x as usize])
}

/// Pixel position of a normalized coordinate on an axis with `n` cells.
fn unnormalize(c: f64, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        (c + 1.0) * (n - 1) as f64 / 2.0
    }
}

fn naive_trilinear(f: &Tensor64, coords: &Tensor64) -> Vec<f64> {
    let s = f.shape();
    let (ch, d, h, w) = (s[0], s[1], s[2], s[3]);
    let pts: Vec<&[f64]> = coords.data().chunks(3).collect();
    let mut out = vec![0.0; ch * pts.len()];
    for c in 0..ch {
        for (p, xyz) in pts.iter().enumerate() {
            let mut acc = 0.0;
            // Degenerate axes hold a single slice that covers [-1, 1].
            let axis = |v: f64, n: usize| -> Vec<(i64, f64)> {
                if n == 1 {
                    return vec![(0, if v.abs() <= 1.0 { 1.0 } else { 0.0 })];
                }
                let u = unnormalize(v, n);
                let f0 = u.floor();
                vec![(f0 as i64, 1.0 - (u - f0)), (f0 as i64 + 1, u - f0)]
            };
            for (z, wz) in axis(xyz[2], d) {
                for (y, wy) in axis(xyz[1], h) {
                    for (x, wx) in axis(xyz[0], w) {
                        acc += wz * wy * wx * voxel(f, c, z, y, x);
                    }
                }
            }
            out[c * pts.len() + p] = acc;
        }
    }
    out
}

#[test]
pub fn trilinear_matches_brute_force() {
    for case in 0..CASES {
        let mut rng = Rng::new(case);
        let dims = [1 + rng.below(3), 1 + rng.below(4), 2 + rng.below(4), 2 + rng.below(4)];
        let f: Tensor64 = rng.uniform_tensor(&dims, -1.0, 1.0);
        let out_dims = [1 + rng.below(2), 1 + rng.below(3), 1 + rng.below(3), 3];
        // Coordinates reach past the border so zero padding is exercised.
        let coords: Tensor64 = rng.uniform_tensor(&out_dims, -1.3, 1.3);
        let got = trilinear_sample(&f, &coords).unwrap();
        assert_eq!(got.shape(), [dims[0], out_dims[0], out_dims[1], out_dims[2]]);
        let err = max_diff(&got, &naive_trilinear(&f, &coords));
        assert!(err <= TOL, "case {case}: {err}");
    }
}

#[test]
pub fn trilinear_reads_grid_nodes_exactly() {
    let mut rng = Rng::new(99);
    let f: Tensor64 = rng.uniform_tensor(&[2, 3, 4, 5], -1.0, 1.0);
    let grid = synwarp_core::kernels::grid_coords::<f64>(3, 4, 5).unwrap();
    let got = trilinear_sample(&f, &grid).unwrap();
    assert!(max_diff(&got, f.data()) < 1e-12);
}

fn naive_conv2d(x: &Tensor64, k: &Tensor64, b: &Tensor64, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, ks) = (k.shape()[0], k.shape()[2]);
    let oh = (h + 2 * pad - ks) / stride + 1;
    let ow = (w + 2 * pad - ks) / stride + 1;
    let mut out = Vec::with_capacity(co * oh * ow);
    for o in 0..co {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = b.data()[o];
                for c in 0..ci {
                    for u in 0..ks {
                        for v in 0..ks {
                            let y = (i * stride + u) as i64 - pad as i64;
                            let xx = (j * stride + v) as i64 - pad as i64;
                            if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                acc += k.get(&[o, c, u, v]) * x.get(&[c, y as usize, xx as usize]);
                            }
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    (vec![co, oh, ow], out)
}

fn naive_conv3d(x: &Tensor64, k: &Tensor64, b: &Tensor64, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let s = x.shape();
    let (ci, d, h, w) = (s[0], s[1], s[2], s[3]);
    let (co, ks) = (k.shape()[0], k.shape()[2]);
    let ext = |n: usize| (n + 2 * pad - ks) / stride + 1;
    let (od, oh, ow) = (ext(d), ext(h), ext(w));
    let inside = |v: i64, n: usize| v >= 0 && (v as usize) < n;
    let mut out = Vec::with_capacity(co * od * oh * ow);
    for o in 0..co {
        for a in 0..od {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b.data()[o];
                    for c in 0..ci {
                        for t in 0..ks {
                            for u in 0..ks {
                                for v in 0..ks {
                                    let z = (a * stride + t) as i64 - pad as i64;
                                    let y = (i * stride + u) as i64 - pad as i64;
                                    let xx = (j * stride + v) as i64 - pad as i64;
                                    if inside(z, d) && inside(y, h) && inside(xx, w) {
                                        acc += k.get(&[o, c, t, u, v]) * x.get(&[c, z as usize, y as usize, xx as usize]);
                                    }
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    (vec![co, od, oh, ow], out)
}

#[test]
pub fn conv2d_matches_brute_force() {
    for case in 0..CASES {
        let mut rng = Rng::new(1000 + case);
        let (ci, co) = (1 + rng.below(3), 1 + rng.below(3));
        let ks = [1, 3, 5][rng.below(3)];
        let stride = 1 + rng.below(2);
        let pad = rng.below(ks / 2 + 1);
        let (h, w) = (ks + rng.below(5), ks + rng.below(5));
        let x: Tensor64 = rng.uniform_tensor(&[ci, h, w], -1.0, 1.0);
        let k: Tensor64 = rng.uniform_tensor(&[co, ci, ks, ks], -1.0, 1.0);
        let b: Tensor64 = rng.uniform_tensor(&[co], -1.0, 1.0);
        let got = conv(&x, &k, Some(&b), stride, pad).unwrap();
        let (shape, want) = naive_conv2d(&x, &k, &b, stride, pad);
        assert_eq!(got.shape(), shape.as_slice(), "case {case}");
        assert!(max_diff(&got, &want) <= TOL, "case {case}");
    }
}

#[test]
pub fn conv3d_matches_brute_force() {
    for case in 0..CASES {
        let mut rng = Rng::new(2000 + case);
        let (ci, co) = (1 + rng.below(2), 1 + rng.below(3));
        let ks = [1, 3][rng.below(2)];
        let stride = 1 + rng.below(2);
        let pad = rng.below(ks / 2 + 1);
        let dims: Vec<usize> = (0..3).map(|_| ks + rng.below(3)).collect();
        let x: Tensor64 = rng.uniform_tensor(&[ci, dims[0], dims[1], dims[2]], -1.0, 1.0);
        let k: Tensor64 = rng.uniform_tensor(&[co, ci, ks, ks, ks], -1.0, 1.0);
        let b: Tensor64 = rng.uniform_tensor(&[co], -1.0, 1.0);
        let got = conv(&x, &k, Some(&b), stride, pad).unwrap();
        let (shape, want) = naive_conv3d(&x, &k, &b, stride, pad);
        assert_eq!(got.shape(), shape.as_slice(), "case {case}");
        assert!(max_diff(&got, &want) <= TOL, "case {case}");
    }
}

fn naive_attention(q: &Tensor64, k: &Tensor64, v: &Tensor64, scale: f64) -> Vec<f64> {
    let (n, d) = (q.shape()[0], q.shape()[1]);
    let (m, c) = (k.shape()[0], v.shape()[1]);
    let mut out = Vec::with_capacity(n * c);
    for i in 0..n {
        let logits: Vec<f64> = (0..m).map(|j| (0..d).map(|t| q.get(&[i, t]) * k.get(&[j, t])).sum::<f64>() * scale).collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = e.iter().sum();
        for ch in 0..c {
            out.push((0..m).map(|j| e[j] / z * v.get(&[j, ch])).sum());
        }
    }
    out
}

#[test]
pub fn attention_matches_brute_force() {
    for case in 0..CASES {
        let mut rng = Rng::new(3000 + case);
        let (n, m, d, c) = (1 + rng.below(6), 1 + rng.below(6), 1 + rng.below(5), 1 + rng.below(4));
        let q: Tensor64 = rng.uniform_tensor(&[n, d], -2.0, 2.0);
        let k: Tensor64 = rng.uniform_tensor(&[m, d], -2.0, 2.0);
        let v: Tensor64 = rng.uniform_tensor(&[m, c], -1.0, 1.0);
        let scale = 1.0 / (d as f64).sqrt();
        let got = attention(&q, &k, &v, scale).unwrap();
        assert!(max_diff(&got, &naive_attention(&q, &k, &v, scale)) <= TOL, "case {case}");
    }
}
