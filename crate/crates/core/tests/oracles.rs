//! Fast kernels against direct loop implementations.

mod common;

use common::{assert_close, random_tensor, rng};
use gksnet::kernels;
use gksnet::model::{eval, Similarity};
use gksnet::Tensor;
use rand::Rng;

const TOL: f64 = 1e-12;
const INSTANCES: usize = 120;

fn naive_conv2d(x: &Tensor, k: &Tensor, bias: &Tensor) -> Tensor {
    let (b, h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kk, cout) = (k.shape()[0], k.shape()[3]);
    let p = (kk / 2) as isize;
    let mut out = Tensor::zeros(&[b, h, w, cout]);
    for n in 0..b {
        for i in 0..h {
            for j in 0..w {
                for o in 0..cout {
                    let mut s = bias.data()[o];
                    for di in 0..kk {
                        for dj in 0..kk {
                            let (y, xx) = (i as isize + di as isize - p, j as isize + dj as isize - p);
                            if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                continue;
                            }
                            for c in 0..cin {
                                s += x.at(&[n, y as usize, xx as usize, c]) * k.at(&[di, dj, c, o]);
                            }
                        }
                    }
                    out.set(&[n, i, j, o], s);
                }
            }
        }
    }
    out
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for l in 0..k {
                s += a.at(&[i, l]) * b.at(&[l, j]);
            }
            out.set(&[i, j], s);
        }
    }
    out
}

fn naive_softmax_rows(s: &Tensor) -> Tensor {
    let (m, n) = (s.shape()[0], s.shape()[1]);
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let mx = (0..n).map(|j| s.at(&[i, j])).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..n).map(|j| (s.at(&[i, j]) - mx).exp()).sum();
        for j in 0..n {
            out.set(&[i, j], (s.at(&[i, j]) - mx).exp() / z);
        }
    }
    out
}

fn naive_cosine(t: &Tensor, s: &Tensor) -> Tensor {
    let (m, n, d) = (t.shape()[0], s.shape()[0], t.shape()[1]);
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let (mut dot, mut a2, mut b2) = (0.0, 0.0, 0.0);
            for l in 0..d {
                dot += t.at(&[i, l]) * s.at(&[j, l]);
                a2 += t.at(&[i, l]).powi(2);
                b2 += s.at(&[j, l]).powi(2);
            }
            let v = if a2 == 0.0 || b2 == 0.0 { 0.0 } else { dot / (a2.sqrt() * b2.sqrt()) };
            out.set(&[i, j], v);
        }
    }
    out
}

fn naive_gaussian(t: &Tensor, s: &Tensor) -> Tensor {
    let (m, n, d) = (t.shape()[0], s.shape()[0], t.shape()[1]);
    let mut dist = Vec::new();
    for i in 0..m {
        for j in 0..n {
            let sq: f64 = (0..d).map(|l| (t.at(&[i, l]) - s.at(&[j, l])).powi(2)).sum();
            dist.push(sq.sqrt());
        }
    }
    let mut sorted = dist.clone();
    sorted.sort_by(f64::total_cmp);
    let len = sorted.len();
    let mut sigma = if len % 2 == 1 {
        sorted[len / 2]
    } else {
        0.5 * (sorted[len / 2 - 1] + sorted[len / 2])
    };
    if sigma == 0.0 {
        sigma = 1.0;
    }
    Tensor::from_fn(&[m, n], |k| (-(dist[k] * dist[k]) / (2.0 * sigma * sigma)).exp())
}

#[test]
fn conv2d_matches_loops() {
    let mut r = rng(1);
    for _ in 0..INSTANCES {
        let b = r.random_range(1..=3);
        let h = r.random_range(1..=6);
        let w = r.random_range(1..=6);
        let cin = r.random_range(1..=4);
        let cout = r.random_range(1..=4);
        let k = [1, 3, 5][r.random_range(0..3)];
        let x = random_tensor(&mut r, &[b, h, w, cin]);
        let kern = random_tensor(&mut r, &[k, k, cin, cout]);
        let bias = random_tensor(&mut r, &[cout]);
        let fast = kernels::conv2d(&x, &kern, &bias).unwrap();
        assert_close(&fast, &naive_conv2d(&x, &kern, &bias), TOL, "conv2d");
    }
}

#[test]
fn matmul_matches_loops() {
    let mut r = rng(2);
    for _ in 0..INSTANCES {
        let (m, k, n) = (r.random_range(1..=9), r.random_range(1..=9), r.random_range(1..=9));
        let a = random_tensor(&mut r, &[m, k]);
        let b = random_tensor(&mut r, &[k, n]);
        assert_close(&kernels::matmul(&a, &b).unwrap(), &naive_matmul(&a, &b), TOL, "matmul");
    }
}

#[test]
fn graph_conv_step_matches_loops() {
    let mut r = rng(3);
    for _ in 0..INSTANCES {
        let (n, d, d2) = (r.random_range(1..=10), r.random_range(1..=6), r.random_range(1..=6));
        let y = random_tensor(&mut r, &[n, d]);
        let a = random_tensor(&mut r, &[n, n]);
        let w = random_tensor(&mut r, &[d, d2]);
        let expected = naive_matmul(&naive_matmul(&a, &y), &w).map(|v| v.max(0.0));
        assert_close(&eval::graph_conv_step(&y, &a, &w).unwrap(), &expected, TOL, "graph_conv_step");
    }
}

#[test]
fn intermediate_graph_matches_loops() {
    let mut r = rng(4);
    for _ in 0..INSTANCES {
        let (nt, nl, d) = (r.random_range(1..=10), r.random_range(1..=10), r.random_range(1..=6));
        let a = random_tensor(&mut r, &[nt, nl]);
        let y = random_tensor(&mut r, &[nl, d]);
        let w = random_tensor(&mut r, &[d, d]);
        let expected = naive_matmul(&naive_matmul(&a, &y), &w);
        assert_close(&eval::intermediate_graph(&a, &y, &w).unwrap(), &expected, TOL, "intermediate_graph");
    }
}

#[test]
fn inter_graph_fusion_matches_loops() {
    let mut r = rng(5);
    for _ in 0..INSTANCES {
        let (n, d) = (r.random_range(1..=10), r.random_range(1..=6));
        let yt = random_tensor(&mut r, &[n, d]);
        let yi = random_tensor(&mut r, &[n, d]);
        let yl = random_tensor(&mut r, &[n, d]);
        let w = random_tensor(&mut r, &[3 * d, d]);
        let b = random_tensor(&mut r, &[d]);
        let mut expected = Tensor::zeros(&[n, d]);
        for i in 0..n {
            for j in 0..d {
                let mut s = b.data()[j];
                for l in 0..d {
                    s += yt.at(&[i, l]) * w.at(&[l, j])
                        + yi.at(&[i, l]) * w.at(&[d + l, j])
                        + yl.at(&[i, l]) * w.at(&[2 * d + l, j]);
                }
                expected.set(&[i, j], yt.at(&[i, j]) + s.max(0.0));
            }
        }
        let got = eval::inter_graph_fusion(&yt, &yi, &yl, &w, &b).unwrap();
        assert_close(&got, &expected, TOL, "inter_graph_fusion");
    }
}

#[test]
fn transfer_matrix_matches_loops() {
    let mut r = rng(6);
    for i in 0..INSTANCES {
        let (nt, nl, d) = (r.random_range(1..=10), r.random_range(1..=10), r.random_range(1..=6));
        let mut t = random_tensor(&mut r, &[nt, d]);
        let s = random_tensor(&mut r, &[nl, d]);
        if i % 10 == 0 {
            for l in 0..d {
                t.set(&[0, l], 0.0);
            }
        }
        let cos = eval::transfer_matrix(&t, &s, Similarity::Cosine).unwrap();
        assert_close(&cos, &naive_softmax_rows(&naive_cosine(&t, &s)), TOL, "cosine transfer");
        let gau = eval::transfer_matrix(&t, &s, Similarity::Gaussian).unwrap();
        assert_close(&gau, &naive_softmax_rows(&naive_gaussian(&t, &s)), TOL, "gaussian transfer");
    }
}

#[test]
fn batched_graph_ops_match_per_item() {
    let mut r = rng(7);
    let (b, n, d) = (4, 6, 3);
    let yt = random_tensor(&mut r, &[b, n, d]);
    let yl = random_tensor(&mut r, &[b, n, d]);
    let a = eval::transfer_matrix(&yt, &yl, Similarity::Gaussian).unwrap();
    for item in 0..b {
        let t = Tensor::from_fn(&[n, d], |k| yt.data()[item * n * d + k]);
        let s = Tensor::from_fn(&[n, d], |k| yl.data()[item * n * d + k]);
        let single = eval::transfer_matrix(&t, &s, Similarity::Gaussian).unwrap();
        let slice = Tensor::from_fn(&[n, n], |k| a.data()[item * n * n + k]);
        assert_close(&slice, &single, TOL, "per-item bandwidth");
    }
}
