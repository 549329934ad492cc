//! Shared helpers for the integration-test suites: deterministic random
//! data, a central finite-difference gradient checker, and naive
//! nested-loop oracles kept independent of the library kernels.
#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use survfuse::{Result, Tape, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn tensor_uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), uniform_vec(rng, n, lo, hi)).unwrap()
}

/// Central finite-difference check of `f` against the tape's analytic
/// gradients for every listed parameter. Returns the maximum of
/// `|g_analytic - g_fd| / max(1, |g_fd|)` over all elements.
pub fn max_rel_grad_err<F>(shapes: &[Vec<usize>], base: &[Vec<f64>], f: F, eps: f64) -> f64
where
    F: Fn(&mut Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let params: Vec<Tensor<f64>> = shapes
        .iter()
        .zip(base)
        .map(|(s, d)| Tensor::from_vec(s.clone(), d.clone()).unwrap().with_grad())
        .collect();
    let mut tape = Tape::new();
    let out = f(&mut tape, &params).expect("forward pass");
    tape.backward(&out).expect("backward pass");
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.take_grad().expect("leaf grad")).collect();

    let eval = |data: &[Vec<f64>]| -> f64 {
        let ps: Vec<Tensor<f64>> = shapes
            .iter()
            .zip(data)
            .map(|(s, d)| Tensor::from_vec(s.clone(), d.clone()).unwrap())
            .collect();
        let mut tape = Tape::new();
        f(&mut tape, &ps).expect("perturbed forward").item()
    };

    let mut max_rel = 0.0f64;
    for pi in 0..base.len() {
        for i in 0..base[pi].len() {
            let mut plus = base.to_vec();
            plus[pi][i] += eps;
            let mut minus = base.to_vec();
            minus[pi][i] -= eps;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let rel = (analytic[pi][i] - fd).abs() / fd.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    max_rel
}

// ---- naive oracles -------------------------------------------------------

/// Direct-summation matrix product, accumulating in the written order.
pub fn oracle_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Seven-loop cross-correlation with zero padding.
#[allow(clippy::too_many_arguments)]
pub fn oracle_conv3d(
    x: &[f64],
    (n_ext, ci_ext, d_ext, h_ext, w_ext): (usize, usize, usize, usize, usize),
    weight: &[f64],
    (co_ext, kd, kh, kw): (usize, usize, usize, usize),
    bias: &[f64],
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let od = (d_ext + 2 * padding - kd) / stride + 1;
    let oh = (h_ext + 2 * padding - kh) / stride + 1;
    let ow = (w_ext + 2 * padding - kw) / stride + 1;
    let mut out = Vec::with_capacity(n_ext * co_ext * od * oh * ow);
    for n in 0..n_ext {
        for co in 0..co_ext {
            for zo in 0..od {
                for yo in 0..oh {
                    for xo in 0..ow {
                        let mut acc = bias[co];
                        for ci in 0..ci_ext {
                            for z in 0..kd {
                                for y in 0..kh {
                                    for xk in 0..kw {
                                        let zi = (zo * stride + z) as isize - padding as isize;
                                        let yi = (yo * stride + y) as isize - padding as isize;
                                        let xi = (xo * stride + xk) as isize - padding as isize;
                                        if zi < 0
                                            || yi < 0
                                            || xi < 0
                                            || zi >= d_ext as isize
                                            || yi >= h_ext as isize
                                            || xi >= w_ext as isize
                                        {
                                            continue;
                                        }
                                        let xv = x[(((n * ci_ext + ci) * d_ext + zi as usize) * h_ext
                                            + yi as usize)
                                            * w_ext
                                            + xi as usize];
                                        let wv = weight[(((co * ci_ext + ci) * kd + z) * kh + y) * kw + xk];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
    }
    out
}

/// Windowed-loop pooling oracle.
#[allow(clippy::too_many_arguments)]
pub fn oracle_pool3d(
    max: bool,
    x: &[f64],
    (n_ext, c_ext, d_ext, h_ext, w_ext): (usize, usize, usize, usize, usize),
    kernel: usize,
    stride: usize,
) -> Vec<f64> {
    let od = (d_ext - kernel) / stride + 1;
    let oh = (h_ext - kernel) / stride + 1;
    let ow = (w_ext - kernel) / stride + 1;
    let mut out = Vec::with_capacity(n_ext * c_ext * od * oh * ow);
    for n in 0..n_ext {
        for c in 0..c_ext {
            for zo in 0..od {
                for yo in 0..oh {
                    for xo in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut acc = 0.0;
                        for z in 0..kernel {
                            for y in 0..kernel {
                                for xk in 0..kernel {
                                    let v = x[(((n * c_ext + c) * d_ext + zo * stride + z) * h_ext
                                        + yo * stride
                                        + y)
                                        * w_ext
                                        + xo * stride
                                        + xk];
                                    best = best.max(v);
                                    acc += v;
                                }
                            }
                        }
                        out.push(if max { best } else { acc / (kernel * kernel * kernel) as f64 });
                    }
                }
            }
        }
    }
    out
}

/// Flat-loop per-channel reduction oracle for global pooling.
pub fn oracle_global_pool(max: bool, x: &[f64], n_ext: usize, c_ext: usize, spatial: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n_ext * c_ext);
    for n in 0..n_ext {
        for c in 0..c_ext {
            let slice = &x[(n * c_ext + c) * spatial..(n * c_ext + c + 1) * spatial];
            if max {
                out.push(slice.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            } else {
                out.push(slice.iter().sum::<f64>() / spatial as f64);
            }
        }
    }
    out
}
