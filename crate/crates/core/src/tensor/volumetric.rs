//! Plain-loop kernels for the 5-D `[N, C, D, H, W]` operations.
//!
//! Summation order is fixed (channel, then kd, kh, kw ascending) so that
//! outputs are bit-reproducible and match the nested-loop oracles used
//! in tests. Max reductions break ties toward the first row-major
//! position.

use super::Element;

#[inline]
fn idx5(c_ext: usize, d_ext: usize, h_ext: usize, w_ext: usize, n: usize, c: usize, d: usize, h: usize, w: usize) -> usize {
    (((n * c_ext + c) * d_ext + d) * h_ext + h) * w_ext + w
}

/// Output spatial extent of a conv/pool window, or None when the kernel
/// does not fit in the padded input.
pub(crate) fn window_out(extent: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = extent + 2 * padding;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3d_forward<T: Element>(
    x: &[T],
    (n_ext, ci_ext, d_ext, h_ext, w_ext): (usize, usize, usize, usize, usize),
    weight: &[T],
    (co_ext, kd, kh, kw): (usize, usize, usize, usize),
    bias: &[T],
    stride: usize,
    padding: usize,
    (od, oh, ow): (usize, usize, usize),
) -> Vec<T> {
    let mut out = vec![T::zero(); n_ext * co_ext * od * oh * ow];
    let mut o = 0;
    for n in 0..n_ext {
        for co in 0..co_ext {
            let w_base = co * ci_ext * kd * kh * kw;
            for zo in 0..od {
                for yo in 0..oh {
                    for xo in 0..ow {
                        let mut acc = bias[co];
                        for ci in 0..ci_ext {
                            for z in 0..kd {
                                let zi = (zo * stride + z) as isize - padding as isize;
                                if zi < 0 || zi >= d_ext as isize {
                                    continue;
                                }
                                for y in 0..kh {
                                    let yi = (yo * stride + y) as isize - padding as isize;
                                    if yi < 0 || yi >= h_ext as isize {
                                        continue;
                                    }
                                    for xk in 0..kw {
                                        let xi = (xo * stride + xk) as isize - padding as isize;
                                        if xi < 0 || xi >= w_ext as isize {
                                            continue;
                                        }
                                        let xv = x[idx5(ci_ext, d_ext, h_ext, w_ext, n, ci, zi as usize, yi as usize, xi as usize)];
                                        let wv = weight[w_base + ((ci * kd + z) * kh + y) * kw + xk];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        out[o] = acc;
                        o += 1;
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3d_backward<T: Element>(
    grad_out: &[T],
    x: &[T],
    (n_ext, ci_ext, d_ext, h_ext, w_ext): (usize, usize, usize, usize, usize),
    weight: &[T],
    (co_ext, kd, kh, kw): (usize, usize, usize, usize),
    stride: usize,
    padding: usize,
    (od, oh, ow): (usize, usize, usize),
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); weight.len()]);
    let mut db = need_db.then(|| vec![T::zero(); co_ext]);

    let mut o = 0;
    for n in 0..n_ext {
        for co in 0..co_ext {
            let w_base = co * ci_ext * kd * kh * kw;
            for zo in 0..od {
                for yo in 0..oh {
                    for xo in 0..ow {
                        let g = grad_out[o];
                        o += 1;
                        if let Some(db) = db.as_mut() {
                            db[co] += g;
                        }
                        if dx.is_none() && dw.is_none() {
                            continue;
                        }
                        for ci in 0..ci_ext {
                            for z in 0..kd {
                                let zi = (zo * stride + z) as isize - padding as isize;
                                if zi < 0 || zi >= d_ext as isize {
                                    continue;
                                }
                                for y in 0..kh {
                                    let yi = (yo * stride + y) as isize - padding as isize;
                                    if yi < 0 || yi >= h_ext as isize {
                                        continue;
                                    }
                                    for xk in 0..kw {
                                        let xi = (xo * stride + xk) as isize - padding as isize;
                                        if xi < 0 || xi >= w_ext as isize {
                                            continue;
                                        }
                                        let xi5 = idx5(ci_ext, d_ext, h_ext, w_ext, n, ci, zi as usize, yi as usize, xi as usize);
                                        let wi = w_base + ((ci * kd + z) * kh + y) * kw + xk;
                                        if let Some(dx) = dx.as_mut() {
                                            dx[xi5] += g * weight[wi];
                                        }
                                        if let Some(dw) = dw.as_mut() {
                                            dw[wi] += g * x[xi5];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Windowed max/avg pool. For max, returns the flat input index of the
/// first maximal element per window so backward can route exactly.
#[allow(clippy::too_many_arguments)]
pub(crate) fn pool3d_forward<T: Element>(
    max: bool,
    x: &[T],
    (n_ext, c_ext, d_ext, h_ext, w_ext): (usize, usize, usize, usize, usize),
    kernel: usize,
    stride: usize,
    (od, oh, ow): (usize, usize, usize),
) -> (Vec<T>, Vec<usize>) {
    let out_len = n_ext * c_ext * od * oh * ow;
    let mut out = vec![T::zero(); out_len];
    let mut argmax = if max { vec![0usize; out_len] } else { Vec::new() };
    let window = kernel * kernel * kernel;
    let mut o = 0;
    for n in 0..n_ext {
        for c in 0..c_ext {
            for zo in 0..od {
                for yo in 0..oh {
                    for xo in 0..ow {
                        if max {
                            let mut best = T::neg_infinity();
                            let mut best_idx = 0usize;
                            for z in 0..kernel {
                                for y in 0..kernel {
                                    for xk in 0..kernel {
                                        let i = idx5(
                                            c_ext, d_ext, h_ext, w_ext,
                                            n, c,
                                            zo * stride + z,
                                            yo * stride + y,
                                            xo * stride + xk,
                                        );
                                        if x[i] > best {
                                            best = x[i];
                                            best_idx = i;
                                        }
                                    }
                                }
                            }
                            out[o] = best;
                            argmax[o] = best_idx;
                        } else {
                            let mut acc = T::zero();
                            for z in 0..kernel {
                                for y in 0..kernel {
                                    for xk in 0..kernel {
                                        acc += x[idx5(
                                            c_ext, d_ext, h_ext, w_ext,
                                            n, c,
                                            zo * stride + z,
                                            yo * stride + y,
                                            xo * stride + xk,
                                        )];
                                    }
                                }
                            }
                            out[o] = acc / super::elem::<T>(window as f64);
                        }
                        o += 1;
                    }
                }
            }
        }
    }
    (out, argmax)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn pool3d_backward<T: Element>(
    max: bool,
    grad_out: &[T],
    argmax: &[usize],
    x_len: usize,
    (n_ext, c_ext, _d_ext, _h_ext, _w_ext): (usize, usize, usize, usize, usize),
    kernel: usize,
    stride: usize,
    (od, oh, ow): (usize, usize, usize),
    dims: (usize, usize, usize, usize, usize),
) -> Vec<T> {
    let mut dx = vec![T::zero(); x_len];
    if max {
        for (o, &i) in argmax.iter().enumerate() {
            dx[i] += grad_out[o];
        }
        return dx;
    }
    let share = T::one() / super::elem::<T>((kernel * kernel * kernel) as f64);
    let (_, _, d_ext, h_ext, w_ext) = dims;
    let mut o = 0;
    for n in 0..n_ext {
        for c in 0..c_ext {
            for zo in 0..od {
                for yo in 0..oh {
                    for xo in 0..ow {
                        let g = grad_out[o] * share;
                        o += 1;
                        for z in 0..kernel {
                            for y in 0..kernel {
                                for xk in 0..kernel {
                                    dx[idx5(
                                        c_ext, d_ext, h_ext, w_ext,
                                        n, c,
                                        zo * stride + z,
                                        yo * stride + y,
                                        xo * stride + xk,
                                    )] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Per-channel reduction over all spatial positions: `[N,C,S] -> [N,C]`.
pub(crate) fn global_pool_forward<T: Element>(
    max: bool,
    x: &[T],
    n_ext: usize,
    c_ext: usize,
    spatial: usize,
) -> (Vec<T>, Vec<usize>) {
    let mut out = vec![T::zero(); n_ext * c_ext];
    let mut argmax = if max { vec![0usize; n_ext * c_ext] } else { Vec::new() };
    for n in 0..n_ext {
        for c in 0..c_ext {
            let base = (n * c_ext + c) * spatial;
            if max {
                let mut best = T::neg_infinity();
                let mut best_idx = base;
                for s in 0..spatial {
                    if x[base + s] > best {
                        best = x[base + s];
                        best_idx = base + s;
                    }
                }
                out[n * c_ext + c] = best;
                argmax[n * c_ext + c] = best_idx;
            } else {
                let mut acc = T::zero();
                for s in 0..spatial {
                    acc += x[base + s];
                }
                out[n * c_ext + c] = acc / super::elem::<T>(spatial as f64);
            }
        }
    }
    (out, argmax)
}

pub(crate) fn global_pool_backward<T: Element>(
    max: bool,
    grad_out: &[T],
    argmax: &[usize],
    x_len: usize,
    n_ext: usize,
    c_ext: usize,
    spatial: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); x_len];
    if max {
        for (o, &i) in argmax.iter().enumerate() {
            dx[i] += grad_out[o];
        }
    } else {
        let share = T::one() / super::elem::<T>(spatial as f64);
        for n in 0..n_ext {
            for c in 0..c_ext {
                let g = grad_out[n * c_ext + c] * share;
                let base = (n * c_ext + c) * spatial;
                for s in 0..spatial {
                    dx[base + s] += g;
                }
            }
        }
    }
    dx
}

/// Per-position reduction across channels: `[N,C,S] -> [N,1,S]`.
pub(crate) fn channel_reduce_forward<T: Element>(
    max: bool,
    x: &[T],
    n_ext: usize,
    c_ext: usize,
    spatial: usize,
) -> (Vec<T>, Vec<usize>) {
    let mut out = vec![T::zero(); n_ext * spatial];
    let mut argmax = if max { vec![0usize; n_ext * spatial] } else { Vec::new() };
    for n in 0..n_ext {
        for s in 0..spatial {
            if max {
                let mut best = T::neg_infinity();
                let mut best_idx = 0usize;
                for c in 0..c_ext {
                    let i = (n * c_ext + c) * spatial + s;
                    if x[i] > best {
                        best = x[i];
                        best_idx = i;
                    }
                }
                out[n * spatial + s] = best;
                argmax[n * spatial + s] = best_idx;
            } else {
                let mut acc = T::zero();
                for c in 0..c_ext {
                    acc += x[(n * c_ext + c) * spatial + s];
                }
                out[n * spatial + s] = acc / super::elem::<T>(c_ext as f64);
            }
        }
    }
    (out, argmax)
}

pub(crate) fn channel_reduce_backward<T: Element>(
    max: bool,
    grad_out: &[T],
    argmax: &[usize],
    x_len: usize,
    n_ext: usize,
    c_ext: usize,
    spatial: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); x_len];
    if max {
        for (o, &i) in argmax.iter().enumerate() {
            dx[i] += grad_out[o];
        }
    } else {
        let share = T::one() / super::elem::<T>(c_ext as f64);
        for n in 0..n_ext {
            for s in 0..spatial {
                let g = grad_out[n * spatial + s] * share;
                for c in 0..c_ext {
                    dx[(n * c_ext + c) * spatial + s] += g;
                }
            }
        }
    }
    dx
}
