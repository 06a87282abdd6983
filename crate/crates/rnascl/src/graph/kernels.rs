//! Forward/backward kernels shared by the graph ops and the no-graph
//! inference path. All kernels are pure functions over flat row-major
//! buffers; loop order is fixed so results are deterministic.

use crate::dtype::{real, Real};

pub fn conv2d_out_dim(extent: usize, k: usize, stride: usize, padding: usize) -> usize {
    (extent + 2 * padding - k) / stride + 1
}

/// Direct convolution: nested loops over output cells.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward_direct<E: Real>(
    x: &[E],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    wt: &[E],
    co: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Vec<E> {
    let oh = conv2d_out_dim(h, k, stride, padding);
    let ow = conv2d_out_dim(w, k, stride, padding);
    let mut out = vec![E::zero(); n * co * oh * ow];
    for ni in 0..n {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = E::zero();
                    for i in 0..ci {
                        for kh in 0..k {
                            let iy = (oy * stride + kh) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = ((ni * ci + i) * h + iy as usize) * w;
                            let wrow = ((o * ci + i) * k + kh) * k;
                            for kw in 0..k {
                                let ix = (ox * stride + kw) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += x[xrow + ix as usize] * wt[wrow + kw];
                            }
                        }
                    }
                    out[((ni * co + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// Patch matrix of shape (n*oh*ow, ci*k*k); zero padding.
#[allow(clippy::too_many_arguments)]
pub fn im2col<E: Real>(
    x: &[E],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Vec<E> {
    let oh = conv2d_out_dim(h, k, stride, padding);
    let ow = conv2d_out_dim(w, k, stride, padding);
    let cols = ci * k * k;
    let mut patches = vec![E::zero(); n * oh * ow * cols];
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((ni * oh + oy) * ow + ox) * cols;
                for i in 0..ci {
                    for kh in 0..k {
                        let iy = (oy * stride + kh) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = ((ni * ci + i) * h + iy as usize) * w;
                        let prow = row + (i * k + kh) * k;
                        for kw in 0..k {
                            let ix = (ox * stride + kw) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            patches[prow + kw] = x[xrow + ix as usize];
                        }
                    }
                }
            }
        }
    }
    patches
}

/// Convolution via patch-matrix expansion followed by a dense product.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward_im2col<E: Real>(
    x: &[E],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    wt: &[E],
    co: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Vec<E> {
    let oh = conv2d_out_dim(h, k, stride, padding);
    let ow = conv2d_out_dim(w, k, stride, padding);
    let cols = ci * k * k;
    let patches = im2col(x, n, ci, h, w, k, stride, padding);
    let mut out = vec![E::zero(); n * co * oh * ow];
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let prow = &patches[((ni * oh + oy) * ow + ox) * cols..][..cols];
                for o in 0..co {
                    let wrow = &wt[o * cols..][..cols];
                    let mut acc = E::zero();
                    for c in 0..cols {
                        acc += prow[c] * wrow[c];
                    }
                    out[((ni * co + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// Gradients w.r.t. input and weights; used by both conv strategies.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<E: Real>(
    x: &[E],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    wt: &[E],
    co: usize,
    k: usize,
    stride: usize,
    padding: usize,
    gout: &[E],
    need_gx: bool,
    need_gw: bool,
) -> (Vec<E>, Vec<E>) {
    let oh = conv2d_out_dim(h, k, stride, padding);
    let ow = conv2d_out_dim(w, k, stride, padding);
    let mut gx = vec![E::zero(); if need_gx { x.len() } else { 0 }];
    let mut gw = vec![E::zero(); if need_gw { wt.len() } else { 0 }];
    for ni in 0..n {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = gout[((ni * co + o) * oh + oy) * ow + ox];
                    if g == E::zero() {
                        continue;
                    }
                    for i in 0..ci {
                        for kh in 0..k {
                            let iy = (oy * stride + kh) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = ((ni * ci + i) * h + iy as usize) * w;
                            let wrow = ((o * ci + i) * k + kh) * k;
                            for kw in 0..k {
                                let ix = (ox * stride + kw) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                if need_gx {
                                    gx[xrow + ix as usize] += g * wt[wrow + kw];
                                }
                                if need_gw {
                                    gw[wrow + kw] += g * x[xrow + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

pub fn pool2d_out_dim(extent: usize, k: usize, stride: usize) -> usize {
    (extent - k) / stride + 1
}

/// Returns the pooled output and, for max pooling, the flat input index of
/// each window's maximum (first occurrence wins on ties).
#[allow(clippy::too_many_arguments)]
pub fn pool2d_forward<E: Real>(
    x: &[E],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kind: PoolKind,
    k: usize,
    stride: usize,
) -> (Vec<E>, Vec<usize>) {
    let oh = pool2d_out_dim(h, k, stride);
    let ow = pool2d_out_dim(w, k, stride);
    let mut out = vec![E::zero(); n * c * oh * ow];
    let mut argmax = if kind == PoolKind::Max {
        vec![0usize; out.len()]
    } else {
        Vec::new()
    };
    let window = real::<E>((k * k) as f64);
    for ni in 0..n {
        for ch in 0..c {
            let plane = (ni * c + ch) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let oi = ((ni * c + ch) * oh + oy) * ow + ox;
                    match kind {
                        PoolKind::Max => {
                            let mut best = E::neg_infinity();
                            let mut best_idx = 0usize;
                            for kh in 0..k {
                                for kw in 0..k {
                                    let idx = plane + (oy * stride + kh) * w + ox * stride + kw;
                                    if x[idx] > best {
                                        best = x[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                            out[oi] = best;
                            argmax[oi] = best_idx;
                        }
                        PoolKind::Avg => {
                            let mut acc = E::zero();
                            for kh in 0..k {
                                for kw in 0..k {
                                    acc += x[plane + (oy * stride + kh) * w + ox * stride + kw];
                                }
                            }
                            out[oi] = acc / window;
                        }
                    }
                }
            }
        }
    }
    (out, argmax)
}

#[allow(clippy::too_many_arguments)]
pub fn pool2d_backward<E: Real>(
    gout: &[E],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kind: PoolKind,
    k: usize,
    stride: usize,
    argmax: &[usize],
) -> Vec<E> {
    let oh = pool2d_out_dim(h, k, stride);
    let ow = pool2d_out_dim(w, k, stride);
    let mut gx = vec![E::zero(); n * c * h * w];
    let window = real::<E>((k * k) as f64);
    for ni in 0..n {
        for ch in 0..c {
            let plane = (ni * c + ch) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let oi = ((ni * c + ch) * oh + oy) * ow + ox;
                    match kind {
                        PoolKind::Max => gx[argmax[oi]] += gout[oi],
                        PoolKind::Avg => {
                            let share = gout[oi] / window;
                            for kh in 0..k {
                                for kw in 0..k {
                                    gx[plane + (oy * stride + kh) * w + ox * stride + kw] += share;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Decompose a shape around `axis` into (outer, len, inner) lane geometry.
pub fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Max-subtracted softmax along `axis`.
pub fn softmax<E: Real>(x: &[E], shape: &[usize], axis: usize) -> Vec<E> {
    let (outer, len, inner) = lane_dims(shape, axis);
    let mut out = vec![E::zero(); x.len()];
    for ou in 0..outer {
        for inn in 0..inner {
            let base = ou * len * inner + inn;
            let mut mx = E::neg_infinity();
            for j in 0..len {
                mx = mx.max(x[base + j * inner]);
            }
            let mut total = E::zero();
            for j in 0..len {
                let e = (x[base + j * inner] - mx).exp();
                out[base + j * inner] = e;
                total += e;
            }
            for j in 0..len {
                out[base + j * inner] /= total;
            }
        }
    }
    out
}

pub fn softmax_backward<E: Real>(y: &[E], gout: &[E], shape: &[usize], axis: usize) -> Vec<E> {
    let (outer, len, inner) = lane_dims(shape, axis);
    let mut gx = vec![E::zero(); y.len()];
    for ou in 0..outer {
        for inn in 0..inner {
            let base = ou * len * inner + inn;
            let mut dot = E::zero();
            for j in 0..len {
                dot += y[base + j * inner] * gout[base + j * inner];
            }
            for j in 0..len {
                let idx = base + j * inner;
                gx[idx] = y[idx] * (gout[idx] - dot);
            }
        }
    }
    gx
}

pub fn log_softmax<E: Real>(x: &[E], shape: &[usize], axis: usize) -> Vec<E> {
    let (outer, len, inner) = lane_dims(shape, axis);
    let mut out = vec![E::zero(); x.len()];
    for ou in 0..outer {
        for inn in 0..inner {
            let base = ou * len * inner + inn;
            let mut mx = E::neg_infinity();
            for j in 0..len {
                mx = mx.max(x[base + j * inner]);
            }
            let mut total = E::zero();
            for j in 0..len {
                total += (x[base + j * inner] - mx).exp();
            }
            let lse = mx + total.ln();
            for j in 0..len {
                out[base + j * inner] = x[base + j * inner] - lse;
            }
        }
    }
    out
}

pub fn log_softmax_backward<E: Real>(y: &[E], gout: &[E], shape: &[usize], axis: usize) -> Vec<E> {
    let (outer, len, inner) = lane_dims(shape, axis);
    let mut gx = vec![E::zero(); y.len()];
    for ou in 0..outer {
        for inn in 0..inner {
            let base = ou * len * inner + inn;
            let mut gsum = E::zero();
            for j in 0..len {
                gsum += gout[base + j * inner];
            }
            for j in 0..len {
                let idx = base + j * inner;
                gx[idx] = gout[idx] - y[idx].exp() * gsum;
            }
        }
    }
    gx
}

/// y = x * w + b for x (n, d), w (d, m), b (m,).
pub fn linear_forward<E: Real>(x: &[E], n: usize, d: usize, w: &[E], m: usize, b: &[E]) -> Vec<E> {
    let mut out = vec![E::zero(); n * m];
    for ni in 0..n {
        let xrow = &x[ni * d..][..d];
        let orow = &mut out[ni * m..][..m];
        orow.copy_from_slice(b);
        for (di, &xv) in xrow.iter().enumerate() {
            let wrow = &w[di * m..][..m];
            for j in 0..m {
                orow[j] += xv * wrow[j];
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward<E: Real>(
    x: &[E],
    w: &[E],
    gout: &[E],
    n: usize,
    d: usize,
    m: usize,
    need_gx: bool,
    need_gw: bool,
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let mut gx = vec![E::zero(); if need_gx { n * d } else { 0 }];
    let mut gw = vec![E::zero(); if need_gw { d * m } else { 0 }];
    let mut gb = vec![E::zero(); if need_gw { m } else { 0 }];
    for ni in 0..n {
        let grow = &gout[ni * m..][..m];
        if need_gw {
            for j in 0..m {
                gb[j] += grow[j];
            }
        }
        for di in 0..d {
            let wrow = &w[di * m..][..m];
            if need_gx {
                let mut acc = E::zero();
                for j in 0..m {
                    acc += grow[j] * wrow[j];
                }
                gx[ni * d + di] = acc;
            }
            if need_gw {
                let xv = x[ni * d + di];
                let gwrow = &mut gw[di * m..][..m];
                for j in 0..m {
                    gwrow[j] += xv * grow[j];
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Per-plane square-sum over channels: (b, c, h, w) -> (b, h, w).
pub fn attention_map_forward<E: Real>(x: &[E], b: usize, c: usize, h: usize, w: usize) -> Vec<E> {
    let hw = h * w;
    let mut out = vec![E::zero(); b * hw];
    for bi in 0..b {
        for ci in 0..c {
            let plane = &x[(bi * c + ci) * hw..][..hw];
            let orow = &mut out[bi * hw..][..hw];
            for p in 0..hw {
                orow[p] += plane[p] * plane[p];
            }
        }
    }
    out
}

pub fn attention_map_backward<E: Real>(
    x: &[E],
    gout: &[E],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Vec<E> {
    let hw = h * w;
    let two = real::<E>(2.0);
    let mut gx = vec![E::zero(); x.len()];
    for bi in 0..b {
        let grow = &gout[bi * hw..][..hw];
        for ci in 0..c {
            let off = (bi * c + ci) * hw;
            for p in 0..hw {
                gx[off + p] = two * x[off + p] * grow[p];
            }
        }
    }
    gx
}

/// Bilinear interpolation weights with corner alignment.
fn bilinear_axis(out_i: usize, out_len: usize, in_len: usize) -> (usize, usize, f64) {
    if out_len == 1 || in_len == 1 {
        return (0, 0, 0.0);
    }
    let src = out_i as f64 * (in_len - 1) as f64 / (out_len - 1) as f64;
    let lo = src.floor() as usize;
    let lo = lo.min(in_len - 1);
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, src - lo as f64)
}

/// Resize (b, h, w) maps to (b, oh, ow) with corner-aligned bilinear weights.
pub fn resize_bilinear_forward<E: Real>(
    x: &[E],
    b: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<E> {
    let mut out = vec![E::zero(); b * oh * ow];
    for bi in 0..b {
        let plane = &x[bi * h * w..][..h * w];
        for oy in 0..oh {
            let (y0, y1, fy) = bilinear_axis(oy, oh, h);
            for ox in 0..ow {
                let (x0, x1, fx) = bilinear_axis(ox, ow, w);
                let v00 = plane[y0 * w + x0].as_f64();
                let v01 = plane[y0 * w + x1].as_f64();
                let v10 = plane[y1 * w + x0].as_f64();
                let v11 = plane[y1 * w + x1].as_f64();
                let top = v00 * (1.0 - fx) + v01 * fx;
                let bot = v10 * (1.0 - fx) + v11 * fx;
                out[(bi * oh + oy) * ow + ox] = real(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

pub fn resize_bilinear_backward<E: Real>(
    gout: &[E],
    b: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<E> {
    let mut gx = vec![E::zero(); b * h * w];
    for bi in 0..b {
        let gplane = &mut gx[bi * h * w..][..h * w];
        for oy in 0..oh {
            let (y0, y1, fy) = bilinear_axis(oy, oh, h);
            for ox in 0..ow {
                let (x0, x1, fx) = bilinear_axis(ox, ow, w);
                let g = gout[(bi * oh + oy) * ow + ox].as_f64();
                gplane[y0 * w + x0] += real(g * (1.0 - fx) * (1.0 - fy));
                gplane[y0 * w + x1] += real(g * fx * (1.0 - fy));
                gplane[y1 * w + x0] += real(g * (1.0 - fx) * fy);
                gplane[y1 * w + x1] += real(g * fx * fy);
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_strategies_agree() {
        let n = 2;
        let (ci, h, w) = (3, 5, 5);
        let (co, k) = (4, 3);
        let x: Vec<f64> = (0..n * ci * h * w)
            .map(|i| (i as f64 * 0.37).sin())
            .collect();
        let wt: Vec<f64> = (0..co * ci * k * k)
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        for &(stride, padding) in &[(1, 0), (1, 1), (2, 1)] {
            let a = conv2d_forward_direct(&x, n, ci, h, w, &wt, co, k, stride, padding);
            let b = conv2d_forward_im2col(&x, n, ci, h, w, &wt, co, k, stride, padding);
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn maxpool_takes_first_max_on_ties() {
        let x = vec![2.0f64, 2.0, 1.0, 0.0];
        let (out, argmax) = pool2d_forward(&x, 1, 1, 2, 2, PoolKind::Max, 2, 2);
        assert_eq!(out, vec![2.0]);
        assert_eq!(argmax, vec![0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = vec![1.0f64, 2.0, 3.0, -1.0, 0.0, 1.0];
        let y = softmax(&x, &[2, 3], 1);
        for row in y.chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_survives_extreme_logits() {
        let x = vec![500.0f64, -500.0];
        let y = softmax(&x, &[2], 0);
        assert!(y.iter().all(|v| v.is_finite()));
        assert!((y[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn resize_identity_when_same_size() {
        let x = vec![1.0f64, 2.0, 3.0, 4.0];
        let y = resize_bilinear_forward(&x, 1, 2, 2, 2, 2);
        assert_eq!(x, y);
    }

    #[test]
    fn resize_from_single_pixel_is_constant() {
        let y = resize_bilinear_forward(&[7.5f64], 1, 1, 1, 3, 4);
        assert!(y.iter().all(|&v| v == 7.5));
    }
}
