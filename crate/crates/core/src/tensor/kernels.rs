//! Raw array kernels behind the compute graph.
//!
//! Every kernel is gather-style: one task owns one output region and reduces
//! into it sequentially, so parallel and sequential execution are bitwise
//! identical. Only the heavy kernels (matmul, conv) fan out through
//! [`crate::par::fill_chunks`]; O(n) passes stay sequential.

use crate::par::fill_chunks;
use crate::tensor::Scalar;

// ── matmul family ──────────────────────────────────────────────────────────

/// C[m×n] = A[m×k] · B[k×n]
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    fill_chunks(&mut out, n, m * n * k, |i, row| {
        for (t, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            for (o, &bv) in row.iter_mut().zip(&b[t * n..(t + 1) * n]) {
                *o += av * bv;
            }
        }
    });
    out
}

/// C[m×n] = A[m×k] · B[n×k]ᵀ
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    fill_chunks(&mut out, n, m * n * k, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            *o = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    });
    out
}

/// C[m×n] = A[k×m]ᵀ · B[k×n]
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    fill_chunks(&mut out, n, m * n * k, |i, row| {
        for t in 0..k {
            let av = a[t * m + i];
            for (o, &bv) in row.iter_mut().zip(&b[t * n..(t + 1) * n]) {
                *o += av * bv;
            }
        }
    });
    out
}

pub fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

// ── convolution ────────────────────────────────────────────────────────────

/// Output extent of a k-kernel over an extent-`n` axis; `None` when the
/// stride does not divide evenly.
pub fn conv_out_dim(n: usize, k: usize, pad: usize, stride: usize) -> Option<usize> {
    let span = n + 2 * pad;
    if span < k || (span - k) % stride != 0 {
        return None;
    }
    Some((span - k) / stride + 1)
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_fwd<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); co * oh * ow];
    let work = co * oh * ow * ci * kh * kw;
    fill_chunks(&mut out, oh * ow, work, |oc, plane| {
        let wbase = oc * ci * kh * kw;
        let b = bias.map_or(T::zero(), |bs| bs[oc]);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b;
                for ic in 0..ci {
                    let xplane = &x[ic * h * wd..(ic + 1) * h * wd];
                    let wker = &w[wbase + ic * kh * kw..wbase + (ic + 1) * kh * kw];
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &xplane[iy as usize * wd..(iy as usize + 1) * wd];
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc += wker[ky * kw + kx] * xrow[ix as usize];
                        }
                    }
                }
                plane[oy * ow + ox] = acc;
            }
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd_input<T: Scalar>(
    g: &[T],
    w: &[T],
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); ci * h * wd];
    let work = ci * h * wd * co * kh * kw;
    fill_chunks(&mut dx, h * wd, work, |ic, plane| {
        for y in 0..h {
            for x in 0..wd {
                let mut acc = T::zero();
                for oc in 0..co {
                    let gplane = &g[oc * oh * ow..(oc + 1) * oh * ow];
                    let wker = &w[(oc * ci + ic) * kh * kw..(oc * ci + ic + 1) * kh * kw];
                    for ky in 0..kh {
                        let ty = y + pad;
                        if ty < ky || (ty - ky) % stride != 0 {
                            continue;
                        }
                        let oy = (ty - ky) / stride;
                        if oy >= oh {
                            continue;
                        }
                        for kx in 0..kw {
                            let tx = x + pad;
                            if tx < kx || (tx - kx) % stride != 0 {
                                continue;
                            }
                            let ox = (tx - kx) / stride;
                            if ox >= ow {
                                continue;
                            }
                            acc += wker[ky * kw + kx] * gplane[oy * ow + ox];
                        }
                    }
                }
                plane[y * wd + x] = acc;
            }
        }
    });
    dx
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd_weight<T: Scalar>(
    g: &[T],
    x: &[T],
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut dw = vec![T::zero(); co * ci * kh * kw];
    let work = co * ci * kh * kw * oh * ow;
    fill_chunks(&mut dw, ci * kh * kw, work, |oc, block| {
        let gplane = &g[oc * oh * ow..(oc + 1) * oh * ow];
        for ic in 0..ci {
            let xplane = &x[ic * h * wd..(ic + 1) * h * wd];
            for ky in 0..kh {
                for kx in 0..kw {
                    let mut acc = T::zero();
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &xplane[iy as usize * wd..(iy as usize + 1) * wd];
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc += grow[ox] * xrow[ix as usize];
                        }
                    }
                    block[ic * kh * kw + ky * kw + kx] = acc;
                }
            }
        }
    });
    dw
}

pub fn conv2d_bwd_bias<T: Scalar>(g: &[T], co: usize, plane: usize) -> Vec<T> {
    (0..co)
        .map(|oc| g[oc * plane..(oc + 1) * plane].iter().copied().sum())
        .collect()
}

// ── depthwise patch convolution (kernel = stride = p, no padding) ──────────

pub fn dwconv_fwd<T: Scalar>(x: &[T], w: &[T], c: usize, h: usize, wd: usize, p: usize) -> Vec<T> {
    let (oh, ow) = (h / p, wd / p);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let xplane = &x[ch * h * wd..(ch + 1) * h * wd];
        let wker = &w[ch * p * p..(ch + 1) * p * p];
        let plane = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for ky in 0..p {
                    for kx in 0..p {
                        acc += wker[ky * p + kx] * xplane[(oy * p + ky) * wd + ox * p + kx];
                    }
                }
                plane[oy * ow + ox] = acc;
            }
        }
    }
    out
}

pub fn dwconv_bwd<T: Scalar>(
    g: &[T],
    x: &[T],
    w: &[T],
    c: usize,
    h: usize,
    wd: usize,
    p: usize,
) -> (Vec<T>, Vec<T>) {
    let (oh, ow) = (h / p, wd / p);
    let mut dx = vec![T::zero(); c * h * wd];
    let mut dw = vec![T::zero(); c * p * p];
    for ch in 0..c {
        let gplane = &g[ch * oh * ow..(ch + 1) * oh * ow];
        let xplane = &x[ch * h * wd..(ch + 1) * h * wd];
        let wker = &w[ch * p * p..(ch + 1) * p * p];
        let dxplane = &mut dx[ch * h * wd..(ch + 1) * h * wd];
        let dwker = &mut dw[ch * p * p..(ch + 1) * p * p];
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = gplane[oy * ow + ox];
                for ky in 0..p {
                    for kx in 0..p {
                        let xi = (oy * p + ky) * wd + ox * p + kx;
                        dxplane[xi] += wker[ky * p + kx] * gv;
                        dwker[ky * p + kx] += xplane[xi] * gv;
                    }
                }
            }
        }
    }
    (dx, dw)
}

// ── pooling / resampling ───────────────────────────────────────────────────

/// 2×2 max pool, stride 2. Ties break to the first element in scan order.
pub fn maxpool2_fwd<T: Scalar>(x: &[T], c: usize, h: usize, wd: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, wd / 2);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let xplane = &x[ch * h * wd..(ch + 1) * h * wd];
        let plane = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = xplane[(2 * oy) * wd + 2 * ox];
                for (dy, dx_) in [(0, 1), (1, 0), (1, 1)] {
                    let v = xplane[(2 * oy + dy) * wd + 2 * ox + dx_];
                    if v > best {
                        best = v;
                    }
                }
                plane[oy * ow + ox] = best;
            }
        }
    }
    out
}

pub fn maxpool2_bwd<T: Scalar>(g: &[T], x: &[T], c: usize, h: usize, wd: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, wd / 2);
    let mut dx = vec![T::zero(); c * h * wd];
    for ch in 0..c {
        let xplane = &x[ch * h * wd..(ch + 1) * h * wd];
        let gplane = &g[ch * oh * ow..(ch + 1) * oh * ow];
        let dxplane = &mut dx[ch * h * wd..(ch + 1) * h * wd];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (2 * oy) * wd + 2 * ox;
                for (dy, dx_) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (2 * oy + dy) * wd + 2 * ox + dx_;
                    if xplane[idx] > xplane[best] {
                        best = idx;
                    }
                }
                dxplane[best] += gplane[oy * ow + ox];
            }
        }
    }
    dx
}

/// Average pool with kernel = stride = p (the patch tokenizer).
pub fn avgpool_fwd<T: Scalar>(x: &[T], c: usize, h: usize, wd: usize, p: usize) -> Vec<T> {
    let (oh, ow) = (h / p, wd / p);
    let inv = T::from_f64(1.0 / (p * p) as f64);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let xplane = &x[ch * h * wd..(ch + 1) * h * wd];
        let plane = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for ky in 0..p {
                    for kx in 0..p {
                        acc += xplane[(oy * p + ky) * wd + ox * p + kx];
                    }
                }
                plane[oy * ow + ox] = acc * inv;
            }
        }
    }
    out
}

pub fn avgpool_bwd<T: Scalar>(g: &[T], c: usize, h: usize, wd: usize, p: usize) -> Vec<T> {
    let (oh, ow) = (h / p, wd / p);
    let inv = T::from_f64(1.0 / (p * p) as f64);
    let mut dx = vec![T::zero(); c * h * wd];
    for ch in 0..c {
        let gplane = &g[ch * oh * ow..(ch + 1) * oh * ow];
        let dxplane = &mut dx[ch * h * wd..(ch + 1) * h * wd];
        for (i, v) in dxplane.iter_mut().enumerate() {
            let (y, x_) = (i / wd, i % wd);
            *v = gplane[(y / p) * ow + x_ / p] * inv;
        }
    }
    dx
}

pub fn upsample_nearest_fwd<T: Scalar>(x: &[T], c: usize, h: usize, wd: usize, f: usize) -> Vec<T> {
    let (oh, ow) = (h * f, wd * f);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let xplane = &x[ch * h * wd..(ch + 1) * h * wd];
        let plane = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (i, v) in plane.iter_mut().enumerate() {
            let (y, x_) = (i / ow, i % ow);
            *v = xplane[(y / f) * wd + x_ / f];
        }
    }
    out
}

pub fn upsample_nearest_bwd<T: Scalar>(g: &[T], c: usize, h: usize, wd: usize, f: usize) -> Vec<T> {
    let ow = wd * f;
    let mut dx = vec![T::zero(); c * h * wd];
    for ch in 0..c {
        let gplane = &g[ch * h * f * ow..(ch + 1) * h * f * ow];
        let dxplane = &mut dx[ch * h * wd..(ch + 1) * h * wd];
        for y in 0..h {
            for x_ in 0..wd {
                let mut acc = T::zero();
                for dy in 0..f {
                    for dxp in 0..f {
                        acc += gplane[(y * f + dy) * ow + x_ * f + dxp];
                    }
                }
                dxplane[y * wd + x_] += acc;
            }
        }
    }
    dx
}

// ── normalization primitives ───────────────────────────────────────────────

/// Zero-mean unit-variance whitening of one lane. Returns `1/sqrt(var+eps)`.
pub fn whiten<T: Scalar>(x: &[T], eps: T, out: &mut [T]) -> T {
    let n = T::from_f64(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv_std = (var + eps).sqrt().recip();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - mean) * inv_std;
    }
    inv_std
}

/// Adjoint of [`whiten`] given the whitened output `y` and upstream grad `g`:
/// dx_i = inv_std * (g_i - mean(g) - y_i * mean(g ⊙ y)).
pub fn whiten_bwd<T: Scalar>(y: &[T], g: &[T], inv_std: T, dx: &mut [T]) {
    let n = T::from_f64(y.len() as f64);
    let mean_g = g.iter().copied().sum::<T>() / n;
    let mean_gy = g.iter().zip(y).map(|(&gv, &yv)| gv * yv).sum::<T>() / n;
    for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
        *d += inv_std * (gv - mean_g - yv * mean_gy);
    }
}

// ── softmax lanes ──────────────────────────────────────────────────────────

/// Softmax over one contiguous lane, max-shifted for stability.
pub fn softmax_lane<T: Scalar>(x: &[T], out: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    let inv = sum.recip();
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// dx_i = y_i * (g_i - Σ_j g_j y_j) for one lane.
pub fn softmax_lane_bwd<T: Scalar>(y: &[T], g: &[T], dx: &mut [T]) {
    let dot = y.iter().zip(g).map(|(&yv, &gv)| yv * gv).sum::<T>();
    for ((d, &yv), &gv) in dx.iter_mut().zip(y).zip(g) {
        *d += yv * (gv - dot);
    }
}
