//! Forward and backward kernels for every primitive, on raw NCHW buffers.

use crate::tensor::Shape;

/// `c = alpha * op(a) * op(b) + beta * c` for row-major buffers, where `op`
/// optionally transposes. `a` is logically `m x k`, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // elements checked by the debug assertion, and `c` does not alias.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: Shape, weight: Shape, stride: usize, pad: usize) -> Option<Self> {
        let (h, w, kh, kw) = (x.h(), x.w(), weight.h(), weight.w());
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        Some(ConvGeom {
            cin: x.c(),
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let hw = g.col_cols();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let hw = g.col_cols();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    x: &[f32],
    n: usize,
    weight: &[f32],
    cout: usize,
    bias: Option<&[f32]>,
    g: &ConvGeom,
) -> Vec<f32> {
    let (k, hw) = (g.col_rows(), g.col_cols());
    let in_len = g.cin * g.h * g.w;
    let mut out = vec![0.0f32; n * cout * hw];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0f32; k * hw]
    };
    for b in 0..n {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let ob = &mut out[b * cout * hw..(b + 1) * cout * hw];
        if let Some(bias) = bias {
            for (co, chunk) in ob.chunks_mut(hw).enumerate() {
                chunk.fill(bias[co]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        if g.is_pointwise() {
            gemm(cout, k, hw, weight, false, xb, false, beta, ob);
        } else {
            im2col(xb, g, &mut cols);
            gemm(cout, k, hw, weight, false, &cols, false, beta, ob);
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f32>>,
    pub dw: Option<Vec<f32>>,
    pub db: Option<Vec<f32>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f32],
    n: usize,
    weight: &[f32],
    cout: usize,
    g: &ConvGeom,
    dout: &[f32],
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> ConvGrads {
    let (k, hw) = (g.col_rows(), g.col_cols());
    let in_len = g.cin * g.h * g.w;
    let mut dx = want_dx.then(|| vec![0.0f32; n * in_len]);
    let mut dw = want_dw.then(|| vec![0.0f32; cout * k]);
    let db = want_db.then(|| {
        let mut db = vec![0.0f32; cout];
        for b in 0..n {
            for (co, v) in db.iter_mut().enumerate() {
                let start = (b * cout + co) * hw;
                *v += dout[start..start + hw]
                    .iter()
                    .map(|&d| d as f64)
                    .sum::<f64>() as f32;
            }
        }
        db
    });
    if !want_dx && !want_dw {
        return ConvGrads { dx, dw, db };
    }
    let pointwise = g.is_pointwise();
    let mut cols = vec![0.0f32; if pointwise { 0 } else { k * hw }];
    let mut dcols = vec![0.0f32; if pointwise || !want_dx { 0 } else { k * hw }];
    for b in 0..n {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let db_out = &dout[b * cout * hw..(b + 1) * cout * hw];
        if let Some(dw) = dw.as_mut() {
            let colsb: &[f32] = if pointwise {
                xb
            } else {
                im2col(xb, g, &mut cols);
                &cols
            };
            // dW (cout x k) += dout (cout x hw) * cols^T (hw x k)
            gemm(cout, hw, k, db_out, false, colsb, true, 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            if pointwise {
                gemm(k, cout, hw, weight, true, db_out, false, 0.0, dxb);
            } else {
                gemm(k, cout, hw, weight, true, db_out, false, 0.0, &mut dcols);
                col2im(&dcols, g, dxb);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Per-channel statistics over (N, H, W) in 64-bit.
pub(crate) fn channel_stats(x: &[f32], s: Shape) -> (Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = s.0;
    let plane = h * w;
    let count = (n * plane) as f64;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ch in 0..c {
        let mut acc = 0.0f64;
        for b in 0..n {
            let start = (b * c + ch) * plane;
            acc += x[start..start + plane]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>();
        }
        let m = acc / count;
        let mut sq = 0.0f64;
        for b in 0..n {
            let start = (b * c + ch) * plane;
            sq += x[start..start + plane]
                .iter()
                .map(|&v| {
                    let d = v as f64 - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = sq / count;
    }
    (mean, var)
}

pub(crate) fn batchnorm_forward(
    x: &[f32],
    s: Shape,
    gamma: &[f32],
    beta: &[f32],
    mean: &[f64],
    invstd: &[f64],
) -> Vec<f32> {
    let [n, c, h, w] = s.0;
    let plane = h * w;
    let mut out = vec![0.0f32; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let start = (b * c + ch) * plane;
            let scale = gamma[ch] as f64 * invstd[ch];
            let shift = beta[ch] as f64 - mean[ch] * scale;
            for (o, &v) in out[start..start + plane]
                .iter_mut()
                .zip(&x[start..start + plane])
            {
                *o = (v as f64 * scale + shift) as f32;
            }
        }
    }
    out
}

pub(crate) struct BnGrads {
    pub dx: Vec<f32>,
    pub dgamma: Vec<f32>,
    pub dbeta: Vec<f32>,
}

/// With `train`, the statistics are treated as functions of `x`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_backward(
    x: &[f32],
    s: Shape,
    gamma: &[f32],
    mean: &[f64],
    invstd: &[f64],
    dout: &[f32],
    train: bool,
) -> BnGrads {
    let [n, c, h, w] = s.0;
    let plane = h * w;
    let count = (n * plane) as f64;
    let mut dx = vec![0.0f32; x.len()];
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    for ch in 0..c {
        let (m, is) = (mean[ch], invstd[ch]);
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for b in 0..n {
            let start = (b * c + ch) * plane;
            for i in start..start + plane {
                let xhat = (x[i] as f64 - m) * is;
                sum_dy += dout[i] as f64;
                sum_dy_xhat += dout[i] as f64 * xhat;
            }
        }
        dgamma[ch] = sum_dy_xhat as f32;
        dbeta[ch] = sum_dy as f32;
        let g = gamma[ch] as f64;
        for b in 0..n {
            let start = (b * c + ch) * plane;
            for i in start..start + plane {
                dx[i] = if train {
                    let xhat = (x[i] as f64 - m) * is;
                    (g * is / count * (count * dout[i] as f64 - sum_dy - xhat * sum_dy_xhat)) as f32
                } else {
                    (g * is * dout[i] as f64) as f32
                };
            }
        }
    }
    BnGrads { dx, dgamma, dbeta }
}

/// Broadcast shape where every axis of `a` and `b` is equal or 1.
pub(crate) fn broadcast_shape(a: Shape, b: Shape) -> Option<Shape> {
    let mut out = [0usize; 4];
    for i in 0..4 {
        let (x, y) = (a.0[i], b.0[i]);
        out[i] = if x == y {
            x
        } else if x == 1 {
            y
        } else if y == 1 {
            x
        } else {
            return None;
        };
    }
    Some(Shape(out))
}

fn strides_for(s: Shape, out: Shape) -> [usize; 4] {
    let [_, c, h, w] = s.0;
    let dense = [c * h * w, h * w, w, 1];
    let mut st = [0usize; 4];
    for i in 0..4 {
        st[i] = if s.0[i] == out.0[i] { dense[i] } else { 0 };
    }
    st
}

fn for_each_broadcast(out: Shape, a: Shape, b: Shape, mut f: impl FnMut(usize, usize, usize)) {
    let (sa, sb) = (strides_for(a, out), strides_for(b, out));
    let [n, c, h, w] = out.0;
    let mut o = 0;
    for i0 in 0..n {
        for i1 in 0..c {
            for i2 in 0..h {
                let ba = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let bb = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..w {
                    f(o, ba + i3 * sa[3], bb + i3 * sb[3]);
                    o += 1;
                }
            }
        }
    }
}

pub(crate) fn add_forward(a: &[f32], sa: Shape, b: &[f32], sb: Shape, out: Shape) -> Vec<f32> {
    if sa == sb {
        return a.iter().zip(b).map(|(x, y)| x + y).collect();
    }
    let mut res = vec![0.0f32; out.numel()];
    for_each_broadcast(out, sa, sb, |o, ia, ib| res[o] = a[ia] + b[ib]);
    res
}

pub(crate) fn mul_forward(a: &[f32], sa: Shape, b: &[f32], sb: Shape, out: Shape) -> Vec<f32> {
    if sa == sb {
        return a.iter().zip(b).map(|(x, y)| x * y).collect();
    }
    let mut res = vec![0.0f32; out.numel()];
    for_each_broadcast(out, sa, sb, |o, ia, ib| res[o] = a[ia] * b[ib]);
    res
}

/// Gradients of `a + b` reduced back onto each operand's shape.
pub(crate) fn add_backward(dout: &[f32], sa: Shape, sb: Shape, out: Shape) -> (Vec<f32>, Vec<f32>) {
    if sa == sb {
        return (dout.to_vec(), dout.to_vec());
    }
    let mut da = vec![0.0f32; sa.numel()];
    let mut db = vec![0.0f32; sb.numel()];
    for_each_broadcast(out, sa, sb, |o, ia, ib| {
        da[ia] += dout[o];
        db[ib] += dout[o];
    });
    (da, db)
}

pub(crate) fn mul_backward(
    dout: &[f32],
    a: &[f32],
    sa: Shape,
    b: &[f32],
    sb: Shape,
    out: Shape,
) -> (Vec<f32>, Vec<f32>) {
    if sa == sb {
        let da = dout.iter().zip(b).map(|(d, y)| d * y).collect();
        let db = dout.iter().zip(a).map(|(d, x)| d * x).collect();
        return (da, db);
    }
    let mut da = vec![0.0f32; sa.numel()];
    let mut db = vec![0.0f32; sb.numel()];
    for_each_broadcast(out, sa, sb, |o, ia, ib| {
        da[ia] += dout[o] * b[ib];
        db[ib] += dout[o] * a[ia];
    });
    (da, db)
}

pub(crate) fn concat_forward(parts: &[(&[f32], Shape)], out: Shape) -> Vec<f32> {
    let [n, _, h, w] = out.0;
    let plane = h * w;
    let mut res = Vec::with_capacity(out.numel());
    for b in 0..n {
        for (data, s) in parts {
            let len = s.c() * plane;
            res.extend_from_slice(&data[b * len..(b + 1) * len]);
        }
    }
    res
}

pub(crate) fn concat_backward(dout: &[f32], parts: &[Shape], out: Shape) -> Vec<Vec<f32>> {
    let [n, _, h, w] = out.0;
    let plane = h * w;
    let mut grads: Vec<Vec<f32>> = parts
        .iter()
        .map(|s| Vec::with_capacity(s.numel()))
        .collect();
    let mut offset = 0;
    for _ in 0..n {
        for (g, s) in grads.iter_mut().zip(parts) {
            let len = s.c() * plane;
            g.extend_from_slice(&dout[offset..offset + len]);
            offset += len;
        }
    }
    grads
}

/// 2x2 max pooling with stride 2; returns values and argmax input offsets.
pub(crate) fn maxpool2_forward(x: &[f32], s: Shape) -> (Vec<f32>, Vec<u32>) {
    let [n, c, h, w] = s.0;
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for nc in 0..n * c {
        let base = nc * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub(crate) fn scatter_argmax(dout: &[f32], arg: &[u32], in_len: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; in_len];
    for (&d, &i) in dout.iter().zip(arg) {
        dx[i as usize] += d;
    }
    dx
}

pub(crate) fn upsample2_forward(x: &[f32], s: Shape) -> Vec<f32> {
    let [n, c, h, w] = s.0;
    let wo = 2 * w;
    let mut out = vec![0.0f32; n * c * 4 * h * w];
    for nc in 0..n * c {
        let src = &x[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out[nc * 4 * h * w..(nc + 1) * 4 * h * w];
        for y in 0..2 * h {
            for xo in 0..wo {
                dst[y * wo + xo] = src[(y / 2) * w + xo / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(dout: &[f32], s: Shape) -> Vec<f32> {
    let [n, c, h, w] = s.0;
    let wo = 2 * w;
    let mut dx = vec![0.0f32; s.numel()];
    for nc in 0..n * c {
        let src = &dout[nc * 4 * h * w..(nc + 1) * 4 * h * w];
        let dst = &mut dx[nc * h * w..(nc + 1) * h * w];
        for y in 0..2 * h {
            for xo in 0..wo {
                dst[(y / 2) * w + xo / 2] += src[y * wo + xo];
            }
        }
    }
    dx
}

/// Half-pixel-centred source taps along one axis: (lower index, upper index, upper weight).
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let frac = if hi == lo {
                0.0
            } else {
                (pos - lo as f64) as f32
            };
            (lo, hi, frac)
        })
        .collect()
}

pub(crate) fn resize_bilinear_forward(x: &[f32], s: Shape, th: usize, tw: usize) -> Vec<f32> {
    let [n, c, h, w] = s.0;
    let (ty, tx) = (bilinear_taps(h, th), bilinear_taps(w, tw));
    let mut out = vec![0.0f32; n * c * th * tw];
    for nc in 0..n * c {
        let src = &x[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out[nc * th * tw..(nc + 1) * th * tw];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * tw + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub(crate) fn resize_bilinear_backward(dout: &[f32], s: Shape, th: usize, tw: usize) -> Vec<f32> {
    let [n, c, h, w] = s.0;
    let (ty, tx) = (bilinear_taps(h, th), bilinear_taps(w, tw));
    let mut dx = vec![0.0f32; s.numel()];
    for nc in 0..n * c {
        let src = &dout[nc * th * tw..(nc + 1) * th * tw];
        let dst = &mut dx[nc * h * w..(nc + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let d = src[oy * tw + ox];
                dst[y0 * w + x0] += d * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += d * (1.0 - fy) * fx;
                dst[y1 * w + x0] += d * fy * (1.0 - fx);
                dst[y1 * w + x1] += d * fy * fx;
            }
        }
    }
    dx
}

pub(crate) fn global_mean_forward(x: &[f32], s: Shape) -> Vec<f32> {
    let plane = s.plane();
    x.chunks(plane)
        .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
        .collect()
}

pub(crate) fn global_mean_backward(dout: &[f32], s: Shape) -> Vec<f32> {
    let plane = s.plane();
    let mut dx = Vec::with_capacity(s.numel());
    for &d in dout {
        dx.extend(std::iter::repeat(d / plane as f32).take(plane));
    }
    dx
}

pub(crate) fn global_max_forward(x: &[f32], s: Shape) -> (Vec<f32>, Vec<u32>) {
    let plane = s.plane();
    let mut out = Vec::with_capacity(s.n() * s.c());
    let mut arg = Vec::with_capacity(s.n() * s.c());
    for (i, p) in x.chunks(plane).enumerate() {
        let mut best = 0;
        for (j, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = j;
            }
        }
        out.push(p[best]);
        arg.push((i * plane + best) as u32);
    }
    (out, arg)
}

pub(crate) fn channel_mean_forward(x: &[f32], s: Shape) -> Vec<f32> {
    let [n, c, h, w] = s.0;
    let plane = h * w;
    let mut out = vec![0.0f32; n * plane];
    for b in 0..n {
        for p in 0..plane {
            let mut acc = 0.0f64;
            for ch in 0..c {
                acc += x[(b * c + ch) * plane + p] as f64;
            }
            out[b * plane + p] = (acc / c as f64) as f32;
        }
    }
    out
}

pub(crate) fn channel_mean_backward(dout: &[f32], s: Shape) -> Vec<f32> {
    let [n, c, h, w] = s.0;
    let plane = h * w;
    let mut dx = vec![0.0f32; s.numel()];
    for b in 0..n {
        for ch in 0..c {
            for p in 0..plane {
                dx[(b * c + ch) * plane + p] = dout[b * plane + p] / c as f32;
            }
        }
    }
    dx
}

pub(crate) fn channel_max_forward(x: &[f32], s: Shape) -> (Vec<f32>, Vec<u32>) {
    let [n, c, h, w] = s.0;
    let plane = h * w;
    let mut out = vec![0.0f32; n * plane];
    let mut arg = vec![0u32; n * plane];
    for b in 0..n {
        for p in 0..plane {
            let mut best = b * c * plane + p;
            for ch in 1..c {
                let i = (b * c + ch) * plane + p;
                if x[i] > x[best] {
                    best = i;
                }
            }
            out[b * plane + p] = x[best];
            arg[b * plane + p] = best as u32;
        }
    }
    (out, arg)
}

/// `out (n x o) = x (n x f) * W^T (f x o) + b`.
pub(crate) fn fc_forward(
    x: &[f32],
    n: usize,
    f: usize,
    weight: &[f32],
    o: usize,
    bias: Option<&[f32]>,
) -> Vec<f32> {
    let mut out = vec![0.0f32; n * o];
    if let Some(bias) = bias {
        for row in out.chunks_mut(o) {
            row.copy_from_slice(bias);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    gemm(n, f, o, x, false, weight, true, beta, &mut out);
    out
}

pub(crate) fn fc_backward(
    x: &[f32],
    n: usize,
    f: usize,
    weight: &[f32],
    o: usize,
    dout: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut dx = vec![0.0f32; n * f];
    gemm(n, o, f, dout, false, weight, false, 0.0, &mut dx);
    let mut dw = vec![0.0f32; o * f];
    gemm(o, n, f, dout, true, x, false, 0.0, &mut dw);
    let mut db = vec![0.0f32; o];
    for row in dout.chunks(o) {
        for (acc, &d) in db.iter_mut().zip(row) {
            *acc += d;
        }
    }
    (dx, dw, db)
}

/// Logistic function kept strictly inside (0, 1): in f32 it would otherwise
/// round to exactly 1 above about 17 and underflow to 0 far below zero.
pub(crate) fn sigmoid(v: f32) -> f32 {
    let s = if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    };
    s.clamp(f32::MIN_POSITIVE, SIGMOID_MAX)
}

/// Largest f32 below 1.
const SIGMOID_MAX: f32 = 1.0 - f32::EPSILON / 2.0;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_stays_in_open_interval() {
        for v in [-1e4f32, -200.0, -90.0, -17.5, 0.0, 17.5, 40.0, 1e4] {
            let s = sigmoid(v);
            assert!(s > 0.0 && s < 1.0, "sigmoid({v}) = {s}");
        }
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(1.0) > sigmoid(0.5));
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn im2col_roundtrip_counts_overlaps() {
        let g = ConvGeom::new(Shape::new(1, 1, 3, 3), Shape::new(1, 1, 3, 3), 1, 1).unwrap();
        let x = vec![1.0f32; 9];
        let mut cols = vec![0.0; 9 * 9];
        im2col(&x, &g, &mut cols);
        let mut back = vec![0.0; 9];
        col2im(&cols, &g, &mut back);
        // Each pixel is counted once per kernel tap that covers it.
        assert_eq!(back, vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn bilinear_taps_identity() {
        for (i, &(lo, hi, f)) in bilinear_taps(7, 7).iter().enumerate() {
            assert_eq!(lo, i);
            assert!(f == 0.0 || hi == lo);
        }
    }

    #[test]
    fn broadcast_rules() {
        let a = Shape::new(2, 3, 4, 4);
        assert_eq!(broadcast_shape(a, Shape::new(2, 3, 1, 1)), Some(a));
        assert_eq!(broadcast_shape(Shape::new(2, 1, 4, 4), a), Some(a));
        assert_eq!(broadcast_shape(a, Shape::new(2, 2, 4, 4)), None);
    }
}
