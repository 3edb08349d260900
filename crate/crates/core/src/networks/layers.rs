//! Forward and backward kernels of the layers the U-Nets are built from.
//!
//! Parameters are passed as plain slices; gradients accumulate into slices of
//! the same length so that a whole network's gradient lives in one vector.

use super::tensor::Tensor;

/// Upper bound on the im2col buffer, in floats.
const COLS_BUDGET: usize = 1 << 22;

/// `C = A·B + beta·C` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |r: usize, cs: usize, rows: usize, cols: usize| (rows - 1) * r + (cols - 1) * cs;
    assert!(k == 0 || a.len() > last(rsa, csa, m, k));
    assert!(k == 0 || b.len() > last(rsb, csb, k, n));
    assert!(c.len() > last(rsc, csc, m, n));
    // SAFETY: every index touched lies inside the slices, checked above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Geometry of a (possibly anisotropic) 3D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn weight_len(&self) -> usize {
        self.out_c * self.k_len()
    }

    fn k_len(&self) -> usize {
        self.in_c * self.kernel.iter().product::<usize>()
    }

    pub fn out_spatial(&self, s: [usize; 3]) -> [usize; 3] {
        std::array::from_fn(|i| (s[i] + 2 * self.pad[i] - self.kernel[i]) / self.stride[i] + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }
}

/// Unfolds output planes `z0..z1` into `cols[k_len, (z1 - z0) * oh * ow]`.
fn im2col(x: &Tensor, g: &ConvGeom, out: [usize; 3], z0: usize, z1: usize, cols: &mut [f32]) {
    let [_, d, h, w] = x.shape();
    let [_, oh, ow] = out;
    let p = oh * ow;
    let ncol = (z1 - z0) * p;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let xd = x.data();
    let mut row = 0;
    for ci in 0..g.in_c {
        let xc = &xd[ci * d * h * w..(ci + 1) * d * h * w];
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    let r = &mut cols[row * ncol..(row + 1) * ncol];
                    for oz in z0..z1 {
                        let iz = (oz * sd + a) as isize - pd as isize;
                        let rz = &mut r[(oz - z0) * p..(oz - z0 + 1) * p];
                        if iz < 0 || iz >= d as isize {
                            rz.fill(0.0);
                            continue;
                        }
                        let xz = &xc[iz as usize * h * w..(iz as usize + 1) * h * w];
                        for oy in 0..oh {
                            let iy = (oy * sh + b) as isize - ph as isize;
                            let ro = &mut rz[oy * ow..(oy + 1) * ow];
                            if iy < 0 || iy >= h as isize {
                                ro.fill(0.0);
                                continue;
                            }
                            let xr = &xz[iy as usize * w..(iy as usize + 1) * w];
                            for (ox, v) in ro.iter_mut().enumerate() {
                                let ix = (ox * sw + c) as isize - pw as isize;
                                *v = if ix < 0 || ix >= w as isize { 0.0 } else { xr[ix as usize] };
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` back into `dx`.
fn col2im(dx: &mut Tensor, g: &ConvGeom, out: [usize; 3], z0: usize, z1: usize, cols: &[f32]) {
    let [_, d, h, w] = dx.shape();
    let [_, oh, ow] = out;
    let p = oh * ow;
    let ncol = (z1 - z0) * p;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let xd = dx.data_mut();
    let mut row = 0;
    for ci in 0..g.in_c {
        let xc = &mut xd[ci * d * h * w..(ci + 1) * d * h * w];
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    let r = &cols[row * ncol..(row + 1) * ncol];
                    row += 1;
                    for oz in z0..z1 {
                        let iz = (oz * sd + a) as isize - pd as isize;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        let rz = &r[(oz - z0) * p..(oz - z0 + 1) * p];
                        let xz = &mut xc[iz as usize * h * w..(iz as usize + 1) * h * w];
                        for oy in 0..oh {
                            let iy = (oy * sh + b) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xr = &mut xz[iy as usize * w..(iy as usize + 1) * w];
                            for (ox, v) in rz[oy * ow..(oy + 1) * ow].iter().enumerate() {
                                let ix = (ox * sw + c) as isize - pw as isize;
                                if ix >= 0 && ix < w as isize {
                                    xr[ix as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn plane_chunk(k: usize, p: usize) -> usize {
    (COLS_BUDGET / (k * p).max(1)).max(1)
}

/// Convolution with weight layout `[out_c, in_c, kd, kh, kw]` and a bias per output channel.
pub fn conv_forward(x: &Tensor, weight: &[f32], bias: &[f32], g: &ConvGeom) -> Tensor {
    assert_eq!(x.channels(), g.in_c, "conv input channels");
    let out = g.out_spatial(x.spatial());
    let [od, oh, ow] = out;
    let n_out = od * oh * ow;
    let mut y = Tensor::zeros([g.out_c, od, oh, ow]);
    let k = g.k_len();
    if g.is_pointwise() {
        gemm(g.out_c, k, n_out, weight, (k, 1), x.data(), (n_out, 1), 0.0, y.data_mut(), (n_out, 1));
    } else {
        let p = oh * ow;
        let chunk = plane_chunk(k, p);
        let mut cols = vec![0.0f32; k * chunk.min(od) * p];
        let mut z0 = 0;
        while z0 < od {
            let z1 = (z0 + chunk).min(od);
            let ncol = (z1 - z0) * p;
            im2col(x, g, out, z0, z1, &mut cols[..k * ncol]);
            gemm(
                g.out_c,
                k,
                ncol,
                weight,
                (k, 1),
                &cols[..k * ncol],
                (ncol, 1),
                0.0,
                &mut y.data_mut()[z0 * p..],
                (n_out, 1),
            );
            z0 = z1;
        }
    }
    for (co, &b) in bias.iter().enumerate() {
        y.channel_mut(co).iter_mut().for_each(|v| *v += b);
    }
    y
}

/// Returns `dx`; accumulates weight and bias gradients.
pub fn conv_backward(x: &Tensor, weight: &[f32], g: &ConvGeom, dy: &Tensor, dw: &mut [f32], db: &mut [f32]) -> Tensor {
    let out = g.out_spatial(x.spatial());
    assert_eq!(dy.shape(), [g.out_c, out[0], out[1], out[2]], "conv output gradient shape");
    let [od, oh, ow] = out;
    let n_out = od * oh * ow;
    let k = g.k_len();
    for (co, b) in db.iter_mut().enumerate() {
        *b += dy.channel(co).iter().sum::<f32>();
    }
    let mut dx = Tensor::zeros(x.shape());
    if g.is_pointwise() {
        gemm(g.out_c, n_out, k, dy.data(), (n_out, 1), x.data(), (1, n_out), 1.0, dw, (k, 1));
        gemm(k, g.out_c, n_out, weight, (1, k), dy.data(), (n_out, 1), 0.0, dx.data_mut(), (n_out, 1));
        return dx;
    }
    let p = oh * ow;
    let chunk = plane_chunk(k, p);
    let mut cols = vec![0.0f32; k * chunk.min(od) * p];
    let mut z0 = 0;
    while z0 < od {
        let z1 = (z0 + chunk).min(od);
        let ncol = (z1 - z0) * p;
        let cols = &mut cols[..k * ncol];
        im2col(x, g, out, z0, z1, cols);
        let dyz = &dy.data()[z0 * p..];
        gemm(g.out_c, ncol, k, dyz, (n_out, 1), cols, (1, ncol), 1.0, dw, (k, 1));
        gemm(k, g.out_c, ncol, weight, (1, k), dyz, (n_out, 1), 0.0, cols, (ncol, 1));
        col2im(&mut dx, g, out, z0, z1, cols);
        z0 = z1;
    }
    dx
}

/// Transposed convolution whose kernel equals its stride `[1, s_h, s_w]` (no
/// overlap, no padding). Weight layout `[in_c, out_c, s_h, s_w]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UpGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub stride: [usize; 2],
}

impl UpGeom {
    pub fn weight_len(&self) -> usize {
        self.in_c * self.kk()
    }

    fn kk(&self) -> usize {
        self.out_c * self.stride[0] * self.stride[1]
    }
}

pub fn conv_transpose_forward(x: &Tensor, weight: &[f32], bias: &[f32], g: &UpGeom) -> Tensor {
    assert_eq!(x.channels(), g.in_c, "transposed conv input channels");
    let [d, h, w] = x.spatial();
    let [sh, sw] = g.stride;
    let n = d * h * w;
    let kk = g.kk();
    let mut tmp = vec![0.0f32; kk * n];
    gemm(kk, g.in_c, n, weight, (1, kk), x.data(), (n, 1), 0.0, &mut tmp, (n, 1));
    let (oh, ow) = (h * sh, w * sw);
    let mut y = Tensor::zeros([g.out_c, d, oh, ow]);
    for co in 0..g.out_c {
        let yc = y.channel_mut(co);
        for a in 0..sh {
            for b in 0..sw {
                let t = &tmp[((co * sh + a) * sw + b) * n..][..n];
                for z in 0..d {
                    for iy in 0..h {
                        let dst = &mut yc[(z * oh + iy * sh + a) * ow..][..ow];
                        let src = &t[(z * h + iy) * w..][..w];
                        for (ix, &v) in src.iter().enumerate() {
                            dst[ix * sw + b] = v + bias[co];
                        }
                    }
                }
            }
        }
    }
    y
}

pub fn conv_transpose_backward(
    x: &Tensor,
    weight: &[f32],
    g: &UpGeom,
    dy: &Tensor,
    dw: &mut [f32],
    db: &mut [f32],
) -> Tensor {
    let [d, h, w] = x.spatial();
    let [sh, sw] = g.stride;
    let n = d * h * w;
    let kk = g.kk();
    let (oh, ow) = (h * sh, w * sw);
    assert_eq!(dy.shape(), [g.out_c, d, oh, ow], "transposed conv output gradient shape");
    let mut dtmp = vec![0.0f32; kk * n];
    for co in 0..g.out_c {
        let yc = dy.channel(co);
        db[co] += yc.iter().sum::<f32>();
        for a in 0..sh {
            for b in 0..sw {
                let t = &mut dtmp[((co * sh + a) * sw + b) * n..][..n];
                for z in 0..d {
                    for iy in 0..h {
                        let src = &yc[(z * oh + iy * sh + a) * ow..][..ow];
                        let dst = &mut t[(z * h + iy) * w..][..w];
                        for (ix, v) in dst.iter_mut().enumerate() {
                            *v = src[ix * sw + b];
                        }
                    }
                }
            }
        }
    }
    gemm(g.in_c, n, kk, x.data(), (n, 1), &dtmp, (1, n), 1.0, dw, (kk, 1));
    let mut dx = Tensor::zeros(x.shape());
    gemm(g.in_c, kk, n, weight, (kk, 1), &dtmp, (n, 1), 0.0, dx.data_mut(), (n, 1));
    dx
}

/// Normalisation statistics kept for the backward pass.
#[derive(Clone, Debug)]
pub struct NormCache {
    pub xhat: Vec<f32>,
    pub inv_std: Vec<f32>,
}

/// Instance normalisation with affine parameters, followed by a leaky ReLU.
/// Statistics are taken over groups of `group_len` consecutive values within
/// each channel (a whole channel, or one depth plane of it).
pub fn norm_act_forward(
    x: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    group_len: usize,
    eps: f32,
    slope: f32,
    keep: bool,
) -> (Tensor, Option<NormCache>) {
    let c = x.channels();
    let n = x.channel_len();
    assert_eq!(n % group_len, 0);
    let groups = n / group_len;
    let mut y = Tensor::zeros(x.shape());
    let mut inv_std = vec![0.0f32; c * groups];
    let mut xhat = if keep { vec![0.0f32; x.data().len()] } else { Vec::new() };
    for ch in 0..c {
        for gi in 0..groups {
            let off = ch * n + gi * group_len;
            let src = &x.data()[off..off + group_len];
            let mean = src.iter().map(|&v| v as f64).sum::<f64>() / group_len as f64;
            let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / group_len as f64;
            let inv = 1.0 / (var + eps as f64).sqrt();
            inv_std[ch * groups + gi] = inv as f32;
            let dst = &mut y.data_mut()[off..off + group_len];
            for (i, (o, &v)) in dst.iter_mut().zip(src).enumerate() {
                let xh = ((v as f64 - mean) * inv) as f32;
                if keep {
                    xhat[off + i] = xh;
                }
                let pre = gamma[ch] * xh + beta[ch];
                *o = if pre > 0.0 { pre } else { slope * pre };
            }
        }
    }
    (y, keep.then_some(NormCache { xhat, inv_std }))
}

pub fn norm_act_backward(
    cache: &NormCache,
    gamma: &[f32],
    beta: &[f32],
    group_len: usize,
    slope: f32,
    dy: &Tensor,
    dgamma: &mut [f32],
    dbeta: &mut [f32],
) -> Tensor {
    let c = dy.channels();
    let n = dy.channel_len();
    let groups = n / group_len;
    let mut dx = Tensor::zeros(dy.shape());
    let m = group_len as f64;
    let mut dxh = vec![0.0f64; group_len];
    for ch in 0..c {
        for gi in 0..groups {
            let off = ch * n + gi * group_len;
            let xh = &cache.xhat[off..off + group_len];
            let g = &dy.data()[off..off + group_len];
            let (mut sum_d, mut sum_dx) = (0.0f64, 0.0f64);
            let (mut dg, mut dbt) = (0.0f64, 0.0f64);
            for i in 0..group_len {
                let pre = gamma[ch] * xh[i] + beta[ch];
                let dpre = (if pre > 0.0 { g[i] } else { slope * g[i] }) as f64;
                dg += dpre * xh[i] as f64;
                dbt += dpre;
                dxh[i] = dpre * gamma[ch] as f64;
                sum_d += dxh[i];
                sum_dx += dxh[i] * xh[i] as f64;
            }
            dgamma[ch] += dg as f32;
            dbeta[ch] += dbt as f32;
            let inv = cache.inv_std[ch * groups + gi] as f64;
            let dst = &mut dx.data_mut()[off..off + group_len];
            for i in 0..group_len {
                dst[i] = (inv / m * (m * dxh[i] - sum_d - xh[i] as f64 * sum_dx)) as f32;
            }
        }
    }
    dx
}

/// 1x2x2 max pooling; returns the flat argmax of each output within its channel.
pub fn maxpool_forward(x: &Tensor) -> (Tensor, Vec<u32>) {
    let [c, d, h, w] = x.shape();
    assert!(h % 2 == 0 && w % 2 == 0, "max pooling needs even extents, got {h}x{w}");
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros([c, d, oh, ow]);
    let mut idx = vec![0u32; c * d * oh * ow];
    let on = d * oh * ow;
    for ch in 0..c {
        let xc = x.channel(ch);
        let yc = y.channel_mut(ch);
        for z in 0..d {
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = z * h * w + 2 * oy * w + 2 * ox;
                    let mut best = base;
                    for cand in [base + 1, base + w, base + w + 1] {
                        if xc[cand] > xc[best] {
                            best = cand;
                        }
                    }
                    let o = z * oh * ow + oy * ow + ox;
                    yc[o] = xc[best];
                    idx[ch * on + o] = best as u32;
                }
            }
        }
    }
    (y, idx)
}

pub fn maxpool_backward(in_shape: [usize; 4], idx: &[u32], dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(in_shape);
    let on = dy.channel_len();
    for ch in 0..dy.channels() {
        let g = dy.channel(ch);
        let dc = dx.channel_mut(ch);
        for (o, &v) in g.iter().enumerate() {
            dc[idx[ch * on + o] as usize] += v;
        }
    }
    dx
}

/// Source taps of 2x linear upsampling with half-pixel centres.
fn linear_taps(n: usize) -> Vec<(usize, usize, f32)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f32 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f32)
        })
        .collect()
}

/// In-plane 2x bilinear upsampling (depth untouched).
pub fn upsample_forward(x: &Tensor) -> Tensor {
    let [c, d, h, w] = x.shape();
    let (ty, tx) = (linear_taps(h), linear_taps(w));
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = Tensor::zeros([c, d, oh, ow]);
    for ch in 0..c {
        let xc = x.channel(ch);
        let yc = y.channel_mut(ch);
        for z in 0..d {
            let xz = &xc[z * h * w..(z + 1) * h * w];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                let dst = &mut yc[(z * oh + oy) * ow..][..ow];
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let top = xz[y0 * w + x0] * (1.0 - lx) + xz[y0 * w + x1] * lx;
                    let bot = xz[y1 * w + x0] * (1.0 - lx) + xz[y1 * w + x1] * lx;
                    dst[ox] = top * (1.0 - ly) + bot * ly;
                }
            }
        }
    }
    y
}

pub fn upsample_backward(in_shape: [usize; 4], dy: &Tensor) -> Tensor {
    let [c, d, h, w] = in_shape;
    let (ty, tx) = (linear_taps(h), linear_taps(w));
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = Tensor::zeros(in_shape);
    for ch in 0..c {
        let g = dy.channel(ch);
        let dc = dx.channel_mut(ch);
        for z in 0..d {
            let dz = &mut dc[z * h * w..(z + 1) * h * w];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                let src = &g[(z * oh + oy) * ow..][..ow];
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let v = src[ox];
                    dz[y0 * w + x0] += v * (1.0 - ly) * (1.0 - lx);
                    dz[y0 * w + x1] += v * (1.0 - ly) * lx;
                    dz[y1 * w + x0] += v * ly * (1.0 - lx);
                    dz[y1 * w + x1] += v * ly * lx;
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
    }

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
    }

    /// Direct nested-loop convolution.
    fn conv_naive(x: &Tensor, w: &[f32], b: &[f32], g: &ConvGeom) -> Tensor {
        let [_, d, h, wd] = x.shape();
        let [od, oh, ow] = g.out_spatial([d, h, wd]);
        let [kd, kh, kw] = g.kernel;
        let mut y = Tensor::zeros([g.out_c, od, oh, ow]);
        for co in 0..g.out_c {
            for z in 0..od {
                for yy in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b[co] as f64;
                        for ci in 0..g.in_c {
                            for a in 0..kd {
                                for bb in 0..kh {
                                    for c in 0..kw {
                                        let iz = (z * g.stride[0] + a) as isize - g.pad[0] as isize;
                                        let iy = (yy * g.stride[1] + bb) as isize - g.pad[1] as isize;
                                        let ix = (xx * g.stride[2] + c) as isize - g.pad[2] as isize;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= wd as isize {
                                            continue;
                                        }
                                        let xv = x.channel(ci)[(iz as usize * h + iy as usize) * wd + ix as usize];
                                        let wv = w[(((co * g.in_c + ci) * kd + a) * kh + bb) * kw + c];
                                        acc += (xv * wv) as f64;
                                    }
                                }
                            }
                        }
                        y.channel_mut(co)[(z * oh + yy) * ow + xx] = acc as f32;
                    }
                }
            }
        }
        y
    }

    fn geoms() -> Vec<ConvGeom> {
        vec![
            ConvGeom { in_c: 2, out_c: 3, kernel: [1, 3, 3], stride: [1, 1, 1], pad: [0, 1, 1] },
            ConvGeom { in_c: 2, out_c: 3, kernel: [3, 3, 3], stride: [1, 1, 1], pad: [1, 1, 1] },
            ConvGeom { in_c: 3, out_c: 2, kernel: [3, 3, 3], stride: [1, 2, 2], pad: [1, 1, 1] },
            ConvGeom { in_c: 3, out_c: 4, kernel: [1, 1, 1], stride: [1, 1, 1], pad: [0, 0, 0] },
        ]
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for g in geoms() {
            let x = rand_tensor([g.in_c, 3, 6, 4], &mut rng);
            let w = rand_vec(g.weight_len(), &mut rng);
            let b = rand_vec(g.out_c, &mut rng);
            let fast = conv_forward(&x, &w, &b, &g);
            let slow = conv_naive(&x, &w, &b, &g);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-4);
            }
        }
    }

    /// Checks `<dy, f(x)>` gradients against central differences.
    fn check_grad(f: &dyn Fn(&Tensor) -> Tensor, back: &dyn Fn(&Tensor, &Tensor) -> Tensor, x: &Tensor, rng: &mut ChaCha8Rng) {
        let y = f(x);
        let dy = rand_tensor(y.shape(), rng);
        let dx = back(x, &dy);
        let h = 1e-2f32;
        for i in (0..x.data().len()).step_by(7) {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += h;
            xm.data_mut()[i] -= h;
            let lp: f64 = f(&xp).data().iter().zip(dy.data()).map(|(a, b)| (*a * *b) as f64).sum();
            let lm: f64 = f(&xm).data().iter().zip(dy.data()).map(|(a, b)| (*a * *b) as f64).sum();
            let num = (lp - lm) / (2.0 * h as f64);
            let ana = dx.data()[i] as f64;
            assert!((num - ana).abs() <= 2e-2 * (1.0 + ana.abs()), "index {i}: numeric {num} vs analytic {ana}");
        }
    }

    #[test]
    fn conv_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for g in geoms() {
            let x = rand_tensor([g.in_c, 3, 4, 4], &mut rng);
            let w = rand_vec(g.weight_len(), &mut rng);
            let b = vec![0.0; g.out_c];
            let mut dw = vec![0.0; w.len()];
            let mut db = vec![0.0; g.out_c];
            let back = |x: &Tensor, dy: &Tensor| {
                let mut dw = vec![0.0; w.len()];
                let mut db = vec![0.0; g.out_c];
                conv_backward(x, &w, &g, dy, &mut dw, &mut db)
            };
            check_grad(&|x| conv_forward(x, &w, &b, &g), &back, &x, &mut rng);
            // weight gradient: <dy, conv(x; w)> is linear in w, so dW·w equals <dy, conv(x; w) - b>.
            let y = conv_forward(&x, &w, &b, &g);
            let dy = rand_tensor(y.shape(), &mut rng);
            conv_backward(&x, &w, &g, &dy, &mut dw, &mut db);
            let lhs: f64 = dw.iter().zip(&w).map(|(a, b)| (*a * *b) as f64).sum();
            let rhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| (*a * *b) as f64).sum();
            assert!((lhs - rhs).abs() < 1e-3 * (1.0 + rhs.abs()));
            let sum_dy: f32 = dy.channel(0).iter().sum();
            assert!((db[0] - sum_dy).abs() < 1e-4);
        }
    }

    #[test]
    fn conv_weight_gradient_elementwise() {
        // Convolution is linear in the weights, so each dW entry equals the
        // response to a unit weight contracted with dy.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for g in geoms() {
            let x = rand_tensor([g.in_c, 3, 6, 4], &mut rng);
            let w = rand_vec(g.weight_len(), &mut rng);
            let zero_b = vec![0.0; g.out_c];
            let y = conv_forward(&x, &w, &zero_b, &g);
            let dy = rand_tensor(y.shape(), &mut rng);
            let (mut dw, mut db) = (vec![0.0; w.len()], vec![0.0; g.out_c]);
            conv_backward(&x, &w, &g, &dy, &mut dw, &mut db);
            for i in 0..w.len() {
                let mut e = vec![0.0; w.len()];
                e[i] = 1.0;
                let r = conv_naive(&x, &e, &zero_b, &g);
                let expect: f64 = r.data().iter().zip(dy.data()).map(|(a, b)| (*a * *b) as f64).sum();
                assert!((dw[i] as f64 - expect).abs() < 1e-3 * (1.0 + expect.abs()), "{g:?} weight {i}");
            }
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_strided_scatter() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = UpGeom { in_c: 3, out_c: 2, stride: [2, 2] };
        let x = rand_tensor([3, 2, 3, 4], &mut rng);
        let w = rand_vec(g.weight_len(), &mut rng);
        let b = rand_vec(2, &mut rng);
        let y = conv_transpose_forward(&x, &w, &b, &g);
        assert_eq!(y.shape(), [2, 2, 6, 8]);
        // Spot-check one output against the definition.
        let (co, z, oy, ox) = (1, 1, 3, 4);
        let (iy, ix, a, bb) = (oy / 2, ox / 2, oy % 2, ox % 2);
        let expect: f32 = b[co]
            + (0..3)
                .map(|ci| x.channel(ci)[(z * 3 + iy) * 4 + ix] * w[((ci * 2 + co) * 2 + a) * 2 + bb])
                .sum::<f32>();
        assert!((y.channel(co)[(z * 6 + oy) * 8 + ox] - expect).abs() < 1e-5);
        let back = |x: &Tensor, dy: &Tensor| {
            let mut dw = vec![0.0; w.len()];
            let mut db = vec![0.0; 2];
            conv_transpose_backward(x, &w, &g, dy, &mut dw, &mut db)
        };
        check_grad(&|x| conv_transpose_forward(x, &w, &b, &g), &back, &x, &mut rng);
        let dy = rand_tensor(y.shape(), &mut rng);
        let (mut dw, mut db) = (vec![0.0; w.len()], vec![0.0; 2]);
        conv_transpose_backward(&x, &w, &g, &dy, &mut dw, &mut db);
        let lhs: f64 = dw.iter().zip(&w).map(|(a, b)| (*a * *b) as f64).sum::<f64>()
            + db.iter().zip(&b).map(|(a, b)| (*a * *b) as f64).sum::<f64>();
        let rhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| (*a * *b) as f64).sum();
        assert!((lhs - rhs).abs() < 1e-3 * (1.0 + rhs.abs()));
    }

    #[test]
    fn norm_act_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor([2, 2, 3, 3], &mut rng);
        let gamma = vec![1.3, 0.7];
        let beta = vec![0.1, -0.2];
        for group in [9, 18] {
            let (y, _) = norm_act_forward(&x, &gamma, &beta, group, 1e-5, 0.01, false);
            if group == 18 {
                // Normalised channel has zero mean and unit variance before the affine map.
                let (_, cache) = norm_act_forward(&x, &gamma, &beta, group, 1e-5, 0.01, true);
                let xh = &cache.unwrap().xhat[..18];
                let mean: f32 = xh.iter().sum::<f32>() / 18.0;
                let var: f32 = xh.iter().map(|v| v * v).sum::<f32>() / 18.0;
                assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-3);
            }
            assert!(y.is_finite());
            let back = |x: &Tensor, dy: &Tensor| {
                let (_, c) = norm_act_forward(x, &gamma, &beta, group, 1e-5, 0.01, true);
                let (mut dg, mut db) = (vec![0.0; 2], vec![0.0; 2]);
                norm_act_backward(&c.unwrap(), &gamma, &beta, group, 0.01, dy, &mut dg, &mut db)
            };
            check_grad(
                &|x| norm_act_forward(x, &gamma, &beta, group, 1e-5, 0.01, false).0,
                &back,
                &x,
                &mut rng,
            );
        }
    }

    #[test]
    fn pooling_and_upsampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor([2, 2, 4, 6], &mut rng);
        let (y, idx) = maxpool_forward(&x);
        assert_eq!(y.shape(), [2, 2, 2, 3]);
        assert_eq!(y.channel(1)[0], x.channel(1)[0].max(x.channel(1)[1]).max(x.channel(1)[6]).max(x.channel(1)[7]));
        check_grad(&|x| maxpool_forward(x).0, &|x, dy| maxpool_backward(x.shape(), &maxpool_forward(x).1, dy), &x, &mut rng);
        let dy = rand_tensor(y.shape(), &mut rng);
        let dx = maxpool_backward(x.shape(), &idx, &dy);
        assert!((dx.data().iter().sum::<f32>() - dy.data().iter().sum::<f32>()).abs() < 1e-4);

        let u = upsample_forward(&x);
        assert_eq!(u.shape(), [2, 2, 8, 12]);
        // Constant input stays constant.
        let c = Tensor::from_vec([1, 1, 3, 3], vec![2.5; 9]).unwrap();
        assert!(upsample_forward(&c).data().iter().all(|&v| (v - 2.5).abs() < 1e-6));
        // Half-pixel weights on a 1D ramp: outputs 0, .25, .75, 1.25, 1.75, 2 for input 0,1,2.
        let r = Tensor::from_vec([1, 1, 1, 3], vec![0.0, 1.0, 2.0]).unwrap();
        let ur = upsample_forward(&r);
        let row: Vec<f32> = ur.channel(0)[..6].to_vec();
        for (a, b) in row.iter().zip([0.0, 0.25, 0.75, 1.25, 1.75, 2.0]) {
            assert!((a - b).abs() < 1e-6, "{row:?}");
        }
        check_grad(&upsample_forward, &|x, dy| upsample_backward(x.shape(), dy), &x, &mut rng);
    }
}
