//! Raw array kernels behind the tape ops: direct convolution, reflect-padded
//! blur, bilinear/nearest resampling, blockwise 8x8 DCT, and Gaussian kernel
//! construction. All functions take flat row-major slices with explicit
//! extents; loops run in a fixed order so results are bit-deterministic.

use crate::{Error, Result};
use crate::numerics::Tensor;

/// Mirror index without edge repetition (period 2n-2). Valid for any `i`.
pub fn reflect(i: isize, n: usize) -> usize {
    debug_assert!(n >= 1);
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i % period;
    if m < 0 {
        m += period;
    }
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// y += a * x over equal-length slices.
#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Resolved geometry of one cross-correlation: zero padding, square stride.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Output extent: (in + 2*pad - k) / stride + 1, requiring the padded
    /// extent to cover the kernel.
    pub fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (n, ci, h, w) = match x_shape[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::shape(format!("conv input must be NCHW, got {x_shape:?}"))),
        };
        let (co, wci, kh, kw) = match w_shape[..] {
            [o, i, kh, kw] => (o, i, kh, kw),
            _ => return Err(Error::shape(format!("conv kernel must be OIHW, got {w_shape:?}"))),
        };
        if wci != ci {
            return Err(Error::shape(format!(
                "conv channels: input has {ci}, kernel expects {wci}"
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv stride must be positive"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(format!(
                "padded input {}x{} smaller than kernel {kh}x{kw}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(ConvGeom { n, ci, h, w, co, kh, kw, stride, pad, oh, ow })
    }
}

fn pad_zero_plane(x: &[f64], h: usize, w: usize, pad: usize) -> Vec<f64> {
    if pad == 0 {
        return x.to_vec();
    }
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0; ph * pw];
    for y in 0..h {
        let src = &x[y * w..(y + 1) * w];
        out[(y + pad) * pw + pad..(y + pad) * pw + pad + w].copy_from_slice(src);
    }
    out
}

/// Patch matrix for one padded batch item, positions-major: one row per
/// output position, one column per (ci, ky, kx) tap. Column-major storage
/// makes each tap's column a contiguous run filled by row copies.
fn im2col(g: ConvGeom, xpad: &[Vec<f64>]) -> nalgebra::DMatrix<f64> {
    let pw = g.w + 2 * g.pad;
    let p = g.oh * g.ow;
    let k = g.ci * g.kh * g.kw;
    let mut m = nalgebra::DMatrix::<f64>::zeros(p, k);
    let data = m.as_mut_slice();
    let mut j = 0;
    for plane in xpad.iter().take(g.ci) {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut data[j * p..(j + 1) * p];
                for oy in 0..g.oh {
                    let base = (oy * g.stride + ky) * pw + kx;
                    let row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if g.stride == 1 {
                        row.copy_from_slice(&plane[base..base + g.ow]);
                    } else {
                        for (ox, v) in row.iter_mut().enumerate() {
                            *v = plane[base + ox * g.stride];
                        }
                    }
                }
                j += 1;
            }
        }
    }
    m
}

pub fn conv2d_fwd(g: ConvGeom, x: &[f64], wgt: &[f64]) -> Vec<f64> {
    let k = g.ci * g.kh * g.kw;
    let plane = g.oh * g.ow;
    // wgt is OIHW row-major, so viewing it column-major gives k x co.
    let wt = nalgebra::DMatrix::<f64>::from_column_slice(k, g.co, wgt);
    let mut out = vec![0.0; g.n * g.co * plane];
    for b in 0..g.n {
        let xpad: Vec<Vec<f64>> = (0..g.ci)
            .map(|c| pad_zero_plane(&x[(b * g.ci + c) * g.h * g.w..][..g.h * g.w], g.h, g.w, g.pad))
            .collect();
        let m = im2col(g, &xpad);
        let y = &m * &wt;
        let ys = y.as_slice();
        out[b * g.co * plane..(b + 1) * g.co * plane].copy_from_slice(ys);
    }
    out
}

/// Gradients w.r.t. input and kernel for `conv2d_fwd`. Either side can be
/// skipped when the corresponding tape node takes no gradient.
pub fn conv2d_bwd(
    g: ConvGeom,
    x: &[f64],
    wgt: &[f64],
    dy: &[f64],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    if !need_dx && !need_dw {
        return (None, None);
    }
    let (ph, pw) = (g.h + 2 * g.pad, g.w + 2 * g.pad);
    let k = g.ci * g.kh * g.kw;
    let plane = g.oh * g.ow;
    let mut dx = need_dx.then(|| vec![0.0; g.n * g.ci * g.h * g.w]);
    let mut dwt = need_dw.then(|| nalgebra::DMatrix::<f64>::zeros(g.co, k));
    let wt_t = need_dx
        .then(|| nalgebra::DMatrix::<f64>::from_column_slice(k, g.co, wgt).transpose());
    for b in 0..g.n {
        let dym = nalgebra::DMatrix::<f64>::from_column_slice(
            plane,
            g.co,
            &dy[b * g.co * plane..(b + 1) * g.co * plane],
        );
        if let Some(dwt) = dwt.as_mut() {
            let xpad: Vec<Vec<f64>> = (0..g.ci)
                .map(|c| {
                    pad_zero_plane(&x[(b * g.ci + c) * g.h * g.w..][..g.h * g.w], g.h, g.w, g.pad)
                })
                .collect();
            let m = im2col(g, &xpad);
            dwt.gemm(1.0, &dym.transpose(), &m, 1.0);
        }
        if let (Some(dx), Some(wt_t)) = (dx.as_mut(), wt_t.as_ref()) {
            let dm = &dym * wt_t;
            let ds = dm.as_slice();
            let mut dxpad = vec![vec![0.0; ph * pw]; g.ci];
            let mut j = 0;
            for dpad in dxpad.iter_mut().take(g.ci) {
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let src = &ds[j * plane..(j + 1) * plane];
                        for oy in 0..g.oh {
                            let base = (oy * g.stride + ky) * pw + kx;
                            let row = &src[oy * g.ow..(oy + 1) * g.ow];
                            if g.stride == 1 {
                                axpy(&mut dpad[base..base + g.ow], 1.0, row);
                            } else {
                                for (ox, &v) in row.iter().enumerate() {
                                    dpad[base + ox * g.stride] += v;
                                }
                            }
                        }
                        j += 1;
                    }
                }
            }
            for ci in 0..g.ci {
                let dpad = &dxpad[ci];
                let dst = &mut dx[(b * g.ci + ci) * g.h * g.w..][..g.h * g.w];
                for y in 0..g.h {
                    let src = &dpad[(y + g.pad) * pw + g.pad..][..g.w];
                    for (d, s) in dst[y * g.w..][..g.w].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
    let dw = dwt.map(|dwt| {
        let mut dw = vec![0.0; g.co * k];
        for co in 0..g.co {
            for kk in 0..k {
                dw[co * k + kk] = dwt[(co, kk)];
            }
        }
        dw
    });
    (dx, dw)
}

/// Same-size blur: one 2-D kernel applied to every channel, reflect padding.
/// Kernel extents must be odd so the output aligns with the input.
pub fn blur_same_fwd(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    k: &[f64],
    (kh, kw): (usize, usize),
) -> Vec<f64> {
    let (ry, rx) = (kh / 2, kw / 2);
    let ytab: Vec<usize> = (0..h + kh - 1)
        .map(|i| reflect(i as isize - ry as isize, h))
        .collect();
    let xtab: Vec<usize> = (0..w + kw - 1)
        .map(|i| reflect(i as isize - rx as isize, w))
        .collect();
    let mut out = vec![0.0; n * c * h * w];
    for p in 0..n * c {
        let plane = &x[p * h * w..][..h * w];
        let oplane = &mut out[p * h * w..][..h * w];
        for y in 0..h {
            for ky in 0..kh {
                let srow = &plane[ytab[y + ky] * w..][..w];
                let krow = &k[ky * kw..][..kw];
                let orow = &mut oplane[y * w..][..w];
                for (kx, &kv) in krow.iter().enumerate() {
                    if kv == 0.0 {
                        continue;
                    }
                    for xo in 0..w {
                        orow[xo] += kv * srow[xtab[xo + kx]];
                    }
                }
            }
        }
    }
    out
}

/// Gradients w.r.t. input and kernel for `blur_same_fwd`. Either side can
/// be skipped when the corresponding tape node takes no gradient.
pub fn blur_same_bwd(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    k: &[f64],
    (kh, kw): (usize, usize),
    dy: &[f64],
    need_dx: bool,
    need_dk: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    if !need_dx && !need_dk {
        return (None, None);
    }
    let (ry, rx) = (kh / 2, kw / 2);
    let ytab: Vec<usize> = (0..h + kh - 1)
        .map(|i| reflect(i as isize - ry as isize, h))
        .collect();
    let xtab: Vec<usize> = (0..w + kw - 1)
        .map(|i| reflect(i as isize - rx as isize, w))
        .collect();
    let mut dx = need_dx.then(|| vec![0.0; n * c * h * w]);
    let mut dk = need_dk.then(|| vec![0.0; kh * kw]);
    for p in 0..n * c {
        let plane = &x[p * h * w..][..h * w];
        let dplane = &dy[p * h * w..][..h * w];
        for y in 0..h {
            let drow = &dplane[y * w..][..w];
            for ky in 0..kh {
                let sy = ytab[y + ky];
                let srow = &plane[sy * w..][..w];
                for kx in 0..kw {
                    if let Some(dk) = dk.as_mut() {
                        let mut acc = 0.0;
                        for (xo, &d) in drow.iter().enumerate() {
                            acc += srow[xtab[xo + kx]] * d;
                        }
                        dk[ky * kw + kx] += acc;
                    }
                    if let Some(dx) = dx.as_mut() {
                        let kv = k[ky * kw + kx];
                        if kv != 0.0 {
                            let dxp = &mut dx[p * h * w..][..h * w];
                            for (xo, &d) in drow.iter().enumerate() {
                                dxp[sy * w + xtab[xo + kx]] += kv * d;
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dk)
}

/// Source coordinate for align-corners-false sampling, clamped to the valid
/// range: src = clamp((dst + 0.5) * in/out - 0.5, 0, in - 1).
fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|d| {
            let src = ((d as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5)
                .clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn resize_bilinear_fwd(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let ytaps = bilinear_taps(h, oh);
    let xtaps = bilinear_taps(w, ow);
    let mut out = vec![0.0; n * c * oh * ow];
    for p in 0..n * c {
        let plane = &x[p * h * w..][..h * w];
        let oplane = &mut out[p * oh * ow..][..oh * ow];
        for (oy, &(y0, y1, fy)) in ytaps.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xtaps.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                oplane[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn resize_bilinear_bwd(
    (n, c, h, w): (usize, usize, usize, usize),
    (oh, ow): (usize, usize),
    dy: &[f64],
) -> Vec<f64> {
    let ytaps = bilinear_taps(h, oh);
    let xtaps = bilinear_taps(w, ow);
    let mut dx = vec![0.0; n * c * h * w];
    for p in 0..n * c {
        let dplane = &dy[p * oh * ow..][..oh * ow];
        let dxp = &mut dx[p * h * w..][..h * w];
        for (oy, &(y0, y1, fy)) in ytaps.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xtaps.iter().enumerate() {
                let d = dplane[oy * ow + ox];
                dxp[y0 * w + x0] += d * (1.0 - fy) * (1.0 - fx);
                dxp[y0 * w + x1] += d * (1.0 - fy) * fx;
                dxp[y1 * w + x0] += d * fy * (1.0 - fx);
                dxp[y1 * w + x1] += d * fy * fx;
            }
        }
    }
    dx
}

fn nearest_taps(n_in: usize, n_out: usize) -> Vec<usize> {
    (0..n_out)
        .map(|d| {
            let src = (d as f64 + 0.5) * n_in as f64 / n_out as f64;
            (src.floor() as usize).min(n_in - 1)
        })
        .collect()
}

pub fn resize_nearest_fwd(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let ytaps = nearest_taps(h, oh);
    let xtaps = nearest_taps(w, ow);
    let mut out = vec![0.0; n * c * oh * ow];
    for p in 0..n * c {
        let plane = &x[p * h * w..][..h * w];
        let oplane = &mut out[p * oh * ow..][..oh * ow];
        for (oy, &sy) in ytaps.iter().enumerate() {
            for (ox, &sx) in xtaps.iter().enumerate() {
                oplane[oy * ow + ox] = plane[sy * w + sx];
            }
        }
    }
    out
}

pub fn resize_nearest_bwd(
    (n, c, h, w): (usize, usize, usize, usize),
    (oh, ow): (usize, usize),
    dy: &[f64],
) -> Vec<f64> {
    let ytaps = nearest_taps(h, oh);
    let xtaps = nearest_taps(w, ow);
    let mut dx = vec![0.0; n * c * h * w];
    for p in 0..n * c {
        let dplane = &dy[p * oh * ow..][..oh * ow];
        let dxp = &mut dx[p * h * w..][..h * w];
        for (oy, &sy) in ytaps.iter().enumerate() {
            for (ox, &sx) in xtaps.iter().enumerate() {
                dxp[sy * w + sx] += dplane[oy * ow + ox];
            }
        }
    }
    dx
}

/// Orthonormal DCT-II basis: D[k][n] = c(k) cos(pi (2n+1) k / 16), with
/// c(0) = sqrt(1/8) and c(k>0) = sqrt(2/8). D * D^T = I, so the inverse
/// transform is the transpose.
pub fn dct8_matrix() -> [[f64; 8]; 8] {
    let mut d = [[0.0; 8]; 8];
    for (k, row) in d.iter_mut().enumerate() {
        let ck = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            *v = ck * (std::f64::consts::PI * (2.0 * n as f64 + 1.0) * k as f64 / 16.0).cos();
        }
    }
    d
}

pub fn ceil8(v: usize) -> usize {
    v.div_ceil(8) * 8
}

fn pad_reflect_plane(x: &[f64], h: usize, w: usize, ph: usize, pw: usize) -> Vec<f64> {
    let mut out = vec![0.0; ph * pw];
    for y in 0..ph {
        let sy = reflect(y as isize, h);
        for xo in 0..pw {
            out[y * pw + xo] = x[sy * w + reflect(xo as isize, w)];
        }
    }
    out
}

/// Transforms Y = D X D^T for one 8x8 block held in a larger plane.
fn block_mul(
    src: &[f64],
    dst: &mut [f64],
    stride: usize,
    (by, bx): (usize, usize),
    left: &[[f64; 8]; 8],
    right_t: &[[f64; 8]; 8],
) {
    let mut tmp = [[0.0f64; 8]; 8];
    for u in 0..8 {
        for j in 0..8 {
            let mut acc = 0.0;
            for (nn, lrow) in left[u].iter().enumerate() {
                acc += lrow * src[(by + nn) * stride + bx + j];
            }
            tmp[u][j] = acc;
        }
    }
    for u in 0..8 {
        for v in 0..8 {
            let mut acc = 0.0;
            for j in 0..8 {
                acc += tmp[u][j] * right_t[v][j];
            }
            dst[(by + u) * stride + bx + v] = acc;
        }
    }
}

/// Per-block 8x8 DCT-II over reflect-padded planes. Returns the transformed
/// planes together with the padded extents (multiples of 8).
pub fn block_dct8_fwd(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
) -> (Vec<f64>, usize, usize) {
    let d = dct8_matrix();
    let (ph, pw) = (ceil8(h), ceil8(w));
    let mut out = vec![0.0; n * c * ph * pw];
    for p in 0..n * c {
        let plane = pad_reflect_plane(&x[p * h * w..][..h * w], h, w, ph, pw);
        let oplane = &mut out[p * ph * pw..][..ph * pw];
        for by in (0..ph).step_by(8) {
            for bx in (0..pw).step_by(8) {
                block_mul(&plane, oplane, pw, (by, bx), &d, &d);
            }
        }
    }
    (out, ph, pw)
}

/// Adjoint of `block_dct8_fwd`: inverse-transform the cotangent, then fold
/// the reflect-padded border contributions back onto the source pixels.
pub fn block_dct8_bwd(
    (n, c, h, w): (usize, usize, usize, usize),
    dy: &[f64],
) -> Vec<f64> {
    let d = dct8_matrix();
    let (ph, pw) = (ceil8(h), ceil8(w));
    let mut dt = [[0.0; 8]; 8];
    for (i, row) in d.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            dt[j][i] = *v;
        }
    }
    let mut dx = vec![0.0; n * c * h * w];
    for p in 0..n * c {
        let dplane = &dy[p * ph * pw..][..ph * pw];
        let mut dpad = vec![0.0; ph * pw];
        for by in (0..ph).step_by(8) {
            for bx in (0..pw).step_by(8) {
                block_mul(dplane, &mut dpad, pw, (by, bx), &dt, &dt);
            }
        }
        let dxp = &mut dx[p * h * w..][..h * w];
        for y in 0..ph {
            let sy = reflect(y as isize, h);
            for xo in 0..pw {
                dxp[sy * w + reflect(xo as isize, w)] += dpad[y * pw + xo];
            }
        }
    }
    dx
}

/// Inverse per-block DCT cropping back to (oh, ow).
pub fn block_idct8_fwd(
    y: &[f64],
    (n, c, ph, pw): (usize, usize, usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let d = dct8_matrix();
    let mut dt = [[0.0; 8]; 8];
    for (i, row) in d.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            dt[j][i] = *v;
        }
    }
    let mut out = vec![0.0; n * c * oh * ow];
    for p in 0..n * c {
        let plane = &y[p * ph * pw..][..ph * pw];
        let mut full = vec![0.0; ph * pw];
        for by in (0..ph).step_by(8) {
            for bx in (0..pw).step_by(8) {
                block_mul(plane, &mut full, pw, (by, bx), &dt, &dt);
            }
        }
        let oplane = &mut out[p * oh * ow..][..oh * ow];
        for yy in 0..oh {
            oplane[yy * ow..][..ow].copy_from_slice(&full[yy * pw..][..ow]);
        }
    }
    out
}

/// Adjoint of `block_idct8_fwd`: zero-extend the cotangent to the padded
/// extents, then forward-transform it.
pub fn block_idct8_bwd(
    (n, c, ph, pw): (usize, usize, usize, usize),
    (oh, ow): (usize, usize),
    dy: &[f64],
) -> Vec<f64> {
    let d = dct8_matrix();
    let mut out = vec![0.0; n * c * ph * pw];
    for p in 0..n * c {
        let mut dpad = vec![0.0; ph * pw];
        for yy in 0..oh {
            dpad[yy * pw..][..ow].copy_from_slice(&dy[p * oh * ow + yy * ow..][..ow]);
        }
        let oplane = &mut out[p * ph * pw..][..ph * pw];
        for by in (0..ph).step_by(8) {
            for bx in (0..pw).step_by(8) {
                block_mul(&dpad, oplane, pw, (by, bx), &d, &d);
            }
        }
    }
    out
}

/// Isotropic Gaussian kernel of extent (2*radius+1)^2 with entries
/// proportional to exp(-(i^2+j^2)/(2 tau^2)), normalized to sum 1.
/// tau = 0 degenerates to the delta kernel. The radius must cover the
/// 3-sigma support: radius >= ceil(3 tau) whenever tau > 0.
pub fn gaussian_kernel2d(tau: f64, radius: usize) -> Result<Tensor> {
    if tau < 0.0 || !tau.is_finite() {
        return Err(Error::invalid(format!("gaussian tau must be >= 0, got {tau}")));
    }
    if radius == 0 {
        return Err(Error::invalid("gaussian radius must be positive"));
    }
    if tau > 0.0 && (radius as f64) < (3.0 * tau).ceil() {
        return Err(Error::invalid(format!(
            "gaussian radius {radius} below 3-sigma support for tau {tau}"
        )));
    }
    let k = 2 * radius + 1;
    let mut data = vec![0.0; k * k];
    if tau == 0.0 {
        data[radius * k + radius] = 1.0;
    } else {
        let inv = 1.0 / (2.0 * tau * tau);
        let mut sum = 0.0;
        for i in 0..k {
            let di = i as f64 - radius as f64;
            for j in 0..k {
                let dj = j as f64 - radius as f64;
                let v = (-(di * di + dj * dj) * inv).exp();
                data[i * k + j] = v;
                sum += v;
            }
        }
        for v in &mut data {
            *v /= sum;
        }
    }
    Tensor::from_vec(vec![k, k], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    #[test]
    fn reflect_frozen_values() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(0, 5), 0);
        assert_eq!(reflect(4, 5), 4);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(3, 1), 0);
    }

    #[test]
    fn conv_identity_kernel_preserves_input() {
        let g = ConvGeom::new(&[1, 1, 3, 3], &[1, 1, 1, 1], 1, 0).unwrap();
        let x = vec![1.0; 9];
        assert_eq!(conv2d_fwd(g, &x, &[1.0]), x);
    }

    #[test]
    fn conv_full_window_sums() {
        let g = ConvGeom::new(&[1, 1, 2, 2], &[1, 1, 2, 2], 1, 0).unwrap();
        let out = conv2d_fwd(g, &[1.0, 2.0, 3.0, 4.0], &[1.0; 4]);
        assert_eq!(out, vec![10.0]);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        assert!(ConvGeom::new(&[1, 2, 4, 4], &[3, 1, 3, 3], 1, 0).is_err());
        assert!(ConvGeom::new(&[1, 1, 2, 2], &[1, 1, 3, 3], 1, 0).is_err());
        assert!(ConvGeom::new(&[1, 1, 4, 4], &[1, 1, 3, 3], 0, 0).is_err());
    }

    /// Brute-force cross-correlation used as the oracle for conv2d_fwd.
    fn conv_naive(g: ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.n * g.co * g.oh * g.ow];
        for b in 0..g.n {
            for co in 0..g.co {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut acc = 0.0;
                        for ci in 0..g.ci {
                            for ky in 0..g.kh {
                                for kx in 0..g.kw {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize
                                    {
                                        continue;
                                    }
                                    acc += x[((b * g.ci + ci) * g.h + iy as usize) * g.w
                                        + ix as usize]
                                        * w[((co * g.ci + ci) * g.kh + ky) * g.kw + kx];
                                }
                            }
                        }
                        out[((b * g.co + co) * g.oh + oy) * g.ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut rng = crate::seed::rng(11);
        for &(stride, pad) in &[(1usize, 0usize), (1, 1), (2, 1), (2, 0)] {
            let g = ConvGeom::new(&[2, 3, 7, 6], &[4, 3, 3, 3], stride, pad).unwrap();
            let x: Vec<f64> = (0..2 * 3 * 7 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..4 * 3 * 3 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fast = conv2d_fwd(g, &x, &w);
            let slow = conv_naive(g, &x, &w);
            for (a, b) in fast.iter().zip(&slow) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_identity_and_constancy() {
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let same = resize_bilinear_fwd(&x, (1, 1, 4, 4), (4, 4));
        for (a, b) in same.iter().zip(&x) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        let flat = resize_bilinear_fwd(&vec![0.7; 16], (1, 1, 4, 4), (3, 5));
        for v in flat {
            assert_abs_diff_eq!(v, 0.7, epsilon = 1e-12);
        }
    }

    #[test]
    fn bilinear_ramp_downscale_oracle() {
        // Source coordinate (d + 0.5) * 2 - 0.5 lands on {0.5, 2.5}; on the
        // ramp v(i, j) = 4 i + j the interpolant is exactly 4 y + x.
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let out = resize_bilinear_fwd(&x, (1, 1, 4, 4), (2, 2));
        assert_eq!(out, vec![2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn nearest_identity() {
        let x: Vec<f64> = (0..12).map(|v| v as f64).collect();
        assert_eq!(resize_nearest_fwd(&x, (1, 1, 3, 4), (3, 4)), x);
    }

    #[test]
    fn dct_matches_brute_force_matrix_product() {
        let mut rng = crate::seed::rng(5);
        let x: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (out, ph, pw) = block_dct8_fwd(&x, (1, 1, 8, 8));
        assert_eq!((ph, pw), (8, 8));
        for u in 0..8 {
            let cu = if u == 0 { (1.0f64 / 8.0).sqrt() } else { 0.5 };
            for v in 0..8 {
                let cv = if v == 0 { (1.0f64 / 8.0).sqrt() } else { 0.5 };
                let mut acc = 0.0;
                for i in 0..8 {
                    for j in 0..8 {
                        acc += x[i * 8 + j]
                            * (std::f64::consts::PI * (2.0 * i as f64 + 1.0) * u as f64 / 16.0)
                                .cos()
                            * (std::f64::consts::PI * (2.0 * j as f64 + 1.0) * v as f64 / 16.0)
                                .cos();
                    }
                }
                assert_abs_diff_eq!(out[u * 8 + v], cu * cv * acc, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn dct_roundtrip_is_identity() {
        let mut rng = crate::seed::rng(6);
        // 10x13 exercises the reflect padding to 16x16.
        let x: Vec<f64> = (0..2 * 10 * 13).map(|_| rng.random_range(0.0..1.0)).collect();
        let (coef, ph, pw) = block_dct8_fwd(&x, (1, 2, 10, 13));
        let back = block_idct8_fwd(&coef, (1, 2, ph, pw), (10, 13));
        for (a, b) in back.iter().zip(&x) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn gaussian_kernel_delta_at_zero_tau() {
        let k = gaussian_kernel2d(0.0, 2).unwrap();
        assert_eq!(k.shape(), &[5, 5]);
        assert_eq!(k.data()[12], 1.0);
        assert_eq!(k.data().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn gaussian_kernel_normalized_and_symmetric() {
        let k = gaussian_kernel2d(1.0, 3).unwrap();
        let d = k.data();
        assert_abs_diff_eq!(d.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        // 90-degree rotation symmetry: k[i][j] == k[j][size-1-i].
        for i in 0..7 {
            for j in 0..7 {
                assert_abs_diff_eq!(d[i * 7 + j], d[j * 7 + (6 - i)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn gaussian_kernel_center_matches_direct_sum() {
        let k = gaussian_kernel2d(1.0, 3).unwrap();
        let mut sum = 0.0;
        for i in -3i64..=3 {
            for j in -3i64..=3 {
                sum += (-((i * i + j * j) as f64) / 2.0).exp();
            }
        }
        assert_abs_diff_eq!(k.data()[3 * 7 + 3], 1.0 / sum, epsilon = 1e-12);
    }

    #[test]
    fn gaussian_kernel_rejects_bad_params() {
        assert!(gaussian_kernel2d(-1.0, 3).is_err());
        assert!(gaussian_kernel2d(1.0, 0).is_err());
        assert!(gaussian_kernel2d(2.0, 3).is_err());
    }
}
