//! Forward operators and their vector-Jacobian products.
//!
//! Every operator here is a pure function over [`Tensor4`]. The `*_backward`
//! functions take the upstream gradient and return gradients with respect to
//! the differentiable inputs; [`crate::autodiff::Tape`] wires them together.

use crate::error::{Error, Result};
use crate::tensor::{ConvParams, FlowField, Real, Strided, Tensor4};

/// Spatial padding mode of a stride-1 convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `K / 2` so the output keeps `H x W`.
    Same,
    /// No padding; the output shrinks by `K - 1`.
    Valid,
}

impl Padding {
    fn amount(self, k: usize) -> usize {
        match self {
            Padding::Same => k / 2,
            Padding::Valid => 0,
        }
    }
}

fn check_finite<T: Real>(t: &Tensor4<T>, what: &'static str) -> Result<()> {
    if t.data().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Same-size stride-1 convolution with per-output-channel bias.
pub fn conv2d<T: Real>(input: &Tensor4<T>, params: &ConvParams<T>) -> Result<Tensor4<T>> {
    params.validate()?;
    check_finite(input, "conv2d input")?;
    conv2d_raw(input, &params.weight, &params.bias, Padding::Same)
}

/// Stride-1 convolution with an explicit padding mode.
pub fn conv2d_with<T: Real>(
    input: &Tensor4<T>,
    params: &ConvParams<T>,
    padding: Padding,
) -> Result<Tensor4<T>> {
    params.validate()?;
    check_finite(input, "conv2d input")?;
    conv2d_raw(input, &params.weight, &params.bias, padding)
}

/// Output window for a kernel tap: `(out_lo, out_hi, in_offset)` such that
/// output index `o` in `out_lo..out_hi` reads input `o + in_offset`.
#[inline]
fn tap_range(out_len: usize, in_len: usize, tap: usize, pad: usize) -> (usize, usize, isize) {
    let off = tap as isize - pad as isize;
    let lo = (-off).max(0) as usize;
    let hi = ((in_len as isize - off).min(out_len as isize)).max(0) as usize;
    (lo.min(hi), hi, off)
}

/// Unfolds one sample into a `(C_in * K * K) x (OH * OW)` patch matrix.
fn im2col<T: Real>(x: &[T], c_in: usize, h: usize, w: usize, k: usize, pad: usize, oh: usize, ow: usize, cols: &mut [T]) {
    for ci in 0..c_in {
        let plane = &x[ci * h * w..][..h * w];
        for ky in 0..k {
            let (y_lo, y_hi, y_off) = tap_range(oh, h, ky, pad);
            for kx in 0..k {
                let (x_lo, x_hi, x_off) = tap_range(ow, w, kx, pad);
                let row = &mut cols[((ci * k + ky) * k + kx) * oh * ow..][..oh * ow];
                row.iter_mut().for_each(|v| *v = T::zero());
                for oy in y_lo..y_hi {
                    let iy = (oy as isize + y_off) as usize;
                    let start = (x_lo as isize + x_off) as usize;
                    let len = x_hi - x_lo;
                    row[oy * ow + x_lo..oy * ow + x_hi]
                        .copy_from_slice(&plane[iy * w + start..iy * w + start + len]);
                }
            }
        }
    }
}

/// Adds a patch-matrix gradient back onto one sample's input gradient.
fn col2im<T: Real>(cols: &[T], c_in: usize, h: usize, w: usize, k: usize, pad: usize, oh: usize, ow: usize, gx: &mut [T]) {
    for ci in 0..c_in {
        let plane = &mut gx[ci * h * w..][..h * w];
        for ky in 0..k {
            let (y_lo, y_hi, y_off) = tap_range(oh, h, ky, pad);
            for kx in 0..k {
                let (x_lo, x_hi, x_off) = tap_range(ow, w, kx, pad);
                let row = &cols[((ci * k + ky) * k + kx) * oh * ow..][..oh * ow];
                for oy in y_lo..y_hi {
                    let iy = (oy as isize + y_off) as usize;
                    let start = (x_lo as isize + x_off) as usize;
                    let dst = &mut plane[iy * w + start..iy * w + start + (x_hi - x_lo)];
                    for (d, &g) in dst.iter_mut().zip(&row[oy * ow + x_lo..oy * ow + x_hi]) {
                        *d += g;
                    }
                }
            }
        }
    }
}

/// Whether the patch matrix of a sample is the sample itself.
fn is_pointwise(k: usize, pad: usize) -> bool {
    k == 1 && pad == 0
}

pub(crate) fn conv2d_raw<T: Real>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: &[T],
    padding: Padding,
) -> Result<Tensor4<T>> {
    let [n, c_in, h, w] = input.dims();
    let [c_out, wc_in, k, kw] = weight.dims();
    if wc_in != c_in {
        return Err(Error::shape(format!(
            "conv2d: input has {c_in} channels, weight expects {wc_in}"
        )));
    }
    if k != kw || bias.len() != c_out {
        return Err(Error::shape("conv2d: malformed weight/bias"));
    }
    let pad = padding.amount(k);
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::shape("conv2d: input smaller than kernel"));
    }
    let (oh, ow) = (h + 2 * pad + 1 - k, w + 2 * pad + 1 - k);
    let (kk, p) = (c_in * k * k, oh * ow);
    let mut out = vec![T::zero(); n * c_out * p];
    let mut cols = vec![T::zero(); if is_pointwise(k, pad) { 0 } else { kk * p }];
    let wview = Strided {
        data: weight.data(),
        rs: kk,
        cs: 1,
    };
    for ni in 0..n {
        let sample = &input.data()[ni * c_in * h * w..][..c_in * h * w];
        let b = if is_pointwise(k, pad) {
            sample
        } else {
            im2col(sample, c_in, h, w, k, pad, oh, ow, &mut cols);
            &cols
        };
        let o = &mut out[ni * c_out * p..][..c_out * p];
        for (co, row) in o.chunks_mut(p).enumerate() {
            row.iter_mut().for_each(|v| *v = bias[co]);
        }
        T::gemm(c_out, kk, p, wview, Strided { data: b, rs: p, cs: 1 }, T::one(), o);
    }
    Ok(Tensor4::from_raw([n, c_out, oh, ow], out))
}

/// Gradients of a convolution with respect to input, weight and bias.
pub(crate) fn conv2d_backward<T: Real>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    grad_out: &Tensor4<T>,
    padding: Padding,
    need_input: bool,
    need_params: bool,
) -> (Option<Tensor4<T>>, Option<Tensor4<T>>, Option<Tensor4<T>>) {
    let [n, c_in, h, w] = input.dims();
    let [c_out, _, k, _] = weight.dims();
    let [_, _, oh, ow] = grad_out.dims();
    let pad = padding.amount(k);
    let (kk, p) = (c_in * k * k, oh * ow);
    let pointwise = is_pointwise(k, pad);
    let mut cols = vec![T::zero(); if pointwise { 0 } else { kk * p }];
    let mut gcols = vec![T::zero(); kk * p];
    let mut gx = need_input.then(|| vec![T::zero(); input.len()]);
    let mut gw = need_params.then(|| vec![T::zero(); weight.len()]);
    let mut gb = need_params.then(|| vec![T::zero(); c_out]);
    for ni in 0..n {
        let g = &grad_out.data()[ni * c_out * p..][..c_out * p];
        let sample = &input.data()[ni * c_in * h * w..][..c_in * h * w];
        if let (Some(gw), Some(gb)) = (gw.as_mut(), gb.as_mut()) {
            let x = if pointwise {
                sample
            } else {
                im2col(sample, c_in, h, w, k, pad, oh, ow, &mut cols);
                &cols
            };
            // gW += g * X^T
            T::gemm(
                c_out,
                p,
                kk,
                Strided { data: g, rs: p, cs: 1 },
                Strided { data: x, rs: 1, cs: p },
                T::one(),
                gw,
            );
            for (co, row) in g.chunks(p).enumerate() {
                gb[co] += row.iter().copied().sum::<T>();
            }
        }
        if let Some(gx) = gx.as_mut() {
            // dX = W^T * g
            T::gemm(
                kk,
                c_out,
                p,
                Strided {
                    data: weight.data(),
                    rs: 1,
                    cs: kk,
                },
                Strided { data: g, rs: p, cs: 1 },
                T::zero(),
                &mut gcols,
            );
            let dst = &mut gx[ni * c_in * h * w..][..c_in * h * w];
            if pointwise {
                for (d, &v) in dst.iter_mut().zip(&gcols) {
                    *d += v;
                }
            } else {
                col2im(&gcols, c_in, h, w, k, pad, oh, ow, dst);
            }
        }
    }
    (
        gx.map(|d| Tensor4::from_raw(input.dims(), d)),
        gw.map(|d| Tensor4::from_raw(weight.dims(), d)),
        gb.map(|d| Tensor4::from_raw([1, c_out, 1, 1], d)),
    )
}

/// Zero-pads the two spatial axes by `pad` on every side.
pub fn pad_zero<T: Real>(input: &Tensor4<T>, pad: usize) -> Tensor4<T> {
    let [n, c, h, w] = input.dims();
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = Tensor4::zeros([n, c, ph, pw]);
    let src = input.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        for y in 0..h {
            let s = &src[(plane * h + y) * w..][..w];
            dst[(plane * ph + y + pad) * pw + pad..][..w].copy_from_slice(s);
        }
    }
    out
}

/// Adjoint of [`pad_zero`]: crops `pad` pixels from every side.
pub fn crop<T: Real>(input: &Tensor4<T>, pad: usize) -> Tensor4<T> {
    let [n, c, ph, pw] = input.dims();
    let (h, w) = (ph - 2 * pad, pw - 2 * pad);
    let src = input.data();
    let mut data = Vec::with_capacity(n * c * h * w);
    for plane in 0..n * c {
        for y in 0..h {
            data.extend_from_slice(&src[(plane * ph + y + pad) * pw + pad..][..w]);
        }
    }
    Tensor4::from_raw([n, c, h, w], data)
}

/// Four bilinear taps `(index, weight)` for a sample at `(sx, sy)`; taps
/// outside the `w x h` grid or with zero weight are dropped.
#[inline]
fn bilinear_taps<T: Real>(sx: T, sy: T, w: usize, h: usize) -> ([(usize, T); 4], usize) {
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    let (x0i, y0i) = (x0.as_f64() as isize, y0.as_f64() as isize);
    let one = T::one();
    let cands = [
        (x0i, y0i, (one - fx) * (one - fy)),
        (x0i + 1, y0i, fx * (one - fy)),
        (x0i, y0i + 1, (one - fx) * fy),
        (x0i + 1, y0i + 1, fx * fy),
    ];
    let mut taps = [(0usize, T::zero()); 4];
    let mut len = 0;
    for (xi, yi, wt) in cands {
        if wt != T::zero() && xi >= 0 && yi >= 0 && (xi as usize) < w && (yi as usize) < h {
            taps[len] = (yi as usize * w + xi as usize, wt);
            len += 1;
        }
    }
    (taps, len)
}

fn check_flow<T: Real>(feat: &Tensor4<T>, flow: &FlowField<T>) -> Result<()> {
    let [n, _, h, w] = feat.dims();
    if (flow.h(), flow.w()) != (h, w) || !(flow.n() == n || flow.n() == 1) {
        return Err(Error::shape(format!(
            "warp: flow {}x{}x{} vs feature {:?}",
            flow.n(),
            flow.h(),
            flow.w(),
            feat.dims()
        )));
    }
    Ok(())
}

/// Backward warping: `out(p) = feat(p + flow(p))`, bilinear, zero outside.
///
/// A flow with batch size 1 is broadcast over every sample.
pub fn bilinear_warp<T: Real>(feat: &Tensor4<T>, flow: &FlowField<T>) -> Result<Tensor4<T>> {
    check_flow(feat, flow)?;
    let [n, c, h, w] = feat.dims();
    let src = feat.data();
    let mut out = vec![T::zero(); src.len()];
    for ni in 0..n {
        let fi = if flow.n() == 1 { 0 } else { ni };
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = flow.at(fi, y, x);
                let (taps, len) =
                    bilinear_taps(T::cast(x as f64) + dx, T::cast(y as f64) + dy, w, h);
                for ci in 0..c {
                    let base = (ni * c + ci) * h * w;
                    let mut acc = T::zero();
                    for &(idx, wt) in &taps[..len] {
                        acc += wt * src[base + idx];
                    }
                    out[base + y * w + x] = acc;
                }
            }
        }
    }
    Ok(Tensor4::from_raw(feat.dims(), out))
}

pub(crate) fn bilinear_warp_backward<T: Real>(
    grad_out: &Tensor4<T>,
    flow: &FlowField<T>,
) -> Tensor4<T> {
    let [n, c, h, w] = grad_out.dims();
    let g = grad_out.data();
    let mut gx = vec![T::zero(); g.len()];
    for ni in 0..n {
        let fi = if flow.n() == 1 { 0 } else { ni };
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = flow.at(fi, y, x);
                let (taps, len) =
                    bilinear_taps(T::cast(x as f64) + dx, T::cast(y as f64) + dy, w, h);
                for ci in 0..c {
                    let base = (ni * c + ci) * h * w;
                    let gv = g[base + y * w + x];
                    for &(idx, wt) in &taps[..len] {
                        gx[base + idx] += wt * gv;
                    }
                }
            }
        }
    }
    Tensor4::from_raw(grad_out.dims(), gx)
}

/// Channel concatenation, `a` first.
pub fn concat_channels<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    let [na, ca, ha, wa] = a.dims();
    let [nb, cb, hb, wb] = b.dims();
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(Error::shape(format!(
            "concat: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let hw = ha * wa;
    let mut data = Vec::with_capacity(a.len() + b.len());
    for ni in 0..na {
        data.extend_from_slice(&a.data()[ni * ca * hw..(ni + 1) * ca * hw]);
        data.extend_from_slice(&b.data()[ni * cb * hw..(ni + 1) * cb * hw]);
    }
    Ok(Tensor4::from_raw([na, ca + cb, ha, wa], data))
}

/// Channels `start..start + len` of every sample.
pub fn slice_channels<T: Real>(input: &Tensor4<T>, start: usize, len: usize) -> Result<Tensor4<T>> {
    let [n, c, h, w] = input.dims();
    if start + len > c {
        return Err(Error::shape(format!(
            "slice {start}..{} out of {c} channels",
            start + len
        )));
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(n * len * hw);
    for ni in 0..n {
        data.extend_from_slice(&input.data()[(ni * c + start) * hw..(ni * c + start + len) * hw]);
    }
    Ok(Tensor4::from_raw([n, len, h, w], data))
}

/// Sub-pixel rearrangement `(N, C, H, W) -> (N, C/r², rH, rW)` with
/// `out[n, c, r*h + i, r*w + j] = in[n, c*r² + i*r + j, h, w]`.
pub fn pixel_shuffle<T: Real>(input: &Tensor4<T>, r: usize) -> Result<Tensor4<T>> {
    let [n, c, h, w] = input.dims();
    if r == 0 || c % (r * r) != 0 {
        return Err(Error::shape(format!(
            "pixel_shuffle: {c} channels not divisible by r²={}",
            r * r
        )));
    }
    let co = c / (r * r);
    let (oh, ow) = (h * r, w * r);
    let src = input.data();
    let mut out = vec![T::zero(); src.len()];
    for ni in 0..n {
        for cc in 0..co {
            for i in 0..r {
                for j in 0..r {
                    let ci = cc * r * r + i * r + j;
                    let plane = &src[(ni * c + ci) * h * w..][..h * w];
                    for y in 0..h {
                        let orow = ((ni * co + cc) * oh + y * r + i) * ow;
                        for x in 0..w {
                            out[orow + x * r + j] = plane[y * w + x];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor4::from_raw([n, co, oh, ow], out))
}

/// Inverse of [`pixel_shuffle`], also its adjoint.
pub fn pixel_unshuffle<T: Real>(input: &Tensor4<T>, r: usize) -> Result<Tensor4<T>> {
    let [n, c, oh, ow] = input.dims();
    if r == 0 || oh % r != 0 || ow % r != 0 {
        return Err(Error::shape(format!(
            "pixel_unshuffle: {oh}x{ow} not divisible by r={r}"
        )));
    }
    let (h, w) = (oh / r, ow / r);
    let cu = c * r * r;
    let src = input.data();
    let mut out = vec![T::zero(); src.len()];
    for ni in 0..n {
        for cc in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let ci = cc * r * r + i * r + j;
                    for y in 0..h {
                        let irow = ((ni * c + cc) * oh + y * r + i) * ow;
                        for x in 0..w {
                            out[((ni * cu + ci) * h + y) * w + x] = src[irow + x * r + j];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor4::from_raw([n, cu, h, w], out))
}

/// Per-axis bilinear taps under the half-pixel-centers convention:
/// `src = max((dst + 0.5) / r - 0.5, 0)`, `i0 = floor(src)`,
/// `i1 = min(i0 + 1, len - 1)`, `lambda = src - i0`.
pub fn upsample_taps(len: usize, r: usize) -> Vec<(usize, usize, f64)> {
    (0..len * r)
        .map(|dst| {
            let src = ((dst as f64 + 0.5) / r as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear upsampling by an integer factor, half-pixel centers, edge clamp:
/// `out(y, x) = sum over (ya, wy) in taps_y(y), (xa, wx) in taps_x(x) of
/// wy * wx * in(ya, xa)` with taps from [`upsample_taps`].
pub fn bilinear_upsample<T: Real>(img: &Tensor4<T>, r: usize) -> Result<Tensor4<T>> {
    if r < 1 {
        return Err(Error::invalid("upsample factor must be >= 1"));
    }
    let [n, c, h, w] = img.dims();
    if r == 1 {
        return Ok(img.clone());
    }
    let ty = upsample_taps(h, r);
    let tx = upsample_taps(w, r);
    let (oh, ow) = (h * r, w * r);
    let src = img.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for plane in 0..n * c {
        let s = &src[plane * h * w..][..h * w];
        let o = &mut out[plane * oh * ow..][..oh * ow];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let (ly, my) = (T::cast(ly), T::cast(1.0 - ly));
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let (lx, mx) = (T::cast(lx), T::cast(1.0 - lx));
                o[oy * ow + ox] = my * (mx * s[y0 * w + x0] + lx * s[y0 * w + x1])
                    + ly * (mx * s[y1 * w + x0] + lx * s[y1 * w + x1]);
            }
        }
    }
    Ok(Tensor4::from_raw([n, c, oh, ow], out))
}

pub(crate) fn bilinear_upsample_backward<T: Real>(
    grad_out: &Tensor4<T>,
    in_dims: [usize; 4],
    r: usize,
) -> Tensor4<T> {
    if r == 1 {
        return grad_out.clone();
    }
    let [n, c, h, w] = in_dims;
    let ty = upsample_taps(h, r);
    let tx = upsample_taps(w, r);
    let (oh, ow) = (h * r, w * r);
    let g = grad_out.data();
    let mut gx = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let gp = &g[plane * oh * ow..][..oh * ow];
        let d = &mut gx[plane * h * w..][..h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let (ly, my) = (T::cast(ly), T::cast(1.0 - ly));
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let (lx, mx) = (T::cast(lx), T::cast(1.0 - lx));
                let gv = gp[oy * ow + ox];
                d[y0 * w + x0] += my * mx * gv;
                d[y0 * w + x1] += my * lx * gv;
                d[y1 * w + x0] += ly * mx * gv;
                d[y1 * w + x1] += ly * lx * gv;
            }
        }
    }
    Tensor4::from_raw(in_dims, gx)
}

pub fn relu<T: Real>(input: &Tensor4<T>) -> Tensor4<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub(crate) fn relu_backward<T: Real>(input: &Tensor4<T>, grad_out: &Tensor4<T>) -> Tensor4<T> {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor4::from_raw(input.dims(), data)
}

/// Per-sample Charbonnier term averaged over the batch:
/// `(1/N) * sum_n sqrt(mean_{c,y,x}(sr - gt)^2 + eps)`.
///
/// The squared error is a per-element mean so the term does not scale with
/// frame size; identical inputs give exactly `sqrt(eps)`.
pub fn charbonnier_frame<T: Real>(sr: &Tensor4<T>, gt: &Tensor4<T>, eps: f64) -> Result<f64> {
    if sr.dims() != gt.dims() {
        return Err(Error::shape(format!(
            "charbonnier: {:?} vs {:?}",
            sr.dims(),
            gt.dims()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::invalid("charbonnier eps must be > 0"));
    }
    let n = sr.n();
    let per = sr.len() / n.max(1);
    let mut total = 0.0;
    for ni in 0..n {
        let mse: f64 = sr.data()[ni * per..(ni + 1) * per]
            .iter()
            .zip(&gt.data()[ni * per..(ni + 1) * per])
            .map(|(&a, &b)| {
                let d = a.as_f64() - b.as_f64();
                d * d
            })
            .sum::<f64>()
            / per as f64;
        total += (mse + eps).sqrt();
    }
    Ok(total / n as f64)
}

pub(crate) fn charbonnier_frame_backward<T: Real>(
    sr: &Tensor4<T>,
    gt: &Tensor4<T>,
    eps: f64,
    upstream: f64,
) -> Tensor4<T> {
    let n = sr.n();
    let per = sr.len() / n.max(1);
    let mut g = Vec::with_capacity(sr.len());
    for ni in 0..n {
        let a = &sr.data()[ni * per..(ni + 1) * per];
        let b = &gt.data()[ni * per..(ni + 1) * per];
        let mse: f64 = a
            .iter()
            .zip(b)
            .map(|(&x, &y)| {
                let d = x.as_f64() - y.as_f64();
                d * d
            })
            .sum::<f64>()
            / per as f64;
        let scale = upstream / (n as f64 * (mse + eps).sqrt() * per as f64);
        g.extend(
            a.iter()
                .zip(b)
                .map(|(&x, &y)| T::cast(scale * (x.as_f64() - y.as_f64()))),
        );
    }
    Tensor4::from_raw(sr.dims(), g)
}
