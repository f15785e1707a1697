//! Quality metrics and the speed/quality trade-off score.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor4};

/// PSNR of identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Colour space a metric is computed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    #[default]
    Rgb,
    /// BT.601 full-range luma.
    Y,
}

impl FromStr for Space {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(Space::Rgb),
            "y" => Ok(Space::Y),
            other => Err(Error::invalid(format!("unknown colour space {other:?}"))),
        }
    }
}

/// Planes a metric looks at: every channel for RGB, one luma plane per
/// sample for Y. Values in `[0, 1]`.
fn planes<T: Real>(img: &Tensor4<T>, space: Space) -> Result<Vec<Vec<f64>>> {
    let [n, c, _, _] = img.dims();
    match space {
        Space::Rgb => Ok((0..n)
            .flat_map(|b| (0..c).map(move |ch| (b, ch)))
            .map(|(b, ch)| img.plane(b, ch).iter().map(|v| v.as_f64()).collect())
            .collect()),
        Space::Y => {
            if c != 3 {
                return Err(Error::shape(format!("luma needs 3 channels, got {c}")));
            }
            Ok((0..n)
                .map(|b| {
                    let (r, g, bl) = (img.plane(b, 0), img.plane(b, 1), img.plane(b, 2));
                    r.iter()
                        .zip(g)
                        .zip(bl)
                        .map(|((r, g), b)| {
                            0.299 * r.as_f64() + 0.587 * g.as_f64() + 0.114 * b.as_f64()
                        })
                        .collect()
                })
                .collect())
        }
    }
}

fn check_pair<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    if a.is_empty() {
        return Err(Error::shape("metric of an empty image"));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` for images in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>, space: Space) -> Result<f64> {
    check_pair(a, b)?;
    let (pa, pb) = (planes(a, space)?, planes(b, space)?);
    let count: usize = pa.iter().map(Vec::len).sum();
    let sse: f64 = pa
        .iter()
        .flatten()
        .zip(pb.iter().flatten())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let mse = sse / count as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of an `h x w` plane.
fn filter_valid(p: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM over every position where the Gaussian window fits,
/// averaged over planes.
pub fn ssim<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>, space: Space) -> Result<f64> {
    check_pair(a, b)?;
    let [_, _, h, w] = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let g = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let (pa, pb) = (planes(a, space)?, planes(b, space)?);
    let mut total = 0.0;
    for (x, y) in pa.iter().zip(&pb) {
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
        let mx = filter_valid(x, h, w, &g);
        let my = filter_valid(y, h, w, &g);
        let sxx = filter_valid(&xx, h, w, &g);
        let syy = filter_valid(&yy, h, w, &g);
        let sxy = filter_valid(&xy, h, w, &g);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / pa.len() as f64)
}

/// `2^psnr / (2^20 * t_ms)`: one more dB is worth twice the time.
pub fn tradeoff_score(psnr: f64, t_ms: f64) -> Result<f64> {
    if !(t_ms > 0.0) || !t_ms.is_finite() {
        return Err(Error::invalid(format!("time must be positive, got {t_ms}")));
    }
    if !psnr.is_finite() {
        return Err(Error::NonFinite("psnr"));
    }
    Ok((psnr - 20.0).exp2() / t_ms)
}

/// Wait imposed by buffering `future_frames` frames at `fps`.
pub fn cache_time_ms(future_frames: usize, fps: f64) -> Result<f64> {
    if !(fps > 0.0) {
        return Err(Error::invalid(format!("fps must be positive, got {fps}")));
    }
    Ok(future_frames as f64 * 1000.0 / fps)
}
