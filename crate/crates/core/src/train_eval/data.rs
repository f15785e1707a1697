//! Synthetic video sequences with known motion.
//!
//! Each sequence samples one continuous procedural texture (random
//! sinusoids plus soft-edged discs) translated by a constant HR flow `f` per
//! frame, so `hr_t(p) = hr_{t-1}(p + f)` holds exactly. LR frames are an
//! antialiased bicubic downsample of the HR frames and carry flow `f / r`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{FlowField, Real, Tensor4};

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    let ax = x.abs();
    if ax <= 1.0 {
        1.5 * ax.powi(3) - 2.5 * ax * ax + 1.0
    } else if ax < 2.0 {
        -0.5 * ax.powi(3) + 2.5 * ax * ax - 4.0 * ax + 2.0
    } else {
        0.0
    }
}

/// Taps `(index, weight)` per output sample of a 1-D bicubic resize from
/// `len_in` to `len_out`; the kernel is widened by the scale when shrinking.
/// Indices are clamped to the border and weights sum to one.
pub fn bicubic_taps(len_in: usize, len_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = len_out as f64 / len_in as f64;
    let width = if scale < 1.0 { 1.0 / scale } else { 1.0 };
    (0..len_out)
        .map(|o| {
            let u = (o as f64 + 0.5) / scale - 0.5;
            let reach = 2.0 * width;
            let lo = (u - reach).floor() as isize;
            let hi = (u + reach).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = (lo..=hi)
                .filter_map(|j| {
                    let wgt = cubic((u - j as f64) / width) / width;
                    (wgt != 0.0).then(|| (j.clamp(0, len_in as isize - 1) as usize, wgt))
                })
                .collect();
            let s: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= s);
            taps
        })
        .collect()
}

/// Separable bicubic resize of every plane to `out_h x out_w`.
pub fn bicubic_resize<T: Real>(img: &Tensor4<T>, out_h: usize, out_w: usize) -> Result<Tensor4<T>> {
    let [n, c, h, w] = img.dims();
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::shape("bicubic resize to or from an empty image"));
    }
    let ty = bicubic_taps(h, out_h);
    let tx = bicubic_taps(w, out_w);
    let mut out = vec![T::zero(); n * c * out_h * out_w];
    let mut rows = vec![0.0f64; h * out_w];
    for b in 0..n {
        for ch in 0..c {
            let plane = img.plane(b, ch);
            for y in 0..h {
                for (x, taps) in tx.iter().enumerate() {
                    rows[y * out_w + x] =
                        taps.iter().map(|&(j, wt)| plane[y * w + j].as_f64() * wt).sum();
                }
            }
            let base = (b * c + ch) * out_h * out_w;
            for (y, taps) in ty.iter().enumerate() {
                for x in 0..out_w {
                    let v: f64 = taps.iter().map(|&(j, wt)| rows[j * out_w + x] * wt).sum();
                    out[base + y * out_w + x] = T::cast(v);
                }
            }
        }
    }
    Tensor4::new([n, c, out_h, out_w], out)
}

pub fn bicubic_downsample<T: Real>(img: &Tensor4<T>, r: usize) -> Result<Tensor4<T>> {
    let [_, _, h, w] = img.dims();
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::shape(format!("{h}x{w} is not divisible by {r}")));
    }
    bicubic_resize(img, h / r, w / r)
}

/// Bicubic upscaling clamped to `[0, 1]`, the reference baseline.
pub fn bicubic_upsample<T: Real>(img: &Tensor4<T>, r: usize) -> Result<Tensor4<T>> {
    let [_, _, h, w] = img.dims();
    Ok(bicubic_resize(img, h * r, w * r)?.clamp(T::zero(), T::one()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub sequences: usize,
    pub frames: usize,
    pub hr_height: usize,
    pub hr_width: usize,
    pub scale: usize,
    /// Largest per-frame motion along each axis, in LR pixels.
    pub max_flow: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            sequences: 4,
            frames: 10,
            hr_height: 64,
            hr_width: 64,
            scale: 4,
            max_flow: 1.5,
        }
    }
}

/// One synthetic clip. `flows[t]` maps frame `t` onto frame `t - 1` in LR
/// pixels (`flows[0]` is zero).
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence<T> {
    pub lr: Vec<Tensor4<T>>,
    pub hr: Vec<Tensor4<T>>,
    pub flows: Vec<FlowField<T>>,
    /// Per-frame HR motion `(dx, dy)`.
    pub hr_motion: (f64, f64),
}

#[derive(Debug, Clone)]
struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
    amp: [f64; 3],
}

#[derive(Debug, Clone)]
struct Disc {
    cx: f64,
    cy: f64,
    radius: f64,
    color: [f64; 3],
}

/// A half-plane `n . p > offset`.
#[derive(Debug, Clone)]
struct Edge {
    nx: f64,
    ny: f64,
    offset: f64,
    color: [f64; 3],
}

/// A continuous RGB texture over the plane.
#[derive(Debug, Clone)]
pub struct Texture {
    waves: Vec<Wave>,
    discs: Vec<Disc>,
    edges: Vec<Edge>,
    bias: [f64; 3],
}

impl Texture {
    /// Random texture covering roughly `extent` HR pixels.
    pub fn random<R: Rng>(rng: &mut R, extent: f64) -> Texture {
        let waves = (0..rng.gen_range(2..5))
            .map(|_| {
                let period: f64 = rng.gen_range(6.0..40.0);
                let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
                let k = std::f64::consts::TAU / period;
                let a: f64 = rng.gen_range(0.1..0.4);
                Wave {
                    kx: k * theta.cos(),
                    ky: k * theta.sin(),
                    phase: rng.gen_range(0.0..std::f64::consts::TAU),
                    amp: [0, 1, 2].map(|_| a * rng.gen_range(0.4..1.0)),
                }
            })
            .collect();
        let discs = (0..rng.gen_range(3..9))
            .map(|_| Disc {
                cx: rng.gen_range(-0.25..1.25) * extent,
                cy: rng.gen_range(-0.25..1.25) * extent,
                radius: rng.gen_range(0.05..0.3) * extent,
                color: [0, 1, 2].map(|_| rng.gen_range(-0.8..0.8)),
            })
            .collect();
        let edges = (0..rng.gen_range(1..4))
            .map(|_| {
                let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                Edge {
                    nx: theta.cos(),
                    ny: theta.sin(),
                    offset: rng.gen_range(0.0..1.0) * extent,
                    color: [0, 1, 2].map(|_| rng.gen_range(-0.6..0.6)),
                }
            })
            .collect();
        Texture {
            waves,
            discs,
            edges,
            bias: [0, 1, 2].map(|_| rng.gen_range(-0.3..0.3)),
        }
    }

    /// RGB value in `(0, 1)` at continuous position `(x, y)`.
    pub fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        let mut v = self.bias;
        for wv in &self.waves {
            let s = (wv.kx * x + wv.ky * y + wv.phase).sin();
            for c in 0..3 {
                v[c] += wv.amp[c] * s;
            }
        }
        for d in &self.discs {
            let dist = ((x - d.cx).powi(2) + (y - d.cy).powi(2)).sqrt();
            // one-pixel linear ramp at the rim
            let cover = (d.radius - dist + 0.5).clamp(0.0, 1.0);
            for c in 0..3 {
                v[c] += cover * d.color[c];
            }
        }
        for e in &self.edges {
            let cover = (e.nx * x + e.ny * y - e.offset + 0.5).clamp(0.0, 1.0);
            for c in 0..3 {
                v[c] += cover * e.color[c];
            }
        }
        v.map(|s| 0.5 + 0.45 * s.tanh())
    }

    pub fn render<T: Real>(&self, h: usize, w: usize, ox: f64, oy: f64) -> Tensor4<T> {
        let mut data = vec![T::zero(); 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let v = self.sample(x as f64 + ox, y as f64 + oy);
                for c in 0..3 {
                    data[(c * h + y) * w + x] = T::cast(v[c]);
                }
            }
        }
        Tensor4::new([1, 3, h, w], data).expect("rendered values are finite")
    }
}

/// One clip of `frames` frames at `hr_h x hr_w`, deterministic in `rng`.
pub fn synth_sequence<T: Real, R: Rng>(
    rng: &mut R,
    frames: usize,
    hr_h: usize,
    hr_w: usize,
    scale: usize,
    max_flow: f64,
) -> Result<Sequence<T>> {
    if frames == 0 || hr_h == 0 || hr_w == 0 || hr_h % scale != 0 || hr_w % scale != 0 {
        return Err(Error::shape(format!(
            "invalid clip: {frames} frames of {hr_h}x{hr_w} at scale {scale}"
        )));
    }
    let tex = Texture::random(rng, hr_h.max(hr_w) as f64);
    let lr_flow = (
        rng.gen_range(-max_flow..=max_flow),
        rng.gen_range(-max_flow..=max_flow),
    );
    let motion = (lr_flow.0 * scale as f64, lr_flow.1 * scale as f64);
    let (lh, lw) = (hr_h / scale, hr_w / scale);
    let mut seq = Sequence {
        lr: Vec::with_capacity(frames),
        hr: Vec::with_capacity(frames),
        flows: Vec::with_capacity(frames),
        hr_motion: motion,
    };
    for t in 0..frames {
        let hr: Tensor4<T> = tex.render(hr_h, hr_w, t as f64 * motion.0, t as f64 * motion.1);
        seq.lr.push(bicubic_downsample(&hr, scale)?);
        seq.hr.push(hr);
        seq.flows.push(if t == 0 {
            FlowField::zeros(1, lh, lw)
        } else {
            FlowField::uniform(1, lh, lw, T::cast(lr_flow.0), T::cast(lr_flow.1))
        });
    }
    Ok(seq)
}

pub fn synth_dataset<T: Real, R: Rng>(cfg: &SynthConfig, rng: &mut R) -> Result<Vec<Sequence<T>>> {
    (0..cfg.sequences)
        .map(|_| {
            synth_sequence(rng, cfg.frames, cfg.hr_height, cfg.hr_width, cfg.scale, cfg.max_flow)
        })
        .collect()
}

/// Dihedral transform of a clip: optional horizontal flip, vertical flip and
/// transpose, applied to every frame with the flows transformed to match.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Augment {
    pub hflip: bool,
    pub vflip: bool,
    pub transpose: bool,
}

impl Augment {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        Augment {
            hflip: rng.gen_bool(0.5),
            vflip: rng.gen_bool(0.5),
            transpose: rng.gen_bool(0.5),
        }
    }

    pub fn frame<T: Real>(&self, t: &Tensor4<T>) -> Tensor4<T> {
        let [n, c, h, w] = t.dims();
        let (oh, ow) = if self.transpose { (w, h) } else { (h, w) };
        Tensor4::from_fn([n, c, oh, ow], |b, ch, y, x| {
            let (mut sy, mut sx) = if self.transpose { (x, y) } else { (y, x) };
            if self.vflip {
                sy = h - 1 - sy;
            }
            if self.hflip {
                sx = w - 1 - sx;
            }
            t.get(b, ch, sy, sx)
        })
    }

    pub fn flow<T: Real>(&self, f: &FlowField<T>) -> FlowField<T> {
        let (n, h, w) = (f.n(), f.h(), f.w());
        let (oh, ow) = if self.transpose { (w, h) } else { (h, w) };
        let mut dx = Vec::with_capacity(n * oh * ow);
        let mut dy = Vec::with_capacity(n * oh * ow);
        for b in 0..n {
            for y in 0..oh {
                for x in 0..ow {
                    let (mut sy, mut sx) = if self.transpose { (x, y) } else { (y, x) };
                    if self.vflip {
                        sy = h - 1 - sy;
                    }
                    if self.hflip {
                        sx = w - 1 - sx;
                    }
                    let (mut fx, mut fy) = f.at(b, sy, sx);
                    if self.vflip {
                        fy = -fy;
                    }
                    if self.hflip {
                        fx = -fx;
                    }
                    if self.transpose {
                        std::mem::swap(&mut fx, &mut fy);
                    }
                    dx.push(fx);
                    dy.push(fy);
                }
            }
        }
        FlowField::new(n, oh, ow, dx, dy).expect("flow dims are consistent")
    }

    pub fn sequence<T: Real>(&self, s: &Sequence<T>) -> Sequence<T> {
        let (mut mx, mut my) = s.hr_motion;
        if self.vflip {
            my = -my;
        }
        if self.hflip {
            mx = -mx;
        }
        if self.transpose {
            std::mem::swap(&mut mx, &mut my);
        }
        Sequence {
            lr: s.lr.iter().map(|f| self.frame(f)).collect(),
            hr: s.hr.iter().map(|f| self.frame(f)).collect(),
            flows: s.flows.iter().map(|f| self.flow(f)).collect(),
            hr_motion: (mx, my),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::bilinear_warp;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_stays_constant() {
        let img = Tensor4::<f64>::filled([1, 3, 16, 16], 0.3);
        let lr = bicubic_downsample(&img, 4).unwrap();
        assert!(lr.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn ramp_stays_ramp() {
        let img = Tensor4::<f64>::from_fn([1, 1, 8, 32], |_, _, _, x| x as f64);
        let lr = bicubic_downsample(&img, 4).unwrap();
        // interior outputs sit at (i + 0.5) * 4 - 0.5
        for x in 2..6 {
            let want = (x as f64 + 0.5) * 4.0 - 0.5;
            assert!((lr.get(0, 0, 1, x) - want).abs() < 1e-6);
        }
    }

    #[test]
    fn frames_follow_the_flow_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s: Sequence<f64> = synth_sequence(&mut rng, 3, 32, 32, 4, 1.0).unwrap();
        // hr_t(p) = texture(p + t * motion) = hr_{t-1}(p + motion)
        let (mx, my) = s.hr_motion;
        let warped = bilinear_warp(&s.hr[1], &FlowField::uniform(1, 32, 32, -mx, -my)).unwrap();
        let (x, y) = (16, 16);
        for c in 0..3 {
            let approx = warped.get(0, c, y, x);
            assert!((approx - s.hr[0].get(0, c, y, x)).abs() < 0.2);
        }
        assert_eq!(s.flows[1].at(0, 0, 0), (mx / 4.0, my / 4.0));
    }

    #[test]
    fn augment_round_trip_and_flow_sign() {
        let img = Tensor4::<f64>::from_fn([1, 1, 3, 4], |_, _, y, x| (y * 4 + x) as f64);
        let a = Augment {
            hflip: true,
            vflip: false,
            transpose: true,
        };
        let out = a.frame(&img);
        assert_eq!(out.dims(), [1, 1, 4, 3]);
        assert_eq!(out.get(0, 0, 0, 0), img.get(0, 0, 0, 3));
        let f = a.flow(&FlowField::uniform(1, 3, 4, 1.0, 2.0));
        assert_eq!(f.at(0, 0, 0), (2.0, -1.0));
    }
}
