//! Pluggable optical-flow providers.
//!
//! A flow for step `t` maps every pixel `p` of frame `t` to `p + flow(p)` in
//! frame `t - 1`, the sampling convention of [`crate::ops::bilinear_warp`].

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{FlowField, Real, Tensor4};

/// Search radius of the block matcher in pixels.
pub const BLOCK_RADIUS: isize = 4;
/// Side of the block compared by the matcher.
pub const BLOCK_SIZE: isize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowProvider {
    Zero,
    GroundTruth,
    BlockMatching,
}

impl FromStr for FlowProvider {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(FlowProvider::Zero),
            "ground-truth" => Ok(FlowProvider::GroundTruth),
            "block-matching" => Ok(FlowProvider::BlockMatching),
            other => Err(Error::invalid(format!("unknown flow provider {other:?}"))),
        }
    }
}

/// Flow from `x_t` back to `x_prev`. `ground_truth` is consulted only by
/// [`FlowProvider::GroundTruth`].
pub fn estimate_flow<T: Real>(
    provider: FlowProvider,
    x_t: &Tensor4<T>,
    x_prev: &Tensor4<T>,
    ground_truth: Option<&FlowField<T>>,
) -> Result<FlowField<T>> {
    if x_t.dims() != x_prev.dims() {
        return Err(Error::shape(format!(
            "flow frames differ: {:?} vs {:?}",
            x_t.dims(),
            x_prev.dims()
        )));
    }
    let [n, _, h, w] = x_t.dims();
    match provider {
        FlowProvider::Zero => Ok(FlowField::zeros(n, h, w)),
        FlowProvider::GroundTruth => {
            let gt = ground_truth
                .ok_or_else(|| Error::invalid("ground-truth flow provider without a flow table"))?;
            if (gt.h(), gt.w()) != (h, w) || !(gt.n() == n || gt.n() == 1) {
                return Err(Error::shape("ground-truth flow does not match the frame"));
            }
            Ok(gt.clone())
        }
        FlowProvider::BlockMatching => Ok(block_matching(x_t, x_prev)),
    }
}

/// Integer displacements minimizing the sum of absolute differences over a
/// `BLOCK_SIZE` block, searched within `BLOCK_RADIUS`. Samples outside the
/// frame are clamped to the border. Ties keep the smaller displacement.
pub fn block_matching<T: Real>(x_t: &Tensor4<T>, x_prev: &Tensor4<T>) -> FlowField<T> {
    let [n, c, h, w] = x_t.dims();
    let (hi, wi) = (h as isize, w as isize);
    let clamp = |v: isize, len: isize| v.clamp(0, len - 1) as usize;
    let half = BLOCK_SIZE / 2;
    // Candidates ordered by length, then row-major, so the first minimum wins ties.
    let mut cands: Vec<(isize, isize)> = (-BLOCK_RADIUS..=BLOCK_RADIUS)
        .flat_map(|dy| (-BLOCK_RADIUS..=BLOCK_RADIUS).map(move |dx| (dy, dx)))
        .collect();
    cands.sort_by_key(|&(dy, dx)| (dy * dy + dx * dx, dy, dx));
    let mut fx = Vec::with_capacity(n * h * w);
    let mut fy = Vec::with_capacity(n * h * w);
    for b in 0..n {
        for y in 0..hi {
            for x in 0..wi {
                let mut best = (f64::INFINITY, 0isize, 0isize);
                for &(dy, dx) in &cands {
                    let mut sad = 0.0;
                    for by in -half..=half {
                        for bx in -half..=half {
                            let (sy, sx) = (clamp(y + by, hi), clamp(x + bx, wi));
                            let (ty, tx) = (clamp(y + by + dy, hi), clamp(x + bx + dx, wi));
                            for ch in 0..c {
                                sad += (x_t.get(b, ch, sy, sx).as_f64()
                                    - x_prev.get(b, ch, ty, tx).as_f64())
                                .abs();
                            }
                        }
                    }
                    if sad < best.0 {
                        best = (sad, dy, dx);
                    }
                }
                fx.push(T::cast(best.2 as f64));
                fy.push(T::cast(best.1 as f64));
            }
        }
    }
    FlowField::new(n, h, w, fx, fy).expect("flow dims are consistent")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texture(shift_x: isize, shift_y: isize) -> Tensor4<f64> {
        Tensor4::from_fn([1, 1, 24, 24], |_, _, y, x| {
            let (x, y) = ((x as isize + shift_x) as f64, (y as isize + shift_y) as f64);
            (0.37 * x).sin() * (0.23 * y).cos() + 0.5 * (0.11 * x * y + 0.3).sin()
        })
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let f = block_matching(&texture(0, 0), &texture(0, 0));
        assert!(f.dx().iter().chain(f.dy()).all(|&v| v == 0.0));
    }

    #[test]
    fn global_shift_is_recovered_in_the_interior() {
        // x_t(p) = x_prev(p + (2, 3))
        let prev = texture(0, 0);
        let cur = texture(2, 3);
        let f = block_matching(&cur, &prev);
        for y in 6..14 {
            for x in 6..14 {
                assert_eq!(f.at(0, y, x), (2.0, 3.0), "at ({y}, {x})");
            }
        }
    }

    #[test]
    fn providers() {
        let a = texture(0, 0);
        let z = estimate_flow(FlowProvider::Zero, &a, &a, None).unwrap();
        assert!(z.dx().iter().all(|&v| v == 0.0));
        assert!(estimate_flow(FlowProvider::GroundTruth, &a, &a, None).is_err());
        assert!("spynet".parse::<FlowProvider>().is_err());
        let gt = FlowField::uniform(1, 24, 24, 1.0, 0.0);
        let got = estimate_flow(FlowProvider::GroundTruth, &a, &a, Some(&gt)).unwrap();
        assert_eq!(got, gt);
    }
}
