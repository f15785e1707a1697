//! Browser bindings: the 1-D barycenter demo, a bypass-graft block
//! equivalence check and the latency/quality score.
//!
//! Every export returns JSON text or a number so the page needs no glue
//! beyond `JSON.parse`.

use ckbg::kernel_prior::pca::pca_matrix;
use ckbg::kernel_prior::build_graft;
use ckbg::reparam::{collapse_bgb, BGBParams};
use ckbg::train_eval::{cache_time_ms, tradeoff_score};
use ckbg::transport::demo::{average_gaussians, count_modes, demo_config, MODE_THRESHOLD};
use ckbg::{ConvParams, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Largest lattice the page may request.
pub const MAX_POINTS: usize = 512;
/// Largest block width for the equivalence check.
pub const MAX_CHANNELS: usize = 32;

fn invalid(msg: impl Into<String>) -> ckbg::Error {
    ckbg::Error::InvalidArgument(msg.into())
}

#[derive(Debug, Serialize)]
pub struct BaryDemo {
    pub grid: Vec<f64>,
    pub inputs: Vec<Vec<f64>>,
    pub euclidean: Vec<f64>,
    pub barycenter: Vec<f64>,
    pub euclidean_modes: usize,
    pub barycenter_modes: usize,
}

/// `inputs` Gaussians of width `sd` spread evenly over `[0.5 - spread/2,
/// 0.5 + spread/2]`, averaged both ways.
pub fn bary_demo(inputs: usize, sd: f64, spread: f64, points: usize) -> ckbg::Result<BaryDemo> {
    if inputs == 0 || points < 8 || points > MAX_POINTS {
        return Err(invalid(format!(
            "need at least one input and 8..={MAX_POINTS} points"
        )));
    }
    if !(0.0..=0.9).contains(&spread) {
        return Err(invalid("spread must lie in [0, 0.9]"));
    }
    let centers: Vec<f64> = (0..inputs)
        .map(|i| match inputs {
            1 => 0.5,
            n => 0.5 - spread / 2.0 + spread * i as f64 / (n - 1) as f64,
        })
        .collect();
    let d = average_gaussians(&centers, sd, points, &demo_config())?;
    Ok(BaryDemo {
        euclidean_modes: count_modes(&d.euclidean, MODE_THRESHOLD),
        barycenter_modes: count_modes(&d.barycenter, MODE_THRESHOLD),
        grid: d.grid,
        inputs: d.inputs,
        euclidean: d.euclidean,
        barycenter: d.barycenter,
    })
}

#[derive(Debug, Serialize)]
pub struct Equivalence {
    pub channels: usize,
    pub grafts: usize,
    pub inner: usize,
    pub train_params: usize,
    pub deploy_params: usize,
    /// Convolution multiply-adds per output pixel.
    pub train_macs_per_pixel: usize,
    pub deploy_macs_per_pixel: usize,
    pub max_diff_f64: f64,
    pub max_diff_f32: f64,
}

/// Builds a random train-form block, collapses it into one 3x3 conv and
/// compares both on a random input in f64 and f32.
pub fn bgb_check(channels: usize, grafts: usize, inner: usize, seed: u64) -> ckbg::Result<Equivalence> {
    if channels == 0 || channels > MAX_CHANNELS || inner == 0 || inner > MAX_CHANNELS || grafts > 8 {
        return Err(invalid(format!(
            "channels and inner width must be 1..={MAX_CHANNELS}, grafts at most 8"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let columns: Vec<Vec<f64>> = (0..16)
        .map(|_| (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let basis = pca_matrix(&columns, 3)?;
    let main = ConvParams::new(
        Tensor4::from_fn([channels, channels, 3, 3], |_, _, _, _| rng.gen_range(-0.3..0.3)),
        (0..channels).map(|_| rng.gen_range(-0.1..0.1)).collect(),
        true,
    )?;
    let mut graft_list = Vec::with_capacity(grafts);
    for _ in 0..grafts {
        let mut g = build_graft::<f64, _>(&basis, channels, channels, inner, &mut rng)?;
        // Non-zero mixer bias so the border handling is exercised too.
        g.mix_1x1.bias = (0..inner).map(|_| rng.gen_range(-0.2..0.2)).collect();
        graft_list.push(g);
    }
    let bgb = BGBParams {
        main,
        grafts: graft_list,
        identity: true,
    };
    let x = Tensor4::from_fn([1, channels, 12, 12], |_, _, _, _| rng.gen_range(-1.0..1.0));

    let merged = collapse_bgb(&bgb)?;
    let max_diff_f64 = bgb.forward(&x)?.max_abs_diff(&ckbg::ops::conv2d(&x, &merged)?)?;
    let bgb32: BGBParams<f32> = bgb.cast();
    let x32: Tensor4<f32> = x.cast();
    let merged32 = collapse_bgb(&bgb32)?;
    let max_diff_f32 = bgb32.forward(&x32)?.max_abs_diff(&ckbg::ops::conv2d(&x32, &merged32)?)?;

    let c = channels;
    Ok(Equivalence {
        channels,
        grafts,
        inner,
        train_params: bgb.param_count(),
        deploy_params: merged.param_count(),
        train_macs_per_pixel: c * c * 9 + grafts * (inner * c + c * inner * 9),
        deploy_macs_per_pixel: c * c * 9,
        max_diff_f64,
        max_diff_f32,
    })
}

fn js<E: std::fmt::Display>(e: E) -> JsError {
    JsError::new(&e.to_string())
}

fn to_json<S: Serialize>(v: &S) -> Result<String, JsError> {
    serde_json::to_string(v).map_err(js)
}

/// JSON of [`BaryDemo`].
#[wasm_bindgen(js_name = barycenterDemo)]
pub fn barycenter_demo(inputs: usize, sd: f64, spread: f64, points: usize) -> Result<String, JsError> {
    to_json(&bary_demo(inputs, sd, spread, points).map_err(js)?)
}

/// JSON of [`Equivalence`].
#[wasm_bindgen(js_name = bgbEquivalence)]
pub fn bgb_equivalence(channels: usize, grafts: usize, inner: usize, seed: u32) -> Result<String, JsError> {
    to_json(&bgb_check(channels, grafts, inner, seed as u64).map_err(js)?)
}

/// Score of a method with the given PSNR and per-frame run time, after
/// adding the wait for `future_frames` at `fps`.
#[wasm_bindgen(js_name = score)]
pub fn score(psnr: f64, run_ms: f64, future_frames: usize, fps: f64) -> Result<f64, JsError> {
    let t = run_ms + cache_time_ms(future_frames, fps).map_err(js)?;
    tradeoff_score(psnr, t).map_err(js)
}
