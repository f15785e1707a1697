//! Central finite-difference checks of every tape op and of the full
//! recurrent network.

use ckbg::autodiff::{ConvVars, Tape, Var};
use ckbg::ops::Padding;
use ckbg::train_eval::{loss_and_grads, sample_batch, TrainConfig};
use ckbg::vsr_net::FlowProvider;
use ckbg::{ConvParams, FlowField, Precision, Result, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

/// Random instances per op and random networks.
pub const INSTANCES: u64 = 10;

/// Charbonnier against a random target turns any op output into a smooth
/// scalar with non-uniform sensitivities.
fn target_like(dims: [usize; 4], seed: u64) -> Tensor4<f64> {
    random_tensor(dims, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xfeed))
}

fn against(tape: &mut Tape<f64>, y: Var, t: &Tensor4<f64>) -> Result<Var> {
    let gt = tape.constant(t.clone());
    tape.charbonnier(y, gt, 1e-3)
}

/// Worst relative error per op over [`INSTANCES`] random instances.
pub fn op_errors() -> Vec<(&'static str, f64)> {
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    let mut record = |name: &'static str, err: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some(slot) => slot.1 = slot.1.max(err),
        None => worst.push((name, err)),
    };
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ci, co) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let k = if seed % 2 == 0 { 3 } else { 1 };
        let x = random_tensor([2, ci, 5, 4], &mut rng);
        let w = random_tensor([co, ci, k, k], &mut rng);
        let b = random_tensor([1, co, 1, 1], &mut rng);
        for (name, padding) in [("conv2d same", Padding::Same), ("conv2d valid", Padding::Valid)] {
            let hw = match (padding, k) {
                (Padding::Valid, 3) => [3, 2],
                _ => [5, 4],
            };
            let t = target_like([2, co, hw[0], hw[1]], seed);
            let err = gradient_check(&[x.clone(), w.clone(), b.clone()], |tape, v| {
                let p = ConvVars {
                    weight: v[1],
                    bias: v[2],
                };
                let y = tape.conv2d_padded(v[0], p, padding)?;
                against(tape, y, &t)
            });
            record(name, err);
        }

        let a = random_tensor([1, 2, 3, 4], &mut rng);
        let a2 = random_tensor([1, 2, 3, 4], &mut rng);
        let t = target_like([1, 2, 5, 6], seed);
        record(
            "pad_zero",
            gradient_check(&[a.clone()], |tape, v| {
                let y = tape.pad_zero(v[0], 1);
                against(tape, y, &t)
            }),
        );
        let t = target_like([1, 4, 3, 4], seed);
        record(
            "concat",
            gradient_check(&[a.clone(), a2.clone()], |tape, v| {
                let y = tape.concat(v[0], v[1])?;
                against(tape, y, &t)
            }),
        );
        let c = random_tensor([1, 4, 3, 4], &mut rng);
        let t = target_like([1, 1, 6, 8], seed);
        record(
            "pixel_shuffle",
            gradient_check(&[c], |tape, v| {
                let y = tape.pixel_shuffle(v[0], 2)?;
                against(tape, y, &t)
            }),
        );
        let r = if seed % 2 == 0 { 2 } else { 4 };
        let t = target_like([1, 2, 3 * r, 4 * r], seed);
        record(
            "upsample",
            gradient_check(&[a.clone()], |tape, v| {
                let y = tape.upsample(v[0], r)?;
                against(tape, y, &t)
            }),
        );

        let x = random_tensor([2, 2, 5, 5], &mut rng);
        let dx: Vec<f64> = (0..50).map(|_| rng.gen_range(-1.7..1.7)).collect();
        let dy: Vec<f64> = (0..50).map(|_| rng.gen_range(-1.7..1.7)).collect();
        let flow = FlowField::new(2, 5, 5, dx, dy).unwrap();
        let t = target_like([2, 2, 5, 5], seed);
        record(
            "warp",
            gradient_check(&[x.clone()], |tape, v| {
                let y = tape.warp(v[0], &flow)?;
                against(tape, y, &t)
            }),
        );
        // ReLU inputs kept away from the kink.
        let rx = x.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        record(
            "relu",
            gradient_check(&[rx.clone()], |tape, v| {
                let y = tape.relu(v[0]);
                against(tape, y, &t)
            }),
        );
        let y2 = random_tensor([2, 2, 5, 5], &mut rng);
        record(
            "add",
            gradient_check(&[x.clone(), y2], |tape, v| {
                let y = tape.add(v[0], v[1])?;
                against(tape, y, &t)
            }),
        );
        record(
            "scale",
            gradient_check(&[x.clone()], |tape, v| {
                let y = tape.scale(v[0], -0.7);
                against(tape, y, &t)
            }),
        );
        let zero = Tensor4::scalar(0.3);
        record(
            "sum",
            gradient_check(&[rx], |tape, v| {
                let y = tape.relu(v[0]);
                let s = tape.sum(y);
                against(tape, s, &zero)
            }),
        );
        let gt = random_tensor([2, 2, 5, 5], &mut rng);
        record(
            "charbonnier",
            gradient_check(&[x, gt], |tape, v| tape.charbonnier(v[0], v[1], 1e-2)),
        );
    }
    worst
}

/// Smallest step tried when the stencil straddles a ReLU kink.
const MIN_STEP: f64 = 2e-7;

/// Central difference starting at [`FD_STEP`]. When the estimates at `h` and
/// `h / 2` disagree, a ReLU kink lies inside the stencil and the step is
/// halved. `None` if no step down to `MIN_STEP` is smooth.
fn smooth_difference(f: impl Fn(f64) -> f64) -> Option<(f64, f64)> {
    let d = |h: f64| (f(h) - f(-h)) / (2.0 * h);
    let mut h = FD_STEP;
    let mut a = d(h);
    while h / 2.0 >= MIN_STEP {
        let b = d(h / 2.0);
        if (a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1e-3) {
            return Some((a, h));
        }
        h /= 2.0;
        a = b;
    }
    None
}

#[derive(Debug, Clone, Default)]
pub struct NetworkCheck {
    /// Worst per-layer relative error.
    pub worst: f64,
    pub worst_layer: String,
    pub stencils: usize,
    /// Stencils that needed a step below [`FD_STEP`].
    pub shrunk: usize,
    /// Stencils without any smooth step; counted as failures.
    pub unresolved: usize,
    /// Frozen layers that received a non-zero gradient.
    pub frozen_leaks: usize,
}

/// Gradient of the unrolled clip loss with respect to four weight entries
/// and one bias entry of every trainable layer, for [`INSTANCES`] random
/// networks.
pub fn network_check() -> NetworkCheck {
    let cfg = TrainConfig {
        patch: 8,
        batch: 2,
        frames: 3,
        ..TrainConfig::default()
    };
    let eps = 1e-3;
    let mut out = NetworkCheck::default();
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let net_cfg = small_config(FlowProvider::GroundTruth, Precision::F64);
        let net = random_net(&net_cfg, &mut rng);
        let batch = sample_batch::<f64, _>(&cfg, net_cfg.scale, &mut rng).unwrap();
        let (_, grads) = loss_and_grads(&net, &batch, eps).unwrap();
        let layers: Vec<(String, ConvParams<f64>)> = net
            .named_convs()
            .into_iter()
            .map(|(n, p)| (n, p.clone()))
            .collect();
        for (li, (name, layer)) in layers.iter().enumerate() {
            if !layer.trainable {
                let leaked = grads[li].weight.data().iter().chain(&grads[li].bias).any(|&g| g != 0.0);
                out.frozen_leaks += usize::from(leaked);
                continue;
            }
            let loss_with = |weight: Tensor4<f64>, bias: Vec<f64>| {
                let mut n2 = net.clone();
                let p = &mut n2.convs_mut()[li];
                p.weight = weight;
                p.bias = bias;
                loss_and_grads(&n2, &batch, eps).unwrap().0
            };
            let mut analytic = Vec::new();
            let mut numeric = Vec::new();
            for pick in 0..5 {
                let on_bias = pick == 4;
                let i = rng.gen_range(0..if on_bias { layer.bias.len() } else { layer.weight.len() });
                out.stencils += 1;
                let fd = smooth_difference(|h| {
                    if on_bias {
                        let mut b = layer.bias.clone();
                        b[i] += h;
                        loss_with(layer.weight.clone(), b)
                    } else {
                        let w = with_entry(&layer.weight, i, layer.weight.data()[i] + h);
                        loss_with(w, layer.bias.clone())
                    }
                });
                let Some((fd, h)) = fd else {
                    out.unresolved += 1;
                    continue;
                };
                out.shrunk += usize::from(h < FD_STEP);
                numeric.push(fd);
                analytic.push(if on_bias { grads[li].bias[i] } else { grads[li].weight.data()[i] });
            }
            let err = rel_err(&analytic, &numeric);
            if err >= out.worst {
                out.worst = err;
                out.worst_layer = format!("seed {seed} {name}");
            }
        }
    }
    out
}
