//! Helpers shared by the integration test targets.
#![allow(dead_code)]

pub mod gradcheck;

use ckbg::autodiff::{Tape, Var};
use ckbg::kernel_prior::pca::pca_matrix;
use ckbg::kernel_prior::{build_graft, BasisSet};
use ckbg::reparam::BGBParams;
use ckbg::vsr_net::{Block, FlowProvider, GraftConfig, NetConfig, NetParams};
use ckbg::{ConvParams, Precision, Result, Tensor4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(dims: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    Tensor4::from_fn(dims, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

pub fn random_conv(c_out: usize, c_in: usize, k: usize, rng: &mut ChaCha8Rng) -> ConvParams<f64> {
    ConvParams::new(
        Tensor4::from_fn([c_out, c_in, k, k], |_, _, _, _| rng.gen_range(-0.5..0.5)),
        (0..c_out).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        true,
    )
    .unwrap()
}

/// PCA basis of random 3x3 kernels.
pub fn random_basis(rng: &mut ChaCha8Rng) -> BasisSet {
    let columns: Vec<Vec<f64>> = (0..12)
        .map(|_| (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    pca_matrix(&columns, 3).unwrap()
}

/// Train-form block with random main branch, random grafts (with non-zero
/// mixer bias) and an optional identity.
pub fn random_bgb(
    channels: usize,
    grafts: usize,
    inner: usize,
    identity: bool,
    rng: &mut ChaCha8Rng,
) -> BGBParams<f64> {
    let basis = random_basis(rng);
    let main = random_conv(channels, channels, 3, rng);
    let grafts = (0..grafts)
        .map(|_| {
            let mut g = build_graft::<f64, _>(&basis, channels, channels, inner, rng).unwrap();
            g.mix_1x1.weight = Tensor4::from_fn(g.mix_1x1.weight.dims(), |_, _, _, _| {
                rng.gen_range(-0.5..0.5)
            });
            g.mix_1x1.bias = (0..inner).map(|_| rng.gen_range(-0.5..0.5)).collect();
            g
        })
        .collect();
    BGBParams {
        main,
        grafts,
        identity,
    }
}

pub fn small_config(flow: FlowProvider, precision: Precision) -> NetConfig {
    NetConfig {
        channels: 4,
        num_bgb: 2,
        scale: 2,
        graft: GraftConfig {
            clusters: 8,
            inner: 2,
            per_block: 2,
            seed: 0,
            identity: true,
        },
        flow,
        precision,
    }
}

/// Train-form network with every trainable weight and bias redrawn, so no
/// layer (including the zero-initialized output conv) is degenerate.
pub fn random_net(config: &NetConfig, rng: &mut ChaCha8Rng) -> NetParams<f64> {
    let basis = random_basis(rng);
    let mut net = NetParams::<f64>::build(config, Some(&basis), rng.gen()).unwrap();
    for p in net.convs_mut() {
        if !p.trainable {
            continue;
        }
        let fan_in = (p.c_in() * p.kernel_size() * p.kernel_size()) as f64;
        let bound = (3.0 / fan_in).sqrt();
        p.weight = Tensor4::from_fn(p.weight.dims(), |_, _, _, _| rng.gen_range(-bound..bound));
        p.bias = (0..p.c_out()).map(|_| rng.gen_range(-0.1..0.1)).collect();
    }
    net
}

/// Network with the library's own initialization, plus a random output conv
/// and random mixer biases so neither is trivially zero. Unlike
/// [`random_net`], its recurrence stays bounded over long sequences.
pub fn init_net(config: &NetConfig, rng: &mut ChaCha8Rng) -> NetParams<f64> {
    let basis = random_basis(rng);
    let mut net = NetParams::<f64>::build(config, Some(&basis), rng.gen()).unwrap();
    let bound = (6.0 / (net.out.c_in() * 9) as f64).sqrt();
    net.out.weight = Tensor4::from_fn(net.out.weight.dims(), |_, _, _, _| rng.gen_range(-bound..bound));
    for b in &mut net.blocks {
        if let Block::Train(bgb) = b {
            for g in &mut bgb.grafts {
                g.mix_1x1.bias = (0..g.inner_width()).map(|_| rng.gen_range(-0.05..0.05)).collect();
            }
        }
    }
    net
}

pub fn deploy_blocks(net: &NetParams<f64>) -> usize {
    net.blocks
        .iter()
        .filter(|b| matches!(b, Block::Deploy(_)))
        .count()
}

/// Replaces entry `i` of `t`.
pub fn with_entry(t: &Tensor4<f64>, i: usize, v: f64) -> Tensor4<f64> {
    let mut data = t.data().to_vec();
    data[i] = v;
    Tensor4::new(t.dims(), data).unwrap()
}

/// `||a - b|| / max(||a||, ||b||)`, or the absolute norm when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

pub const FD_STEP: f64 = 1e-5;

/// Central-difference check of a scalar function built on a tape. `build`
/// receives one differentiable input per tensor in `inputs` and returns the
/// scalar loss. Returns the worst relative error over the inputs.
pub fn gradient_check(
    inputs: &[Tensor4<f64>],
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> f64 {
    let eval = |xs: &[Tensor4<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.input(x.clone())).collect();
        let loss = build(&mut tape, &vars).unwrap();
        tape.value(loss).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
    let loss = build(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k], x.dims()).into_data();
        let numeric: Vec<f64> = (0..x.len())
            .map(|i| {
                let v = x.data()[i];
                let mut plus = inputs.to_vec();
                plus[k] = with_entry(x, i, v + FD_STEP);
                let mut minus = inputs.to_vec();
                minus[k] = with_entry(x, i, v - FD_STEP);
                (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP)
            })
            .collect();
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}
