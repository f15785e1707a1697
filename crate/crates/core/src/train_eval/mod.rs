//! Training, evaluation and benchmarking.

pub mod data;
pub mod metrics;
pub mod optim;

use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape};
use crate::error::{Error, Result};
use crate::kernel_prior::{kmeans, pca_centroids, BasisSet, Centroids, KMeansConfig, KernelBank};
use crate::kernel_prior::kmeans::ClusterMetric;
use crate::ops::charbonnier_frame;
use crate::tensor::{FlowField, Real, Tensor4};
use crate::vsr_net::{
    estimate_flow, forward_step, run_sequence, FlowProvider, NetConfig, NetParams, NetVars,
    RecurrentState,
};

pub use data::{
    bicubic_downsample, bicubic_upsample, synth_dataset, synth_sequence, Augment, Sequence,
    SynthConfig,
};
pub use metrics::{cache_time_ms, psnr, ssim, tradeoff_score, Space};
pub use optim::{adam_step, adam_update, cosine_anneal, AdamConfig, AdamState, ConvGrad};

/// Default Charbonnier epsilon.
pub const CHARBONNIER_EPS: f64 = 1e-8;

/// `(1/T) sum_t sqrt(mean((sr_t - gt_t)^2) + eps)`, each frame term averaged
/// over the batch. Identical sequences give exactly `sqrt(eps)`.
pub fn charbonnier_loss<T: Real>(sr: &[Tensor4<T>], gt: &[Tensor4<T>], eps: f64) -> Result<f64> {
    if sr.len() != gt.len() || sr.is_empty() {
        return Err(Error::shape(format!(
            "charbonnier over {} vs {} frames",
            sr.len(),
            gt.len()
        )));
    }
    let mut total = 0.0;
    for (a, b) in sr.iter().zip(gt) {
        total += charbonnier_frame(a, b, eps)?;
    }
    Ok(total / sr.len() as f64)
}

/// Which kernel prior feeds the grafts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PriorMode {
    #[serde(rename = "no-graft")]
    NoGraft,
    #[serde(rename = "e-kmeans")]
    EKMeans,
    #[default]
    #[serde(rename = "w-kmeans")]
    WKMeans,
}

impl FromStr for PriorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no-graft" => Ok(PriorMode::NoGraft),
            "e-kmeans" => Ok(PriorMode::EKMeans),
            "w-kmeans" => Ok(PriorMode::WKMeans),
            other => Err(Error::invalid(format!("unknown prior mode {other:?}"))),
        }
    }
}

impl PriorMode {
    /// Clustering settings for this mode; `None` without grafts.
    pub fn kmeans_config(self, base: &KMeansConfig) -> Option<KMeansConfig> {
        let metric = match self {
            PriorMode::NoGraft => return None,
            PriorMode::EKMeans => ClusterMetric::Euclidean,
            PriorMode::WKMeans => ClusterMetric::Wasserstein,
        };
        Some(KMeansConfig {
            metric,
            ..base.clone()
        })
    }

    /// Network config for this mode: no grafts for [`PriorMode::NoGraft`].
    pub fn net_config(self, base: &NetConfig) -> NetConfig {
        let mut cfg = base.clone();
        if self == PriorMode::NoGraft {
            cfg.graft.per_block = 0;
        }
        cfg
    }
}

/// Clustered kernels and the PCA bases drawn from them.
#[derive(Debug, Clone)]
pub struct Prior {
    pub centroids: Centroids,
    pub basis: BasisSet,
}

/// Runs the clustering and PCA that `mode` asks for.
pub fn learn_prior(bank: &KernelBank, mode: PriorMode, base: &KMeansConfig) -> Result<Option<Prior>> {
    let Some(cfg) = mode.kmeans_config(base) else {
        return Ok(None);
    };
    let centroids = kmeans(bank, &cfg)?;
    let basis = pca_centroids(&centroids)?;
    Ok(Some(Prior { centroids, basis }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// HR patch side; the LR patch is `patch / scale`.
    pub patch: usize,
    pub batch: usize,
    /// Frames per training clip.
    pub frames: usize,
    pub iterations: usize,
    pub lr: f64,
    pub adam: AdamConfig,
    pub eta_min: f64,
    pub charbonnier_eps: f64,
    /// Largest per-frame motion of the training clips, in LR pixels.
    pub max_flow: f64,
    pub seed: u64,
    pub mode: PriorMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            patch: 32,
            batch: 8,
            frames: 5,
            iterations: 2000,
            lr: 2e-4,
            adam: AdamConfig::default(),
            eta_min: 1e-7,
            charbonnier_eps: CHARBONNIER_EPS,
            max_flow: 1.5,
            seed: 0,
            mode: PriorMode::WKMeans,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, scale: usize) -> Result<()> {
        if self.patch == 0 || self.batch == 0 || self.frames == 0 || self.iterations == 0 {
            return Err(Error::invalid("patch, batch, frames and iterations must be positive"));
        }
        if self.patch % scale != 0 {
            return Err(Error::invalid(format!(
                "patch {} is not divisible by scale {scale}",
                self.patch
            )));
        }
        if !(self.lr > 0.0) || !(self.eta_min >= 0.0) || !(self.charbonnier_eps > 0.0) {
            return Err(Error::invalid("lr and charbonnier eps must be positive"));
        }
        if !(self.max_flow >= 0.0) {
            return Err(Error::invalid("max_flow must be non-negative"));
        }
        self.adam.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
}

pub fn write_loss_csv<W: Write>(mut out: W, log: &[LossRecord]) -> Result<()> {
    writeln!(out, "iteration,lr,loss")?;
    for r in log {
        writeln!(out, "{},{:e},{:.9}", r.iteration, r.lr, r.loss)?;
    }
    Ok(())
}

/// Mean loss of the first and last `window` iterations.
pub fn loss_windows(log: &[LossRecord], window: usize) -> Option<(f64, f64)> {
    if window == 0 || log.len() < window {
        return None;
    }
    let mean = |s: &[LossRecord]| s.iter().map(|r| r.loss).sum::<f64>() / s.len() as f64;
    Some((mean(&log[..window]), mean(&log[log.len() - window..])))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub net: NetParams<T>,
    pub log: Vec<LossRecord>,
}

/// One clip batch: per-frame LR, HR and flow tensors stacked over the batch.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub lr: Vec<Tensor4<T>>,
    pub hr: Vec<Tensor4<T>>,
    pub flows: Vec<FlowField<T>>,
}

pub fn sample_batch<T: Real, R: rand::Rng>(
    cfg: &TrainConfig,
    scale: usize,
    rng: &mut R,
) -> Result<Batch<T>> {
    let clips: Vec<Sequence<T>> = (0..cfg.batch)
        .map(|_| {
            let s = synth_sequence(rng, cfg.frames, cfg.patch, cfg.patch, scale, cfg.max_flow)?;
            Ok(Augment::random(rng).sequence(&s))
        })
        .collect::<Result<_>>()?;
    let mut batch = Batch {
        lr: Vec::with_capacity(cfg.frames),
        hr: Vec::with_capacity(cfg.frames),
        flows: Vec::with_capacity(cfg.frames),
    };
    for t in 0..cfg.frames {
        let lr: Vec<_> = clips.iter().map(|c| c.lr[t].clone()).collect();
        let hr: Vec<_> = clips.iter().map(|c| c.hr[t].clone()).collect();
        let fl: Vec<_> = clips.iter().map(|c| c.flows[t].clone()).collect();
        batch.lr.push(Tensor4::stack(&lr)?);
        batch.hr.push(Tensor4::stack(&hr)?);
        batch.flows.push(FlowField::stack(&fl)?);
    }
    Ok(batch)
}

/// Unrolls the network over a batch on a fresh tape and returns the loss
/// value with the gradients of every registered layer.
pub fn loss_and_grads<T: Real>(
    net: &NetParams<T>,
    batch: &Batch<T>,
    eps: f64,
) -> Result<(f64, Vec<ConvGrad<T>>)> {
    let mut tape = Tape::new();
    let vars = net.register(&mut tape);
    let first = batch
        .lr
        .first()
        .ok_or_else(|| Error::invalid("empty batch"))?;
    let [n, _, h, w] = first.dims();
    let mut h_prev = tape.constant(Tensor4::zeros([n, net.config.channels, h, w]));
    let mut total = None;
    for t in 0..batch.lr.len() {
        let prev = if t == 0 { first } else { &batch.lr[t - 1] };
        let flow = estimate_flow(net.config.flow, &batch.lr[t], prev, Some(&batch.flows[t]))?;
        let x = tape.constant(batch.lr[t].clone());
        let (sr, hv) = net.step_on_tape(&mut tape, &vars, x, h_prev, &flow)?;
        let gt = tape.constant(batch.hr[t].clone());
        let term = tape.charbonnier(sr, gt, eps)?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
        h_prev = hv;
    }
    let total = total.expect("at least one frame");
    let loss = tape.scale(total, 1.0 / batch.lr.len() as f64);
    let value = tape.value(loss).data()[0].as_f64();
    let grads = tape.backward(loss)?;
    Ok((value, collect_grads(&tape, &vars, &grads)))
}

fn collect_grads<T: Real>(tape: &Tape<T>, vars: &NetVars, grads: &Gradients<T>) -> Vec<ConvGrad<T>> {
    vars.conv_vars()
        .into_iter()
        .map(|cv| ConvGrad {
            weight: grads.get_or_zeros(cv.weight, tape.value(cv.weight).dims()),
            bias: grads
                .get_or_zeros(cv.bias, tape.value(cv.bias).dims())
                .into_data(),
        })
        .collect()
}

/// Trains a fresh network. The loss is logged every iteration; a non-finite
/// loss aborts with [`Error::Diverged`].
pub fn train_loop<T: Real>(
    net_cfg: &NetConfig,
    cfg: &TrainConfig,
    basis: Option<&BasisSet>,
) -> Result<TrainOutcome<T>> {
    let net_cfg = cfg.mode.net_config(net_cfg);
    let net = NetParams::build(&net_cfg, basis, cfg.seed)?;
    train_from(net, cfg)
}

/// Continues training an existing train-form network.
pub fn train_from<T: Real>(mut net: NetParams<T>, cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    cfg.validate(net.config.scale)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    let mut state = AdamState::default();
    let mut log = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let lr = cosine_anneal(cfg.lr, it, cfg.iterations, cfg.eta_min)?;
        let batch = sample_batch(cfg, net.config.scale, &mut rng)?;
        let (loss, grads) = loss_and_grads(&net, &batch, cfg.charbonnier_eps)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration: it, loss });
        }
        adam_step(&mut net.convs_mut(), &grads, &mut state, lr, &cfg.adam)?;
        log.push(LossRecord {
            iteration: it,
            lr,
            loss,
        });
        if it % 100 == 0 || it + 1 == cfg.iterations {
            log::info!("iteration {it}: loss {loss:.6}, lr {lr:.3e}");
        }
    }
    Ok(TrainOutcome { net, log })
}

/// Quality of a set of SR frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SRMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub space: Space,
}

/// Mean per-frame PSNR and SSIM of `sr` against `gt`, after clamping to `[0, 1]`.
pub fn frame_metrics<T: Real>(sr: &[Tensor4<T>], gt: &[Tensor4<T>], space: Space) -> Result<SRMetrics> {
    if sr.len() != gt.len() || sr.is_empty() {
        return Err(Error::shape("metric over mismatched frame lists"));
    }
    let (mut p, mut s) = (0.0, 0.0);
    for (a, b) in sr.iter().zip(gt) {
        let a = a.clamp(T::zero(), T::one());
        p += psnr(&a, b, space)?;
        s += ssim(&a, b, space)?;
    }
    let n = sr.len() as f64;
    Ok(SRMetrics {
        psnr: p / n,
        ssim: s / n,
        space,
    })
}

/// Streams every sequence through `net` using its flow provider.
pub fn evaluate<T: Real>(net: &NetParams<T>, data: &[Sequence<T>], space: Space) -> Result<SRMetrics> {
    let mut sr = Vec::new();
    let mut gt = Vec::new();
    for s in data {
        sr.extend(run_sequence(net, &s.lr, Some(&s.flows))?);
        gt.extend(s.hr.iter().cloned());
    }
    frame_metrics(&sr, &gt, space)
}

/// Metrics of plain bicubic upscaling on the same data.
pub fn bicubic_baseline<T: Real>(data: &[Sequence<T>], scale: usize, space: Space) -> Result<SRMetrics> {
    let mut sr = Vec::new();
    let mut gt = Vec::new();
    for s in data {
        for (lr, hr) in s.lr.iter().zip(&s.hr) {
            sr.push(bicubic_upsample(lr, scale)?);
            gt.push(hr.clone());
        }
    }
    frame_metrics(&sr, &gt, space)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimingConfig {
    pub warmup: usize,
    pub runs: usize,
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig { warmup: 3, runs: 30 }
    }
}

/// Latency and cost of one network on one frame size. FLOPs are
/// multiply-accumulates; activations count conv output elements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub t_cache_ms: f64,
    pub t_run_ms: f64,
    pub t_ms: f64,
    pub fps: f64,
    pub score: f64,
    pub flops: usize,
    pub activations: usize,
    pub params: usize,
}

/// Times one recurrent step (flow estimation included) over the probe
/// frames, cycling through them. Reports the median of `timing.runs` runs
/// after `timing.warmup` untimed ones; `psnr` feeds the score.
pub fn latency_report<T: Real>(
    net: &NetParams<T>,
    probe: &[Tensor4<T>],
    future_frames: usize,
    source_fps: f64,
    psnr: f64,
    timing: &TimingConfig,
) -> Result<LatencyReport> {
    let first = probe.first().ok_or_else(|| Error::invalid("empty probe set"))?;
    if timing.runs == 0 {
        return Err(Error::invalid("at least one timed run is needed"));
    }
    let t_cache_ms = cache_time_ms(future_frames, source_fps)?;
    let mut state = RecurrentState::initial(&net.config, first);
    let mut times = Vec::with_capacity(timing.runs);
    for i in 0..timing.warmup + timing.runs {
        let x = &probe[i % probe.len()];
        let start = Instant::now();
        // no flow table exists at benchmark time
        let provider = match net.config.flow {
            FlowProvider::GroundTruth => FlowProvider::Zero,
            p => p,
        };
        let flow = estimate_flow(provider, x, &state.prev_frame, None)?;
        let (_, next) = forward_step(net, &state, x, &flow)?;
        let elapsed = start.elapsed().as_secs_f64() * 1000.0;
        state = next;
        if i >= timing.warmup {
            times.push(elapsed);
        }
    }
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    let t_run_ms = if times.len() % 2 == 1 {
        times[mid]
    } else {
        0.5 * (times[mid - 1] + times[mid])
    };
    let t_ms = t_cache_ms + t_run_ms;
    let [_, _, h, w] = first.dims();
    let cx = net.complexity(h, w);
    Ok(LatencyReport {
        t_cache_ms,
        t_run_ms,
        t_ms,
        fps: 1000.0 / t_ms,
        score: tradeoff_score(psnr, t_ms)?,
        flops: cx.flops,
        activations: cx.activations,
        params: cx.params,
    })
}

/// The JSON report written by evaluation commands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub psnr: f64,
    pub ssim: f64,
    pub space: Space,
    pub params: usize,
    pub flops: usize,
    pub activations: usize,
    pub t_run_ms: f64,
    pub t_cache_ms: f64,
    pub score: f64,
}

impl Report {
    pub fn new(metrics: &SRMetrics, latency: &LatencyReport) -> Self {
        Report {
            psnr: metrics.psnr,
            ssim: metrics.ssim,
            space: metrics.space,
            params: latency.params,
            flops: latency.flops,
            activations: latency.activations,
            t_run_ms: latency.t_run_ms,
            t_cache_ms: latency.t_cache_ms,
            score: latency.score,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_net() -> NetConfig {
        NetConfig {
            channels: 4,
            num_bgb: 1,
            scale: 2,
            graft: crate::vsr_net::GraftConfig {
                per_block: 0,
                ..Default::default()
            },
            flow: FlowProvider::GroundTruth,
            ..NetConfig::default()
        }
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig {
            patch: 8,
            batch: 2,
            frames: 2,
            iterations: 6,
            lr: 1e-3,
            mode: PriorMode::NoGraft,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn charbonnier_trivial_cases() {
        let a = Tensor4::<f64>::filled([1, 3, 2, 2], 0.3);
        let l = charbonnier_loss(&[a.clone(), a.clone()], &[a.clone(), a.clone()], 1e-6).unwrap();
        assert!((l - 1e-3).abs() < 1e-15);
        let x = Tensor4::<f64>::filled([1, 1, 1, 1], 0.5);
        let y = Tensor4::<f64>::filled([1, 1, 1, 1], 0.2);
        let l = charbonnier_loss(&[x], &[y], 1e-8).unwrap();
        assert!((l - (0.09f64 + 1e-8).sqrt()).abs() < 1e-12);
        assert!(charbonnier_loss::<f64>(&[], &[], 1e-8).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let a: TrainOutcome<f64> = train_loop(&tiny_net(), &tiny_train(), None).unwrap();
        let b: TrainOutcome<f64> = train_loop(&tiny_net(), &tiny_train(), None).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.net, b.net);
        assert_eq!(a.log.len(), 6);
    }

    #[test]
    fn loss_log_csv() {
        let log = [LossRecord {
            iteration: 0,
            lr: 2e-4,
            loss: 0.5,
        }];
        let mut buf = Vec::new();
        write_loss_csv(&mut buf, &log).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "iteration,lr,loss\n0,2e-4,0.500000000\n");
    }

    #[test]
    fn mode_parsing_and_net_config() {
        assert_eq!("e-kmeans".parse::<PriorMode>().unwrap(), PriorMode::EKMeans);
        assert!("kmeans".parse::<PriorMode>().is_err());
        let cfg = NetConfig::default();
        assert_eq!(PriorMode::NoGraft.net_config(&cfg).graft.per_block, 0);
        assert_eq!(PriorMode::WKMeans.net_config(&cfg), cfg);
        assert!(PriorMode::NoGraft.kmeans_config(&KMeansConfig::default()).is_none());
    }

    #[test]
    fn latency_report_counts() {
        let net: NetParams<f32> = NetParams::build(&tiny_net(), None, 0).unwrap();
        let probe = vec![Tensor4::<f32>::filled([1, 3, 6, 6], 0.5)];
        let timing = TimingConfig { warmup: 1, runs: 3 };
        let r = latency_report(&net, &probe, 0, 24.0, 30.0, &timing).unwrap();
        assert_eq!(r.t_cache_ms, 0.0);
        assert_eq!(r.t_ms, r.t_run_ms);
        assert_eq!(r.params, net.param_count());
        assert!(latency_report(&net, &[], 0, 24.0, 30.0, &timing).is_err());
    }
}
