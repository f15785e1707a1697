//! `ckbg`: kernel priors, grafted VSR models, re-parameterization and benchmarks.

mod config;
mod frames;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use ckbg::kernel_prior::{load_kernel_bank, synthetic_teacher_bank, BasisSet};
use ckbg::train_eval::{
    bicubic_baseline, evaluate, latency_report, learn_prior, loss_windows, synth_dataset,
    synth_sequence, tradeoff_score, train_from, train_loop, write_loss_csv, PriorMode, Report,
    Sequence,
};
use ckbg::transport::demo::{count_modes, demo_barycenter_1d, MODE_THRESHOLD};
use ckbg::vsr_net::model_file::{decode_model, load_model, save_model, ModelHeader};
use ckbg::vsr_net::{run_sequence, FlowProvider, Form, NetParams};
use ckbg::{Precision, Real};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use config::{Overrides, RunConfig};

/// Seed offset of the held-out evaluation clips.
const EVAL_SEED: u64 = 0xe7a1;
/// Loss window used in training summaries.
const LOSS_WINDOW: usize = 100;

#[derive(Debug, Parser)]
#[command(name = "ckbg", version, about = "Kernel bypass grafting for online video super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Summarize a kernel bank file.
    BankInfo {
        bank: PathBuf,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Cluster a kernel bank and extract the PCA bases of the centroids.
    Prior {
        #[arg(long)]
        bank: PathBuf,
        /// Output directory for centroids.json and basis.json.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Euclidean mean vs Wasserstein barycenter of six shifted densities, as CSV.
    DemoBary1d {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = ckbg::transport::demo::DEMO_POINTS)]
        points: usize,
    },
    /// Build an untrained train-form model.
    Build {
        /// basis.json from `prior`; required when the model has grafts.
        #[arg(long)]
        basis: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train on synthetic clips, from scratch or from `--model`.
    Train {
        #[arg(long)]
        basis: Option<PathBuf>,
        /// Continue from this train-form model instead of a fresh one.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Loss log as CSV.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        /// JSON training and evaluation report.
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Merge every block of a train-form model into one convolution.
    Reparam {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Super-resolve a directory of PPM frames.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Flow provider; defaults to the model's (ground-truth falls back to zero).
        #[arg(long)]
        flow: Option<FlowProvider>,
        /// Compute precision; defaults to the model's.
        #[arg(long)]
        precision: Option<Precision>,
    },
    /// Quality on held-out synthetic clips plus latency, FLOPs and score.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Future frames the method waits for.
        #[arg(long)]
        future_frames: Option<usize>,
        /// Frame rate of the source video.
        #[arg(long)]
        fps: Option<f64>,
        /// Timed runs (after warm-up).
        #[arg(long)]
        runs: Option<usize>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Trade-off score of a PSNR and a per-frame latency.
    Score {
        #[arg(long)]
        psnr: f64,
        #[arg(long)]
        time_ms: f64,
    },
    /// Write a synthetic kernel bank.
    SynthBank {
        #[arg(long, default_value_t = 8)]
        layers: usize,
        #[arg(long, default_value_t = 16)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic LR clip (and optionally its HR frames) as PPM.
    SynthFrames {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        hr_out: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        frames: usize,
        /// LR frame side.
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        scale: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match init_threads().and_then(|_| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("CKBG_THREADS") {
        let n: usize = v.parse().with_context(|| format!("CKBG_THREADS={v:?}"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::BankInfo { bank, json } => bank_info(&bank, json),
        Command::Prior {
            bank,
            out,
            overrides,
        } => prior(&bank, &out, &overrides.resolve()?),
        Command::DemoBary1d { out, points } => demo_bary1d(&out, points),
        Command::Build {
            basis,
            out,
            overrides,
        } => {
            let cfg = overrides.resolve()?;
            match cfg.net.precision {
                Precision::F32 => build::<f32>(basis.as_deref(), &out, &cfg),
                Precision::F64 => build::<f64>(basis.as_deref(), &out, &cfg),
            }
        }
        Command::Train {
            basis,
            model,
            out,
            loss_csv,
            report,
            overrides,
        } => {
            let cfg = overrides.resolve()?;
            let args = TrainArgs {
                basis: basis.as_deref(),
                model: model.as_deref(),
                out: &out,
                loss_csv: loss_csv.as_deref(),
                report: report.as_deref(),
            };
            match cfg.net.precision {
                Precision::F32 => train::<f32>(&args, &cfg),
                Precision::F64 => train::<f64>(&args, &cfg),
            }
        }
        Command::Reparam { model, out } => reparam(&model, &out),
        Command::Infer {
            model,
            frames,
            out,
            flow,
            precision,
        } => match precision.unwrap_or(peek_header(&model)?.config.precision) {
            Precision::F32 => infer::<f32>(&model, &frames, &out, flow),
            Precision::F64 => infer::<f64>(&model, &frames, &out, flow),
        },
        Command::Bench {
            model,
            report,
            future_frames,
            fps,
            runs,
            overrides,
        } => {
            let mut cfg = overrides.resolve()?;
            if let Some(f) = future_frames {
                cfg.bench.future_frames = f;
            }
            if let Some(f) = fps {
                cfg.bench.fps = f;
            }
            if let Some(r) = runs {
                cfg.bench.timing.runs = r;
            }
            match peek_header(&model)?.config.precision {
                Precision::F32 => bench::<f32>(&model, report.as_deref(), &cfg),
                Precision::F64 => bench::<f64>(&model, report.as_deref(), &cfg),
            }
        }
        Command::Score { psnr, time_ms } => {
            let score = tradeoff_score(psnr, time_ms)?;
            print_json(&json!({ "psnr": psnr, "t_ms": time_ms, "score": score }))
        }
        Command::SynthBank {
            layers,
            channels,
            seed,
            out,
        } => {
            let bank = synthetic_teacher_bank(layers, channels, seed)?;
            bank.write(&out)?;
            print_json(&json!({ "out": out, "count": bank.len(), "k": bank.k }))
        }
        Command::SynthFrames {
            out,
            hr_out,
            frames,
            size,
            scale,
            seed,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let seq: Sequence<f32> =
                synth_sequence(&mut rng, frames, size * scale, size * scale, scale, 1.5)?;
            frames::write_frames(&out, &seq.lr)?;
            if let Some(hr) = &hr_out {
                frames::write_frames(hr, &seq.hr)?;
            }
            print_json(&json!({
                "out": out,
                "frames": frames,
                "lr_size": [size, size],
                "hr_motion": [seq.hr_motion.0, seq.hr_motion.1],
            }))
        }
    }
}

fn print_json<S: Serialize>(v: &S) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn write_json<S: Serialize>(path: &Path, v: &S) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn read_json<S: serde::de::DeserializeOwned>(path: &Path) -> Result<S> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn bank_info(path: &Path, as_json: bool) -> Result<()> {
    let bank = load_kernel_bank(path).with_context(|| format!("loading {}", path.display()))?;
    let values: Vec<f64> = bank.kernels.iter().flat_map(|k| k.values.iter().copied()).collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let zero = bank.kernels.iter().filter(|k| k.is_zero()).count();
    let summary = json!({
        "count": bank.len(),
        "k": bank.k,
        "teacher_id": bank.metadata.teacher_id,
        "layers": bank.metadata.layers,
        "zero_kernels": zero,
        "values": { "min": min, "max": max, "mean": mean, "std": std },
    });
    if as_json {
        return print_json(&summary);
    }
    println!("bank       {}", path.display());
    println!("teacher    {}", bank.metadata.teacher_id);
    println!("kernels    {} ({}x{}), {} all-zero", bank.len(), bank.k, bank.k, zero);
    println!("layers     {}", bank.metadata.layers.len());
    println!("values     min {min:.4} max {max:.4} mean {mean:.4} std {std:.4}");
    Ok(())
}

fn prior(bank_path: &Path, out: &Path, cfg: &RunConfig) -> Result<()> {
    let bank =
        load_kernel_bank(bank_path).with_context(|| format!("loading {}", bank_path.display()))?;
    if cfg.train.mode == PriorMode::NoGraft {
        bail!("mode no-graft has no kernel prior");
    }
    let prior = learn_prior(&bank, cfg.train.mode, &cfg.kmeans)?.expect("grafted mode");
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("centroids.json"), &prior.centroids)?;
    write_json(&out.join("basis.json"), &prior.basis)?;
    print_json(&json!({
        "config": cfg,
        "clusters": prior.centroids.len(),
        "degenerate": prior.centroids.degenerate,
        "objective_history": prior.centroids.objective_history,
        "final_objective": prior.centroids.final_objective(),
        "bases": prior.basis.len(),
        "probs_sum": prior.basis.probs.iter().sum::<f64>(),
    }))
}

fn demo_bary1d(out: &Path, points: usize) -> Result<()> {
    let demo = demo_barycenter_1d(points)?;
    std::fs::write(out, demo.to_csv()).with_context(|| format!("writing {}", out.display()))?;
    print_json(&json!({
        "out": out,
        "points": points,
        "euclidean_modes": count_modes(&demo.euclidean, MODE_THRESHOLD),
        "barycenter_modes": count_modes(&demo.barycenter, MODE_THRESHOLD),
        "euclidean_mass": demo.euclidean.iter().sum::<f64>(),
        "barycenter_mass": demo.barycenter.iter().sum::<f64>(),
    }))
}

fn load_basis(path: Option<&Path>, needed: bool) -> Result<Option<BasisSet>> {
    match path {
        Some(p) => Ok(Some(read_json(p)?)),
        None if needed => bail!("this model has grafts: pass --basis (from `ckbg prior`)"),
        None => Ok(None),
    }
}

fn build<T: Real>(basis: Option<&Path>, out: &Path, cfg: &RunConfig) -> Result<()> {
    let net_cfg = cfg.train.mode.net_config(&cfg.net);
    let basis = load_basis(basis, net_cfg.graft.per_block > 0)?;
    let net: NetParams<T> = NetParams::build(&net_cfg, basis.as_ref(), cfg.seed)?;
    save_model(out, &net, cfg.seed)?;
    print_json(&json!({
        "config": cfg,
        "out": out,
        "params": net.param_count(),
        "trainable_params": net.trainable_param_count(),
    }))
}

struct TrainArgs<'a> {
    basis: Option<&'a Path>,
    model: Option<&'a Path>,
    out: &'a Path,
    loss_csv: Option<&'a Path>,
    report: Option<&'a Path>,
}

fn eval_set<T: Real>(cfg: &RunConfig) -> Result<Vec<Sequence<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ EVAL_SEED);
    Ok(synth_dataset(&cfg.eval, &mut rng)?)
}

fn train<T: Real>(args: &TrainArgs<'_>, cfg: &RunConfig) -> Result<()> {
    let outcome = match args.model {
        Some(m) => {
            let (net, _) = load_model::<T>(m)?;
            if net.form() != Form::Train {
                bail!("{} is a deploy-form model; train needs the train form", m.display());
            }
            train_from(net, &cfg.train)?
        }
        None => {
            let net_cfg = cfg.train.mode.net_config(&cfg.net);
            let basis = load_basis(args.basis, net_cfg.graft.per_block > 0)?;
            train_loop::<T>(&cfg.net, &cfg.train, basis.as_ref())?
        }
    };
    save_model(args.out, &outcome.net, cfg.seed)?;
    if let Some(p) = args.loss_csv {
        let f = std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
        write_loss_csv(std::io::BufWriter::new(f), &outcome.log)?;
    }
    let data = eval_set::<T>(cfg)?;
    let metrics = evaluate(&outcome.net, &data, cfg.bench.space)?;
    let bicubic = bicubic_baseline(&data, cfg.net.scale, cfg.bench.space)?;
    let window = LOSS_WINDOW.min(outcome.log.len());
    let (first, last) = loss_windows(&outcome.log, window).unwrap_or((f64::NAN, f64::NAN));
    let report = json!({
        "config": cfg,
        "out": args.out,
        "iterations": outcome.log.len(),
        "loss_first_window": first,
        "loss_last_window": last,
        "eval": metrics,
        "bicubic": bicubic,
        "gain_db": metrics.psnr - bicubic.psnr,
    });
    if let Some(p) = args.report {
        write_json(p, &report)?;
    }
    print_json(&report)
}

fn peek_header(path: &Path) -> Result<ModelHeader> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(decode_model::<f32>(&bytes)
        .with_context(|| format!("decoding {}", path.display()))?
        .1)
}

fn reparam(model: &Path, out: &Path) -> Result<()> {
    let header = peek_header(model)?;
    let before = header.config.clone();
    let (params, flops_train, flops_deploy) = match header.config.precision {
        Precision::F32 => reparam_as::<f32>(model, out, header.seed)?,
        Precision::F64 => reparam_as::<f64>(model, out, header.seed)?,
    };
    print_json(&json!({
        "config": before,
        "out": out,
        "params": params,
        "flops_per_lr_pixel_train": flops_train,
        "flops_per_lr_pixel_deploy": flops_deploy,
    }))
}

fn reparam_as<T: Real>(model: &Path, out: &Path, seed: u64) -> Result<((usize, usize), usize, usize)> {
    let (net, _) = load_model::<T>(model)?;
    let deploy = net.to_deploy()?;
    save_model(out, &deploy, seed)?;
    Ok((
        (net.param_count(), deploy.param_count()),
        net.complexity(1, 1).flops,
        deploy.complexity(1, 1).flops,
    ))
}

fn infer<T: Real>(model: &Path, frames: &Path, out: &Path, flow: Option<FlowProvider>) -> Result<()> {
    let (mut net, header) = load_model::<T>(model)?;
    net.config.flow = match flow.unwrap_or(net.config.flow) {
        FlowProvider::GroundTruth => FlowProvider::Zero,
        p => p,
    };
    let input: Vec<ckbg::Tensor4<T>> = frames::read_frames(frames)?;
    let sr = run_sequence(&net, &input, None)?;
    frames::write_frames(out, &sr)?;
    let [_, _, h, w] = sr[0].dims();
    print_json(&json!({
        "model": model,
        "form": header.form,
        "flow": net.config.flow,
        "frames": sr.len(),
        "out": out,
        "output_size": [h, w],
    }))
}

fn bench<T: Real>(model: &Path, report_path: Option<&Path>, cfg: &RunConfig) -> Result<()> {
    let (net, header) = load_model::<T>(model)?;
    let mut eval = cfg.eval.clone();
    eval.scale = net.config.scale;
    let data = {
        let mut c = cfg.clone();
        c.eval = eval;
        eval_set::<T>(&c)?
    };
    let metrics = evaluate(&net, &data, cfg.bench.space)?;
    let bicubic = bicubic_baseline(&data, net.config.scale, cfg.bench.space)?;
    let latency = latency_report(
        &net,
        &data[0].lr,
        cfg.bench.future_frames,
        cfg.bench.fps,
        metrics.psnr,
        &cfg.bench.timing,
    )?;
    let report = Report::new(&metrics, &latency);
    let full = json!({
        "model": model,
        "form": header.form,
        "net": net.config,
        "report": report,
        "latency": latency,
        "flops_unit": "multiply-accumulate",
        "bicubic": bicubic,
        "frame_size": [data[0].lr[0].h(), data[0].lr[0].w()],
    });
    if let Some(p) = report_path {
        write_json(p, &report)?;
    }
    print_json(&full)
}
