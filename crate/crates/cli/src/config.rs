//! Run configuration: defaults, then a JSON file, then command-line flags.

use std::path::Path;

use anyhow::{Context, Result};
use ckbg::kernel_prior::KMeansConfig;
use ckbg::train_eval::{PriorMode, Space, SynthConfig, TimingConfig, TrainConfig};
use ckbg::vsr_net::{FlowProvider, NetConfig};
use ckbg::Precision;
use clap::Args;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    /// Future frames a method waits for.
    pub future_frames: usize,
    pub fps: f64,
    pub timing: TimingConfig,
    pub space: Space,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            future_frames: 0,
            fps: 24.0,
            timing: TimingConfig::default(),
            space: Space::Rgb,
        }
    }
}

/// Everything a subcommand may need. `seed` drives clustering, network
/// initialization and training alike.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub net: NetConfig,
    pub kmeans: KMeansConfig,
    pub train: TrainConfig,
    /// Held-out evaluation clips.
    pub eval: SynthConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            net: NetConfig::default(),
            kmeans: KMeansConfig::default(),
            train: TrainConfig::default(),
            eval: SynthConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

/// Flags shared by every subcommand that reads the run configuration.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON config file; flags take precedence over it.
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of kernel clusters M.
    #[arg(long)]
    pub clusters: Option<usize>,
    /// Inner width D of every graft.
    #[arg(long)]
    pub inner: Option<usize>,
    /// Grafts per block.
    #[arg(long)]
    pub grafts: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub num_bgb: Option<usize>,
    #[arg(long)]
    pub scale: Option<usize>,
    /// Prior mode: no-graft, e-kmeans or w-kmeans.
    #[arg(long)]
    pub mode: Option<PriorMode>,
    /// f32 or f64.
    #[arg(long)]
    pub precision: Option<Precision>,
    /// zero, ground-truth or block-matching.
    #[arg(long)]
    pub flow: Option<FlowProvider>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub patch: Option<usize>,
}

impl Overrides {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($flag:ident => $($target:tt)+) => {
                if let Some(v) = self.$flag.clone() {
                    cfg.$($target)+ = v;
                }
            };
        }
        set!(seed => seed);
        set!(clusters => kmeans.clusters);
        set!(inner => net.graft.inner);
        set!(grafts => net.graft.per_block);
        set!(channels => net.channels);
        set!(num_bgb => net.num_bgb);
        set!(scale => net.scale);
        set!(mode => train.mode);
        set!(precision => net.precision);
        set!(flow => net.flow);
        set!(iterations => train.iterations);
        set!(lr => train.lr);
        set!(batch => train.batch);
        set!(patch => train.patch);
        cfg.net.graft.clusters = cfg.kmeans.clusters;
        cfg.kmeans.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        cfg.eval.scale = cfg.net.scale;
        cfg.net.validate()?;
        Ok(cfg)
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}
