//! Online recurrent video super-resolution network.
//!
//! Per frame: a head conv lifts the LR frame to features, the previous hidden
//! state is warped by the flow and fused with them, a cascade of bypass-graft
//! blocks refines the result (which becomes the next hidden state), and a
//! pixel-shuffle head reconstructs the residual over a bilinear upsample.
//!
//! One forward definition drives both training and inference: it is written
//! against a [`Tape`], and inference simply never calls `backward`.

pub mod flow;
pub mod model_file;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvVars, Tape, Var};
use crate::error::{Error, Result};
use crate::kernel_prior::{build_graft, BasisSet};
use crate::ops::{self, Padding};
use crate::reparam::{collapse_bgb, BGBParams};
use crate::tensor::{ConvParams, FlowField, Precision, Real, Tensor4};

pub use flow::{block_matching, estimate_flow, FlowProvider};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraftConfig {
    /// Number of kernel clusters `M`.
    pub clusters: usize,
    /// Inner width `D` of every graft.
    pub inner: usize,
    /// Grafts per block.
    pub per_block: usize,
    /// Seed of the basis sampling.
    pub seed: u64,
    /// Add an identity branch to every block.
    pub identity: bool,
}

impl Default for GraftConfig {
    fn default() -> Self {
        GraftConfig {
            clusters: 64,
            inner: 4,
            per_block: 2,
            seed: 0,
            identity: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub channels: usize,
    pub num_bgb: usize,
    pub scale: usize,
    pub graft: GraftConfig,
    pub flow: FlowProvider,
    pub precision: Precision,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            channels: 16,
            num_bgb: 4,
            scale: 4,
            graft: GraftConfig::default(),
            flow: FlowProvider::BlockMatching,
            precision: Precision::F32,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale == 2 || self.scale == 4) {
            return Err(Error::invalid(format!("scale must be 2 or 4, got {}", self.scale)));
        }
        if self.num_bgb == 0 {
            return Err(Error::invalid("at least one block is required"));
        }
        if self.channels == 0 {
            return Err(Error::invalid("channels must be positive"));
        }
        if self.graft.per_block > 0 && self.graft.inner == 0 {
            return Err(Error::invalid("graft inner width must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Form {
    Train,
    Deploy,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Block<T> {
    Train(BGBParams<T>),
    Deploy(ConvParams<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetParams<T> {
    pub config: NetConfig,
    pub head: ConvParams<T>,
    pub fusion: ConvParams<T>,
    pub blocks: Vec<Block<T>>,
    pub up: ConvParams<T>,
    /// Final 3x3 conv to RGB; zero at construction.
    pub out: ConvParams<T>,
}

/// Parameter, MAC and activation counts for one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Complexity {
    pub params: usize,
    /// Multiply-accumulates of all convolutions.
    pub flops: usize,
    /// Output elements of all convolutions.
    pub activations: usize,
}

impl Complexity {
    fn conv<T: Real>(&mut self, p: &ConvParams<T>, out_h: usize, out_w: usize) {
        let k = p.kernel_size();
        self.params += p.param_count();
        self.flops += p.c_out() * p.c_in() * k * k * out_h * out_w;
        self.activations += p.c_out() * out_h * out_w;
    }
}

fn uniform_conv<T: Real>(
    c_out: usize,
    c_in: usize,
    k: usize,
    gain: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ConvParams<T>> {
    let bound = gain * (6.0 / (c_in * k * k) as f64).sqrt();
    let w = Tensor4::from_fn([c_out, c_in, k, k], |_, _, _, _| {
        T::cast(rng.gen_range(-bound..bound))
    });
    ConvParams::new(w, vec![T::zero(); c_out], true)
}

/// Gain of the main-branch init relative to He-uniform; keeps every block
/// close to its identity branch at the start of training.
const MAIN_GAIN: f64 = 0.1;

impl<T: Real> NetParams<T> {
    /// Fresh train-form network. Grafts are sampled from `basis`, which is
    /// required whenever the config asks for grafts.
    pub fn build(config: &NetConfig, basis: Option<&BasisSet>, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let r = config.scale;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut graft_rng = ChaCha8Rng::seed_from_u64(config.graft.seed);
        let head = uniform_conv(c, 3, 3, 1.0, &mut rng)?;
        let fusion = uniform_conv(c, 2 * c, 3, 1.0, &mut rng)?;
        let mut blocks = Vec::with_capacity(config.num_bgb);
        for _ in 0..config.num_bgb {
            let main = uniform_conv(c, c, 3, MAIN_GAIN, &mut rng)?;
            let mut grafts = Vec::with_capacity(config.graft.per_block);
            for _ in 0..config.graft.per_block {
                let basis = basis.ok_or_else(|| {
                    Error::invalid("grafted network needs a basis set")
                })?;
                grafts.push(build_graft(basis, c, c, config.graft.inner, &mut graft_rng)?);
            }
            blocks.push(Block::Train(BGBParams {
                main,
                grafts,
                identity: config.graft.identity,
            }));
        }
        let up = uniform_conv(c * r * r, c, 3, 1.0, &mut rng)?;
        let out = ConvParams::zeros(3, c, 3, true)?;
        let net = NetParams {
            config: config.clone(),
            head,
            fusion,
            blocks,
            up,
            out,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn form(&self) -> Form {
        if self.blocks.iter().all(|b| matches!(b, Block::Deploy(_))) {
            Form::Deploy
        } else {
            Form::Train
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        let c = cfg.channels;
        let r2 = cfg.scale * cfg.scale;
        let expect = |p: &ConvParams<T>, co: usize, ci: usize, name: &str| -> Result<()> {
            p.validate()?;
            if p.c_out() != co || p.c_in() != ci || p.kernel_size() != 3 {
                return Err(Error::shape(format!(
                    "{name}: expected {co}x{ci}x3x3, got {:?}",
                    p.weight.dims()
                )));
            }
            Ok(())
        };
        expect(&self.head, c, 3, "head")?;
        expect(&self.fusion, c, 2 * c, "fusion")?;
        expect(&self.up, c * r2, c, "up")?;
        expect(&self.out, 3, c, "out")?;
        if self.blocks.len() != cfg.num_bgb {
            return Err(Error::shape(format!(
                "config has {} blocks, params have {}",
                cfg.num_bgb,
                self.blocks.len()
            )));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            match b {
                Block::Train(bgb) => {
                    bgb.validate()?;
                    expect(&bgb.main, c, c, &format!("block {i} main"))?;
                }
                Block::Deploy(p) => expect(p, c, c, &format!("block {i}"))?,
            }
        }
        Ok(())
    }

    /// Single-path twin with every block collapsed into one 3x3 conv.
    pub fn to_deploy(&self) -> Result<Self> {
        let mut net = self.clone();
        for b in &mut net.blocks {
            if let Block::Train(bgb) = b {
                *b = Block::Deploy(collapse_bgb(bgb)?);
            }
        }
        Ok(net)
    }

    /// Every conv with a stable name, in registration order.
    pub fn named_convs(&self) -> Vec<(String, &ConvParams<T>)> {
        let mut out = vec![("head".to_string(), &self.head), ("fusion".to_string(), &self.fusion)];
        for (i, b) in self.blocks.iter().enumerate() {
            match b {
                Block::Train(bgb) => {
                    out.push((format!("bgb{i}.main"), &bgb.main));
                    for (j, g) in bgb.grafts.iter().enumerate() {
                        out.push((format!("bgb{i}.graft{j}.mix"), &g.mix_1x1));
                        out.push((format!("bgb{i}.graft{j}.fixed"), &g.fixed_3x3));
                    }
                }
                Block::Deploy(p) => out.push((format!("bgb{i}.conv"), p)),
            }
        }
        out.push(("up".to_string(), &self.up));
        out.push(("out".to_string(), &self.out));
        out
    }

    /// Mutable twin of [`NetParams::named_convs`], same order.
    pub fn convs_mut(&mut self) -> Vec<&mut ConvParams<T>> {
        let mut out = vec![&mut self.head, &mut self.fusion];
        for b in &mut self.blocks {
            match b {
                Block::Train(bgb) => {
                    out.push(&mut bgb.main);
                    for g in &mut bgb.grafts {
                        out.push(&mut g.mix_1x1);
                        out.push(&mut g.fixed_3x3);
                    }
                }
                Block::Deploy(p) => out.push(p),
            }
        }
        out.push(&mut self.up);
        out.push(&mut self.out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_convs().iter().map(|(_, p)| p.param_count()).sum()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.named_convs()
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| p.param_count())
            .sum()
    }

    /// Counts for one `h x w` LR frame. Identity branches cost nothing.
    pub fn complexity(&self, h: usize, w: usize) -> Complexity {
        let mut c = Complexity {
            params: 0,
            flops: 0,
            activations: 0,
        };
        c.conv(&self.head, h, w);
        c.conv(&self.fusion, h, w);
        for b in &self.blocks {
            match b {
                Block::Train(bgb) => {
                    c.conv(&bgb.main, h, w);
                    for g in &bgb.grafts {
                        c.conv(&g.mix_1x1, h + 2, w + 2);
                        c.conv(&g.fixed_3x3, h, w);
                    }
                }
                Block::Deploy(p) => c.conv(p, h, w),
            }
        }
        c.conv(&self.up, h, w);
        let r = self.config.scale;
        c.conv(&self.out, r * h, r * w);
        c
    }

    pub fn cast<U: Real>(&self) -> NetParams<U> {
        NetParams {
            config: NetConfig {
                precision: U::PRECISION,
                ..self.config.clone()
            },
            head: self.head.cast(),
            fusion: self.fusion.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| match b {
                    Block::Train(bgb) => Block::Train(bgb.cast()),
                    Block::Deploy(p) => Block::Deploy(p.cast()),
                })
                .collect(),
            up: self.up.cast(),
            out: self.out.cast(),
        }
    }

    /// Registers every conv on `tape` as parameter leaves.
    pub fn register(&self, tape: &mut Tape<T>) -> NetVars {
        let blocks = self
            .blocks
            .iter()
            .map(|b| match b {
                Block::Train(bgb) => BlockVars::Train {
                    main: tape.conv_params(&bgb.main),
                    grafts: bgb
                        .grafts
                        .iter()
                        .map(|g| (tape.conv_params(&g.mix_1x1), tape.conv_params(&g.fixed_3x3)))
                        .collect(),
                    identity: bgb.identity,
                },
                Block::Deploy(p) => BlockVars::Deploy(tape.conv_params(p)),
            })
            .collect();
        NetVars {
            head: tape.conv_params(&self.head),
            fusion: tape.conv_params(&self.fusion),
            blocks,
            up: tape.conv_params(&self.up),
            out: tape.conv_params(&self.out),
        }
    }

    /// One recurrent step on `tape`: returns `(sr, h)`.
    pub fn step_on_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &NetVars,
        x: Var,
        h_prev: Var,
        flow: &FlowField<T>,
    ) -> Result<(Var, Var)> {
        let feat = tape.conv2d(x, vars.head)?;
        let feat = tape.relu(feat);
        let aligned = tape.warp(h_prev, flow)?;
        let cat = tape.concat(feat, aligned)?;
        let mut z = tape.conv2d(cat, vars.fusion)?;
        for b in &vars.blocks {
            let pre = match b {
                BlockVars::Train {
                    main,
                    grafts,
                    identity,
                } => {
                    let mut acc = tape.conv2d(z, *main)?;
                    for (mix, fixed) in grafts {
                        let padded = tape.pad_zero(z, 1);
                        let mixed = tape.conv2d_padded(padded, *mix, Padding::Valid)?;
                        let g = tape.conv2d_padded(mixed, *fixed, Padding::Valid)?;
                        acc = tape.add(acc, g)?;
                    }
                    if *identity {
                        acc = tape.add(acc, z)?;
                    }
                    acc
                }
                BlockVars::Deploy(p) => tape.conv2d(z, *p)?,
            };
            z = tape.relu(pre);
        }
        let h = z;
        let up = tape.conv2d(h, vars.up)?;
        let shuffled = tape.pixel_shuffle(up, self.config.scale)?;
        let act = tape.relu(shuffled);
        let residual = tape.conv2d(act, vars.out)?;
        let skip = tape.upsample(x, self.config.scale)?;
        let sr = tape.add(residual, skip)?;
        Ok((sr, h))
    }
}

/// Tape handles of a network's parameters.
#[derive(Debug, Clone)]
pub struct NetVars {
    pub head: ConvVars,
    pub fusion: ConvVars,
    pub blocks: Vec<BlockVars>,
    pub up: ConvVars,
    pub out: ConvVars,
}

#[derive(Debug, Clone)]
pub enum BlockVars {
    Train {
        main: ConvVars,
        grafts: Vec<(ConvVars, ConvVars)>,
        identity: bool,
    },
    Deploy(ConvVars),
}

impl NetVars {
    /// Parameter leaves in [`NetParams::convs_mut`] order.
    pub fn conv_vars(&self) -> Vec<ConvVars> {
        let mut out = vec![self.head, self.fusion];
        for b in &self.blocks {
            match b {
                BlockVars::Train { main, grafts, .. } => {
                    out.push(*main);
                    for (m, f) in grafts {
                        out.push(*m);
                        out.push(*f);
                    }
                }
                BlockVars::Deploy(p) => out.push(*p),
            }
        }
        out.push(self.up);
        out.push(self.out);
        out
    }
}

/// Hidden features of the previous step and the previous LR frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState<T> {
    pub h: Tensor4<T>,
    pub prev_frame: Tensor4<T>,
}

impl<T: Real> RecurrentState<T> {
    /// State before the first frame: zero features, the first frame as its
    /// own predecessor.
    pub fn initial(config: &NetConfig, first: &Tensor4<T>) -> Self {
        let [n, _, h, w] = first.dims();
        RecurrentState {
            h: Tensor4::zeros([n, config.channels, h, w]),
            prev_frame: first.clone(),
        }
    }
}

/// `fusion(feat_t ++ warp(h_prev, flow))`.
pub fn temporal_aggregate<T: Real>(
    feat_t: &Tensor4<T>,
    state: &RecurrentState<T>,
    flow: &FlowField<T>,
    fusion: &ConvParams<T>,
) -> Result<Tensor4<T>> {
    let aligned = ops::bilinear_warp(&state.h, flow)?;
    let cat = ops::concat_channels(feat_t, &aligned)?;
    ops::conv2d(&cat, fusion)
}

/// Inference step with an explicit flow.
pub fn forward_step<T: Real>(
    params: &NetParams<T>,
    state: &RecurrentState<T>,
    x_t: &Tensor4<T>,
    flow: &FlowField<T>,
) -> Result<(Tensor4<T>, RecurrentState<T>)> {
    let [n, c, h, w] = x_t.dims();
    if c != 3 {
        return Err(Error::shape(format!("frames must have 3 channels, got {c}")));
    }
    if state.h.dims() != [n, params.config.channels, h, w] || state.prev_frame.dims() != x_t.dims() {
        return Err(Error::shape("recurrent state does not match the frame"));
    }
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let x = tape.constant(x_t.clone());
    let hp = tape.constant(state.h.clone());
    let (sr, hv) = params.step_on_tape(&mut tape, &vars, x, hp, flow)?;
    let next = RecurrentState {
        h: tape.value(hv).clone(),
        prev_frame: x_t.clone(),
    };
    Ok((tape.value(sr).clone(), next))
}

/// Streams a sequence through the network. Flows come from the configured
/// provider; `ground_truth[t]` is the flow of step `t` when that provider is
/// the ground-truth lookup.
pub fn run_sequence<T: Real>(
    params: &NetParams<T>,
    frames: &[Tensor4<T>],
    ground_truth: Option<&[FlowField<T>]>,
) -> Result<Vec<Tensor4<T>>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::invalid("empty frame sequence"))?;
    let mut state = RecurrentState::initial(&params.config, first);
    let mut out = Vec::with_capacity(frames.len());
    for (t, x) in frames.iter().enumerate() {
        if x.dims() != first.dims() {
            return Err(Error::shape(format!(
                "frame {t} is {:?}, sequence started with {:?}",
                x.dims(),
                first.dims()
            )));
        }
        let gt = match ground_truth {
            Some(table) => Some(table.get(t).ok_or_else(|| {
                Error::invalid(format!("ground-truth flow table has no entry for frame {t}"))
            })?),
            None => None,
        };
        let flow = estimate_flow(params.config.flow, x, &state.prev_frame, gt)?;
        let (sr, next) = forward_step(params, &state, x, &flow)?;
        out.push(sr);
        state = next;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel_prior::pca::pca_matrix;

    fn basis() -> BasisSet {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cols: Vec<Vec<f64>> = (0..12)
            .map(|_| (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        pca_matrix(&cols, 3).unwrap()
    }

    fn small_config() -> NetConfig {
        NetConfig {
            channels: 4,
            num_bgb: 2,
            scale: 4,
            graft: GraftConfig {
                inner: 2,
                ..GraftConfig::default()
            },
            flow: FlowProvider::Zero,
            precision: Precision::F64,
        }
    }

    fn frame(seed: u64, h: usize, w: usize) -> Tensor4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_fn([1, 3, h, w], |_, _, _, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn untrained_output_is_bilinear_upsample() {
        let net: NetParams<f64> = NetParams::build(&small_config(), Some(&basis()), 1).unwrap();
        let x = frame(2, 8, 8);
        let state = RecurrentState::initial(&net.config, &x);
        let (sr, next) = forward_step(&net, &state, &x, &FlowField::zeros(1, 8, 8)).unwrap();
        assert_eq!(sr.dims(), [1, 3, 32, 32]);
        assert_eq!(sr, ops::bilinear_upsample(&x, 4).unwrap());
        assert_eq!(next.h.dims(), [1, 4, 8, 8]);
    }

    #[test]
    fn aggregate_with_zero_state_matches_zero_concat() {
        let net: NetParams<f64> = NetParams::build(&small_config(), Some(&basis()), 1).unwrap();
        let x = frame(3, 6, 6);
        let feat = ops::conv2d(&x, &net.head).unwrap();
        let state = RecurrentState::initial(&net.config, &x);
        let got = temporal_aggregate(&feat, &state, &FlowField::zeros(1, 6, 6), &net.fusion).unwrap();
        let cat = ops::concat_channels(&feat, &Tensor4::zeros([1, 4, 6, 6])).unwrap();
        assert_eq!(got, ops::conv2d(&cat, &net.fusion).unwrap());
    }

    #[test]
    fn grafted_config_needs_basis() {
        assert!(NetParams::<f64>::build(&small_config(), None, 0).is_err());
        let mut cfg = small_config();
        cfg.graft.per_block = 0;
        assert!(NetParams::<f64>::build(&cfg, None, 0).is_ok());
        cfg.scale = 3;
        assert!(NetParams::<f64>::build(&cfg, None, 0).is_err());
    }

    #[test]
    fn deploy_counts_are_single_convs() {
        let net: NetParams<f64> = NetParams::build(&small_config(), Some(&basis()), 1).unwrap();
        let dep = net.to_deploy().unwrap();
        assert_eq!(dep.form(), Form::Deploy);
        let (ct, cd) = (net.complexity(8, 8), dep.complexity(8, 8));
        assert!(cd.flops < ct.flops && cd.params < ct.params);
        let single = 4 * (4 * 9 + 1);
        let fixed = dep.param_count() - 2 * single;
        let base = NetParams::<f64>::build(
            &NetConfig {
                graft: GraftConfig {
                    per_block: 0,
                    identity: false,
                    ..GraftConfig::default()
                },
                ..small_config()
            },
            None,
            1,
        )
        .unwrap();
        assert_eq!(fixed + 2 * single, base.param_count());
    }

    #[test]
    fn mismatched_frames_are_rejected() {
        let net: NetParams<f64> = NetParams::build(&small_config(), Some(&basis()), 1).unwrap();
        let frames = vec![frame(1, 6, 6), frame(2, 6, 8)];
        assert!(run_sequence(&net, &frames, None).is_err());
        assert!(run_sequence(&net, &[], None).is_err());
    }
}
