//! Model files.
//!
//! Layout (`CKBM`, little-endian): magic `b"CKBM"`, `u32` version (= 1),
//! `u32` header length and that many bytes of JSON ([`ModelHeader`]), then
//! one record per tensor until the end of the file: `u32` name length, UTF-8
//! name, `u32` ndims, `ndims` `u32` dims and the `f32` payload row-major.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{put_f32s, put_u32, to_u32, Reader};
use crate::kernel_prior::GraftSpec;
use crate::reparam::BGBParams;
use crate::tensor::{ConvParams, Real, Tensor4};
use crate::vsr_net::{Block, Form, NetConfig, NetParams};

pub const MODEL_MAGIC: &[u8; 4] = b"CKBM";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub config: NetConfig,
    pub form: Form,
    /// Initialization seed of the network.
    pub seed: u64,
    /// `grafts[block][graft][o][d]`: basis index of each fixed kernel slot.
    #[serde(default)]
    pub grafts: Vec<Vec<Vec<Vec<usize>>>>,
}

pub fn encode_model<T: Real>(net: &NetParams<T>, seed: u64) -> Result<Vec<u8>> {
    let grafts = net
        .blocks
        .iter()
        .map(|b| match b {
            Block::Train(bgb) => bgb.grafts.iter().map(|g| g.sampled_indices.clone()).collect(),
            Block::Deploy(_) => Vec::new(),
        })
        .collect();
    let header = ModelHeader {
        config: net.config.clone(),
        form: net.form(),
        seed,
        grafts,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    put_u32(&mut out, MODEL_VERSION);
    put_u32(&mut out, to_u32(json.len(), "header length")?);
    out.extend_from_slice(&json);
    for (name, p) in net.named_convs() {
        put_record(&mut out, &format!("{name}.weight"), &p.weight.dims(), p.weight.data())?;
        put_record(&mut out, &format!("{name}.bias"), &[p.bias.len()], &p.bias)?;
    }
    Ok(out)
}

fn put_record<T: Real>(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[T]) -> Result<()> {
    put_u32(out, to_u32(name.len(), "name length")?);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, to_u32(dims.len(), "ndims")?);
    for &d in dims {
        put_u32(out, to_u32(d, "dimension")?);
    }
    put_f32s(out, data.iter().map(|v| v.as_f64() as f32));
    Ok(())
}

pub fn decode_model<T: Real>(buf: &[u8]) -> Result<(NetParams<T>, ModelHeader)> {
    let mut r = Reader::new(buf);
    r.magic(MODEL_MAGIC)?;
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::format(format!("unsupported model version {version}")));
    }
    let len = r.u32()? as usize;
    let header: ModelHeader = serde_json::from_slice(r.bytes(len)?)
        .map_err(|e| Error::format(format!("model header: {e}")))?;
    let mut records: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
    while r.remaining() > 0 {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.bytes(nlen)?)
            .map_err(|_| Error::format("tensor name is not UTF-8"))?
            .to_string();
        let ndims = r.u32()? as usize;
        if ndims > 4 {
            return Err(Error::format(format!("{name}: {ndims} dims")));
        }
        let dims: Vec<usize> = (0..ndims)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<_>>()?;
        let count = dims.iter().product();
        let data = r.f32s(count)?;
        if records.insert(name.clone(), (dims, data)).is_some() {
            return Err(Error::format(format!("duplicate tensor {name}")));
        }
    }
    let mut take = |name: &str, trainable: bool| -> Result<ConvParams<T>> {
        let (wd, w) = records
            .remove(&format!("{name}.weight"))
            .ok_or_else(|| Error::format(format!("missing tensor {name}.weight")))?;
        let (bd, b) = records
            .remove(&format!("{name}.bias"))
            .ok_or_else(|| Error::format(format!("missing tensor {name}.bias")))?;
        let dims: [usize; 4] = wd
            .try_into()
            .map_err(|_| Error::format(format!("{name}.weight must be 4-D")))?;
        if bd.len() != 1 {
            return Err(Error::format(format!("{name}.bias must be 1-D")));
        }
        ConvParams::new(
            Tensor4::new(dims, w.into_iter().map(|v| T::cast(v as f64)).collect())?,
            b.into_iter().map(|v| T::cast(v as f64)).collect(),
            trainable,
        )
    };
    let cfg = &header.config;
    let head = take("head", true)?;
    let fusion = take("fusion", true)?;
    let mut blocks = Vec::with_capacity(cfg.num_bgb);
    for i in 0..cfg.num_bgb {
        match header.form {
            Form::Deploy => blocks.push(Block::Deploy(take(&format!("bgb{i}.conv"), true)?)),
            Form::Train => {
                let main = take(&format!("bgb{i}.main"), true)?;
                let slots = header.grafts.get(i).cloned().unwrap_or_default();
                let mut grafts = Vec::with_capacity(slots.len());
                for (j, sampled_indices) in slots.into_iter().enumerate() {
                    let g = GraftSpec {
                        sampled_indices,
                        mix_1x1: take(&format!("bgb{i}.graft{j}.mix"), true)?,
                        fixed_3x3: take(&format!("bgb{i}.graft{j}.fixed"), false)?,
                    };
                    g.validate()?;
                    grafts.push(g);
                }
                blocks.push(Block::Train(BGBParams {
                    main,
                    grafts,
                    identity: cfg.graft.identity,
                }));
            }
        }
    }
    let up = take("up", true)?;
    let out = take("out", true)?;
    if let Some(extra) = records.keys().next() {
        return Err(Error::format(format!("unexpected tensor {extra}")));
    }
    let net = NetParams {
        config: NetConfig {
            precision: T::PRECISION,
            ..cfg.clone()
        },
        head,
        fusion,
        blocks,
        up,
        out,
    };
    net.validate()?;
    Ok((net, header))
}

pub fn save_model<T: Real>(path: &Path, net: &NetParams<T>, seed: u64) -> Result<()> {
    std::fs::write(path, encode_model(net, seed)?)?;
    Ok(())
}

pub fn load_model<T: Real>(path: &Path) -> Result<(NetParams<T>, ModelHeader)> {
    decode_model(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel_prior::pca::pca_matrix;
    use crate::tensor::Precision;
    use crate::vsr_net::{FlowProvider, GraftConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn net() -> NetParams<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cols: Vec<Vec<f64>> = (0..12)
            .map(|_| (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let basis = pca_matrix(&cols, 3).unwrap();
        let cfg = NetConfig {
            channels: 3,
            num_bgb: 2,
            scale: 2,
            graft: GraftConfig {
                inner: 2,
                ..GraftConfig::default()
            },
            flow: FlowProvider::Zero,
            precision: Precision::F32,
        };
        NetParams::build(&cfg, Some(&basis), 5).unwrap()
    }

    #[test]
    fn train_and_deploy_round_trip() {
        let n = net();
        let bytes = encode_model(&n, 5).unwrap();
        let (back, header) = decode_model::<f32>(&bytes).unwrap();
        assert_eq!(back, n);
        assert_eq!(header.seed, 5);
        assert_eq!(encode_model(&back, 5).unwrap(), bytes);
        let d = n.to_deploy().unwrap();
        let (dback, dh) = decode_model::<f32>(&encode_model(&d, 5).unwrap()).unwrap();
        assert_eq!(dh.form, Form::Deploy);
        assert_eq!(dback, d);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = encode_model(&net(), 0).unwrap();
        assert!(decode_model::<f32>(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_model::<f32>(&bad).is_err());
    }
}
