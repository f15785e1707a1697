//! Kernel banks: 2-D spatial slices of a teacher network's convolutions.
//!
//! File layout (`CKBG`, all little-endian): magic `b"CKBG"`, `u32` version
//! (= 1), `u32` count, `u32` K, `count * K * K` `f32` values row-major, then a
//! `u32` metadata length followed by that many bytes of UTF-8 JSON
//! ([`BankMetadata`]).

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{put_f32s, put_u32, to_u32, Reader};

pub const BANK_MAGIC: &[u8; 4] = b"CKBG";
pub const BANK_VERSION: u32 = 1;

/// Where a slice came from: `weight[out_channel, in_channel, :, :]` of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub layer: u32,
    pub out_channel: u32,
    pub in_channel: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelSlice {
    /// `K x K` values, row-major.
    pub values: Vec<f64>,
    pub k: usize,
    pub provenance: Option<Provenance>,
}

impl KernelSlice {
    pub fn new(values: Vec<f64>, k: usize) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::invalid(format!("kernel size must be odd, got {k}")));
        }
        if values.len() != k * k {
            return Err(Error::shape(format!(
                "{k}x{k} kernel needs {} values, got {}",
                k * k,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("kernel slice"));
        }
        Ok(KernelSlice {
            values,
            k,
            provenance: None,
        })
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub name: String,
    pub out_channels: u32,
    pub in_channels: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankMetadata {
    pub teacher_id: String,
    #[serde(default)]
    pub layers: Vec<LayerInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank {
    pub kernels: Vec<KernelSlice>,
    pub k: usize,
    pub metadata: BankMetadata,
}

impl KernelBank {
    pub fn new(kernels: Vec<KernelSlice>, metadata: BankMetadata) -> Result<Self> {
        let first = kernels
            .first()
            .ok_or_else(|| Error::invalid("kernel bank is empty"))?;
        let k = first.k;
        if kernels.iter().any(|s| s.k != k) {
            return Err(Error::shape("kernel bank mixes spatial sizes"));
        }
        let mut bank = KernelBank {
            kernels,
            k,
            metadata,
        };
        bank.assign_provenance();
        Ok(bank)
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    /// Slices are stored layer by layer, output channel major; recover the
    /// per-slice provenance when the layer table accounts for every slice.
    fn assign_provenance(&mut self) {
        let total: usize = self
            .metadata
            .layers
            .iter()
            .map(|l| l.out_channels as usize * l.in_channels as usize)
            .sum();
        if total != self.kernels.len() {
            return;
        }
        let mut it = self.kernels.iter_mut();
        for (li, layer) in self.metadata.layers.iter().enumerate() {
            for o in 0..layer.out_channels {
                for i in 0..layer.in_channels {
                    if let Some(s) = it.next() {
                        s.provenance = Some(Provenance {
                            layer: li as u32,
                            out_channel: o,
                            in_channel: i,
                        });
                    }
                }
            }
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.metadata)?;
        let mut out = Vec::with_capacity(20 + 4 * self.len() * self.k * self.k + meta.len());
        out.extend_from_slice(BANK_MAGIC);
        put_u32(&mut out, BANK_VERSION);
        put_u32(&mut out, to_u32(self.len(), "kernel count")?);
        put_u32(&mut out, to_u32(self.k, "kernel size")?);
        for s in &self.kernels {
            put_f32s(&mut out, s.values.iter().map(|&v| v as f32));
        }
        put_u32(&mut out, to_u32(meta.len(), "metadata length")?);
        out.extend_from_slice(&meta);
        Ok(out)
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(BANK_MAGIC)?;
        let version = r.u32()?;
        if version != BANK_VERSION {
            return Err(Error::format(format!("unsupported bank version {version}")));
        }
        let count = r.u32()? as usize;
        let k = r.u32()? as usize;
        if count == 0 {
            return Err(Error::format("kernel bank holds zero kernels"));
        }
        if k == 0 || k % 2 == 0 {
            return Err(Error::format(format!("invalid kernel size {k}")));
        }
        let values = r.f32s(count.checked_mul(k * k).ok_or_else(|| Error::format("count overflow"))?)?;
        let meta_len = r.u32()? as usize;
        let meta_bytes = r.bytes(meta_len)?;
        if r.remaining() != 0 {
            return Err(Error::format(format!(
                "{} trailing bytes; count field does not match payload",
                r.remaining()
            )));
        }
        let metadata: BankMetadata = serde_json::from_slice(meta_bytes)
            .map_err(|e| Error::format(format!("bank metadata: {e}")))?;
        let kernels = values
            .chunks_exact(k * k)
            .map(|c| KernelSlice::new(c.iter().map(|&v| v as f64).collect(), k))
            .collect::<Result<Vec<_>>>()?;
        KernelBank::new(kernels, metadata)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }
}

pub fn load_kernel_bank(path: &Path) -> Result<KernelBank> {
    KernelBank::decode(&std::fs::read(path)?)
}

/// Deterministic stand-in for a teacher export: 3x3 slices drawn from the
/// filter families trained SR networks typically contain (blurs, oriented
/// first derivatives, Laplacians, near-identities, off-center taps), with
/// random gain, sign and noise.
pub fn synthetic_teacher_bank(layers: usize, channels: usize, seed: u64) -> Result<KernelBank> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kernels = Vec::with_capacity(layers * channels * channels);
    let mut infos = Vec::with_capacity(layers);
    for l in 0..layers {
        infos.push(LayerInfo {
            name: format!("body.{l}.conv"),
            out_channels: channels as u32,
            in_channels: channels as u32,
        });
        for _ in 0..channels * channels {
            let base = teacher_family(&mut rng);
            let gain = rng.gen_range(0.02..0.3) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let noise = rng.gen_range(0.0..0.15);
            let values: Vec<f64> = base
                .iter()
                .map(|&b| (gain * (b + noise * rng.gen_range(-1.0..1.0))) as f32 as f64)
                .collect();
            kernels.push(KernelSlice::new(values, 3)?);
        }
    }
    KernelBank::new(
        kernels,
        BankMetadata {
            teacher_id: format!("synthetic-teacher-seed{seed}"),
            layers: infos,
        },
    )
}

fn teacher_family(rng: &mut ChaCha8Rng) -> [f64; 9] {
    match rng.gen_range(0..6) {
        0 => [1., 2., 1., 2., 4., 2., 1., 2., 1.].map(|v| v / 4.0),
        1 => {
            let sobel = [-1., 0., 1., -2., 0., 2., -1., 0., 1.];
            match rng.gen_range(0..4) {
                0 => sobel,
                1 => transpose3(sobel),
                2 => [0., 1., 2., -1., 0., 1., -2., -1., 0.],
                _ => [2., 1., 0., 1., 0., -1., 0., -1., -2.],
            }
        }
        2 => [0., 1., 0., 1., -4., 1., 0., 1., 0.],
        3 => [0., 0., 0., 0., 3., 0., 0., 0., 0.],
        4 => {
            let mut k = [0.0; 9];
            k[rng.gen_range(0..9)] = 3.0;
            k
        }
        _ => [-1., -1., -1., -1., 8., -1., -1., -1., -1.].map(|v| v / 2.0),
    }
}

fn transpose3(k: [f64; 9]) -> [f64; 9] {
    let mut t = [0.0; 9];
    for y in 0..3 {
        for x in 0..3 {
            t[x * 3 + y] = k[y * 3 + x];
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_bank() -> KernelBank {
        synthetic_teacher_bank(2, 3, 11).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let bank = small_bank();
        let bytes = bank.encode().unwrap();
        let back = KernelBank::decode(&bytes).unwrap();
        assert_eq!(back, bank);
        assert_eq!(back.encode().unwrap(), bytes);
        assert_eq!(back.kernels[4].provenance.unwrap().in_channel, 1);
    }

    #[test]
    fn wrong_magic_and_count_mismatch() {
        let bank = small_bank();
        let mut bytes = bank.encode().unwrap();
        let mut bad = bytes.clone();
        bad[1] = b'Q';
        assert!(matches!(KernelBank::decode(&bad), Err(Error::Format(_))));
        // count one too high: payload runs into the metadata and then short
        bytes[8..12].copy_from_slice(&(bank.len() as u32 + 1).to_le_bytes());
        assert!(KernelBank::decode(&bytes).is_err());
        let mut fewer = bank.encode().unwrap();
        fewer[8..12].copy_from_slice(&(bank.len() as u32 - 1).to_le_bytes());
        assert!(KernelBank::decode(&fewer).is_err());
    }

    #[test]
    fn zero_kernels_rejected() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(BANK_MAGIC);
        for v in [1u32, 0, 3, 2] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(b"{}");
        assert!(KernelBank::decode(&bytes).is_err());
    }
}
