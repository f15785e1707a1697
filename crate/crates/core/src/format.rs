//! Little-endian binary helpers, the `CKT4` raw tensor file and PPM frames.
//!
//! `CKT4` layout: magic `b"CKT4"`, `u32` version (= 1), four `u32` dims
//! `N C H W`, then `N*C*H*W` `f32` values row-major, all little-endian.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor4};

pub const TENSOR_MAGIC: &[u8; 4] = b"CKT4";
pub const TENSOR_VERSION: u32 = 1;

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(format!(
                "truncated: need {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| Error::format("payload size overflow"))?;
        let b = self.bytes(len)?;
        Ok(b
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub(crate) fn magic(&mut self, expect: &[u8; 4]) -> Result<()> {
        let m = self.bytes(4)?;
        if m != expect {
            return Err(Error::format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(expect)
            )));
        }
        Ok(())
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, vals: impl IntoIterator<Item = f32>) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::format(format!("{what} {v} exceeds u32")))
}

pub fn encode_tensor<T: Real>(t: &Tensor4<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(24 + 4 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    put_u32(&mut out, TENSOR_VERSION);
    for d in t.dims() {
        put_u32(&mut out, to_u32(d, "dim")?);
    }
    put_f32s(&mut out, t.data().iter().map(|v| v.as_f64() as f32));
    Ok(out)
}

pub fn decode_tensor<T: Real>(buf: &[u8]) -> Result<Tensor4<T>> {
    let mut r = Reader::new(buf);
    r.magic(TENSOR_MAGIC)?;
    let version = r.u32()?;
    if version != TENSOR_VERSION {
        return Err(Error::format(format!("unsupported tensor version {version}")));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let n = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::format("dims overflow"))?;
    let vals = r.f32s(n)?;
    if r.remaining() != 0 {
        return Err(Error::format(format!("{} trailing bytes", r.remaining())));
    }
    Tensor4::new(dims, vals.into_iter().map(|v| T::cast(v as f64)).collect())
}

pub fn write_tensor<T: Real>(path: &Path, t: &Tensor4<T>) -> Result<()> {
    std::fs::write(path, encode_tensor(t)?)?;
    Ok(())
}

pub fn read_tensor<T: Real>(path: &Path) -> Result<Tensor4<T>> {
    decode_tensor(&std::fs::read(path)?)
}

/// Encodes a `(1, 3, H, W)` frame with values in `[0, 1]` as binary PPM
/// (P6, maxval 255). Values are clamped and rounded to the nearest level.
pub fn encode_ppm<T: Real>(frame: &Tensor4<T>) -> Result<Vec<u8>> {
    let [n, c, h, w] = frame.dims();
    if n != 1 || c != 3 {
        return Err(Error::shape(format!(
            "PPM frames are (1, 3, H, W), got {:?}",
            frame.dims()
        )));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = frame.get(0, ch, y, x).as_f64().clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

fn ppm_token<'a>(buf: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    loop {
        while *pos < buf.len() && buf[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < buf.len() && buf[*pos] == b'#' {
            while *pos < buf.len() && buf[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < buf.len() && !buf[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format("truncated PPM header"));
    }
    std::str::from_utf8(&buf[start..*pos]).map_err(|_| Error::format("non-ASCII PPM header"))
}

pub fn decode_ppm<T: Real>(buf: &[u8]) -> Result<Tensor4<T>> {
    let mut pos = 0;
    if ppm_token(buf, &mut pos)? != "P6" {
        return Err(Error::format("not a binary PPM (P6)"));
    }
    let mut num = |what: &str| -> Result<usize> {
        ppm_token(buf, &mut pos)?
            .parse()
            .map_err(|_| Error::format(format!("bad PPM {what}")))
    };
    let w = num("width")?;
    let h = num("height")?;
    let maxval = num("maxval")?;
    if maxval != 255 {
        return Err(Error::format(format!("unsupported PPM maxval {maxval}")));
    }
    pos += 1;
    let need = w * h * 3;
    if buf.len() < pos + need {
        return Err(Error::format("truncated PPM payload"));
    }
    let px = &buf[pos..pos + need];
    Ok(Tensor4::from_fn([1, 3, h, w], |_, c, y, x| {
        T::cast(px[(y * w + x) * 3 + c] as f64 / 255.0)
    }))
}

pub fn write_ppm<T: Real>(path: &Path, frame: &Tensor4<T>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_ppm(frame)?)?;
    Ok(())
}

pub fn read_ppm<T: Real>(path: &Path) -> Result<Tensor4<T>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode_ppm(&buf)
}
