//! Frame directories of binary PPM images.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ckbg::{Real, Tensor4};
use image::{ImageFormat, RgbImage};

/// `*.ppm` files of a directory in name order.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading frame directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .ppm frames in {}", dir.display());
    }
    Ok(paths)
}

pub fn read_frame<T: Real>(path: &Path) -> Result<Tensor4<T>> {
    let img = image::open(path)
        .with_context(|| format!("reading {}", path.display()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor4::from_fn([1, 3, h, w], |_, c, y, x| {
        T::cast(img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)
    }))
}

pub fn read_frames<T: Real>(dir: &Path) -> Result<Vec<Tensor4<T>>> {
    list_frames(dir)?.iter().map(|p| read_frame(p)).collect()
}

/// Writes sample 0 of `t`, clamped to `[0, 1]` and rounded to 8 bits.
pub fn write_frame<T: Real>(path: &Path, t: &Tensor4<T>) -> Result<()> {
    let [_, c, h, w] = t.dims();
    if c != 3 {
        bail!("frames must have 3 channels, got {c}");
    }
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb(std::array::from_fn(|ch| {
            (t.get(0, ch, y as usize, x as usize).as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    });
    img.save_with_format(path, ImageFormat::Pnm)
        .with_context(|| format!("writing {}", path.display()))
}

pub fn write_frames<T: Real>(dir: &Path, frames: &[Tensor4<T>]) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (i, f) in frames.iter().enumerate() {
        write_frame(&dir.join(format!("{i:05}.ppm")), f)?;
    }
    Ok(())
}
