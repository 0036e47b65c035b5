//! File formats: PFM float maps, 8-bit PNG, and atomic file writes.
//!
//! PFM files follow the portable-float-map convention: `PF` (3 channels) or
//! `Pf` (1 channel), width/height line, a scale line whose sign encodes
//! endianness (−1.0 = little endian), then f32 scanlines stored bottom row
//! first. Two-channel images (flow) are stored as 3-channel PFM with a zero
//! third channel.

use anyhow::{bail, Context, Result};
use splat4d::img::Image;
use std::fs;
use std::io::Write;
use std::path::Path;

/// Write bytes atomically: a temp file in the same directory is flushed and
/// then renamed over the destination.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().context("path has no parent directory")?;
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path)
        .with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub fn write_pfm(path: &Path, img: &Image) -> Result<()> {
    let (magic, c_out) = match img.c {
        1 => ("Pf", 1),
        2 | 3 => ("PF", 3),
        c => bail!("PFM supports 1-3 channels, image has {c}"),
    };
    let mut bytes = format!("{magic}\n{} {}\n-1.0\n", img.w, img.h).into_bytes();
    for y in (0..img.h).rev() {
        for x in 0..img.w {
            for k in 0..c_out {
                let v = if k < img.c {
                    img.at(y, x, k) as f32
                } else {
                    0.0
                };
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    atomic_write(path, &bytes)
}

/// Read a PFM file; `channels` restores the logical channel count (2 for
/// flow stored as padded 3-channel).
pub fn read_pfm(path: &Path, channels: usize) -> Result<Image> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut pos = 0;
    let mut line = || -> Result<String> {
        let start = pos;
        while pos < bytes.len() && bytes[pos] != b'\n' {
            pos += 1;
        }
        if pos >= bytes.len() {
            bail!("truncated PFM header");
        }
        pos += 1;
        Ok(String::from_utf8_lossy(&bytes[start..pos - 1]).into_owned())
    };
    let magic = line()?;
    let stored_c = match magic.as_str() {
        "PF" => 3,
        "Pf" => 1,
        m => bail!("not a PFM file (magic {m:?})"),
    };
    let dims = line()?;
    let mut it = dims.split_whitespace();
    let w: usize = it.next().context("missing width")?.parse()?;
    let h: usize = it.next().context("missing height")?.parse()?;
    let scale: f64 = line()?.trim().parse()?;
    if scale >= 0.0 {
        bail!("big-endian PFM not supported");
    }
    if channels > stored_c {
        bail!("requested {channels} channels from a {stored_c}-channel PFM");
    }
    let expected = h * w * stored_c * 4;
    let data = &bytes[pos..];
    if data.len() != expected {
        bail!("PFM payload {} bytes, expected {expected}", data.len());
    }
    let mut img = Image::zeros(h, w, channels);
    for (row, y) in (0..h).rev().enumerate() {
        for x in 0..w {
            for k in 0..channels {
                let o = ((row * w + x) * stored_c + k) * 4;
                let v = f32::from_le_bytes(data[o..o + 4].try_into().unwrap());
                *img.at_mut(y, x, k) = v as f64;
            }
        }
    }
    Ok(img)
}

/// Write an image with values in [0, 1] as 8-bit PNG (1 or 3 channels).
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let quant = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut buf = Vec::new();
    let encoder = image::codecs::png::PngEncoder::new(&mut buf);
    use image::ImageEncoder;
    let pixels: Vec<u8> = img.data.iter().map(|&v| quant(v)).collect();
    let color = match img.c {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => bail!("PNG writer supports 1 or 3 channels, image has {c}"),
    };
    encoder.write_image(&pixels, img.w as u32, img.h as u32, color)?;
    atomic_write(path, &buf)
}

/// Read an 8-bit PNG back into [0, 1] floats with the stored channel count.
pub fn read_png(path: &Path) -> Result<Image> {
    let dyn_img = image::open(path).with_context(|| format!("reading {}", path.display()))?;
    let (w, h) = (dyn_img.width() as usize, dyn_img.height() as usize);
    match dyn_img {
        image::DynamicImage::ImageLuma8(g) => Ok(Image::from_fn(h, w, 1, |y, x, _| {
            g.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0
        })),
        other => {
            let rgb = other.to_rgb8();
            Ok(Image::from_fn(h, w, 3, |y, x, k| {
                rgb.get_pixel(x as u32, y as u32).0[k] as f64 / 255.0
            }))
        }
    }
}
