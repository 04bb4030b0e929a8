//! Training data: checkerboard points and IDX image files.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalmetrics::CheckerboardSpec;
use crate::spectral::Image;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum DatasetSpec {
    Checkerboard(CheckerboardSpec),
    IdxImages { path: PathBuf, max_items: usize },
}

/// Uniform samples over the filled cells: a filled cell is picked uniformly,
/// then a uniform point inside it.
pub fn sample_checkerboard<R: Rng + ?Sized>(spec: &CheckerboardSpec, n: usize, rng: &mut R) -> Result<Vec<[f64; 2]>> {
    spec.validate()?;
    let cells = spec.filled_cells();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let (i, j) = cells[rng.random_range(0..cells.len())];
        let o = spec.cell_origin(i, j);
        let p = [o[0] + rng.random::<f64>() * spec.cell_side, o[1] + rng.random::<f64>() * spec.cell_side];
        // rounding can land exactly on the far edge of the cell
        if spec.is_filled(p) {
            out.push(p);
        }
    }
    Ok(out)
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => Err(Error::Format(format!(
            "IDX header truncated at byte offset {offset}: need 4 bytes, {} available",
            bytes.len().saturating_sub(offset)
        ))),
    }
}

/// Parse an in-memory IDX image file (magic 0x00000803, big-endian
/// count/rows/cols, then unsigned bytes). Pixels are scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8], max_items: usize) -> Result<Vec<Image>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "bad IDX magic 0x{magic:08x} at byte offset 0, expected 0x{IDX_IMAGE_MAGIC:08x}"
        )));
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    if rows != cols {
        return Err(Error::Format(format!("IDX images must be square, header says {rows}x{cols}")));
    }
    let per = rows * cols;
    let take = count.min(max_items);
    let need = 16 + take * per;
    if bytes.len() < need {
        return Err(Error::Format(format!(
            "IDX payload truncated at byte offset {}: missing {} byte(s) for {take} image(s)",
            bytes.len(),
            need - bytes.len()
        )));
    }
    Ok(bytes[16..need]
        .chunks_exact(per)
        .map(|c| Image { side: rows, pixels: c.iter().map(|&b| b as f64 / 255.0).collect() })
        .collect())
}

pub fn load_idx_images(path: &Path, max_items: usize) -> Result<Vec<Image>> {
    let bytes = std::fs::read(path)?;
    parse_idx_images(&bytes, max_items).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Bilinear resampling with pixel-centre alignment and edge clamping.
pub fn rescale_bilinear(img: &Image, side: usize) -> Image {
    if side == img.side {
        return img.clone();
    }
    let scale = img.side as f64 / side as f64;
    let max = img.side - 1;
    let src = |v: usize| -> (usize, usize, f64) {
        let s = ((v as f64 + 0.5) * scale - 0.5).clamp(0.0, max as f64);
        let lo = s.floor() as usize;
        (lo, (lo + 1).min(max), s - lo as f64)
    };
    let mut pixels = Vec::with_capacity(side * side);
    for r in 0..side {
        let (r0, r1, fr) = src(r);
        for c in 0..side {
            let (c0, c1, fc) = src(c);
            let at = |y: usize, x: usize| img.pixels[y * img.side + x];
            let top = at(r0, c0) * (1.0 - fc) + at(r0, c1) * fc;
            let bot = at(r1, c0) * (1.0 - fc) + at(r1, c1) * fc;
            pixels.push(top * (1.0 - fr) + bot * fr);
        }
    }
    Image { side, pixels }
}

/// Load images and bring them to `side`×`side`.
pub fn load_images_for_grid(path: &Path, max_items: usize, side: usize) -> Result<Vec<Image>> {
    Ok(load_idx_images(path, max_items)?.iter().map(|im| rescale_bilinear(im, side)).collect())
}

#[cfg(test)]
pub(crate) fn write_idx_images(images: &[Vec<u8>], side: usize) -> Vec<u8> {
    let mut out = Vec::new();
    for v in [IDX_IMAGE_MAGIC, images.len() as u32, side as u32, side as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for im in images {
        out.extend_from_slice(im);
    }
    out
}
