//! 8-bit image export of `[3, H, W]` tensors in `[0, 1]`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Interleaved RGB bytes, `round(255·v)` after clamping to `[0, 1]`.
pub fn to_rgb8(img: &Tensor) -> Result<(Vec<u8>, usize, usize)> {
    if img.rank() != 3 || img.shape()[0] != 3 {
        return Err(Error::shape("image export", format!("expected [3, H, W], got {:?}", img.shape())));
    }
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let plane = h * w;
    let d = img.data();
    let mut out = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            out.push((d[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok((out, h, w))
}

pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    let (bytes, h, w) = to_rgb8(img)?;
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P6\n{w} {h}\n255\n")?;
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn write_png(path: &Path, img: &Tensor) -> Result<()> {
    let (bytes, h, w) = to_rgb8(img)?;
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let fail = |e: png::EncodingError| Error::format(path, e.to_string());
    enc.write_header().map_err(fail)?.write_image_data(&bytes).map_err(fail)?;
    Ok(())
}

/// Writes PNG or PPM depending on the extension (`.ppm`, otherwise PNG).
pub fn write_image(path: &Path, img: &Tensor) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => write_ppm(path, img),
        _ => write_png(path, img),
    }
}
