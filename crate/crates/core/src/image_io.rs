//! PNG and PFM image files. Images are `[H, W, 3]` tensors in `[0, 1]`.
//! PNG samples are mapped linearly (`v / 255`), with no gamma curve.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{validation, Result};
use crate::tensor::Tensor;

pub fn read_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    Ok(Tensor::new(vec![h as usize, w as usize, 3], data))
}

pub fn to_rgb8(img: &Tensor) -> Vec<u8> {
    img.data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

pub fn write_png(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w) = check_rgb(img)?;
    let buf = image::RgbImage::from_raw(w as u32, h as u32, to_rgb8(img))
        .ok_or_else(|| validation("image buffer size mismatch"))?;
    buf.save(path)?;
    Ok(())
}

/// Little-endian color PFM (`PF`, scale −1), rows stored bottom to top.
pub fn encode_pfm(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = check_rgb(img)?;
    let mut out = format!("PF\n{w} {h}\n-1.0\n").into_bytes();
    for y in (0..h).rev() {
        for v in &img.data()[y * w * 3..(y + 1) * w * 3] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_pfm(path: &Path, img: &Tensor) -> Result<()> {
    let bytes = encode_pfm(img)?;
    fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

fn check_rgb(img: &Tensor) -> Result<(usize, usize)> {
    match img.shape() {
        [h, w, 3] => Ok((*h, *w)),
        s => Err(validation(format!("expected an [H, W, 3] image, got {s:?}"))),
    }
}

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`.
pub fn psnr(a: &Tensor, b: &Tensor) -> f64 {
    let mse = a.zip_map(b, |x, y| (x - y) * (x - y)).data().iter().sum::<f64>() / a.len() as f64;
    -10.0 * mse.log10()
}
