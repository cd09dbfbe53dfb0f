//! 8-bit RGB PNG reading and writing for [1,3,H,W] tensors in [0,1].

use std::path::Path;

use image::{ImageBuffer, ImageReader, Rgb};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Load an 8-bit RGB PNG and normalise to [0,1].
pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?
        .decode()
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px.0[c] as f64 / 255.0;
        }
    }
    Tensor::from_vec(&[1, 3, h, w], data)
}

/// Write a [1,3,H,W] tensor in [0,1] as an 8-bit RGB PNG; values round
/// half-up to the nearest level.
pub fn write_image(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let s = image.shape();
    if s.len() != 4 || s[0] != 1 || s[1] != 3 {
        return Err(Error::Dimension(format!(
            "write_image: expected [1,3,H,W], got {s:?}"
        )));
    }
    let (h, w) = (s[2], s[3]);
    let d = image.data();
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let mut px = [0u8; 3];
        for c in 0..3 {
            let v = d[(c * h + y as usize) * w + x as usize].clamp(0.0, 1.0);
            px[c] = (v * 255.0).round() as u8;
        }
        Rgb(px)
    });
    buf.save(path)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}
