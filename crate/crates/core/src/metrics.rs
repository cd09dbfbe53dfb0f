//! Full-reference distortion metrics on [0,1] RGB images of shape [1,3,H,W].

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gaussian-window size and width used by the structural similarity index.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn check_pair(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB against a peak of 1.0. Identical images
/// report `f64::INFINITY`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b, "psnr")?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Channel-mean grayscale plane of an [1,3,H,W] image.
fn grayscale(img: &Tensor) -> Result<(Vec<f64>, usize, usize)> {
    let s = img.shape();
    if s.len() != 4 || s[0] != 1 || s[1] != 3 {
        return Err(Error::Dimension(format!(
            "ssim: expected [1,3,H,W] image, got {s:?}"
        )));
    }
    let (h, w) = (s[2], s[3]);
    let d = img.data();
    let mut gray = vec![0.0; h * w];
    for c in 0..3 {
        for p in 0..h * w {
            gray[p] += d[c * h * w + p];
        }
    }
    gray.iter_mut().for_each(|v| *v /= 3.0);
    Ok((gray, h, w))
}

fn gaussian_kernel() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| (-(i * i) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable valid-region Gaussian filter.
fn gauss_filter(x: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let k = gaussian_kernel();
    let n = SSIM_WINDOW;
    let ow = w - n + 1;
    let oh = h - n + 1;
    // horizontal pass
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * x[y * w + ox + i];
            }
            tmp[y * ow + ox] = acc;
        }
    }
    // vertical pass
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * tmp[(oy + i) * ow + ox];
            }
            out[oy * ow + ox] = acc;
        }
    }
    (out, oh, ow)
}

/// Mean structural similarity over a Gaussian-weighted local-statistics map.
/// Images are converted to grayscale by channel mean first.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b, "ssim")?;
    let (ga, h, w) = grayscale(a)?;
    let (gb, _, _) = grayscale(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Contract(format!(
            "ssim: image {h}x{w} smaller than the {SSIM_WINDOW}-pixel window"
        )));
    }
    let sq_a: Vec<f64> = ga.iter().map(|v| v * v).collect();
    let sq_b: Vec<f64> = gb.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = ga.iter().zip(&gb).map(|(x, y)| x * y).collect();

    let (mu_a, oh, ow) = gauss_filter(&ga, h, w);
    let (mu_b, _, _) = gauss_filter(&gb, h, w);
    let (e_aa, _, _) = gauss_filter(&sq_a, h, w);
    let (e_bb, _, _) = gauss_filter(&sq_b, h, w);
    let (e_ab, _, _) = gauss_filter(&ab, h, w);

    let mut acc = 0.0;
    for i in 0..oh * ow {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = e_aa[i] - ma * ma;
        let var_b = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let den = (ma * ma + mb * mb + SSIM_C1) * (var_a + var_b + SSIM_C2);
        acc += num / den;
    }
    Ok(acc / (oh * ow) as f64)
}
