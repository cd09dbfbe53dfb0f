//! Training losses.
//!
//! Norm conventions: `||.||_2` terms are the root of the mean of squares and
//! `||.||_1` terms are the mean absolute value, so every loss is independent
//! of tensor size and losses of different shapes can be summed.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Which norm the consistency loss uses. The prose definition is L1; the
/// squared variant mirrors the gradient-step form and is kept as an option.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SccNorm {
    L1,
    Squared,
}

/// Per-term weights of the composite objectives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Consistency loss weight (stage 2).
    pub lambda_scc: f64,
    /// Reflectance similarity weight.
    pub lambda_ref: f64,
    /// Illumination smoothness weight.
    pub lambda_ill: f64,
    /// Edge-awareness coefficient inside the smoothness loss.
    pub lambda_edge: f64,
    pub scc_norm: SccNorm,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_scc: 0.01,
            lambda_ref: 0.1,
            lambda_ill: 0.01,
            lambda_edge: 10.0,
            scc_norm: SccNorm::L1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("loss.lambda_scc", self.lambda_scc),
            ("loss.lambda_ref", self.lambda_ref),
            ("loss.lambda_ill", self.lambda_ill),
            ("loss.lambda_edge", self.lambda_edge),
        ] {
            if v < 0.0 {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Root-mean-square of a tensor (scalar output).
pub fn rms(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    tape.sqrt(&tape.mean(&tape.mul(x, x)?)?)
}

/// Mean absolute value of a tensor (scalar output).
pub fn mean_abs(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    tape.mean(&tape.abs(x)?)
}

/// Noise-prediction loss: RMS of the residual between drawn and estimated
/// noise.
pub fn loss_diff(tape: &Tape, eps: &Tensor, eps_pred: &Tensor) -> Result<Tensor> {
    if eps.shape() != eps_pred.shape() {
        return Err(Error::Dimension(format!(
            "loss_diff: {:?} vs {:?}",
            eps.shape(),
            eps_pred.shape()
        )));
    }
    rms(tape, &tape.sub(eps, eps_pred)?)
}

/// Self-consistency loss between the brightened pseudo-label feature and the
/// sampled restored feature.
pub fn loss_scc(
    tape: &Tape,
    pseudo_label: &Tensor,
    restored: &Tensor,
    norm: SccNorm,
) -> Result<Tensor> {
    if pseudo_label.shape() != restored.shape() {
        return Err(Error::Dimension(format!(
            "loss_scc: {:?} vs {:?}",
            pseudo_label.shape(),
            restored.shape()
        )));
    }
    let diff = tape.sub(pseudo_label, restored)?;
    match norm {
        SccNorm::L1 => mean_abs(tape, &diff),
        SccNorm::Squared => tape.mean(&tape.mul(&diff, &diff)?),
    }
}

/// Content loss: sum of reconstruction RMS over an exposure pair.
pub fn loss_con(
    tape: &Tape,
    images: [&Tensor; 2],
    reconstructions: [&Tensor; 2],
) -> Result<Tensor> {
    let mut total = Tensor::scalar_value(0.0);
    for (img, rec) in images.iter().zip(reconstructions) {
        if img.shape() != rec.shape() {
            return Err(Error::Dimension(format!(
                "loss_con: {:?} vs {:?}",
                img.shape(),
                rec.shape()
            )));
        }
        total = tape.add(&total, &rms(tape, &tape.sub(img, rec)?)?)?;
    }
    Ok(total)
}

/// Cross reconstruction: reflectance from either exposure must rebuild either
/// feature under that feature's own illumination — all four (i, j) pairs.
pub fn loss_rec(
    tape: &Tape,
    features: [&Tensor; 2],
    reflectance: [&Tensor; 2],
    illumination: [&Tensor; 2],
) -> Result<Tensor> {
    let c = features[0].shape()[1];
    let mut total = Tensor::scalar_value(0.0);
    for r in reflectance {
        for (f, l) in features.iter().zip(illumination) {
            let lb = tape.broadcast_channel(l, c)?;
            let rebuilt = tape.mul(r, &lb)?;
            if rebuilt.shape() != f.shape() {
                return Err(Error::Dimension(format!(
                    "loss_rec: rebuilt {:?} vs feature {:?}",
                    rebuilt.shape(),
                    f.shape()
                )));
            }
            total = tape.add(&total, &mean_abs(tape, &tape.sub(f, &rebuilt)?)?)?;
        }
    }
    Ok(total)
}

/// Reflectance similarity across the exposure pair.
pub fn loss_ref(tape: &Tape, r1: &Tensor, r2: &Tensor) -> Result<Tensor> {
    if r1.shape() != r2.shape() {
        return Err(Error::Dimension(format!(
            "loss_ref: {:?} vs {:?}",
            r1.shape(),
            r2.shape()
        )));
    }
    mean_abs(tape, &tape.sub(r1, r2)?)
}

/// Edge-aware illumination smoothness: forward-difference gradients of L,
/// each damped by exp(-lambda_edge * mean_c |grad R|), RMS over both
/// directions, summed over the pair.
pub fn loss_ill(
    tape: &Tape,
    illumination: [&Tensor; 2],
    reflectance: [&Tensor; 2],
    lambda_edge: f64,
) -> Result<Tensor> {
    let mut total = Tensor::scalar_value(0.0);
    for (l, r) in illumination.iter().zip(reflectance) {
        if l.shape()[2..] != r.shape()[2..] {
            return Err(Error::Dimension(format!(
                "loss_ill: {:?} vs {:?}",
                l.shape(),
                r.shape()
            )));
        }
        let mut dir_terms = Vec::new();
        for horizontal in [true, false] {
            let (gl, gr) = if horizontal {
                (tape.diff_h(l)?, tape.diff_h(r)?)
            } else {
                (tape.diff_v(l)?, tape.diff_v(r)?)
            };
            let edge = tape.channel_mean(&tape.abs(&gr)?)?;
            let damp = tape.exp(&tape.mul_scalar(&edge, -lambda_edge)?)?;
            dir_terms.push(tape.mul(&gl, &damp)?);
        }
        let stacked = tape.concat_channels(&[&dir_terms[0], &dir_terms[1]])?;
        total = tape.add(&total, &rms(tape, &stacked)?)?;
    }
    Ok(total)
}
