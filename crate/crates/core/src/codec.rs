//! Encoder and decoder between image space and the latent feature space.
//!
//! The encoder stacks `k` residual blocks, each followed by a 2x max-pool,
//! then projects to the latent channel count with a 1x1 conv and a softplus.
//! The softplus keeps latent features nonnegative, which the channel-max
//! illumination estimate of the decomposition stage requires. The decoder
//! mirrors the encoder with nearest-neighbour upsampling and ends in a
//! sigmoid so decoded images always land in (0, 1).

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::nn::{
    named_list, named_list_mut, nest, nest_mut, Conv, LayerNorm, ParamContainer, ResBlock,
};
use crate::tensor::{Tape, Tensor};

/// Shape of the codec: `k` downsampling stages, latent width, first-stage width.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CodecConfig {
    pub k: usize,
    pub latent_channels: usize,
    pub base_width: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            k: 3,
            latent_channels: 64,
            base_width: 16,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k > 4 {
            return Err(Error::Config(format!(
                "codec.k must be in [0,4], got {}",
                self.k
            )));
        }
        if self.latent_channels == 0 || self.base_width == 0 {
            return Err(Error::Config(
                "codec channel widths must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Channel width of each encoder stage: doubles from `base_width`, capped
    /// at the latent width.
    pub fn stage_widths(&self) -> Vec<usize> {
        (0..self.k)
            .map(|i| (self.base_width << i).min(self.latent_channels))
            .collect()
    }

    /// Spatial reduction factor 2^k.
    pub fn reduction(&self) -> usize {
        1 << self.k
    }
}

/// Where a latent feature came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Low,
    High,
    Restored,
}

/// Encoded feature map of shape [1, C, H/2^k, W/2^k].
#[derive(Clone, Debug)]
pub struct LatentFeature {
    pub data: Tensor,
    pub provenance: Provenance,
}

impl LatentFeature {
    pub fn new(data: Tensor, provenance: Provenance) -> Self {
        LatentFeature { data, provenance }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }
}

// ── Encoder ──────────────────────────────────────────────────────────

#[derive(Clone)]
pub struct Encoder {
    pub blocks: Vec<ResBlock>,
    pub proj: Conv,
}

impl Encoder {
    pub fn init(cfg: &CodecConfig, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Self::init_with_rng(cfg, &mut rng)
    }

    pub fn init_with_rng(cfg: &CodecConfig, rng: &mut ChaCha12Rng) -> Self {
        let widths = cfg.stage_widths();
        let mut blocks = Vec::with_capacity(cfg.k);
        let mut ci = 3;
        for &co in &widths {
            blocks.push(ResBlock::new(ci, co, rng));
            ci = co;
        }
        Encoder {
            blocks,
            proj: Conv::new(ci, cfg.latent_channels, 1, 0, rng),
        }
    }

    /// Image [1, 3, H, W] with values in [0, 1] to latent feature.
    pub fn forward(&self, tape: &Tape, image: &Tensor, cfg: &CodecConfig) -> Result<Tensor> {
        let shape = image.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Dimension(format!(
                "encode: expected [1,3,H,W] image, got {:?}",
                shape
            )));
        }
        let (h, w) = (shape[2], shape[3]);
        let r = cfg.reduction();
        if h % r != 0 || w % r != 0 {
            return Err(Error::Dimension(format!(
                "encode: image {h}x{w} not divisible by 2^k = {r}"
            )));
        }
        if image.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Domain(
                "encode: image values must lie in [0,1]".into(),
            ));
        }
        let mut x = image.clone();
        for block in &self.blocks {
            x = block.forward(tape, &x)?;
            x = tape.max_pool2d(&x, 2, 2)?;
        }
        let x = self.proj.forward(tape, &x)?;
        tape.softplus(&x)
    }
}

impl ParamContainer for Encoder {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = named_list("block", &self.blocks);
        out.extend(nest("proj", self.proj.named_params()));
        out
    }
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = named_list_mut("block", &mut self.blocks);
        out.extend(nest_mut("proj", self.proj.named_params_mut()));
        out
    }
}

/// Encode an image into a provenance-tagged latent feature.
pub fn encode(
    tape: &Tape,
    image: &Tensor,
    cfg: &CodecConfig,
    params: &Encoder,
    provenance: Provenance,
) -> Result<LatentFeature> {
    Ok(LatentFeature::new(
        params.forward(tape, image, cfg)?,
        provenance,
    ))
}

// ── Decoder ──────────────────────────────────────────────────────────

#[derive(Clone)]
pub struct Decoder {
    pub proj: Conv,
    pub blocks: Vec<ResBlock>,
    pub out_norm: LayerNorm,
    pub out: Conv,
}

impl Decoder {
    pub fn init(cfg: &CodecConfig, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Self::init_with_rng(cfg, &mut rng)
    }

    pub fn init_with_rng(cfg: &CodecConfig, rng: &mut ChaCha12Rng) -> Self {
        let widths = cfg.stage_widths();
        if cfg.k == 0 {
            return Decoder {
                proj: Conv::new(cfg.latent_channels, cfg.latent_channels, 1, 0, rng),
                blocks: Vec::new(),
                // normalised zero-started head keeps the sigmoid unsaturated
                out_norm: LayerNorm::new(cfg.latent_channels),
                out: Conv::zeroed(cfg.latent_channels, 3, 1, 0),
            };
        }
        let proj = Conv::new(cfg.latent_channels, widths[cfg.k - 1], 1, 0, rng);
        let mut blocks = Vec::with_capacity(cfg.k);
        for i in (0..cfg.k).rev() {
            let ci = widths[i];
            let co = if i == 0 { widths[0] } else { widths[i - 1] };
            blocks.push(ResBlock::new(ci, co, rng));
        }
        Decoder {
            proj,
            blocks,
            // normalised zero-started head keeps the sigmoid unsaturated
            out_norm: LayerNorm::new(widths[0]),
            out: Conv::zeroed(widths[0], 3, 3, 1),
        }
    }

    /// Latent feature back to an image in (0, 1) of shape [1, 3, H, W].
    pub fn forward(&self, tape: &Tape, feature: &Tensor, cfg: &CodecConfig) -> Result<Tensor> {
        let shape = feature.shape();
        if shape.len() != 4 || shape[1] != cfg.latent_channels {
            return Err(Error::Dimension(format!(
                "decode: expected [1,{},h,w] feature, got {:?}",
                cfg.latent_channels, shape
            )));
        }
        let mut x = self.proj.forward(tape, feature)?;
        for block in &self.blocks {
            x = tape.upsample2x(&x)?;
            x = block.forward(tape, &x)?;
        }
        let x = self.out_norm.forward(tape, &x)?;
        let x = self.out.forward(tape, &x)?;
        tape.sigmoid(&x)
    }
}

impl ParamContainer for Decoder {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = nest("proj", self.proj.named_params());
        out.extend(named_list("block", &self.blocks));
        out.extend(nest("onorm", self.out_norm.named_params()));
        out.extend(nest("out", self.out.named_params()));
        out
    }
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = nest_mut("proj", self.proj.named_params_mut());
        out.extend(named_list_mut("block", &mut self.blocks));
        out.extend(nest_mut("onorm", self.out_norm.named_params_mut()));
        out.extend(nest_mut("out", self.out.named_params_mut()));
        out
    }
}

/// Decode a latent feature back to an image.
pub fn decode(
    tape: &Tape,
    feature: &LatentFeature,
    cfg: &CodecConfig,
    params: &Decoder,
) -> Result<Tensor> {
    params.forward(tape, &feature.data, cfg)
}
