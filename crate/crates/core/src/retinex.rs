//! Retinex decomposition in latent space.
//!
//! The initial estimate takes the channel-max of the feature as illumination
//! and the ratio feature/(illumination + tau) as reflectance. A decomposition
//! network then refines both maps: each branch is embedded by convolutional
//! blocks, cross-attention moves content from the illumination embedding into
//! the reflectance branch, self-attention extracts content still hiding in
//! the illumination branch, and convolutional heads fuse the results.
//!
//! Both heads act as multiplicative gates on the initial estimate rather
//! than free-form outputs: the reflectance gate is 2*sigmoid (range (0,2),
//! matching the fact that the initial reflectance is always below 1), the
//! illumination gate is a softplus (nonnegative, unbounded above). Gated
//! refinement pins the scale split between the two maps — without it the
//! reconstruction loss admits the degenerate family (R*s, L/s) and training
//! collapses the illumination. All gate output layers start at zero weights
//! with the bias at the gate's unit point, so a freshly initialised network
//! reproduces the initial decomposition exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::codec::LatentFeature;
use crate::error::{Error, Result};
use crate::nn::{nest, nest_mut, AttentionBlock, Conv, ParamContainer, RefineBlock};
use crate::tensor::{Tape, Tensor};

/// softplus(x) = 1 at this bias; the illumination gate starts at unity.
const GATE_UNIT_BIAS: f64 = 0.5413248546129181; // ln(e - 1)

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetinexConfig {
    /// Small constant guarding the reflectance division.
    pub tau: f64,
    /// Illumination correction exponent used for the brightening pseudo-label.
    pub gamma: f64,
}

impl Default for RetinexConfig {
    fn default() -> Self {
        RetinexConfig {
            tau: 1e-4,
            gamma: 0.2,
        }
    }
}

impl RetinexConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::Config(format!(
                "retinex.tau must be > 0, got {}",
                self.tau
            )));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!(
                "retinex.gamma must be in (0,1], got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Reflectance [1,C,h,w] and single-channel illumination [1,1,h,w].
#[derive(Clone, Debug)]
pub struct RetinexPair {
    pub reflectance: Tensor,
    pub illumination: Tensor,
}

/// LIME-style initial decomposition: channel-max illumination, guarded ratio
/// reflectance.
pub fn init_decompose(tape: &Tape, feature: &LatentFeature, tau: f64) -> Result<RetinexPair> {
    if tau <= 0.0 {
        return Err(Error::Contract(format!("tau must be > 0, got {tau}")));
    }
    let f = &feature.data;
    let illum = tape.channel_max(f)?;
    let denom = tape.broadcast_channel(&tape.add_scalar(&illum, tau)?, feature.channels())?;
    let refl = tape.div(f, &denom)?;
    Ok(RetinexPair {
        reflectance: refl,
        illumination: illum,
    })
}

/// Hadamard recomposition R (x) L with the illumination broadcast over channels.
pub fn recompose(tape: &Tape, pair: &RetinexPair) -> Result<Tensor> {
    let c = pair.reflectance.shape()[1];
    let l = tape.broadcast_channel(&pair.illumination, c)?;
    tape.mul(&pair.reflectance, &l)
}

/// Elementwise L^gamma; L must be nonnegative.
pub fn gamma_correct(tape: &Tape, illumination: &Tensor, gamma: f64) -> Result<Tensor> {
    if illumination.data().iter().any(|&v| v < 0.0) {
        return Err(Error::Domain(
            "gamma_correct: negative illumination value".into(),
        ));
    }
    tape.pow_scalar(illumination, gamma)
}

// ── Decomposition network ────────────────────────────────────────────

#[derive(Clone)]
pub struct DecompNet {
    /// Embeds the single-channel illumination estimate to C channels.
    pub embed_illum_in: Conv,
    pub embed_illum: RefineBlock,
    pub embed_refl: RefineBlock,
    pub cross: AttentionBlock,
    pub self_attn: AttentionBlock,
    pub head_refl_mix: Conv,
    pub head_refl_gate: Conv,
    pub head_illum_mix: Conv,
    pub head_illum_gate: Conv,
}

impl DecompNet {
    pub fn init(latent_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Self::init_with_rng(latent_channels, &mut rng)
    }

    pub fn init_with_rng(c: usize, rng: &mut ChaCha12Rng) -> Self {
        let mut head_illum_gate = Conv::zeroed(c, 1, 3, 1);
        head_illum_gate.bias = Tensor::full(&[1], GATE_UNIT_BIAS);
        DecompNet {
            embed_illum_in: Conv::new(1, c, 3, 1, rng),
            embed_illum: RefineBlock::new(c, rng),
            embed_refl: RefineBlock::new(c, rng),
            cross: AttentionBlock::new(c, rng),
            self_attn: AttentionBlock::new(c, rng),
            head_refl_mix: Conv::new(c, c, 3, 1, rng),
            head_refl_gate: Conv::zeroed(c, c, 3, 1), // 2*sigmoid(0) = 1
            head_illum_mix: Conv::new(c, c, 3, 1, rng),
            head_illum_gate,
        }
    }

    /// Full decomposition: initial estimate, branch embeddings, attention
    /// exchange, gated heads.
    pub fn forward(
        &self,
        tape: &Tape,
        feature: &LatentFeature,
        cfg: &RetinexConfig,
    ) -> Result<RetinexPair> {
        let init = init_decompose(tape, feature, cfg.tau)?;

        let illum_embed = self
            .embed_illum
            .forward(tape, &self.embed_illum_in.forward(tape, &init.illumination)?)?;
        let refl_embed = self.embed_refl.forward(tape, &init.reflectance)?;

        // cross-attention reinforces reflectance content from the
        // illumination embedding; self-attention extracts content that still
        // hides in the illumination branch
        let refl_mixed = tape.add(
            &refl_embed,
            &self.cross.forward(tape, &refl_embed, &illum_embed)?,
        )?;
        let illum_content = self.self_attn.forward(tape, &illum_embed, &illum_embed)?;

        let fused = tape.add(&refl_mixed, &illum_content)?;
        let refl_in = tape.silu(&self.head_refl_mix.forward(tape, &fused)?)?;
        let refl_gate = tape.mul_scalar(
            &tape.sigmoid(&self.head_refl_gate.forward(tape, &refl_in)?)?,
            2.0,
        )?;
        let refl = tape.mul(&init.reflectance, &refl_gate)?;

        let illum_residual = tape.sub(&illum_embed, &illum_content)?;
        let gate_in = tape.silu(&self.head_illum_mix.forward(tape, &illum_residual)?)?;
        let gate = tape.softplus(&self.head_illum_gate.forward(tape, &gate_in)?)?;
        let illum = tape.mul(&init.illumination, &gate)?;

        Ok(RetinexPair {
            reflectance: refl,
            illumination: illum,
        })
    }
}

impl ParamContainer for DecompNet {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = nest("ein", self.embed_illum_in.named_params());
        out.extend(nest("el", self.embed_illum.named_params()));
        out.extend(nest("er", self.embed_refl.named_params()));
        out.extend(nest("ca", self.cross.named_params()));
        out.extend(nest("sa", self.self_attn.named_params()));
        out.extend(nest("hrm", self.head_refl_mix.named_params()));
        out.extend(nest("hrg", self.head_refl_gate.named_params()));
        out.extend(nest("him", self.head_illum_mix.named_params()));
        out.extend(nest("hig", self.head_illum_gate.named_params()));
        out
    }
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = nest_mut("ein", self.embed_illum_in.named_params_mut());
        out.extend(nest_mut("el", self.embed_illum.named_params_mut()));
        out.extend(nest_mut("er", self.embed_refl.named_params_mut()));
        out.extend(nest_mut("ca", self.cross.named_params_mut()));
        out.extend(nest_mut("sa", self.self_attn.named_params_mut()));
        out.extend(nest_mut("hrm", self.head_refl_mix.named_params_mut()));
        out.extend(nest_mut("hrg", self.head_refl_gate.named_params_mut()));
        out.extend(nest_mut("him", self.head_illum_mix.named_params_mut()));
        out.extend(nest_mut("hig", self.head_illum_gate.named_params_mut()));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Provenance;
    use approx::assert_relative_eq;

    fn feat(shape: [usize; 4], data: Vec<f64>) -> LatentFeature {
        LatentFeature::new(Tensor::from_vec(&shape, data).unwrap(), Provenance::Low)
    }

    #[test]
    fn init_decompose_two_channel_pixel() {
        let tape = Tape::new();
        let f = feat([1, 2, 1, 1], vec![0.2, 0.6]);
        let pair = init_decompose(&tape, &f, 1e-4).unwrap();
        assert_relative_eq!(pair.illumination.data()[0], 0.6, epsilon = 1e-15);
        assert_relative_eq!(pair.reflectance.data()[0], 0.2 / 0.6001, epsilon = 1e-12);
        assert_relative_eq!(pair.reflectance.data()[1], 0.6 / 0.6001, epsilon = 1e-12);
        // the spec's quoted digits
        assert_relative_eq!(pair.reflectance.data()[0], 0.3333, epsilon = 1e-4);
        assert_relative_eq!(pair.reflectance.data()[1], 0.9998, epsilon = 1e-4);
    }

    #[test]
    fn init_decompose_zero_feature() {
        let tape = Tape::new();
        let f = feat([1, 3, 2, 2], vec![0.0; 12]);
        let pair = init_decompose(&tape, &f, 1e-4).unwrap();
        assert!(pair.illumination.data().iter().all(|&v| v == 0.0));
        assert!(pair.reflectance.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_decompose_single_channel_near_one() {
        let tape = Tape::new();
        let f = feat([1, 1, 2, 2], vec![0.5, 1.0, 2.0, 0.25]);
        let pair = init_decompose(&tape, &f, 1e-4).unwrap();
        for &r in pair.reflectance.data() {
            assert!(r > 0.999 && r < 1.0, "reflectance {r}");
        }
    }

    #[test]
    fn recompose_identity_and_zero_illumination() {
        let tape = Tape::new();
        let r = Tensor::from_vec(&[1, 2, 1, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let ones = RetinexPair {
            reflectance: r.clone(),
            illumination: Tensor::ones(&[1, 1, 1, 2]),
        };
        assert_eq!(recompose(&tape, &ones).unwrap().data(), r.data());
        let zeros = RetinexPair {
            reflectance: r,
            illumination: Tensor::zeros(&[1, 1, 1, 2]),
        };
        assert!(recompose(&tape, &zeros)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn recompose_of_init_matches_algebraic_form() {
        use rand::SeedableRng;
        let tape = Tape::new();
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let tau = 1e-4;
        let f = Tensor::rand_uniform(&[1, 4, 3, 3], 0.0, 2.0, &mut rng);
        let lf = LatentFeature::new(f.clone(), Provenance::Low);
        let pair = init_decompose(&tape, &lf, tau).unwrap();
        let back = recompose(&tape, &pair).unwrap();
        // F * L / (L + tau), elementwise
        for c in 0..4 {
            for y in 0..3 {
                for x in 0..3 {
                    let l = (0..4)
                        .map(|ch| f.at(&[0, ch, y, x]))
                        .fold(f64::NEG_INFINITY, f64::max);
                    let want = f.at(&[0, c, y, x]) * l / (l + tau);
                    assert_relative_eq!(back.at(&[0, c, y, x]), want, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn gamma_correct_endpoints_and_gain() {
        let tape = Tape::new();
        let l = Tensor::from_vec(&[1, 1, 1, 3], vec![1.0, 0.0, 0.25]).unwrap();
        let y = gamma_correct(&tape, &l, 0.2).unwrap();
        assert_eq!(y.data()[0], 1.0);
        assert_eq!(y.data()[1], 0.0);
        assert_relative_eq!(y.data()[2], 0.7579, epsilon = 1e-4);
    }

    #[test]
    fn gamma_correct_rejects_negative() {
        let tape = Tape::new();
        let l = Tensor::from_vec(&[1, 1, 1, 2], vec![0.5, -0.1]).unwrap();
        assert!(matches!(
            gamma_correct(&tape, &l, 0.2).unwrap_err(),
            Error::Domain(_)
        ));
    }

    #[test]
    fn gamma_correct_brightens_on_unit_interval() {
        let tape = Tape::new();
        let vals: Vec<f64> = (1..100).map(|i| i as f64 / 100.0).collect();
        let n = vals.len();
        let l = Tensor::from_vec(&[1, 1, 1, n], vals.clone()).unwrap();
        let y = gamma_correct(&tape, &l, 0.2).unwrap();
        for (orig, bright) in vals.iter().zip(y.data()) {
            assert!(bright >= orig, "{bright} < {orig}");
        }
        // monotone increasing
        for w in y.data().windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn decomp_net_output_shapes() {
        let tape = Tape::new();
        let net = DecompNet::init(6, 3);
        let cfg = RetinexConfig::default();
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let f = LatentFeature::new(
            Tensor::rand_uniform(&[1, 6, 4, 5], 0.0, 1.5, &mut rng),
            Provenance::Low,
        );
        let pair = net.forward(&tape, &f, &cfg).unwrap();
        assert_eq!(pair.reflectance.shape(), &[1, 6, 4, 5]);
        assert_eq!(pair.illumination.shape(), &[1, 1, 4, 5]);
    }

    #[test]
    fn decomp_net_illumination_nonnegative_single_channel() {
        let tape = Tape::new();
        let net = DecompNet::init(4, 11);
        let cfg = RetinexConfig::default();
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        for _ in 0..5 {
            let f = LatentFeature::new(
                Tensor::rand_uniform(&[1, 4, 4, 4], 0.0, 3.0, &mut rng),
                Provenance::Low,
            );
            let pair = net.forward(&tape, &f, &cfg).unwrap();
            assert_eq!(pair.illumination.shape()[1], 1);
            assert!(pair.illumination.data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn fresh_net_reproduces_initial_decomposition() {
        let tape = Tape::new();
        let net = DecompNet::init(5, 21);
        let cfg = RetinexConfig::default();
        let mut rng = ChaCha12Rng::seed_from_u64(22);
        let f = LatentFeature::new(
            Tensor::rand_uniform(&[1, 5, 6, 6], 0.0, 2.0, &mut rng),
            Provenance::Low,
        );
        let refined = net.forward(&tape, &f, &cfg).unwrap();
        let init = init_decompose(&tape, &f, cfg.tau).unwrap();
        let via_net = recompose(&tape, &refined).unwrap();
        let via_init = recompose(&tape, &init).unwrap();
        for (a, b) in via_net.data().iter().zip(via_init.data()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn init_decompose_scale_covariance() {
        use rand::SeedableRng;
        let tape = Tape::new();
        let tau = 1e-4;
        let mut rng = ChaCha12Rng::seed_from_u64(33);
        for trial in 0..20 {
            let f = Tensor::rand_uniform(&[1, 3, 4, 4], 0.05, 2.0, &mut rng);
            let s = [1.0, 1.5, 3.0, 10.0, 120.0][trial % 5];
            let scaled =
                Tensor::from_vec(f.shape(), f.data().iter().map(|v| v * s).collect()).unwrap();
            let base = init_decompose(&tape, &feat_of(&f), tau).unwrap();
            let big = init_decompose(&tape, &feat_of(&scaled), tau).unwrap();
            // channel-max is exactly homogeneous
            for (a, b) in big.illumination.data().iter().zip(base.illumination.data()) {
                assert_relative_eq!(*a, s * b, epsilon = 1e-12, max_relative = 1e-12);
            }
            // reflectance moves at most by the tau perturbation (s >= 1)
            for i in 0..f.numel() {
                let pix = i % 16;
                let l = base.illumination.data()[pix];
                let bound = tau * f.data()[i] / (l * (l + tau));
                let diff = (big.reflectance.data()[i] - base.reflectance.data()[i]).abs();
                assert!(diff <= bound + 1e-15, "diff {diff} > bound {bound}");
            }
        }
    }

    fn feat_of(t: &Tensor) -> LatentFeature {
        LatentFeature::new(t.clone(), Provenance::Low)
    }
}
