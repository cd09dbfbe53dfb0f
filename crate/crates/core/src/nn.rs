//! Shared network building blocks and parameter plumbing.
//!
//! Parameter structs own plain (untracked) tensors. Before a training step,
//! `watch` produces a tracked copy registered on the step's tape; inference
//! and frozen modules just use the untracked originals, which record nothing.

use rand_chacha::ChaCha12Rng;

use crate::error::Result;
use crate::tensor::{Tape, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Anything that exposes its trainable tensors in a stable named order.
pub trait ParamContainer: Clone {
    fn named_params(&self) -> Vec<(String, &Tensor)>;
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    /// Tracked copy whose tensors are leaves of `tape`.
    fn watch(&self, tape: &Tape) -> Self {
        let mut copy = self.clone();
        for (_, t) in copy.named_params_mut() {
            *t = tape.leaf(t);
        }
        copy
    }

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }
}

fn prefixed<'a>(prefix: &str, items: Vec<(String, &'a Tensor)>) -> Vec<(String, &'a Tensor)> {
    items
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

fn prefixed_mut<'a>(
    prefix: &str,
    items: Vec<(String, &'a mut Tensor)>,
) -> Vec<(String, &'a mut Tensor)> {
    items
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

/// He-normal initialisation for a conv kernel [co, ci, kh, kw].
pub fn conv_init(co: usize, ci: usize, kh: usize, kw: usize, rng: &mut ChaCha12Rng) -> Tensor {
    let std = (2.0 / (ci * kh * kw) as f64).sqrt();
    scaled_randn(&[co, ci, kh, kw], std, rng)
}

fn scaled_randn(shape: &[usize], std: f64, rng: &mut ChaCha12Rng) -> Tensor {
    let t = Tensor::randn(shape, rng);
    let data = t.data().iter().map(|v| v * std).collect();
    Tensor::from_vec(shape, data).unwrap()
}

// ── Convolution layer ────────────────────────────────────────────────

#[derive(Clone)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new(ci: usize, co: usize, k: usize, pad: usize, rng: &mut ChaCha12Rng) -> Self {
        Conv {
            weight: conv_init(co, ci, k, k, rng),
            bias: Tensor::zeros(&[co]),
            stride: 1,
            pad,
        }
    }

    /// All-zero weights and bias; used for output projections so freshly
    /// initialised blocks start as the identity / zero map.
    pub fn zeroed(ci: usize, co: usize, k: usize, pad: usize) -> Self {
        Conv {
            weight: Tensor::zeros(&[co, ci, k, k]),
            bias: Tensor::zeros(&[co]),
            stride: 1,
            pad,
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        tape.conv2d(x, &self.weight, Some(&self.bias), self.stride, self.pad)
    }
}

impl ParamContainer for Conv {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![("w".into(), &self.weight), ("b".into(), &self.bias)]
    }
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("w".into(), &mut self.weight), ("b".into(), &mut self.bias)]
    }
}

// ── Linear layer ─────────────────────────────────────────────────────

#[derive(Clone)]
pub struct Linear {
    pub weight: Tensor, // [in, out]
    pub bias: Tensor,   // [out]
}

impl Linear {
    pub fn new(ci: usize, co: usize, rng: &mut ChaCha12Rng) -> Self {
        let std = (1.0 / ci as f64).sqrt();
        Linear {
            weight: scaled_randn(&[ci, co], std, rng),
            bias: Tensor::zeros(&[co]),
        }
    }

    pub fn zeroed(ci: usize, co: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[ci, co]),
            bias: Tensor::zeros(&[co]),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        tape.add_row_bias(&tape.matmul(x, &self.weight)?, &self.bias)
    }
}

impl ParamContainer for Linear {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![("w".into(), &self.weight), ("b".into(), &self.bias)]
    }
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("w".into(), &mut self.weight), ("b".into(), &mut self.bias)]
    }
}

// ── Layer norm ───────────────────────────────────────────────────────

#[derive(Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(c: usize) -> Self {
        LayerNorm {
            gamma: Tensor::ones(&[c]),
            beta: Tensor::zeros(&[c]),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        tape.layer_norm(x, &self.gamma, &self.beta, LAYER_NORM_EPS)
    }
}

impl ParamContainer for LayerNorm {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![("g".into(), &self.gamma), ("b".into(), &self.beta)]
    }
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("g".into(), &mut self.gamma), ("b".into(), &mut self.beta)]
    }
}

// ── Residual block: conv3x3 -> norm -> SiLU -> conv3x3, plus skip ────

#[derive(Clone)]
pub struct ResBlock {
    pub conv1: Conv,
    pub norm: LayerNorm,
    pub conv2: Conv,
    /// 1x1 projection when input and output widths differ.
    pub skip: Option<Conv>,
}

impl ResBlock {
    pub fn new(ci: usize, co: usize, rng: &mut ChaCha12Rng) -> Self {
        ResBlock {
            conv1: Conv::new(ci, co, 3, 1, rng),
            norm: LayerNorm::new(co),
            conv2: Conv::new(co, co, 3, 1, rng),
            skip: (ci != co).then(|| Conv::new(ci, co, 1, 0, rng)),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(tape, x)?;
        let h = self.norm.forward(tape, &h)?;
        let h = tape.silu(&h)?;
        let h = self.conv2.forward(tape, &h)?;
        let s = match &self.skip {
            Some(p) => p.forward(tape, x)?,
            None => x.clone(),
        };
        tape.add(&h, &s)
    }
}

impl ParamContainer for ResBlock {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = prefixed("c1", self.conv1.named_params());
        out.extend(prefixed("n", self.norm.named_params()));
        out.extend(prefixed("c2", self.conv2.named_params()));
        if let Some(s) = &self.skip {
            out.extend(prefixed("skip", s.named_params()));
        }
        out
    }
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = prefixed_mut("c1", self.conv1.named_params_mut());
        out.extend(prefixed_mut("n", self.norm.named_params_mut()));
        out.extend(prefixed_mut("c2", self.conv2.named_params_mut()));
        if let Some(s) = &mut self.skip {
            out.extend(prefixed_mut("skip", s.named_params_mut()));
        }
        out
    }
}

// ── Two-conv refinement block: x + conv(silu(conv(x))) ───────────────

/// Convolutional refinement used by the decomposition branches. The second
/// conv starts at zero, so a fresh block is exactly the identity.
#[derive(Clone)]
pub struct RefineBlock {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl RefineBlock {
    pub fn new(c: usize, rng: &mut ChaCha12Rng) -> Self {
        RefineBlock {
            conv1: Conv::new(c, c, 3, 1, rng),
            conv2: Conv::zeroed(c, c, 3, 1),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let h = tape.silu(&self.conv1.forward(tape, x)?)?;
        let h = self.conv2.forward(tape, &h)?;
        tape.add(x, &h)
    }
}

impl ParamContainer for RefineBlock {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = prefixed("c1", self.conv1.named_params());
        out.extend(prefixed("c2", self.conv2.named_params()));
        out
    }
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = prefixed_mut("c1", self.conv1.named_params_mut());
        out.extend(prefixed_mut("c2", self.conv2.named_params_mut()));
        out
    }
}

// ── Single-head attention over flattened spatial positions ───────────

#[derive(Clone)]
pub struct AttentionBlock {
    pub to_q: Linear,
    pub to_k: Linear,
    pub to_v: Linear,
    /// Output projection, zero-initialised so the block starts as a zero map.
    pub to_out: Linear,
}

impl AttentionBlock {
    pub fn new(c: usize, rng: &mut ChaCha12Rng) -> Self {
        AttentionBlock {
            to_q: Linear::new(c, c, rng),
            to_k: Linear::new(c, c, rng),
            to_v: Linear::new(c, c, rng),
            to_out: Linear::zeroed(c, c),
        }
    }

    /// Attend from `query_map` to `kv_map`, both [1, c, h, w] with the same
    /// spatial extents. Returns the (un-added) attention output.
    pub fn forward(&self, tape: &Tape, query_map: &Tensor, kv_map: &Tensor) -> Result<Tensor> {
        let shape = query_map.shape().to_vec();
        let (c, h, w) = (shape[1], shape[2], shape[3]);
        let qs = flatten_spatial(tape, query_map)?;
        let ks = flatten_spatial(tape, kv_map)?;
        let q = self.to_q.forward(tape, &qs)?;
        let k = self.to_k.forward(tape, &ks)?;
        let v = self.to_v.forward(tape, &ks)?;
        let mixed = tape.attention(&q, &k, &v)?;
        let out = self.to_out.forward(tape, &mixed)?;
        unflatten_spatial(tape, &out, c, h, w)
    }
}

impl ParamContainer for AttentionBlock {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = prefixed("q", self.to_q.named_params());
        out.extend(prefixed("k", self.to_k.named_params()));
        out.extend(prefixed("v", self.to_v.named_params()));
        out.extend(prefixed("o", self.to_out.named_params()));
        out
    }
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = prefixed_mut("q", self.to_q.named_params_mut());
        out.extend(prefixed_mut("k", self.to_k.named_params_mut()));
        out.extend(prefixed_mut("v", self.to_v.named_params_mut()));
        out.extend(prefixed_mut("o", self.to_out.named_params_mut()));
        out
    }
}

/// [1, c, h, w] -> [h·w, c] with spatial positions as rows.
pub fn flatten_spatial(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let flat = tape.reshape(x, &[c, h * w])?;
    tape.transpose2(&flat)
}

/// Inverse of [`flatten_spatial`].
pub fn unflatten_spatial(tape: &Tape, x: &Tensor, c: usize, h: usize, w: usize) -> Result<Tensor> {
    let t = tape.transpose2(x)?;
    tape.reshape(&t, &[1, c, h, w])
}

// ── Sinusoidal time embedding ────────────────────────────────────────

/// Classic sin/cos positional features of a scalar timestep, shape [1, dim].
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        let arg = t as f64 * freq;
        data[i] = arg.sin();
        data[half + i] = arg.cos();
    }
    Tensor::from_vec(&[1, dim], data).unwrap()
}

/// Names/tensors of a whole list of blocks under `prefix.{i}`.
pub fn named_list<'a, P: ParamContainer>(
    prefix: &str,
    items: &'a [P],
) -> Vec<(String, &'a Tensor)> {
    let mut out = Vec::new();
    for (i, item) in items.iter().enumerate() {
        out.extend(prefixed(&format!("{prefix}.{i}"), item.named_params()));
    }
    out
}

pub fn named_list_mut<'a, P: ParamContainer>(
    prefix: &str,
    items: &'a mut [P],
) -> Vec<(String, &'a mut Tensor)> {
    let mut out = Vec::new();
    for (i, item) in items.iter_mut().enumerate() {
        out.extend(prefixed_mut(&format!("{prefix}.{i}"), item.named_params_mut()));
    }
    out
}

/// Helper for composing nested containers in `named_params` impls.
pub fn nest<'a>(prefix: &str, items: Vec<(String, &'a Tensor)>) -> Vec<(String, &'a Tensor)> {
    prefixed(prefix, items)
}

pub fn nest_mut<'a>(
    prefix: &str,
    items: Vec<(String, &'a mut Tensor)>,
) -> Vec<(String, &'a mut Tensor)> {
    prefixed_mut(prefix, items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn watch_tracks_all_tensors() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let block = ResBlock::new(3, 8, &mut rng);
        let tape = Tape::new();
        let live = block.watch(&tape);
        for (_, t) in live.named_params() {
            assert!(t.is_tracked());
        }
        for (_, t) in block.named_params() {
            assert!(!t.is_tracked());
        }
    }

    #[test]
    fn refine_block_is_identity_at_init() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let block = RefineBlock::new(4, &mut rng);
        let tape = Tape::new();
        let x = Tensor::randn(&[1, 4, 5, 5], &mut rng);
        let y = block.forward(&tape, &x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn attention_block_is_zero_at_init() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let block = AttentionBlock::new(4, &mut rng);
        let tape = Tape::new();
        let x = Tensor::randn(&[1, 4, 3, 3], &mut rng);
        let y = block.forward(&tape, &x, &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flatten_round_trip() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let tape = Tape::new();
        let x = Tensor::randn(&[1, 3, 2, 4], &mut rng);
        let flat = flatten_spatial(&tape, &x).unwrap();
        assert_eq!(flat.shape(), &[8, 3]);
        let back = unflatten_spatial(&tape, &flat, 3, 2, 4).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn sinusoidal_embedding_varies_with_t() {
        let a = sinusoidal_embedding(1, 16);
        let b = sinusoidal_embedding(999, 16);
        let diff: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(diff > 0.5);
    }
}
