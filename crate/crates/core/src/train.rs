//! Two-stage training, the bundled model parameters, and the inference path.
//!
//! Stage 1 trains encoder, decomposition network, and decoder on paired
//! exposures of shared scenes; the denoiser stays frozen. Stage 2 trains only
//! the denoiser on unpaired dark/bright images: each iteration forms the
//! mixed clean sample from the dark image's reflectance and the bright
//! image's illumination, takes one noise-prediction step, then runs the
//! sampler and takes one consistency step against the gamma-brightened
//! pseudo-label. Frozen parameter sets are never touched, so they stay
//! bitwise identical across a stage.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::checkpoint;
use crate::codec::{Decoder, Encoder, LatentFeature, Provenance};
use crate::config::RunConfig;
use crate::diffusion::{q_sample, sample, sample_with_final, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::imageio::read_image;
use crate::losses::{loss_con, loss_diff, loss_ill, loss_rec, loss_ref, loss_scc};
use crate::nn::ParamContainer;
use crate::optim::{stage1_lr, Adam};
use crate::retinex::{gamma_correct, recompose, DecompNet, RetinexPair};
use crate::tensor::{Tape, Tensor};

// ── Training configuration ───────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: u8,
    pub iterations: usize,
    pub batch: usize,
    pub patch: usize,
    pub lr_initial: f64,
    pub lr_decay: f64,
    pub lr_stage2: f64,
    pub seed: u64,
    /// Stop stage 1 early once the trailing-window content loss drops below
    /// this value.
    pub early_stop_lcon: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: 1,
            iterations: 2000,
            batch: 4,
            patch: 64,
            lr_initial: 1e-4,
            lr_decay: 0.8,
            lr_stage2: 2e-5,
            seed: 0,
            early_stop_lcon: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.stage == 1 || self.stage == 2) {
            return Err(Error::Config(format!(
                "train.stage must be 1 or 2, got {}",
                self.stage
            )));
        }
        if self.batch == 0 || self.iterations == 0 {
            return Err(Error::Config(
                "train.batch and train.iterations must be positive".into(),
            ));
        }
        if self.lr_initial <= 0.0 || self.lr_stage2 <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!(
                "train.lr_decay must be in (0,1], got {}",
                self.lr_decay
            )));
        }
        Ok(())
    }
}

// ── Model parameter bundle ───────────────────────────────────────────

/// Which parameter sets the current stage must not update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FreezeFlags {
    pub encoder: bool,
    pub decomp: bool,
    pub decoder: bool,
    pub denoiser: bool,
}

impl FreezeFlags {
    pub fn stage1() -> Self {
        FreezeFlags {
            denoiser: true,
            ..Default::default()
        }
    }

    pub fn stage2() -> Self {
        FreezeFlags {
            encoder: true,
            decomp: true,
            decoder: true,
            denoiser: false,
        }
    }
}

/// The four trainable parameter sets plus freeze flags.
#[derive(Clone)]
pub struct ModelParams {
    pub encoder: Encoder,
    pub decomp: DecompNet,
    pub decoder: Decoder,
    pub denoiser: Denoiser,
    pub frozen: FreezeFlags,
    /// Highest completed training stage (0 = freshly initialised).
    pub stage: u8,
}

impl std::fmt::Debug for ModelParams {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "ModelParams(stage={}, tensors={})",
            self.stage,
            self.named_all().len()
        )
    }
}

impl ModelParams {
    pub fn init(run: &RunConfig) -> Self {
        let c = run.codec.latent_channels;
        ModelParams {
            encoder: Encoder::init(&run.codec, run.seed.wrapping_add(0x0e)),
            decomp: DecompNet::init(c, run.seed.wrapping_add(0xd0)),
            decoder: Decoder::init(&run.codec, run.seed.wrapping_add(0xde)),
            denoiser: Denoiser::init(c, run.seed.wrapping_add(0x5d)),
            frozen: FreezeFlags::default(),
            stage: 0,
        }
    }

    fn named_all(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        for (prefix, params) in [
            ("encoder", self.encoder.named_params()),
            ("decomp", self.decomp.named_params()),
            ("decoder", self.decoder.named_params()),
            ("denoiser", self.denoiser.named_params()),
        ] {
            out.extend(params.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let stage = Tensor::scalar_value(self.stage as f64);
        let mut entries = self.named_all();
        entries.push(("meta.stage".into(), &stage));
        checkpoint::save(path, &entries)
    }

    /// Load a checkpoint into a parameter bundle shaped by `run`. Names and
    /// shapes must match the configuration exactly.
    pub fn load(path: impl AsRef<Path>, run: &RunConfig) -> Result<Self> {
        let path = path.as_ref();
        let map = checkpoint::load(path)?;
        let mut params = ModelParams::init(run);
        let stage = map
            .get("meta.stage")
            .map(|t| t.data()[0] as u8)
            .unwrap_or(0);
        let mut fill = |prefix: &str, named: Vec<(String, &mut Tensor)>| -> Result<()> {
            for (name, tensor) in named {
                let full = format!("{prefix}.{name}");
                let Some(loaded) = map.get(&full) else {
                    return Err(Error::format(
                        path.display().to_string(),
                        format!("checkpoint missing tensor '{full}' (wrong config?)"),
                    ));
                };
                if loaded.shape() != tensor.shape() {
                    return Err(Error::format(
                        path.display().to_string(),
                        format!(
                            "tensor '{full}': checkpoint shape {:?} vs configured {:?}",
                            loaded.shape(),
                            tensor.shape()
                        ),
                    ));
                }
                tensor.set_data(loaded.to_vec());
            }
            Ok(())
        };
        fill("encoder", params.encoder.named_params_mut())?;
        fill("decomp", params.decomp.named_params_mut())?;
        fill("decoder", params.decoder.named_params_mut())?;
        fill("denoiser", params.denoiser.named_params_mut())?;
        params.stage = stage;
        Ok(params)
    }

    /// Flat snapshot for freeze-contract checks.
    pub fn snapshot(&self, which: &str) -> Vec<Vec<f64>> {
        let source: Vec<(String, &Tensor)> = match which {
            "encoder" => self.encoder.named_params(),
            "decomp" => self.decomp.named_params(),
            "decoder" => self.decoder.named_params(),
            "denoiser" => self.denoiser.named_params(),
            _ => panic!("unknown parameter set {which}"),
        };
        source.into_iter().map(|(_, t)| t.to_vec()).collect()
    }
}

// ── Datasets ─────────────────────────────────────────────────────────

pub struct PairedImages(pub Vec<(Tensor, Tensor)>);

pub struct UnpairedImages {
    pub low: Vec<Tensor>,
    pub high: Vec<Tensor>,
}

pub fn load_stage1(root: impl AsRef<Path>, count: usize) -> Result<PairedImages> {
    let mut out = Vec::with_capacity(count);
    for (a, b) in crate::data::stage1_pair_paths(root, count) {
        out.push((read_image(a)?, read_image(b)?));
    }
    if out.is_empty() {
        return Err(Error::State("no stage-1 pairs found".into()));
    }
    Ok(PairedImages(out))
}

pub fn load_unpaired(root: impl AsRef<Path>, low: usize, high: usize) -> Result<UnpairedImages> {
    let root = root.as_ref();
    let mut low_imgs = Vec::with_capacity(low);
    for p in crate::data::unpaired_paths(root, "stage2_low", low) {
        low_imgs.push(read_image(p)?);
    }
    let mut high_imgs = Vec::with_capacity(high);
    for p in crate::data::unpaired_paths(root, "stage2_high", high) {
        high_imgs.push(read_image(p)?);
    }
    if low_imgs.is_empty() || high_imgs.is_empty() {
        return Err(Error::State("empty unpaired corpus".into()));
    }
    Ok(UnpairedImages {
        low: low_imgs,
        high: high_imgs,
    })
}

pub fn load_val(root: impl AsRef<Path>, count: usize) -> Result<Vec<(Tensor, Tensor)>> {
    let mut out = Vec::with_capacity(count);
    for (low, high) in crate::data::val_pair_paths(root, count) {
        out.push((read_image(low)?, read_image(high)?));
    }
    Ok(out)
}

/// Random aligned crop applied to both exposures of a pair.
fn crop(t: &Tensor, y0: usize, x0: usize, size: usize) -> Tensor {
    let s = t.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    if size == h && size == w {
        return t.clone();
    }
    let d = t.data();
    let mut out = vec![0.0; c * size * size];
    for ch in 0..c {
        for y in 0..size {
            let src = (ch * h + y0 + y) * w + x0;
            let dst = (ch * size + y) * size;
            out[dst..dst + size].copy_from_slice(&d[src..src + size]);
        }
    }
    Tensor::from_vec(&[1, c, size, size], out).unwrap()
}

// ── Loss logs ────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct Stage1Row {
    pub iter: usize,
    pub l_con: f64,
    pub l_rec: f64,
    pub l_ref: f64,
    pub l_ill: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct Stage2Row {
    pub iter: usize,
    pub l_diff: f64,
    pub l_scc: f64,
    pub lr: f64,
}

fn write_stage1_log(path: &Path, rows: &[Stage1Row]) -> Result<()> {
    let mut s = String::from("iter,l_con,l_rec,l_ref,l_ill,total,lr\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.iter, r.l_con, r.l_rec, r.l_ref, r.l_ill, r.total, r.lr
        ));
    }
    fs::write(path, s).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_stage2_log(path: &Path, rows: &[Stage2Row]) -> Result<()> {
    let mut s = String::from("iter,l_diff,l_scc,lr\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.iter, r.l_diff, r.l_scc, r.lr));
    }
    fs::write(path, s).map_err(|e| Error::io(path.display().to_string(), e))
}

#[derive(Debug)]
pub struct StageReport {
    pub rows_stage1: Vec<Stage1Row>,
    pub rows_stage2: Vec<Stage2Row>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

// ── Stage 1 ──────────────────────────────────────────────────────────

pub fn train_stage1(
    run: &RunConfig,
    data: &PairedImages,
    params: &mut ModelParams,
    out_dir: impl AsRef<Path>,
) -> Result<StageReport> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    params.frozen = FreezeFlags::stage1();

    let cfg = &run.train;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut adam_enc = Adam::new();
    let mut adam_net = Adam::new();
    let mut adam_dec = Adam::new();
    let mut rows = Vec::with_capacity(cfg.iterations);
    let mut recent = VecDeque::new();
    let image_size = data.0[0].0.shape()[2];

    for iter in 0..cfg.iterations {
        let lr = stage1_lr(cfg.lr_initial, cfg.lr_decay, iter, cfg.iterations);
        let tape = Tape::new();
        let enc_live = params.encoder.watch(&tape);
        let net_live = params.decomp.watch(&tape);
        let dec_live = params.decoder.watch(&tape);

        let mut l_con_sum = Tensor::scalar_value(0.0);
        let mut l_rec_sum = Tensor::scalar_value(0.0);
        let mut l_ref_sum = Tensor::scalar_value(0.0);
        let mut l_ill_sum = Tensor::scalar_value(0.0);

        for _ in 0..cfg.batch {
            let (img_a, img_b) = &data.0[rng.random_range(0..data.0.len())];
            let (mut a, mut b) = (img_a.clone(), img_b.clone());
            if cfg.patch < image_size {
                let y0 = rng.random_range(0..=image_size - cfg.patch);
                let x0 = rng.random_range(0..=image_size - cfg.patch);
                a = crop(&a, y0, x0, cfg.patch);
                b = crop(&b, y0, x0, cfg.patch);
            }
            let f_a = enc_live.forward(&tape, &a, &run.codec)?;
            let f_b = enc_live.forward(&tape, &b, &run.codec)?;
            let rec_a = dec_live.forward(&tape, &f_a, &run.codec)?;
            let rec_b = dec_live.forward(&tape, &f_b, &run.codec)?;
            l_con_sum = tape.add(
                &l_con_sum,
                &loss_con(&tape, [&a, &b], [&rec_a, &rec_b])?,
            )?;

            // the decomposition loss shapes only the decomposition network;
            // features enter it detached
            let fd_a = LatentFeature::new(f_a.detach(), Provenance::Low);
            let fd_b = LatentFeature::new(f_b.detach(), Provenance::Low);
            let pair_a = net_live.forward(&tape, &fd_a, &run.retinex)?;
            let pair_b = net_live.forward(&tape, &fd_b, &run.retinex)?;
            l_rec_sum = tape.add(
                &l_rec_sum,
                &loss_rec(
                    &tape,
                    [&fd_a.data, &fd_b.data],
                    [&pair_a.reflectance, &pair_b.reflectance],
                    [&pair_a.illumination, &pair_b.illumination],
                )?,
            )?;
            l_ref_sum = tape.add(
                &l_ref_sum,
                &loss_ref(&tape, &pair_a.reflectance, &pair_b.reflectance)?,
            )?;
            l_ill_sum = tape.add(
                &l_ill_sum,
                &loss_ill(
                    &tape,
                    [&pair_a.illumination, &pair_b.illumination],
                    [&pair_a.reflectance, &pair_b.reflectance],
                    run.loss.lambda_edge,
                )?,
            )?;
        }

        let inv_b = 1.0 / cfg.batch as f64;
        let l_con = tape.mul_scalar(&l_con_sum, inv_b)?;
        let l_rec = tape.mul_scalar(&l_rec_sum, inv_b)?;
        let l_ref_t = tape.mul_scalar(&l_ref_sum, inv_b)?;
        let l_ill_t = tape.mul_scalar(&l_ill_sum, inv_b)?;
        let l_dec = tape.add(
            &tape.add(
                &l_rec,
                &tape.mul_scalar(&l_ref_t, run.loss.lambda_ref)?,
            )?,
            &tape.mul_scalar(&l_ill_t, run.loss.lambda_ill)?,
        )?;
        let total = tape.add(&l_con, &l_dec)?;

        let grads = tape.backward(&total)?;
        adam_enc.apply(&mut params.encoder, &enc_live, &grads, lr)?;
        adam_net.apply(&mut params.decomp, &net_live, &grads, lr)?;
        adam_dec.apply(&mut params.decoder, &dec_live, &grads, lr)?;

        let row = Stage1Row {
            iter,
            l_con: l_con.scalar()?,
            l_rec: l_rec.scalar()?,
            l_ref: l_ref_t.scalar()?,
            l_ill: l_ill_t.scalar()?,
            total: total.scalar()?,
            lr,
        };
        rows.push(row);

        if let Some(target) = cfg.early_stop_lcon {
            recent.push_back(row.l_con);
            if recent.len() > 25 {
                recent.pop_front();
            }
            if recent.len() == 25 && recent.iter().sum::<f64>() / 25.0 < target {
                break;
            }
        }
    }

    params.stage = 1;
    let ckpt = out_dir.join("stage1.ckpt");
    params.save(&ckpt)?;
    let log = out_dir.join("stage1_loss.csv");
    write_stage1_log(&log, &rows)?;
    Ok(StageReport {
        rows_stage1: rows,
        rows_stage2: Vec::new(),
        checkpoint: ckpt,
        log,
    })
}

// ── Stage 2 ──────────────────────────────────────────────────────────

/// Decompose a feature with the frozen decomposition network.
fn frozen_decompose(
    run: &RunConfig,
    params: &ModelParams,
    tape: &Tape,
    feature: &LatentFeature,
) -> Result<RetinexPair> {
    params.decomp.forward(tape, feature, &run.retinex)
}

pub fn train_stage2(
    run: &RunConfig,
    data: &UnpairedImages,
    params: &mut ModelParams,
    out_dir: impl AsRef<Path>,
) -> Result<StageReport> {
    if params.stage < 1 {
        return Err(Error::State(
            "stage 2 requires a stage-1 checkpoint; train stage 1 first".into(),
        ));
    }
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    params.frozen = FreezeFlags::stage2();

    let cfg = &run.train;
    let sched = NoiseSchedule::linear(run.sched_steps, run.sched_beta_start, run.sched_beta_end)?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut adam = Adam::new();
    let mut rows = Vec::with_capacity(cfg.iterations);

    for iter in 0..cfg.iterations {
        let lr = cfg.lr_stage2;

        // unpaired draw, re-paired randomly every iteration
        let low = &data.low[rng.random_range(0..data.low.len())];
        let high = &data.high[rng.random_range(0..data.high.len())];

        // frozen forward passes record nothing
        let frozen_tape = Tape::new();
        let f_low = crate::codec::encode(&frozen_tape, low, &run.codec, &params.encoder, Provenance::Low)?;
        let f_high =
            crate::codec::encode(&frozen_tape, high, &run.codec, &params.encoder, Provenance::High)?;
        let pair_low = frozen_decompose(run, params, &frozen_tape, &f_low)?;
        let pair_high = frozen_decompose(run, params, &frozen_tape, &f_high)?;
        let x0 = recompose(
            &frozen_tape,
            &RetinexPair {
                reflectance: pair_low.reflectance.clone(),
                illumination: pair_high.illumination.clone(),
            },
        )?
        .detach();

        // noise-prediction step
        let t = rng.random_range(1..=sched.t_max());
        let eps = Tensor::randn(x0.shape(), &mut rng);
        let tape = Tape::new();
        let den_live = params.denoiser.watch(&tape);
        let x_t = q_sample(&tape, &x0, t, &eps, &sched)?;
        let pred = den_live.forward(&tape, &x_t, &f_low.data, t)?;
        let l_diff = loss_diff(&tape, &eps, &pred)?;
        let l_diff_val = l_diff.scalar()?;
        let grads = tape.backward(&l_diff)?;
        adam.apply(&mut params.denoiser, &den_live, &grads, lr)?;

        // consistency step through the sampler's final update
        let mut l_scc_val = 0.0;
        if run.loss.lambda_scc > 0.0 {
            let tape = Tape::new();
            let den_live = params.denoiser.watch(&tape);
            let restored = sample_with_final(
                &tape,
                &params.denoiser,
                Some(&den_live),
                &f_low,
                run.sample_steps,
                &sched,
                cfg.seed.wrapping_add(0x5cc).wrapping_add(iter as u64),
            )?;
            let bright = gamma_correct(&frozen_tape, &pair_low.illumination, run.retinex.gamma)?;
            let pseudo = recompose(
                &frozen_tape,
                &RetinexPair {
                    reflectance: pair_low.reflectance.clone(),
                    illumination: bright,
                },
            )?
            .detach();
            let l_scc = tape.mul_scalar(
                &loss_scc(&tape, &pseudo, &restored.data, run.loss.scc_norm)?,
                run.loss.lambda_scc,
            )?;
            l_scc_val = l_scc.scalar()?;
            let grads = tape.backward(&l_scc)?;
            adam.apply(&mut params.denoiser, &den_live, &grads, lr)?;
        }

        rows.push(Stage2Row {
            iter,
            l_diff: l_diff_val,
            l_scc: l_scc_val,
            lr,
        });
    }

    params.stage = 2;
    let ckpt = out_dir.join("stage2.ckpt");
    params.save(&ckpt)?;
    let log = out_dir.join("stage2_loss.csv");
    write_stage2_log(&log, &rows)?;
    Ok(StageReport {
        rows_stage1: Vec::new(),
        rows_stage2: rows,
        checkpoint: ckpt,
        log,
    })
}

// ── Inference ────────────────────────────────────────────────────────

/// Full enhancement path: encode the dark image, sample a restored feature
/// under its guidance, decode. Needs only the dark input.
pub fn enhance(
    run: &RunConfig,
    params: &ModelParams,
    image: &Tensor,
    seed: u64,
) -> Result<Tensor> {
    let sched = NoiseSchedule::linear(run.sched_steps, run.sched_beta_start, run.sched_beta_end)?;
    let tape = Tape::new();
    let guide = crate::codec::encode(&tape, image, &run.codec, &params.encoder, Provenance::Low)?;
    let restored = sample(
        &tape,
        &params.denoiser,
        &guide,
        run.sample_steps,
        &sched,
        seed,
    )?;
    crate::codec::decode(&tape, &restored, &run.codec, &params.decoder)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::data::{generate_corpus, CorpusSpec};

    fn tiny_run(root: &Path) -> RunConfig {
        let text = format!(
            "seed = 11\n\
             codec.k = 1\n\
             codec.channels = 6\n\
             codec.base_width = 6\n\
             train.iterations = 3\n\
             train.batch = 1\n\
             train.patch = 16\n\
             train.lr_initial = 1e-3\n\
             sched.steps = 40\n\
             sample.steps = 4\n\
             data.size = 16\n\
             data.stage1_pairs = 2\n\
             data.stage2_low = 2\n\
             data.stage2_high = 2\n\
             data.val = 1\n\
             data.root = {}\n",
            root.display()
        );
        RunConfig::parse_str(&text).unwrap()
    }

    fn tiny_corpus(run: &RunConfig) {
        generate_corpus(
            &run.data_root,
            &CorpusSpec {
                seed: run.seed,
                image_size: 16,
                stage1_pairs: 2,
                stage2_low: 2,
                stage2_high: 2,
                val_pairs: 1,
            },
        )
        .unwrap();
    }

    #[test]
    fn stage1_freezes_denoiser_and_logs() {
        let dir = tempfile::tempdir().unwrap();
        let run = tiny_run(&dir.path().join("data"));
        tiny_corpus(&run);
        let data = load_stage1(&run.data_root, 2).unwrap();
        let mut params = ModelParams::init(&run);
        let before = params.snapshot("denoiser");
        let report = train_stage1(&run, &data, &mut params, dir.path().join("out")).unwrap();
        assert_eq!(report.rows_stage1.len(), 3);
        assert_eq!(params.snapshot("denoiser"), before, "denoiser must stay frozen");
        assert!(report.checkpoint.exists());
        assert!(report.log.exists());
        // something actually trained
        assert_eq!(params.stage, 1);
    }

    #[test]
    fn stage2_requires_stage1_and_freezes_codec() {
        let dir = tempfile::tempdir().unwrap();
        let run = tiny_run(&dir.path().join("data"));
        tiny_corpus(&run);
        let unpaired = load_unpaired(&run.data_root, 2, 2).unwrap();
        let mut fresh = ModelParams::init(&run);
        assert!(matches!(
            train_stage2(&run, &unpaired, &mut fresh, dir.path().join("o2")).unwrap_err(),
            Error::State(_)
        ));

        let data = load_stage1(&run.data_root, 2).unwrap();
        let mut params = ModelParams::init(&run);
        train_stage1(&run, &data, &mut params, dir.path().join("out")).unwrap();
        let enc = params.snapshot("encoder");
        let net = params.snapshot("decomp");
        let dec = params.snapshot("decoder");
        let den = params.snapshot("denoiser");
        let report = train_stage2(&run, &unpaired, &mut params, dir.path().join("o2")).unwrap();
        assert_eq!(report.rows_stage2.len(), 3);
        assert_eq!(params.snapshot("encoder"), enc);
        assert_eq!(params.snapshot("decomp"), net);
        assert_eq!(params.snapshot("decoder"), dec);
        assert_ne!(params.snapshot("denoiser"), den, "denoiser must train");
        assert_eq!(params.stage, 2);
    }

    #[test]
    fn checkpoint_round_trip_restores_all_sets() {
        let dir = tempfile::tempdir().unwrap();
        let run = tiny_run(&dir.path().join("data"));
        let params = ModelParams::init(&run);
        let path = dir.path().join("model.ckpt");
        params.save(&path).unwrap();
        let back = ModelParams::load(&path, &run).unwrap();
        assert_eq!(back.stage, 0);
        for which in ["encoder", "decomp", "decoder", "denoiser"] {
            assert_eq!(params.snapshot(which), back.snapshot(which), "{which}");
        }
    }

    #[test]
    fn checkpoint_with_wrong_config_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let run = tiny_run(&dir.path().join("data"));
        let params = ModelParams::init(&run);
        let path = dir.path().join("model.ckpt");
        params.save(&path).unwrap();
        let mut other = run.clone();
        other.codec.latent_channels = 8;
        assert!(matches!(
            ModelParams::load(&path, &other).unwrap_err(),
            Error::Format { .. }
        ));
    }

    #[test]
    fn enhance_preserves_shape_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let run = tiny_run(&dir.path().join("data"));
        let params = ModelParams::init(&run);
        let img = Tensor::full(&[1, 3, 16, 16], 0.2);
        let a = enhance(&run, &params, &img, 3).unwrap();
        assert_eq!(a.shape(), img.shape());
        let b = enhance(&run, &params, &img, 3).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
