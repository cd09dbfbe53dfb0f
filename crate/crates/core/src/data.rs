//! Synthetic scene generation, exposure degradation, and corpus layout.
//!
//! Scenes are piecewise-smooth compositions (gradient background, soft-edged
//! rectangles and discs, a low-amplitude value-noise texture) rendered
//! deterministically from a [`SceneSpec`]. Exposure degradation is
//! clamp(gain * x^gamma + noise). The corpus layout on disk:
//!
//!   <root>/stage1_pairs/NNNN_a.png, NNNN_b.png   paired exposures
//!   <root>/stage2_low/NNNN.png                   unpaired dark images
//!   <root>/stage2_high/NNNN.png                  unpaired bright images
//!   <root>/val/NNNN_low.png, NNNN_high.png       dark input + clean target
//!
//! plus one `manifest.csv` per subdirectory (file, seed, gain, gamma, noise).

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::imageio::write_image;
use crate::tensor::Tensor;

// ── Scene description ────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub enum Primitive {
    /// Linear blend between two palette colours along a direction.
    Gradient {
        angle: f64,
        color_a: [f64; 3],
        color_b: [f64; 3],
    },
    /// Axis-aligned rectangle with soft alpha.
    Rect {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
        color: [f64; 3],
        alpha: f64,
    },
    /// Disc with a smooth edge.
    Disc {
        cx: f64,
        cy: f64,
        radius: f64,
        color: [f64; 3],
        alpha: f64,
    },
    /// Bilinear value noise from a coarse seeded grid.
    NoiseTexture { cells: usize, amplitude: f64, seed: u64 },
}

/// Deterministic description of one scene: same spec, same image.
#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub seed: u64,
    pub size: usize,
    pub palette: Vec<[f64; 3]>,
    pub primitives: Vec<Primitive>,
}

impl SceneSpec {
    /// Randomly sampled scene with palette and 3-6 primitives.
    pub fn sample(seed: u64, size: usize) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15));
        let palette: Vec<[f64; 3]> = (0..5)
            .map(|_| {
                [
                    rng.random_range(0.15..0.9),
                    rng.random_range(0.15..0.9),
                    rng.random_range(0.15..0.9),
                ]
            })
            .collect();
        let pick = |rng: &mut ChaCha12Rng, palette: &[[f64; 3]]| {
            palette[rng.random_range(0..palette.len())]
        };
        let mut primitives = vec![Primitive::Gradient {
            angle: rng.random_range(0.0..std::f64::consts::TAU),
            color_a: pick(&mut rng, &palette),
            color_b: pick(&mut rng, &palette),
        }];
        for _ in 0..rng.random_range(1..=3) {
            let x0 = rng.random_range(0.0..0.7);
            let y0 = rng.random_range(0.0..0.7);
            primitives.push(Primitive::Rect {
                x0,
                y0,
                x1: x0 + rng.random_range(0.15..0.5),
                y1: y0 + rng.random_range(0.15..0.5),
                color: pick(&mut rng, &palette),
                alpha: rng.random_range(0.6..1.0),
            });
        }
        for _ in 0..rng.random_range(1..=2) {
            primitives.push(Primitive::Disc {
                cx: rng.random_range(0.1..0.9),
                cy: rng.random_range(0.1..0.9),
                radius: rng.random_range(0.08..0.3),
                color: pick(&mut rng, &palette),
                alpha: rng.random_range(0.6..1.0),
            });
        }
        primitives.push(Primitive::NoiseTexture {
            cells: 8,
            amplitude: 0.02,
            seed: rng.random(),
        });
        SceneSpec {
            seed,
            size,
            palette,
            primitives,
        }
    }
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Render a spec to an image in [0,1], deterministically.
pub fn gen_scene(spec: &SceneSpec) -> Tensor {
    let s = spec.size;
    let mut data = vec![0.0; 3 * s * s];

    for prim in &spec.primitives {
        match prim {
            Primitive::Gradient {
                angle,
                color_a,
                color_b,
            } => {
                let (dx, dy) = (angle.cos(), angle.sin());
                for y in 0..s {
                    for x in 0..s {
                        let u = (x as f64 / s as f64 - 0.5) * dx + (y as f64 / s as f64 - 0.5) * dy;
                        let t = (u + 0.5).clamp(0.0, 1.0);
                        for c in 0..3 {
                            data[(c * s + y) * s + x] = color_a[c] * (1.0 - t) + color_b[c] * t;
                        }
                    }
                }
            }
            Primitive::Rect {
                x0,
                y0,
                x1,
                y1,
                color,
                alpha,
            } => {
                let soft = 1.5 / s as f64;
                for y in 0..s {
                    for x in 0..s {
                        let (fx, fy) = (x as f64 / s as f64, y as f64 / s as f64);
                        let inside = smoothstep(x0 - soft, x0 + soft, fx)
                            * (1.0 - smoothstep(x1 - soft, x1 + soft, fx))
                            * smoothstep(y0 - soft, y0 + soft, fy)
                            * (1.0 - smoothstep(y1 - soft, y1 + soft, fy));
                        let a = alpha * inside;
                        if a > 0.0 {
                            for c in 0..3 {
                                let old = data[(c * s + y) * s + x];
                                data[(c * s + y) * s + x] = old * (1.0 - a) + color[c] * a;
                            }
                        }
                    }
                }
            }
            Primitive::Disc {
                cx,
                cy,
                radius,
                color,
                alpha,
            } => {
                let soft = 2.0 / s as f64;
                for y in 0..s {
                    for x in 0..s {
                        let (fx, fy) = (x as f64 / s as f64, y as f64 / s as f64);
                        let d = ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt();
                        let a = alpha * (1.0 - smoothstep(radius - soft, radius + soft, d));
                        if a > 0.0 {
                            for c in 0..3 {
                                let old = data[(c * s + y) * s + x];
                                data[(c * s + y) * s + x] = old * (1.0 - a) + color[c] * a;
                            }
                        }
                    }
                }
            }
            Primitive::NoiseTexture {
                cells,
                amplitude,
                seed,
            } => {
                let mut nrng = ChaCha12Rng::seed_from_u64(*seed);
                let g = *cells;
                let grid: Vec<f64> = (0..(g + 1) * (g + 1))
                    .map(|_| nrng.random_range(-1.0..1.0))
                    .collect();
                for y in 0..s {
                    for x in 0..s {
                        let fx = x as f64 / s as f64 * g as f64;
                        let fy = y as f64 / s as f64 * g as f64;
                        let (ix, iy) = (fx as usize, fy as usize);
                        let (tx, ty) = (fx - ix as f64, fy - iy as f64);
                        let at = |gy: usize, gx: usize| grid[gy * (g + 1) + gx];
                        let v = at(iy, ix) * (1.0 - tx) * (1.0 - ty)
                            + at(iy, ix + 1) * tx * (1.0 - ty)
                            + at(iy + 1, ix) * (1.0 - tx) * ty
                            + at(iy + 1, ix + 1) * tx * ty;
                        for c in 0..3 {
                            let old = data[(c * s + y) * s + x];
                            data[(c * s + y) * s + x] = (old + amplitude * v).clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[1, 3, s, s], data).unwrap()
}

// ── Exposure model ───────────────────────────────────────────────────

/// clamp(gain * x^gamma + n), n ~ N(0, noise_sigma^2).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExposureModel {
    pub gain: f64,
    pub gamma: f64,
    pub noise_sigma: f64,
}

impl ExposureModel {
    pub const IDENTITY: ExposureModel = ExposureModel {
        gain: 1.0,
        gamma: 1.0,
        noise_sigma: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.gain > 0.0 && self.gain <= 1.0) {
            return Err(Error::Config(format!(
                "exposure gain must be in (0,1], got {}",
                self.gain
            )));
        }
        if self.gamma < 1.0 {
            return Err(Error::Config(format!(
                "darkening gamma must be >= 1, got {}",
                self.gamma
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Apply an exposure model; deterministic for a given seed.
pub fn degrade(image: &Tensor, model: &ExposureModel, seed: u64) -> Tensor {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let data: Vec<f64> = image
        .data()
        .iter()
        .map(|&v| {
            let n: f64 = if model.noise_sigma > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                z * model.noise_sigma
            } else {
                0.0
            };
            (model.gain * v.powf(model.gamma) + n).clamp(0.0, 1.0)
        })
        .collect();
    Tensor::from_vec(image.shape(), data).unwrap()
}

// ── Corpus generation ────────────────────────────────────────────────

/// Sizes of the generated corpus.
#[derive(Clone, Copy, Debug)]
pub struct CorpusSpec {
    pub seed: u64,
    pub image_size: usize,
    pub stage1_pairs: usize,
    pub stage2_low: usize,
    pub stage2_high: usize,
    pub val_pairs: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            seed: 0,
            image_size: 64,
            stage1_pairs: 64,
            stage2_low: 256,
            stage2_high: 256,
            val_pairs: 32,
        }
    }
}

pub struct ManifestRow {
    pub file: String,
    pub scene_seed: u64,
    pub model: ExposureModel,
}

fn write_manifest(dir: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut out = String::from("file,scene_seed,gain,gamma,noise_sigma\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.file, r.scene_seed, r.model.gain, r.model.gamma, r.model.noise_sigma
        ));
    }
    let path = dir.join("manifest.csv");
    fs::write(&path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Exposure sampler for the dark side of the corpus.
fn sample_dark(rng: &mut ChaCha12Rng) -> ExposureModel {
    ExposureModel {
        gain: rng.random_range(0.25..0.45),
        gamma: rng.random_range(1.5..2.4),
        noise_sigma: rng.random_range(0.004..0.015),
    }
}

/// Exposure sampler for the brighter of the paired low-quality exposures.
fn sample_brighter(rng: &mut ChaCha12Rng) -> ExposureModel {
    ExposureModel {
        gain: rng.random_range(0.55..0.95),
        gamma: rng.random_range(1.0..1.35),
        noise_sigma: rng.random_range(0.002..0.008),
    }
}

/// Exposure sampler for unpaired normal-light images.
fn sample_bright(rng: &mut ChaCha12Rng) -> ExposureModel {
    ExposureModel {
        gain: rng.random_range(0.88..1.0),
        gamma: 1.0,
        noise_sigma: rng.random_range(0.0..0.004),
    }
}

/// Generate the full corpus under `root`. Same spec, byte-identical output.
pub fn generate_corpus(root: impl AsRef<Path>, spec: &CorpusSpec) -> Result<()> {
    let root = root.as_ref();
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);

    // paired exposures of shared scenes
    let dir = root.join("stage1_pairs");
    ensure_dir(&dir)?;
    let mut rows = Vec::new();
    for i in 0..spec.stage1_pairs {
        let scene_seed: u64 = rng.random();
        let clean = gen_scene(&SceneSpec::sample(scene_seed, spec.image_size));
        let (m_a, m_b) = (sample_dark(&mut rng), sample_brighter(&mut rng));
        let (s_a, s_b) = (rng.random(), rng.random());
        for (suffix, model, dseed) in [("a", m_a, s_a), ("b", m_b, s_b)] {
            let file = format!("{i:04}_{suffix}.png");
            write_image(dir.join(&file), &degrade(&clean, &model, dseed))?;
            rows.push(ManifestRow {
                file,
                scene_seed,
                model,
            });
        }
    }
    write_manifest(&dir, &rows)?;

    // unpaired dark images
    let dir = root.join("stage2_low");
    ensure_dir(&dir)?;
    let mut rows = Vec::new();
    for i in 0..spec.stage2_low {
        let scene_seed: u64 = rng.random();
        let clean = gen_scene(&SceneSpec::sample(scene_seed, spec.image_size));
        let model = sample_dark(&mut rng);
        let file = format!("{i:04}.png");
        write_image(dir.join(&file), &degrade(&clean, &model, rng.random()))?;
        rows.push(ManifestRow {
            file,
            scene_seed,
            model,
        });
    }
    write_manifest(&dir, &rows)?;

    // unpaired bright images of different scenes
    let dir = root.join("stage2_high");
    ensure_dir(&dir)?;
    let mut rows = Vec::new();
    for i in 0..spec.stage2_high {
        let scene_seed: u64 = rng.random();
        let clean = gen_scene(&SceneSpec::sample(scene_seed, spec.image_size));
        let model = sample_bright(&mut rng);
        let file = format!("{i:04}.png");
        write_image(dir.join(&file), &degrade(&clean, &model, rng.random()))?;
        rows.push(ManifestRow {
            file,
            scene_seed,
            model,
        });
    }
    write_manifest(&dir, &rows)?;

    // validation: dark input plus clean ground truth
    let dir = root.join("val");
    ensure_dir(&dir)?;
    let mut rows = Vec::new();
    for i in 0..spec.val_pairs {
        let scene_seed: u64 = rng.random();
        let clean = gen_scene(&SceneSpec::sample(scene_seed, spec.image_size));
        let model = sample_dark(&mut rng);
        let low = format!("{i:04}_low.png");
        write_image(dir.join(&low), &degrade(&clean, &model, rng.random()))?;
        rows.push(ManifestRow {
            file: low,
            scene_seed,
            model,
        });
        let high = format!("{i:04}_high.png");
        write_image(dir.join(&high), &clean)?;
        rows.push(ManifestRow {
            file: high,
            scene_seed,
            model: ExposureModel::IDENTITY,
        });
    }
    write_manifest(&dir, &rows)?;
    Ok(())
}

/// File names of the paired stage-1 set under `root`.
pub fn stage1_pair_paths(root: impl AsRef<Path>, count: usize) -> Vec<(PathBuf, PathBuf)> {
    let dir = root.as_ref().join("stage1_pairs");
    (0..count)
        .map(|i| (dir.join(format!("{i:04}_a.png")), dir.join(format!("{i:04}_b.png"))))
        .collect()
}

pub fn val_pair_paths(root: impl AsRef<Path>, count: usize) -> Vec<(PathBuf, PathBuf)> {
    let dir = root.as_ref().join("val");
    (0..count)
        .map(|i| {
            (
                dir.join(format!("{i:04}_low.png")),
                dir.join(format!("{i:04}_high.png")),
            )
        })
        .collect()
}

pub fn unpaired_paths(root: impl AsRef<Path>, sub: &str, count: usize) -> Vec<PathBuf> {
    let dir = root.as_ref().join(sub);
    (0..count).map(|i| dir.join(format!("{i:04}.png"))).collect()
}
