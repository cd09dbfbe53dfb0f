//! Flat key=value run configuration.
//!
//! One text file drives a whole run: codec and decomposition settings, the
//! noise schedule, loss weights, training parameters, and corpus sizes. The
//! seed is mandatory — no wall-clock defaults anywhere. Unknown keys are
//! rejected so typos cannot silently fall back to defaults, and every run can
//! write back its fully-resolved configuration for reproduction.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::codec::CodecConfig;
use crate::data::CorpusSpec;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, SccNorm};
use crate::retinex::RetinexConfig;
use crate::train::TrainConfig;

/// Fully-resolved settings for one run.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub codec: CodecConfig,
    pub retinex: RetinexConfig,
    pub sched_steps: usize,
    pub sched_beta_start: f64,
    pub sched_beta_end: f64,
    pub sample_steps: usize,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub data_root: String,
    pub corpus: CorpusSpec,
}

impl RunConfig {
    /// Defaults mirror the reference hyper-parameters: k=3, gamma=0.2,
    /// lambdas (0.01, 0.1, 0.01, 10), T=1000, S=20. The seed has no default.
    fn with_seed(seed: u64) -> Self {
        RunConfig {
            seed,
            codec: CodecConfig::default(),
            retinex: RetinexConfig::default(),
            sched_steps: 1000,
            sched_beta_start: 1e-4,
            sched_beta_end: 0.02,
            sample_steps: 20,
            loss: LossWeights::default(),
            train: TrainConfig::default(),
            data_root: "data".into(),
            corpus: CorpusSpec {
                seed,
                ..CorpusSpec::default()
            },
        }
    }

    pub fn parse_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut kv = HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key = value, got '{raw}'",
                    lineno + 1
                )));
            };
            let key = key.trim().to_string();
            if kv.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::Config(format!("duplicate key '{key}'")));
            }
        }
        Self::from_map(kv)
    }

    fn from_map(mut kv: HashMap<String, String>) -> Result<Self> {
        fn take<T: std::str::FromStr>(
            kv: &mut HashMap<String, String>,
            key: &str,
            default: T,
        ) -> Result<T> {
            match kv.remove(key) {
                None => Ok(default),
                Some(raw) => raw
                    .parse()
                    .map_err(|_| Error::Config(format!("key '{key}': cannot parse '{raw}'"))),
            }
        }

        let seed: u64 = match kv.remove("seed") {
            Some(raw) => raw
                .parse()
                .map_err(|_| Error::Config(format!("key 'seed': cannot parse '{raw}'")))?,
            None => return Err(Error::Config("missing required key 'seed'".into())),
        };
        let mut cfg = RunConfig::with_seed(seed);

        cfg.codec.k = take(&mut kv, "codec.k", cfg.codec.k)?;
        cfg.codec.latent_channels = take(&mut kv, "codec.channels", cfg.codec.latent_channels)?;
        cfg.codec.base_width = take(&mut kv, "codec.base_width", cfg.codec.base_width)?;
        cfg.retinex.tau = take(&mut kv, "retinex.tau", cfg.retinex.tau)?;
        cfg.retinex.gamma = take(&mut kv, "retinex.gamma", cfg.retinex.gamma)?;
        cfg.sched_steps = take(&mut kv, "sched.steps", cfg.sched_steps)?;
        cfg.sched_beta_start = take(&mut kv, "sched.beta_start", cfg.sched_beta_start)?;
        cfg.sched_beta_end = take(&mut kv, "sched.beta_end", cfg.sched_beta_end)?;
        cfg.sample_steps = take(&mut kv, "sample.steps", cfg.sample_steps)?;
        cfg.loss.lambda_scc = take(&mut kv, "loss.lambda_scc", cfg.loss.lambda_scc)?;
        cfg.loss.lambda_ref = take(&mut kv, "loss.lambda_ref", cfg.loss.lambda_ref)?;
        cfg.loss.lambda_ill = take(&mut kv, "loss.lambda_ill", cfg.loss.lambda_ill)?;
        cfg.loss.lambda_edge = take(&mut kv, "loss.lambda_edge", cfg.loss.lambda_edge)?;
        cfg.loss.scc_norm = match kv.remove("loss.scc_norm").as_deref() {
            None | Some("l1") => SccNorm::L1,
            Some("squared") => SccNorm::Squared,
            Some(other) => {
                return Err(Error::Config(format!(
                    "key 'loss.scc_norm': expected l1|squared, got '{other}'"
                )))
            }
        };
        cfg.train.stage = take(&mut kv, "train.stage", cfg.train.stage)?;
        cfg.train.iterations = take(&mut kv, "train.iterations", cfg.train.iterations)?;
        cfg.train.batch = take(&mut kv, "train.batch", cfg.train.batch)?;
        cfg.train.patch = take(&mut kv, "train.patch", cfg.train.patch)?;
        cfg.train.lr_initial = take(&mut kv, "train.lr_initial", cfg.train.lr_initial)?;
        cfg.train.lr_decay = take(&mut kv, "train.lr_decay", cfg.train.lr_decay)?;
        cfg.train.lr_stage2 = take(&mut kv, "train.lr_stage2", cfg.train.lr_stage2)?;
        cfg.train.early_stop_lcon = match kv.remove("train.early_stop_lcon") {
            None => None,
            Some(raw) => Some(raw.parse().map_err(|_| {
                Error::Config(format!("key 'train.early_stop_lcon': cannot parse '{raw}'"))
            })?),
        };
        cfg.train.seed = seed;
        cfg.data_root = take(&mut kv, "data.root", cfg.data_root)?;
        cfg.corpus.seed = seed;
        cfg.corpus.image_size = take(&mut kv, "data.size", cfg.corpus.image_size)?;
        cfg.corpus.stage1_pairs = take(&mut kv, "data.stage1_pairs", cfg.corpus.stage1_pairs)?;
        cfg.corpus.stage2_low = take(&mut kv, "data.stage2_low", cfg.corpus.stage2_low)?;
        cfg.corpus.stage2_high = take(&mut kv, "data.stage2_high", cfg.corpus.stage2_high)?;
        cfg.corpus.val_pairs = take(&mut kv, "data.val", cfg.corpus.val_pairs)?;

        if let Some(unknown) = kv.keys().next() {
            return Err(Error::Config(format!("unknown key '{unknown}'")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.retinex.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.sched_steps < 1 {
            return Err(Error::Config("sched.steps must be >= 1".into()));
        }
        if self.sample_steps < 1 || self.sched_steps % self.sample_steps != 0 {
            return Err(Error::Config(format!(
                "sample.steps ({}) must divide sched.steps ({})",
                self.sample_steps, self.sched_steps
            )));
        }
        if self.corpus.image_size % (self.codec.reduction() * 4) != 0 {
            return Err(Error::Config(format!(
                "data.size ({}) must be divisible by 2^k * 4 = {}",
                self.corpus.image_size,
                self.codec.reduction() * 4
            )));
        }
        if self.train.patch % (self.codec.reduction() * 4) != 0 {
            return Err(Error::Config(format!(
                "train.patch ({}) must be divisible by 2^k * 4 = {}",
                self.train.patch,
                self.codec.reduction() * 4
            )));
        }
        Ok(())
    }

    /// The fully-resolved key=value text, suitable for writing next to run
    /// outputs and re-parsing.
    pub fn resolved_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "codec.k = {}", self.codec.k);
        let _ = writeln!(s, "codec.channels = {}", self.codec.latent_channels);
        let _ = writeln!(s, "codec.base_width = {}", self.codec.base_width);
        let _ = writeln!(s, "retinex.tau = {}", self.retinex.tau);
        let _ = writeln!(s, "retinex.gamma = {}", self.retinex.gamma);
        let _ = writeln!(s, "sched.steps = {}", self.sched_steps);
        let _ = writeln!(s, "sched.beta_start = {}", self.sched_beta_start);
        let _ = writeln!(s, "sched.beta_end = {}", self.sched_beta_end);
        let _ = writeln!(s, "sample.steps = {}", self.sample_steps);
        let _ = writeln!(s, "loss.lambda_scc = {}", self.loss.lambda_scc);
        let _ = writeln!(s, "loss.lambda_ref = {}", self.loss.lambda_ref);
        let _ = writeln!(s, "loss.lambda_ill = {}", self.loss.lambda_ill);
        let _ = writeln!(s, "loss.lambda_edge = {}", self.loss.lambda_edge);
        let _ = writeln!(
            s,
            "loss.scc_norm = {}",
            match self.loss.scc_norm {
                SccNorm::L1 => "l1",
                SccNorm::Squared => "squared",
            }
        );
        let _ = writeln!(s, "train.stage = {}", self.train.stage);
        let _ = writeln!(s, "train.iterations = {}", self.train.iterations);
        let _ = writeln!(s, "train.batch = {}", self.train.batch);
        let _ = writeln!(s, "train.patch = {}", self.train.patch);
        let _ = writeln!(s, "train.lr_initial = {}", self.train.lr_initial);
        let _ = writeln!(s, "train.lr_decay = {}", self.train.lr_decay);
        let _ = writeln!(s, "train.lr_stage2 = {}", self.train.lr_stage2);
        if let Some(v) = self.train.early_stop_lcon {
            let _ = writeln!(s, "train.early_stop_lcon = {v}");
        }
        let _ = writeln!(s, "data.root = {}", self.data_root);
        let _ = writeln!(s, "data.size = {}", self.corpus.image_size);
        let _ = writeln!(s, "data.stage1_pairs = {}", self.corpus.stage1_pairs);
        let _ = writeln!(s, "data.stage2_low = {}", self.corpus.stage2_low);
        let _ = writeln!(s, "data.stage2_high = {}", self.corpus.stage2_high);
        let _ = writeln!(s, "data.val = {}", self.corpus.val_pairs);
        s
    }

    pub fn write_resolved(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.resolved_text()).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = RunConfig::parse_str("seed = 7\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.codec.k, 3);
        assert_eq!(cfg.sched_steps, 1000);
        assert_eq!(cfg.sample_steps, 20);
        assert_eq!(cfg.loss.lambda_edge, 10.0);
    }

    #[test]
    fn missing_seed_is_rejected() {
        let err = RunConfig::parse_str("codec.k = 2\n").unwrap_err();
        assert!(err.to_string().contains("seed"));
    }

    #[test]
    fn unknown_key_is_rejected_with_name() {
        let err = RunConfig::parse_str("seed = 1\ncodec.depht = 3\n").unwrap_err();
        assert!(err.to_string().contains("codec.depht"), "{err}");
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let cfg = RunConfig::parse_str("# hello\nseed = 9   # trailing\n\ncodec.k = 2\n").unwrap();
        assert_eq!(cfg.codec.k, 2);
    }

    #[test]
    fn resolved_text_round_trips() {
        let mut cfg = RunConfig::parse_str("seed = 3\ncodec.k = 1\ntrain.batch = 2\n").unwrap();
        cfg.train.early_stop_lcon = Some(0.01);
        let text = cfg.resolved_text();
        let back = RunConfig::parse_str(&text).unwrap();
        assert_eq!(back.codec.k, 1);
        assert_eq!(back.train.batch, 2);
        assert_eq!(back.train.early_stop_lcon, Some(0.01));
        assert_eq!(back.resolved_text(), text);
    }

    #[test]
    fn sample_steps_must_divide_schedule() {
        let err = RunConfig::parse_str("seed = 1\nsample.steps = 7\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
