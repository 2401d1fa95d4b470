//! Run configuration: one JSON document, unknown keys rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CorpusConfig;
use crate::discriminator::DiscriminatorConfig;
use crate::generator::GeneratorConfig;
use crate::tensor::{optimizer_names, OptimConfig};

pub const ENV_OUT: &str = "MTTS_OUT";
pub const ENV_SEED: &str = "MTTS_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Registered objective: `fs2`, `gan` or `mt`.
    pub mode: String,
    pub seed: u64,
    pub batch_size: usize,
    pub pretrain_steps: u64,
    pub adversarial_steps: u64,
    pub lambda_acai: f64,
    /// Ablation switch: drop the critic term from the discriminator loss.
    pub critic_in_discriminator: bool,
    pub optimizer: OptimConfig,
    /// Checkpoint every this many steps; 0 keeps only phase-end checkpoints.
    pub checkpoint_interval: u64,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: "mt".into(),
            seed: 0,
            batch_size: 8,
            pretrain_steps: 1500,
            adversarial_steps: 3000,
            lambda_acai: crate::losses::DEFAULT_LAMBDA_ACAI,
            critic_in_discriminator: true,
            optimizer: OptimConfig::default(),
            checkpoint_interval: 500,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub corpus: CorpusConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn from_json(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<u8>), ConfigError> {
        let bytes = fs::read(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let text = String::from_utf8_lossy(&bytes);
        Ok((Self::from_json(&text, path)?, bytes))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `MTTS_OUT` / `MTTS_SEED` when set.
    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        if let Ok(out) = std::env::var(ENV_OUT) {
            self.train.out_dir = PathBuf::from(out);
        }
        if let Ok(seed) = std::env::var(ENV_SEED) {
            self.train.seed = seed
                .parse()
                .map_err(|_| ConfigError::Invalid(format!("{ENV_SEED}={seed} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.corpus.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let t = &self.train;
        if !crate::trainer::objective_names().contains(&t.mode.as_str()) {
            return bad(format!(
                "train.mode `{}` is not one of {:?}",
                t.mode,
                crate::trainer::objective_names()
            ));
        }
        if !optimizer_names().contains(&t.optimizer.kind.as_str()) {
            return bad(format!(
                "train.optimizer.kind `{}` is not one of {:?}",
                t.optimizer.kind,
                optimizer_names()
            ));
        }
        if t.batch_size == 0 || t.batch_size % 2 != 0 {
            return bad(format!(
                "train.batch_size {} must be even and positive so interpolation pairs are well defined",
                t.batch_size
            ));
        }
        if t.pretrain_steps == 0 || t.adversarial_steps == 0 {
            return bad("train.pretrain_steps and train.adversarial_steps must be positive".into());
        }
        if !(t.lambda_acai >= 0.0 && t.lambda_acai.is_finite()) {
            return bad(format!("train.lambda_acai {} must be finite and nonnegative", t.lambda_acai));
        }
        let o = &t.optimizer;
        if !(o.peak_lr > 0.0 && o.peak_lr.is_finite()) || o.warmup_steps == 0 {
            return bad("train.optimizer needs a positive peak_lr and warmup_steps".into());
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return bad("train.optimizer betas must lie in [0, 1) and eps must be positive".into());
        }
        let g = &self.generator;
        if [g.vocab_size, g.hidden, g.kernel, g.variance_hidden, g.d_z].contains(&0) {
            return bad("generator sizes must be positive".into());
        }
        if g.kernel % 2 == 0 {
            return bad(format!("generator.kernel {} must be odd to preserve length", g.kernel));
        }
        if g.vocab_size < self.corpus.vocab_size {
            return bad(format!(
                "generator.vocab_size {} is smaller than corpus.vocab_size {}",
                g.vocab_size, self.corpus.vocab_size
            ));
        }
        let d = &self.discriminator;
        if d.n_mels != crate::N_MELS {
            return bad(format!("discriminator.n_mels must be {}", crate::N_MELS));
        }
        if d.shared.is_empty() || d.head.is_empty() || d.head.last().map(|l| l.channels) != Some(1) {
            return bad("discriminator needs shared layers and heads ending in one channel".into());
        }
        if d.shared.iter().chain(&d.head).any(|l| l.channels == 0 || l.kernel == 0 || l.stride == 0) {
            return bad("discriminator layer sizes must be positive".into());
        }
        let shortest = self.corpus.phonemes[0] * self.corpus.durations[0];
        if shortest < d.min_frames() {
            return bad(format!(
                "shortest corpus utterance has {shortest} frames; the discriminator needs {}",
                d.min_frames()
            ));
        }
        Ok(())
    }

    /// Everything that must match for a checkpoint to be resumed under this config.
    pub fn resume_compatible(&self, other: &Config) -> bool {
        let mut a = self.clone();
        let mut b = other.clone();
        a.train.out_dir = PathBuf::new();
        b.train.out_dir = PathBuf::new();
        a.train.checkpoint_interval = 0;
        b.train.checkpoint_interval = 0;
        a == b
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        let back = Config::from_json(&cfg.to_json(), Path::new("x.json")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_reports_position() {
        let err = Config::from_json("{\n  \"train\": {\"batchsize\": 4}\n}", Path::new("c.json")).unwrap_err();
        match err {
            ConfigError::Parse { line, message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains("batchsize"));
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn odd_batch_and_unknown_mode_rejected() {
        for text in [r#"{"train": {"batch_size": 7}}"#, r#"{"train": {"mode": "wgan"}}"#] {
            assert!(matches!(
                Config::from_json(text, Path::new("c.json")),
                Err(ConfigError::Invalid(_))
            ));
        }
    }
}
