//! Line-based `key = value` run configuration.

use std::path::{Path, PathBuf};

use crate::error::{CvdError, Result};
use crate::model::{CvdConfig, OptKind};

/// Everything a training run needs: model hyperparameters plus loop
/// settings and paths.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: CvdConfig,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptKind,
    pub dataset_path: PathBuf,
    pub out_dir: PathBuf,
    pub eval_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: CvdConfig::default(),
            steps: 2000,
            batch_size: 16,
            learning_rate: 1e-3,
            optimizer: OptKind::Adam,
            dataset_path: PathBuf::from("dataset.cvds"),
            out_dir: PathBuf::from("out"),
            eval_every: 1000,
        }
    }
}

fn parse_bool(v: &str, key: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CvdError::Config(format!("invalid boolean '{v}' for {key}"))),
    }
}

/// Parse a ratio that may be written as a fraction, e.g. "1/3".
pub fn parse_ratio(v: &str) -> Result<f64> {
    if let Some((num, den)) = v.split_once('/') {
        let n: f64 = num
            .trim()
            .parse()
            .map_err(|_| CvdError::Config(format!("invalid fraction '{v}'")))?;
        let d: f64 = den
            .trim()
            .parse()
            .map_err(|_| CvdError::Config(format!("invalid fraction '{v}'")))?;
        if d == 0.0 {
            return Err(CvdError::Config(format!("zero denominator in '{v}'")));
        }
        Ok(n / d)
    } else {
        v.parse()
            .map_err(|_| CvdError::Config(format!("invalid number '{v}'")))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CvdError::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let num = |v: &str| -> Result<f64> { parse_ratio(v) };
        let int = |v: &str| -> Result<u64> {
            v.parse()
                .map_err(|_| CvdError::Config(format!("invalid integer '{v}' for {key}")))
        };
        match key {
            "image_size" => self.model.image_size = int(value)? as usize,
            "channels" => self.model.channels = int(value)? as usize,
            "d" => self.model.d = int(value)? as usize,
            "alpha" => self.model.alpha = num(value)?,
            "squeeze" => self.model.squeeze = parse_bool(value, key)?,
            "share_encoder" => self.model.share_encoder = parse_bool(value, key)?,
            "tau" => self.model.tau = num(value)?,
            "lambda1" => self.model.lambda1 = num(value)?,
            "lambda2" => self.model.lambda2 = num(value)?,
            "n_projections" => self.model.n_projections = int(value)? as usize,
            "bi_infonce" => self.model.bi_infonce = parse_bool(value, key)?,
            "seed" => self.model.seed = int(value)?,
            "steps" => self.steps = int(value)?,
            "batch_size" => self.batch_size = int(value)? as usize,
            "learning_rate" => self.learning_rate = num(value)?,
            "optimizer" => {
                self.optimizer = match value {
                    "sgd" => OptKind::Sgd,
                    "adam" => OptKind::Adam,
                    _ => {
                        return Err(CvdError::Config(format!(
                            "unknown optimizer '{value}' (expected sgd|adam)"
                        )))
                    }
                }
            }
            "dataset_path" => self.dataset_path = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "eval_every" => self.eval_every = int(value)?,
            _ => return Err(CvdError::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.steps < 1 {
            return Err(CvdError::Config("steps must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(CvdError::Config(
                "batch_size must be >= 2 (independence loss needs pairs)".into(),
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err(CvdError::Config("learning_rate must be positive".into()));
        }
        if self.eval_every < 1 {
            return Err(CvdError::Config("eval_every must be >= 1".into()));
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        format!(
            "{}dataset_path = {}\nout_dir = {}\n",
            self.snapshot_text(),
            self.dataset_path.display(),
            self.out_dir.display(),
        )
    }

    /// Like [`to_text`](Self::to_text) but without the path keys, so
    /// checkpoints from runs that differ only in their directories stay
    /// byte-identical.
    pub fn snapshot_text(&self) -> String {
        let m = &self.model;
        format!(
            "image_size = {}\nchannels = {}\nd = {}\nalpha = {}\nsqueeze = {}\nshare_encoder = {}\ntau = {}\nlambda1 = {}\nlambda2 = {}\nn_projections = {}\nbi_infonce = {}\nseed = {}\nsteps = {}\nbatch_size = {}\nlearning_rate = {}\noptimizer = {}\neval_every = {}\n",
            m.image_size,
            m.channels,
            m.d,
            m.alpha,
            m.squeeze,
            m.share_encoder,
            m.tau,
            m.lambda1,
            m.lambda2,
            m.n_projections,
            m.bi_infonce,
            m.seed,
            self.steps,
            self.batch_size,
            self.learning_rate,
            match self.optimizer {
                OptKind::Sgd => "sgd",
                OptKind::Adam => "adam",
            },
            self.eval_every,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.model.alpha = 0.75;
        cfg.model.seed = 9;
        cfg.steps = 123;
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let cfg = RunConfig::parse("# comment\n\nsteps = 5  # trailing\n").unwrap();
        assert_eq!(cfg.steps, 5);
    }

    #[test]
    fn unknown_key_is_config_error() {
        assert!(matches!(
            RunConfig::parse("bogus = 1\n"),
            Err(CvdError::Config(_))
        ));
    }

    #[test]
    fn fraction_values() {
        let cfg = RunConfig::parse("alpha = 1/3\n").unwrap();
        assert!((cfg.model.alpha - 1.0 / 3.0).abs() < 1e-15);
        assert!(parse_ratio("1/0").is_err());
    }

    #[test]
    fn invalid_batch_size_rejected() {
        assert!(RunConfig::parse("batch_size = 1\n").is_err());
    }
}
