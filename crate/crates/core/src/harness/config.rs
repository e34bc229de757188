//! Run configuration: hyperparameter defaults, a `key = value` config-file
//! parser, and override plumbing for CLI flags.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Every tunable of a training/evaluation run. Schedule and loss weights
/// default to the reference recipe; network-size knobs default to the full
/// architecture and can be shrunk for desk-scale runs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Raw (and fusion) points per object.
    pub n_raw: usize,
    /// Refined cloud size; must be a multiple of 8.
    pub m_refined: usize,
    /// Neighbors in the graph convolutions.
    pub k_nn: usize,
    /// Adversarial weight in the refinement loss.
    pub lambda: f64,
    /// Multi-resolution weight in the refinement loss.
    pub beta: f64,
    /// Refinement-loss weight in the overall objective.
    pub mu: f64,
    pub lr: f64,
    /// Minibatch size for refinement pretraining epochs.
    pub batch_size: usize,
    /// Minibatch size for pose and joint epochs.
    pub joint_batch_size: usize,
    /// Phase-1 epochs alternating refinement-only and pose-only updates.
    pub alt_epochs: usize,
    /// Phase-2 epochs on the combined objective.
    pub joint_epochs: usize,
    /// Learning-rate factor applied after half of the total epochs.
    pub lr_decay: f64,
    pub seed: u64,
    /// Canonical model points used in the pose loss (FPS-sampled from the
    /// object model).
    pub model_points: usize,
    /// PRN latent width.
    pub latent_dim: usize,
    /// Scales every hidden width of every network; 1.0 is the full size.
    pub net_scale: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n_raw: 100,
            m_refined: 512,
            k_nn: 30,
            lambda: 0.05,
            beta: 0.95,
            mu: 1.0,
            lr: 1e-4,
            batch_size: 48,
            joint_batch_size: 8,
            alt_epochs: 15,
            joint_epochs: 30,
            lr_decay: 0.3,
            seed: 0,
            model_points: 64,
            latent_dim: 512,
            net_scale: 1.0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if self.m_refined == 0 || self.m_refined % 8 != 0 {
            return bad(format!("m_refined must be a positive multiple of 8, got {}", self.m_refined));
        }
        if self.n_raw < 4 || self.n_raw <= self.k_nn {
            return bad(format!("n_raw must be >= 4 and > k_nn, got n_raw={} k_nn={}", self.n_raw, self.k_nn));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must be in (0,1], got {}", self.lr_decay));
        }
        if self.lr < 0.0 || self.lambda < 0.0 || self.beta < 0.0 || self.mu < 0.0 {
            return bad("lr, lambda, beta, mu must be nonnegative".into());
        }
        if self.batch_size == 0 || self.joint_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.model_points == 0 {
            return bad("model_points must be positive".into());
        }
        if !(self.net_scale > 0.0 && self.net_scale <= 1.0) {
            return bad(format!("net_scale must be in (0,1], got {}", self.net_scale));
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be positive".into());
        }
        Ok(())
    }

    /// Apply one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.trim().parse().map_err(|_| {
                Error::InvalidInput(format!("bad value `{value}` for config key `{key}`"))
            })
        }
        match key {
            "n_raw" => self.n_raw = parse(key, value)?,
            "m_refined" => self.m_refined = parse(key, value)?,
            "k_nn" => self.k_nn = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "mu" => self.mu = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "joint_batch_size" => self.joint_batch_size = parse(key, value)?,
            "alt_epochs" => self.alt_epochs = parse(key, value)?,
            "joint_epochs" => self.joint_epochs = parse(key, value)?,
            "lr_decay" => self.lr_decay = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "model_points" => self.model_points = parse(key, value)?,
            "latent_dim" => self.latent_dim = parse(key, value)?,
            "net_scale" => self.net_scale = parse(key, value)?,
            _ => {
                return Err(Error::InvalidInput(format!("unknown config key `{key}`")));
            }
        }
        Ok(())
    }

    /// Parse a config file: one `key = value` per line, `#` comments.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                detail: format!("line {}: expected `key = value`, got `{line}`", lineno + 1),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply_file(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// A hidden width scaled by `net_scale`, floored at 4.
    pub fn scaled(&self, width: usize) -> usize {
        ((width as f64 * self.net_scale).round() as usize).max(4)
    }
}
