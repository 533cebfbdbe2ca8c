use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Settings of a mask-training run, read from `key=value` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneConfig {
    pub target_sparsity: f64,
    /// Epochs training dimension masks only.
    pub stage1_epochs: usize,
    /// Epochs training every mask.
    pub stage2_epochs: usize,
    /// Adam step size of the model weights.
    pub lr: f64,
    /// Adam step size of the mask logits.
    pub mask_lr: f64,
    pub lambda_lr: f64,
    /// Logit scale reached at the end of training; masks are
    /// `sigmoid(β·logit)` with `β` rising linearly from 1 over stage 2,
    /// holding for its last epoch.
    pub final_sharpness: f64,
    /// Starting value of the quadratic multiplier.
    pub lambda2_init: f64,
    /// Epochs over which the target rises linearly from zero.
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub init_logit: f64,
    /// Weight-only epochs with the binarized masks held fixed.
    pub finetune_epochs: usize,
    pub seed: u64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            target_sparsity: 0.5,
            stage1_epochs: 2,
            stage2_epochs: 6,
            lr: 1e-3,
            mask_lr: 0.05,
            lambda_lr: 0.1,
            final_sharpness: 6.0,
            lambda2_init: 50.0,
            warmup_epochs: 3,
            batch_size: 32,
            init_logit: 3.0,
            finetune_epochs: 2,
            seed: 0,
        }
    }
}

impl PruneConfig {
    /// Parses `key=value` lines over the defaults. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            c.set(key.trim(), value.trim())?;
        }
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "target_sparsity" => self.target_sparsity = parse(key, value)?,
            "stage1_epochs" => self.stage1_epochs = parse(key, value)?,
            "stage2_epochs" => self.stage2_epochs = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "mask_lr" => self.mask_lr = parse(key, value)?,
            "lambda_lr" => self.lambda_lr = parse(key, value)?,
            "final_sharpness" => self.final_sharpness = parse(key, value)?,
            "lambda2_init" => self.lambda2_init = parse(key, value)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "init_logit" => self.init_logit = parse(key, value)?,
            "finetune_epochs" => self.finetune_epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.target_sparsity) {
            return Err(Error::Config(format!(
                "target_sparsity {} outside [0, 1)",
                self.target_sparsity
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for (k, v) in [
            ("lr", self.lr),
            ("mask_lr", self.mask_lr),
            ("lambda_lr", self.lambda_lr),
            ("lambda2_init", self.lambda2_init),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{k} must be a non-negative number")));
            }
        }
        if !(self.final_sharpness.is_finite() && self.final_sharpness >= 1.0) {
            return Err(Error::Config("final_sharpness must be at least 1".into()));
        }
        Ok(())
    }

    /// Serialized form accepted by [`parse`](Self::parse).
    pub fn to_text(&self) -> String {
        format!(
            "target_sparsity={}\nstage1_epochs={}\nstage2_epochs={}\nlr={}\nmask_lr={}\nlambda_lr={}\n\
             final_sharpness={}\nlambda2_init={}\nwarmup_epochs={}\nbatch_size={}\ninit_logit={}\nfinetune_epochs={}\nseed={}\n",
            self.target_sparsity,
            self.stage1_epochs,
            self.stage2_epochs,
            self.lr,
            self.mask_lr,
            self.lambda_lr,
            self.final_sharpness,
            self.lambda2_init,
            self.warmup_epochs,
            self.batch_size,
            self.init_logit,
            self.finetune_epochs,
            self.seed
        )
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}
