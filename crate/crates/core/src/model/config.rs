use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Normalization placement of the toy stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arch {
    /// BERT-style: `x_M = LN(x + MHA(x))`, `x_F = LN(x_M + FFN(x_M))`.
    PostLn,
    /// Llama-style: `x ← x + Block(RMSNorm(x))`, with a final RMSNorm.
    PreRms,
}

impl Arch {
    pub fn code(self) -> u64 {
        match self {
            Arch::PostLn => 0,
            Arch::PreRms => 1,
        }
    }

    pub fn from_code(code: u64) -> Result<Self> {
        match code {
            0 => Ok(Arch::PostLn),
            1 => Ok(Arch::PreRms),
            other => Err(Error::Input(format!("unknown architecture code {other}"))),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::PostLn => "postln",
            Arch::PreRms => "rmsnorm",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "postln" | "post-ln" => Ok(Arch::PostLn),
            "rmsnorm" | "pre-rmsnorm" | "prerms" => Ok(Arch::PreRms),
            other => Err(Error::Config(format!(
                "unknown arch '{other}' (expected postln|rmsnorm)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub n_classes: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// The 2-layer, d=16 configuration used throughout the tests.
    pub fn toy(arch: Arch) -> Self {
        Self {
            arch,
            n_layers: 2,
            d_model: 16,
            n_heads: 4,
            d_ff: 32,
            vocab_size: 8,
            max_seq_len: 9,
            n_classes: 2,
            seed: 0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.max_seq_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::Input(format!(
                "token {t} out of vocabulary (size {})",
                self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("n_classes", self.n_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}
