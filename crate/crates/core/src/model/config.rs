// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape and seed of a toy model. Weights are a pure function of this struct.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub vocab_size: usize,
    pub n_vision: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Default toy dimensions: L=4, H=4, d_model=32, |Σ|=64, 16 vision tokens.
    pub fn toy(seed: u64) -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 32,
            d_head: 8,
            vocab_size: 64,
            n_vision: 16,
            max_seq: 64,
            seed,
        }
    }

    /// Build a config with `d_head = d_model / n_heads`.
    pub fn with_dims(
        n_layers: usize,
        n_heads: usize,
        d_model: usize,
        vocab_size: usize,
        n_vision: usize,
        seed: u64,
    ) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by n_heads {n_heads}"
            )));
        }
        let cfg = Self {
            n_layers,
            n_heads,
            d_model,
            d_head: d_model / n_heads,
            vocab_size,
            n_vision,
            max_seq: (n_vision + 48).max(64),
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("vocab_size", self.vocab_size),
            ("n_vision", self.n_vision),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::Config(format!(
                "d_model {} != n_heads {} x d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.n_vision >= self.max_seq {
            return Err(Error::Config(format!(
                "n_vision {} leaves no room in max_seq {}",
                self.n_vision, self.max_seq
            )));
        }
        Ok(())
    }

    pub fn n_heads_total(&self) -> usize {
        self.n_layers * self.n_heads
    }
}
