//! Model architecture dimensions shared by the encoder and decoder.

use crate::error::{CodecError, Result};

/// Architecture hyperparameters of one codec instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Number of signal channels C.
    pub channels: usize,
    /// Block length L of one per-channel segment.
    pub block_len: usize,
    /// Number of parallel threshold/scale subbands N in the compression unit.
    pub subbands: usize,
    /// Number of attention heads h in the decoder.
    pub heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 64,
            block_len: 64,
            subbands: 3,
            heads: 4,
        }
    }
}

impl ModelConfig {
    pub fn new(channels: usize, block_len: usize, subbands: usize, heads: usize) -> Result<Self> {
        let cfg = ModelConfig {
            channels,
            block_len,
            subbands,
            heads,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.block_len == 0 || self.subbands == 0 || self.heads == 0 {
            return Err(CodecError::Configuration(
                "channels, block_len, subbands and heads must all be positive".into(),
            ));
        }
        if !self.channels.is_multiple_of(self.heads) {
            return Err(CodecError::Configuration(format!(
                "channel count {} is not divisible by head count {}",
                self.channels, self.heads
            )));
        }
        Ok(())
    }

    /// Per-head projection width D = C / h.
    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}
