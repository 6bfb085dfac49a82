use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::positional::{PEKind, DEFAULT_MAX_POSITIONS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormOrder {
    Pre,
    Post,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub pe_kind: PEKind,
    /// `(encoder, decoder)` position limits.
    pub max_positions: (usize, usize),
    pub dropout: f64,
    pub norm_order: NormOrder,
    /// Bias vectors on every projection.
    pub proj_bias: bool,
}

impl ModelConfig {
    /// The desk-scale default: 2+2 layers, width 64, 4 heads, FFN 256.
    pub fn toy(src_vocab: usize, tgt_vocab: usize, pe_kind: PEKind) -> Self {
        ModelConfig {
            enc_layers: 2,
            dec_layers: 2,
            d_model: 64,
            n_heads: 4,
            ffn_dim: 256,
            src_vocab,
            tgt_vocab,
            pe_kind,
            max_positions: (DEFAULT_MAX_POSITIONS, DEFAULT_MAX_POSITIONS),
            dropout: 0.0,
            norm_order: NormOrder::Pre,
            proj_bias: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.pe_kind == PEKind::Rope && self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!(
                "rotary embeddings need an even head width, got {}",
                self.head_dim()
            )));
        }
        if self.src_vocab < 4 || self.tgt_vocab < 4 {
            return Err(Error::Config("vocabularies must hold the 4 special tokens".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if self.max_positions.0 == 0 || self.max_positions.1 == 0 {
            return Err(Error::Config("max_positions must be positive".into()));
        }
        Ok(())
    }

    /// Closed-form scalar parameter count of the unadapted model.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let f = self.ffn_dim;
        let b = usize::from(self.proj_bias);
        let proj = |din: usize, dout: usize| din * dout + b * dout;
        let attn = 4 * proj(d, d);
        let norm = 2 * d;
        let ffn = proj(d, f) + proj(f, d);
        let enc_layer = attn + ffn + 2 * norm;
        let dec_layer = 2 * attn + ffn + 3 * norm;
        let finals = match self.norm_order {
            NormOrder::Pre => 2 * norm,
            NormOrder::Post => 0,
        };
        (self.src_vocab + self.tgt_vocab) * d
            + self.enc_layers * enc_layer
            + self.dec_layers * dec_layer
            + finals
    }
}
