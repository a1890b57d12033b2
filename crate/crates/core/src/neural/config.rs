use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textcorpus::{ALPHABET_SIZE, MAX_SEQ_LEN, VOCAB_SIZE};

/// BOS + 27 dictionary slots + EOS.
pub const TGT_LEN: usize = ALPHABET_SIZE + 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_src_len")]
    pub max_src_len: usize,
    #[serde(default = "default_tgt_len")]
    pub tgt_len: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_vocab() -> usize {
    VOCAB_SIZE
}
fn default_src_len() -> usize {
    MAX_SEQ_LEN
}
fn default_tgt_len() -> usize {
    TGT_LEN
}

impl Default for ModelConfig {
    /// The desk-scale configuration: d_model 64, 2+2 layers, 4 heads, d_ff 256.
    fn default() -> Self {
        Self::new(64, 2, 2, 4, 256, 0)
    }
}

impl ModelConfig {
    pub fn new(
        d_model: usize,
        n_layers_enc: usize,
        n_layers_dec: usize,
        n_heads: usize,
        d_ff: usize,
        seed: u64,
    ) -> Self {
        Self {
            d_model,
            n_layers_enc,
            n_layers_dec,
            n_heads,
            d_ff,
            vocab_size: VOCAB_SIZE,
            max_src_len: MAX_SEQ_LEN,
            tgt_len: TGT_LEN,
            seed,
        }
    }

    /// Collects every violated constraint into one error.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_layers_enc", self.n_layers_enc),
            ("n_layers_dec", self.n_layers_dec),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be >= 1"));
            }
        }
        if self.n_heads > 0 && self.d_model % self.n_heads != 0 {
            problems.push(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size != VOCAB_SIZE {
            problems.push(format!("vocab_size must be {VOCAB_SIZE}"));
        }
        if self.max_src_len == 0 || self.max_src_len > MAX_SEQ_LEN {
            problems.push(format!("max_src_len must be in 1..={MAX_SEQ_LEN}"));
        }
        if self.tgt_len != TGT_LEN {
            problems.push(format!("tgt_len must be {TGT_LEN}"));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Closed-form parameter count for `config`.
pub fn count_params(config: &ModelConfig) -> usize {
    let d = config.d_model;
    let v = config.vocab_size;
    let linear = |i: usize, o: usize| i * o + o;
    let norm = 2 * d;
    let attn = 4 * linear(d, d);
    let ff = linear(d, config.d_ff) + linear(config.d_ff, d);
    let enc_layer = 2 * norm + attn + ff;
    let dec_layer = 3 * norm + 2 * attn + ff;
    v * d
        + config.n_layers_enc * enc_layer
        + norm
        + config.n_layers_dec * dec_layer
        + norm
        + linear(d, v)
}
