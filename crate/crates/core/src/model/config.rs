use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Head width shared by every public GPT-2 size; used to infer the head count
/// when the archive carries no `n_head` metadata.
pub const GPT2_HEAD_DIM: usize = 64;

pub const GPT2_LN_EPSILON: f32 = 1e-5;

/// Dimensions of a GPT-2-family decoder, inferred from tensor shapes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub d_vocab: usize,
    pub max_context: usize,
    pub ln_epsilon: f32,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("d_vocab", self.d_vocab),
            ("max_context", self.max_context),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::shape(name, "must be positive"));
            }
        }
        if self.d_head * self.n_heads != self.d_model {
            return Err(Error::shape(
                "n_heads",
                format!(
                    "d_head ({}) * n_heads ({}) != d_model ({})",
                    self.d_head, self.n_heads, self.d_model
                ),
            ));
        }
        if !(self.ln_epsilon > 0.0) {
            return Err(Error::shape("ln_epsilon", "must be positive"));
        }
        Ok(())
    }

    /// GPT-2 small (117M).
    pub fn gpt2_small() -> Self {
        Self {
            n_layers: 12,
            n_heads: 12,
            d_model: 768,
            d_head: 64,
            d_mlp: 3072,
            d_vocab: 50257,
            max_context: 1024,
            ln_epsilon: GPT2_LN_EPSILON,
        }
    }

    /// Small configuration for tests and property suites.
    pub fn toy(n_layers: usize, n_heads: usize, d_head: usize, d_vocab: usize) -> Self {
        let d_model = n_heads * d_head;
        Self {
            n_layers,
            n_heads,
            d_model,
            d_head,
            d_mlp: 4 * d_model,
            d_vocab,
            max_context: 64,
            ln_epsilon: GPT2_LN_EPSILON,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gpt2_small_is_valid() {
        let c = ModelConfig::gpt2_small();
        c.validate().unwrap();
        assert_eq!((c.n_layers, c.n_heads), (12, 12));
    }

    #[test]
    fn rejects_inconsistent_heads() {
        let mut c = ModelConfig::toy(2, 4, 8, 100);
        c.n_heads = 5;
        assert!(matches!(c.validate(), Err(Error::Shape { .. })));
        let mut c = ModelConfig::toy(2, 4, 8, 100);
        c.n_layers = 0;
        assert!(c.validate().is_err());
    }
}
