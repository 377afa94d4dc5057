use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Which residual-stream node or module output inside a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Site {
    ResidPre,
    HeadOut(usize),
    ResidMid,
    MlpOut,
    ResidPost,
}

impl Site {
    pub fn is_residual(self) -> bool {
        matches!(self, Site::ResidPre | Site::ResidMid | Site::ResidPost)
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Site::ResidPre => write!(f, "resid_pre"),
            Site::HeadOut(h) => write!(f, "head_out.{h}"),
            Site::ResidMid => write!(f, "resid_mid"),
            Site::MlpOut => write!(f, "mlp_out"),
            Site::ResidPost => write!(f, "resid_post"),
        }
    }
}

/// Address of one cached vector. `position` accepts negative indices
/// (`-1` is the final position).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeId {
    pub layer: usize,
    pub site: Site,
    pub position: i64,
}

impl NodeId {
    pub fn new(layer: usize, site: Site, position: i64) -> Self {
        Self {
            layer,
            site,
            position,
        }
    }

    /// Absolute position for a sequence of length `seq_len`.
    pub fn resolve_position(&self, seq_len: usize) -> Result<usize> {
        resolve_position(self.position, seq_len)
    }
}

pub(crate) fn resolve_position(position: i64, seq_len: usize) -> Result<usize> {
    let t = if position < 0 {
        seq_len as i64 + position
    } else {
        position
    };
    if t < 0 || t >= seq_len as i64 {
        return Err(Error::InvalidNode(format!(
            "position {position} out of range for sequence length {seq_len}"
        )));
    }
    Ok(t as usize)
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.site, self.layer, self.position)
    }
}

/// A do()-style replacement of one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub node: NodeId,
    pub replacement: Vec<f32>,
}

/// Everything recorded during one forward pass.
///
/// Residual additivity holds per layer and position:
/// `resid_mid = resid_pre + Σ_h head_out[h] + attn_bias` and
/// `resid_post = resid_mid + mlp_out`. The attention output bias is kept
/// apart from the heads so per-head attribution stays bias-free.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    pub tokens: Vec<u32>,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    /// `[layer]` → `[T × d_model]`
    pub resid_pre: Vec<Matrix>,
    pub resid_mid: Vec<Matrix>,
    pub resid_post: Vec<Matrix>,
    /// `[layer][head]` → `[T × d_model]`, post output projection.
    pub head_out: Vec<Vec<Matrix>>,
    /// `[layer]` → attention output bias added once into `resid_mid`.
    pub attn_bias: Vec<Vec<f32>>,
    pub mlp_out: Vec<Matrix>,
    /// `[layer][head]` → `[T × T]`, row-stochastic, lower triangular.
    pub attn_pattern: Vec<Vec<Matrix>>,
    /// `[layer][head]` → `[T × d_head]`
    pub value_vectors: Vec<Vec<Matrix>>,
    /// Logits for positions `logits_start..T`.
    pub final_logits: Matrix,
    pub logits_start: usize,
}

impl ActivationCache {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn check_node(&self, node: &NodeId) -> Result<usize> {
        if node.layer >= self.n_layers {
            return Err(Error::InvalidNode(format!(
                "layer {} out of range ({} layers)",
                node.layer, self.n_layers
            )));
        }
        if let Site::HeadOut(h) = node.site {
            if h >= self.n_heads {
                return Err(Error::InvalidNode(format!(
                    "head {h} out of range ({} heads)",
                    self.n_heads
                )));
            }
        }
        node.resolve_position(self.seq_len())
    }

    /// The cached vector at `node`.
    pub fn node(&self, node: &NodeId) -> Result<&[f32]> {
        let t = self.check_node(node)?;
        let l = node.layer;
        Ok(match node.site {
            Site::ResidPre => self.resid_pre[l].row(t),
            Site::ResidMid => self.resid_mid[l].row(t),
            Site::ResidPost => self.resid_post[l].row(t),
            Site::HeadOut(h) => self.head_out[l][h].row(t),
            Site::MlpOut => self.mlp_out[l].row(t),
        })
    }

    /// Sum of all head outputs (without the attention bias) at `(layer, t)`.
    pub fn heads_sum(&self, layer: usize, t: usize) -> Vec<f32> {
        let mut acc = vec![0.0; self.d_model];
        for h in 0..self.n_heads {
            crate::linalg::add_assign(&mut acc, self.head_out[layer][h].row(t));
        }
        acc
    }

    /// Logit row for absolute position `t`, if it was computed.
    pub fn logits_at(&self, t: usize) -> Option<&[f32]> {
        (t >= self.logits_start && t < self.seq_len())
            .then(|| self.final_logits.row(t - self.logits_start))
    }

    pub fn last_logits(&self) -> &[f32] {
        self.logits_at(self.seq_len() - 1)
            .expect("final-position logits are always computed")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negative_positions_resolve_from_the_end() {
        assert_eq!(resolve_position(-1, 5).unwrap(), 4);
        assert_eq!(resolve_position(0, 5).unwrap(), 0);
        assert!(resolve_position(5, 5).is_err());
        assert!(resolve_position(-6, 5).is_err());
    }

    #[test]
    fn node_display() {
        assert_eq!(
            NodeId::new(11, Site::ResidPost, -1).to_string(),
            "resid_post:11:-1"
        );
    }
}
