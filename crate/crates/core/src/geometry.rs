//! Geometry of the unembedding space.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::Weights;

/// Smallest accepted `det(MᵀM) / (‖m₀‖²‖m₁‖²)`, i.e. `sin²` of the angle
/// between the basis vectors.
const MIN_SIN2: f64 = 1e-10;

/// `M(MᵀM)⁻¹Mᵀ v` with `M = [b0, b1]`.
pub fn project_onto_span(v: &[f32], b0: &[f32], b1: &[f32]) -> Result<Vec<f32>> {
    if v.len() != b0.len() || v.len() != b1.len() {
        return Err(Error::Dimension {
            expected: v.len(),
            actual: if b0.len() != v.len() {
                b0.len()
            } else {
                b1.len()
            },
        });
    }
    let (g00, g01, g11) = (
        linalg::dot(b0, b0),
        linalg::dot(b0, b1),
        linalg::dot(b1, b1),
    );
    let det = g00 * g11 - g01 * g01;
    if g00 == 0.0 || g11 == 0.0 || det / (g00 * g11) < MIN_SIN2 {
        return Err(Error::Degenerate(
            "basis vectors are linearly dependent".into(),
        ));
    }
    let (p0, p1) = (linalg::dot(b0, v), linalg::dot(b1, v));
    let c0 = (g11 * p0 - g01 * p1) / det;
    let c1 = (g00 * p1 - g01 * p0) / det;
    Ok(b0
        .iter()
        .zip(b1)
        .map(|(&x, &y)| (c0 * x as f64 + c1 * y as f64) as f32)
        .collect())
}

pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Dimension {
            expected: u.len(),
            actual: v.len(),
        });
    }
    linalg::cosine(u, v).ok_or_else(|| Error::Degenerate("cosine of a zero vector".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub from: u32,
    pub to: u32,
    /// Cosine of the projected vector with `W_U[to] − W_U[from]`.
    pub cos_projected: f64,
    /// Cosine of the raw vector with the same direction.
    pub cos_raw: f64,
}

/// How far `b`, seen inside span{W_U[from], W_U[to]}, points from `from` to `to`.
pub fn alignment(weights: &Weights, b: &[f32], from: u32, to: u32) -> Result<Alignment> {
    if from == to {
        return Err(Error::Degenerate(
            "alignment needs two distinct tokens".into(),
        ));
    }
    let w_u = weights.unembedding();
    let row = |t: u32| {
        if (t as usize) < w_u.rows {
            Ok(w_u.row(t as usize))
        } else {
            Err(Error::TokenOutOfRange {
                id: t,
                vocab: w_u.rows,
            })
        }
    };
    let (uf, ut) = (row(from)?, row(to)?);
    let direction = linalg::sub(ut, uf);
    let projected = project_onto_span(b, uf, ut)?;
    Ok(Alignment {
        from,
        to,
        cos_projected: cosine(&projected, &direction)?,
        cos_raw: cosine(b, &direction)?,
    })
}

/// Nonnegative per-token weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyTable {
    weights: Vec<f64>,
}

impl FrequencyTable {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Degenerate(
                "frequencies must be finite and nonnegative".into(),
            ));
        }
        if !weights.iter().any(|&w| w > 0.0) {
            return Err(Error::Degenerate("frequency table is all zero".into()));
        }
        Ok(Self { weights })
    }

    pub fn uniform(vocab: usize) -> Self {
        Self {
            weights: vec![1.0; vocab],
        }
    }

    /// Parse `token_id<TAB>count` lines; ids absent from the file weigh 0.
    /// Blank lines and lines starting with `#` are ignored.
    pub fn parse_tsv(text: &str, vocab: usize) -> Result<Self> {
        let mut weights = vec![0.0; vocab];
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::Degenerate(format!("frequency line {}: {line:?}", n + 1));
            let (id, count) = line.split_once('\t').ok_or_else(bad)?;
            let id: usize = id.trim().parse().map_err(|_| bad())?;
            let count: f64 = count.trim().parse().map_err(|_| bad())?;
            if id >= vocab {
                return Err(Error::TokenOutOfRange {
                    id: id as u32,
                    vocab,
                });
            }
            weights[id] += count;
        }
        Self::new(weights)
    }

    pub fn load_tsv(path: impl AsRef<Path>, vocab: usize) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text, vocab)
    }

    /// Relative frequencies `w_v` (summing to 1).
    pub fn relative(&self) -> Vec<f64> {
        let total: f64 = self.weights.iter().sum();
        self.weights.iter().map(|w| w / total).collect()
    }
}

/// `E[W_U] = (1/V) Σ_v w_v W_U[v]` with relative frequencies `w_v`.
pub fn expected_unembedding(freq: &FrequencyTable, weights: &Weights) -> Result<Vec<f32>> {
    let w_u = weights.unembedding();
    if freq.weights.len() != w_u.rows {
        return Err(Error::Dimension {
            expected: w_u.rows,
            actual: freq.weights.len(),
        });
    }
    let rel = freq.relative();
    let mut acc = vec![0.0f64; w_u.cols];
    for (v, &w) in rel.iter().enumerate() {
        if w > 0.0 {
            for (a, &x) in acc.iter_mut().zip(w_u.row(v)) {
                *a += w * x as f64;
            }
        }
    }
    let inv = 1.0 / w_u.rows as f64;
    Ok(acc.into_iter().map(|a| (a * inv) as f32).collect())
}
