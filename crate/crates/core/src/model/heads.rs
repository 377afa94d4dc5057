//! Dense per-head QK/OV matrices for analysis.
//!
//! With row-vector residuals `x`, a head scores `x_t · W_QK · x_sᵀ` and writes
//! `x_s · W_OV`. GPT-2 carries biases on q/k/v, so two small correction terms
//! ride along: `key_bias` (the part of the score that depends on `s` through
//! the query bias) and `ov_bias` (the value bias pushed through `W_O`). Score
//! terms depending only on `t` cancel in the softmax and are dropped.

use super::weights::Weights;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

#[derive(Debug, Clone)]
pub struct HeadWeights {
    /// `W_Q W_Kᵀ / √d_head`, `[d_model × d_model]`.
    pub qk: Matrix,
    /// `W_V W_O`, `[d_model × d_model]`.
    pub ov: Matrix,
    /// `W_K b_Q / √d_head`, `[d_model]`.
    pub key_bias: Vec<f32>,
    /// `b_V W_O`, `[d_model]`.
    pub ov_bias: Vec<f32>,
}

fn check_head(weights: &Weights, layer: usize, head: usize) -> Result<()> {
    let c = &weights.config;
    if layer >= c.n_layers || head >= c.n_heads {
        return Err(Error::InvalidNode(format!(
            "head L{layer}H{head} out of range ({} layers × {} heads)",
            c.n_layers, c.n_heads
        )));
    }
    Ok(())
}

/// Column block `[offset, offset + width)` of a row-major matrix.
fn columns(m: &Matrix, offset: usize, width: usize) -> Matrix {
    let mut out = Matrix::zeros(m.rows, width);
    for r in 0..m.rows {
        out.row_mut(r)
            .copy_from_slice(&m.row(r)[offset..offset + width]);
    }
    out
}

/// Rows `[offset, offset + height)` of a row-major matrix.
fn rows(m: &Matrix, offset: usize, height: usize) -> Matrix {
    Matrix::from_vec(
        height,
        m.cols,
        m.data[offset * m.cols..(offset + height) * m.cols].to_vec(),
    )
}

impl Weights {
    /// Materialise the dense matrices of one head.
    pub fn head_weights(&self, layer: usize, head: usize) -> Result<HeadWeights> {
        check_head(self, layer, head)?;
        let c = &self.config;
        let (d, dh) = (c.d_model, c.d_head);
        let lw = &self.layers[layer];
        let scale = 1.0 / (dh as f32).sqrt();

        let wq = columns(&lw.qkv_w, head * dh, dh);
        let wk = columns(&lw.qkv_w, d + head * dh, dh);
        let wv = columns(&lw.qkv_w, 2 * d + head * dh, dh);
        let wo = rows(&lw.out_w, head * dh, dh);
        let bq = &lw.qkv_b[head * dh..(head + 1) * dh];
        let bv = &lw.qkv_b[2 * d + head * dh..2 * d + (head + 1) * dh];

        let mut qk = linalg::matmul_transposed(&wq, &wk);
        qk.data.iter_mut().for_each(|v| *v *= scale);
        let key_bias = linalg::scale(&wk.mul_vec(bq), scale);
        Ok(HeadWeights {
            qk,
            ov: wv.matmul(&wo),
            key_bias,
            ov_bias: wo.vec_mul(bv),
        })
    }
}

/// Recompute one head from LayerNormed attention inputs via the dense
/// QK/OV form. Returns per-position outputs and the attention pattern.
pub fn head_output(
    weights: &Weights,
    layer: usize,
    head: usize,
    residuals: &Matrix,
) -> Result<(Matrix, Matrix)> {
    let d = weights.config.d_model;
    if residuals.cols != d {
        return Err(Error::Dimension {
            expected: d,
            actual: residuals.cols,
        });
    }
    let hw = weights.head_weights(layer, head)?;
    let n = residuals.rows;
    let queries = residuals.matmul(&hw.qk);
    let mut pattern = Matrix::zeros(n, n);
    for t in 0..n {
        let q = queries.row(t);
        let row = &mut pattern.row_mut(t)[..=t];
        for (s, score) in row.iter_mut().enumerate() {
            let x = residuals.row(s);
            *score = (linalg::dot(q, x) + linalg::dot(x, &hw.key_bias)) as f32;
        }
        linalg::softmax_in_place(row);
    }
    let mut outputs = pattern.matmul(&residuals.matmul(&hw.ov));
    for t in 0..n {
        linalg::add_assign(outputs.row_mut(t), &hw.ov_bias);
    }
    Ok((outputs, pattern))
}

/// `v · W_OV` for one head, without the value bias.
pub fn ov_apply(weights: &Weights, layer: usize, head: usize, v: &[f32]) -> Result<Vec<f32>> {
    check_head(weights, layer, head)?;
    let c = &weights.config;
    let (d, dh) = (c.d_model, c.d_head);
    if v.len() != d {
        return Err(Error::Dimension {
            expected: d,
            actual: v.len(),
        });
    }
    let lw = &weights.layers[layer];
    let mut z = vec![0.0f32; dh];
    linalg::gemm(
        v,
        1,
        d,
        d,
        &lw.qkv_w.data[2 * d + head * dh..],
        dh,
        3 * d,
        &mut z,
    );
    let mut out = vec![0.0f32; d];
    linalg::gemm(
        &z,
        1,
        dh,
        dh,
        &lw.out_w.data[head * dh * d..],
        d,
        d,
        &mut out,
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ModelConfig;
    use crate::model::forward::{attention_input, forward_with_cache};

    fn toy() -> Weights {
        Weights::random(ModelConfig::toy(2, 4, 8, 61), 3)
    }

    #[test]
    fn dense_form_matches_forward_pass() {
        let w = toy();
        let cache = forward_with_cache(&w, &[4, 9, 33, 60], &[]).unwrap();
        for l in 0..2 {
            let normed = attention_input(&w, l, &cache.resid_pre[l]);
            for h in 0..4 {
                let (out, pattern) = head_output(&w, l, h, &normed).unwrap();
                assert!(linalg::max_abs_diff(&pattern.data, &cache.attn_pattern[l][h].data) < 1e-5);
                assert!(
                    linalg::max_abs_diff(&out.data, &cache.head_out[l][h].data) < 1e-5,
                    "L{l}H{h}"
                );
            }
        }
    }

    #[test]
    fn single_token_pattern_is_one() {
        let w = toy();
        let x = Matrix::from_vec(1, 32, (0..32).map(|i| (i as f32).sin()).collect());
        let (_, p) = head_output(&w, 0, 1, &x).unwrap();
        assert_eq!(p.data, vec![1.0]);
    }

    #[test]
    fn uniform_inputs_give_ov_of_input() {
        let w = toy();
        let v: Vec<f32> = (0..32).map(|i| (i as f32 * 0.3).cos()).collect();
        let x = Matrix::from_rows(&vec![v.clone(); 5]);
        let (out, _) = head_output(&w, 1, 2, &x).unwrap();
        let hw = w.head_weights(1, 2).unwrap();
        let expect = linalg::add(&ov_apply(&w, 1, 2, &v).unwrap(), &hw.ov_bias);
        for t in 0..5 {
            assert!(linalg::max_abs_diff(out.row(t), &expect) < 1e-5);
        }
    }

    #[test]
    fn ov_apply_is_linear_and_matches_dense() {
        let w = toy();
        let u: Vec<f32> = (0..32).map(|i| (i as f32 * 0.7).sin()).collect();
        let v: Vec<f32> = (0..32).map(|i| (i as f32 * 1.3).cos()).collect();
        let mix: Vec<f32> = u.iter().zip(&v).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
        let lhs = ov_apply(&w, 0, 3, &mix).unwrap();
        let mut rhs = linalg::scale(&ov_apply(&w, 0, 3, &u).unwrap(), 2.0);
        linalg::axpy(&mut rhs, -0.5, &ov_apply(&w, 0, 3, &v).unwrap());
        assert!(linalg::max_abs_diff(&lhs, &rhs) < 1e-5);
        let dense = w.head_weights(0, 3).unwrap().ov.vec_mul(&u);
        assert!(linalg::max_abs_diff(&dense, &ov_apply(&w, 0, 3, &u).unwrap()) < 1e-5);
        assert!(ov_apply(&w, 0, 3, &[0.0; 32])
            .unwrap()
            .iter()
            .all(|&x| x == 0.0));
        assert!(ov_apply(&w, 2, 0, &u).is_err());
    }

    #[test]
    fn head_matrices_are_low_rank() {
        let w = toy();
        let hw = w.head_weights(1, 0).unwrap();
        for m in [&hw.qk, &hw.ov] {
            let dm = nalgebra::DMatrix::from_row_slice(m.rows, m.cols, &m.data);
            assert!(dm.rank(1e-4) <= 8);
        }
    }
}
