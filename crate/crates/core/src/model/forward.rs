//! Instrumented forward pass.
//!
//! Every residual node, per-head output, MLP output, attention pattern and
//! value vector is recorded. Interventions (patches, attention masks,
//! residual subtraction, MLP substitution) are applied at the node they name
//! before any downstream computation reads it.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};

use super::cache::{resolve_position, ActivationCache, NodeId, PatchSpec, Site};
use super::weights::Weights;
use crate::error::{Error, Result};
use crate::linalg::{self, gemm, Matrix};

static FORWARD_PASSES: AtomicU64 = AtomicU64::new(0);

/// Number of forward passes run by this process so far.
pub fn forward_pass_count() -> u64 {
    FORWARD_PASSES.load(Ordering::Relaxed)
}

/// Which positions get full-vocabulary logits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum LogitsScope {
    #[default]
    AllPositions,
    LastPosition,
}

/// Substitutes an MLP output at the final position, given that layer's head
/// outputs and incoming residual from the running pass.
pub trait MlpReplacement: Sync {
    fn replace(&self, layer: usize, heads: &[&[f32]], resid_pre: &[f32]) -> Option<Vec<f32>>;
}

/// Interventions applied during a forward pass.
#[derive(Default)]
pub struct Interventions<'a> {
    pub patches: &'a [PatchSpec],
    /// Heads whose attention is forced onto the diagonal.
    pub masked_heads: BTreeSet<(usize, usize)>,
    /// `(layer, v)`: `v` is subtracted from `resid_post[layer]` at the final position.
    pub resid_post_subtract: Vec<(usize, Vec<f32>)>,
    pub mlp_replacement: Option<&'a dyn MlpReplacement>,
    pub logits: LogitsScope,
}

struct Resolved<'a> {
    layer: usize,
    site: Site,
    t: usize,
    value: &'a [f32],
}

fn apply_patches(resolved: &[Resolved<'_>], layer: usize, site: Site, m: &mut Matrix) {
    for p in resolved
        .iter()
        .filter(|p| p.layer == layer && p.site == site)
    {
        m.row_mut(p.t).copy_from_slice(p.value);
    }
}

fn validate(weights: &Weights, tokens: &[u32], iv: &Interventions<'_>) -> Result<()> {
    let c = &weights.config;
    if tokens.is_empty() || tokens.len() > c.max_context {
        return Err(Error::SequenceLength {
            len: tokens.len(),
            max: c.max_context,
        });
    }
    if let Some(&id) = tokens.iter().find(|&&id| id as usize >= c.d_vocab) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab: c.d_vocab,
        });
    }
    for &(l, h) in &iv.masked_heads {
        if l >= c.n_layers || h >= c.n_heads {
            return Err(Error::InvalidNode(format!(
                "masked head L{l}H{h} out of range"
            )));
        }
    }
    for (l, v) in &iv.resid_post_subtract {
        if *l >= c.n_layers {
            return Err(Error::InvalidNode(format!(
                "subtraction layer {l} out of range"
            )));
        }
        if v.len() != c.d_model {
            return Err(Error::Dimension {
                expected: c.d_model,
                actual: v.len(),
            });
        }
    }
    Ok(())
}

fn resolve_patches<'a>(
    weights: &Weights,
    seq_len: usize,
    patches: &'a [PatchSpec],
) -> Result<Vec<Resolved<'a>>> {
    let c = &weights.config;
    patches
        .iter()
        .map(|p| {
            check_node_shape(weights, &p.node)?;
            if p.replacement.len() != c.d_model {
                return Err(Error::Dimension {
                    expected: c.d_model,
                    actual: p.replacement.len(),
                });
            }
            Ok(Resolved {
                layer: p.node.layer,
                site: p.node.site,
                t: resolve_position(p.node.position, seq_len)?,
                value: &p.replacement,
            })
        })
        .collect()
}

pub(crate) fn check_node_shape(weights: &Weights, node: &NodeId) -> Result<()> {
    let c = &weights.config;
    if node.layer >= c.n_layers {
        return Err(Error::InvalidNode(format!(
            "layer {} out of range ({} layers)",
            node.layer, c.n_layers
        )));
    }
    if let Site::HeadOut(h) = node.site {
        if h >= c.n_heads {
            return Err(Error::InvalidNode(format!(
                "head {h} out of range ({} heads)",
                c.n_heads
            )));
        }
    }
    Ok(())
}

/// Clean or patched forward pass recording every node.
pub fn forward_with_cache(
    weights: &Weights,
    tokens: &[u32],
    patches: &[PatchSpec],
) -> Result<ActivationCache> {
    run(
        weights,
        tokens,
        &Interventions {
            patches,
            ..Default::default()
        },
    )
}

/// Output of head `(layer, head)` at position `t`, recomputed from LayerNormed
/// attention inputs `normed` (rows `0..=t` are read).
pub(crate) fn head_at(
    weights: &Weights,
    layer: usize,
    head: usize,
    normed: &Matrix,
    t: usize,
) -> Vec<f32> {
    let c = &weights.config;
    let (d, dh) = (c.d_model, c.d_head);
    let lw = &weights.layers[layer];
    let project = |row: &[f32], offset: usize| {
        let mut out = lw.qkv_b[offset..offset + dh].to_vec();
        let mut tmp = vec![0.0f32; dh];
        gemm(row, 1, d, d, &lw.qkv_w.data[offset..], dh, 3 * d, &mut tmp);
        linalg::add_assign(&mut out, &tmp);
        out
    };
    let q = project(normed.row(t), head * dh);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut scores = Vec::with_capacity(t + 1);
    let mut values = Vec::with_capacity(t + 1);
    for s in 0..=t {
        let k = project(normed.row(s), d + head * dh);
        scores.push((linalg::dot(&q, &k) * scale) as f32);
        values.push(project(normed.row(s), 2 * d + head * dh));
    }
    linalg::softmax_in_place(&mut scores);
    let mut z = vec![0.0f32; dh];
    for (p, v) in scores.iter().zip(&values) {
        linalg::axpy(&mut z, *p, v);
    }
    let mut out = vec![0.0f32; d];
    gemm(
        &z,
        1,
        dh,
        dh,
        &lw.out_w.data[head * dh * d..],
        d,
        d,
        &mut out,
    );
    out
}

/// LayerNorm every row of `resid` with the attention-block norm of `layer`.
pub fn attention_input(weights: &Weights, layer: usize, resid: &Matrix) -> Matrix {
    let norm = &weights.layers[layer].ln1;
    let eps = weights.config.ln_epsilon;
    let mut out = Matrix::zeros(resid.rows, resid.cols);
    for t in 0..resid.rows {
        linalg::layer_norm_into(resid.row(t), &norm.gamma, &norm.beta, eps, out.row_mut(t));
    }
    out
}

/// MLP output for a single `resid_mid` vector (includes the MLP's own norm).
pub fn mlp_forward(weights: &Weights, layer: usize, resid_mid: &[f32]) -> Vec<f32> {
    let m = Matrix::from_vec(1, resid_mid.len(), resid_mid.to_vec());
    mlp_rows(weights, layer, &m).data
}

fn mlp_rows(weights: &Weights, layer: usize, resid_mid: &Matrix) -> Matrix {
    let lw = &weights.layers[layer];
    let eps = weights.config.ln_epsilon;
    let mut normed = Matrix::zeros(resid_mid.rows, resid_mid.cols);
    for t in 0..resid_mid.rows {
        linalg::layer_norm_into(
            resid_mid.row(t),
            &lw.ln2.gamma,
            &lw.ln2.beta,
            eps,
            normed.row_mut(t),
        );
    }
    let mut hidden = normed.matmul(&lw.fc_w);
    for t in 0..hidden.rows {
        for (h, b) in hidden.row_mut(t).iter_mut().zip(&lw.fc_b) {
            *h = linalg::gelu(*h + b);
        }
    }
    let mut out = hidden.matmul(&lw.proj_w);
    for t in 0..out.rows {
        linalg::add_assign(out.row_mut(t), &lw.proj_b);
    }
    out
}

/// `W_U · LN_f(v)`: early decoding of any residual-space vector.
pub fn unembed(weights: &Weights, v: &[f32]) -> Vec<f32> {
    let m = Matrix::from_vec(1, v.len(), v.to_vec());
    unembed_rows(weights, &m).data
}

/// Row-wise [`unembed`].
pub fn unembed_rows(weights: &Weights, rows: &Matrix) -> Matrix {
    let eps = weights.config.ln_epsilon;
    let mut normed = Matrix::zeros(rows.rows, rows.cols);
    for t in 0..rows.rows {
        linalg::layer_norm_into(
            rows.row(t),
            &weights.ln_f.gamma,
            &weights.ln_f.beta,
            eps,
            normed.row_mut(t),
        );
    }
    linalg::matmul_transposed(&normed, weights.unembedding())
}

/// Forward pass with arbitrary interventions.
pub fn run(weights: &Weights, tokens: &[u32], iv: &Interventions<'_>) -> Result<ActivationCache> {
    validate(weights, tokens, iv)?;
    FORWARD_PASSES.fetch_add(1, Ordering::Relaxed);
    let c = weights.config;
    let (n_t, d, dh) = (tokens.len(), c.d_model, c.d_head);
    let last = n_t - 1;
    let resolved = resolve_patches(weights, n_t, iv.patches)?;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut x = Matrix::zeros(n_t, d);
    for (t, &tok) in tokens.iter().enumerate() {
        let row = x.row_mut(t);
        row.copy_from_slice(weights.token_embedding.row(tok as usize));
        linalg::add_assign(row, weights.positional_embedding.row(t));
    }

    let mut cache = ActivationCache {
        tokens: tokens.to_vec(),
        n_layers: c.n_layers,
        n_heads: c.n_heads,
        d_model: d,
        d_head: dh,
        resid_pre: Vec::with_capacity(c.n_layers),
        resid_mid: Vec::with_capacity(c.n_layers),
        resid_post: Vec::with_capacity(c.n_layers),
        head_out: Vec::with_capacity(c.n_layers),
        attn_bias: Vec::with_capacity(c.n_layers),
        mlp_out: Vec::with_capacity(c.n_layers),
        attn_pattern: Vec::with_capacity(c.n_layers),
        value_vectors: Vec::with_capacity(c.n_layers),
        final_logits: Matrix::zeros(0, 0),
        logits_start: 0,
    };

    for (l, lw) in weights.layers.iter().enumerate() {
        apply_patches(&resolved, l, Site::ResidPre, &mut x);
        let r_pre = x;

        let normed = attention_input(weights, l, &r_pre);
        let mut qkv = normed.matmul(&lw.qkv_w);
        for t in 0..n_t {
            linalg::add_assign(qkv.row_mut(t), &lw.qkv_b);
        }

        let mut heads = Vec::with_capacity(c.n_heads);
        let mut patterns = Vec::with_capacity(c.n_heads);
        let mut values = Vec::with_capacity(c.n_heads);
        for h in 0..c.n_heads {
            let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
            let mut pattern = Matrix::zeros(n_t, n_t);
            if iv.masked_heads.contains(&(l, h)) {
                for t in 0..n_t {
                    pattern.data[t * n_t + t] = 1.0;
                }
            } else {
                for t in 0..n_t {
                    let q = &qkv.row(t)[qo..qo + dh];
                    let row = &mut pattern.row_mut(t)[..=t];
                    for (s, score) in row.iter_mut().enumerate() {
                        let k = &qkv.row(s)[ko..ko + dh];
                        *score = (linalg::dot(q, k) * scale) as f32;
                    }
                    linalg::softmax_in_place(row);
                }
            }
            let mut v_h = Matrix::zeros(n_t, dh);
            for t in 0..n_t {
                v_h.row_mut(t).copy_from_slice(&qkv.row(t)[vo..vo + dh]);
            }
            let z = pattern.matmul(&v_h);
            let mut out = Matrix::zeros(n_t, d);
            gemm(
                &z.data,
                n_t,
                dh,
                dh,
                &lw.out_w.data[h * dh * d..],
                d,
                d,
                &mut out.data,
            );
            apply_patches(&resolved, l, Site::HeadOut(h), &mut out);
            heads.push(out);
            patterns.push(pattern);
            values.push(v_h);
        }

        let mut r_mid = r_pre.clone();
        for t in 0..n_t {
            let row = r_mid.row_mut(t);
            for head in &heads {
                linalg::add_assign(row, head.row(t));
            }
            linalg::add_assign(row, &lw.out_b);
        }
        apply_patches(&resolved, l, Site::ResidMid, &mut r_mid);

        let mut m = mlp_rows(weights, l, &r_mid);
        if let Some(rep) = iv.mlp_replacement {
            let head_rows: Vec<&[f32]> = heads.iter().map(|h| h.row(last)).collect();
            if let Some(v) = rep.replace(l, &head_rows, r_pre.row(last)) {
                if v.len() != d {
                    return Err(Error::Dimension {
                        expected: d,
                        actual: v.len(),
                    });
                }
                m.row_mut(last).copy_from_slice(&v);
            }
        }
        apply_patches(&resolved, l, Site::MlpOut, &mut m);

        let mut r_post = r_mid.clone();
        for t in 0..n_t {
            linalg::add_assign(r_post.row_mut(t), m.row(t));
        }
        for (_, v) in iv.resid_post_subtract.iter().filter(|(sl, _)| *sl == l) {
            linalg::sub_assign(r_post.row_mut(last), v);
        }
        apply_patches(&resolved, l, Site::ResidPost, &mut r_post);

        x = r_post.clone();
        cache.resid_pre.push(r_pre);
        cache.resid_mid.push(r_mid);
        cache.resid_post.push(r_post);
        cache.head_out.push(heads);
        cache.attn_bias.push(lw.out_b.clone());
        cache.mlp_out.push(m);
        cache.attn_pattern.push(patterns);
        cache.value_vectors.push(values);
    }

    let start = match iv.logits {
        LogitsScope::AllPositions => 0,
        LogitsScope::LastPosition => last,
    };
    let tail = Matrix::from_vec(n_t - start, d, x.data[start * d..].to_vec());
    cache.final_logits = unembed_rows(weights, &tail);
    cache.logits_start = start;
    Ok(cache)
}
