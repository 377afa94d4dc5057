//! Early decoding of residual nodes and head-level readouts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instrument::clean_run;
use crate::linalg::{self, Matrix};
use crate::model::{self, ActivationCache, Weights};
use crate::tasks::PromptInstance;

/// Softmax over the vocabulary of `Unembed(v)`.
pub fn probabilities(weights: &Weights, v: &[f32]) -> Vec<f64> {
    linalg::softmax64(&model::unembed(weights, v))
}

pub fn node_probability(weights: &Weights, v: &[f32], token: u32) -> Result<f64> {
    let p = probabilities(weights, v);
    p.get(token as usize)
        .copied()
        .ok_or(Error::TokenOutOfRange {
            id: token,
            vocab: p.len(),
        })
}

/// The `k` highest logits, descending; ties go to the lower token id.
pub fn topk_from_logits(logits: &[f32], k: usize) -> Vec<(u32, f32)> {
    let mut idx: Vec<u32> = (0..logits.len() as u32).collect();
    let cmp = |a: &u32, b: &u32| {
        logits[*b as usize]
            .total_cmp(&logits[*a as usize])
            .then(a.cmp(b))
    };
    let k = k.min(idx.len());
    if k < idx.len() && k > 0 {
        idx.select_nth_unstable_by(k - 1, cmp);
    }
    idx.truncate(k);
    idx.sort_by(cmp);
    idx.into_iter().map(|i| (i, logits[i as usize])).collect()
}

pub fn decode_topk(weights: &Weights, v: &[f32], k: usize) -> Vec<(u32, f32)> {
    topk_from_logits(&model::unembed(weights, v), k)
}

/// Attention scaled by value-vector norms, rows renormalised.
pub fn value_weighted_pattern(
    cache: &ActivationCache,
    layer: usize,
    head: usize,
) -> Result<Matrix> {
    if layer >= cache.n_layers || head >= cache.n_heads {
        return Err(Error::InvalidNode(format!(
            "head L{layer}H{head} out of range"
        )));
    }
    let pattern = &cache.attn_pattern[layer][head];
    let norms: Vec<f64> = (0..cache.seq_len())
        .map(|s| linalg::norm(cache.value_vectors[layer][head].row(s)))
        .collect();
    let mut out = Matrix::zeros(pattern.rows, pattern.cols);
    for t in 0..pattern.rows {
        let weighted: Vec<f64> = pattern
            .row(t)
            .iter()
            .zip(&norms)
            .map(|(&p, n)| p as f64 * n)
            .collect();
        let z: f64 = weighted.iter().sum();
        for (o, w) in out.row_mut(t).iter_mut().zip(&weighted) {
            *o = if z > 0.0 { (w / z) as f32 } else { 0.0 };
        }
    }
    Ok(out)
}

/// Sites decoded per layer in the dynamics report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LensSite {
    ResidPre,
    /// Σ_h a^{l,h}, the attention heads' summed output.
    Attn,
    ResidMid,
    Mlp,
    ResidPost,
}

impl LensSite {
    pub const ALL: [LensSite; 5] = [
        LensSite::ResidPre,
        LensSite::Attn,
        LensSite::ResidMid,
        LensSite::Mlp,
        LensSite::ResidPost,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LensSite::ResidPre => "resid_pre",
            LensSite::Attn => "attn",
            LensSite::ResidMid => "resid_mid",
            LensSite::Mlp => "mlp_out",
            LensSite::ResidPost => "resid_post",
        }
    }

    fn vector(self, cache: &ActivationCache, layer: usize, t: usize) -> Vec<f32> {
        match self {
            LensSite::ResidPre => cache.resid_pre[layer].row(t).to_vec(),
            LensSite::Attn => cache.heads_sum(layer, t),
            LensSite::ResidMid => cache.resid_mid[layer].row(t).to_vec(),
            LensSite::Mlp => cache.mlp_out[layer].row(t).to_vec(),
            LensSite::ResidPost => cache.resid_post[layer].row(t).to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsRow {
    pub layer: usize,
    pub site: LensSite,
    pub prob_x_mean: f64,
    pub prob_x_var: f64,
    pub prob_y_mean: f64,
    pub prob_y_var: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsReport {
    pub n_layers: usize,
    pub n_prompts: usize,
    pub rows: Vec<DynamicsRow>,
    /// Mean probabilities read from the model's own final logits.
    pub output_prob_x: f64,
    pub output_prob_y: f64,
}

impl DynamicsReport {
    pub fn row(&self, layer: usize, site: LensSite) -> Option<&DynamicsRow> {
        self.rows
            .iter()
            .find(|r| r.layer == layer && r.site == site)
    }

    /// `(prob_x_mean, prob_y_mean)` per layer at `site`.
    pub fn series(&self, site: LensSite) -> Vec<(f64, f64)> {
        (0..self.n_layers)
            .filter_map(|l| self.row(l, site).map(|r| (r.prob_x_mean, r.prob_y_mean)))
            .collect()
    }
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// Decode every site of every layer at the final position and average the
/// probabilities of X and Y over the prompts.
pub fn layer_dynamics(weights: &Weights, prompts: &[PromptInstance]) -> Result<DynamicsReport> {
    if prompts.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let n_layers = weights.config.n_layers;
    let sites = LensSite::ALL.len();
    // per prompt: [layer * sites + site] -> (px, py), plus final output
    let per_prompt = prompts
        .par_iter()
        .map(|p| {
            let cache = clean_run(weights, &p.tokens)?;
            let t = p.final_position();
            let mut rows = Matrix::zeros(n_layers * sites, weights.config.d_model);
            for l in 0..n_layers {
                for (s, site) in LensSite::ALL.iter().enumerate() {
                    rows.row_mut(l * sites + s)
                        .copy_from_slice(&site.vector(&cache, l, t));
                }
            }
            let logits = model::unembed_rows(weights, &rows);
            let read = |row: &[f32]| {
                let probs = linalg::softmax64(row);
                (probs[p.x_token as usize], probs[p.y_token as usize])
            };
            let lens: Vec<(f64, f64)> = (0..logits.rows).map(|r| read(logits.row(r))).collect();
            Ok((lens, read(cache.last_logits())))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(n_layers * sites);
    for l in 0..n_layers {
        for (s, &site) in LensSite::ALL.iter().enumerate() {
            let xs: Vec<f64> = per_prompt.iter().map(|(v, _)| v[l * sites + s].0).collect();
            let ys: Vec<f64> = per_prompt.iter().map(|(v, _)| v[l * sites + s].1).collect();
            let (prob_x_mean, prob_x_var) = mean_var(&xs);
            let (prob_y_mean, prob_y_var) = mean_var(&ys);
            rows.push(DynamicsRow {
                layer: l,
                site,
                prob_x_mean,
                prob_x_var,
                prob_y_mean,
                prob_y_var,
            });
        }
    }
    let n = prompts.len() as f64;
    Ok(DynamicsReport {
        n_layers,
        n_prompts: prompts.len(),
        rows,
        output_prob_x: per_prompt.iter().map(|(_, o)| o.0).sum::<f64>() / n,
        output_prob_y: per_prompt.iter().map(|(_, o)| o.1).sum::<f64>() / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoverScore {
    pub layer: usize,
    pub head: usize,
    /// `None` when either series is constant.
    pub pearson_r: Option<f64>,
    /// `(attention from final position to X, ⟨a^{l,h}_{-1}, W_U[X]⟩)`
    pub points: Vec<(f64, f64)>,
}

pub fn mover_score(
    weights: &Weights,
    prompts: &[PromptInstance],
    layer: usize,
    head: usize,
) -> Result<MoverScore> {
    Ok(mover_scores(weights, prompts, &[(layer, head)])?.remove(0))
}

/// Mover scores for several heads sharing one pass over the prompts.
pub fn mover_scores(
    weights: &Weights,
    prompts: &[PromptInstance],
    heads: &[(usize, usize)],
) -> Result<Vec<MoverScore>> {
    if prompts.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let c = weights.config;
    if let Some(&(l, h)) = heads
        .iter()
        .find(|(l, h)| *l >= c.n_layers || *h >= c.n_heads)
    {
        return Err(Error::InvalidNode(format!("head L{l}H{h} out of range")));
    }
    let w_u = weights.unembedding();
    let per_prompt = prompts
        .par_iter()
        .map(|p| {
            let cache = clean_run(weights, &p.tokens)?;
            let (t, x) = (p.final_position(), p.x_position());
            Ok(heads
                .iter()
                .map(|&(l, h)| {
                    let attn = cache.attn_pattern[l][h].get(t, x) as f64;
                    let proj =
                        linalg::dot(cache.head_out[l][h].row(t), w_u.row(p.x_token as usize));
                    (attn, proj)
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(heads
        .iter()
        .enumerate()
        .map(|(i, &(layer, head))| {
            let points: Vec<(f64, f64)> = per_prompt.iter().map(|v| v[i]).collect();
            let (xs, ys): (Vec<f64>, Vec<f64>) = points.iter().copied().unzip();
            MoverScore {
                layer,
                head,
                pearson_r: linalg::pearson(&xs, &ys),
                points,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OvProbeEntry {
    pub x: String,
    pub y: String,
    pub y_token: u32,
    pub n_prompts: usize,
    pub top: Vec<(u32, f32)>,
    pub hit: bool,
}

/// For each X, average the head's OV output of the LayerNormed residual at
/// the X position over that X's prompts, then decode the top `k` tokens.
pub fn ov_probe(
    weights: &Weights,
    prompts: &[PromptInstance],
    layer: usize,
    head: usize,
    k: usize,
) -> Result<Vec<OvProbeEntry>> {
    if prompts.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let outputs = prompts
        .par_iter()
        .map(|p| {
            let cache = clean_run(weights, &p.tokens)?;
            let r = cache.resid_pre[layer].row(p.x_position());
            let norm = &weights.layers[layer].ln1;
            let normed = linalg::layer_norm(r, &norm.gamma, &norm.beta, weights.config.ln_epsilon);
            model::ov_apply(weights, layer, head, &normed)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut order: Vec<usize> = Vec::new();
    for p in prompts {
        if !order.contains(&p.pair_index) {
            order.push(p.pair_index);
        }
    }
    Ok(order
        .into_iter()
        .map(|pair| {
            let members: Vec<usize> = (0..prompts.len())
                .filter(|&i| prompts[i].pair_index == pair)
                .collect();
            let first = &prompts[members[0]];
            let mean =
                linalg::mean_of(members.iter().map(|&i| outputs[i].as_slice())).expect("nonempty");
            let top = decode_topk(weights, &mean, k);
            OvProbeEntry {
                x: first.x.clone(),
                y: first.y.clone(),
                y_token: first.y_token,
                n_prompts: members.len(),
                hit: top.iter().any(|&(t, _)| t == first.y_token),
                top,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topk_orders_and_breaks_ties() {
        let logits = [0.5, 2.0, 2.0, -1.0, 3.0];
        assert_eq!(
            topk_from_logits(&logits, 3),
            vec![(4, 3.0), (1, 2.0), (2, 2.0)]
        );
        let all: Vec<u32> = topk_from_logits(&logits, 5).iter().map(|x| x.0).collect();
        assert_eq!(all, vec![4, 1, 2, 0, 3]);
        assert!(topk_from_logits(&logits, 0).is_empty());
    }

    #[test]
    fn mean_var_is_population() {
        assert_eq!(mean_var(&[1.0, 3.0]), (2.0, 1.0));
    }
}
