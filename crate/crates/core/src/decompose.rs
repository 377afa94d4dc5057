//! Linear decomposition of MLP outputs:
//! `m̃ = b + Σ_h w_h a_h + w_r r_pre`, fitted per layer at the final position.
//!
//! Gradient descent runs on sufficient statistics (feature Gram matrix, feature
//! sums and target cross terms), which gives the same iterates as evaluating
//! the full-batch MSE gradient over the samples but costs O(K² + K·d) per step.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instrument::{centered_from_logits, clean_run};
use crate::linalg;
use crate::model::{self, Interventions, LogitsScope, MlpReplacement, Weights};
use crate::tasks::PromptInstance;

/// One prompt's inputs and target for a layer, all at the final position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSample {
    pub prompt_id: usize,
    /// `a^{l,h}` for every head.
    pub heads: Vec<Vec<f32>>,
    pub r_pre: Vec<f32>,
    pub m: Vec<f32>,
}

impl LayerSample {
    fn feature(&self, k: usize) -> &[f32] {
        self.heads.get(k).map_or(&self.r_pre, Vec::as_slice)
    }

    fn n_features(&self) -> usize {
        self.heads.len() + 1
    }
}

/// Samples for `layer`, one clean run per prompt.
pub fn collect_samples(
    weights: &Weights,
    prompts: &[PromptInstance],
    layer: usize,
) -> Result<Vec<LayerSample>> {
    if layer >= weights.config.n_layers {
        return Err(Error::InvalidNode(format!("layer {layer} out of range")));
    }
    Ok(collect_all_layers(weights, prompts)?.swap_remove(layer))
}

/// `[layer][prompt]` samples from a single pass over the prompts.
pub fn collect_all_layers(
    weights: &Weights,
    prompts: &[PromptInstance],
) -> Result<Vec<Vec<LayerSample>>> {
    if prompts.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let per_prompt = prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let cache = clean_run(weights, &p.tokens)?;
            let t = p.final_position();
            Ok((0..cache.n_layers)
                .map(|l| LayerSample {
                    prompt_id: i,
                    heads: cache.head_out[l]
                        .iter()
                        .map(|h| h.row(t).to_vec())
                        .collect(),
                    r_pre: cache.resid_pre[l].row(t).to_vec(),
                    m: cache.mlp_out[l].row(t).to_vec(),
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let n_layers = weights.config.n_layers;
    let mut out: Vec<Vec<LayerSample>> = (0..n_layers)
        .map(|_| Vec::with_capacity(prompts.len()))
        .collect();
    for layers in per_prompt {
        for (l, s) in layers.into_iter().enumerate() {
            out[l].push(s);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitHyper {
    pub lr: f64,
    pub steps: usize,
    pub momentum: f64,
    pub folds: usize,
    pub seed: u64,
}

impl Default for FitHyper {
    fn default() -> Self {
        Self {
            lr: 0.005,
            steps: 60_000,
            momentum: 0.99,
            folds: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldLoss {
    pub train_mse: f64,
    pub val_mse: f64,
}

mod base64_f32 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f32], s: S) -> Result<S::Ok, S::Error> {
        let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f32>, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = STANDARD.decode(text).map_err(serde::de::Error::custom)?;
        if bytes.len() % 4 != 0 {
            return Err(serde::de::Error::custom(
                "f32 payload length not a multiple of 4",
            ));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionSolution {
    pub layer: usize,
    pub w_head: Vec<f64>,
    pub w_resid: f64,
    /// `b^l`, little-endian f32 in base64 when serialised.
    #[serde(rename = "b", with = "base64_f32")]
    pub intercept: Vec<f32>,
    pub fold_losses: Vec<FoldLoss>,
    pub train_mse: f64,
    pub ape: f64,
    /// `(step, loss)` every [`TRACE_EVERY`] steps of the final refit.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_trace: Vec<(usize, f64)>,
}

pub const TRACE_EVERY: usize = 100;

impl RegressionSolution {
    /// `m̃` from head outputs and incoming residual.
    pub fn reconstruct_parts(&self, heads: &[&[f32]], r_pre: &[f32]) -> Vec<f32> {
        let mut out = self.intercept.clone();
        for (w, a) in self.w_head.iter().zip(heads) {
            linalg::axpy(&mut out, *w as f32, a);
        }
        linalg::axpy(&mut out, self.w_resid as f32, r_pre);
        out
    }

    pub fn coefficients(&self) -> Vec<f64> {
        let mut c = self.w_head.clone();
        c.push(self.w_resid);
        c
    }
}

pub fn reconstruct(solution: &RegressionSolution, sample: &LayerSample) -> Vec<f32> {
    let heads: Vec<&[f32]> = sample.heads.iter().map(Vec::as_slice).collect();
    solution.reconstruct_parts(&heads, &sample.r_pre)
}

/// Mean over samples of `√(mean_i (m̃_i − m_i)²) / ‖m‖`, in percent.
pub fn ape(solution: &RegressionSolution, samples: &[LayerSample]) -> Result<f64> {
    ape_of(&solution.coefficients(), &solution.intercept, samples)
}

fn predict(coef: &[f64], b: &[f32], s: &LayerSample) -> Vec<f32> {
    let mut out = b.to_vec();
    for (k, w) in coef.iter().enumerate() {
        linalg::axpy(&mut out, *w as f32, s.feature(k));
    }
    out
}

fn ape_of(coef: &[f64], b: &[f32], samples: &[LayerSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("samples"));
    }
    let mut total = 0.0;
    for s in samples {
        let norm = linalg::norm(&s.m);
        if norm == 0.0 {
            return Err(Error::Degenerate(format!(
                "sample {} has a zero MLP output",
                s.prompt_id
            )));
        }
        let err = linalg::sub(&predict(coef, b, s), &s.m);
        let rmse = (linalg::dot(&err, &err) / err.len() as f64).sqrt();
        total += rmse / norm;
    }
    Ok(100.0 * total / samples.len() as f64)
}

/// Mean over samples and coordinates of the squared error.
fn mse(coef: &[f64], b: &[f32], samples: &[&LayerSample]) -> f64 {
    let d = b.len() as f64;
    samples
        .iter()
        .map(|s| {
            let err = linalg::sub(&predict(coef, b, s), &s.m);
            linalg::dot(&err, &err) / d
        })
        .sum::<f64>()
        / samples.len() as f64
}

struct Stats {
    n: f64,
    d: usize,
    k: usize,
    /// `G_jk = Σ_n ⟨x_nj, x_nk⟩`, row-major `k × k`
    gram: Vec<f64>,
    /// `S_k = Σ_n x_nk`
    sums: Vec<Vec<f64>>,
    /// `c_k = Σ_n ⟨m_n, x_nk⟩`
    cross: Vec<f64>,
    /// `Σ_n m_n`
    m_sum: Vec<f64>,
    /// `Σ_n ‖m_n‖²`
    m_sq: f64,
}

fn check_samples(samples: &[&LayerSample]) -> Result<(usize, usize)> {
    let first = samples.first().ok_or(Error::Empty("samples"))?;
    let (k, d) = (first.n_features(), first.m.len());
    for s in samples {
        if s.n_features() != k {
            return Err(Error::Dimension {
                expected: k,
                actual: s.n_features(),
            });
        }
        for v in s.heads.iter().chain([&s.r_pre, &s.m]) {
            if v.len() != d {
                return Err(Error::Dimension {
                    expected: d,
                    actual: v.len(),
                });
            }
        }
    }
    Ok((k, d))
}

impl Stats {
    fn new(samples: &[&LayerSample]) -> Result<Self> {
        let (k, d) = check_samples(samples)?;
        let mut gram = vec![0.0; k * k];
        let mut sums = vec![vec![0.0; d]; k];
        let mut cross = vec![0.0; k];
        let mut m_sum = vec![0.0; d];
        let mut m_sq = 0.0;
        for s in samples {
            for j in 0..k {
                let xj = s.feature(j);
                for i in j..k {
                    let g = linalg::dot(xj, s.feature(i));
                    gram[j * k + i] += g;
                    if i != j {
                        gram[i * k + j] += g;
                    }
                }
                cross[j] += linalg::dot(&s.m, xj);
                for (acc, &x) in sums[j].iter_mut().zip(xj) {
                    *acc += x as f64;
                }
            }
            for (acc, &x) in m_sum.iter_mut().zip(&s.m) {
                *acc += x as f64;
            }
            m_sq += linalg::dot(&s.m, &s.m);
        }
        Ok(Self {
            n: samples.len() as f64,
            d,
            k,
            gram,
            sums,
            cross,
            m_sum,
            m_sq,
        })
    }
}

fn dot64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Full-batch gradient descent with heavy-ball momentum
/// (`v ← μv + g`, `θ ← θ − lr·v`) from zero.
fn descend(
    st: &Stats,
    hyper: &FitHyper,
    layer: usize,
    trace: bool,
) -> Result<(Vec<f64>, Vec<f64>, Vec<(usize, f64)>)> {
    let (k, d, n) = (st.k, st.d, st.n);
    let scale = 2.0 / (n * d as f64);
    let mut w = vec![0.0; k];
    let mut b = vec![0.0; d];
    let mut vw = vec![0.0; k];
    let mut vb = vec![0.0; d];
    let mut sb = vec![0.0; k];
    let mut gb = vec![0.0; d];
    let mut losses = Vec::new();
    for step in 0..hyper.steps {
        for (j, s) in sb.iter_mut().enumerate() {
            *s = dot64(&b, &st.sums[j]);
        }
        let gw_raw: Vec<f64> = (0..k)
            .map(|j| sb[j] + dot64(&w, &st.gram[j * k..(j + 1) * k]) - st.cross[j])
            .collect();
        let w_gram_w: f64 = (0..k)
            .map(|j| w[j] * dot64(&w, &st.gram[j * k..(j + 1) * k]))
            .sum();
        let loss = (n * dot64(&b, &b) + w_gram_w + st.m_sq + 2.0 * dot64(&w, &sb)
            - 2.0 * dot64(&b, &st.m_sum)
            - 2.0 * dot64(&w, &st.cross))
            / (n * d as f64);
        if !loss.is_finite() {
            return Err(Error::Diverged { layer, step });
        }
        if trace && step % TRACE_EVERY == 0 {
            losses.push((step, loss));
        }

        for (i, g) in gb.iter_mut().enumerate() {
            *g = n * b[i] - st.m_sum[i];
        }
        for j in 0..k {
            for (g, s) in gb.iter_mut().zip(&st.sums[j]) {
                *g += w[j] * s;
            }
        }
        for j in 0..k {
            vw[j] = hyper.momentum * vw[j] + scale * gw_raw[j];
            w[j] -= hyper.lr * vw[j];
        }
        for i in 0..d {
            vb[i] = hyper.momentum * vb[i] + scale * gb[i];
            b[i] -= hyper.lr * vb[i];
        }
    }
    if w.iter().chain(&b).any(|v| !v.is_finite()) {
        return Err(Error::Diverged {
            layer,
            step: hyper.steps,
        });
    }
    Ok((w, b, losses))
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Fit one layer with k-fold cross-validation, then refit on every sample.
pub fn fit_layer(
    layer: usize,
    samples: &[LayerSample],
    hyper: &FitHyper,
) -> Result<RegressionSolution> {
    if hyper.folds < 2 || samples.len() < hyper.folds {
        return Err(Error::Degenerate(format!(
            "{} samples cannot be split into {} folds",
            samples.len(),
            hyper.folds
        )));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(hyper.seed));
    let base = samples.len() / hyper.folds;
    let extra = samples.len() % hyper.folds;
    let mut fold_losses = Vec::with_capacity(hyper.folds);
    let mut start = 0;
    for f in 0..hyper.folds {
        let len = base + usize::from(f < extra);
        let val_idx = &order[start..start + len];
        let train: Vec<&LayerSample> = order[..start]
            .iter()
            .chain(&order[start + len..])
            .map(|&i| &samples[i])
            .collect();
        let val: Vec<&LayerSample> = val_idx.iter().map(|&i| &samples[i]).collect();
        let (w, b, _) = descend(&Stats::new(&train)?, hyper, layer, false)?;
        let b = to_f32(&b);
        fold_losses.push(FoldLoss {
            train_mse: mse(&w, &b, &train),
            val_mse: mse(&w, &b, &val),
        });
        start += len;
    }

    let all: Vec<&LayerSample> = samples.iter().collect();
    let (w, b, loss_trace) = descend(&Stats::new(&all)?, hyper, layer, true)?;
    let b = to_f32(&b);
    let k = w.len();
    Ok(RegressionSolution {
        layer,
        w_head: w[..k - 1].to_vec(),
        w_resid: w[k - 1],
        train_mse: mse(&w, &b, &all),
        ape: ape_of(&w, &b, samples)?,
        intercept: b,
        fold_losses,
        loss_trace,
    })
}

/// Fit every layer in parallel; `samples[l]` feeds layer `l`.
pub fn fit_layers(
    samples: &[Vec<LayerSample>],
    hyper: &FitHyper,
) -> Result<Vec<RegressionSolution>> {
    samples
        .par_iter()
        .enumerate()
        .map(|(l, s)| fit_layer(l, s, hyper))
        .collect()
}

/// Exact least squares via centred normal equations.
pub fn closed_form(layer: usize, samples: &[LayerSample]) -> Result<RegressionSolution> {
    let all: Vec<&LayerSample> = samples.iter().collect();
    let st = Stats::new(&all)?;
    let (k, n) = (st.k, st.n);
    let a = nalgebra::DMatrix::from_fn(k, k, |i, j| {
        st.gram[i * k + j] - dot64(&st.sums[i], &st.sums[j]) / n
    });
    let rhs = nalgebra::DVector::from_fn(k, |i, _| st.cross[i] - dot64(&st.sums[i], &st.m_sum) / n);
    let w = a
        .lu()
        .solve(&rhs)
        .filter(|w| w.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Degenerate(format!("layer {layer}: singular normal equations")))?;
    let w: Vec<f64> = w.iter().copied().collect();
    let b: Vec<f64> = (0..st.d)
        .map(|i| (st.m_sum[i] - (0..k).map(|j| w[j] * st.sums[j][i]).sum::<f64>()) / n)
        .collect();
    let b = to_f32(&b);
    Ok(RegressionSolution {
        layer,
        w_head: w[..k - 1].to_vec(),
        w_resid: w[k - 1],
        train_mse: mse(&w, &b, &all),
        ape: ape_of(&w, &b, samples)?,
        intercept: b,
        fold_losses: Vec::new(),
        loss_trace: Vec::new(),
    })
}

struct Substitution<'a>(&'a [RegressionSolution]);

impl MlpReplacement for Substitution<'_> {
    fn replace(&self, layer: usize, heads: &[&[f32]], resid_pre: &[f32]) -> Option<Vec<f32>> {
        Some(self.0[layer].reconstruct_parts(heads, resid_pre))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub n_prompts: usize,
    /// Mean KL(original ‖ substituted) of final-position distributions.
    pub kl: f64,
    pub mean_logit_y_original: f64,
    pub mean_logit_y_substituted: f64,
    pub mean_prob_y_original: f64,
    pub mean_prob_y_substituted: f64,
}

fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = logits
        .iter()
        .map(|&l| (l as f64 - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    logits.iter().map(|&l| l as f64 - lse).collect()
}

/// KL(p ‖ q) from logits.
pub fn kl_divergence(p_logits: &[f32], q_logits: &[f32]) -> f64 {
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum()
}

/// Replace every MLP output at the final position with its reconstruction
/// (computed from the substituted run's own head outputs and residual) and
/// compare the output distributions.
pub fn fidelity_check(
    weights: &Weights,
    prompts: &[PromptInstance],
    solutions: &[RegressionSolution],
) -> Result<FidelityReport> {
    let n_layers = weights.config.n_layers;
    if solutions.len() != n_layers || solutions.iter().enumerate().any(|(l, s)| s.layer != l) {
        return Err(Error::Degenerate(format!(
            "need one solution per layer, 0..{n_layers}"
        )));
    }
    if prompts.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let sub = Substitution(solutions);
    let rows = prompts
        .par_iter()
        .map(|p| {
            let clean = clean_run(weights, &p.tokens)?;
            let swapped = model::run(
                weights,
                &p.tokens,
                &Interventions {
                    mlp_replacement: Some(&sub),
                    logits: LogitsScope::LastPosition,
                    ..Default::default()
                },
            )?;
            let (a, b) = (clean.last_logits(), swapped.last_logits());
            let y = p.y_token as usize;
            Ok([
                kl_divergence(a, b),
                centered_from_logits(a, p.y_token)?,
                centered_from_logits(b, p.y_token)?,
                log_softmax(a)[y].exp(),
                log_softmax(b)[y].exp(),
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    let mean = |i: usize| rows.iter().map(|r| r[i]).sum::<f64>() / n;
    Ok(FidelityReport {
        n_prompts: rows.len(),
        kl: mean(0),
        mean_logit_y_original: mean(1),
        mean_logit_y_substituted: mean(2),
        mean_prob_y_original: mean(3),
        mean_prob_y_substituted: mean(4),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: usize, heads: Vec<Vec<f32>>, r_pre: Vec<f32>, m: Vec<f32>) -> LayerSample {
        LayerSample {
            prompt_id: id,
            heads,
            r_pre,
            m,
        }
    }

    #[test]
    fn zero_weights_reconstruct_the_intercept() {
        let sol = RegressionSolution {
            layer: 0,
            w_head: vec![0.0; 2],
            w_resid: 0.0,
            intercept: vec![1.0, -2.0],
            fold_losses: vec![],
            train_mse: 0.0,
            ape: 0.0,
            loss_trace: vec![],
        };
        let s = sample(
            0,
            vec![vec![3.0, 4.0], vec![5.0, 6.0]],
            vec![7.0, 8.0],
            vec![1.0, -2.0],
        );
        assert_eq!(reconstruct(&sol, &s), vec![1.0, -2.0]);
        assert_eq!(ape(&sol, &[s]).unwrap(), 0.0);
    }

    #[test]
    fn ape_rejects_zero_targets() {
        let sol = closed_form_fixture();
        let s = sample(0, vec![vec![1.0, 0.0]], vec![0.0, 1.0], vec![0.0, 0.0]);
        assert!(matches!(ape(&sol, &[s]), Err(Error::Degenerate(_))));
    }

    fn closed_form_fixture() -> RegressionSolution {
        RegressionSolution {
            layer: 0,
            w_head: vec![1.0],
            w_resid: 1.0,
            intercept: vec![0.0, 0.0],
            fold_losses: vec![],
            train_mse: 0.0,
            ape: 0.0,
            loss_trace: vec![],
        }
    }

    #[test]
    fn solution_json_round_trips() {
        let mut sol = closed_form_fixture();
        sol.intercept = vec![0.25, -1.5e-3, 7.0];
        let text = serde_json::to_string(&sol).unwrap();
        assert!(text.contains("\"b\":\""));
        let back: RegressionSolution = serde_json::from_str(&text).unwrap();
        assert_eq!(back, sol);
    }

    #[test]
    fn kl_of_identical_logits_is_zero() {
        let l = [1.0, 2.0, -0.5];
        assert!(kl_divergence(&l, &l).abs() < 1e-12);
        let shifted = [4.0, 5.0, 2.5];
        assert!(kl_divergence(&l, &shifted).abs() < 1e-12);
        assert!(kl_divergence(&l, &[0.0, 0.0, 0.0]) > 0.0);
    }
}
