//! Interventions on the residual stream: mean replacement, activation and
//! path patching, the centered-logit metric and suppression runs.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::model::{
    self, check_node_shape, head_at, resolve_position, ActivationCache, Interventions, LogitsScope,
    NodeId, PatchSpec, Site, Weights,
};
use crate::tasks::PromptInstance;

/// Below this magnitude an original centered logit is too small to divide by.
pub const EPS_GUARD: f64 = 1e-3;

/// A position named by its role in a prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Final,
    /// Last token of the query's X span.
    XEnd,
    /// Absolute index; negative counts from the end.
    Absolute(i64),
}

impl Role {
    pub fn resolve(self, prompt: &PromptInstance) -> i64 {
        match self {
            Role::Final => prompt.final_position() as i64,
            Role::XEnd => prompt.x_position() as i64,
            Role::Absolute(t) => t,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Final => write!(f, "final"),
            Role::XEnd => write!(f, "x"),
            Role::Absolute(t) => write!(f, "{t}"),
        }
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final" | "-1" => Ok(Role::Final),
            "x" | "X" => Ok(Role::XEnd),
            _ => s
                .parse()
                .map(Role::Absolute)
                .map_err(|_| Error::InvalidNode(format!("bad position {s:?}"))),
        }
    }
}

/// A node whose position is resolved per prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RoleNode {
    pub layer: usize,
    pub site: Site,
    pub role: Role,
}

impl RoleNode {
    pub fn new(layer: usize, site: Site, role: Role) -> Self {
        Self { layer, site, role }
    }

    pub fn resolve(&self, prompt: &PromptInstance) -> NodeId {
        NodeId::new(self.layer, self.site, self.role.resolve(prompt))
    }
}

impl fmt::Display for RoleNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.site, self.layer, self.role)
    }
}

/// Parses `site:layer:position`, e.g. `resid_post:11:-1` or `head_out.8:9:x`.
impl FromStr for RoleNode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidNode(format!("cannot parse node {s:?}"));
        let mut parts = s.splitn(3, ':');
        let site = parts.next().ok_or_else(bad)?;
        let layer = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let role = parts.next().map_or(Ok(Role::Final), str::parse)?;
        let site = match site {
            "resid_pre" => Site::ResidPre,
            "resid_mid" => Site::ResidMid,
            "resid_post" => Site::ResidPost,
            "mlp_out" => Site::MlpOut,
            other => {
                let h = other.strip_prefix("head_out.").ok_or_else(bad)?;
                Site::HeadOut(h.parse().map_err(|_| bad())?)
            }
        };
        Ok(Self { layer, site, role })
    }
}

/// Clean run keeping logits for the final position only.
pub fn clean_run(weights: &Weights, tokens: &[u32]) -> Result<ActivationCache> {
    model::run(
        weights,
        tokens,
        &Interventions {
            logits: LogitsScope::LastPosition,
            ..Default::default()
        },
    )
}

/// Mean of `node` over `prompts`, one clean run per prompt.
pub fn mean_node_activation(
    weights: &Weights,
    node: RoleNode,
    prompts: &[PromptInstance],
) -> Result<Vec<f32>> {
    if prompts.is_empty() {
        return Err(Error::Empty("prompt list"));
    }
    let vectors = prompts
        .par_iter()
        .map(|p| {
            let cache = clean_run(weights, &p.tokens)?;
            Ok(cache.node(&node.resolve(p))?.to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(linalg::mean_of(vectors.iter().map(Vec::as_slice)).expect("nonempty"))
}

/// `logits[token] − mean(logits)`.
pub fn centered_from_logits(logits: &[f32], token: u32) -> Result<f64> {
    let x = *logits.get(token as usize).ok_or(Error::TokenOutOfRange {
        id: token,
        vocab: logits.len(),
    })?;
    let mean = logits.iter().map(|&l| l as f64).sum::<f64>() / logits.len() as f64;
    Ok(x as f64 - mean)
}

/// π(token, v): centered logit of `token` after early decoding of `v`.
pub fn centered_logit(weights: &Weights, v: &[f32], token: u32) -> Result<f64> {
    centered_from_logits(&model::unembed(weights, v), token)
}

/// π without the full vocabulary product: `(W_U[y] − mean_v W_U[v]) · LN_f(v)`.
pub struct CenteredReadout<'a> {
    weights: &'a Weights,
    mean_row: Vec<f32>,
}

impl<'a> CenteredReadout<'a> {
    pub fn new(weights: &'a Weights) -> Self {
        let w_u = weights.unembedding();
        let mean_row =
            linalg::mean_of((0..w_u.rows).map(|v| w_u.row(v))).expect("nonempty vocabulary");
        Self { weights, mean_row }
    }

    pub fn pi(&self, v: &[f32], token: u32) -> Result<f64> {
        let w_u = self.weights.unembedding();
        if token as usize >= w_u.rows {
            return Err(Error::TokenOutOfRange {
                id: token,
                vocab: w_u.rows,
            });
        }
        let ln = &self.weights.ln_f;
        let normed = linalg::layer_norm(v, &ln.gamma, &ln.beta, self.weights.config.ln_epsilon);
        Ok(linalg::dot(w_u.row(token as usize), &normed) - linalg::dot(&self.mean_row, &normed))
    }
}

/// Percentage change from `original` to `patched`; `None` when the original
/// is within [`EPS_GUARD`] of zero.
pub fn delta_logit(original: f64, patched: f64) -> Option<f64> {
    (original.abs() > EPS_GUARD).then(|| (patched / original - 1.0) * 100.0)
}

pub fn activation_patch(
    weights: &Weights,
    tokens: &[u32],
    specs: &[PatchSpec],
) -> Result<ActivationCache> {
    model::forward_with_cache(weights, tokens, specs)
}

/// Heads forced onto self-attention and vectors removed from `resid_post`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SuppressionSpec {
    pub masked_heads: BTreeSet<(usize, usize)>,
    /// Subtracted from `resid_post[layer]` at the final position.
    pub subtract_vectors: Vec<(usize, Vec<f32>)>,
}

pub fn run_suppressed(
    weights: &Weights,
    tokens: &[u32],
    spec: &SuppressionSpec,
) -> Result<ActivationCache> {
    model::run(
        weights,
        tokens,
        &Interventions {
            masked_heads: spec.masked_heads.clone(),
            resid_post_subtract: spec.subtract_vectors.clone(),
            logits: LogitsScope::LastPosition,
            ..Default::default()
        },
    )
}

/// Index of the residual state a node writes into (module outputs) or reads
/// from (everything else). `r_pre[l] = 3l`, `r_mid[l] = 3l+1`, `r_post[l] = 3l+2`.
fn residual_index(node: &NodeId, writes: bool) -> usize {
    let base = 3 * node.layer;
    match (node.site, writes) {
        (Site::HeadOut(_), true) => base + 1,
        (Site::MlpOut, true) => base + 2,
        (Site::ResidPre | Site::HeadOut(_), false) => base,
        (Site::ResidMid | Site::MlpOut, false) => base + 1,
        (Site::ResidPost, _) => base + 2,
        (Site::ResidPre | Site::ResidMid, true) => unreachable!("senders are module outputs"),
    }
}

/// Value of `receiver` when only the direct path from `sender` carries
/// `sender_value` and every other input keeps its clean value.
pub fn path_patched_value(
    weights: &Weights,
    clean: &ActivationCache,
    sender: NodeId,
    sender_value: &[f32],
    receiver: NodeId,
) -> Result<Vec<f32>> {
    check_node_shape(weights, &sender)?;
    let ts = clean.check_node(&sender)?;
    let tr = clean.check_node(&receiver)?;
    if sender_value.len() != clean.d_model {
        return Err(Error::Dimension {
            expected: clean.d_model,
            actual: sender_value.len(),
        });
    }
    let not_upstream = || {
        Error::InvalidNode(format!(
            "sender {sender} is not upstream of receiver {receiver}"
        ))
    };
    if sender.site.is_residual() {
        return Err(Error::InvalidNode(format!(
            "sender {sender} must be a head or MLP output"
        )));
    }
    if residual_index(&sender, true) > residual_index(&receiver, false) {
        return Err(not_upstream());
    }
    let head_receiver = matches!(receiver.site, Site::HeadOut(_));
    if (head_receiver && ts > tr) || (!head_receiver && ts != tr) {
        return Err(not_upstream());
    }

    let delta = linalg::sub(sender_value, clean.node(&sender)?);
    let l = receiver.layer;
    Ok(match receiver.site {
        Site::ResidPre | Site::ResidMid | Site::ResidPost => {
            linalg::add(clean.node(&receiver)?, &delta)
        }
        Site::MlpOut => {
            let r_mid = linalg::add(clean.resid_mid[l].row(tr), &delta);
            model::mlp_forward(weights, l, &r_mid)
        }
        Site::HeadOut(h) => {
            let rows = tr + 1;
            let d = clean.d_model;
            let mut hybrid =
                Matrix::from_vec(rows, d, clean.resid_pre[l].data[..rows * d].to_vec());
            linalg::add_assign(hybrid.row_mut(ts), &delta);
            let normed = model::attention_input(weights, l, &hybrid);
            head_at(weights, l, h, &normed, tr)
        }
    })
}

/// Δπ of `answer` at `receiver` when `sender` is replaced by its mean over
/// `interventions` along the direct path only.
pub fn path_patch_effect(
    weights: &Weights,
    sender: RoleNode,
    receiver: RoleNode,
    original: &PromptInstance,
    interventions: &[PromptInstance],
    answer: u32,
) -> Result<Option<f64>> {
    let mean = mean_node_activation(weights, sender, interventions)?;
    let clean = clean_run(weights, &original.tokens)?;
    let r = receiver.resolve(original);
    let readout = CenteredReadout::new(weights);
    let before = readout.pi(clean.node(&r)?, answer)?;
    let patched = path_patched_value(weights, &clean, sender.resolve(original), &mean, r)?;
    Ok(delta_logit(before, readout.pi(&patched, answer)?))
}

/// Which token's centered logit a grid measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Answer {
    X,
    Y,
}

impl Answer {
    pub fn token(self, p: &PromptInstance) -> u32 {
        match self {
            Answer::X => p.x_token,
            Answer::Y => p.y_token,
        }
    }
}

/// Δπ for every sender head against one receiver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub receiver: String,
    pub sender_role: Role,
    pub answer: Answer,
    pub n_prompts: usize,
    /// `[layer][head]`: mean over prompts of per-prompt Δπ (%); `None` where
    /// the sender is not upstream or every prompt was guarded.
    pub mean_delta: Vec<Vec<Option<f64>>>,
    /// `[layer][head]`: prompts that contributed to `mean_delta`.
    pub counts: Vec<Vec<usize>>,
    /// `[layer][head]`: Δπ between the dataset-mean π values.
    pub delta_of_means: Vec<Vec<Option<f64>>>,
    pub mean_original_pi: f64,
}

impl PatchGrid {
    pub fn get(&self, layer: usize, head: usize) -> Option<f64> {
        self.mean_delta[layer][head]
    }

    /// Heads sorted by ascending Δπ (most harmful ablation first).
    pub fn ranked(&self) -> Vec<(usize, usize, f64)> {
        let mut cells: Vec<_> = self
            .mean_delta
            .iter()
            .enumerate()
            .flat_map(|(l, row)| {
                row.iter()
                    .enumerate()
                    .filter_map(move |(h, v)| v.map(|v| (l, h, v)))
            })
            .collect();
        cells.sort_by(|a, b| a.2.total_cmp(&b.2).then((a.0, a.1).cmp(&(b.0, b.1))));
        cells
    }
}

/// Path-patch every head output at `sender_role` into `receiver`, with the
/// whole dataset as the intervention set.
pub fn patch_grid(
    weights: &Weights,
    prompts: &[PromptInstance],
    sender_role: Role,
    receiver: RoleNode,
    answer: Answer,
) -> Result<PatchGrid> {
    if prompts.is_empty() {
        return Err(Error::Empty("prompt list"));
    }
    let c = weights.config;
    check_node_shape(weights, &NodeId::new(receiver.layer, receiver.site, 0))?;
    let heads: Vec<(usize, usize)> = (0..c.n_layers)
        .flat_map(|l| (0..c.n_heads).map(move |h| (l, h)))
        .collect();
    let receiver_id = NodeId::new(receiver.layer, receiver.site, 0);
    let upstream: Vec<bool> = heads
        .iter()
        .map(|&(l, h)| {
            residual_index(&NodeId::new(l, Site::HeadOut(h), 0), true)
                <= residual_index(&receiver_id, false)
        })
        .collect();

    // pass 1: dataset means of every head output at the sender role
    let per_prompt = prompts
        .par_iter()
        .map(|p| {
            let cache = clean_run(weights, &p.tokens)?;
            let t = resolve_position(sender_role.resolve(p), cache.seq_len())?;
            Ok(heads
                .iter()
                .map(|&(l, h)| cache.head_out[l][h].row(t).to_vec())
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let means: Vec<Vec<f32>> = (0..heads.len())
        .map(|i| linalg::mean_of(per_prompt.iter().map(|v| v[i].as_slice())).expect("nonempty"))
        .collect();
    drop(per_prompt);

    // pass 2: clean cache per prompt, then every sender against it
    let readout = CenteredReadout::new(weights);
    let effects = prompts
        .par_iter()
        .map(|p| {
            let clean = clean_run(weights, &p.tokens)?;
            let r = receiver.resolve(p);
            let token = answer.token(p);
            let before = readout.pi(clean.node(&r)?, token)?;
            let mut row = Vec::with_capacity(heads.len());
            for (i, &(l, h)) in heads.iter().enumerate() {
                if !upstream[i] {
                    row.push(None);
                    continue;
                }
                let s = NodeId::new(l, Site::HeadOut(h), sender_role.resolve(p));
                let v = path_patched_value(weights, &clean, s, &means[i], r)?;
                row.push(Some(readout.pi(&v, token)?));
            }
            Ok((before, row))
        })
        .collect::<Result<Vec<_>>>()?;

    let n = prompts.len() as f64;
    let mean_original_pi = effects.iter().map(|e| e.0).sum::<f64>() / n;
    let mut mean_delta = vec![vec![None; c.n_heads]; c.n_layers];
    let mut counts = vec![vec![0; c.n_heads]; c.n_layers];
    let mut delta_of_means = vec![vec![None; c.n_heads]; c.n_layers];
    for (i, &(l, h)) in heads.iter().enumerate() {
        if !upstream[i] {
            continue;
        }
        let deltas: Vec<f64> = effects
            .iter()
            .filter_map(|(before, row)| delta_logit(*before, row[i].expect("upstream")))
            .collect();
        counts[l][h] = deltas.len();
        if !deltas.is_empty() {
            mean_delta[l][h] = Some(deltas.iter().sum::<f64>() / deltas.len() as f64);
        }
        let mean_patched = effects
            .iter()
            .map(|e| e.1[i].expect("upstream"))
            .sum::<f64>()
            / n;
        delta_of_means[l][h] = delta_logit(mean_original_pi, mean_patched);
    }
    Ok(PatchGrid {
        receiver: receiver.to_string(),
        sender_role,
        answer,
        n_prompts: prompts.len(),
        mean_delta,
        counts,
        delta_of_means,
        mean_original_pi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_logit_arithmetic() {
        assert_eq!(delta_logit(10.0, 10.0), Some(0.0));
        assert!((delta_logit(10.0, 9.0).unwrap() + 10.0).abs() < 1e-12);
        assert_eq!(delta_logit(5e-4, 1.0), None);
    }

    #[test]
    fn centering() {
        assert_eq!(centered_from_logits(&[2.0; 5], 3).unwrap(), 0.0);
        let a = centered_from_logits(&[1.0, 4.0, -2.0], 1).unwrap();
        let b = centered_from_logits(&[11.0, 14.0, 8.0], 1).unwrap();
        assert!((a - b).abs() < 1e-9);
        assert!(centered_from_logits(&[1.0], 1).is_err());
    }

    #[test]
    fn node_strings_round_trip() {
        for s in [
            "resid_post:11:final",
            "head_out.8:9:x",
            "mlp_out:3:4",
            "resid_mid:0:-2",
        ] {
            assert_eq!(s.parse::<RoleNode>().unwrap().to_string(), s);
        }
        assert_eq!(
            "resid_post:11:-1".parse::<RoleNode>().unwrap().role,
            Role::Final
        );
        assert!("bogus:1:1".parse::<RoleNode>().is_err());
        assert!("resid_pre:x".parse::<RoleNode>().is_err());
    }

    #[test]
    fn upstream_ordering() {
        let head = |l, h| NodeId::new(l, Site::HeadOut(h), 0);
        let mlp = |l| NodeId::new(l, Site::MlpOut, 0);
        assert!(
            residual_index(&head(3, 0), true)
                <= residual_index(&NodeId::new(3, Site::ResidMid, 0), false)
        );
        assert!(residual_index(&head(3, 0), true) > residual_index(&head(3, 1), false));
        assert!(residual_index(&head(3, 0), true) <= residual_index(&mlp(3), false));
        assert!(residual_index(&mlp(3), true) > residual_index(&mlp(3), false));
        assert!(residual_index(&mlp(3), true) <= residual_index(&head(4, 0), false));
    }
}
