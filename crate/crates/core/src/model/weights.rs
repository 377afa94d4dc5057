//! GPT-2 checkpoint loading from the single-file safetensors archive.
//!
//! Tensor names follow the public GPT-2 checkpoints (`wte.weight`,
//! `h.{l}.attn.c_attn.weight`, ...), optionally prefixed with `transformer.`.
//! Linear weights use the Conv1D layout `[in, out]`, so a projection is
//! `x · W + b` with `x` a row vector.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use safetensors::{Dtype, SafeTensors};
use sha2::{Digest, Sha256};

use super::config::{ModelConfig, GPT2_HEAD_DIM, GPT2_LN_EPSILON};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// LayerNorm parameters (γ, β).
#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub ln1: Norm,
    /// `[d_model, 3·d_model]`: query, key and value projections side by side.
    pub qkv_w: Matrix,
    pub qkv_b: Vec<f32>,
    /// `[d_model, d_model]`; rows `h·d_head..(h+1)·d_head` belong to head `h`.
    pub out_w: Matrix,
    pub out_b: Vec<f32>,
    pub ln2: Norm,
    pub fc_w: Matrix,
    pub fc_b: Vec<f32>,
    pub proj_w: Matrix,
    pub proj_b: Vec<f32>,
}

/// All learned tensors of a GPT-2-family checkpoint. Immutable after load.
#[derive(Debug, Clone)]
pub struct Weights {
    pub config: ModelConfig,
    pub token_embedding: Matrix,
    pub positional_embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub ln_f: Norm,
    /// Separate unembedding; `None` when tied to the token embedding.
    untied_unembedding: Option<Matrix>,
    /// Hex SHA-256 of the archive bytes (or a synthetic tag for generated weights).
    pub fingerprint: String,
}

impl Weights {
    /// `W_U`, shape `[d_vocab, d_model]`.
    pub fn unembedding(&self) -> &Matrix {
        self.untied_unembedding
            .as_ref()
            .unwrap_or(&self.token_embedding)
    }

    pub fn is_tied(&self) -> bool {
        self.untied_unembedding.is_none()
    }

    /// Randomly initialised weights for tests and property suites.
    pub fn random(config: ModelConfig, seed: u64) -> Self {
        config.validate().expect("valid toy config");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let mut mat = |rows: usize, cols: usize, std: f32| {
            Matrix::from_vec(
                rows,
                cols,
                (0..rows * cols)
                    .map(|_| {
                        let z: f32 = StandardNormal.sample(&mut rng);
                        std * z
                    })
                    .collect(),
            )
        };
        let token_embedding = mat(config.d_vocab, d, 1.0);
        let positional_embedding = mat(config.max_context, d, 0.5);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let ln1g = mat(1, d, 0.2).data;
            let ln1b = mat(1, d, 0.1).data;
            let qkv_w = mat(d, 3 * d, 0.4);
            let qkv_b = mat(1, 3 * d, 0.2).data;
            let out_w = mat(d, d, 0.4);
            let out_b = mat(1, d, 0.2).data;
            let ln2g = mat(1, d, 0.2).data;
            let ln2b = mat(1, d, 0.1).data;
            let fc_w = mat(d, config.d_mlp, 0.4);
            let fc_b = mat(1, config.d_mlp, 0.2).data;
            let proj_w = mat(config.d_mlp, d, 0.2);
            let proj_b = mat(1, d, 0.2).data;
            layers.push(LayerWeights {
                ln1: Norm {
                    gamma: ln1g.iter().map(|g| 1.0 + g).collect(),
                    beta: ln1b,
                },
                qkv_w,
                qkv_b,
                out_w,
                out_b,
                ln2: Norm {
                    gamma: ln2g.iter().map(|g| 1.0 + g).collect(),
                    beta: ln2b,
                },
                fc_w,
                fc_b,
                proj_w,
                proj_b,
            });
        }
        let lnfg = mat(1, d, 0.2).data;
        let lnfb = mat(1, d, 0.1).data;
        Self {
            config,
            token_embedding,
            positional_embedding,
            layers,
            ln_f: Norm {
                gamma: lnfg.iter().map(|g| 1.0 + g).collect(),
                beta: lnfb,
            },
            untied_unembedding: None,
            fingerprint: format!("random-seed-{seed}"),
        }
    }
}

/// Knobs for [`load_weights_with`].
#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Head count override. Otherwise taken from the archive's `n_head`
    /// metadata, else `d_model / 64`.
    pub n_heads: Option<usize>,
}

/// What the loader saw besides the tensors it used.
#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    /// Tensors present in the archive but not consumed.
    pub extra: Vec<String>,
    /// Non-parameter buffers that were recognised and skipped.
    pub skipped_buffers: Vec<String>,
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<(Weights, ModelConfig)> {
    let (w, c, _) = load_weights_with(path, &LoadOptions::default())?;
    Ok((w, c))
}

pub fn load_weights_with(
    path: impl AsRef<Path>,
    options: &LoadOptions,
) -> Result<(Weights, ModelConfig, LoadReport)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let fingerprint = hex(&Sha256::digest(&bytes));
    parse_weights(&bytes, options, fingerprint)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct Archive<'a> {
    st: SafeTensors<'a>,
    /// canonical name (prefix stripped) → stored name
    names: BTreeMap<String, String>,
    used: BTreeSet<String>,
}

impl<'a> Archive<'a> {
    fn tensor(&mut self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        let stored = self
            .names
            .get(name)
            .ok_or_else(|| Error::shape(name, "missing from archive"))?
            .clone();
        self.used.insert(name.to_string());
        let view = self
            .st
            .tensor(&stored)
            .map_err(|e| Error::MalformedArchive(format!("{name}: {e}")))?;
        let shape = view.shape().to_vec();
        let data = view.data();
        let values = match view.dtype() {
            Dtype::F32 => data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            Dtype::F16 => data
                .chunks_exact(2)
                .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
            Dtype::BF16 => data
                .chunks_exact(2)
                .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
            other => {
                return Err(Error::MalformedArchive(format!(
                    "{name}: unsupported dtype {other:?}"
                )))
            }
        };
        Ok((shape, values))
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        let (shape, data) = self.tensor(name)?;
        if shape != [rows, cols] {
            return Err(Error::shape(
                name,
                format!("expected [{rows}, {cols}], found {shape:?}"),
            ));
        }
        Ok(Matrix::from_vec(rows, cols, data))
    }

    fn vector(&mut self, name: &str, len: usize) -> Result<Vec<f32>> {
        let (shape, data) = self.tensor(name)?;
        if shape != [len] {
            return Err(Error::shape(
                name,
                format!("expected [{len}], found {shape:?}"),
            ));
        }
        Ok(data)
    }

    fn shape_of(&self, name: &str) -> Result<Vec<usize>> {
        let stored = self
            .names
            .get(name)
            .ok_or_else(|| Error::shape(name, "missing from archive"))?;
        let view = self
            .st
            .tensor(stored)
            .map_err(|e| Error::MalformedArchive(format!("{name}: {e}")))?;
        Ok(view.shape().to_vec())
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Result<Norm> {
        Ok(Norm {
            gamma: self.vector(&format!("{prefix}.weight"), d)?,
            beta: self.vector(&format!("{prefix}.bias"), d)?,
        })
    }
}

fn is_buffer(name: &str) -> bool {
    name.ends_with(".attn.bias") || name.ends_with(".attn.masked_bias")
}

/// Parse an in-memory archive. Exposed for tests that build archives on the fly.
pub fn parse_weights(
    bytes: &[u8],
    options: &LoadOptions,
    fingerprint: String,
) -> Result<(Weights, ModelConfig, LoadReport)> {
    let (_, metadata) =
        SafeTensors::read_metadata(bytes).map_err(|e| Error::MalformedArchive(e.to_string()))?;
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::MalformedArchive(e.to_string()))?;
    let mut names = BTreeMap::new();
    for stored in st.names() {
        let canonical = stored.strip_prefix("transformer.").unwrap_or(stored);
        names.insert(canonical.to_string(), stored.to_string());
    }
    let mut ar = Archive {
        st,
        names,
        used: BTreeSet::new(),
    };

    let wte_shape = ar.shape_of("wte.weight")?;
    let [d_vocab, d_model] = wte_shape[..] else {
        return Err(Error::shape(
            "wte.weight",
            format!("expected rank 2, found {wte_shape:?}"),
        ));
    };
    let wpe_shape = ar.shape_of("wpe.weight")?;
    let [max_context, wpe_d] = wpe_shape[..] else {
        return Err(Error::shape(
            "wpe.weight",
            format!("expected rank 2, found {wpe_shape:?}"),
        ));
    };
    if wpe_d != d_model {
        return Err(Error::shape(
            "wpe.weight",
            format!("second axis {wpe_d} != d_model {d_model} from wte.weight"),
        ));
    }
    let mut n_layers = 0;
    while ar.names.contains_key(&format!("h.{n_layers}.ln_1.weight")) {
        n_layers += 1;
    }
    if n_layers == 0 {
        return Err(Error::shape(
            "h.0.ln_1.weight",
            "no transformer blocks found",
        ));
    }
    let fc_shape = ar.shape_of("h.0.mlp.c_fc.weight")?;
    let d_mlp = *fc_shape
        .get(1)
        .ok_or_else(|| Error::shape("h.0.mlp.c_fc.weight", "expected rank 2"))?;

    let meta_heads = metadata
        .metadata()
        .as_ref()
        .and_then(|m| m.get("n_head").or_else(|| m.get("n_heads")))
        .map(|v| {
            v.parse::<usize>().map_err(|_| {
                Error::MalformedArchive(format!("n_head metadata `{v}` is not a count"))
            })
        })
        .transpose()?;
    let n_heads = match options.n_heads.or(meta_heads) {
        Some(h) => h,
        None if d_model % GPT2_HEAD_DIM == 0 => d_model / GPT2_HEAD_DIM,
        None => {
            return Err(Error::shape(
                "n_heads",
                format!("cannot infer head count for d_model {d_model}; pass it explicitly"),
            ))
        }
    };
    if n_heads == 0 || d_model % n_heads != 0 {
        return Err(Error::shape(
            "n_heads",
            format!("{n_heads} heads do not divide d_model {d_model}"),
        ));
    }
    let config = ModelConfig {
        n_layers,
        n_heads,
        d_model,
        d_head: d_model / n_heads,
        d_mlp,
        d_vocab,
        max_context,
        ln_epsilon: GPT2_LN_EPSILON,
    };
    config.validate()?;

    let token_embedding = ar.matrix("wte.weight", d_vocab, d_model)?;
    let positional_embedding = ar.matrix("wpe.weight", max_context, d_model)?;
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let p = format!("h.{l}");
        layers.push(LayerWeights {
            ln1: ar.norm(&format!("{p}.ln_1"), d_model)?,
            qkv_w: ar.matrix(&format!("{p}.attn.c_attn.weight"), d_model, 3 * d_model)?,
            qkv_b: ar.vector(&format!("{p}.attn.c_attn.bias"), 3 * d_model)?,
            out_w: ar.matrix(&format!("{p}.attn.c_proj.weight"), d_model, d_model)?,
            out_b: ar.vector(&format!("{p}.attn.c_proj.bias"), d_model)?,
            ln2: ar.norm(&format!("{p}.ln_2"), d_model)?,
            fc_w: ar.matrix(&format!("{p}.mlp.c_fc.weight"), d_model, d_mlp)?,
            fc_b: ar.vector(&format!("{p}.mlp.c_fc.bias"), d_mlp)?,
            proj_w: ar.matrix(&format!("{p}.mlp.c_proj.weight"), d_mlp, d_model)?,
            proj_b: ar.vector(&format!("{p}.mlp.c_proj.bias"), d_model)?,
        });
    }
    let ln_f = ar.norm("ln_f", d_model)?;
    let untied_unembedding = if ar.names.contains_key("lm_head.weight") {
        let wu = ar.matrix("lm_head.weight", d_vocab, d_model)?;
        // Tied checkpoints sometimes store the head explicitly; keep one copy.
        (wu.data != token_embedding.data).then_some(wu)
    } else {
        None
    };

    let mut report = LoadReport::default();
    for name in ar.names.keys() {
        if ar.used.contains(name) {
            continue;
        }
        if is_buffer(name) {
            report.skipped_buffers.push(name.clone());
        } else {
            report.extra.push(name.clone());
        }
    }
    if !report.extra.is_empty() {
        log::warn!("unused tensors in archive: {:?}", report.extra);
    }

    let weights = Weights {
        config,
        token_embedding,
        positional_embedding,
        layers,
        ln_f,
        untied_unembedding,
        fingerprint,
    };
    Ok((weights, config, report))
}

/// Serialise weights back into a safetensors archive with public GPT-2 names.
/// Used by tests to build corrupted or truncated archives.
pub fn to_safetensors(weights: &Weights, skip: &[&str]) -> Vec<u8> {
    let mut entries: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, data: &[f32]| {
        if skip.iter().any(|s| *s == name) {
            return;
        }
        let bytes = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        entries.push((name, shape, bytes));
    };
    let c = &weights.config;
    push(
        "wte.weight".into(),
        vec![c.d_vocab, c.d_model],
        &weights.token_embedding.data,
    );
    push(
        "wpe.weight".into(),
        vec![c.max_context, c.d_model],
        &weights.positional_embedding.data,
    );
    for (l, lw) in weights.layers.iter().enumerate() {
        let p = format!("h.{l}");
        push(format!("{p}.ln_1.weight"), vec![c.d_model], &lw.ln1.gamma);
        push(format!("{p}.ln_1.bias"), vec![c.d_model], &lw.ln1.beta);
        push(
            format!("{p}.attn.c_attn.weight"),
            vec![c.d_model, 3 * c.d_model],
            &lw.qkv_w.data,
        );
        push(
            format!("{p}.attn.c_attn.bias"),
            vec![3 * c.d_model],
            &lw.qkv_b,
        );
        push(
            format!("{p}.attn.c_proj.weight"),
            vec![c.d_model, c.d_model],
            &lw.out_w.data,
        );
        push(format!("{p}.attn.c_proj.bias"), vec![c.d_model], &lw.out_b);
        push(format!("{p}.ln_2.weight"), vec![c.d_model], &lw.ln2.gamma);
        push(format!("{p}.ln_2.bias"), vec![c.d_model], &lw.ln2.beta);
        push(
            format!("{p}.mlp.c_fc.weight"),
            vec![c.d_model, c.d_mlp],
            &lw.fc_w.data,
        );
        push(format!("{p}.mlp.c_fc.bias"), vec![c.d_mlp], &lw.fc_b);
        push(
            format!("{p}.mlp.c_proj.weight"),
            vec![c.d_mlp, c.d_model],
            &lw.proj_w.data,
        );
        push(format!("{p}.mlp.c_proj.bias"), vec![c.d_model], &lw.proj_b);
    }
    push("ln_f.weight".into(), vec![c.d_model], &weights.ln_f.gamma);
    push("ln_f.bias".into(), vec![c.d_model], &weights.ln_f.beta);
    let views: Vec<(String, safetensors::tensor::TensorView<'_>)> = entries
        .iter()
        .map(|(n, s, b)| {
            (
                n.clone(),
                safetensors::tensor::TensorView::new(Dtype::F32, s.clone(), b).expect("view"),
            )
        })
        .collect();
    let mut meta = std::collections::HashMap::new();
    meta.insert("n_head".to_string(), c.n_heads.to_string());
    safetensors::serialize(views, Some(meta)).expect("serialize")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ModelConfig;

    fn toy() -> Weights {
        Weights::random(ModelConfig::toy(2, 2, 4, 50), 7)
    }

    #[test]
    fn round_trips_through_archive() {
        let w = toy();
        let bytes = to_safetensors(&w, &[]);
        let (back, cfg, report) =
            parse_weights(&bytes, &LoadOptions::default(), "x".into()).unwrap();
        assert_eq!(cfg, w.config);
        assert!(report.extra.is_empty());
        assert_eq!(back.layers[1].qkv_w, w.layers[1].qkv_w);
        assert!(back.is_tied());
        // tie consistency: W_U and token embedding report the same d_model
        assert_eq!(back.unembedding().cols, back.token_embedding.cols);
    }

    #[test]
    fn missing_final_norm_is_named() {
        let bytes = to_safetensors(&toy(), &["ln_f.weight"]);
        let err = parse_weights(&bytes, &LoadOptions::default(), "x".into()).unwrap_err();
        match err {
            Error::Shape { tensor, .. } => assert!(tensor.contains("ln_f"), "{tensor}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn garbage_is_malformed() {
        let err = parse_weights(
            b"not an archive at all",
            &LoadOptions::default(),
            "x".into(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::MalformedArchive(_)));
    }

    #[test]
    fn missing_file_is_reported() {
        let err = load_weights("/definitely/not/here.safetensors").unwrap_err();
        assert!(matches!(err, Error::FileNotFound(_)));
    }
}
