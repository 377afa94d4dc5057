//! Named experiments: load a model and a task, run one analysis, write the
//! report files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decompose::{self, FitHyper, RegressionSolution};
use crate::error::{Error, Result};
use crate::geometry::{self, Alignment, FrequencyTable};
use crate::instrument::{self, Answer, Role, RoleNode, SuppressionSpec};
use crate::lens;
use crate::linalg;
use crate::model::{self, Weights};
use crate::report::{self, Provenance, ReportWriter};
use crate::tasks::{build_dataset, DatasetOptions, PromptInstance, TaskDataset, TaskSpec};
use crate::tokenizer::BpeVocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: PathBuf,
    pub task: PathBuf,
    pub shots: usize,
    pub out: PathBuf,
    /// Drives few-shot sampling and regression fold shuffling.
    pub seed: u64,
    pub prepend_bos: bool,
    pub experiment: Experiment,
}

/// Where regression solutions come from when an experiment needs them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SolverOptions {
    /// A `solutions.json` written by `fit-mlp`; fitted afresh when absent.
    pub solutions: Option<PathBuf>,
    pub closed_form: bool,
    /// `seed` is overwritten by the experiment seed.
    pub hyper: FitHyper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Experiment {
    Dynamics,
    PatchGrid {
        receiver: RoleNode,
        sender_role: Role,
        answer: Answer,
    },
    Mover {
        heads: Vec<(usize, usize)>,
    },
    OvProbe {
        layer: usize,
        head: usize,
        k: usize,
    },
    /// Empty `layers` means every layer.
    FitMlp {
        layers: Vec<usize>,
        solver: SolverOptions,
    },
    Project {
        layer: usize,
        solver: SolverOptions,
    },
    Fidelity {
        solver: SolverOptions,
    },
    Suppress {
        mask_layer: Option<usize>,
        subtract_intercept: Option<usize>,
        freq: Option<PathBuf>,
        solver: SolverOptions,
    },
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Dynamics => "dynamics",
            Experiment::PatchGrid { .. } => "patch-grid",
            Experiment::Mover { .. } => "mover",
            Experiment::OvProbe { .. } => "ov-probe",
            Experiment::FitMlp { .. } => "fit-mlp",
            Experiment::Project { .. } => "project",
            Experiment::Fidelity { .. } => "fidelity",
            Experiment::Suppress { .. } => "suppress",
        }
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::FileNotFound(path.to_path_buf()))
    }
}

impl ExperimentConfig {
    /// Checks that need no model: referenced files exist.
    pub fn validate(&self) -> Result<()> {
        require_file(&self.model)?;
        require_file(&self.task)?;
        let solver = match &self.experiment {
            Experiment::FitMlp { solver, .. }
            | Experiment::Project { solver, .. }
            | Experiment::Fidelity { solver } => Some(solver),
            Experiment::Suppress { solver, freq, .. } => {
                if let Some(f) = freq {
                    require_file(f)?;
                }
                Some(solver)
            }
            _ => None,
        };
        if let Some(p) = solver.and_then(|s| s.solutions.as_ref()) {
            require_file(p)?;
        }
        Ok(())
    }

    pub fn dataset_options(&self) -> DatasetOptions {
        DatasetOptions {
            shots: self.shots,
            seed: self.seed,
            prepend_bos: self.prepend_bos,
        }
    }
}

pub fn load_dataset(task: &Path, options: DatasetOptions) -> Result<TaskDataset> {
    build_dataset(&TaskSpec::load(task)?, &BpeVocab::gpt2(), options)
}

// --- studies -------------------------------------------------------------

/// Regression solutions for `layers`, loaded or fitted.
pub fn obtain_solutions(
    weights: &Weights,
    prompts: &[PromptInstance],
    layers: &[usize],
    solver: &SolverOptions,
    seed: u64,
) -> Result<Vec<RegressionSolution>> {
    if let Some(l) = layers.iter().find(|&&l| l >= weights.config.n_layers) {
        return Err(Error::InvalidNode(format!("layer {l} out of range")));
    }
    if let Some(path) = &solver.solutions {
        let all = load_solutions(path)?;
        return layers
            .iter()
            .map(|&l| {
                all.iter().find(|s| s.layer == l).cloned().ok_or_else(|| {
                    Error::Task(format!("{} has no solution for layer {l}", path.display()))
                })
            })
            .collect();
    }
    let samples = decompose::collect_all_layers(weights, prompts)?;
    let hyper = FitHyper {
        seed,
        ..solver.hyper
    };
    layers
        .par_iter()
        .map(|&l| {
            if solver.closed_form {
                decompose::closed_form(l, &samples[l])
            } else {
                decompose::fit_layer(l, &samples[l], &hyper)
            }
        })
        .collect()
}

/// Reads either a bare solution list or a report envelope around one.
pub fn load_solutions(path: &Path) -> Result<Vec<RegressionSolution>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)?;
    if let Some(inner) = value.get_mut("result") {
        value = inner.take();
    }
    Ok(serde_json::from_value(value)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanAlignment {
    pub cos_projected: f64,
    pub cos_raw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub layer: usize,
    /// `"b"` (intercept) or `"m"` (MLP output).
    pub vector: String,
    pub x: String,
    pub y: String,
    #[serde(flatten)]
    pub alignment: Alignment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawCosines {
    pub vector: String,
    pub with_x: f64,
    pub with_y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionReport {
    pub layer: usize,
    pub n_pairs: usize,
    /// Pairs whose X and Y share a first subword, which leaves no plane.
    pub skipped_pairs: Vec<String>,
    pub b: MeanAlignment,
    pub m: MeanAlignment,
    /// Cosines of `m`, `r_mid` and `r_post` with `W_U[X]` and `W_U[Y]`.
    pub raw: Vec<RawCosines>,
    pub pairs: Vec<AlignmentRecord>,
}

/// For each (X, Y) pair, average `m^l`, `r^l_mid` and `r^l_post` at the final
/// position over the pair's prompts, then measure how they and the intercept
/// sit relative to `W_U[X]` and `W_U[Y]`. Cosines are averaged over pairs.
pub fn projection_study(
    weights: &Weights,
    prompts: &[PromptInstance],
    layer: usize,
    intercept: &[f32],
) -> Result<ProjectionReport> {
    if prompts.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if layer >= weights.config.n_layers {
        return Err(Error::InvalidNode(format!("layer {layer} out of range")));
    }
    let vectors = prompts
        .par_iter()
        .map(|p| {
            let c = instrument::clean_run(weights, &p.tokens)?;
            let t = p.final_position();
            Ok([
                c.mlp_out[layer].row(t).to_vec(),
                c.resid_mid[layer].row(t).to_vec(),
                c.resid_post[layer].row(t).to_vec(),
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    let mut by_pair: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, p) in prompts.iter().enumerate() {
        by_pair.entry(p.pair_index).or_default().push(i);
    }

    let w_u = weights.unembedding();
    let names = ["mlp_out", "resid_mid", "resid_post"];
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    let (mut b_sum, mut m_sum) = ([0.0; 2], [0.0; 2]);
    let mut raw_sum = [[0.0; 2]; 3];
    let mut n = 0usize;
    for idx in by_pair.values() {
        let p = &prompts[idx[0]];
        if p.x_token == p.y_token {
            skipped.push(p.x.clone());
            continue;
        }
        let means: Vec<Vec<f32>> = (0..3)
            .map(|k| {
                linalg::mean_of(idx.iter().map(|&i| vectors[i][k].as_slice())).expect("nonempty")
            })
            .collect();
        let b = geometry::alignment(weights, intercept, p.x_token, p.y_token)?;
        let m = geometry::alignment(weights, &means[0], p.x_token, p.y_token)?;
        b_sum[0] += b.cos_projected;
        b_sum[1] += b.cos_raw;
        m_sum[0] += m.cos_projected;
        m_sum[1] += m.cos_raw;
        for (k, v) in means.iter().enumerate() {
            raw_sum[k][0] += geometry::cosine(v, w_u.row(p.x_token as usize))?;
            raw_sum[k][1] += geometry::cosine(v, w_u.row(p.y_token as usize))?;
        }
        for (name, alignment) in [("b", b), ("m", m)] {
            records.push(AlignmentRecord {
                layer,
                vector: name.into(),
                x: p.x.clone(),
                y: p.y.clone(),
                alignment,
            });
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Degenerate(
            "every pair shares X and Y first subwords".into(),
        ));
    }
    let nf = n as f64;
    Ok(ProjectionReport {
        layer,
        n_pairs: n,
        skipped_pairs: skipped,
        b: MeanAlignment {
            cos_projected: b_sum[0] / nf,
            cos_raw: b_sum[1] / nf,
        },
        m: MeanAlignment {
            cos_projected: m_sum[0] / nf,
            cos_raw: m_sum[1] / nf,
        },
        raw: names
            .iter()
            .zip(raw_sum)
            .map(|(name, [x, y])| RawCosines {
                vector: (*name).into(),
                with_x: x / nf,
                with_y: y / nf,
            })
            .collect(),
        pairs: records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuppressionRecord {
    /// `resid_mid:L:final`, `resid_post:L:final` or `output`.
    pub node: String,
    pub token: Answer,
    /// Condition of `prob_before` → condition of `prob_after`.
    pub intervention: String,
    pub prob_before: f64,
    pub prob_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuppressionReport {
    pub n_prompts: usize,
    pub layer: usize,
    pub masked_heads: Vec<(usize, usize)>,
    pub subtracted_layer: Option<usize>,
    pub records: Vec<SuppressionRecord>,
    /// `cos(b, E[W_U])` when a frequency table was supplied.
    pub intercept_expected_unembedding_cos: Option<f64>,
}

impl SuppressionReport {
    pub fn find(
        &self,
        node: &str,
        token: Answer,
        intervention: &str,
    ) -> Option<&SuppressionRecord> {
        self.records
            .iter()
            .find(|r| r.node == node && r.token == token && r.intervention == intervention)
    }
}

/// Mean prob(X), prob(Y) at r_mid[L], r_post[L] and the output, final position.
fn suppression_probs(
    weights: &Weights,
    p: &PromptInstance,
    layer: usize,
    spec: &SuppressionSpec,
) -> Result<[[f64; 2]; 3]> {
    let c = instrument::run_suppressed(weights, &p.tokens, spec)?;
    let t = p.final_position();
    let out = linalg::softmax64(c.last_logits());
    let pick = |probs: &[f64]| [probs[p.x_token as usize], probs[p.y_token as usize]];
    Ok([
        pick(&lens::probabilities(weights, c.resid_mid[layer].row(t))),
        pick(&lens::probabilities(weights, c.resid_post[layer].row(t))),
        pick(&out),
    ])
}

/// Mask every head of `mask_layer` to self-attention, optionally subtract an
/// intercept from `r_post` at the final position, and compare probabilities.
pub fn suppression_study(
    weights: &Weights,
    prompts: &[PromptInstance],
    mask_layer: Option<usize>,
    subtract: Option<(usize, &[f32])>,
) -> Result<SuppressionReport> {
    if prompts.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let c = weights.config;
    let layer = mask_layer
        .or(subtract.map(|s| s.0))
        .unwrap_or(c.n_layers - 1);
    if layer >= c.n_layers {
        return Err(Error::InvalidNode(format!("layer {layer} out of range")));
    }
    let masked = SuppressionSpec {
        masked_heads: mask_layer
            .map(|l| (0..c.n_heads).map(|h| (l, h)).collect())
            .unwrap_or_default(),
        subtract_vectors: vec![],
    };
    let both = SuppressionSpec {
        subtract_vectors: subtract.iter().map(|(l, v)| (*l, v.to_vec())).collect(),
        ..masked.clone()
    };
    let clean = SuppressionSpec::default();

    let rows = prompts
        .par_iter()
        .map(|p| {
            Ok([
                suppression_probs(weights, p, layer, &clean)?,
                suppression_probs(weights, p, layer, &masked)?,
                suppression_probs(weights, p, layer, &both)?,
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    // mean[condition][node][token]
    let mean = |cond: usize, node: usize, tok: usize| {
        rows.iter().map(|r| r[cond][node][tok]).sum::<f64>() / n
    };

    let nodes = [
        format!("resid_mid:{layer}:final"),
        format!("resid_post:{layer}:final"),
        "output".to_string(),
    ];
    let mask_name = if mask_layer.is_some() {
        "mask"
    } else {
        "clean"
    };
    let both_name = match (mask_layer, subtract) {
        (Some(_), Some(_)) => "mask+subtract",
        (None, Some(_)) => "subtract",
        (_, None) => mask_name,
    };
    let mut records = Vec::new();
    for (ti, token) in [Answer::X, Answer::Y].into_iter().enumerate() {
        let mut push = |node: usize, from: (usize, &str), to: (usize, &str)| {
            records.push(SuppressionRecord {
                node: nodes[node].clone(),
                token,
                intervention: format!("{}->{}", from.1, to.1),
                prob_before: mean(from.0, node, ti),
                prob_after: mean(to.0, node, ti),
            });
        };
        if mask_layer.is_some() {
            for node in 0..3 {
                push(node, (0, "clean"), (1, mask_name));
            }
        }
        if let Some((sl, _)) = subtract {
            if sl == layer {
                push(1, (1, mask_name), (2, both_name));
            }
            push(2, (0, "clean"), (2, both_name));
        }
    }
    Ok(SuppressionReport {
        n_prompts: prompts.len(),
        layer,
        masked_heads: masked.masked_heads.into_iter().collect(),
        subtracted_layer: subtract.map(|s| s.0),
        records,
        intercept_expected_unembedding_cos: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OvProbeSummary {
    pub layer: usize,
    pub head: usize,
    pub k: usize,
    pub hits: usize,
    pub total: usize,
    pub entries: Vec<lens::OvProbeEntry>,
}

// --- runner --------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub written: Vec<PathBuf>,
    pub n_prompts: usize,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let (weights, _) = model::load_weights(&cfg.model)?;
    let dataset = load_dataset(&cfg.task, cfg.dataset_options())?;
    run_loaded(cfg, &weights, &dataset)
}

/// Run with an already loaded model and dataset.
pub fn run_loaded(
    cfg: &ExperimentConfig,
    weights: &Weights,
    dataset: &TaskDataset,
) -> Result<RunSummary> {
    let prompts = &dataset.prompts;
    let provenance = Provenance::new(weights.fingerprint.clone(), cfg.seed, cfg)?;
    let mut out = ReportWriter::new(&cfg.out)?;
    let n_layers = weights.config.n_layers;

    match &cfg.experiment {
        Experiment::Dynamics => {
            let report = lens::layer_dynamics(weights, prompts)?;
            out.json("dynamics.json", &provenance, &report)?;
            out.text("dynamics.csv", &report::dynamics_csv(&report))?;
            out.text("dynamics.svg", &report::dynamics_svg(&report))?;
        }
        Experiment::PatchGrid {
            receiver,
            sender_role,
            answer,
        } => {
            let grid = instrument::patch_grid(weights, prompts, *sender_role, *receiver, *answer)?;
            let (csv, svg) = report::grid_report(&grid);
            out.json("patch_grid.json", &provenance, &grid)?;
            out.text("patch_grid.csv", &csv)?;
            out.text(
                "patch_grid_delta_of_means.csv",
                &report::grid_csv(&grid.delta_of_means),
            )?;
            out.text("patch_grid.svg", &svg)?;
        }
        Experiment::Mover { heads } => {
            let scores = lens::mover_scores(weights, prompts, heads)?;
            out.json("mover.json", &provenance, &scores)?;
            out.text("mover.csv", &report::mover_csv(&scores))?;
            for s in &scores {
                let title = format!(
                    "L{}H{} (r = {})",
                    s.layer,
                    s.head,
                    s.pearson_r.map_or("n/a".into(), |r| format!("{r:.3}"))
                );
                out.text(
                    &format!("mover_L{}H{}.svg", s.layer, s.head),
                    &report::scatter_svg(&title, "attention to X", "⟨a, W_U[X]⟩", &s.points),
                )?;
            }
        }
        Experiment::OvProbe { layer, head, k } => {
            let entries = lens::ov_probe(weights, prompts, *layer, *head, *k)?;
            let summary = OvProbeSummary {
                layer: *layer,
                head: *head,
                k: *k,
                hits: entries.iter().filter(|e| e.hit).count(),
                total: entries.len(),
                entries,
            };
            out.json("ov_probe.json", &provenance, &summary)?;
        }
        Experiment::FitMlp { layers, solver } => {
            let layers: Vec<usize> = if layers.is_empty() {
                (0..n_layers).collect()
            } else {
                layers.clone()
            };
            let solutions = obtain_solutions(weights, prompts, &layers, solver, cfg.seed)?;
            out.json("solutions.json", &provenance, &solutions)?;
            out.text("coefficients.csv", &report::coefficients_csv(&solutions))?;
        }
        Experiment::Project { layer, solver } => {
            let sol = obtain_solutions(weights, prompts, &[*layer], solver, cfg.seed)?;
            let report = projection_study(weights, prompts, *layer, &sol[0].intercept)?;
            out.json("projection.json", &provenance, &report)?;
        }
        Experiment::Fidelity { solver } => {
            let layers: Vec<usize> = (0..n_layers).collect();
            let solutions = obtain_solutions(weights, prompts, &layers, solver, cfg.seed)?;
            let report = decompose::fidelity_check(weights, prompts, &solutions)?;
            out.json("fidelity.json", &provenance, &report)?;
        }
        Experiment::Suppress {
            mask_layer,
            subtract_intercept,
            freq,
            solver,
        } => {
            let intercept = match subtract_intercept {
                Some(l) => Some(
                    obtain_solutions(weights, prompts, &[*l], solver, cfg.seed)?
                        .remove(0)
                        .intercept,
                ),
                None => None,
            };
            let subtract = subtract_intercept.zip(intercept.as_deref());
            let mut report = suppression_study(weights, prompts, *mask_layer, subtract)?;
            if let (Some(path), Some(b)) = (freq, &intercept) {
                let table = FrequencyTable::load_tsv(path, weights.config.d_vocab)?;
                let e = geometry::expected_unembedding(&table, weights)?;
                report.intercept_expected_unembedding_cos = Some(geometry::cosine(b, &e)?);
            }
            out.json("suppression.json", &provenance, &report)?;
        }
    }
    Ok(RunSummary {
        written: out.into_written(),
        n_prompts: prompts.len(),
    })
}
