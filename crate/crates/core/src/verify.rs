//! The acceptance suite: each criterion reports what it measured, what it
//! expected, and PASS, FAIL or SKIPPED.
//!
//! Criteria that need GPT-2 small are SKIPPED unless weights are found via
//! [`VerifyOptions::model`], `CIRCUIT_PROBE_MODEL`, or
//! `$CIRCUIT_PROBE_CACHE/model.safetensors`.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decompose::{self, FitHyper, LayerSample, RegressionSolution};
use crate::error::{Error, Result};
use crate::experiments::{self, SolverOptions};
use crate::geometry::{self, FrequencyTable};
use crate::instrument::{self, Answer, Role, RoleNode};
use crate::lens::{self, LensSite};
use crate::linalg;
use crate::model::{self, ModelConfig, NodeId, PatchSpec, Site, Weights};
use crate::tasks::{DatasetOptions, TaskDataset};
use crate::tokenizer::BpeVocab;

pub const MODEL_ENV: &str = "CIRCUIT_PROBE_MODEL";
pub const CACHE_ENV: &str = "CIRCUIT_PROBE_CACHE";
/// Golden GPT-2 small logits looked up in the cache directory.
pub const GPT2_GOLDEN: &str = "gpt2_logits.json";
/// Token-frequency table looked up in the cache directory.
pub const FREQ_FILE: &str = "word_freq.tsv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Status {
    Pass,
    Fail,
    Skipped,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skipped => "SKIPPED",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub id: u8,
    pub name: String,
    pub status: Status,
    pub measured: String,
    pub expected: String,
    pub tolerance: String,
    pub note: String,
}

impl fmt::Display for CriterionResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:>2} {:<8} {:<24} measured: {} | expected: {} | tolerance: {}",
            self.id, self.status, self.name, self.measured, self.expected, self.tolerance
        )?;
        if !self.note.is_empty() {
            write!(f, " | {}", self.note)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    /// Directory holding `tasks/` and `golden/`.
    pub assets: PathBuf,
    pub model: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub freq: Option<PathBuf>,
    /// Use the normal-equation solver instead of gradient descent.
    pub closed_form: bool,
    pub seed: u64,
}

impl VerifyOptions {
    /// Bundled assets plus whatever the environment points at.
    pub fn from_env() -> Self {
        let cache_dir = std::env::var_os(CACHE_ENV).map(PathBuf::from);
        let model = std::env::var_os(MODEL_ENV)
            .map(PathBuf::from)
            .or_else(|| cache_dir.as_ref().map(|d| d.join("model.safetensors")))
            .filter(|p| p.is_file());
        let freq = cache_dir
            .as_ref()
            .map(|d| d.join(FREQ_FILE))
            .filter(|p| p.is_file());
        Self {
            assets: bundled_assets(),
            model,
            cache_dir,
            freq,
            closed_form: false,
            seed: 0,
        }
    }
}

pub fn bundled_assets() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../assets");
    dir.canonicalize().unwrap_or(dir)
}

struct Check {
    id: u8,
    name: &'static str,
    expected: String,
    tolerance: String,
}

impl Check {
    fn new(
        id: u8,
        name: &'static str,
        expected: impl Into<String>,
        tolerance: impl Into<String>,
    ) -> Self {
        Self {
            id,
            name,
            expected: expected.into(),
            tolerance: tolerance.into(),
        }
    }

    fn result(self, status: Status, measured: String, note: impl Into<String>) -> CriterionResult {
        CriterionResult {
            id: self.id,
            name: self.name.into(),
            status,
            measured,
            expected: self.expected,
            tolerance: self.tolerance,
            note: note.into(),
        }
    }

    fn skipped(self, note: impl Into<String>) -> CriterionResult {
        self.result(Status::Skipped, "-".into(), note)
    }

    /// Evaluate `f`, turning an error into a FAIL that names it.
    fn eval(self, f: impl FnOnce() -> Result<(bool, String)>) -> CriterionResult {
        match f() {
            Ok((ok, measured)) => {
                self.result(if ok { Status::Pass } else { Status::Fail }, measured, "")
            }
            Err(e) => self.result(Status::Fail, "error".into(), e.to_string()),
        }
    }
}

/// Borrow a result computed once and used by several criteria.
fn shared<T>(r: &Result<T>) -> Result<&T> {
    r.as_ref().map_err(|e| Error::Task(e.to_string()))
}

fn within(x: f64, target: f64, tol: f64) -> bool {
    (x - target).abs() <= tol
}

// --- criterion 1 -----------------------------------------------------------

#[derive(Deserialize)]
struct GoldenLogits {
    token_ids: Vec<u32>,
    final_logits_last_position: Vec<f32>,
}

/// Number of golden prompts and the worst max-abs logit difference.
pub fn golden_parity(weights: &Weights, golden: &Path) -> Result<(usize, f32)> {
    let text = std::fs::read_to_string(golden).map_err(|e| Error::io(golden, e))?;
    let cases: Vec<GoldenLogits> = serde_json::from_str(&text)?;
    let mut worst = 0f32;
    for c in &cases {
        let cache = instrument::clean_run(weights, &c.token_ids)?;
        if c.final_logits_last_position.len() != cache.last_logits().len() {
            return Err(Error::Dimension {
                expected: cache.last_logits().len(),
                actual: c.final_logits_last_position.len(),
            });
        }
        worst = worst.max(linalg::max_abs_diff(
            cache.last_logits(),
            &c.final_logits_last_position,
        ));
    }
    Ok((cases.len(), worst))
}

fn parity(opts: &VerifyOptions, gpt2: Option<&Result<Weights>>) -> CriterionResult {
    let check = Check::new(1, "forward parity", "≥5 prompts", "max-abs ≤ 1e-3");
    let golden = opts.assets.join("golden");
    let tiny = model::load_weights(golden.join("tiny_gpt2.safetensors"))
        .and_then(|(w, _)| golden_parity(&w, &golden.join("tiny_gpt2_logits.json")));
    let (n, diff) = match tiny {
        Ok(v) => v,
        Err(e) => return check.result(Status::Fail, "error".into(), format!("tiny model: {e}")),
    };
    let mut ok = n >= 5 && diff <= 1e-3;
    let mut measured = format!("tiny model: {n} prompts, max-abs {diff:.2e}");
    let note = match (gpt2, opts.cache_dir.as_ref().map(|d| d.join(GPT2_GOLDEN))) {
        (Some(Err(e)), _) => {
            ok = false;
            format!("GPT-2 weights failed to load: {e}")
        }
        (Some(Ok(w)), Some(g)) if g.is_file() => match golden_parity(w, &g) {
            Ok((n, d)) => {
                ok &= n >= 5 && d <= 1e-3;
                measured.push_str(&format!("; gpt2: {n} prompts, max-abs {d:.2e}"));
                String::new()
            }
            Err(e) => {
                ok = false;
                format!("gpt2 golden: {e}")
            }
        },
        (Some(Ok(_)), _) => format!("no ${CACHE_ENV}/{GPT2_GOLDEN}; GPT-2 parity not evaluated"),
        (None, _) => "GPT-2 weights absent; tiny reference model only".into(),
    };
    check.result(if ok { Status::Pass } else { Status::Fail }, measured, note)
}

// --- criteria 2-11 ---------------------------------------------------------

const GPT2_CHECKS: [(u8, &str); 10] = [
    (2, "dynamics"),
    (3, "within-layer-10 table"),
    (4, "patch grid"),
    (5, "mover scores"),
    (6, "OV probe"),
    (7, "regression coefficients"),
    (8, "fidelity"),
    (9, "geometry"),
    (10, "suppression"),
    (11, "intercept vs E[W_U]"),
];

fn skip_all(note: &str) -> Vec<CriterionResult> {
    GPT2_CHECKS
        .iter()
        .map(|&(id, name)| Check::new(id, name, "-", "-").skipped(note))
        .collect()
}

fn is_gpt2_small(c: &ModelConfig) -> bool {
    (c.n_layers, c.n_heads, c.d_model, c.d_vocab) == (12, 12, 768, 50257)
}

const LAYER9_TABLE: [f64; 13] = [
    -0.05, -0.24, 0.04, -0.01, -0.26, -0.13, -0.17, -0.04, 0.08, -0.09, -0.08, -0.64, 0.05,
];
/// `(vector, cos with W_U[X], cos with W_U[Y])`
const RAW_COSINES: [(&str, f64, f64); 3] = [
    ("mlp_out", 0.048, 0.034),
    ("resid_mid", 0.213, 0.197),
    ("resid_post", 0.160, 0.155),
];

fn argmax(xs: &[f64]) -> usize {
    (0..xs.len())
        .max_by(|&a, &b| xs[a].total_cmp(&xs[b]))
        .unwrap_or(0)
}

fn argmin(xs: &[f64]) -> usize {
    (0..xs.len())
        .min_by(|&a, &b| xs[a].total_cmp(&xs[b]))
        .unwrap_or(0)
}

/// Criteria 2-11 against one model. Any model shape is accepted so the
/// pipeline can be exercised on synthetic weights; the head indices named by
/// the criteria must exist.
pub fn model_criteria(weights: &Weights, opts: &VerifyOptions) -> Vec<CriterionResult> {
    let tasks = opts.assets.join("tasks");
    let load = |name: &str| {
        experiments::load_dataset(
            &tasks.join(name),
            DatasetOptions {
                seed: opts.seed,
                ..Default::default()
            },
        )
    };
    let country = load("country_capital.json");
    let product = load("product_developer.json");
    let data = shared::<TaskDataset>;
    let n_layers = weights.config.n_layers;
    let last = n_layers.saturating_sub(1);
    let mut out = Vec::new();

    // 2, 3
    let dynamics = data(&country).and_then(|d| lens::layer_dynamics(weights, &d.prompts));
    out.push(
        Check::new(
            2,
            "dynamics",
            "prob(X)>5% first at L9; prob(Y)>prob(X) first at L10; both decline in last two layers",
            "exact layers",
        )
        .eval(|| {
            let r = shared(&dynamics)?;
            let s = r.series(LensSite::ResidPost);
            let first_x = s.iter().position(|p| p.0 > 0.05);
            let first_y = s.iter().position(|p| p.1 > p.0);
            let decline = |k: fn(&(f64, f64)) -> f64| {
                n_layers >= 3 && k(&s[last]) < k(&s[last - 1]).max(k(&s[last - 2]))
            };
            let (dx, dy) = (decline(|p| p.0), decline(|p| p.1));
            Ok((
                first_x == Some(9) && first_y == Some(10) && dx && dy,
                format!("first X>5%: {first_x:?}; first Y>X: {first_y:?}; X declines: {dx}; Y declines: {dy}"),
            ))
        }),
    );
    out.push(
        Check::new(
            3,
            "within-layer-10 table",
            "r_pre 46/20, r_mid 54/28, m 0/0, r_post 29/32 (%)",
            "±8 points",
        )
        .eval(|| {
            let r = shared(&dynamics)?;
            let want = [
                (LensSite::ResidPre, 46.0, 20.0),
                (LensSite::ResidMid, 54.0, 28.0),
                (LensSite::Mlp, 0.0, 0.0),
                (LensSite::ResidPost, 29.0, 32.0),
            ];
            let mut ok = true;
            let mut parts = Vec::new();
            for (site, x, y) in want {
                let row = r
                    .row(10, site)
                    .ok_or_else(|| Error::InvalidNode("layer 10 missing".into()))?;
                let (px, py) = (100.0 * row.prob_x_mean, 100.0 * row.prob_y_mean);
                ok &= within(px, x, 8.0) && within(py, y, 8.0);
                parts.push(format!("{} {px:.1}/{py:.1}", site.name()));
            }
            Ok((ok, parts.join(", ")))
        }),
    );

    // 4
    out.push(
        Check::new(
            4,
            "patch grid",
            "top-2 = {L9H8, L10H0}; L10H7, L11H10 Δπ > 0; product: L10H0 in top 3, L9H8 not",
            "ranks",
        )
        .eval(|| {
            let receiver = RoleNode::new(last, Site::ResidPost, Role::Final);
            let grid = instrument::patch_grid(
                weights,
                &data(&country)?.prompts,
                Role::Final,
                receiver,
                Answer::Y,
            )?;
            let ranked = grid.ranked();
            let mut top2: Vec<(usize, usize)> = ranked.iter().take(2).map(|c| (c.0, c.1)).collect();
            top2.sort_unstable();
            let cell = |g: &instrument::PatchGrid, l, h| {
                g.mean_delta
                    .get(l)
                    .and_then(|r: &Vec<Option<f64>>| r.get(h).copied().flatten())
            };
            let (n7, n10) = (cell(&grid, 10, 7), cell(&grid, 11, 10));
            let pgrid = instrument::patch_grid(
                weights,
                &data(&product)?.prompts,
                Role::Final,
                receiver,
                Answer::Y,
            )?;
            let prank = |l, h| pgrid.ranked().iter().position(|c| (c.0, c.1) == (l, h));
            let (p100, p98) = (prank(10, 0), prank(9, 8));
            let ok = top2 == [(9, 8), (10, 0)]
                && n7.is_some_and(|v| v > 0.0)
                && n10.is_some_and(|v| v > 0.0)
                && p100.is_some_and(|r| r < 3)
                && p98.is_none_or(|r| r >= 3);
            let fmt = |v: Option<f64>| v.map_or("n/a".into(), |v| format!("{v:+.1}%"));
            Ok((
                ok,
                format!(
                    "top-2 {top2:?}; L10H7 {}; L11H10 {}; product rank L10H0 {:?}, L9H8 {:?}",
                    fmt(n7),
                    fmt(n10),
                    p100.map(|r| r + 1),
                    p98.map(|r| r + 1)
                ),
            ))
        }),
    );

    // 5, 6
    out.push(
        Check::new(
            5,
            "mover scores",
            "r(L9H8) ∈ [0.62, 0.92]; r(L10H0) ∈ [0.80, 1.00]",
            "interval",
        )
        .eval(|| {
            let s = lens::mover_scores(weights, &data(&country)?.prompts, &[(9, 8), (10, 0)])?;
            let (a, b) = (s[0].pearson_r, s[1].pearson_r);
            let ok = a.is_some_and(|r| (0.62..=0.92).contains(&r))
                && b.is_some_and(|r| (0.80..=1.00).contains(&r));
            Ok((ok, format!("L9H8 {a:.3?}, L10H0 {b:.3?}")))
        }),
    );
    out.push(
        Check::new(
            6,
            "OV probe",
            "≥10 of 15 capitals in top-5 of L9H8 OV",
            "count",
        )
        .eval(|| {
            let e = lens::ov_probe(weights, &data(&country)?.prompts, 9, 8, 5)?;
            let hits = e.iter().filter(|e| e.hit).count();
            Ok((hits >= 10, format!("{hits} of {}", e.len())))
        }),
    );

    // 7-11 share one set of regression solutions
    let solver = SolverOptions {
        closed_form: opts.closed_form,
        ..Default::default()
    };
    let solutions: Result<Vec<RegressionSolution>> = data(&country).and_then(|d| {
        experiments::obtain_solutions(
            weights,
            &d.prompts,
            &(0..n_layers).collect::<Vec<_>>(),
            &solver,
            opts.seed,
        )
    });
    let sol = |l: usize| -> Result<&RegressionSolution> {
        shared(&solutions)?
            .get(l)
            .ok_or_else(|| Error::InvalidNode(format!("no solution for layer {l}")))
    };
    let method = if opts.closed_form {
        "closed form"
    } else {
        "gradient descent"
    };
    let mut c7 = Check::new(
        7,
        "regression coefficients",
        "L9: 3 positive, argmax w=8, argmin w=11, all ±0.15 of table; L11: majority heads >0, argmax w=5, w5 = 1.55; APE ≤ 3%",
        "±0.15 (L9), ±0.3 (w11,5)",
    )
    .eval(|| {
        let s9 = sol(9)?;
        let c9 = s9.coefficients();
        let positive = c9.iter().filter(|&&c| c > 0.0).count();
        let table_dev = c9.iter().zip(LAYER9_TABLE).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let s11 = sol(11)?;
        let pos11 = s11.w_head.iter().filter(|&&w| w > 0.0).count();
        let w5 = s11.w_head.get(5).copied().unwrap_or(f64::NAN);
        let max_ape = shared(&solutions)?.iter().map(|s| s.ape).fold(0.0, f64::max);
        let ok = positive == 3
            && argmax(&s9.w_head) == 8
            && argmin(&s9.w_head) == 11
            && table_dev <= 0.15
            && 2 * pos11 > s11.w_head.len()
            && argmax(&s11.w_head) == 5
            && within(w5, 1.55, 0.3)
            && max_ape <= 3.0;
        Ok((
            ok,
            format!(
                "L9 positives {positive}, argmax {}, argmin {}, max table dev {table_dev:.3}; L11 positive heads {pos11}, argmax {}, w5 {w5:.3}; max APE {max_ape:.2}%",
                argmax(&s9.w_head),
                argmin(&s9.w_head),
                argmax(&s11.w_head)
            ),
        ))
    });
    c7.note = format!("solver: {method}");
    out.push(c7);

    out.push(
        Check::new(
            8,
            "fidelity",
            "mean KL ≤ 0.35; |Δ mean π(Y)| ≤ 0.5",
            "bounds",
        )
        .eval(|| {
            let r =
                decompose::fidelity_check(weights, &data(&country)?.prompts, shared(&solutions)?)?;
            let d = (r.mean_logit_y_original - r.mean_logit_y_substituted).abs();
            Ok((
                r.kl <= 0.35 && d <= 0.5,
                format!(
                    "KL {:.3}; π(Y) {:.2} → {:.2}",
                    r.kl, r.mean_logit_y_original, r.mean_logit_y_substituted
                ),
            ))
        }),
    );

    out.push(
        Check::new(
            9,
            "geometry",
            "cos(b10 proj) ≥ 0.85; cos(m10 proj) ∈ [0.25, 0.47]; raw m/r_mid/r_post vs X,Y = .048/.034, .213/.197, .160/.155",
            "±0.05 (raw)",
        )
        .eval(|| {
            let r = experiments::projection_study(weights, &data(&country)?.prompts, 10, &sol(10)?.intercept)?;
            let mut ok = r.b.cos_projected >= 0.85 && (0.25..=0.47).contains(&r.m.cos_projected);
            let mut raw = Vec::new();
            for ((name, x, y), got) in RAW_COSINES.iter().zip(&r.raw) {
                debug_assert_eq!(*name, got.vector);
                ok &= within(got.with_x, *x, 0.05) && within(got.with_y, *y, 0.05);
                raw.push(format!("{:.3}/{:.3}", got.with_x, got.with_y));
            }
            Ok((
                ok,
                format!(
                    "b proj {:.3}; m proj {:.3}; raw {}",
                    r.b.cos_projected,
                    r.m.cos_projected,
                    raw.join(", ")
                ),
            ))
        }),
    );

    out.push(
        Check::new(
            10,
            "suppression",
            "masked r11_mid prob(Y) 31.68%; masked + b11 subtracted, final prob(Y) 25.93%",
            "±8 / ±6 points",
        )
        .eval(|| {
            let b = &sol(last)?.intercept;
            let r = experiments::suppression_study(
                weights,
                &data(&country)?.prompts,
                Some(last),
                Some((last, b)),
            )?;
            let mid = r
                .find(&format!("resid_mid:{last}:final"), Answer::Y, "clean->mask")
                .ok_or_else(|| Error::Task("missing r_mid record".into()))?;
            let fin = r
                .find("output", Answer::Y, "clean->mask+subtract")
                .ok_or_else(|| Error::Task("missing output record".into()))?;
            let (m, f) = (100.0 * mid.prob_after, 100.0 * fin.prob_after);
            Ok((
                within(m, 31.68, 8.0) && within(f, 25.93, 6.0),
                format!(
                    "r_mid {:.2}% → {m:.2}%; final {:.2}% → {f:.2}%",
                    100.0 * mid.prob_before,
                    100.0 * fin.prob_before
                ),
            ))
        }),
    );

    let c11 = Check::new(
        11,
        "intercept vs E[W_U]",
        "cos(b11, E[W_U]) ≥ 0.85",
        "bound",
    );
    out.push(match &opts.freq {
        None => c11.skipped(format!(
            "no frequency file (set --freq or ${CACHE_ENV}/{FREQ_FILE})"
        )),
        Some(path) => c11.eval(|| {
            let table = FrequencyTable::load_tsv(path, weights.config.d_vocab)?;
            let e = geometry::expected_unembedding(&table, weights)?;
            let c = geometry::cosine(&sol(last)?.intercept, &e)?;
            Ok((c >= 0.85, format!("{c:.3}")))
        }),
    });
    out
}

// --- criterion 12 ------------------------------------------------------------

/// `(name, passed, detail)` for each weight-free property.
pub fn property_checks(assets: &Path, seed: u64) -> Vec<(&'static str, bool, String)> {
    let mut out = Vec::new();
    let mut record = |name, r: Result<(bool, String)>| match r {
        Ok((ok, d)) => out.push((name, ok, d)),
        Err(e) => out.push((name, false, e.to_string())),
    };
    let weights = Weights::random(ModelConfig::toy(3, 4, 8, 97), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens: Vec<u32> = (0..12).map(|_| rng.random_range(0..97)).collect();

    record(
        "residual additivity",
        (|| {
            let c = model::forward_with_cache(&weights, &tokens, &[])?;
            let mut worst = 0f32;
            for l in 0..c.n_layers {
                for t in 0..tokens.len() {
                    let mut mid = linalg::add(c.resid_pre[l].row(t), &c.heads_sum(l, t));
                    linalg::add_assign(&mut mid, &c.attn_bias[l]);
                    worst = worst.max(linalg::max_abs_diff(&mid, c.resid_mid[l].row(t)));
                    let post = linalg::add(c.resid_mid[l].row(t), c.mlp_out[l].row(t));
                    worst = worst.max(linalg::max_abs_diff(&post, c.resid_post[l].row(t)));
                }
            }
            Ok((worst <= 1e-4, format!("{worst:.1e}")))
        })(),
    );

    record(
        "self-patch no-op",
        (|| {
            let clean = model::forward_with_cache(&weights, &tokens, &[])?;
            let mut identical = true;
            for l in 0..weights.config.n_layers {
                for site in [
                    Site::ResidPre,
                    Site::ResidMid,
                    Site::MlpOut,
                    Site::ResidPost,
                    Site::HeadOut(1),
                ] {
                    let node = NodeId::new(l, site, 5);
                    let spec = PatchSpec {
                        node,
                        replacement: clean.node(&node)?.to_vec(),
                    };
                    let p = model::forward_with_cache(&weights, &tokens, &[spec])?;
                    identical &= p.final_logits.data == clean.final_logits.data;
                }
            }
            Ok((identical, format!("bit-identical: {identical}")))
        })(),
    );

    record(
        "projection idempotence",
        (|| {
            let mut worst = 0f32;
            for _ in 0..50 {
                let mut v =
                    || -> Vec<f32> { (0..32).map(|_| rng.random_range(-1.0..1.0)).collect() };
                let (x, a, b) = (v(), v(), v());
                let once = geometry::project_onto_span(&x, &a, &b)?;
                let twice = geometry::project_onto_span(&once, &a, &b)?;
                worst = worst.max(linalg::max_abs_diff(&once, &twice));
            }
            Ok((worst <= 1e-5, format!("{worst:.1e}")))
        })(),
    );

    record("softmax normalization", {
        let mut worst = 0f64;
        for scale in [1.0f32, 30.0, 1000.0] {
            let logits: Vec<f32> = (0..500)
                .map(|_| scale * rng.random_range(-1.0..1.0))
                .collect();
            worst = worst.max((linalg::softmax64(&logits).iter().sum::<f64>() - 1.0).abs());
        }
        let p = lens::probabilities(&weights, weights.token_embedding.row(3));
        worst = worst.max((p.iter().sum::<f64>() - 1.0).abs());
        Ok((worst <= 1e-9, format!("{worst:.1e}")))
    });

    record(
        "tokenizer round-trip",
        (|| {
            #[derive(Deserialize)]
            struct Case {
                text: String,
                ids: Vec<u32>,
            }
            let path = assets.join("golden/tokenization.json");
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let cases: Vec<Case> = serde_json::from_str(&text)?;
            let vocab = BpeVocab::gpt2();
            let mut bad = 0;
            for c in &cases {
                let ids = vocab.encode(&c.text);
                if ids != c.ids || vocab.decode(&ids)? != c.text {
                    bad += 1;
                }
            }
            Ok((
                bad == 0,
                format!("{} golden strings, {bad} mismatches", cases.len()),
            ))
        })(),
    );

    let planted = |seed: u64, noise: f64| planted_samples(seed, noise);
    record(
        "planted regression recovery",
        (|| {
            let (w, b, samples) = planted(seed ^ 0x5eed, 0.0);
            let s = decompose::fit_layer(0, &samples, &FitHyper::default())?;
            let dev = s
                .coefficients()
                .iter()
                .zip(&w)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
                .max(linalg::max_abs_diff(&s.intercept, &b) as f64);
            Ok((dev <= 1e-3, format!("max deviation {dev:.1e}")))
        })(),
    );

    record(
        "GD vs closed form",
        (|| {
            let (_, _, samples) = planted(seed ^ 0xc10, 0.7);
            let gd = decompose::fit_layer(0, &samples, &FitHyper::default())?;
            let exact = decompose::closed_form(0, &samples)?;
            let dev = gd
                .coefficients()
                .iter()
                .zip(exact.coefficients())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            Ok((dev <= 1e-2, format!("max deviation {dev:.1e}")))
        })(),
    );
    out
}

/// Samples whose MLP output is an exact linear function of the inputs plus
/// Gaussian-ish noise: `(coefficients, intercept, samples)`.
fn planted_samples(seed: u64, noise: f64) -> (Vec<f64>, Vec<f32>, Vec<LayerSample>) {
    const HEADS: usize = 12;
    const D: usize = 48;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // sum of uniforms: cheap, zero-mean, unit-variance
    let mut normal = |s: f64| -> f32 {
        ((0..12).map(|_| rng.random::<f64>()).sum::<f64>() - 6.0) as f32 * s as f32
    };
    let w: Vec<f64> = (0..=HEADS)
        .map(|k| -0.8 + 2.4 * ((k * 7919 + seed as usize) % 97) as f64 / 97.0)
        .collect();
    let b: Vec<f32> = (0..D).map(|_| normal(1.0)).collect();
    let samples = (0..225)
        .map(|i| {
            let feats: Vec<Vec<f32>> = (0..=HEADS)
                .map(|k| (0..D).map(|_| normal(0.5 + 0.1 * k as f64)).collect())
                .collect();
            let mut m = b.clone();
            for (k, f) in feats.iter().enumerate() {
                linalg::axpy(&mut m, w[k] as f32, f);
            }
            for mi in &mut m {
                *mi += normal(noise);
            }
            let mut heads = feats;
            let r_pre = heads.pop().expect("nonempty");
            LayerSample {
                prompt_id: i,
                heads,
                r_pre,
                m,
            }
        })
        .collect();
    (w, b, samples)
}

fn properties(opts: &VerifyOptions) -> CriterionResult {
    let checks = property_checks(&opts.assets, opts.seed);
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let measured = checks
        .iter()
        .map(|(n, ok, d)| format!("{n}: {} ({d})", if *ok { "ok" } else { "FAILED" }))
        .collect::<Vec<_>>()
        .join("; ");
    Check::new(12, "property suites", "all properties hold", "per property").result(
        if failed.is_empty() {
            Status::Pass
        } else {
            Status::Fail
        },
        measured,
        if failed.is_empty() {
            String::new()
        } else {
            format!("failed: {}", failed.join(", "))
        },
    )
}

// --- driver --------------------------------------------------------------------

pub fn run(opts: &VerifyOptions) -> Vec<CriterionResult> {
    let gpt2 = opts
        .model
        .as_ref()
        .map(|p| model::load_weights(p).map(|(w, _)| w));
    let mut results = vec![parity(opts, gpt2.as_ref())];
    results.extend(match &gpt2 {
        None => skip_all(&format!(
            "GPT-2 small weights not found (set ${MODEL_ENV} or ${CACHE_ENV})"
        )),
        Some(Err(e)) => GPT2_CHECKS
            .iter()
            .map(|&(id, name)| {
                Check::new(id, name, "-", "-").result(
                    Status::Fail,
                    "error".into(),
                    format!("weights failed to load: {e}"),
                )
            })
            .collect(),
        Some(Ok(w)) if !is_gpt2_small(&w.config) => skip_all("weights are not GPT-2 small"),
        Some(Ok(w)) => model_criteria(w, opts),
    });
    results.push(properties(opts));
    results
}

pub fn format_table(results: &[CriterionResult]) -> String {
    let mut s = String::new();
    for r in results {
        s.push_str(&r.to_string());
        s.push('\n');
    }
    let count = |st| results.iter().filter(|r| r.status == st).count();
    s.push_str(&format!(
        "{} passed, {} failed, {} skipped\n",
        count(Status::Pass),
        count(Status::Fail),
        count(Status::Skipped)
    ));
    s
}
