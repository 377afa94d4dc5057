use std::path::PathBuf;
use std::sync::OnceLock;

use circuit_probe::decompose::{closed_form, collect_all_layers, fidelity_check};
use circuit_probe::instrument::{
    centered_logit, clean_run, mean_node_activation, patch_grid, path_patch_effect, Answer,
    CenteredReadout, Role, RoleNode,
};
use circuit_probe::lens::{
    decode_topk, layer_dynamics, mover_score, node_probability, ov_probe, probabilities,
    value_weighted_pattern, LensSite,
};
use circuit_probe::linalg::{self, max_abs_diff};
use circuit_probe::model::{load_weights, Site, Weights};
use circuit_probe::tasks::{build_dataset, DatasetOptions, PromptInstance, TaskSpec};
use circuit_probe::tokenizer::BpeVocab;

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn weights() -> &'static Weights {
    static W: OnceLock<Weights> = OnceLock::new();
    W.get_or_init(|| {
        load_weights(root().join("assets/golden/tiny_gpt2.safetensors"))
            .unwrap()
            .0
    })
}

fn prompts() -> &'static [PromptInstance] {
    static P: OnceLock<Vec<PromptInstance>> = OnceLock::new();
    P.get_or_init(|| {
        let mut spec = TaskSpec::load(root().join("assets/tasks/country_capital.json")).unwrap();
        spec.templates.truncate(3);
        spec.pairs.truncate(5);
        build_dataset(&spec, &BpeVocab::gpt2(), DatasetOptions::default())
            .unwrap()
            .prompts
    })
}

fn receiver() -> RoleNode {
    RoleNode::new(1, Site::ResidPost, Role::Final)
}

#[test]
fn readout_matches_full_unembedding() {
    let w = weights();
    let cache = clean_run(w, &prompts()[0].tokens).unwrap();
    let v = cache.resid_mid[1].row(3);
    let r = CenteredReadout::new(w);
    for tok in [0u32, 6342, 50256] {
        let a = r.pi(v, tok).unwrap();
        let b = centered_logit(w, v, tok).unwrap();
        assert!((a - b).abs() <= 1e-4 * (1.0 + b.abs()), "{a} vs {b}");
    }
}

#[test]
fn grid_cells_equal_individual_path_patches() {
    let w = weights();
    let ps = &prompts()[..4];
    let grid = patch_grid(w, ps, Role::Final, receiver(), Answer::Y).unwrap();
    assert_eq!(grid.mean_delta.len(), 2);
    for (l, h) in [(0, 1), (1, 3)] {
        let sender = RoleNode::new(l, Site::HeadOut(h), Role::Final);
        let per: Vec<f64> = ps
            .iter()
            .filter_map(|p| path_patch_effect(w, sender, receiver(), p, ps, p.y_token).unwrap())
            .collect();
        let mean = per.iter().sum::<f64>() / per.len() as f64;
        let cell = grid.get(l, h).unwrap();
        assert!(
            (mean - cell).abs() <= 1e-3 * (1.0 + cell.abs()),
            "L{l}H{h}: {mean} vs {cell}"
        );
    }
}

#[test]
fn singleton_intervention_set_has_no_effect() {
    let w = weights();
    let grid = patch_grid(w, &prompts()[..1], Role::Final, receiver(), Answer::Y).unwrap();
    for row in &grid.mean_delta {
        for v in row.iter().flatten() {
            assert!(v.abs() < 1e-3, "{v}");
        }
    }
}

#[test]
fn swapping_original_and_intervention_flips_dominant_effects() {
    let w = weights();
    // same template, different X; the answer token is held fixed
    let (a, b) = (&prompts()[0], &prompts()[1]);
    assert_eq!(a.template_index, b.template_index);
    let answer = a.y_token;
    let effects = |orig: &PromptInstance, other: &PromptInstance| -> Vec<f64> {
        let mut out = Vec::new();
        for l in 0..2 {
            for h in 0..4 {
                let s = RoleNode::new(l, Site::HeadOut(h), Role::Final);
                let d =
                    path_patch_effect(w, s, receiver(), orig, std::slice::from_ref(other), answer)
                        .unwrap()
                        .unwrap();
                out.push(d);
            }
        }
        out
    };
    let readout = CenteredReadout::new(w);
    let pi = |p: &PromptInstance| {
        let c = clean_run(w, &p.tokens).unwrap();
        readout
            .pi(c.resid_post[1].row(p.final_position()), answer)
            .unwrap()
    };
    let (ea, eb) = (effects(a, b), effects(b, a));
    // compare the changes in π themselves, which do not depend on the sign of
    // the clean value
    let na: Vec<f64> = ea.iter().map(|d| d * pi(a)).collect();
    let nb: Vec<f64> = eb.iter().map(|d| d * pi(b)).collect();
    let mut ranked: Vec<usize> = (0..na.len()).collect();
    ranked.sort_by(|&i, &j| (na[j].abs() + nb[j].abs()).total_cmp(&(na[i].abs() + nb[i].abs())));
    for &i in ranked.iter().take(2) {
        assert!(na[i] * nb[i] < 0.0, "head {i}: {} vs {}", na[i], nb[i]);
    }
}

#[test]
fn mean_activation_of_one_prompt_is_that_activation() {
    let w = weights();
    let node = RoleNode::new(1, Site::HeadOut(2), Role::XEnd);
    let p = &prompts()[2];
    let single = mean_node_activation(w, node, std::slice::from_ref(p)).unwrap();
    let cache = clean_run(w, &p.tokens).unwrap();
    assert_eq!(single, cache.node(&node.resolve(p)).unwrap());
    let two = mean_node_activation(w, node, &prompts()[2..4]).unwrap();
    let c2 = clean_run(w, &prompts()[3].tokens).unwrap();
    let u = cache.node(&node.resolve(p)).unwrap();
    let v = c2.node(&node.resolve(&prompts()[3])).unwrap();
    let expect: Vec<f32> = u.iter().zip(v).map(|(a, b)| (a + b) / 2.0).collect();
    assert!(max_abs_diff(&two, &expect) < 1e-6);
    assert!(mean_node_activation(w, node, &[]).is_err());
}

#[test]
fn lens_at_the_last_node_is_the_model_output() {
    let w = weights();
    let report = layer_dynamics(w, prompts()).unwrap();
    let last = report.row(1, LensSite::ResidPost).unwrap();
    assert!((last.prob_y_mean - report.output_prob_y).abs() < 1e-5);
    assert!((last.prob_x_mean - report.output_prob_x).abs() < 1e-5);
    for r in &report.rows {
        assert!((0.0..=1.0).contains(&r.prob_x_mean) && (0.0..=1.0).contains(&r.prob_y_mean));
        assert!(r.prob_x_var >= 0.0);
    }
    assert_eq!(report.rows.len(), 2 * LensSite::ALL.len());
}

#[test]
fn probabilities_normalise_and_agree_with_topk() {
    let w = weights();
    let cache = clean_run(w, &prompts()[0].tokens).unwrap();
    let v = cache.resid_mid[0].row(2);
    let p = probabilities(w, v);
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-5);
    let top = decode_topk(w, v, 10);
    for pair in top.windows(2) {
        assert!(p[pair[0].0 as usize] >= p[pair[1].0 as usize]);
    }
    assert_eq!(
        node_probability(w, v, top[0].0).unwrap(),
        p[top[0].0 as usize]
    );
    assert!(node_probability(w, v, 60000).is_err());
    let greedy = decode_topk(w, cache.resid_post[1].row(cache.seq_len() - 1), 1)[0].0;
    let logits = cache.last_logits();
    let argmax = (0..logits.len())
        .max_by(|&a, &b| logits[a].total_cmp(&logits[b]).then(b.cmp(&a)))
        .unwrap();
    assert_eq!(greedy as usize, argmax);
}

#[test]
fn value_weighting() {
    let w = weights();
    let mut cache = clean_run(w, &prompts()[0].tokens).unwrap();
    let vw = value_weighted_pattern(&cache, 1, 0).unwrap();
    for t in 0..vw.rows {
        let s: f64 = vw.row(t).iter().map(|&x| x as f64).sum();
        assert!((s - 1.0).abs() < 1e-5);
        assert!(vw.row(t)[t + 1..].iter().all(|&x| x == 0.0));
    }
    // equal value norms leave the pattern unchanged
    for t in 0..cache.seq_len() {
        let row = cache.value_vectors[1][0].row_mut(t);
        let n = linalg::norm(row) as f32;
        row.iter_mut().for_each(|x| *x /= n);
    }
    let vw = value_weighted_pattern(&cache, 1, 0).unwrap();
    assert!(max_abs_diff(&vw.data, &cache.attn_pattern[1][0].data) < 1e-5);
    assert!(value_weighted_pattern(&cache, 2, 0).is_err());
}

#[test]
fn mover_and_ov_probe_shapes() {
    let w = weights();
    let m = mover_score(w, prompts(), 1, 2).unwrap();
    assert_eq!(m.points.len(), prompts().len());
    if let Some(r) = m.pearson_r {
        assert!(r.abs() <= 1.0);
    }
    let probe = ov_probe(w, prompts(), 1, 2, 5).unwrap();
    assert_eq!(probe.len(), 5);
    assert!(probe.iter().all(|e| e.top.len() == 5 && e.n_prompts == 3));
}

#[test]
fn exact_substitution_keeps_the_output() {
    // with zeroed MLP matrices every MLP emits its bias, which a fit
    // reproduces exactly through the intercept
    let mut w = weights().clone();
    for l in &mut w.layers {
        l.fc_w.data.iter_mut().for_each(|x| *x = 0.0);
        l.proj_w.data.iter_mut().for_each(|x| *x = 0.0);
    }
    let samples = collect_all_layers(&w, prompts()).unwrap();
    let sols: Vec<_> = samples
        .iter()
        .enumerate()
        .map(|(l, s)| closed_form(l, s).unwrap())
        .collect();
    let f = fidelity_check(&w, prompts(), &sols).unwrap();
    assert!(f.kl.abs() < 1e-6, "kl {}", f.kl);
    assert!((f.mean_logit_y_original - f.mean_logit_y_substituted).abs() < 1e-3);
    assert!(fidelity_check(&w, prompts(), &sols[..1]).is_err());
}
