use circuit_probe::instrument::{
    activation_patch, centered_logit, delta_logit, path_patched_value, run_suppressed,
    SuppressionSpec,
};
use circuit_probe::linalg::{max_abs_diff, sub};
use circuit_probe::model::{
    forward_with_cache, ActivationCache, ModelConfig, NodeId, PatchSpec, Site, Weights,
};

fn toy() -> Weights {
    Weights::random(ModelConfig::toy(4, 3, 8, 83), 99)
}

const TOKENS: [u32; 6] = [7, 21, 3, 64, 12, 40];

fn module_nodes(n_layers: usize, n_heads: usize, seq: usize) -> Vec<NodeId> {
    let mut out = Vec::new();
    for l in 0..n_layers {
        for t in 0..seq {
            for h in 0..n_heads {
                out.push(NodeId::new(l, Site::HeadOut(h), t as i64));
            }
            out.push(NodeId::new(l, Site::MlpOut, t as i64));
        }
    }
    out
}

/// Freeze every module output at its clean value except the sender, which
/// carries `value`, and the receiver itself; then read the receiver.
fn graph_surgery(
    w: &Weights,
    clean: &ActivationCache,
    sender: NodeId,
    value: &[f32],
    receiver: NodeId,
) -> Vec<f32> {
    let c = w.config;
    let patches: Vec<PatchSpec> = module_nodes(c.n_layers, c.n_heads, TOKENS.len())
        .into_iter()
        .filter(|n| !(n.layer == receiver.layer && n.site == receiver.site))
        .map(|node| PatchSpec {
            node,
            replacement: if node == sender {
                value.to_vec()
            } else {
                clean.node(&node).unwrap().to_vec()
            },
        })
        .collect();
    let cache = forward_with_cache(w, &TOKENS, &patches).unwrap();
    cache.node(&receiver).unwrap().to_vec()
}

#[test]
fn path_patching_matches_graph_surgery() {
    let w = toy();
    let clean = forward_with_cache(&w, &TOKENS, &[]).unwrap();
    let value: Vec<f32> = (0..w.config.d_model)
        .map(|i| (i as f32 * 0.41).sin())
        .collect();
    let cases = [
        (
            NodeId::new(1, Site::HeadOut(2), 5),
            NodeId::new(3, Site::ResidPost, 5),
        ),
        (
            NodeId::new(0, Site::MlpOut, 2),
            NodeId::new(2, Site::ResidMid, 2),
        ),
        (
            NodeId::new(1, Site::HeadOut(0), 5),
            NodeId::new(1, Site::MlpOut, 5),
        ),
        (
            NodeId::new(0, Site::HeadOut(1), 2),
            NodeId::new(2, Site::HeadOut(1), 5),
        ),
        (
            NodeId::new(1, Site::MlpOut, 4),
            NodeId::new(3, Site::HeadOut(0), 4),
        ),
        (
            NodeId::new(2, Site::HeadOut(2), 3),
            NodeId::new(2, Site::ResidMid, 3),
        ),
    ];
    for (sender, receiver) in cases {
        let fast = path_patched_value(&w, &clean, sender, &value, receiver).unwrap();
        let slow = graph_surgery(&w, &clean, sender, &value, receiver);
        assert!(max_abs_diff(&fast, &slow) < 1e-4, "{sender} -> {receiver}");
    }
}

#[test]
fn path_patching_requires_upstream_sender() {
    let w = toy();
    let clean = forward_with_cache(&w, &TOKENS, &[]).unwrap();
    let v = vec![0.0; w.config.d_model];
    let bad = [
        (
            NodeId::new(2, Site::HeadOut(0), 5),
            NodeId::new(2, Site::HeadOut(1), 5),
        ),
        (
            NodeId::new(2, Site::MlpOut, 5),
            NodeId::new(2, Site::ResidMid, 5),
        ),
        (
            NodeId::new(1, Site::HeadOut(0), 4),
            NodeId::new(3, Site::ResidPost, 5),
        ),
        (
            NodeId::new(0, Site::HeadOut(0), 5),
            NodeId::new(1, Site::HeadOut(0), 4),
        ),
        (
            NodeId::new(0, Site::ResidPost, 5),
            NodeId::new(1, Site::ResidPost, 5),
        ),
    ];
    for (s, r) in bad {
        assert!(
            path_patched_value(&w, &clean, s, &v, r).is_err(),
            "{s} -> {r}"
        );
    }
}

#[test]
fn clean_sender_value_has_no_effect() {
    let w = toy();
    let clean = forward_with_cache(&w, &TOKENS, &[]).unwrap();
    let s = NodeId::new(0, Site::HeadOut(1), 3);
    let r = NodeId::new(3, Site::HeadOut(2), 5);
    let v = path_patched_value(&w, &clean, s, clean.node(&s).unwrap(), r).unwrap();
    assert!(max_abs_diff(&v, clean.node(&r).unwrap()) < 1e-5);
    let pi = centered_logit(&w, &v, 5).unwrap();
    let base = centered_logit(&w, clean.node(&r).unwrap(), 5).unwrap();
    assert!(delta_logit(base, pi).is_none_or(|d| d.abs() < 1e-3));
}

#[test]
fn self_patch_every_node_is_bit_identical() {
    let w = toy();
    let clean = forward_with_cache(&w, &TOKENS, &[]).unwrap();
    let c = w.config;
    for l in 0..c.n_layers {
        let mut sites = vec![
            Site::ResidPre,
            Site::ResidMid,
            Site::MlpOut,
            Site::ResidPost,
        ];
        sites.extend((0..c.n_heads).map(Site::HeadOut));
        for site in sites {
            let node = NodeId::new(l, site, -1);
            let spec = PatchSpec {
                node,
                replacement: clean.node(&node).unwrap().to_vec(),
            };
            let patched = activation_patch(&w, &TOKENS, &[spec]).unwrap();
            assert_eq!(patched.final_logits.data, clean.final_logits.data, "{node}");
        }
    }
}

#[test]
fn suppression_masks_and_subtracts() {
    let w = toy();
    let clean = forward_with_cache(&w, &TOKENS, &[]).unwrap();
    let empty = run_suppressed(&w, &TOKENS, &SuppressionSpec::default()).unwrap();
    assert_eq!(empty.last_logits(), clean.last_logits());

    let b: Vec<f32> = (0..w.config.d_model).map(|i| i as f32 * 0.01).collect();
    let spec = SuppressionSpec {
        masked_heads: (0..3).map(|h| (3, h)).collect(),
        subtract_vectors: vec![(3, b.clone())],
    };
    let s = run_suppressed(&w, &TOKENS, &spec).unwrap();
    for h in 0..3 {
        let p = &s.attn_pattern[3][h];
        for t in 0..TOKENS.len() {
            for u in 0..TOKENS.len() {
                assert_eq!(p.get(t, u), if t == u { 1.0 } else { 0.0 });
            }
        }
    }
    let last = TOKENS.len() - 1;
    let unsubtracted = circuit_probe::linalg::add(s.resid_post[3].row(last), &b);
    let mlp_sum = circuit_probe::linalg::add(s.resid_mid[3].row(last), s.mlp_out[3].row(last));
    assert!(max_abs_diff(&unsubtracted, &mlp_sum) < 1e-5);
    // earlier layers are untouched
    assert_eq!(s.resid_post[2].data, clean.resid_post[2].data);
    // position 0 can only attend to itself, so masking leaves it unchanged
    assert!(
        max_abs_diff(
            &sub(s.resid_post[3].row(0), clean.resid_post[3].row(0)),
            &[0.0; 24]
        ) < 1e-6
    );
}
