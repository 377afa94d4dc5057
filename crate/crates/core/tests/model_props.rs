use circuit_probe::linalg::{self, max_abs_diff};
use circuit_probe::model::{
    attention_input, forward_with_cache, head_output, unembed, ModelConfig, NodeId, PatchSpec,
    Site, Weights,
};
use proptest::prelude::*;

const VOCAB: usize = 211;

fn toy() -> &'static Weights {
    static W: std::sync::OnceLock<Weights> = std::sync::OnceLock::new();
    W.get_or_init(|| Weights::random(ModelConfig::toy(3, 4, 8, VOCAB), 2024))
}

fn tokens() -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(0u32..VOCAB as u32, 1..24)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn residual_stream_is_additive(toks in tokens()) {
        let w = toy();
        let c = forward_with_cache(w, &toks, &[]).unwrap();
        for l in 0..w.config.n_layers {
            for t in 0..toks.len() {
                let mut mid = linalg::add(c.resid_pre[l].row(t), &c.heads_sum(l, t));
                linalg::add_assign(&mut mid, &c.attn_bias[l]);
                prop_assert!(max_abs_diff(&mid, c.resid_mid[l].row(t)) <= 1e-4);
                let post = linalg::add(c.resid_mid[l].row(t), c.mlp_out[l].row(t));
                prop_assert!(max_abs_diff(&post, c.resid_post[l].row(t)) <= 1e-4);
            }
            if l > 0 {
                prop_assert_eq!(&c.resid_pre[l].data, &c.resid_post[l - 1].data);
            }
        }
    }

    #[test]
    fn runs_are_bit_identical(toks in tokens()) {
        let w = toy();
        let a = forward_with_cache(w, &toks, &[]).unwrap();
        let b = forward_with_cache(w, &toks, &[]).unwrap();
        prop_assert_eq!(a.final_logits.data, b.final_logits.data);
        for l in 0..w.config.n_layers {
            prop_assert_eq!(&a.resid_post[l].data, &b.resid_post[l].data);
            for h in 0..w.config.n_heads {
                prop_assert_eq!(&a.attn_pattern[l][h].data, &b.attn_pattern[l][h].data);
            }
        }
    }

    #[test]
    fn later_tokens_never_affect_earlier_positions(toks in tokens(), cut in 0usize..24) {
        let w = toy();
        let cut = cut % toks.len();
        let mut zeroed = toks.clone();
        zeroed[cut + 1..].iter_mut().for_each(|t| *t = 0);
        let a = forward_with_cache(w, &toks, &[]).unwrap();
        let b = forward_with_cache(w, &zeroed, &[]).unwrap();
        for l in 0..w.config.n_layers {
            for t in 0..=cut {
                prop_assert_eq!(a.resid_post[l].row(t), b.resid_post[l].row(t));
                prop_assert_eq!(a.mlp_out[l].row(t), b.mlp_out[l].row(t));
                for h in 0..w.config.n_heads {
                    prop_assert_eq!(a.head_out[l][h].row(t), b.head_out[l][h].row(t));
                }
            }
            prop_assert_eq!(a.final_logits.row(cut), b.final_logits.row(cut));
        }
    }

    #[test]
    fn self_patch_is_a_no_op(toks in tokens(), layer in 0usize..3, site in 0usize..6) {
        let w = toy();
        let clean = forward_with_cache(w, &toks, &[]).unwrap();
        let site = match site {
            0 => Site::ResidPre,
            1 => Site::ResidMid,
            2 => Site::MlpOut,
            3 => Site::ResidPost,
            h => Site::HeadOut(h - 2),
        };
        let node = NodeId::new(layer, site, -1);
        let spec = PatchSpec { node, replacement: clean.node(&node).unwrap().to_vec() };
        let patched = forward_with_cache(w, &toks, &[spec]).unwrap();
        prop_assert_eq!(patched.final_logits.data, clean.final_logits.data);
    }

    #[test]
    fn dense_head_form_matches_cache(toks in prop::collection::vec(0u32..VOCAB as u32, 4..5)) {
        let w = toy();
        let c = forward_with_cache(w, &toks, &[]).unwrap();
        for l in 0..w.config.n_layers {
            let normed = attention_input(w, l, &c.resid_pre[l]);
            for h in 0..w.config.n_heads {
                let (out, _) = head_output(w, l, h, &normed).unwrap();
                let d = max_abs_diff(&out.data, &c.head_out[l][h].data); let s = c.head_out[l][h].data.iter().fold(0f32, |m, x| m.max(x.abs())); prop_assert!(d <= 1e-5 * s.max(1.0), "diff {d} scale {s}");
            }
        }
    }
}

#[test]
fn attention_rows_are_stochastic_and_causal() {
    let w = toy();
    let c = forward_with_cache(w, &[3, 1, 4, 1, 5, 9, 2, 6], &[]).unwrap();
    for l in 0..w.config.n_layers {
        for h in 0..w.config.n_heads {
            let p = &c.attn_pattern[l][h];
            for t in 0..p.rows {
                let s: f64 = p.row(t).iter().map(|&x| x as f64).sum();
                assert!((s - 1.0).abs() < 1e-5);
                assert!(p.row(t)[t + 1..].iter().all(|&x| x == 0.0));
            }
        }
    }
}

/// Build a residual whose final LayerNorm output is (as nearly as LayerNorm
/// allows) a large multiple of `W_U[y]`; its decoding must peak at `y`.
#[test]
fn unembedding_a_constructed_direction_peaks_at_its_token() {
    let w = toy();
    let ln = &w.ln_f;
    for y in [0usize, 17, 123, VOCAB - 1] {
        let target: Vec<f32> = w.unembedding().row(y).iter().map(|x| 8.0 * x).collect();
        // least-squares inversion of γ ⊙ n + β = target, then standardise n
        let n: Vec<f32> = target
            .iter()
            .zip(&ln.gamma)
            .zip(&ln.beta)
            .map(|((t, g), b)| (t - b) / g)
            .collect();
        let mean = n.iter().sum::<f32>() / n.len() as f32;
        let v: Vec<f32> = n.iter().map(|x| x - mean).collect();
        let logits = unembed(w, &v);
        let argmax = (0..logits.len())
            .max_by(|&a, &b| logits[a].total_cmp(&logits[b]))
            .unwrap();
        assert_eq!(argmax, y);
    }
}
