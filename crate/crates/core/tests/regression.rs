use circuit_probe::decompose::{ape, closed_form, fit_layer, reconstruct, FitHyper, LayerSample};
use circuit_probe::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const HEADS: usize = 12;
const D: usize = 48;
const N: usize = 225;

struct Planted {
    w: Vec<f64>,
    b: Vec<f32>,
    samples: Vec<LayerSample>,
}

fn planted(seed: u64, noise: f32) -> Planted {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng, s: f32| -> f32 {
        let z: f32 = StandardNormal.sample(rng);
        z * s
    };
    let w: Vec<f64> = (0..=HEADS).map(|_| rng.random_range(-0.8..1.6)).collect();
    let b: Vec<f32> = (0..D).map(|_| normal(&mut rng, 1.0)).collect();
    let scales: Vec<f32> = (0..=HEADS).map(|_| rng.random_range(0.5..2.0)).collect();
    let samples = (0..N)
        .map(|i| {
            let feats: Vec<Vec<f32>> = scales
                .iter()
                .map(|&s| (0..D).map(|_| normal(&mut rng, s)).collect())
                .collect();
            let mut m = b.clone();
            for (k, f) in feats.iter().enumerate() {
                for (mi, x) in m.iter_mut().zip(f) {
                    *mi += w[k] as f32 * x;
                }
            }
            for mi in &mut m {
                *mi += normal(&mut rng, noise);
            }
            let mut feats = feats;
            let r_pre = feats.pop().unwrap();
            LayerSample {
                prompt_id: i,
                heads: feats,
                r_pre,
                m,
            }
        })
        .collect();
    Planted { w, b, samples }
}

#[test]
fn recovers_planted_coefficients() {
    let p = planted(3, 0.0);
    let sol = fit_layer(9, &p.samples, &FitHyper::default()).unwrap();
    for (got, want) in sol.coefficients().iter().zip(&p.w) {
        assert!((got - want).abs() <= 1e-3, "{got} vs {want}");
    }
    for (got, want) in sol.intercept.iter().zip(&p.b) {
        assert!((got - want).abs() <= 1e-3);
    }
    assert!(sol.ape < 0.1, "ape {}", sol.ape);
    assert_eq!(sol.fold_losses.len(), 4);
    let m = reconstruct(&sol, &p.samples[0]);
    assert!(circuit_probe::linalg::max_abs_diff(&m, &p.samples[0].m) <= 1e-3);
}

#[test]
fn gradient_descent_agrees_with_closed_form() {
    let p = planted(5, 0.7);
    let gd = fit_layer(2, &p.samples, &FitHyper::default()).unwrap();
    let exact = closed_form(2, &p.samples).unwrap();
    for (a, b) in gd.coefficients().iter().zip(exact.coefficients()) {
        assert!((a - b).abs() <= 1e-2, "{a} vs {b}");
    }
    assert!((ape(&gd, &p.samples).unwrap() - gd.ape).abs() < 1e-9);
}

#[test]
fn fits_are_seed_stable() {
    let p = planted(8, 0.7);
    let a = fit_layer(
        0,
        &p.samples,
        &FitHyper {
            seed: 1,
            ..Default::default()
        },
    )
    .unwrap();
    let b = fit_layer(
        0,
        &p.samples,
        &FitHyper {
            seed: 2,
            ..Default::default()
        },
    )
    .unwrap();
    for (x, y) in a.coefficients().iter().zip(b.coefficients()) {
        if x.abs() > 0.05 || y.abs() > 0.05 {
            assert_eq!(x.signum(), y.signum());
        }
        assert!((x - y).abs() <= 0.15);
    }
}

#[test]
fn validation_loss_tracks_training_loss() {
    let p = planted(13, 0.7);
    let sol = fit_layer(0, &p.samples, &FitHyper::default()).unwrap();
    for f in &sol.fold_losses {
        assert!(f.val_mse <= 2.0 * f.train_mse, "{f:?}");
    }
}

#[test]
fn loss_is_monotone_after_transient() {
    let p = planted(21, 0.7);
    let sol = fit_layer(0, &p.samples, &FitHyper::default()).unwrap();
    let tail: Vec<f64> = sol
        .loss_trace
        .iter()
        .filter(|(s, _)| *s >= 1000)
        .map(|x| x.1)
        .collect();
    assert!(tail.len() > 100);
    for w in tail.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-9), "{} -> {}", w[0], w[1]);
    }
}

#[test]
fn divergence_names_layer_and_step() {
    let p = planted(1, 0.1);
    let hyper = FitHyper {
        lr: 50.0,
        steps: 5000,
        ..Default::default()
    };
    match fit_layer(7, &p.samples, &hyper) {
        Err(Error::Diverged { layer: 7, step }) => assert!(step < 5000),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn too_few_samples_for_folds() {
    let p = planted(1, 0.1);
    assert!(fit_layer(0, &p.samples[..3], &FitHyper::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn planted_recovery_holds_for_any_seed(seed in 100u64..10_000) {
        let p = planted(seed, 0.0);
        let sol = closed_form(0, &p.samples).unwrap();
        for (got, want) in sol.coefficients().iter().zip(&p.w) {
            prop_assert!((got - want).abs() <= 1e-3);
        }
        let gd = fit_layer(0, &p.samples, &FitHyper { folds: 2, ..Default::default() }).unwrap();
        for (got, want) in gd.coefficients().iter().zip(&p.w) {
            prop_assert!((got - want).abs() <= 1e-3);
        }
        prop_assert!(gd.ape < 0.1);
    }
}
