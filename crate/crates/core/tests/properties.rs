//! Cross-module invariants checked on random inputs.

use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fbbs::inference::{brainstorm, draw_priors, recover_beam, select_beam, Sampler};
use fbbs::model::{init_parameters, predict, Condition, LatentState, ModelConfig, ModelParameters, PromptNorm};
use fbbs::probing::{dft_codebook, make_prompt, measure_rsrp, stochastic_batch_masks, uniform_probe_indices, Prompt};
use fbbs::signal::{normalized_gain_db, ArrayGeometry, ComplexVector};

fn tiny() -> ModelConfig {
    ModelConfig { embed_dim: 16, n_blocks: 1, n_heads: 2, ffn_multiplier: 2.0, n_channels: 2, seq_len: 8, cond_dim: 8 }
}

/// Randomly initialized model with its zero-initialized parts perturbed.
fn random_model(seed: u64) -> ModelParameters<f32> {
    let mut p = init_parameters::<f32>(&tiny(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    for t in &mut p.tensors {
        for v in &mut t.data {
            *v += rng.random_range(-0.2f32..0.2);
        }
    }
    p
}

fn random_channel(n: usize, rng: &mut impl Rng) -> ComplexVector {
    ComplexVector::new((0..n).map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect()).unwrap()
}

fn norm() -> PromptNorm {
    PromptNorm { mean: -20.0, std: 10.0 }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn generated_beams_respect_the_gain_bound(seed in 0u64..1000, q in 1usize..=8, steps in 1usize..4, m in 1usize..6) {
        let params = random_model(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = random_channel(8, &mut rng);
        let cb = dft_codebook(&ArrayGeometry::half_wavelength(8).unwrap());
        let c = measure_rsrp(&h, &cb, None, &mut rng).unwrap();
        let prompt = make_prompt(&c, &uniform_probe_indices(q, 8).unwrap()).unwrap();
        let beams = brainstorm(&params, &norm(), &prompt, &draw_priors(m, 8, seed), steps, Sampler::Interval).unwrap();
        prop_assert_eq!(beams.len(), m);
        for w in &beams {
            for z in w.as_slice() {
                prop_assert!((z.norm() - 1.0 / 8f64.sqrt()).abs() < 1e-12);
            }
            prop_assert!(normalized_gain_db(&h, w).unwrap() <= 1e-9);
        }
    }

    #[test]
    fn masked_report_entries_never_reach_the_model(seed in 0u64..1000, q in 1usize..8) {
        let params = random_model(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let idx = uniform_probe_indices(q, 8).unwrap();
        let c: Vec<f64> = (0..8).map(|_| rng.random_range(1e-6..1.0)).collect();
        let mut c2 = c.clone();
        for (i, v) in c2.iter_mut().enumerate() {
            if !idx.contains(&i) {
                *v = rng.random_range(0.0..100.0);
            }
        }
        let (a, b) = (make_prompt(&c, &idx).unwrap(), make_prompt(&c2, &idx).unwrap());
        prop_assert_eq!(&a, &b);
        let ca = Condition::<f32>::from_prompts(&[&a], &norm()).unwrap();
        let mut cb = Condition::<f32>::from_prompts(&[&b], &norm()).unwrap();
        for (f, &w) in cb.features.data.iter_mut().zip(&cb.weights) {
            if w == 0.0 {
                *f = rng.random_range(-1e3f32..1e3);
            }
        }
        let x = LatentState::gaussian(1, 8, &mut rng);
        let ya = predict(&params, &x, &[0.2], &[0.7], &ca).unwrap();
        let yb = predict(&params, &x, &[0.2], &[0.7], &cb).unwrap();
        prop_assert_eq!(ya.data, yb.data);
    }

    #[test]
    fn larger_brainstorms_never_select_worse(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = random_channel(8, &mut rng);
        let cands: Vec<_> = (0..8)
            .map(|_| recover_beam(&(0..16).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<_>>()).unwrap())
            .collect();
        let mut last = f64::NEG_INFINITY;
        for m in 1..=8 {
            let (w, i) = select_beam(&h, &cands[..m], None, &mut rng).unwrap();
            prop_assert!(i < m);
            let g = normalized_gain_db(&h, w).unwrap();
            prop_assert!(g >= last);
            last = g;
        }
    }

    #[test]
    fn priors_are_prefix_nested(seed in 0u64..10_000, m in 1usize..6, extra in 0usize..6) {
        let small = draw_priors(m, 8, seed);
        let large = draw_priors(m + extra, 8, seed);
        prop_assert_eq!(&small.data[..], &large.data[..small.data.len()]);
    }

    #[test]
    fn batch_masks_have_the_promised_composition(seed in 0u64..1000, b in 1usize..64, p_full in 0.05f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let budgets = [2usize, 3, 5];
        let masks = stochastic_batch_masks(b, p_full, &budgets, 8, &mut rng).unwrap();
        prop_assert_eq!(masks.len(), b);
        let full = masks.iter().filter(|m| m.iter().all(|&x| x)).count();
        let n_full = (p_full * b as f64 + 1e-9).floor() as usize;
        prop_assert!(full >= n_full);
        for m in masks.iter().filter(|m| !m.iter().all(|&x| x)) {
            let q = m.iter().filter(|&&x| x).count();
            prop_assert!(budgets.contains(&q));
            let p = Prompt::from_mask(&[1.0; 8], m).unwrap();
            prop_assert_eq!(p.q_active(), q);
        }
    }

    #[test]
    fn noisy_reports_are_nonnegative(seed in 0u64..1000, snr in -20.0f64..30.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = random_channel(8, &mut rng);
        let cb = dft_codebook(&ArrayGeometry::half_wavelength(8).unwrap());
        let c = measure_rsrp(&h, &cb, Some(snr), &mut rng).unwrap();
        prop_assert!(c.iter().all(|&v| v >= 0.0 && v.is_finite()));
    }
}
