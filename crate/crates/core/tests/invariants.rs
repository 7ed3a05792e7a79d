//! Algebraic invariants of the loss pieces on random inputs.

use mlip::contrastive::{info_nce, weighted_info_nce, GlobalBatch};
use mlip::mip::{mip_loss, ReconstructionPair};
use mlip::numerics::{cosine_similarity, softmax, Matrix};
use mlip::patching::{integrity_weights, masked_count, sample_mask, IntegrityEstimator, MaskMatrix, PatchGrid};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0))
}

fn batch(rng: &mut ChaCha8Rng, n: usize, tau: f64) -> GlobalBatch {
    GlobalBatch {
        image: random(rng, n, 6),
        text: random(rng, n, 6),
        tau,
        weights: None,
    }
}

fn grid(data: Matrix) -> PatchGrid {
    PatchGrid {
        patch_size: 1,
        grid_h: 1,
        grid_w: data.rows(),
        channels: data.cols(),
        data,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn softmax_is_a_distribution(x in prop::collection::vec(-50.0f64..50.0, 1..20), shift in -100.0f64..100.0) {
        let p = softmax(&x).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let shifted: Vec<f64> = x.iter().map(|v| v + shift).collect();
        let q = softmax(&shifted).unwrap();
        prop_assert!(p.iter().zip(&q).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn cosine_is_bounded_and_scale_free(seed in any::<u64>(), d in 1usize..10, k in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c = cosine_similarity(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
        let scaled: Vec<f64> = a.iter().map(|v| v * k).collect();
        prop_assert!((cosine_similarity(&scaled, &b).unwrap() - c).abs() < 1e-12);
        prop_assert_eq!(cosine_similarity(&b, &a).unwrap(), c);
    }

    #[test]
    fn masks_are_exact_and_reproducible(p in 1usize..300, r in 0.0f64..=1.0, seed in any::<u64>()) {
        let m = sample_mask(p, r, seed).unwrap();
        prop_assert_eq!(m.len(), p);
        prop_assert_eq!(m.popcount(), (r * p as f64).round() as usize);
        prop_assert_eq!(m.popcount(), masked_count(p, r));
        prop_assert_eq!(&m, &sample_mask(p, r, seed).unwrap());
        prop_assert_eq!(m.visible_positions().len() + m.masked_positions().len(), p);
    }

    #[test]
    fn log_weights_sum_to_one(seed in any::<u64>(), n in 1usize..64, p in 2usize..50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let est = IntegrityEstimator { phi: random(&mut rng, 1, p) };
        let masks: Vec<MaskMatrix> = (0..n)
            .map(|i| sample_mask(p, rng.random_range(0.0..=1.0), seed ^ i as u64).unwrap())
            .collect();
        let w = integrity_weights(&est, &masks).unwrap();
        prop_assert!((w.iter().map(|x| x.ln()).sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(w.iter().all(|&x| (1.0..=std::f64::consts::E).contains(&x)));
    }

    #[test]
    fn phi_shift_is_invisible_at_equal_popcount(seed in any::<u64>(), n in 1usize..10, shift in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi = random(&mut rng, 1, 16);
        let masks: Vec<MaskMatrix> = (0..n).map(|i| sample_mask(16, 0.5, seed.wrapping_add(i as u64)).unwrap()).collect();
        let a = integrity_weights(&IntegrityEstimator { phi: phi.clone() }, &masks).unwrap();
        let b = integrity_weights(&IntegrityEstimator { phi: phi.map(|v| v + shift) }, &masks).unwrap();
        prop_assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn contrastive_reductions(seed in any::<u64>(), n in 1usize..12, tau in 0.05f64..2.0, k in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = batch(&mut rng, n, tau);
        let plain = info_nce(&b).unwrap();
        prop_assert!(plain.v2t >= 0.0 && plain.t2v >= 0.0);
        let ones = GlobalBatch { weights: Some(vec![1.0; n]), ..b.clone() };
        prop_assert_eq!(weighted_info_nce(&ones).unwrap(), plain);
        // Cosine similarities ignore the embedding scale.
        let scaled = GlobalBatch { image: b.image.map(|v| v * k), ..b.clone() };
        let s = info_nce(&scaled).unwrap();
        prop_assert!((s.v2t - plain.v2t).abs() < 1e-10 && (s.t2v - plain.t2v).abs() < 1e-10);
        // A uniform weight c is the same as temperature τ/c.
        let c = rng.random_range(1.0..3.0);
        let uniform = GlobalBatch { weights: Some(vec![c; n]), ..b.clone() };
        let hot = GlobalBatch { tau: tau / c, ..b.clone() };
        let (u, h) = (weighted_info_nce(&uniform).unwrap(), info_nce(&hot).unwrap());
        prop_assert!((u.v2t - h.v2t).abs() < 1e-10 && (u.t2v - h.t2v).abs() < 1e-10);
        if n == 1 {
            prop_assert_eq!((plain.v2t, plain.t2v), (0.0, 0.0));
        }
    }

    #[test]
    fn swapping_modalities_swaps_directions(seed in any::<u64>(), n in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = batch(&mut rng, n, 0.4);
        let l = info_nce(&b).unwrap();
        let swapped = info_nce(&GlobalBatch { image: b.text.clone(), text: b.image.clone(), ..b }).unwrap();
        prop_assert!((l.v2t - swapped.t2v).abs() < 1e-12 && (l.t2v - swapped.v2t).abs() < 1e-12);
    }

    #[test]
    fn mip_sees_only_masked_patches(seed in any::<u64>(), p in 1usize..20, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let original = random(&mut rng, p, d);
        let recon = random(&mut rng, p, d);
        let mask = sample_mask(p, rng.random_range(0.0..=1.0), seed).unwrap();
        let loss = |r: &Matrix| mip_loss(&ReconstructionPair {
            original: grid(original.clone()),
            reconstructed: grid(r.clone()),
            mask: mask.clone(),
        }).unwrap();
        let base = loss(&recon);
        prop_assert!(base >= 0.0);
        // Changing visible rows leaves the loss unchanged.
        let mut tweaked = recon.clone();
        for i in mask.visible_positions() {
            tweaked.row_mut(i).iter_mut().for_each(|v| *v += 3.0);
        }
        prop_assert_eq!(loss(&tweaked), base);
        // Repairing the masked rows drives it to zero.
        let mut fixed = recon.clone();
        for i in mask.masked_positions() {
            fixed.row_mut(i).copy_from_slice(original.row(i));
        }
        prop_assert_eq!(loss(&fixed), 0.0);
        if mask.popcount() > 0 {
            let masked = mask.masked_positions();
            let direct = original.select_rows(&masked).zip_map(&recon.select_rows(&masked), |a, b| (a - b).powi(2)).mean();
            prop_assert!((base - direct).abs() < 1e-12);
        } else {
            prop_assert_eq!(base, 0.0);
        }
    }
}
