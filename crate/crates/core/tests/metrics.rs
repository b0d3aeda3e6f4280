use groundiff::metrics::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn oracle_auc(h: &[f64], l: &[bool]) -> f64 {
    let (mut credit, mut pairs) = (0.0, 0.0);
    for i in 0..h.len() {
        for j in 0..h.len() {
            if l[i] && !l[j] {
                pairs += 1.0;
                if h[i] > h[j] {
                    credit += 1.0;
                } else if h[i] == h[j] {
                    credit += 0.5;
                }
            }
        }
    }
    credit / pairs
}

fn oracle_cnr(h: &[f64], l: &[bool]) -> f64 {
    let inside: Vec<f64> = h.iter().zip(l).filter(|p| *p.1).map(|p| *p.0).collect();
    let outside: Vec<f64> = h.iter().zip(l).filter(|p| !*p.1).map(|p| *p.0).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let var = |v: &[f64]| {
        let m = mean(v);
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
    };
    (mean(&inside) - mean(&outside)) / (var(&inside) + var(&outside) + 1e-12).sqrt()
}

/// Random 8x8 case with a quantised heatmap (so ties occur) and a mask with
/// both classes.
fn random_case(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    loop {
        let h: Vec<f64> = (0..64).map(|_| (rng.random_range(0..20) as f64) / 20.0 + 0.01).collect();
        let l: Vec<bool> = (0..64).map(|_| rng.random_bool(0.3)).collect();
        if l.iter().any(|&x| x) && l.iter().any(|&x| !x) {
            return (h, l);
        }
    }
}

#[test]
fn cnr_hand_example() {
    let h = [0.8f64, 0.2, 0.6, 0.4];
    let l = [true, false, true, false];
    assert!((cnr(&h, &l).unwrap() - 0.4 / 0.02f64.sqrt()).abs() < 1e-9);
    let inv: Vec<f64> = h.iter().map(|v| 1.0 - v).collect();
    assert!((cnr(&inv, &l).unwrap() + cnr(&h, &l).unwrap()).abs() < 1e-9);
    assert_eq!(cnr(&[0.3f64; 4], &l).unwrap(), 0.0);
}

#[test]
fn degenerate_masks_are_domain_errors() {
    assert!(cnr(&[0.1f64, 0.2], &[true, true]).is_err());
    assert!(auc_roc(&[0.1f64, 0.2], &[false, false]).is_err());
    assert!(cnr_abs(&[0.1f64], &[true]).is_err());
}

#[test]
fn auc_examples() {
    let l = [true, true, false, false];
    assert_eq!(auc_roc(&[0.9f64, 0.8, 0.1, 0.2], &l).unwrap(), 1.0);
    assert_eq!(auc_roc(&[0.5f64; 4], &l).unwrap(), 0.5);
    assert_eq!(auc_roc(&[0.1f64, 0.2, 0.9, 0.8], &l).unwrap(), 0.0);
}

#[test]
fn top1_examples_and_tie_rule() {
    assert_eq!(top1(&[0.1f64, 0.9, 0.2], &[false, true, false]).unwrap(), 1);
    assert_eq!(top1(&[0.1f64, 0.9, 0.2], &[true, false, true]).unwrap(), 0);
    // all ties: first pixel wins, and it is outside the mask
    assert_eq!(top1(&[0.5f64; 4], &[false, true, true, true]).unwrap(), 0);
    assert_eq!(top1(&[0.5f64; 4], &[true, false, false, false]).unwrap(), 1);
}

#[test]
fn anti_localized_heatmap_has_negative_cnr_but_positive_abs() {
    let l = [true, true, false, false, false, false];
    let h = [0.1f64, 0.2, 0.8, 0.9, 0.7, 0.85];
    assert!(cnr(&h, &l).unwrap() < 0.0);
    assert!(cnr_abs(&h, &l).unwrap() > 0.0);
}

#[test]
fn metrics_match_brute_force_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let (h, l) = random_case(&mut rng);
        assert!((auc_roc(&h, &l).unwrap() - oracle_auc(&h, &l)).abs() < 1e-12);
        assert!((cnr(&h, &l).unwrap() - oracle_cnr(&h, &l)).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn cnr_affine_invariance(seed in any::<u64>(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, l) = random_case(&mut rng);
        let t: Vec<f64> = h.iter().map(|v| a * v + b).collect();
        let (c0, c1) = (cnr(&h, &l).unwrap(), cnr(&t, &l).unwrap());
        prop_assert!((c0 - c1).abs() <= 1e-6 * c0.abs().max(1e-12));
        prop_assert_eq!(cnr_abs(&h, &l).unwrap(), c0.abs());
        prop_assert!(cnr_abs(&h, &l).unwrap() >= c0);
    }

    #[test]
    fn rank_metrics_ignore_monotone_transforms(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, l) = random_case(&mut rng);
        let e: Vec<f64> = h.iter().map(|v| v.exp()).collect();
        let c: Vec<f64> = h.iter().map(|v| v.powi(3)).collect();
        let base = auc_roc(&h, &l).unwrap();
        prop_assert_eq!(auc_roc(&e, &l).unwrap(), base);
        prop_assert_eq!(auc_roc(&c, &l).unwrap(), base);
        prop_assert_eq!(top1(&e, &l).unwrap(), top1(&h, &l).unwrap());
        prop_assert_eq!(top1(&c, &l).unwrap(), top1(&h, &l).unwrap());
    }

    #[test]
    fn auc_complement_symmetry(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, l) = random_case(&mut rng);
        let n: Vec<f64> = h.iter().map(|v| -v).collect();
        let s = auc_roc(&h, &l).unwrap() + auc_roc(&n, &l).unwrap();
        prop_assert!((s - 1.0).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&auc_roc(&h, &l).unwrap()));
    }
}

fn noise_image(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random::<f32>()).collect()
}

#[test]
fn ms_ssim_identity_symmetry_and_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = noise_image(&mut rng, 64 * 64 * 3);
    let b = noise_image(&mut rng, 64 * 64 * 3);
    assert!((ms_ssim(&a, &a, 64, 64, 3, 3).unwrap() - 1.0).abs() < 1e-9);
    let ab = ms_ssim(&a, &b, 64, 64, 3, 3).unwrap();
    let ba = ms_ssim(&b, &a, 64, 64, 3, 3).unwrap();
    assert!((ab - ba).abs() <= 1e-12);
    assert!(ab < 0.2, "independent noise scored {ab}");
}

#[test]
fn ms_ssim_scale_invariance_with_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = noise_image(&mut rng, 64 * 64 * 3);
    let b: Vec<f32> = a.iter().map(|v| (v * 0.7 + 0.1 * rng.random::<f32>()).min(1.0)).collect();
    let base = ms_ssim_with(&a, &b, 64, 64, 3, 3, 1.0).unwrap();
    let k = 4.0f32;
    let a2: Vec<f32> = a.iter().map(|v| v * k).collect();
    let b2: Vec<f32> = b.iter().map(|v| v * k).collect();
    let scaled = ms_ssim_with(&a2, &b2, 64, 64, 3, 3, k as f64).unwrap();
    assert!((base - scaled).abs() < 1e-6, "{base} vs {scaled}");
}

#[test]
fn ms_ssim_rejects_small_images() {
    let a = vec![0.5f32; 32 * 32 * 3];
    assert!(ms_ssim(&a, &a, 32, 32, 3, 3).is_err());
    assert!(ms_ssim(&a, &a, 32, 32, 3, 2).is_ok());
}

#[test]
fn mean_pairwise_matches_explicit_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let imgs: Vec<Vec<f32>> = (0..4).map(|_| noise_image(&mut rng, 48 * 48 * 3)).collect();
    let mut sum = 0.0;
    for (i, j) in [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)] {
        sum += ms_ssim(&imgs[i], &imgs[j], 48, 48, 3, 3).unwrap();
    }
    assert!((mean_pairwise(&imgs, 48, 48, 3, 3).unwrap() - sum / 6.0).abs() < 1e-12);
    let constant = vec![vec![0.3f32; 48 * 48 * 3]; 4];
    assert!((mean_pairwise(&constant, 48, 48, 3, 3).unwrap() - 1.0).abs() < 1e-9);
}

fn gaussian_set(rng: &mut ChaCha8Rng, n: usize, mean: &[f64]) -> Vec<Vec<f64>> {
    (0..n).map(|_| mean.iter().map(|m| { let z: f64 = StandardNormal.sample(rng); m + z }).collect()).collect()
}

#[test]
fn frechet_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = gaussian_set(&mut rng, 300, &[0.0; 6]);
    let y = gaussian_set(&mut rng, 300, &[0.5; 6]);
    assert!(frechet_distance(&x, &x).unwrap() <= 1e-6);
    let (xy, yx) = (frechet_distance(&x, &y).unwrap(), frechet_distance(&y, &x).unwrap());
    assert!((xy - yx).abs() < 1e-9);
    let shift = |s: &[Vec<f64>]| s.iter().map(|r| r.iter().map(|v| v + 3.0).collect()).collect::<Vec<Vec<f64>>>();
    assert!((frechet_distance(&shift(&x), &shift(&y)).unwrap() - xy).abs() < 1e-8);
    assert!(frechet_distance(&x, &[vec![0.0; 5]]).is_err());
}

#[test]
fn frechet_mean_offset_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let d = [1.0, -2.0, 0.5, 1.5];
    let x = gaussian_set(&mut rng, 100_000, &[0.0; 4]);
    let y = gaussian_set(&mut rng, 100_000, &d);
    let want: f64 = d.iter().map(|v| v * v).sum();
    let got = frechet_distance(&x, &y).unwrap();
    assert!((got - want).abs() / want < 0.02, "{got} vs {want}");
}

#[test]
fn frechet_shrinks_small_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = gaussian_set(&mut rng, 5, &[0.0; 16]);
    let y = gaussian_set(&mut rng, 5, &[0.0; 16]);
    let v = frechet_distance(&x, &y).unwrap();
    assert!(v.is_finite() && v >= 0.0);
}

#[test]
fn feature_extractor_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let imgs: Vec<Vec<f32>> = (0..3).map(|_| noise_image(&mut rng, 64 * 64 * 3)).collect();
    let a = FeatureExtractor::new(1).features(&imgs, 64).unwrap();
    let b = FeatureExtractor::new(1).features(&imgs, 64).unwrap();
    assert_eq!(a, b);
    assert_eq!(a[0].len(), FEATURE_DIM);
    assert_ne!(a, FeatureExtractor::new(2).features(&imgs, 64).unwrap());
}

#[test]
fn probe_auc_of_constant_scores_is_half() {
    let s = vec![0.4f32; 6];
    let l = [true, false, true, false, false, true];
    assert_eq!(auc_roc(&s, &l).unwrap(), 0.5);
    assert!(nan_mean(&[f64::NAN, 0.5, 1.0]) == 0.75);
}
