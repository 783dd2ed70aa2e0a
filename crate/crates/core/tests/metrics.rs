mod common;

use common::*;
use proptest::prelude::*;

use cfbench_core::engine::NonTargetPolicy;
use cfbench_core::exec::Exec;
use cfbench_core::metrics::{
    composition_score, frechet_distance, intervention_scores, l1_distance, realism_score, reversibility_score, ssim3d,
    sqrtm_psd, FeatureExtractor, MetricError, SsimParams,
};
use cfbench_core::phantoms::RenderConfig;
use cfbench_core::phantoms::{render_phantom, sample_subject};
use cfbench_core::{CohortId, IdentityModel, RegionId, Volume3D};

#[test]
fn l1_matches_brute_force() {
    for seed in 0..5 {
        let a = random_volume([8, 9, 10], seed);
        let b = random_volume([8, 9, 10], seed + 100);
        assert!((l1_distance(&a, &b).unwrap() - naive_l1(&a, &b)).abs() <= 1e-12);
    }
    let zeros = Volume3D::filled([4; 3], 0.0);
    let ones = Volume3D::filled([4; 3], 1.0);
    assert_eq!(l1_distance(&zeros, &ones).unwrap(), 1.0);
    assert!(matches!(
        l1_distance(&zeros, &Volume3D::filled([4, 4, 5], 0.0)),
        Err(MetricError::ShapeMismatch { .. })
    ));
}

#[test]
fn ssim_matches_direct_formula_on_8_cubed() {
    let p = SsimParams::default();
    for seed in 0..4 {
        let a = random_volume([8; 3], seed);
        let b = random_volume([8; 3], seed + 50);
        let fast = ssim3d(&a, &b, &p).unwrap();
        assert!((fast - naive_ssim(&a, &b, &p)).abs() <= 1e-9, "seed {seed}");
        assert!((fast - ssim3d(&b, &a, &p).unwrap()).abs() <= 1e-12);
        assert!((ssim3d(&a, &a, &p).unwrap() - 1.0).abs() <= 1e-9);
    }
    // Correlated pair, non-default window.
    let a = random_volume([9, 8, 10], 7);
    let b = Volume3D::from_vec(a.dims(), a.data().iter().map(|v| 0.5 * v + 0.2).collect()).unwrap();
    let p = SsimParams { sigma: 0.8, radius: 2, ..SsimParams::default() };
    assert!((ssim3d(&a, &b, &p).unwrap() - naive_ssim(&a, &b, &p)).abs() <= 1e-9);
    assert!(matches!(ssim3d(&Volume3D::filled([6; 3], 0.1), &Volume3D::filled([6; 3], 0.1), &SsimParams::default()), Err(MetricError::TooSmall { .. })));
}

#[test]
fn frechet_closed_forms() {
    // 1-D: (μ1 − μ2)² + (σ1 − σ2)² = 4.
    let a = gaussian_samples(10_000, &[0.0], &[1.0], 1);
    let b = gaussian_samples(10_000, &[2.0], &[1.0], 2);
    let d = frechet_distance(&a, &b).unwrap();
    assert!((d - 4.0).abs() <= 0.2, "1-D FID {d}");
    // diag(1, 4) vs diag(4, 1): trace term (1 − 2)² + (2 − 1)² = 2.
    let a = gaussian_samples(10_000, &[0.0, 0.0], &[1.0, 2.0], 3);
    let b = gaussian_samples(10_000, &[0.0, 0.0], &[2.0, 1.0], 4);
    let d = frechet_distance(&a, &b).unwrap();
    assert!((d - 2.0).abs() <= 0.2, "diagonal FID {d}");
    assert!(frechet_distance(&a, &a).unwrap().abs() <= 1e-6);
    assert!(matches!(frechet_distance(&a[..1], &b[..1]), Err(MetricError::InsufficientSamples(1))));
}

#[test]
fn matrix_sqrt_reconstructs_spd() {
    for d in [1, 2, 5, 16, 33, 64] {
        let m = random_spd(d, d as u64);
        let s = sqrtm_psd(&m).unwrap();
        let err = (&s * &s - &m).norm();
        assert!(err <= 1e-8, "d={d}: Frobenius error {err}");
    }
}

#[test]
fn frechet_symmetry_and_permutation_invariance() {
    let a = gaussian_samples(300, &[0.0, 1.0, -1.0], &[1.0, 0.5, 2.0], 5);
    let b = gaussian_samples(300, &[0.5, 0.0, 0.0], &[1.5, 1.0, 1.0], 6);
    let ab = frechet_distance(&a, &b).unwrap();
    assert!((ab - frechet_distance(&b, &a).unwrap()).abs() <= 1e-6);
    let mut pa = a.clone();
    let mut pb = b.clone();
    pa.reverse();
    pb.rotate_left(17);
    assert!((ab - frechet_distance(&pa, &pb).unwrap()).abs() <= 1e-6);
}

#[test]
fn features_separate_cohorts() {
    let fx = FeatureExtractor::with_defaults([32; 3]).unwrap();
    let feats = |c: CohortId| -> Vec<Vec<f64>> {
        (0..50)
            .map(|s| fx.extract(&render_phantom(&sample_subject(c, s), [32; 3], &RenderConfig::default()).unwrap().0).unwrap())
            .collect()
    };
    let (fa, fb) = (feats(CohortId::A), feats(CohortId::B));
    assert_eq!(fa[0].len(), 64);
    assert_eq!(fa[0], fx.extract(&render_phantom(&sample_subject(CohortId::A, 0), [32; 3], &RenderConfig::default()).unwrap().0).unwrap());
    let dist = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    let mean_pairs = |xs: &[Vec<f64>], ys: &[Vec<f64>], same: bool| {
        let mut s = 0.0;
        let mut n = 0;
        for (i, x) in xs.iter().enumerate() {
            for (j, y) in ys.iter().enumerate() {
                if !same || i < j {
                    s += dist(x, y);
                    n += 1;
                }
            }
        }
        s / n as f64
    };
    let within = 0.5 * (mean_pairs(&fa, &fa, true) + mean_pairs(&fb, &fb, true));
    let between = mean_pairs(&fa, &fb, false);
    assert!(between > within, "between {between} within {within}");
}

#[test]
fn identity_double_reaches_the_ideals() {
    let (items, _) = phantom_items(CohortId::A, 0..8, 32, None);
    let m = IdentityModel::new([32; 3]);
    for s in composition_score(&m, &items, &[1, 10], &SsimParams::default(), Exec::auto()).unwrap() {
        assert_eq!(s.l1, 0.0);
        assert!((s.ssim - 1.0).abs() <= 1e-12);
    }
    for c in reversibility_score(&m, &items, &[1, 3], 0, &NonTargetPolicy::HeldFactual, Exec::auto()).unwrap() {
        assert_eq!(c.l1, 0.0);
    }
    let fx = FeatureExtractor::with_defaults([32; 3]).unwrap();
    assert!(realism_score(&m, &items, &fx, Exec::auto()).unwrap() <= 1e-6);
}

#[test]
fn single_subject_composition_is_the_direct_distance() {
    let (items, _) = phantom_items(CohortId::A, 3..4, 16, None);
    let m = IdentityModel::new([16; 3]);
    let s = composition_score(&m, &items, &[1], &SsimParams::default(), Exec::Sequential).unwrap();
    assert_eq!(s[0].l1, l1_distance(&items[0].volume, &items[0].volume).unwrap());
}

#[test]
fn rerender_oracle_bounds_the_effectiveness_floor() {
    let res = 32;
    let specs: Vec<_> = (0..12).map(|s| sample_subject(CohortId::A, s)).collect();
    let (items, norm) = phantom_items(CohortId::A, 0..12, res, None);
    let m = RerenderModel::new(specs, norm.clone(), res, RenderConfig::default());
    let scores = intervention_scores(&m, &items, &norm, 9, Exec::auto()).unwrap();
    for (r, &e) in scores.effectiveness.iter() {
        assert!(e <= 0.08, "{r}: {e}");
    }
    // Identity with a null change disturbs nothing beyond the oracle floor.
    let id = IdentityModel::new([res; 3]);
    let s = intervention_scores(&id, &items, &norm, 9, Exec::auto()).unwrap();
    for row in s.minimality.values() {
        assert_eq!(row.values().flatten().count(), 6);
        assert!(row.values().flatten().all(|&v| v <= 0.05));
    }
}

#[test]
fn intervention_scores_are_seeded_and_nonnegative() {
    let (items, norm) = phantom_items(CohortId::A, 0..6, 16, None);
    let m = IdentityModel::new([16; 3]);
    let a = intervention_scores(&m, &items, &norm, 4, Exec::auto()).unwrap();
    let b = intervention_scores(&m, &items, &norm, 4, Exec::Sequential).unwrap();
    assert_eq!(a, b);
    assert!(a.effectiveness.values().all(|&v| v >= 0.0));
    assert!(RegionId::ALL.iter().all(|&t| a.minimality[t][t].is_none()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn l1_is_a_metric_on_random_triples(s1 in 0u64..1000, s2 in 0u64..1000, s3 in 0u64..1000) {
        let (a, b, c) = (random_volume([6; 3], s1), random_volume([6; 3], s2), random_volume([6; 3], s3));
        let ab = l1_distance(&a, &b).unwrap();
        prop_assert_eq!(ab, l1_distance(&b, &a).unwrap());
        prop_assert!(ab <= l1_distance(&a, &c).unwrap() + l1_distance(&c, &b).unwrap() + 1e-12);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(s1 in 0u64..1000, s2 in 0u64..1000) {
        let (a, b) = (random_volume([8; 3], s1), random_volume([8; 3], s2));
        let p = SsimParams::default();
        let ab = ssim3d(&a, &b, &p).unwrap();
        prop_assert!((ab - ssim3d(&b, &a, &p).unwrap()).abs() <= 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
    }
}
