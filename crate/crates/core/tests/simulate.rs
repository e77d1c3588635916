use orwdro::measures::Order;
use orwdro::simulate::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn plan(d: usize, eps: f64, rho0: f64) -> CorruptionPlanB {
    CorruptionPlanB::new(rho0, eps, Order::One, OutlierSpec::far_along_e1(d, 50.0))
}

#[test]
fn same_seed_same_draw() {
    let a = corrupt_regression(
        30,
        4,
        &RegressionCorruption {
            c: 8.0,
            rho: 0.1,
            eps: 0.1,
        },
        &mut rng(5),
    )
    .unwrap();
    let b = corrupt_regression(
        30,
        4,
        &RegressionCorruption {
            c: 8.0,
            rho: 0.1,
            eps: 0.1,
        },
        &mut rng(5),
    )
    .unwrap();
    assert_eq!(a.corrupted, b.corrupted);
    assert_eq!(a.truth, b.truth);
    assert_eq!(a.outliers, b.outliers);
}

#[test]
fn outlier_sets_are_sorted_floor_eps_n() {
    for (n, eps) in [(10, 0.1), (25, 0.2), (7, 0.3), (40, 0.0), (33, 0.49)] {
        let clean = gaussian_sample(&mut rng(n as u64), n, 2).unwrap();
        let s = corrupt_setting_b(&clean, &plan(2, eps, 0.2), &mut rng(1)).unwrap();
        assert_eq!(s.outliers.len(), (eps * n as f64 + 1e-9).floor() as usize);
        assert!(s.outliers.windows(2).all(|w| w[0] < w[1]));
        assert!(s.outliers.iter().all(|&i| i < n));
    }
}

#[test]
fn budget_checked_small_skipped_large() {
    let clean = gaussian_sample(&mut rng(2), 40, 3).unwrap();
    let s = corrupt_setting_b(&clean, &plan(3, 0.1, 0.3), &mut rng(3)).unwrap();
    assert_eq!(s.budget.passed(), Some(true));

    let big = gaussian_sample(&mut rng(2), 200, 3).unwrap();
    let s = corrupt_setting_b(&big, &plan(3, 0.1, 0.3), &mut rng(3)).unwrap();
    assert_eq!(s.budget.passed(), None);
}

#[test]
fn heterogeneous_displacement_has_the_budget() {
    let clean = gaussian_sample(&mut rng(9), 30, 3).unwrap();
    let mut p = plan(3, 0.0, 0.5);
    p.displacement = Displacement::Heterogeneous;
    let s = corrupt_setting_b(&clean, &p, &mut rng(10)).unwrap();
    let mean: f64 = s
        .clean
        .support()
        .iter()
        .zip(s.corrupted.support())
        .map(|(a, b)| {
            a.coords()
                .iter()
                .zip(b.coords())
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / 30.0;
    assert!((mean - 0.5).abs() < 1e-9, "{mean}");
    assert_eq!(s.budget.passed(), Some(true));
}

#[test]
fn additive_contamination_sizes() {
    let n = 20;
    let eps = 0.2;
    let m = clean_count(n, eps);
    assert_eq!(m, 16);
    let clean = gaussian_sample(&mut rng(4), m, 2).unwrap();
    let s = corrupt_setting_b_prime(&clean, n, &plan(2, eps, 0.1), &mut rng(6)).unwrap();
    assert_eq!(s.corrupted.len(), m + 4);
    assert_eq!(s.outliers, (16..20).collect::<Vec<_>>());
    assert_eq!(s.budget.passed(), Some(true));

    let wrong = gaussian_sample(&mut rng(4), m + 1, 2).unwrap();
    assert!(corrupt_setting_b_prime(&wrong, n, &plan(2, eps, 0.1), &mut rng(6)).is_err());
}

#[test]
fn regression_formula() {
    let (c, rho) = (8.0, 0.25);
    let s = corrupt_regression(25, 5, &RegressionCorruption { c, rho, eps: 0.2 }, &mut rng(11)).unwrap();
    let theta = &s.truth;
    assert_eq!(theta.len(), 4);
    assert!((theta.iter().map(|t| t * t).sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(s.mask.num_transported(), 5);
    for i in 0..25 {
        let z = s.clean.support()[i].coords();
        let y = theta.iter().zip(&z[..4]).map(|(a, b)| a * b).sum::<f64>();
        assert!((z[4] - y).abs() < 1e-12);
        let w = s.corrupted.support()[i].coords();
        if s.outliers.contains(&i) {
            assert!((0..4).all(|k| (w[k] - c * z[k]).abs() < 1e-12));
            assert!((w[4] - (-c * c * y + rho)).abs() < 1e-9);
        } else {
            assert_eq!(&w[..4], &z[..4]);
            assert!((w[4] - y - rho).abs() < 1e-12);
        }
    }
}

#[test]
fn classification_formula() {
    let rho = 0.3;
    let s = corrupt_classification(20, 4, rho, 0.15, &mut rng(12)).unwrap();
    assert_eq!(s.mask.num_transported(), 3);
    for i in 0..20 {
        let z = s.clean.support()[i].coords();
        let w = s.corrupted.support()[i].coords();
        let score = s.truth.iter().zip(&z[..3]).map(|(a, b)| a * b).sum::<f64>();
        assert_eq!(z[3], if score >= 0.0 { 1.0 } else { -1.0 });
        assert_eq!(w[3], z[3]);
        let sgn = if s.outliers.contains(&i) { -100.0 } else { 1.0 };
        assert!((w[0] - sgn * z[0] - rho).abs() < 1e-9);
        assert!((1..3).all(|k| (w[k] - sgn * z[k]).abs() < 1e-9));
    }
}

#[test]
fn multiregression_formula() {
    let (d, k, rho) = (3, 2, 0.1);
    let s = corrupt_multiregression(15, d, k, rho, 0.2, &mut rng(13)).unwrap();
    let m = &s.truth;
    assert_eq!(m.len(), k * d);
    for i in 0..15 {
        let z = s.clean.support()[i].coords();
        let w = s.corrupted.support()[i].coords();
        let (sx, sy) = if s.outliers.contains(&i) { (10.0, -100.0) } else { (1.0, 1.0) };
        for r in 0..k {
            let y = (0..d).map(|j| m[r * d + j] * z[j]).sum::<f64>();
            assert!((z[d + r] - y).abs() < 1e-12);
            assert!((w[d + r] - sy * y).abs() < 1e-9);
        }
        assert!((w[0] - sx * z[0] - rho).abs() < 1e-9);
        assert!((w[1] - sx * z[1]).abs() < 1e-9);
    }
    assert!(corrupt_multiregression(15, d, 13, rho, 0.2, &mut rng(13)).is_err());
}

#[test]
fn invalid_plans_are_rejected() {
    let clean = gaussian_sample(&mut rng(1), 10, 2).unwrap();
    assert!(corrupt_setting_b(&clean, &plan(2, 0.6, 0.1), &mut rng(1)).is_err());
    assert!(corrupt_setting_b(&clean, &plan(2, 0.1, -1.0), &mut rng(1)).is_err());
    assert!(corrupt_setting_b(&clean, &plan(3, 0.1, 0.1), &mut rng(1)).is_err());
    assert!(corrupt_regression(
        10,
        1,
        &RegressionCorruption {
            c: 8.0,
            rho: 0.1,
            eps: 0.1
        },
        &mut rng(1)
    )
    .is_err());
}
