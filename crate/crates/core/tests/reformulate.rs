use orwdro::conic::Domain;
use orwdro::losses::LossFamily;
use orwdro::measures::{empirical, DiscreteMeasure, Order, Point, TransportMask};
use orwdro::measures::{second_moment_about, GroundCost};
use orwdro::reformulate::*;
use orwdro::robust_ot::rwp_one_sided;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_instance(rng: &mut ChaCha8Rng, n: usize, d: usize, j: usize) -> (SamplePieces, DiscreteMeasure) {
    let pts = (0..n)
        .map(|_| Point::new((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
        .collect();
    let data = empirical(pts).unwrap();
    let pieces = (0..j)
        .map(|_| {
            (
                (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                rng.random_range(-0.5..0.5),
            )
        })
        .collect();
    (SamplePieces::uniform(TransportMask::all(d), pieces, n).unwrap(), data)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + b.abs())
}

#[test]
fn strong_duality_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..12 {
        let n = 2 + case % 4;
        let d = 1 + case % 3;
        let j = 1 + case % 4;
        let (pieces, data) = random_instance(&mut rng, n, d, j);
        let p = if case % 2 == 0 { Order::One } else { Order::Two };
        let spec = AmbiguitySpec::new(p, 0.1 * (case % 4) as f64, 0.3, MomentFamily::G2, 2.0, vec![0.0; d]);
        let dual = inner_worst_case(&pieces, &data, &spec).unwrap().value;
        let primal = worst_case(&pieces, &data, &spec).unwrap().value;
        assert!(rel(primal, dual) < 1e-5, "case {case}: primal {primal} dual {dual}");
    }
}

#[test]
fn worst_case_is_feasible() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..6 {
        let d = 1 + case % 2;
        let (pieces, data) = random_instance(&mut rng, 4, d, 2);
        let p = if case % 2 == 0 { Order::One } else { Order::Two };
        let spec = AmbiguitySpec::new(p, 0.2, 0.4, MomentFamily::G2, 1.5, vec![0.0; d]);
        let sol = worst_case(&pieces, &data, &spec).unwrap();
        let nu = extract_worst_case(&sol).unwrap();
        let cost = GroundCost::euclidean(p, d);
        assert!(rwp_one_sided(&data, &nu, spec.eps, &cost).unwrap() <= spec.rho + 1e-4);
        assert!(second_moment_about(&nu, &Point::zeros(d)).unwrap() <= 2.25 + 1e-4);
        let e: f64 = nu
            .atoms()
            .map(|(z, w)| {
                w * pieces.per_sample[0]
                    .iter()
                    .map(|(a, b)| a.iter().zip(z.coords()).map(|(x, y)| x * y).sum::<f64>() + b)
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .sum();
        assert!(rel(e, sol.value) < 1e-5, "{e} vs {}", sol.value);
    }
}

#[test]
fn closed_form_matches_dual() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..8 {
        let d = 1 + case % 3;
        let (pieces, data) = random_instance(&mut rng, 5, d, 1 + case % 3);
        let eps = [0.0, 0.1, 0.25, 0.4][case % 4];
        let spec = AmbiguitySpec::new(Order::One, eps, 0.2, MomentFamily::G2, f64::INFINITY, Vec::new());
        let closed = closed_form_value_p1(&pieces, &data, &spec).unwrap();
        let dual = inner_worst_case(&pieces, &data, &spec).unwrap().value;
        let big = AmbiguitySpec::new(Order::One, eps, 0.2, MomentFamily::G2, 1e6, vec![0.0; d]);
        let dual_big = inner_worst_case(&pieces, &data, &big).unwrap().value;
        assert!(rel(dual, closed) < 1e-5, "{dual} vs {closed}");
        assert!(rel(dual_big, closed) < 1e-4, "{dual_big} vs {closed}");
    }
}

#[test]
fn covariance_class_in_one_dimension_matches_second_moment() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..5 {
        let (pieces, data) = random_instance(&mut rng, 4, 1, 2);
        let p = if case % 2 == 0 { Order::One } else { Order::Two };
        let z0 = vec![rng.random_range(-0.3..0.3)];
        let g2 = AmbiguitySpec::new(p, 0.1, 0.3, MomentFamily::G2, 1.2, z0.clone());
        let gc = AmbiguitySpec {
            family: MomentFamily::Gcov,
            ..g2.clone()
        };
        let a = inner_worst_case(&pieces, &data, &g2).unwrap().value;
        let b = inner_worst_case(&pieces, &data, &gc).unwrap().value;
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn covariance_class_is_inside_scaled_second_moment_class() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..4 {
        let (pieces, data) = random_instance(&mut rng, 4, 2, 3);
        let gc = AmbiguitySpec::new(Order::One, 0.1, 0.5, MomentFamily::Gcov, 1.0, vec![0.1, -0.1]);
        let g2 = AmbiguitySpec {
            family: MomentFamily::G2,
            sigma: 2f64.sqrt(),
            ..gc.clone()
        };
        let a = inner_worst_case(&pieces, &data, &gc).unwrap().value;
        let b = inner_worst_case(&pieces, &data, &g2).unwrap().value;
        assert!(a <= b + 1e-6, "{a} > {b}");
    }
}

#[test]
fn classical_limit_adds_rho_times_lipschitz() {
    let data = empirical(vec![Point::new(vec![0.3]).unwrap(), Point::new(vec![-0.7]).unwrap()]).unwrap();
    let pieces = SamplePieces::uniform(TransportMask::all(1), vec![(vec![2.0], 0.0), (vec![-1.0], 0.1)], 2).unwrap();
    let spec = AmbiguitySpec::classical(Order::One, 0.15);
    let v = inner_worst_case(&pieces, &data, &spec).unwrap().value;
    let mean = 0.5 * (0.6 + 0.8);
    assert!((v - mean - 0.15 * 2.0).abs() < 1e-5, "{v}");
}

#[test]
fn box_domain_caps_value() {
    let data = empirical(vec![Point::new(vec![0.0]).unwrap()]).unwrap();
    let pieces = SamplePieces::uniform(TransportMask::all(1), vec![(vec![1.0], 0.0)], 1).unwrap();
    let spec = AmbiguitySpec::classical(Order::One, 5.0).with_domain(Domain::Box {
        lower: vec![-1.0],
        upper: vec![1.0],
    });
    let v = inner_worst_case(&pieces, &data, &spec).unwrap().value;
    assert!((v - 1.0).abs() < 1e-5, "{v}");
    let w = worst_case(&pieces, &data, &spec).unwrap().value;
    assert!((w - 1.0).abs() < 1e-5, "{w}");
}

#[test]
fn pinned_block_moment_matches_primal() {
    let mask = TransportMask::leading(2, 1).unwrap();
    let data = DiscreteMeasure::from_rows(vec![vec![0.2, 1.0], vec![-0.4, -1.0], vec![0.9, 0.5]], vec![0.2, 0.5, 0.3]).unwrap();
    let pieces = SamplePieces::new(
        mask,
        vec![
            vec![(vec![1.0], 0.3), (vec![-2.0], 0.0)],
            vec![(vec![1.0], -0.3), (vec![-2.0], 0.1)],
            vec![(vec![0.5], 0.0)],
        ],
    )
    .unwrap();
    for p in [Order::One, Order::Two] {
        let spec = AmbiguitySpec::new(p, 0.2, 0.3, MomentFamily::G2, 1.5, vec![0.1, 0.0]);
        let a = inner_worst_case(&pieces, &data, &spec).unwrap().value;
        let b = worst_case(&pieces, &data, &spec).unwrap().value;
        assert!(rel(b, a) < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn joint_fit_matches_theta_grid() {
    let mask = TransportMask::all(2);
    let family = LossFamily::mad(1, mask).unwrap();
    let data = DiscreteMeasure::from_rows(
        vec![vec![1.0, 1.2], vec![-0.5, -0.4], vec![2.0, 1.7], vec![0.3, 0.5]],
        vec![0.25; 4],
    )
    .unwrap();
    let spec = AmbiguitySpec::new(Order::One, 0.0, 0.1, MomentFamily::G2, f64::INFINITY, Vec::new());
    let fit = joint_fit(&family, &data, &spec).unwrap();
    let grid_min = (0..=400)
        .map(|k| {
            let th = 0.5 + k as f64 / 400.0;
            evaluate_inner(&family, &[th], &data, &spec).unwrap()
        })
        .fold(f64::INFINITY, f64::min);
    assert!((fit.value - grid_min).abs() < 1e-4, "{} vs {grid_min}", fit.value);
    let again = evaluate_inner(&family, &fit.theta, &data, &spec).unwrap();
    assert!((again - fit.value).abs() < 1e-6);
}

#[test]
fn joint_fit_interpolates_single_point() {
    let family = LossFamily::mad(1, TransportMask::all(2)).unwrap();
    let data = DiscreteMeasure::from_rows(vec![vec![1.0, 1.0]], vec![1.0]).unwrap();
    let spec = AmbiguitySpec::new(Order::One, 1e-6, 1e-6, MomentFamily::G2, 1e6, vec![0.0, 0.0]);
    let fit = joint_fit(&family, &data, &spec).unwrap();
    assert!((fit.theta[0] - 1.0).abs() < 1e-3, "{:?}", fit.theta);
    assert!(fit.value.abs() < 1e-4);
}
