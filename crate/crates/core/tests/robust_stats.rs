use orwdro::measures::{Order, Point};
use orwdro::reformulate::{AmbiguitySpec, MomentFamily, SamplePieces};
use orwdro::robust_stats::{iterative_filter, sigma_feasible, trimmed_mean, tune_sigma, FilterOptions, TrimSpec};
use orwdro::simulate::{corrupt_setting_b, gaussian_sample, CorruptionPlanB, OutlierSpec};
use orwdro::{DiscreteMeasure, TransportMask};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dist(a: &Point, b: &[f64]) -> f64 {
    a.coords().iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn corrupted(seed: u64, n: usize, d: usize, eps: f64, rho0: f64) -> DiscreteMeasure {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clean = gaussian_sample(&mut rng, n, d).unwrap();
    let plan = CorruptionPlanB::new(rho0, eps, Order::Two, OutlierSpec::far_along_e1(d, 1e3));
    corrupt_setting_b(&clean, &plan, &mut rng).unwrap().corrupted
}

#[test]
fn centers_are_translation_equivariant() {
    let data = corrupted(3, 120, 4, 1.0 / 12.0, 0.5);
    let shift = [3.0, -1.5, 0.25, 100.0];
    let moved = data.translated(&shift).unwrap();
    let t0 = trimmed_mean(&data, TrimSpec::default()).unwrap();
    let t1 = trimmed_mean(&moved, TrimSpec::default()).unwrap();
    let (f0, _) = iterative_filter(&data, 1.0 / 12.0, &FilterOptions::default()).unwrap();
    let (f1, _) = iterative_filter(&moved, 1.0 / 12.0, &FilterOptions::default()).unwrap();
    for k in 0..4 {
        assert!((t1[k] - t0[k] - shift[k]).abs() < 1e-9);
        assert!((f1[k] - f0[k] - shift[k]).abs() < 1e-8);
    }
}

#[test]
fn constant_data_is_a_fixed_point() {
    let c = vec![1.5, -2.0, 0.0];
    let data = DiscreteMeasure::from_rows(vec![c.clone(); 9], vec![1.0 / 9.0; 9]).unwrap();
    assert_eq!(trimmed_mean(&data, TrimSpec::default()).unwrap().coords(), c.as_slice());
    let (f, st) = iterative_filter(&data, 0.05, &FilterOptions::default()).unwrap();
    assert!(dist(&f, &c) < 1e-12);
    assert_eq!(st.removed(&data), 0.0);
}

#[test]
fn filter_state_invariants() {
    for seed in 0..5 {
        let data = corrupted(seed, 400, 6, 1.0 / 12.0, 1.0);
        let (_, st) = iterative_filter(&data, 1.0 / 12.0, &FilterOptions::default()).unwrap();
        assert!(st.removed(&data) <= 2.0 / 12.0 + 1e-12);
        assert!(st.weights.iter().zip(data.weights()).all(|(w, w0)| *w >= 0.0 && *w <= *w0));
        assert_eq!(st.history.len(), st.iterations);
        assert_eq!(*st.history.last().unwrap(), st.lambda_max);
        let limit = (2.0 / 12.0 * 400.0_f64).ceil() as usize + 1;
        assert!(st.iterations <= limit, "{} iterations", st.iterations);
    }
}

#[test]
fn filter_errors() {
    let data = corrupted(1, 50, 2, 0.0, 0.0);
    assert!(iterative_filter(&data, 0.2, &FilterOptions::default()).is_err());
    let bad = FilterOptions {
        threshold: 0.0,
        ..FilterOptions::default()
    };
    assert!(iterative_filter(&data, 0.05, &bad).is_err());
}

#[test]
fn errors_stay_small_on_a_few_seeds() {
    let (d, rho0) = (10, 1.0);
    for seed in 0..5 {
        let data = corrupted(100 + seed, 500, d, 0.2, rho0);
        let t = trimmed_mean(&data, TrimSpec::default()).unwrap();
        let err = dist(&t, &[0.0; 10]);
        assert!(err <= 5.0 * ((d as f64).sqrt() + rho0), "seed {seed}: {err}");
    }
}

#[test]
fn tuned_sigma_is_the_first_feasible_doubling() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let data = gaussian_sample(&mut rng, 6, 2).unwrap();
    let mask = TransportMask::all(2);
    let make = |s: f64| AmbiguitySpec::new(Order::Two, 0.1, 0.2, MomentFamily::G2, s, vec![0.0, 0.0]);
    let lo = 1.0 / 64.0;
    let s = tune_sigma(&data, &mask, lo, 64.0, make).unwrap();
    let pieces = SamplePieces::uniform(mask.clone(), vec![(vec![0.0, 0.0], 0.0)], data.len()).unwrap();
    assert!(sigma_feasible(&pieces, &data, &make(s)).unwrap());
    assert!(s > lo);
    assert!(!sigma_feasible(&pieces, &data, &make(s / 2.0)).unwrap());
}
