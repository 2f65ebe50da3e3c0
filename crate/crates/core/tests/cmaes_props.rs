use nalgebra::DVector;
use proptest::prelude::*;
use rand::Rng;
use rarebench::cmaes::{evaluate_genome, CmaesConfig, CmaesState, CmaesTrainer, Genome};
use rarebench::env::EnvConfig;
use rarebench::seed::rng_from_seed;

/// Minimizes `f` by maximizing −f; returns the final state.
fn minimize(f: impl Fn(&[f64]) -> f64, start: Vec<f64>, sigma: f64, generations: usize, seed: u64) -> (CmaesState, usize) {
    let lambda = 4 + (3.0 * (start.len() as f64).ln()).floor() as usize;
    let mut s = CmaesState::new(DVector::from_vec(start), sigma, lambda).unwrap();
    let mut rng = rng_from_seed(seed);
    for g in 0..generations {
        let pop = s.ask(&mut rng).unwrap();
        let fit: Vec<f64> = pop.iter().map(|x| -f(&x.values)).collect();
        s.tell(&pop, &fit).unwrap();
        if f(s.mean.as_slice()) < 1e-16 {
            return (s, g + 1);
        }
    }
    (s, generations)
}

pub fn sphere_target() -> Vec<f64> {
    (0..34).map(|i| 0.1 * i as f64 - 1.0).collect()
}

#[test]
fn sphere_34_converges() {
    let target = sphere_target();
    let f = |x: &[f64]| x.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    let (s, gens) = minimize(f, vec![0.0; 34], 1.0, 500, 1);
    let dist = f(s.mean.as_slice()).sqrt();
    assert!(dist < 1e-6, "distance {dist} after {gens} generations");
}

#[test]
fn rosenbrock_10_gets_below_one() {
    let f = |x: &[f64]| {
        x.windows(2)
            .map(|w| 100.0 * (w[1] - w[0] * w[0]).powi(2) + (1.0 - w[0]).powi(2))
            .sum::<f64>()
    };
    let mut best = f64::INFINITY;
    let lambda = 4 + (3.0 * 10f64.ln()).floor() as usize;
    let mut s = CmaesState::new(DVector::zeros(10), 0.5, lambda).unwrap();
    let mut rng = rng_from_seed(2);
    for _ in 0..3000 {
        let pop = s.ask(&mut rng).unwrap();
        let fit: Vec<f64> = pop.iter().map(|x| -f(&x.values)).collect();
        s.tell(&pop, &fit).unwrap();
        best = best.min(f(s.mean.as_slice()));
        if best < 1.0 {
            break;
        }
    }
    assert!(best < 1.0, "{best}");
}

#[test]
fn covariance_stays_symmetric_positive_definite_under_random_fitness() {
    let mut s = CmaesState::new(DVector::zeros(34), 1.0, 14).unwrap();
    let mut rng = rng_from_seed(3);
    let mut fit_rng = rng_from_seed(4);
    for g in 0..10_000 {
        let pop = s.ask(&mut rng).unwrap();
        let fit: Vec<f64> = (0..14).map(|_| fit_rng.random_range(0.0..50.0)).collect();
        s.tell(&pop, &fit).unwrap();
        if g % 500 == 0 || g == 9_999 {
            assert_eq!(s.cov, s.cov.transpose());
            assert!(s.eigenvalues()[0] > 0.0, "generation {g}");
        }
    }
    assert!(s.sigma.is_finite() && s.sigma > 0.0);
}

#[test]
fn dummy_coordinates_do_not_change_behavior() {
    let env = EnvConfig::with_p(0.5);
    let mut rng = rng_from_seed(5);
    let base: Vec<f64> = (0..34).map(|_| rng.random_range(-3.0..3.0)).collect();
    let mut perturbed = base.clone();
    for v in &mut perturbed[18..] {
        *v += rng.random_range(-100.0..100.0);
    }
    let a = evaluate_genome(&Genome { values: base }, &env, 200, &mut rng_from_seed(6)).unwrap();
    let b = evaluate_genome(&Genome { values: perturbed }, &env, 200, &mut rng_from_seed(6)).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn trainer_is_seed_deterministic_and_counts_tells() {
    let run = || {
        let mut t = CmaesTrainer::new(CmaesConfig::default(), EnvConfig::with_p(1.0), 7).unwrap();
        for _ in 0..20 {
            t.step().unwrap();
        }
        (t.state.mean.clone(), t.state.generation, t.episodes)
    };
    let (m1, g1, e1) = run();
    let (m2, g2, e2) = run();
    assert_eq!(m1, m2);
    assert_eq!((g1, e1), (20, 280));
    assert_eq!((g2, e2), (20, 280));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ask_is_deterministic_and_sized(seed in any::<u64>(), lambda in 4usize..30) {
        let s = CmaesState::new(DVector::zeros(34), 1.0, lambda).unwrap();
        let a = s.ask(&mut rng_from_seed(seed)).unwrap();
        let b = s.ask(&mut rng_from_seed(seed)).unwrap();
        prop_assert_eq!(a.len(), lambda);
        prop_assert!(a.iter().all(|g| g.values.len() == 34));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn tell_ignores_fitness_offsets(seed in any::<u64>(), shift in -1e3f64..1e3) {
        // rank-based: adding a constant to every fitness changes nothing
        let mut s1 = CmaesState::new(DVector::zeros(34), 1.0, 14).unwrap();
        let mut s2 = s1.clone();
        let mut rng = rng_from_seed(seed);
        let pop = s1.ask(&mut rng).unwrap();
        let fit: Vec<f64> = (0..14).map(|_| rng.random_range(0.0..50.0)).collect();
        let shifted: Vec<f64> = fit.iter().map(|f| f + shift).collect();
        s1.tell(&pop, &fit).unwrap();
        s2.tell(&pop, &shifted).unwrap();
        prop_assert_eq!(s1.mean, s2.mean);
        prop_assert_eq!(s1.sigma, s2.sigma);
    }
}
