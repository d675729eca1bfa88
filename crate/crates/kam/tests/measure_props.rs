//! Monotonicity and union-bound properties of the resonance estimates. With a
//! shared seed every query sees the same sample points, so these hold exactly
//! on the hit counts, not just statistically.

use kam::cli::config::{builtin_config, ModeKind};
use kam::cli::runner::measure_query;
use kam::kamstep::enumerate_modes;
use kam::measure::{fit_measure_exponent, resonance_measure, resonance_measures, PolynomialMap, ResonanceQuery};
use kam::series::FourierMode;
use proptest::prelude::*;

fn query(seed: u64, k_max: u32, tau: f64) -> ResonanceQuery {
    ResonanceQuery::new(PolynomialMap::diagonal(&[1.0, 1.7]), vec![(0.5, 1.5), (-1.0, 1.0)], k_max)
        .with_tau(tau)
        .with_samples(4000)
        .with_seed(seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn shrinks_with_gamma(seed in any::<u64>(), g in 0.01f64..0.5) {
        let pts = resonance_measures(&query(seed, 4, 2.0), &[g, g / 2.0, g / 4.0, g / 8.0]).unwrap();
        prop_assert!(pts.windows(2).all(|w| w[1].hits <= w[0].hits));
    }

    #[test]
    fn grows_with_k_max(seed in any::<u64>(), k in 1u32..5) {
        let a = resonance_measure(&query(seed, k, 2.0).with_gamma(0.1)).unwrap();
        let b = resonance_measure(&query(seed, k + 1, 2.0).with_gamma(0.1)).unwrap();
        prop_assert!(a.hits <= b.hits);
    }

    #[test]
    fn shrinks_with_tau(seed in any::<u64>(), tau in 1.1f64..4.0) {
        let a = resonance_measure(&query(seed, 4, tau).with_gamma(0.1)).unwrap();
        let b = resonance_measure(&query(seed, 4, tau + 0.5).with_gamma(0.1)).unwrap();
        prop_assert!(b.hits <= a.hits);
    }

    #[test]
    fn union_bound(seed in any::<u64>()) {
        let q = query(seed, 3, 2.0).with_gamma(0.2);
        let all = resonance_measure(&q).unwrap();
        let modes: Vec<FourierMode> = enumerate_modes(2, 3)
            .into_iter()
            .filter(|k| k.0.iter().find(|&&x| x != 0).is_some_and(|&x| x > 0))
            .collect();
        let sum: u64 = modes
            .iter()
            .map(|k| resonance_measure(&q.clone().with_modes(vec![k.clone()])).unwrap().hits)
            .sum();
        prop_assert!(all.hits <= sum);
        prop_assert!(all.estimate <= sum as f64 / q.sample_count as f64 * q.volume() + 1e-15);
    }

    #[test]
    fn seeded_runs_repeat(seed in any::<u64>()) {
        let q = query(seed, 3, 2.0).with_gamma(0.1);
        prop_assert_eq!(resonance_measure(&q).unwrap(), resonance_measure(&q).unwrap());
    }
}

#[test]
fn distinct_seeds_give_distinct_samples() {
    let a = resonance_measure(&query(1, 4, 2.0).with_gamma(0.3)).unwrap();
    let b = resonance_measure(&query(2, 4, 2.0).with_gamma(0.3)).unwrap();
    assert_ne!(a.hits, b.hits);
}

/// The built-in example's frequency map: positive exponent, monotone estimates.
#[test]
fn example_frequency_map_shrinks() {
    let cfg = builtin_config(ModeKind::Full);
    let spec = cfg.build_spec().unwrap();
    let m = cfg.measure.clone().unwrap();
    let q = measure_query(&cfg, &spec).unwrap().with_samples(100_000);
    let fit = fit_measure_exponent(&q, &m.gammas, cfg.n() - 1).unwrap();
    assert!(fit.beta > 0.0, "beta = {}", fit.beta);
    assert!(fit.points.windows(2).all(|w| w[1].estimate <= w[0].estimate));
}
