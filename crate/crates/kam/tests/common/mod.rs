//! Random test objects shared by the integration suites.
#![allow(dead_code)]

use kam::model::{NormalForm, ScaleSet};
use kam::series::FourierTaylorSeries;
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_mode(rng: &mut ChaCha8Rng, n: usize, k_max: i64) -> Vec<i64> {
    loop {
        let k: Vec<i64> = (0..n).map(|_| rng.random_range(-k_max..=k_max)).collect();
        if k.iter().map(|x| x.abs()).sum::<i64>() <= k_max {
            return k;
        }
    }
}

fn random_index(rng: &mut ChaCha8Rng, n: usize, deg: u32) -> Vec<u32> {
    let total = rng.random_range(0..=deg);
    let mut j = vec![0u32; n];
    for _ in 0..total {
        j[rng.random_range(0..n)] += 1;
    }
    j
}

/// A real series with `count` random conjugate pairs, `|k| ≤ k_max`, `|j| ≤ deg`.
pub fn random_real_series(rng: &mut ChaCha8Rng, n: usize, k_max: i64, deg: u32, count: usize, size: f64) -> FourierTaylorSeries<f64> {
    let mut terms = Vec::new();
    for _ in 0..count {
        let k = random_mode(rng, n, k_max);
        let j = random_index(rng, n, deg);
        let c = Complex::new(rng.random_range(-size..size), rng.random_range(-size..size));
        if k.iter().all(|&x| x == 0) {
            terms.push((k, j, Complex::new(c.re, 0.0)));
        } else {
            let nk = k.iter().map(|x| -x).collect();
            terms.push((nk, j.clone(), c.conj()));
            terms.push((k, j, c));
        }
    }
    FourierTaylorSeries::from_terms(n, terms, true).expect("conjugate pairs are real")
}

/// A real angle-free polynomial of degree `≤ deg`.
pub fn random_polynomial(rng: &mut ChaCha8Rng, n: usize, deg: u32, count: usize, size: f64) -> FourierTaylorSeries<f64> {
    let terms: Vec<_> = (0..count)
        .map(|_| (vec![0i64; n], random_index(rng, n, deg), Complex::new(rng.random_range(-size..size), 0.0)))
        .collect();
    FourierTaylorSeries::from_terms(n, terms, true).expect("polynomial is real")
}

/// Draws `ω ∈ [1, 2]ⁿ` until `|⟨k,ω⟩| ≥ γ/|k|^τ` for all `0 < |k| ≤ k_max`.
pub fn diophantine_omega(rng: &mut ChaCha8Rng, n: usize, k_max: u32, gamma: f64, tau: f64) -> Vec<f64> {
    let modes = kam::kamstep::enumerate_modes(n, k_max);
    loop {
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..2.0)).collect();
        if modes.iter().all(|k| k.dot(&w).abs() >= gamma / (k.norm() as f64).powf(tau)) {
            return w;
        }
    }
}

/// Single-scale normal form `e + ⟨ω,I⟩ + ½⟨I,AI⟩ + cubic terms`.
pub fn random_normal_form(rng: &mut ChaCha8Rng, omega: &[f64], m: u32, ratio: f64) -> NormalForm<f64> {
    let n = omega.len();
    let mut p = FourierTaylorSeries::constant(n, rng.random_range(-1.0..1.0));
    for (l, &w) in omega.iter().enumerate() {
        p = p.add(&FourierTaylorSeries::action(n, l).scale(w)).unwrap();
    }
    let quad = random_polynomial(rng, n, 2, 4, 0.5).select(|_, j| j.order() == 2);
    let cubic = random_polynomial(rng, n, 3, 4, 0.2).select(|_, j| j.order() == 3);
    p = p.add(&quad).unwrap().add(&cubic).unwrap();
    let mut nf = NormalForm::zero(n, ScaleSet::new(vec![1.0], ratio).unwrap(), m);
    nf.set_part_from_series(0, &p);
    nf
}
